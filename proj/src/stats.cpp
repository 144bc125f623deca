#include "ctxrefine/stats.hpp"

#include <algorithm>
#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <cstdio>
#include <limits>

#include "ctxrefine/dataset_io.hpp"

namespace ctxrefine {

using nlohmann::json;

double AttributeFit::frequency(const std::string& label) const {
  if (n == 0) return 0.0;
  auto it = counts.find(label);
  return it == counts.end() ? 0.0 : static_cast<double>(it->second) / static_cast<double>(n);
}

const AttributeFit& DistributionReport::fit(std::string_view attribute) const {
  for (const auto& f : fits)
    if (f.attribute == attribute) return f;
  throw ValidationError("no fit for attribute '" + std::string(attribute) + "'");
}

namespace {

double upper_tail(double stat, int dof) {
  if (dof <= 0) return 1.0;
  boost::math::chi_squared_distribution<double> dist(dof);
  return boost::math::cdf(boost::math::complement(dist, stat));
}

// Adds one goodness-of-fit block into `fit` without finalizing p.
void accumulate(AttributeFit& fit, const std::map<std::string, std::size_t>& counts,
                const std::map<std::string, double>& expected) {
  std::size_t n = 0;
  for (const auto& [_, c] : counts) n += c;
  int categories = 0;
  for (const auto& [label, p] : expected) {
    if (p <= 0.0) continue;
    ++categories;
    const double e = p * static_cast<double>(n);
    const auto it = counts.find(label);
    const double o = it == counts.end() ? 0.0 : static_cast<double>(it->second);
    if (e > 0.0) fit.chi_square += (o - e) * (o - e) / e;
  }
  if (n > 0) fit.dof += categories - 1;
  for (const auto& [label, c] : counts) {
    auto it = expected.find(label);
    if (c > 0 && (it == expected.end() || it->second <= 0.0)) fit.unexpected.push_back(label);
  }
}

void finalize(AttributeFit& fit) {
  if (!fit.unexpected.empty()) {
    fit.chi_square = std::numeric_limits<double>::infinity();
    fit.p_value = 0.0;
    return;
  }
  if (fit.dof <= 0) {
    fit.exact_match = true;
    fit.p_value = 1.0;
    return;
  }
  fit.p_value = upper_tail(fit.chi_square, fit.dof);
}

std::map<std::string, double> support_of(const AttributePrior& p) {
  std::map<std::string, double> out;
  for (const auto& o : p.support) out[o.label] = o.probability;
  return out;
}

}  // namespace

AttributeFit fit_categorical(std::string attribute, const std::map<std::string, std::size_t>& counts,
                             const std::map<std::string, double>& expected) {
  AttributeFit fit;
  fit.attribute = std::move(attribute);
  fit.counts = counts;
  fit.expected = expected;
  for (const auto& [_, c] : counts) fit.n += c;
  accumulate(fit, counts, expected);
  finalize(fit);
  return fit;
}

DistributionReport distribution_report(std::span<const AttributeSet> sets, std::span<const AttributePrior> priors,
                                       const Catalogs& catalogs) {
  DistributionReport report;
  report.n = sets.size();

  for (const auto& prior : priors) {
    if (prior.source != PriorSource::inline_support) continue;
    const auto expected = support_of(prior);
    std::map<std::string, std::size_t> counts;
    for (const auto& a : sets) {
      std::string v;
      if (prior.name == attr::kRole) v = to_string(a.role);
      else if (prior.name == attr::kLocality) v = to_string(a.locality);
      else if (prior.name == attr::kIntentVagueness) v = to_string(a.intent_vagueness);
      else if (prior.name == attr::kInfoCompleteness) v = to_string(a.info_completeness);
      else if (prior.name == attr::kLanguageStyle) v = to_string(a.language_style);
      else if (prior.name == attr::kCountry) {
        v = a.country;
        if (!expected.contains(v) && expected.contains(std::string(kOtherCountry))) v = kOtherCountry;
      }
      ++counts[v];
    }
    report.fits.push_back(fit_categorical(prior.name, counts, expected));
  }

  {
    std::map<std::string, double> expected;
    const double p = 1.0 / static_cast<double>(std::max<std::size_t>(1, catalogs.icd.entries.size()));
    for (const auto& e : catalogs.icd.entries) expected[e.code] = p;
    std::map<std::string, std::size_t> counts;
    for (const auto& a : sets) ++counts[a.disease.icd_code];
    report.fits.push_back(fit_categorical(std::string(attr::kDisease), counts, expected));
  }

  {
    AttributeFit fit;
    fit.attribute = attr::kIntent;
    std::map<UserRole, std::map<std::string, std::size_t>> by_role;
    for (const auto& a : sets) {
      ++by_role[a.role][a.intent.category];
      ++report.intent_by_role[std::string(to_string(a.role))][a.intent.category];
      ++fit.counts[a.intent.category];
      ++fit.n;
    }
    for (const auto& [role, counts] : by_role) {
      const auto& intents = catalogs.intents.for_role(role);
      std::map<std::string, double> expected;
      for (const auto& i : intents) expected[i.label] = 1.0 / static_cast<double>(intents.size());
      accumulate(fit, counts, expected);
    }
    std::sort(fit.unexpected.begin(), fit.unexpected.end());
    fit.unexpected.erase(std::unique(fit.unexpected.begin(), fit.unexpected.end()), fit.unexpected.end());
    finalize(fit);
    report.fits.push_back(std::move(fit));
  }
  return report;
}

std::vector<AttributeSet> read_attribute_sets(const std::filesystem::path& queries_file) {
  std::vector<AttributeSet> out;
  for_each_line(queries_file, [&](std::size_t line_no, std::string_view line) {
    const auto j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw IngestError("query file line is not valid JSON", line_no);
    try {
      out.push_back(decode_query(j).attribute_set);
    } catch (const Error& e) {
      throw IngestError(e.what(), line_no);
    }
  });
  if (out.empty()) throw ValidationError("query file '" + queries_file.string() + "' is empty");
  return out;
}

json encode(const DistributionReport& r) {
  json fits = json::array();
  for (const auto& f : r.fits) {
    json freq = json::object();
    for (const auto& [label, _] : f.counts) freq[label] = f.frequency(label);
    fits.push_back({{"attribute", f.attribute},
                    {"n", f.n},
                    {"counts", f.counts},
                    {"frequencies", freq},
                    {"expected", f.expected},
                    {"chi_square", std::isfinite(f.chi_square) ? json(f.chi_square) : json(nullptr)},
                    {"dof", f.dof},
                    {"p_value", f.p_value},
                    {"exact_match", f.exact_match},
                    {"unexpected", f.unexpected}});
  }
  return {{"n", r.n}, {"attributes", fits}, {"intent_by_role", r.intent_by_role}};
}

std::string format_report(const DistributionReport& r) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "queries: %zu\n\n%-18s %10s %5s %12s  %s\n", r.n, "attribute", "chi2", "dof",
                "p", "note");
  out += buf;
  for (const auto& f : r.fits) {
    std::string note;
    if (f.exact_match) note = "exact match";
    if (!f.unexpected.empty()) note = std::to_string(f.unexpected.size()) + " label(s) outside the prior";
    std::snprintf(buf, sizeof buf, "%-18s %10.3f %5d %12.6g  %s\n", f.attribute.c_str(), f.chi_square, f.dof,
                  f.p_value, note.c_str());
    out += buf;
  }
  for (const auto& f : r.fits) {
    if (f.expected.size() > 8) continue;
    out += "\n" + f.attribute + "\n";
    for (const auto& [label, p] : f.expected) {
      std::snprintf(buf, sizeof buf, "  %-24s observed %.4f  expected %.4f\n", label.c_str(),
                    f.frequency(label), p);
      out += buf;
    }
  }
  out += "\nintent by role\n";
  for (const auto& [role, counts] : r.intent_by_role) {
    out += "  " + role + ":";
    for (const auto& [label, c] : counts) out += " " + label + "=" + std::to_string(c);
    out += "\n";
  }
  return out;
}

}  // namespace ctxrefine
