#include "ctxrefine/attributes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "ctxrefine/errors.hpp"
#include "ctxrefine/text.hpp"

#ifndef CTXREFINE_DATA_DIR
#define CTXREFINE_DATA_DIR "data"
#endif

namespace ctxrefine {

std::string_view to_string(UserRole v) {
  switch (v) {
    case UserRole::patient: return "patient";
    case UserRole::caregiver: return "caregiver";
    case UserRole::doctor: return "doctor";
  }
  return "?";
}
std::string_view to_string(Locality v) { return v == Locality::urban ? "urban" : "rural"; }
std::string_view to_string(IntentVagueness v) { return v == IntentVagueness::vague ? "vague" : "clear"; }
std::string_view to_string(InfoCompleteness v) {
  return v == InfoCompleteness::complete ? "complete" : "incomplete";
}
std::string_view to_string(LanguageStyle v) { return v == LanguageStyle::formal ? "formal" : "informal"; }

std::optional<UserRole> parse_user_role(std::string_view s) {
  if (s == "patient") return UserRole::patient;
  if (s == "caregiver") return UserRole::caregiver;
  if (s == "doctor") return UserRole::doctor;
  return std::nullopt;
}
std::optional<Locality> parse_locality(std::string_view s) {
  if (s == "urban") return Locality::urban;
  if (s == "rural") return Locality::rural;
  return std::nullopt;
}
std::optional<IntentVagueness> parse_intent_vagueness(std::string_view s) {
  if (s == "vague") return IntentVagueness::vague;
  if (s == "clear") return IntentVagueness::clear;
  return std::nullopt;
}
std::optional<InfoCompleteness> parse_info_completeness(std::string_view s) {
  if (s == "complete") return InfoCompleteness::complete;
  if (s == "incomplete") return InfoCompleteness::incomplete;
  return std::nullopt;
}
std::optional<LanguageStyle> parse_language_style(std::string_view s) {
  if (s == "formal") return LanguageStyle::formal;
  if (s == "informal") return LanguageStyle::informal;
  return std::nullopt;
}

void validate_prior(const AttributePrior& prior) {
  const auto fail = [&](const std::string& why) {
    throw ValidationError("invalid prior '" + prior.name + "': " + why);
  };
  if (prior.source == PriorSource::catalog_ref) {
    if (!prior.support.empty()) fail("catalog-backed prior must not declare an inline support");
    return;
  }
  if (prior.support.empty()) fail("support is empty");
  std::set<std::string_view> seen;
  double total = 0.0;
  for (const auto& o : prior.support) {
    if (!seen.insert(o.label).second) fail("duplicate label '" + o.label + "'");
    if (!(o.probability >= 0.0 && o.probability <= 1.0))
      fail("probability of '" + o.label + "' outside [0,1]");
    total += o.probability;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    std::ostringstream os;
    os.precision(12);
    os << "probabilities sum to " << total << ", expected 1";
    fail(os.str());
  }
}

std::vector<AttributePrior> default_priors() {
  return {
      {std::string(attr::kRole), {{"patient", 0.7}, {"caregiver", 0.2}, {"doctor", 0.1}}, PriorSource::inline_support},
      {std::string(attr::kCountry), {{"USA", 0.8}, {std::string(kOtherCountry), 0.2}}, PriorSource::inline_support},
      {std::string(attr::kLocality), {{"urban", 0.7}, {"rural", 0.3}}, PriorSource::inline_support},
      {std::string(attr::kDisease), {}, PriorSource::catalog_ref},
      {std::string(attr::kIntent), {}, PriorSource::catalog_ref},
      {std::string(attr::kIntentVagueness), {{"vague", 0.3}, {"clear", 0.7}}, PriorSource::inline_support},
      {std::string(attr::kInfoCompleteness), {{"complete", 0.2}, {"incomplete", 0.8}}, PriorSource::inline_support},
      {std::string(attr::kLanguageStyle), {{"formal", 0.5}, {"informal", 0.5}}, PriorSource::inline_support},
  };
}

std::vector<AttributePrior> apply_prior_overrides(std::vector<AttributePrior> priors,
                                                  const nlohmann::json& overrides) {
  if (overrides.is_null()) return priors;
  if (!overrides.is_object()) throw ValidationError("prior overrides must be an object of attribute -> {label: p}");
  for (const auto& [name, support] : overrides.items()) {
    auto it = std::find_if(priors.begin(), priors.end(), [&](const auto& p) { return p.name == name; });
    if (it == priors.end()) throw ValidationError("prior override for unknown attribute '" + name + "'");
    if (it->source == PriorSource::catalog_ref)
      throw ValidationError("attribute '" + name + "' is catalog-backed; override its catalog instead");
    if (!support.is_object() || support.empty())
      throw ValidationError("prior override for '" + name + "' must be a non-empty {label: probability} object");
    it->support.clear();
    for (const auto& [label, p] : support.items()) {
      if (!p.is_number()) throw ValidationError("prior override for '" + name + "': non-numeric probability");
      it->support.push_back({label, p.get<double>()});
    }
    validate_prior(*it);
  }
  return priors;
}

bool icd_category_retained(std::string_view code) {
  if (code.empty()) return false;
  char c = code.front();
  if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
  return c >= 'A' && c <= 'T';
}

namespace {

bool valid_icd_code(std::string_view code) {
  if (code.size() < 3) return false;
  const char c = code.front();
  if (!((c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z'))) return false;
  return std::all_of(code.begin() + 1, code.end(), [](char ch) {
    return (ch >= '0' && ch <= '9') || (ch >= 'A' && ch <= 'Z') || (ch >= 'a' && ch <= 'z') || ch == '.';
  });
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

IcdCatalog parse_icd_catalog(std::string_view content) {
  IcdCatalog catalog;
  std::set<std::string, std::less<>> codes;
  std::size_t line_no = 0;
  for (const auto& raw : text::split_lines(content)) {
    ++line_no;
    std::string_view line = raw;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (text::trim(line).empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) throw IngestError("malformed ICD row: expected code<TAB>name", line_no);
    const auto code = text::trim(line.substr(0, tab));
    const auto name = text::trim(line.substr(tab + 1));
    if (!valid_icd_code(code)) throw IngestError("malformed ICD code '" + std::string(code) + "'", line_no);
    if (name.empty()) throw IngestError("ICD row without a disease name", line_no);
    if (!codes.emplace(code).second) throw IngestError("duplicate ICD code '" + std::string(code) + "'", line_no);
    if (!icd_category_retained(code)) {
      ++catalog.removed_count;
      continue;
    }
    catalog.entries.push_back({std::string(code), std::string(name)});
  }
  if (catalog.entries.empty()) throw IngestError("empty catalog after filtering", 0);
  return catalog;
}

IcdCatalog load_icd_catalog(const std::filesystem::path& path) { return parse_icd_catalog(read_file(path)); }

IntentCatalog parse_intent_catalog(const nlohmann::json& doc) {
  const auto read_set = [&](const char* key) {
    if (!doc.contains(key) || !doc[key].is_array())
      throw IngestError(std::string("intent catalog is missing the '") + key + "' array", 0);
    std::vector<Intent> out;
    std::set<std::string, std::less<>> labels;
    for (const auto& e : doc[key]) {
      Intent intent;
      try {
        intent.label = e.at("label").get<std::string>();
        intent.description = e.at("description").get<std::string>();
        intent.example = e.value("example", std::string{});
      } catch (const nlohmann::json::exception& ex) {
        throw IngestError(std::string("malformed intent entry in '") + key + "': " + ex.what(), 0);
      }
      if (intent.label.empty()) throw IngestError(std::string("intent with empty label in '") + key + "'", 0);
      if (!labels.insert(intent.label).second)
        throw IngestError("duplicate intent label '" + intent.label + "' in '" + key + "'", 0);
      out.push_back(std::move(intent));
    }
    if (out.empty()) throw IngestError(std::string("intent set '") + key + "' is empty", 0);
    return out;
  };
  return IntentCatalog{read_set("patient_caregiver"), read_set("doctor")};
}

IntentCatalog load_intent_catalog(const std::filesystem::path& path) {
  const auto content = read_file(path);
  auto doc = nlohmann::json::parse(content, nullptr, false);
  if (doc.is_discarded()) throw IngestError("intent catalog '" + path.string() + "' is not valid JSON", 0);
  return parse_intent_catalog(doc);
}

std::vector<std::string> load_country_list(const std::filesystem::path& path) {
  std::vector<std::string> out;
  std::set<std::string, std::less<>> seen;
  for (const auto& raw : text::split_lines(read_file(path))) {
    const auto line = text::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    if (seen.emplace(line).second) out.emplace_back(line);
  }
  if (out.empty()) throw IngestError("country list '" + path.string() + "' is empty", 0);
  return out;
}

std::filesystem::path bundled_data_dir() { return CTXREFINE_DATA_DIR; }

Catalogs load_bundled_catalogs() {
  const auto dir = bundled_data_dir();
  return Catalogs{load_icd_catalog(dir / "icd10_sample.tsv"), load_intent_catalog(dir / "intents.json"),
                  load_country_list(dir / "countries.txt")};
}

void to_json(nlohmann::json& j, const AttributeSet& a) {
  j = nlohmann::json{
      {"role", to_string(a.role)},
      {"country", a.country},
      {"locality", to_string(a.locality)},
      {"disease", {{"icd_code", a.disease.icd_code}, {"name", a.disease.name}}},
      {"intent", {{"category", a.intent.category}, {"description", a.intent.description}}},
      {"intent_vagueness", to_string(a.intent_vagueness)},
      {"info_completeness", to_string(a.info_completeness)},
      {"language_style", to_string(a.language_style)},
      {"seed_index", a.seed_index},
  };
}

void from_json(const nlohmann::json& j, AttributeSet& a) {
  const auto need = [&](auto parsed, const char* key) {
    if (!parsed) throw ValidationError(std::string("invalid value for attribute '") + key + "'");
    return *parsed;
  };
  a.role = need(parse_user_role(j.at("role").get<std::string>()), "role");
  a.country = j.at("country").get<std::string>();
  a.locality = need(parse_locality(j.at("locality").get<std::string>()), "locality");
  a.disease.icd_code = j.at("disease").at("icd_code").get<std::string>();
  a.disease.name = j.at("disease").at("name").get<std::string>();
  a.intent.category = j.at("intent").at("category").get<std::string>();
  a.intent.description = j.at("intent").at("description").get<std::string>();
  a.intent_vagueness = need(parse_intent_vagueness(j.at("intent_vagueness").get<std::string>()), "intent_vagueness");
  a.info_completeness =
      need(parse_info_completeness(j.at("info_completeness").get<std::string>()), "info_completeness");
  a.language_style = need(parse_language_style(j.at("language_style").get<std::string>()), "language_style");
  a.seed_index = j.at("seed_index").get<std::uint64_t>();
}

namespace {

// Draws from a single 64-bit Mersenne Twister. The distribution helpers of
// <random> are implementation-defined, so the mapping to values is done here
// to keep samples identical across standard libraries.
class DrawStream {
 public:
  explicit DrawStream(std::uint64_t seed) : engine_(seed) {}

  double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  std::size_t index_below(std::size_t n) {
    return static_cast<std::size_t>((static_cast<unsigned __int128>(engine_()) * n) >> 64);
  }

  std::size_t categorical(const std::vector<double>& cumulative) {
    const double u = unit();
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    if (it == cumulative.end()) return cumulative.size() - 1;
    return static_cast<std::size_t>(it - cumulative.begin());
  }

 private:
  std::mt19937_64 engine_;
};

template <typename Enum>
struct BoundPrior {
  std::vector<Enum> values;
  std::vector<double> cumulative;
};

template <typename Enum, typename Parse>
BoundPrior<Enum> bind(const AttributePrior& prior, Parse parse) {
  BoundPrior<Enum> out;
  double acc = 0.0;
  for (const auto& o : prior.support) {
    auto v = parse(o.label);
    if (!v) throw ValidationError("invalid prior '" + prior.name + "': unknown label '" + o.label + "'");
    acc += o.probability;
    out.values.push_back(*v);
    out.cumulative.push_back(acc);
  }
  return out;
}

const AttributePrior& find_prior(std::span<const AttributePrior> priors, std::string_view name) {
  for (const auto& p : priors)
    if (p.name == name) return p;
  throw ValidationError("missing prior for attribute '" + std::string(name) + "'");
}

}  // namespace

std::vector<AttributeSet> sample_attribute_sets(std::span<const AttributePrior> priors,
                                                const Catalogs& catalogs, std::size_t n,
                                                std::uint64_t seed) {
  if (n == 0) throw ValidationError("sample count must be at least 1");
  for (const auto& p : priors) validate_prior(p);
  if (catalogs.icd.entries.empty()) throw ValidationError("ICD catalog is empty");

  const auto role = bind<UserRole>(find_prior(priors, attr::kRole), parse_user_role);
  const auto locality = bind<Locality>(find_prior(priors, attr::kLocality), parse_locality);
  const auto vagueness = bind<IntentVagueness>(find_prior(priors, attr::kIntentVagueness), parse_intent_vagueness);
  const auto completeness =
      bind<InfoCompleteness>(find_prior(priors, attr::kInfoCompleteness), parse_info_completeness);
  const auto style = bind<LanguageStyle>(find_prior(priors, attr::kLanguageStyle), parse_language_style);
  const auto country = bind<std::string>(find_prior(priors, attr::kCountry),
                                         [](const std::string& s) { return std::optional<std::string>(s); });

  const bool needs_other = std::find(country.values.begin(), country.values.end(), kOtherCountry) != country.values.end();
  if (needs_other && catalogs.countries.empty())
    throw ValidationError("country prior draws 'other' but the country list is empty");
  for (const auto r : role.values) {
    if (catalogs.intents.for_role(r).empty())
      throw ValidationError("no intents available for role '" + std::string(to_string(r)) + "'");
  }

  DrawStream stream(seed);
  std::vector<AttributeSet> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    AttributeSet a;
    a.seed_index = i;
    a.role = role.values[stream.categorical(role.cumulative)];
    a.country = country.values[stream.categorical(country.cumulative)];
    if (a.country == kOtherCountry) a.country = catalogs.countries[stream.index_below(catalogs.countries.size())];
    a.locality = locality.values[stream.categorical(locality.cumulative)];
    const auto& icd = catalogs.icd.entries[stream.index_below(catalogs.icd.entries.size())];
    a.disease = {icd.code, icd.name};
    const auto& intents = catalogs.intents.for_role(a.role);
    const auto& intent = intents[stream.index_below(intents.size())];
    a.intent = {intent.label, intent.description};
    a.intent_vagueness = vagueness.values[stream.categorical(vagueness.cumulative)];
    a.info_completeness = completeness.values[stream.categorical(completeness.cumulative)];
    a.language_style = style.values[stream.categorical(style.cumulative)];
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace ctxrefine
