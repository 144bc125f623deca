#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ctxrefine/attributes.hpp"
#include "json.hpp"

namespace ctxrefine {

struct AttributeFit {
  std::string attribute;
  std::size_t n = 0;
  std::map<std::string, std::size_t> counts;
  std::map<std::string, double> expected;  // prior probability per label
  double chi_square = 0.0;
  int dof = 0;
  double p_value = 1.0;
  // Single-category prior and every observation on it: p is reported as 1.
  bool exact_match = false;
  // Observed labels outside the prior's support; any of these forces p = 0.
  std::vector<std::string> unexpected;

  double frequency(const std::string& label) const;
};

struct DistributionReport {
  std::size_t n = 0;
  std::vector<AttributeFit> fits;
  std::map<std::string, std::map<std::string, std::size_t>> intent_by_role;

  const AttributeFit& fit(std::string_view attribute) const;
};

// Pearson chi-square goodness of fit against `expected` probabilities.
// Labels with zero prior probability are treated as outside the support.
AttributeFit fit_categorical(std::string attribute, const std::map<std::string, std::size_t>& counts,
                             const std::map<std::string, double>& expected);

// Inline priors are tested directly. Concrete countries count toward
// "other" when it is part of the country prior. Disease is tested against a
// uniform draw over the catalog, intent against a uniform draw within each
// role's set (chi-square summed over roles).
DistributionReport distribution_report(std::span<const AttributeSet> sets, std::span<const AttributePrior> priors,
                                       const Catalogs& catalogs);

// Reads the attribute sets of a query file. Throws ValidationError if it
// holds no queries.
std::vector<AttributeSet> read_attribute_sets(const std::filesystem::path& queries_file);

nlohmann::json encode(const DistributionReport& r);
std::string format_report(const DistributionReport& r);

}  // namespace ctxrefine
