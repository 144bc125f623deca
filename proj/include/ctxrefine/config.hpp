#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ctxrefine/attributes.hpp"
#include "ctxrefine/distillation.hpp"
#include "ctxrefine/gateway.hpp"
#include "ctxrefine/refinement.hpp"
#include "json.hpp"

namespace ctxrefine {

struct BackendConfig {
  std::string base_url;
  std::string model;
  std::string api_key;
  std::optional<std::size_t> max_concurrency;
  SamplingParams sampling;
  // Environment variables referenced by this block that were not set.
  std::vector<std::string> unresolved_env;
};

struct MockConfig {
  std::uint64_t seed = 0;
  std::int64_t latency_ms = 0;
  std::vector<std::string> omit_think_when_contains;
};

// Everything a run needs. Loaded from one JSON file; string values may
// reference environment variables as ${NAME}. Relative paths resolve against
// the directory holding the config file.
struct PipelineConfig {
  std::uint64_t seed = 0;
  std::size_t n_queries = 0;
  std::size_t concurrency = 8;
  std::filesystem::path output_dir = "run";
  AnswerStrategy strategy = AnswerStrategy::direct_refine;

  std::map<std::string, BackendConfig> backends;  // generator, teacher, student, judge
  std::vector<AttributePrior> priors = default_priors();
  nlohmann::json prior_overrides;  // as given, kept for the fingerprint

  std::optional<std::filesystem::path> icd_catalog;
  std::optional<std::filesystem::path> intent_catalog;
  std::optional<std::filesystem::path> country_list;
  std::optional<std::filesystem::path> query_template;
  std::optional<std::filesystem::path> rubric_path;

  std::map<std::string, ModelPrice, std::less<>> pricing;
  std::map<std::string, double> budget;  // stage name -> max spend

  FilterOptions filters;
  bool filter_refined = true;
  ThinkDelimiters delims;
  RetryPolicy retry;
  MockConfig mock;
};

inline constexpr std::array<std::string_view, 4> kBackendRoles = {"generator", "teacher", "student", "judge"};

// Replaces ${NAME} with the variable's value. Unset names expand to "" and
// are appended to `missing`. "$${" yields a literal "${".
std::string interpolate_env(std::string_view s, std::vector<std::string>* missing = nullptr);

PipelineConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
PipelineConfig load_config(const std::filesystem::path& path);

// Hash of the settings that determine a stage's outputs. Concurrency,
// budgets, endpoints, credentials and n_queries are left out so a run can
// be resumed with a different worker count or a larger target.
std::string config_fingerprint(const PipelineConfig& c, std::string_view stage, bool mock);

Catalogs load_catalogs(const PipelineConfig& c);

}  // namespace ctxrefine
