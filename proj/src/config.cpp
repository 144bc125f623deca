#include "ctxrefine/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "ctxrefine/hash.hpp"

namespace ctxrefine {

using nlohmann::json;
namespace fs = std::filesystem;

std::string interpolate_env(std::string_view s, std::vector<std::string>* missing) {
  std::string out;
  std::size_t i = 0;
  while (i < s.size()) {
    if (s.compare(i, 3, "$${") == 0) {
      out += "${";
      i += 3;
      continue;
    }
    if (s.compare(i, 2, "${") == 0) {
      const auto end = s.find('}', i + 2);
      if (end == std::string_view::npos) throw ConfigError("unterminated ${ in config value");
      const std::string name(s.substr(i + 2, end - i - 2));
      if (name.empty()) throw ConfigError("empty ${} in config value");
      if (const char* v = std::getenv(name.c_str()))
        out += v;
      else if (missing)
        missing->push_back(name);
      i = end + 1;
      continue;
    }
    out += s[i++];
  }
  return out;
}

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  if (path.is_relative() && !base.empty()) return base / path;
  return path;
}

std::string str(const json& j, const char* key, std::vector<std::string>* missing = nullptr) {
  const auto& v = j.at(key);
  if (!v.is_string()) throw ConfigError(std::string("config field '") + key + "' must be a string");
  return interpolate_env(v.get<std::string>(), missing);
}

std::optional<fs::path> opt_path(const json& j, const char* key, const fs::path& base) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return resolve(base, str(j, key));
}

template <typename T>
T number(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j[key];
  if (!v.is_number()) throw ConfigError(std::string("config field '") + key + "' must be a number");
  if constexpr (std::is_unsigned_v<T>) {
    if (v.is_number_integer() && v.get<std::int64_t>() < 0)
      throw ConfigError(std::string("config field '") + key + "' must not be negative");
  }
  return v.get<T>();
}

BackendConfig parse_backend(const json& j) {
  if (!j.is_object()) throw ConfigError("backend entries must be objects");
  BackendConfig b;
  if (j.contains("base_url")) b.base_url = str(j, "base_url", &b.unresolved_env);
  if (j.contains("model")) b.model = str(j, "model");
  if (j.contains("api_key")) b.api_key = str(j, "api_key", &b.unresolved_env);
  if (j.contains("max_concurrency")) {
    b.max_concurrency = number<std::size_t>(j, "max_concurrency", 0);
    if (*b.max_concurrency == 0) throw ConfigError("backend max_concurrency must be at least 1");
  }
  if (j.contains("sampling")) {
    try {
      b.sampling = j["sampling"].get<SamplingParams>();
      b.sampling.validate();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad sampling block: ") + e.what());
    } catch (const ValidationError& e) {
      throw ConfigError(std::string("bad sampling block: ") + e.what());
    }
  }
  return b;
}

std::string file_digest(const std::optional<fs::path>& p) {
  if (!p) return "bundled";
  std::ifstream in(*p, std::ios::binary);
  if (!in) return "missing:" + p->string();
  std::ostringstream ss;
  ss << in.rdbuf();
  return to_hex(fnv1a64(ss.str()));
}

}  // namespace

PipelineConfig parse_config(const json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  PipelineConfig c;
  try {
    if (!doc.contains("seed") || !doc["seed"].is_number_integer())
      throw ConfigError("config must set an integer 'seed'");
    c.seed = doc["seed"].get<std::uint64_t>();
    c.n_queries = number<std::size_t>(doc, "n_queries", 0);
    if (c.n_queries < 1) throw ConfigError("n_queries must be at least 1");
    c.concurrency = number<std::size_t>(doc, "concurrency", c.concurrency);
    if (c.concurrency < 1) throw ConfigError("concurrency must be at least 1");
    if (doc.contains("output_dir")) c.output_dir = resolve(base_dir, str(doc, "output_dir"));
    else c.output_dir = resolve(base_dir, c.output_dir.string());
    if (doc.contains("strategy")) {
      auto s = parse_answer_strategy(str(doc, "strategy"));
      if (!s) throw ConfigError("strategy must be direct_refine or continual_gen");
      c.strategy = *s;
    }

    if (doc.contains("backends")) {
      for (const auto& [role, b] : doc["backends"].items()) {
        if (std::find(kBackendRoles.begin(), kBackendRoles.end(), role) == kBackendRoles.end())
          throw ConfigError("unknown backend role '" + role + "'");
        c.backends[role] = parse_backend(b);
      }
    }

    if (doc.contains("priors")) {
      c.prior_overrides = doc["priors"];
      try {
        c.priors = apply_prior_overrides(default_priors(), c.prior_overrides);
      } catch (const ValidationError& e) {
        throw ConfigError(e.what());
      }
    }

    if (doc.contains("catalogs")) {
      const auto& cat = doc["catalogs"];
      c.icd_catalog = opt_path(cat, "icd", base_dir);
      c.intent_catalog = opt_path(cat, "intents", base_dir);
      c.country_list = opt_path(cat, "countries", base_dir);
    }
    c.query_template = opt_path(doc, "query_template", base_dir);
    c.rubric_path = opt_path(doc, "rubric_path", base_dir);

    if (doc.contains("pricing")) {
      for (const auto& [model, p] : doc["pricing"].items()) {
        ModelPrice price{number<double>(p, "prompt_per_million", 0.0), number<double>(p, "completion_per_million", 0.0)};
        if (price.prompt_per_million < 0 || price.completion_per_million < 0)
          throw ConfigError("negative price for model '" + model + "'");
        c.pricing[model] = price;
      }
    }
    if (doc.contains("budget")) {
      for (const auto& [stage, v] : doc["budget"].items()) {
        if (!v.is_number() || v.get<double>() < 0) throw ConfigError("budget for '" + stage + "' must be >= 0");
        c.budget[stage] = v.get<double>();
      }
    }

    if (doc.contains("filters")) {
      const auto& f = doc["filters"];
      c.filters.min_words = number<std::size_t>(f, "min_words", c.filters.min_words);
      if (f.contains("refusal_phrases")) c.filters.refusal_phrases = f["refusal_phrases"].get<std::vector<std::string>>();
      if (f.contains("filter_refined")) c.filter_refined = f["filter_refined"].get<bool>();
    }
    if (doc.contains("think_delimiters")) {
      const auto& d = doc["think_delimiters"];
      c.delims.open = str(d, "open");
      c.delims.close = str(d, "close");
      if (c.delims.open.empty() || c.delims.close.empty()) throw ConfigError("think delimiters must be non-empty");
    }
    if (doc.contains("retry")) {
      const auto& r = doc["retry"];
      c.retry.max_retries = number<int>(r, "max_retries", c.retry.max_retries);
      c.retry.base_delay = std::chrono::milliseconds(number<std::int64_t>(r, "base_delay_ms", c.retry.base_delay.count()));
      c.retry.max_delay = std::chrono::milliseconds(number<std::int64_t>(r, "max_delay_ms", c.retry.max_delay.count()));
      if (c.retry.max_retries < 0) throw ConfigError("retry.max_retries must be >= 0");
    }
    if (doc.contains("mock")) {
      const auto& m = doc["mock"];
      c.mock.seed = number<std::uint64_t>(m, "seed", 0);
      c.mock.latency_ms = number<std::int64_t>(m, "latency_ms", 0);
      if (m.contains("omit_think_when_contains"))
        c.mock.omit_think_when_contains = m["omit_think_when_contains"].get<std::vector<std::string>>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  const auto doc = json::parse(in, nullptr, false, true);
  if (doc.is_discarded()) throw ConfigError("config file '" + path.string() + "' is not valid JSON");
  return parse_config(doc, path.parent_path());
}

std::string config_fingerprint(const PipelineConfig& c, std::string_view stage, bool mock) {
  json f;
  f["stage"] = stage;
  f["mock"] = mock;
  if (mock) f["mock_cfg"] = {c.mock.seed, c.mock.omit_think_when_contains};
  f["delims"] = {c.delims.open, c.delims.close};
  const auto backend = [&](const char* role) {
    auto it = c.backends.find(role);
    if (it == c.backends.end()) return json{{"model", ""}, {"sampling", SamplingParams{}}};
    return json{{"model", it->second.model}, {"sampling", it->second.sampling}};
  };
  if (stage == "gen-queries") {
    f["seed"] = c.seed;
    json priors = json::array();
    for (const auto& p : c.priors) {
      json support = json::array();
      for (const auto& o : p.support) support.push_back({o.label, o.probability});
      priors.push_back({p.name, support});
    }
    f["priors"] = priors;
    f["catalogs"] = {file_digest(c.icd_catalog), file_digest(c.intent_catalog), file_digest(c.country_list)};
    f["template"] = file_digest(c.query_template);
    f["generator"] = backend("generator");
  } else if (stage == "distill") {
    f["teacher"] = backend("teacher");
    f["filters"] = {c.filters.min_words, c.filters.refusal_phrases};
  } else if (stage == "refine") {
    f["student"] = backend("student");
    f["strategy"] = to_string(c.strategy);
    f["filters"] = {c.filters.min_words, c.filters.refusal_phrases, c.filter_refined};
  } else if (stage == "score") {
    f["student"] = backend("student");
    f["judge"] = backend("judge");
    f["rubric"] = file_digest(c.rubric_path);
  }
  return to_hex(fnv1a64(f.dump()));
}

Catalogs load_catalogs(const PipelineConfig& c) {
  const auto dir = bundled_data_dir();
  Catalogs cat;
  cat.icd = load_icd_catalog(c.icd_catalog.value_or(dir / "icd10_sample.tsv"));
  cat.intents = load_intent_catalog(c.intent_catalog.value_or(dir / "intents.json"));
  cat.countries = load_country_list(c.country_list.value_or(dir / "countries.txt"));
  return cat;
}

}  // namespace ctxrefine
