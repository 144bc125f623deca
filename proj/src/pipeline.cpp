#include "ctxrefine/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <fstream>
#include <set>
#include <unordered_set>

#include "ctxrefine/backends.hpp"
#include "ctxrefine/distillation.hpp"
#include "ctxrefine/parallel.hpp"
#include "ctxrefine/query_synth.hpp"
#include "ctxrefine/refinement.hpp"
#include "ctxrefine/rubric.hpp"
#include "ctxrefine/tags.hpp"
#include "ctxrefine/text.hpp"

namespace ctxrefine {

using nlohmann::json;
namespace fs = std::filesystem;

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::gen_queries: return "gen-queries";
    case Stage::distill: return "distill";
    case Stage::refine: return "refine";
    case Stage::export_sft: return "export";
    case Stage::score: return "score";
  }
  return "?";
}

std::optional<Stage> parse_stage(std::string_view s) {
  for (auto st : {Stage::gen_queries, Stage::distill, Stage::refine, Stage::export_sft, Stage::score})
    if (to_string(st) == s) return st;
  return std::nullopt;
}

json encode(const StageSummary& s) {
  json j = {{"stage", s.stage},
            {"attempted", s.attempted},
            {"succeeded", s.succeeded},
            {"skipped", s.skipped},
            {"rejected", s.rejected},
            {"failed", s.failed},
            {"cost", s.cost ? json(*s.cost) : json(nullptr)}};
  if (!s.exports.empty()) {
    json ex = json::object();
    for (const auto& [name, e] : s.exports) ex[name] = {{"written", e.written}, {"skipped", e.skipped}, {"bytes", e.bytes}};
    j["exports"] = ex;
  }
  return j;
}

fs::path RunLayout::sft(TrainingStage s) const { return export_dir() / ("sft_" + std::string(to_string(s)) + ".jsonl"); }

fs::path RunLayout::manifest(TrainingStage s) const {
  return export_dir() / ("manifest_" + std::string(to_string(s)) + ".json");
}

fs::path RunLayout::checkpoint(Stage s) const { return root / ".checkpoint" / (std::string(to_string(s)) + ".json"); }

namespace {

// Ids already settled in a stage's outputs; every recorded outcome is final.
std::unordered_set<std::string> completed_ids(const std::vector<fs::path>& files, const char* key) {
  std::unordered_set<std::string> ids;
  for (const auto& f : files) {
    if (!fs::exists(f)) continue;
    for_each_line(f, [&](std::size_t line_no, std::string_view line) {
      const auto j = json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object() || !j.contains(key) || !j[key].is_string())
        throw IngestError("unreadable line in '" + f.string() + "'", line_no);
      ids.insert(j[key].get<std::string>());
    });
  }
  return ids;
}

std::vector<SynthQuery> read_queries(const fs::path& path) {
  std::vector<SynthQuery> out;
  for_each_line(path, [&](std::size_t line_no, std::string_view line) {
    const auto j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw IngestError("query file line is not valid JSON", line_no);
    try {
      out.push_back(decode_query(j));
    } catch (const ValidationError& e) {
      throw IngestError(e.what(), line_no);
    }
  });
  return out;
}

std::string_view tag_prefix(Stage s) {
  switch (s) {
    case Stage::gen_queries: return tags::kGenQueries;
    case Stage::distill: return tags::kDistill;
    case Stage::refine: return "refine.";
    case Stage::score: return "score.";
    case Stage::export_sft: return "";
  }
  return "";
}

bool is_backend_failure(const ItemFailure& f) { return f.reason == "backend_error" || f.reason == "template_error"; }

void require_input(const fs::path& p, Stage stage, std::string_view what) {
  if (!fs::exists(p))
    throw StageOrderError(std::string(to_string(stage)) + " needs " + std::string(what) + " ('" + p.string() +
                          "'); run the earlier stage first");
}

template <typename T>
std::vector<T> take_pending(std::vector<T> items, const std::unordered_set<std::string>& done,
                            const std::function<const std::string&(const T&)>& id_of,
                            std::optional<std::size_t> limit, std::size_t& skipped) {
  std::vector<T> pending;
  for (auto& item : items) {
    if (done.contains(id_of(item))) {
      ++skipped;
      continue;
    }
    if (limit && pending.size() >= *limit) continue;
    pending.push_back(std::move(item));
  }
  return pending;
}

}  // namespace

Pipeline::Pipeline(PipelineConfig config, bool mock)
    : config_(std::move(config)),
      mock_(mock),
      layout_{config_.output_dir},
      ledger_(std::make_shared<UsageLedger>(config_.pricing)) {}

std::string Pipeline::model_for(const std::string& role) const {
  auto it = config_.backends.find(role);
  if (it != config_.backends.end() && !it->second.model.empty()) return it->second.model;
  if (mock_) return "mock-" + role;
  throw ConfigError("backend '" + role + "' has no model configured");
}

void Pipeline::set_backend(const std::string& role, std::shared_ptr<ChatBackend> backend) {
  backends_[role] = std::move(backend);
  gateways_.erase(role);
}

std::shared_ptr<ChatBackend> Pipeline::make_backend(const std::string& role) const {
  if (mock_) {
    MockOptions opts;
    opts.seed = config_.mock.seed;
    opts.latency = std::chrono::milliseconds(config_.mock.latency_ms);
    opts.omit_think_when_contains = config_.mock.omit_think_when_contains;
    opts.think_open = config_.delims.open;
    opts.think_close = config_.delims.close;
    return std::make_shared<MockBackend>(opts);
  }
  auto it = config_.backends.find(role);
  if (it == config_.backends.end()) throw ConfigError("no '" + role + "' backend configured (or pass --mock)");
  const auto& b = it->second;
  if (!b.unresolved_env.empty())
    throw ConfigError("backend '" + role + "' references unset environment variable " + b.unresolved_env.front());
  if (b.base_url.empty()) throw ConfigError("backend '" + role + "' has no base_url");
  if (b.model.empty()) throw ConfigError("backend '" + role + "' has no model");
  HttpBackendConfig http;
  http.base_url = b.base_url;
  http.api_key = b.api_key;
  http.think_open = config_.delims.open;
  http.think_close = config_.delims.close;
  return std::make_shared<OpenAiCompatibleBackend>(http);
}

Gateway& Pipeline::gateway(const std::string& role) {
  auto it = gateways_.find(role);
  if (it != gateways_.end()) return *it->second;
  auto backend = backends_.contains(role) ? backends_[role] : make_backend(role);
  GatewayOptions opts;
  opts.retry = config_.retry;
  opts.max_concurrency = config_.concurrency;
  if (auto b = config_.backends.find(role); b != config_.backends.end() && b->second.max_concurrency)
    opts.max_concurrency = *b->second.max_concurrency;
  auto gw = std::make_unique<Gateway>(std::move(backend), ledger_, opts);
  return *gateways_.emplace(role, std::move(gw)).first->second;
}

static SamplingParams sampling_for(const PipelineConfig& c, const std::string& role) {
  auto it = c.backends.find(role);
  return it == c.backends.end() ? SamplingParams{} : it->second.sampling;
}

std::optional<double> Pipeline::stage_cost(Stage stage) const {
  const auto prefix = tag_prefix(stage);
  if (prefix.empty()) return 0.0;
  double total = 0.0;
  for (const auto& tag : ledger_->stages()) {
    if (!tag.starts_with(prefix)) continue;
    auto c = ledger_->try_stage_cost(tag);
    if (!c) return std::nullopt;
    total += *c;
  }
  return total;
}

void Pipeline::check_budget_pricing(Stage stage, const std::vector<std::string>& roles) const {
  if (!config_.budget.contains(std::string(to_string(stage)))) return;
  for (const auto& role : roles) {
    const auto model = model_for(role);
    if (!config_.pricing.contains(model))
      throw ConfigError("a budget is set for " + std::string(to_string(stage)) + " but model '" + model +
                        "' has no price");
  }
}

bool Pipeline::over_budget(Stage stage) const {
  auto it = config_.budget.find(std::string(to_string(stage)));
  if (it == config_.budget.end()) return false;
  const auto cost = stage_cost(stage);
  return cost && *cost > it->second;
}

void Pipeline::prepare(Stage stage, const RunOptions& options, const std::vector<fs::path>& outputs) {
  const auto ckpt_path = layout_.checkpoint(stage);
  const auto fingerprint = config_fingerprint(config_, to_string(stage), mock_);
  fs::create_directories(ckpt_path.parent_path());
  const bool any_output = std::any_of(outputs.begin(), outputs.end(), [](const auto& p) { return fs::exists(p); });

  if (options.resume && any_output) {
    if (!fs::exists(ckpt_path))
      throw ConfigError("cannot resume " + std::string(to_string(stage)) +
                        ": outputs exist but no checkpoint was recorded; rerun without --resume to start over");
    std::ifstream in(ckpt_path);
    const auto ckpt = json::parse(in, nullptr, false);
    const auto previous = ckpt.is_object() ? ckpt.value("fingerprint", std::string()) : std::string();
    if (previous != fingerprint)
      throw ConfigError("cannot resume " + std::string(to_string(stage)) +
                        ": the settings that shape its outputs changed since it was started (fingerprint " +
                        previous + " != " + fingerprint + "); rerun without --resume to start over");
    for (const auto& p : outputs)
      if (fs::exists(p) && repair_jsonl_tail(p)) spdlog::warn("dropped a partial trailing line from {}", p.string());
  } else {
    for (const auto& p : outputs) fs::remove(p);
  }
  json ckpt = {{"stage", to_string(stage)}, {"fingerprint", fingerprint}, {"started_at", utc_timestamp()}};
  std::ofstream(ckpt_path) << ckpt.dump(2) << '\n';
}

void Pipeline::finish(Stage stage, const StageSummary& summary) {
  const auto ckpt_path = layout_.checkpoint(stage);
  json ckpt = {{"stage", to_string(stage)},
               {"fingerprint", config_fingerprint(config_, to_string(stage), mock_)},
               {"finished_at", utc_timestamp()},
               {"last_run", encode(summary)}};
  std::ofstream(ckpt_path) << ckpt.dump(2) << '\n';
}

StageSummary Pipeline::run(Stage stage, const RunOptions& options) {
  fs::create_directories(layout_.root);
  StageSummary s;
  switch (stage) {
    case Stage::gen_queries: s = run_gen_queries(options); break;
    case Stage::distill: s = run_distill(options); break;
    case Stage::refine: s = run_refine(options); break;
    case Stage::export_sft: s = run_export(options); break;
    case Stage::score: s = run_score(options); break;
  }
  return s;
}

StageSummary Pipeline::run_gen_queries(const RunOptions& options) {
  const auto stage = Stage::gen_queries;
  check_budget_pricing(stage, {"generator"});
  const auto tmpl =
      config_.query_template ? PromptTemplate::from_file(*config_.query_template) : PromptTemplate::from_asset("query_generation");
  check_query_template(tmpl);
  const auto catalogs = load_catalogs(config_);
  auto sets = sample_attribute_sets(config_.priors, catalogs, config_.n_queries, config_.seed);

  prepare(stage, options, {layout_.queries(), layout_.queries_rejects()});
  StageSummary summary;
  summary.stage = to_string(stage);
  const auto done = completed_ids({layout_.queries(), layout_.queries_rejects()}, "query_id");

  // Texts already accepted, so duplicates are caught across resumed runs too.
  std::map<std::string, std::string> seen_text;
  if (fs::exists(layout_.queries())) {
    for (const auto& q : read_queries(layout_.queries())) seen_text.emplace(text::normalize_for_dedup(q.text), q.query_id);
  }

  std::vector<AttributeSet> pending;
  for (auto& a : sets) {
    if (done.contains(make_query_id(a.seed_index))) {
      ++summary.skipped;
      continue;
    }
    if (options.limit && pending.size() >= *options.limit) continue;
    pending.push_back(std::move(a));
  }

  QueryGenOptions qopts;
  qopts.model_id = model_for("generator");
  qopts.sampling = sampling_for(config_, "generator");
  qopts.sample_seed = config_.seed;
  qopts.workers = config_.concurrency;
  qopts.think_close = config_.delims.close;
  auto& gw = gateway("generator");

  JsonlWriter out(layout_.queries(), true);
  JsonlWriter rejects(layout_.queries_rejects(), true);
  bool budget_tripped = false;
  ordered_parallel_map(
      pending.size(), config_.concurrency, [&](std::size_t i) { return generate_query(pending[i], gw, tmpl, qopts); },
      [&](std::size_t, ItemResult<SynthQuery>&& r) {
        ++summary.attempted;
        if (auto* f = std::get_if<ItemFailure>(&r)) {
          rejects.write(encode(*f));
          ++(is_backend_failure(*f) ? summary.failed : summary.rejected);
        } else {
          auto& q = std::get<SynthQuery>(r);
          auto [it, fresh] = seen_text.emplace(text::normalize_for_dedup(q.text), q.query_id);
          if (!fresh) {
            rejects.write(encode(ItemFailure{q.query_id, "gen-queries", "duplicate", "same text as " + it->second}));
            ++summary.rejected;
          } else {
            out.write(encode(q));
            ++summary.succeeded;
          }
        }
        if (over_budget(stage)) budget_tripped = true;
        return !budget_tripped;
      });

  summary.cost = stage_cost(stage);
  finish(stage, summary);
  if (budget_tripped) throw BudgetExceeded("gen-queries stopped: spend exceeded the configured budget");
  return summary;
}

StageSummary Pipeline::run_distill(const RunOptions& options) {
  const auto stage = Stage::distill;
  require_input(layout_.queries(), stage, "the query file");
  check_budget_pricing(stage, {"teacher"});
  auto queries = read_queries(layout_.queries());

  prepare(stage, options, {layout_.distill(), layout_.distill_rejects()});
  StageSummary summary;
  summary.stage = to_string(stage);
  const auto done = completed_ids({layout_.distill(), layout_.distill_rejects()}, "query_id");
  auto pending = take_pending<SynthQuery>(
      std::move(queries), done, [](const SynthQuery& q) -> const std::string& { return q.query_id; }, options.limit,
      summary.skipped);

  DistillOptions dopts;
  dopts.teacher_model = model_for("teacher");
  dopts.sampling = sampling_for(config_, "teacher");
  dopts.delims = config_.delims;
  dopts.workers = config_.concurrency;
  auto& gw = gateway("teacher");

  JsonlWriter out(layout_.distill(), true);
  JsonlWriter rejects(layout_.distill_rejects(), true);
  bool budget_tripped = false;
  ordered_parallel_map(
      pending.size(), config_.concurrency, [&](std::size_t i) { return distill_one(pending[i], gw, dopts); },
      [&](std::size_t, ItemResult<TeacherResponse>&& r) {
        ++summary.attempted;
        if (auto* f = std::get_if<ItemFailure>(&r)) {
          rejects.write(encode(*f));
          ++summary.failed;
        } else {
          const auto& t = std::get<TeacherResponse>(r);
          const auto verdict = filter_response(t, config_.filters);
          if (verdict.kept) {
            out.write(encode(t));
            ++summary.succeeded;
          } else {
            std::string detail = t.parse_error.empty() ? std::to_string(t.word_count_answer) + " words" : t.parse_error;
            rejects.write(encode(ItemFailure{t.query_id, "distill", std::string(to_string(verdict.reason)), detail}));
            ++summary.rejected;
          }
        }
        if (over_budget(stage)) budget_tripped = true;
        return !budget_tripped;
      });

  summary.cost = stage_cost(stage);
  finish(stage, summary);
  if (budget_tripped) throw BudgetExceeded("distill stopped: spend exceeded the configured budget");
  return summary;
}

StageSummary Pipeline::run_refine(const RunOptions& options) {
  const auto stage = Stage::refine;
  require_input(layout_.queries(), stage, "the query file");
  check_budget_pricing(stage, {"student"});
  auto queries = read_queries(layout_.queries());

  prepare(stage, options, {layout_.refine(), layout_.refine_rejects()});
  StageSummary summary;
  summary.stage = to_string(stage);
  const auto done = completed_ids({layout_.refine(), layout_.refine_rejects()}, "query_id");
  auto pending = take_pending<SynthQuery>(
      std::move(queries), done, [](const SynthQuery& q) -> const std::string& { return q.query_id; }, options.limit,
      summary.skipped);

  RefineOptions ropts;
  ropts.model_id = model_for("student");
  ropts.sampling = sampling_for(config_, "student");
  ropts.strategy = config_.strategy;
  ropts.delims = config_.delims;
  ropts.workers = config_.concurrency;
  auto& gw = gateway("student");

  JsonlWriter out(layout_.refine(), true);
  JsonlWriter rejects(layout_.refine_rejects(), true);
  bool budget_tripped = false;
  ordered_parallel_map(
      pending.size(), config_.concurrency, [&](std::size_t i) { return refine_one(pending[i], gw, ropts); },
      [&](std::size_t, ItemResult<RefinementRecord>&& r) {
        ++summary.attempted;
        if (auto* f = std::get_if<ItemFailure>(&r)) {
          rejects.write(encode(*f));
          ++(is_backend_failure(*f) ? summary.failed : summary.rejected);
        } else {
          const auto& rec = std::get<RefinementRecord>(r);
          const auto verdict = config_.filter_refined ? filter_answer(rec.r_prime, config_.filters) : FilterVerdict{true, FilterReason::ok};
          if (verdict.kept) {
            out.write(encode(rec));
            ++summary.succeeded;
          } else {
            rejects.write(encode(ItemFailure{rec.query_id, "refine", std::string(to_string(verdict.reason)),
                                             std::to_string(text::count_words(rec.r_prime)) + " words"}));
            ++summary.rejected;
          }
        }
        if (over_budget(stage)) budget_tripped = true;
        return !budget_tripped;
      });

  summary.cost = stage_cost(stage);
  finish(stage, summary);
  if (budget_tripped) throw BudgetExceeded("refine stopped: spend exceeded the configured budget");
  return summary;
}

StageSummary Pipeline::run_export(const RunOptions& options) {
  const auto stage = Stage::export_sft;
  StageSummary summary;
  summary.stage = to_string(stage);
  const auto& target = options.export_target;
  if (target != "all" && target != "kd" && target != "sr")
    throw ConfigError("export target must be kd, sr or all");

  std::vector<std::pair<TrainingStage, fs::path>> jobs;
  const auto want = [&](TrainingStage s, const fs::path& in) {
    const bool explicit_target = target == to_string(s);
    if (!explicit_target && target != "all") return;
    if (!fs::exists(in)) {
      if (explicit_target) require_input(in, stage, s == TrainingStage::kd ? "distillation records" : "refinement records");
      return;
    }
    jobs.emplace_back(s, in);
  };
  want(TrainingStage::kd, layout_.distill());
  want(TrainingStage::sr, layout_.refine());
  if (jobs.empty())
    throw StageOrderError("export needs distillation or refinement records; run distill or refine first");

  fs::create_directories(layout_.export_dir());
  for (const auto& [ts, in] : jobs) {
    const auto ds = ts == TrainingStage::kd ? DatasetStage::distillation : DatasetStage::self_refinement;
    const auto out = layout_.sft(ts);
    auto ex = export_sft(in, out, ds, config_.delims);
    emit_manifest(to_string(ts), out.filename().string(), layout_.manifest(ts));
    summary.attempted += ex.written + ex.skipped;
    summary.succeeded += ex.written;
    summary.rejected += ex.skipped;
    summary.exports.emplace_back(std::string(to_string(ts)), ex);
    spdlog::info("exported {} {} records to {}", ex.written, to_string(ts), out.string());
  }
  summary.cost = 0.0;
  fs::create_directories(layout_.checkpoint(stage).parent_path());
  finish(stage, summary);
  return summary;
}

StageSummary Pipeline::run_score(const RunOptions& options) {
  const auto stage = Stage::score;
  if (!config_.rubric_path) throw ConfigError("score needs 'rubric_path' in the config");
  if (!fs::exists(*config_.rubric_path))
    throw ConfigError("rubric file '" + config_.rubric_path->string() + "' does not exist");
  auto examples = load_rubric_examples(*config_.rubric_path);
  {
    std::set<std::string> ids;
    for (const auto& ex : examples)
      if (!ids.insert(ex.example_id).second) throw ValidationError("duplicate rubric example id '" + ex.example_id + "'");
  }
  const bool needs_student =
      std::any_of(examples.begin(), examples.end(), [](const auto& ex) { return !ex.response.has_value(); });
  std::vector<std::string> roles{"judge"};
  if (needs_student) roles.push_back("student");
  check_budget_pricing(stage, roles);

  fs::create_directories(layout_.score_dir());
  prepare(stage, options, {layout_.score_reports(), layout_.score_rejects()});
  StageSummary summary;
  summary.stage = to_string(stage);
  const auto done = completed_ids({layout_.score_reports()}, "example_id");
  const auto done_rejects = completed_ids({layout_.score_rejects()}, "query_id");
  std::vector<RubricExample> pending;
  for (auto& ex : examples) {
    if (done.contains(ex.example_id) || done_rejects.contains(ex.example_id)) {
      ++summary.skipped;
      continue;
    }
    if (options.limit && pending.size() >= *options.limit) continue;
    pending.push_back(std::move(ex));
  }

  GradeOptions gopts;
  gopts.judge_model = model_for("judge");
  gopts.sampling = sampling_for(config_, "judge");
  gopts.delims = config_.delims;
  gopts.workers = std::max<std::size_t>(1, config_.concurrency / std::max<std::size_t>(1, pending.size()));
  auto& judge = gateway("judge");
  Gateway* student = needs_student ? &gateway("student") : nullptr;
  const auto student_model = needs_student ? model_for("student") : std::string();
  const auto student_sampling = sampling_for(config_, "student");

  JsonlWriter out(layout_.score_reports(), true);
  JsonlWriter rejects(layout_.score_rejects(), true);
  bool budget_tripped = false;
  ordered_parallel_map(
      pending.size(), config_.concurrency,
      [&](std::size_t i) -> ItemResult<RubricReport> {
        const auto& ex = pending[i];
        std::string response;
        if (ex.response) {
          response = *ex.response;
        } else {
          try {
            auto resp = student->complete(
                {ex.conversation, student_sampling, student_model, std::string(tags::kScoreGenerate)});
            response = std::string(text::trim(strip_thinking(resp.content, config_.delims)));
          } catch (const Error& e) {
            return ItemFailure{ex.example_id, "score", "backend_error", e.what()};
          }
        }
        return grade(ex.example_id, ex.conversation, response, ex.rubric, judge, gopts);
      },
      [&](std::size_t, ItemResult<RubricReport>&& r) {
        ++summary.attempted;
        if (auto* f = std::get_if<ItemFailure>(&r)) {
          rejects.write(encode(*f));
          ++summary.failed;
        } else {
          out.write(encode(std::get<RubricReport>(r)));
          ++summary.succeeded;
        }
        if (over_budget(stage)) budget_tripped = true;
        return !budget_tripped;
      });

  std::vector<RubricReport> all;
  for_each_line(layout_.score_reports(), [&](std::size_t, std::string_view line) {
    all.push_back(decode_rubric_report(json::parse(line)));
  });
  const auto scores = summarize(all);
  std::ofstream(layout_.score_summary()) << encode(scores).dump(2) << '\n';
  if (!all.empty()) spdlog::info("score summary\n{}", format_summary_table(scores));

  summary.cost = stage_cost(stage);
  finish(stage, summary);
  if (budget_tripped) throw BudgetExceeded("score stopped: spend exceeded the configured budget");
  return summary;
}

DistributionReport Pipeline::stats(const std::optional<fs::path>& queries_file) {
  const auto path = queries_file.value_or(layout_.queries());
  if (!fs::exists(path)) {
    if (!queries_file) throw StageOrderError("stats needs the query file ('" + path.string() + "'); run gen-queries first");
    throw IoError("query file '" + path.string() + "' does not exist");
  }
  const auto sets = read_attribute_sets(path);
  const auto report = distribution_report(sets, config_.priors, load_catalogs(config_));
  if (!queries_file) std::ofstream(layout_.stats()) << encode(report).dump(2) << '\n';
  return report;
}

}  // namespace ctxrefine
