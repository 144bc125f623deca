#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ctxrefine/config.hpp"
#include "ctxrefine/dataset_io.hpp"
#include "ctxrefine/gateway.hpp"
#include "ctxrefine/stats.hpp"
#include "json.hpp"

namespace ctxrefine {

enum class Stage { gen_queries, distill, refine, export_sft, score };

std::string_view to_string(Stage s);
std::optional<Stage> parse_stage(std::string_view s);

struct RunOptions {
  bool resume = false;
  std::optional<std::size_t> limit;  // process at most this many pending items
  std::string export_target = "all";  // kd, sr or all
};

struct StageSummary {
  std::string stage;
  std::size_t attempted = 0;
  std::size_t succeeded = 0;
  std::size_t skipped = 0;   // already done by an earlier run
  std::size_t rejected = 0;  // filtered, duplicate or unparseable
  std::size_t failed = 0;    // backend errors
  std::optional<double> cost;  // unset when a model has no price
  std::vector<std::pair<std::string, ExportSummary>> exports;
};

nlohmann::json encode(const StageSummary& s);

// Output layout under the configured output directory.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path queries() const { return root / "queries.jsonl"; }
  std::filesystem::path queries_rejects() const { return root / "queries.rejects.jsonl"; }
  std::filesystem::path distill() const { return root / "distill.jsonl"; }
  std::filesystem::path distill_rejects() const { return root / "distill.rejects.jsonl"; }
  std::filesystem::path refine() const { return root / "refine.jsonl"; }
  std::filesystem::path refine_rejects() const { return root / "refine.rejects.jsonl"; }
  std::filesystem::path export_dir() const { return root / "export"; }
  std::filesystem::path sft(TrainingStage s) const;
  std::filesystem::path manifest(TrainingStage s) const;
  std::filesystem::path score_dir() const { return root / "score"; }
  std::filesystem::path score_reports() const { return score_dir() / "reports.jsonl"; }
  std::filesystem::path score_rejects() const { return score_dir() / "reports.rejects.jsonl"; }
  std::filesystem::path score_summary() const { return score_dir() / "summary.json"; }
  std::filesystem::path stats() const { return root / "stats.json"; }
  std::filesystem::path checkpoint(Stage s) const;
};

// Runs one stage at a time. Every stage appends to line-delimited outputs
// and, on resume, skips ids already present in its outputs or rejects.
class Pipeline {
 public:
  Pipeline(PipelineConfig config, bool mock);

  StageSummary run(Stage stage, const RunOptions& options = {});

  // Distribution report over a query file (the run's own by default);
  // also written to stats.json when the run's file is used.
  DistributionReport stats(const std::optional<std::filesystem::path>& queries_file = std::nullopt);

  // Replaces the backend for one role (generator, teacher, student, judge).
  void set_backend(const std::string& role, std::shared_ptr<ChatBackend> backend);

  const PipelineConfig& config() const noexcept { return config_; }
  const RunLayout& layout() const noexcept { return layout_; }
  UsageLedger& ledger() noexcept { return *ledger_; }
  std::string model_for(const std::string& role) const;

 private:
  Gateway& gateway(const std::string& role);
  std::shared_ptr<ChatBackend> make_backend(const std::string& role) const;
  void prepare(Stage stage, const RunOptions& options, const std::vector<std::filesystem::path>& outputs);
  void finish(Stage stage, const StageSummary& summary);
  std::optional<double> stage_cost(Stage stage) const;
  void check_budget_pricing(Stage stage, const std::vector<std::string>& roles) const;
  bool over_budget(Stage stage) const;

  StageSummary run_gen_queries(const RunOptions& options);
  StageSummary run_distill(const RunOptions& options);
  StageSummary run_refine(const RunOptions& options);
  StageSummary run_export(const RunOptions& options);
  StageSummary run_score(const RunOptions& options);

  PipelineConfig config_;
  bool mock_;
  RunLayout layout_;
  std::shared_ptr<UsageLedger> ledger_;
  std::map<std::string, std::shared_ptr<ChatBackend>> backends_;
  std::map<std::string, std::unique_ptr<Gateway>> gateways_;
};

}  // namespace ctxrefine
