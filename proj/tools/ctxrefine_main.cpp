#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>

#include "ctxrefine/config.hpp"
#include "ctxrefine/dataset_io.hpp"
#include "ctxrefine/pipeline.hpp"
#include "ctxrefine/stats.hpp"

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kStageOrder = 3, kBudget = 4 };

struct Common {
  std::string config;
  bool resume = false;
  bool mock = false;
  std::size_t limit = 0;
};

void print_summary(const ctxrefine::StageSummary& s) {
  std::printf("%s: attempted %zu, succeeded %zu, skipped %zu, rejected %zu, failed %zu", s.stage.c_str(), s.attempted,
              s.succeeded, s.skipped, s.rejected, s.failed);
  if (s.cost)
    std::printf(", cost %.4f\n", *s.cost);
  else
    std::printf(", cost n/a (unpriced model)\n");
  for (const auto& [name, e] : s.exports)
    std::printf("  %s: written %llu, skipped %llu, %llu bytes\n", name.c_str(),
                static_cast<unsigned long long>(e.written), static_cast<unsigned long long>(e.skipped),
                static_cast<unsigned long long>(e.bytes));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attribute-conditioned query synthesis, self-refinement and distillation data pipeline"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  Common common;
  std::string export_target = "all";
  std::string queries_file;
  bool stats_json = false;
  std::vector<std::string> validate_files;

  const auto add_stage = [&](const char* name, const char* help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", common.config, "Pipeline config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_flag("--resume", common.resume, "Continue an interrupted run, skipping finished items");
    sub->add_option("--limit", common.limit, "Process at most N pending items")->check(CLI::PositiveNumber);
    sub->add_flag("--mock", common.mock, "Use the deterministic offline backend");
    return sub;
  };
  add_stage("gen-queries", "Sample user contexts and generate queries");
  add_stage("distill", "Collect teacher responses and filter them");
  add_stage("refine", "Run facet-based self-refinement with the student");
  add_stage("export", "Write chat-format training files and manifests")
      ->add_option("--stage", export_target, "kd, sr or all")
      ->check(CLI::IsMember({"kd", "sr", "all"}));
  add_stage("score", "Grade responses against a rubric file");

  auto* stats = app.add_subcommand("stats", "Compare sampled attributes with their priors");
  stats->add_option("-c,--config", common.config, "Pipeline config (defaults to the built-in priors)")
      ->check(CLI::ExistingFile);
  stats->add_option("--queries", queries_file, "Query file (defaults to the run's)")->check(CLI::ExistingFile);
  stats->add_flag("--json", stats_json, "Print the report as JSON");

  auto* validate = app.add_subcommand("validate", "Check emitted files against their schemas");
  validate->add_option("files", validate_files, "Files to check")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
  spdlog::set_pattern("[%H:%M:%S] %^%l%$ %v");

  try {
    auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();

    if (name == "validate") {
      bool ok = true;
      for (const auto& f : validate_files) {
        const auto report = ctxrefine::validate_file(f);
        std::printf("%s: %zu record(s), %zu valid\n", f.c_str(), report.records, report.valid);
        for (const auto& issue : report.issues) std::printf("  line %zu: %s\n", issue.line, issue.message.c_str());
        ok = ok && report.ok();
      }
      return ok ? kOk : kFailure;
    }

    if (name == "stats") {
      ctxrefine::PipelineConfig cfg;
      if (!common.config.empty()) {
        cfg = ctxrefine::load_config(common.config);
      } else if (queries_file.empty()) {
        throw ctxrefine::ConfigError("stats needs --config or --queries");
      }
      ctxrefine::Pipeline pipeline(cfg, true);
      std::optional<std::filesystem::path> q;
      if (!queries_file.empty()) q = queries_file;
      const auto report = pipeline.stats(q);
      if (stats_json)
        std::cout << ctxrefine::encode(report).dump(2) << '\n';
      else
        std::cout << ctxrefine::format_report(report);
      return kOk;
    }

    auto cfg = ctxrefine::load_config(common.config);
    ctxrefine::Pipeline pipeline(std::move(cfg), common.mock);
    ctxrefine::RunOptions options;
    options.resume = common.resume;
    if (common.limit > 0) options.limit = common.limit;
    options.export_target = export_target;
    const auto summary = pipeline.run(*ctxrefine::parse_stage(name), options);
    print_summary(summary);
    return kOk;
  } catch (const ctxrefine::ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kConfig;
  } catch (const ctxrefine::StageOrderError& e) {
    spdlog::error("{}", e.what());
    return kStageOrder;
  } catch (const ctxrefine::BudgetExceeded& e) {
    spdlog::error("{}", e.what());
    return kBudget;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kFailure;
  }
}
