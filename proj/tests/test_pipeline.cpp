#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "ctxrefine/errors.hpp"
#include "ctxrefine/pipeline.hpp"
#include "ctxrefine/rubric.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace ctxrefine;
using nlohmann::json;

namespace {

PipelineConfig make_config(const std::filesystem::path& out, std::size_t n, json extra = json::object()) {
  json doc{{"seed", 11}, {"n_queries", n}, {"output_dir", out.string()}, {"mock", {{"seed", 3}}}};
  doc.update(extra);
  return parse_config(doc);
}

std::vector<std::string> ids_in(const std::filesystem::path& p, const std::string& key = "query_id") {
  std::vector<std::string> ids;
  if (!std::filesystem::exists(p)) return ids;
  for_each_line(p, [&](std::size_t, std::string_view line) { ids.push_back(json::parse(line).at(key)); });
  return ids;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void run_all(Pipeline& p) {
  p.run(Stage::gen_queries);
  p.run(Stage::distill);
  p.run(Stage::refine);
  p.run(Stage::export_sft);
}

}  // namespace

TEST_CASE("an interrupted query run resumes to the full set") {
  testing::TempDir dir("resume");
  Pipeline p(make_config(dir.path(), 100), true);
  const auto first = p.run(Stage::gen_queries, {.limit = 40});
  CHECK(first.attempted == 40);
  const auto second = p.run(Stage::gen_queries, {.resume = true});
  CHECK(second.skipped == 40);
  CHECK(second.attempted == 60);

  auto ids = ids_in(dir / "queries.jsonl");
  const auto rejects = ids_in(dir / "queries.rejects.jsonl");
  ids.insert(ids.end(), rejects.begin(), rejects.end());
  CHECK(ids.size() == 100);
  CHECK(std::set(ids.begin(), ids.end()).size() == 100);

  testing::TempDir whole("resume-whole");
  Pipeline q(make_config(whole.path(), 100), true);
  q.run(Stage::gen_queries);
  std::set<std::string> a(ids.begin(), ids.end());
  auto b_ids = ids_in(whole / "queries.jsonl");
  const auto b_rej = ids_in(whole / "queries.rejects.jsonl");
  b_ids.insert(b_ids.end(), b_rej.begin(), b_rej.end());
  CHECK(a == std::set(b_ids.begin(), b_ids.end()));
}

TEST_CASE("stages refuse to run before their inputs exist") {
  testing::TempDir dir("order");
  Pipeline p(make_config(dir.path(), 10), true);
  CHECK_THROWS_AS(p.run(Stage::refine), StageOrderError);
  CHECK_THROWS_AS(p.run(Stage::distill), StageOrderError);
  CHECK_THROWS_AS(p.run(Stage::export_sft), StageOrderError);
}

TEST_CASE("every query ends up in exactly one of outputs or rejects per stage") {
  testing::TempDir dir("conserve");
  Pipeline p(make_config(dir.path(), 200), true);
  run_all(p);

  const auto queries = ids_in(dir / "queries.jsonl");
  const std::set<std::string> qset(queries.begin(), queries.end());
  for (const auto& [out, rej] : {std::pair{"distill.jsonl", "distill.rejects.jsonl"},
                                 std::pair{"refine.jsonl", "refine.rejects.jsonl"}}) {
    auto a = ids_in(dir / out);
    const auto b = ids_in(dir / rej);
    std::set<std::string> sa(a.begin(), a.end());
    for (const auto& id : b) CHECK_FALSE(sa.contains(id));
    a.insert(a.end(), b.begin(), b.end());
    CHECK(a.size() == queries.size());
    CHECK(std::set(a.begin(), a.end()) == qset);
  }

  const auto sr = ids_in(dir / "export/sft_sr.jsonl", "record_id");
  CHECK(sr.size() == queries.size() - ids_in(dir / "refine.rejects.jsonl").size());
  const auto kd = ids_in(dir / "export/sft_kd.jsonl", "record_id");
  CHECK(kd.size() == ids_in(dir / "distill.jsonl").size());
  CHECK(validate_file(dir / "export/sft_sr.jsonl").ok());
  CHECK(validate_file(dir / "export/manifest_kd.json").ok());
}

TEST_CASE("exports do not depend on concurrency") {
  testing::TempDir a("det-a"), b("det-b");
  Pipeline pa(make_config(a.path(), 60, {{"concurrency", 1}}), true);
  Pipeline pb(make_config(b.path(), 60, {{"concurrency", 8}}), true);
  run_all(pa);
  run_all(pb);
  CHECK(slurp(a / "export/sft_kd.jsonl") == slurp(b / "export/sft_kd.jsonl"));
  CHECK(slurp(a / "export/sft_sr.jsonl") == slurp(b / "export/sft_sr.jsonl"));
  CHECK(slurp(a / "export/manifest_sr.json") == slurp(b / "export/manifest_sr.json"));
  CHECK_FALSE(slurp(a / "export/sft_sr.jsonl").empty());
}

TEST_CASE("resuming under a different configuration is refused") {
  testing::TempDir dir("fingerprint");
  Pipeline p(make_config(dir.path(), 20), true);
  p.run(Stage::gen_queries, {.limit = 5});
  Pipeline changed(make_config(dir.path(), 20, {{"seed", 12}}), true);
  CHECK_THROWS_AS(changed.run(Stage::gen_queries, {.resume = true}), ConfigError);
  // Concurrency is not part of the fingerprint.
  Pipeline faster(make_config(dir.path(), 20, {{"concurrency", 2}}), true);
  CHECK_NOTHROW(faster.run(Stage::gen_queries, {.resume = true}));
  CHECK(ids_in(dir / "queries.jsonl").size() + ids_in(dir / "queries.rejects.jsonl").size() == 20);
}

TEST_CASE("a stage stops once its budget is spent") {
  testing::TempDir dir("budget");
  const json pricing{{"mock-generator", {{"prompt_per_million", 1000.0}, {"completion_per_million", 1000.0}}}};
  Pipeline p(make_config(dir.path(), 50, {{"concurrency", 1}, {"pricing", pricing}, {"budget", {{"gen-queries", 0.5}}}}),
             true);
  CHECK_THROWS_AS(p.run(Stage::gen_queries), BudgetExceeded);
  const auto partial = ids_in(dir / "queries.jsonl").size() + ids_in(dir / "queries.rejects.jsonl").size();
  CHECK(partial > 0);
  CHECK(partial < 50);

  Pipeline relaxed(make_config(dir.path(), 50, {{"pricing", pricing}}), true);
  relaxed.run(Stage::gen_queries, {.resume = true});
  CHECK(ids_in(dir / "queries.jsonl").size() + ids_in(dir / "queries.rejects.jsonl").size() == 50);

  Pipeline unpriced(make_config(dir.path(), 50, {{"budget", {{"distill", 1.0}}}}), true);
  CHECK_THROWS_AS(unpriced.run(Stage::distill), ConfigError);
}

TEST_CASE("config strings expand environment variables") {
  ::setenv("CTXREFINE_TEST_KEY", "sk-123", 1);
  ::unsetenv("CTXREFINE_TEST_MISSING");
  std::vector<std::string> missing;
  CHECK(interpolate_env("Bearer ${CTXREFINE_TEST_KEY}", &missing) == "Bearer sk-123");
  CHECK(interpolate_env("$${CTXREFINE_TEST_KEY}", &missing) == "${CTXREFINE_TEST_KEY}");
  CHECK(missing.empty());
  CHECK(interpolate_env("${CTXREFINE_TEST_MISSING}", &missing).empty());
  CHECK(missing == std::vector<std::string>{"CTXREFINE_TEST_MISSING"});

  const auto c = parse_config(json{{"seed", 1},
                                   {"n_queries", 1},
                                   {"backends",
                                    {{"teacher",
                                      {{"base_url", "http://localhost:1"},
                                       {"model", "t"},
                                       {"api_key", "${CTXREFINE_TEST_KEY}"}}}}}});
  CHECK(c.backends.at("teacher").api_key == "sk-123");
}

TEST_CASE("bad configs are config errors") {
  CHECK_THROWS_AS(parse_config(json{{"n_queries", 5}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"seed", 1}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"seed", 1}, {"n_queries", 5}, {"priors", {{"role", {{"patient", 0.5}}}}}}),
                  ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"seed", 1}, {"n_queries", 5}, {"backends", {{"oracle", json::object()}}}}),
                  ConfigError);
}

TEST_CASE("a degenerate role prior gives an exact match and doctor-only intents") {
  testing::TempDir dir("degenerate");
  Pipeline p(make_config(dir.path(), 300, {{"priors", {{"role", {{"doctor", 1.0}}}}}}), true);
  p.run(Stage::gen_queries);
  const auto report = p.stats();
  const auto& role = report.fit("role");
  CHECK(role.exact_match);
  CHECK(role.p_value == 1.0);
  CHECK(role.frequency("doctor") == 1.0);
  CHECK(std::filesystem::exists(dir / "stats.json"));

  const auto catalogs = load_catalogs(p.config());
  std::set<std::string> doctor;
  for (const auto& i : catalogs.intents.doctor_intents) doctor.insert(i.label);
  for (const auto& a : read_attribute_sets(dir / "queries.jsonl")) CHECK(doctor.contains(a.intent.category));
}

TEST_CASE("scoring writes one report per rubric example and a summary") {
  testing::TempDir dir("score");
  Pipeline p(make_config(dir.path(), 5, {{"rubric_path", testing::fixture("rubric_sample.jsonl").string()}}), true);
  const auto s = p.run(Stage::score);
  CHECK(s.succeeded == 3);
  const auto ids = ids_in(dir / "score/reports.jsonl", "example_id");
  CHECK(ids == std::vector<std::string>{"rb-001", "rb-002", "rb-003"});
  for_each_line(dir / "score/reports.jsonl",
                [](std::size_t, std::string_view line) { CHECK_NOTHROW(decode_rubric_report(json::parse(line))); });
  const auto summary = json::parse(slurp(dir / "score/summary.json"));
  CHECK(summary.at("examples") == 3);
  CHECK(summary.at("overall").get<double>() >= 0.0);
  CHECK(summary.at("overall").get<double>() <= 1.0);

  const auto again = p.run(Stage::score, {.resume = true});
  CHECK(again.skipped == 3);
  CHECK(again.attempted == 0);
}
