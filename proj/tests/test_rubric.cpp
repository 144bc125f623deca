#include <algorithm>
#include <fstream>
#include <random>

#include "ctxrefine/errors.hpp"
#include "ctxrefine/rubric.hpp"
#include "ctxrefine/tags.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace ctxrefine;
using nlohmann::json;

namespace {

RubricCriterion crit(int points, std::string axis = "accuracy", std::string theme = "t") {
  return {"criterion " + std::to_string(points), points, std::move(axis), std::move(theme)};
}

double score(const std::vector<RubricCriterion>& rubric, std::vector<char> met) {
  auto flags = std::make_unique<bool[]>(met.size());
  for (std::size_t i = 0; i < met.size(); ++i) flags[i] = met[i];
  return clamped_score(rubric, std::span<const bool>(flags.get(), met.size()));
}

// Independent oracle: straight from the definition.
double oracle(const std::vector<RubricCriterion>& rubric, const std::vector<char>& met) {
  long num = 0, den = 0;
  for (std::size_t i = 0; i < rubric.size(); ++i) {
    if (rubric[i].points > 0) den += rubric[i].points;
    if (met[i]) num += rubric[i].points;
  }
  const double s = static_cast<double>(num) / static_cast<double>(den);
  return s < 0 ? 0 : s > 1 ? 1 : s;
}

std::vector<Message> convo() { return {{MessageRole::user, "Is my rash serious?"}}; }

}  // namespace

TEST_CASE("fixture rubrics score as defined") {
  CHECK(score({crit(5), crit(5)}, {1, 0}) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(score({crit(5), crit(5)}, {1, 1}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(score({crit(5), crit(-10)}, {1, 1}) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(score({crit(5), crit(-10)}, {0, 0}) == 0.0);
  CHECK(score({crit(4), crit(-1)}, {1, 1}) == doctest::Approx(0.75));
}

TEST_CASE("rubrics without positive points or with zero points are invalid") {
  CHECK_THROWS_AS(score({crit(-3)}, {1}), ValidationError);
  CHECK_THROWS_AS(validate_criterion(crit(0)), ValidationError);
  CHECK_THROWS_AS(validate_criterion(crit(3, "style")), ValidationError);
  CHECK_NOTHROW(validate_criterion(crit(3, "context_awareness")));
}

TEST_CASE("axis and theme subsets without positive points are left out") {
  const std::vector<RubricCriterion> rubric{crit(6, "accuracy", "a"), crit(-4, "completeness", "a"),
                                            crit(2, "context_awareness", "b")};
  const bool met[] = {true, true, false};
  const auto s = aggregate_scores(rubric, met);
  CHECK(s.example_score == doctest::Approx(2.0 / 8.0));
  CHECK(s.axis_scores.size() == 2);
  CHECK(s.axis_scores.at("accuracy") == 1.0);
  CHECK(s.axis_scores.at("context_awareness") == 0.0);
  CHECK(s.theme_scores.at("a") == doctest::Approx(2.0 / 6.0));
  CHECK(s.theme_scores.at("b") == 0.0);
}

TEST_CASE("scores are monotone in met criteria over 10000 random rubrics") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t n = 1 + rng() % 12;
    std::vector<RubricCriterion> rubric;
    std::vector<char> met(n);
    for (std::size_t i = 0; i < n; ++i) {
      int p = 1 + static_cast<int>(rng() % 10);
      if (rng() % 3 == 0) p = -p;
      rubric.push_back(crit(p));
      met[i] = rng() % 2;
    }
    if (std::none_of(rubric.begin(), rubric.end(), [](auto& c) { return c.points > 0; })) rubric[0].points = 5;
    const double base = score(rubric, met);
    REQUIRE(base == doctest::Approx(oracle(rubric, met)).epsilon(1e-12));
    REQUIRE(base >= 0.0);
    REQUIRE(base <= 1.0);
    const std::size_t k = rng() % n;
    if (met[k]) continue;
    auto flipped = met;
    flipped[k] = 1;
    const double after = score(rubric, flipped);
    if (rubric[k].points > 0) REQUIRE(after >= base);
    else REQUIRE(after <= base);
  }
}

TEST_CASE("judge replies are parsed") {
  CHECK(parse_judge_verdict("MET\nThe response advises care.") == JudgeVerdict::met);
  CHECK(parse_judge_verdict("UNMET\nNo.") == JudgeVerdict::unmet);
  CHECK(parse_judge_verdict("**MET**") == JudgeVerdict::met);
  CHECK(parse_judge_verdict("Verdict: UNMET") == JudgeVerdict::unmet);
  CHECK(parse_judge_verdict("NOT MET") == JudgeVerdict::unmet);
  CHECK(parse_judge_verdict("<think>hmm</think>MET") == JudgeVerdict::met);
  CHECK(parse_judge_verdict(R"({"explanation": "ok", "criteria_met": true})") == JudgeVerdict::met);
  CHECK(parse_judge_verdict(R"({"criteria_met": false})") == JudgeVerdict::unmet);
  CHECK(parse_judge_verdict("I am not sure.") == JudgeVerdict::unparseable);
  CHECK(parse_judge_verdict("") == JudgeVerdict::unparseable);
}

TEST_CASE("grading asks one judge call per criterion") {
  auto backend = std::make_shared<testing::ScriptedBackend>([](const ChatRequest& req) {
    ChatResponse r;
    r.content = req.messages[0].content.find("criterion 5") != std::string::npos ? "MET" : "UNMET";
    return r;
  });
  Gateway gw(backend, nullptr, testing::no_sleep());
  GradeOptions opts;
  opts.judge_model = "judge";
  const std::vector<RubricCriterion> rubric{crit(5), crit(3), crit(-2)};
  const auto report = grade("ex1", convo(), "See a doctor.", rubric, gw, opts);
  CHECK(backend->calls == 3);
  for (const auto& req : backend->requests) {
    CHECK(req.request_tag == tags::kScoreJudge);
    CHECK(req.model_id == "judge");
    CHECK(req.messages[0].content.find("See a doctor.") != std::string::npos);
    CHECK(req.messages[0].content.find("Is my rash serious?") != std::string::npos);
  }
  CHECK(report.verdicts[0].met);
  CHECK_FALSE(report.verdicts[1].met);
  CHECK(report.scores.example_score == doctest::Approx(5.0 / 8.0));
}

TEST_CASE("an unparseable verdict is retried once then counted unmet") {
  std::atomic<int> n{0};
  auto flaky = std::make_shared<testing::ScriptedBackend>([&](const ChatRequest&) {
    ChatResponse r;
    r.content = n++ == 0 ? "hmm" : "MET";
    return r;
  });
  Gateway gw(flaky, nullptr, testing::no_sleep(1));
  GradeOptions opts;
  opts.workers = 1;
  const auto ok = grade("ex", convo(), "r", std::vector{crit(4)}, gw, opts);
  CHECK(flaky->calls == 2);
  CHECK(ok.verdicts[0].met);
  CHECK_FALSE(ok.verdicts[0].judge_error);

  auto confused = std::make_shared<testing::ScriptedBackend>([](const ChatRequest&) {
    ChatResponse r;
    r.content = "maybe";
    return r;
  });
  Gateway gw2(confused, nullptr, testing::no_sleep(1));
  const auto bad = grade("ex", convo(), "r", std::vector{crit(4)}, gw2, opts);
  CHECK(confused->calls == 2);
  CHECK_FALSE(bad.verdicts[0].met);
  CHECK(bad.verdicts[0].judge_error);
  CHECK(bad.verdicts[0].judge_raw == "maybe");
  CHECK(bad.scores.example_score == 0.0);

  auto down = std::make_shared<testing::ScriptedBackend>(
      [](const ChatRequest&) -> ChatResponse { throw BackendFailure("forbidden", 403, false); });
  Gateway gw3(down, nullptr, testing::no_sleep(1));
  const auto failed = grade("ex", convo(), "r", std::vector{crit(4)}, gw3, opts);
  CHECK(failed.verdicts[0].judge_error);
  CHECK_FALSE(failed.verdicts[0].met);
}

TEST_CASE("the sample rubric file loads") {
  const auto examples = load_rubric_examples(testing::fixture("rubric_sample.jsonl"));
  REQUIRE(examples.size() == 3);
  CHECK(examples[0].example_id == "rb-001");
  CHECK_FALSE(examples[0].response.has_value());
  CHECK(examples[0].rubric.size() == 4);
  CHECK(examples[0].rubric[3].points == -8);
  CHECK(examples[0].rubric[0].theme == "emergency_referrals");
  CHECK(examples[1].response.has_value());
  CHECK(examples[1].rubric[0].theme == "context_seeking");
  CHECK_FALSE(examples[2].conversation.empty());
}

TEST_CASE("malformed rubric lines report their line number") {
  testing::TempDir dir("rubric");
  std::ofstream(dir / "r.jsonl") << R"({"prompt": [{"role": "user", "content": "hi"}], "rubrics": [{"criterion": "x", "points": 2, "tags": ["axis:accuracy"]}]})"
                                 << "\n"
                                 << R"({"prompt": [{"role": "user", "content": "hi"}], "rubrics": [{"criterion": "x", "points": 0, "tags": ["axis:accuracy"]}]})"
                                 << "\n";
  try {
    load_rubric_examples(dir / "r.jsonl");
    FAIL("expected IngestError");
  } catch (const IngestError& e) {
    CHECK(e.line() == 2);
  }
}

TEST_CASE("reports round-trip and stored scores are checked") {
  const std::vector<RubricCriterion> rubric{crit(5, "accuracy", "x"), crit(-3, "completeness", "y")};
  RubricReport r;
  r.example_id = "ex";
  r.rubric = rubric;
  r.verdicts = {{true, false, "MET"}, {true, false, "MET"}};
  r.scores = reaggregate(r);
  CHECK(r.scores.example_score == doctest::Approx(0.4));
  CHECK(decode_rubric_report(json::parse(encode(r).dump())) == r);

  auto j = encode(r);
  j["example_score"] = 0.9;
  CHECK_THROWS_AS(decode_rubric_report(j), ValidationError);
}

TEST_CASE("summaries average example, axis and theme scores") {
  RubricReport a;
  a.example_id = "a";
  a.rubric = {crit(4, "accuracy", "t1")};
  a.verdicts = {{true, false, "MET"}};
  a.scores = reaggregate(a);
  RubricReport b;
  b.example_id = "b";
  b.rubric = {crit(4, "accuracy", "t1"), crit(4, "completeness", "t2")};
  b.verdicts = {{false, true, "??"}, {true, false, "MET"}};
  b.scores = reaggregate(b);
  const std::vector reports{a, b};
  const auto s = summarize(reports);
  CHECK(s.examples == 2);
  CHECK(s.judge_errors == 1);
  CHECK(s.overall == doctest::Approx(0.75));
  CHECK(s.axis_means.at("accuracy") == doctest::Approx(0.5));
  CHECK(s.axis_means.at("completeness") == doctest::Approx(1.0));
  CHECK(s.theme_means.at("t1") == doctest::Approx(0.5));
  CHECK(format_summary_table(s).find("accuracy") != std::string::npos);
  CHECK(encode(s)["overall"].get<double>() == doctest::Approx(0.75));
}
