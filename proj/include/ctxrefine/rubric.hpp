#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctxrefine/gateway.hpp"
#include "ctxrefine/prompt_template.hpp"
#include "ctxrefine/refinement.hpp"
#include "json.hpp"

namespace ctxrefine {

inline constexpr std::array<std::string_view, 5> kRubricAxes = {
    "accuracy", "completeness", "context_awareness", "communication_quality", "instruction_following"};

bool is_rubric_axis(std::string_view axis);

struct RubricCriterion {
  std::string criterion_text;
  int points = 0;  // signed, never zero
  std::string axis;
  std::string theme;

  bool operator==(const RubricCriterion&) const = default;
};

void validate_criterion(const RubricCriterion& c);

// One grading item in the public HealthBench layout:
//   {"prompt_id"?, "prompt": [messages], "rubrics": [{criterion, points, tags}],
//    "example_tags"?: [...], "response"?: "..."}
// `prompt_messages` is accepted as an alias for `prompt`. Rubric tags of the
// form "axis:<name>" and "theme:<name>" set the criterion's axis and theme;
// a criterion without a theme inherits the first "theme:" example tag.
struct RubricExample {
  std::string example_id;
  std::vector<Message> conversation;
  std::vector<RubricCriterion> rubric;
  std::optional<std::string> response;
};

RubricExample parse_rubric_example(const nlohmann::json& j, std::size_t ordinal = 0);
std::vector<RubricExample> load_rubric_examples(const std::filesystem::path& path);

struct ScoreBreakdown {
  double example_score = 0.0;
  std::map<std::string, double> axis_scores;
  std::map<std::string, double> theme_scores;

  bool operator==(const ScoreBreakdown&) const = default;
};

// clamp(sum of points over met criteria / sum of positive points, 0, 1).
// Throws ValidationError when the rubric has no positive points.
double clamped_score(std::span<const RubricCriterion> rubric, std::span<const bool> met);

// Example, per-axis and per-theme scores. Axis and theme subsets without any
// positive points are left out.
ScoreBreakdown aggregate_scores(std::span<const RubricCriterion> rubric, std::span<const bool> met);

enum class JudgeVerdict { met, unmet, unparseable };

// Accepts a leading MET / UNMET (optionally "Verdict:", markdown emphasis, or
// "NOT MET") or a JSON object with a boolean `criteria_met`.
JudgeVerdict parse_judge_verdict(std::string_view reply, const ThinkDelimiters& delims = {});

struct CriterionVerdict {
  bool met = false;
  bool judge_error = false;
  std::string judge_raw;

  bool operator==(const CriterionVerdict&) const = default;
};

struct RubricReport {
  std::string example_id;
  std::vector<RubricCriterion> rubric;
  std::vector<CriterionVerdict> verdicts;
  ScoreBreakdown scores;

  bool operator==(const RubricReport&) const = default;
};

// Recomputes the scores from stored verdicts.
ScoreBreakdown reaggregate(const RubricReport& report);

struct GradeOptions {
  std::string judge_model;
  SamplingParams sampling;
  std::size_t workers = 4;
  ThinkDelimiters delims;
  PromptTemplate prompt = PromptTemplate::from_asset("judge");
};

std::string render_conversation(std::span<const Message> conversation);

// One judge call per criterion, retried once if the verdict cannot be
// parsed. Criteria whose verdict is still unknown (or whose judge call
// failed) count as unmet and carry judge_error.
RubricReport grade(std::string example_id, std::span<const Message> conversation, std::string_view response,
                   std::span<const RubricCriterion> rubric, Gateway& judge, const GradeOptions& options);

nlohmann::json encode(const RubricReport& r);
RubricReport decode_rubric_report(const nlohmann::json& j);

struct ScoreSummary {
  std::size_t examples = 0;
  std::size_t judge_errors = 0;
  double overall = 0.0;
  std::map<std::string, double> axis_means;
  std::map<std::string, double> theme_means;
};

ScoreSummary summarize(std::span<const RubricReport> reports);
nlohmann::json encode(const ScoreSummary& s);
std::string format_summary_table(const ScoreSummary& s);

}  // namespace ctxrefine
