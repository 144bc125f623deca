#include "ctxrefine/rubric.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <memory>

#include "ctxrefine/dataset_io.hpp"
#include "ctxrefine/parallel.hpp"
#include "ctxrefine/tags.hpp"
#include "ctxrefine/text.hpp"

namespace ctxrefine {

using nlohmann::json;

bool is_rubric_axis(std::string_view axis) {
  return std::find(kRubricAxes.begin(), kRubricAxes.end(), axis) != kRubricAxes.end();
}

void validate_criterion(const RubricCriterion& c) {
  if (c.points == 0) throw ValidationError("rubric criterion has zero points");
  if (!is_rubric_axis(c.axis)) throw ValidationError("rubric criterion has unknown axis '" + c.axis + "'");
  if (text::trim(c.criterion_text).empty()) throw ValidationError("rubric criterion text is empty");
}

RubricExample parse_rubric_example(const json& j, std::size_t ordinal) {
  try {
    RubricExample ex;
    if (j.contains("prompt_id") && j["prompt_id"].is_string())
      ex.example_id = j["prompt_id"].get<std::string>();
    else if (j.contains("example_id") && j["example_id"].is_string())
      ex.example_id = j["example_id"].get<std::string>();
    else
      ex.example_id = "example-" + std::to_string(ordinal);

    const auto& prompt = j.contains("prompt") ? j.at("prompt") : j.at("prompt_messages");
    ex.conversation = prompt.get<std::vector<Message>>();
    if (ex.conversation.empty()) throw ValidationError("rubric example has an empty conversation");

    std::string example_theme;
    if (j.contains("example_tags") && j["example_tags"].is_array()) {
      for (const auto& t : j["example_tags"]) {
        const auto tag = t.get<std::string>();
        if (tag.starts_with("theme:") && example_theme.empty()) example_theme = tag.substr(6);
      }
    }
    for (const auto& r : j.at("rubrics")) {
      RubricCriterion c;
      c.criterion_text = r.at("criterion").get<std::string>();
      const auto& pts = r.at("points");
      if (!pts.is_number()) throw ValidationError("rubric points must be numeric");
      const double p = pts.get<double>();
      if (p != static_cast<double>(static_cast<int>(p))) throw ValidationError("rubric points must be integers");
      c.points = static_cast<int>(p);
      for (const auto& t : r.value("tags", json::array())) {
        const auto tag = t.get<std::string>();
        if (tag.starts_with("axis:")) c.axis = tag.substr(5);
        if (tag.starts_with("theme:")) c.theme = tag.substr(6);
      }
      if (r.contains("axis") && r["axis"].is_string()) c.axis = r["axis"].get<std::string>();
      if (r.contains("theme") && r["theme"].is_string()) c.theme = r["theme"].get<std::string>();
      if (c.theme.empty()) c.theme = example_theme.empty() ? "unspecified" : example_theme;
      validate_criterion(c);
      ex.rubric.push_back(std::move(c));
    }
    if (ex.rubric.empty()) throw ValidationError("rubric is empty");
    if (j.contains("response") && j["response"].is_string()) ex.response = j["response"].get<std::string>();
    return ex;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed rubric example: ") + e.what());
  }
}

std::vector<RubricExample> load_rubric_examples(const std::filesystem::path& path) {
  std::vector<RubricExample> out;
  for_each_line(path, [&](std::size_t line_no, std::string_view line) {
    const auto j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw IngestError("rubric file line is not valid JSON", line_no);
    try {
      out.push_back(parse_rubric_example(j, out.size()));
    } catch (const ValidationError& e) {
      throw IngestError(e.what(), line_no);
    }
  });
  if (out.empty()) throw IngestError("rubric file '" + path.string() + "' has no examples", 0);
  return out;
}

namespace {

std::optional<double> subset_score(std::span<const RubricCriterion> rubric, std::span<const bool> met,
                                   const std::function<bool(const RubricCriterion&)>& in_subset) {
  long long earned = 0;
  long long possible = 0;
  for (std::size_t i = 0; i < rubric.size(); ++i) {
    if (!in_subset(rubric[i])) continue;
    if (rubric[i].points > 0) possible += rubric[i].points;
    if (met[i]) earned += rubric[i].points;
  }
  if (possible <= 0) return std::nullopt;
  return std::clamp(static_cast<double>(earned) / static_cast<double>(possible), 0.0, 1.0);
}

}  // namespace

double clamped_score(std::span<const RubricCriterion> rubric, std::span<const bool> met) {
  if (rubric.size() != met.size()) throw ValidationError("verdict count does not match rubric size");
  auto s = subset_score(rubric, met, [](const auto&) { return true; });
  if (!s) throw ValidationError("rubric has no positive points");
  return *s;
}

ScoreBreakdown aggregate_scores(std::span<const RubricCriterion> rubric, std::span<const bool> met) {
  ScoreBreakdown out;
  out.example_score = clamped_score(rubric, met);
  for (const auto& c : rubric) {
    if (!out.axis_scores.contains(c.axis)) {
      if (auto s = subset_score(rubric, met, [&](const auto& x) { return x.axis == c.axis; }))
        out.axis_scores[c.axis] = *s;
    }
    if (!out.theme_scores.contains(c.theme)) {
      if (auto s = subset_score(rubric, met, [&](const auto& x) { return x.theme == c.theme; }))
        out.theme_scores[c.theme] = *s;
    }
  }
  return out;
}

JudgeVerdict parse_judge_verdict(std::string_view reply, const ThinkDelimiters& delims) {
  auto body = text::trim(strip_thinking(reply, delims));
  if (body.empty()) return JudgeVerdict::unparseable;

  if (body.front() == '{') {
    const auto j = json::parse(body, nullptr, false);
    if (!j.is_discarded() && j.is_object() && j.contains("criteria_met") && j["criteria_met"].is_boolean())
      return j["criteria_met"].get<bool>() ? JudgeVerdict::met : JudgeVerdict::unmet;
    return JudgeVerdict::unparseable;
  }

  auto line = text::trim(body.substr(0, body.find('\n')));
  const auto strip_marks = [](std::string_view s) {
    while (!s.empty() && std::string_view("*#`_ ").find(s.front()) != std::string_view::npos) s.remove_prefix(1);
    return s;
  };
  line = strip_marks(line);
  if (text::starts_with_ci(line, "verdict:")) line = strip_marks(text::trim(line.substr(8)));

  std::string word;
  for (char c : line) {
    if (!std::isalpha(static_cast<unsigned char>(c))) break;
    word.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  }
  if (word == "MET") return JudgeVerdict::met;
  if (word == "UNMET") return JudgeVerdict::unmet;
  if (word == "NOT" && text::starts_with_ci(text::trim(line.substr(3)), "met")) return JudgeVerdict::unmet;
  return JudgeVerdict::unparseable;
}

ScoreBreakdown reaggregate(const RubricReport& report) {
  std::unique_ptr<bool[]> met(new bool[report.verdicts.size()]);
  for (std::size_t i = 0; i < report.verdicts.size(); ++i) met[i] = report.verdicts[i].met;
  return aggregate_scores(report.rubric, std::span<const bool>(met.get(), report.verdicts.size()));
}

std::string render_conversation(std::span<const Message> conversation) {
  std::string out;
  for (const auto& m : conversation) {
    if (!out.empty()) out += "\n\n";
    out += std::string(to_string(m.role)) + ": " + m.content;
  }
  return out;
}

RubricReport grade(std::string example_id, std::span<const Message> conversation, std::string_view response,
                   std::span<const RubricCriterion> rubric, Gateway& judge, const GradeOptions& options) {
  if (rubric.empty()) throw ValidationError("rubric is empty");
  for (const auto& c : rubric) validate_criterion(c);
  const auto convo = render_conversation(conversation);

  RubricReport report;
  report.example_id = std::move(example_id);
  report.rubric.assign(rubric.begin(), rubric.end());
  report.verdicts.resize(rubric.size());

  ordered_parallel_map(
      rubric.size(), options.workers,
      [&](std::size_t i) {
        const auto& c = rubric[i];
        const auto prompt = options.prompt.render({{"conversation", convo},
                                                   {"response", std::string(response)},
                                                   {"criterion", c.criterion_text},
                                                   {"points", std::to_string(c.points)}});
        ChatRequest req{{{MessageRole::user, prompt}}, options.sampling, options.judge_model,
                        std::string(tags::kScoreJudge)};
        CriterionVerdict v;
        for (int attempt = 0; attempt < 2; ++attempt) {
          try {
            auto resp = judge.complete(req);
            v.judge_raw = resp.content;
          } catch (const Error& e) {
            v.judge_raw = std::string("judge call failed: ") + e.what();
            v.judge_error = true;
            return v;
          }
          const auto verdict = parse_judge_verdict(v.judge_raw, options.delims);
          if (verdict != JudgeVerdict::unparseable) {
            v.met = verdict == JudgeVerdict::met;
            return v;
          }
        }
        v.judge_error = true;
        return v;
      },
      [&](std::size_t i, CriterionVerdict&& v) {
        report.verdicts[i] = std::move(v);
        return true;
      });

  report.scores = reaggregate(report);
  return report;
}

json encode(const RubricReport& r) {
  json criteria = json::array();
  for (std::size_t i = 0; i < r.rubric.size(); ++i) {
    const auto& c = r.rubric[i];
    const auto& v = r.verdicts[i];
    criteria.push_back({{"criterion", c.criterion_text},
                        {"points", c.points},
                        {"axis", c.axis},
                        {"theme", c.theme},
                        {"met", v.met},
                        {"judge_error", v.judge_error},
                        {"judge_raw", v.judge_raw}});
  }
  return tag_schema({{"example_id", r.example_id},
                     {"criteria", criteria},
                     {"example_score", r.scores.example_score},
                     {"axis_scores", r.scores.axis_scores},
                     {"theme_scores", r.scores.theme_scores}},
                    schema::kRubricReport);
}

RubricReport decode_rubric_report(const json& j) {
  require_schema(j, schema::kRubricReport);
  try {
    RubricReport r;
    r.example_id = j.at("example_id").get<std::string>();
    for (const auto& c : j.at("criteria")) {
      RubricCriterion crit{c.at("criterion").get<std::string>(), c.at("points").get<int>(),
                           c.at("axis").get<std::string>(), c.at("theme").get<std::string>()};
      validate_criterion(crit);
      r.rubric.push_back(std::move(crit));
      r.verdicts.push_back(
          {c.at("met").get<bool>(), c.at("judge_error").get<bool>(), c.at("judge_raw").get<std::string>()});
    }
    r.scores.example_score = j.at("example_score").get<double>();
    r.scores.axis_scores = j.at("axis_scores").get<std::map<std::string, double>>();
    r.scores.theme_scores = j.at("theme_scores").get<std::map<std::string, double>>();
    if (!(r.scores.example_score >= 0.0 && r.scores.example_score <= 1.0))
      throw ValidationError("example_score outside [0,1]");
    if (reaggregate(r) != r.scores) throw ValidationError("stored scores do not match the verdicts");
    return r;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed rubric report: ") + e.what());
  }
}

ScoreSummary summarize(std::span<const RubricReport> reports) {
  ScoreSummary s;
  s.examples = reports.size();
  if (reports.empty()) return s;
  std::map<std::string, std::pair<double, std::size_t>> axis, theme;
  double total = 0.0;
  for (const auto& r : reports) {
    total += r.scores.example_score;
    for (const auto& v : r.verdicts) s.judge_errors += v.judge_error ? 1 : 0;
    for (const auto& [k, v] : r.scores.axis_scores) {
      axis[k].first += v;
      axis[k].second += 1;
    }
    for (const auto& [k, v] : r.scores.theme_scores) {
      theme[k].first += v;
      theme[k].second += 1;
    }
  }
  s.overall = total / static_cast<double>(reports.size());
  for (const auto& [k, v] : axis) s.axis_means[k] = v.first / static_cast<double>(v.second);
  for (const auto& [k, v] : theme) s.theme_means[k] = v.first / static_cast<double>(v.second);
  return s;
}

json encode(const ScoreSummary& s) {
  return {{"examples", s.examples},
          {"judge_errors", s.judge_errors},
          {"overall", s.overall},
          {"axis_means", s.axis_means},
          {"theme_means", s.theme_means}};
}

std::string format_summary_table(const ScoreSummary& s) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-32s %8s\n", "group", "score");
  out += buf;
  std::snprintf(buf, sizeof buf, "%-32s %8.4f\n", "overall", s.overall);
  out += buf;
  for (const auto& [k, v] : s.axis_means) {
    std::snprintf(buf, sizeof buf, "%-32s %8.4f\n", ("axis:" + k).c_str(), v);
    out += buf;
  }
  for (const auto& [k, v] : s.theme_means) {
    std::snprintf(buf, sizeof buf, "%-32s %8.4f\n", ("theme:" + k).c_str(), v);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "examples: %zu, judge errors: %zu\n", s.examples, s.judge_errors);
  out += buf;
  return out;
}

}  // namespace ctxrefine
