#include "ctxrefine/distillation.hpp"

#include <algorithm>

#include "ctxrefine/parallel.hpp"
#include "ctxrefine/tags.hpp"
#include "ctxrefine/text.hpp"

namespace ctxrefine {

std::string_view to_string(FilterReason r) {
  switch (r) {
    case FilterReason::ok: return "ok";
    case FilterReason::too_short: return "too_short";
    case FilterReason::no_answer: return "no_answer";
  }
  return "?";
}

std::vector<std::string> FilterOptions::default_refusal_phrases() {
  return {
      "I'm sorry, but I can't help with that",
      "I'm sorry, but I cannot help with that",
      "I'm sorry, but I can't provide that",
      "I'm sorry, but I cannot provide an answer",
      "I can't help with that",
      "I cannot help with that",
      "I cannot provide an answer",
      "I can't provide an answer",
      "I'm unable to help with that",
      "I am unable to help with that",
      "I'm unable to provide an answer",
      "I am unable to provide an answer",
  };
}

namespace {

std::string normalize_phrase(std::string_view s) {
  std::string n = text::normalize_for_dedup(text::replace_all(std::string(s), "\xE2\x80\x99", "'"));
  while (!n.empty() && (n.back() == '.' || n.back() == '!' || n.back() == ' ')) n.pop_back();
  return n;
}

}  // namespace

bool is_refusal_only(std::string_view answer, std::span<const std::string> phrases) {
  const auto a = normalize_phrase(answer);
  if (a.empty()) return false;
  return std::any_of(phrases.begin(), phrases.end(), [&](const auto& p) { return normalize_phrase(p) == a; });
}

FilterVerdict filter_answer(std::string_view answer, const FilterOptions& options) {
  const auto trimmed = text::trim(answer);
  if (trimmed.empty() || is_refusal_only(trimmed, options.refusal_phrases)) return {false, FilterReason::no_answer};
  if (text::count_words(trimmed) < options.min_words) return {false, FilterReason::too_short};
  return {true, FilterReason::ok};
}

FilterVerdict filter_response(const TeacherResponse& resp, const FilterOptions& options) {
  if (!resp.parse_error.empty()) return {false, FilterReason::no_answer};
  return filter_answer(resp.answer, options);
}

ItemResult<TeacherResponse> distill_one(const SynthQuery& q, Gateway& gateway, const DistillOptions& options) {
  ChatResponse resp;
  try {
    resp = gateway.complete(
        {{{MessageRole::user, q.text}}, options.sampling, options.teacher_model, std::string(tags::kDistill)});
  } catch (const Error& e) {
    return ItemFailure{q.query_id, "distill", "backend_error", e.what()};
  }
  TeacherResponse out;
  out.query_id = q.query_id;
  out.query_text = q.text;
  out.teacher_model = options.teacher_model;
  auto split = split_thinking(resp.content, options.delims);
  if (auto* err = std::get_if<ParseError>(&split)) {
    out.parse_error = err->reason;
    return out;
  }
  auto& gen = std::get<GenOutput>(split);
  out.thinking = std::move(gen.thinking);
  out.answer = std::move(gen.answer);
  out.word_count_answer = text::count_words(out.answer);
  return out;
}

DistillBatch distill(std::span<const SynthQuery> queries, Gateway& gateway, const DistillOptions& options) {
  DistillBatch batch;
  ordered_parallel_map(
      queries.size(), options.workers, [&](std::size_t i) { return distill_one(queries[i], gateway, options); },
      [&](std::size_t, ItemResult<TeacherResponse>&& r) {
        if (auto* t = std::get_if<TeacherResponse>(&r))
          batch.responses.push_back(std::move(*t));
        else
          batch.failures.push_back(std::get<ItemFailure>(std::move(r)));
        return true;
      });
  return batch;
}

}  // namespace ctxrefine
