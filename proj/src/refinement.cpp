#include "ctxrefine/refinement.hpp"

#include <spdlog/spdlog.h>

#include "ctxrefine/parallel.hpp"
#include "ctxrefine/tags.hpp"
#include "ctxrefine/text.hpp"

namespace ctxrefine {

std::string_view to_string(FacetId f) {
  switch (f) {
    case FacetId::decision_making: return "decision_making";
    case FacetId::communication: return "communication";
    case FacetId::safety: return "safety";
  }
  return "?";
}

std::optional<FacetId> parse_facet_id(std::string_view s) {
  for (const auto& f : kFacets)
    if (to_string(f.id) == s) return f.id;
  return std::nullopt;
}

std::string_view to_string(AnswerStrategy s) {
  return s == AnswerStrategy::direct_refine ? "direct_refine" : "continual_gen";
}

std::optional<AnswerStrategy> parse_answer_strategy(std::string_view s) {
  if (s == "direct_refine") return AnswerStrategy::direct_refine;
  if (s == "continual_gen") return AnswerStrategy::continual_gen;
  return std::nullopt;
}

std::variant<GenOutput, ParseError> split_thinking(std::string_view raw, const ThinkDelimiters& delims) {
  const auto open = raw.find(delims.open);
  if (open == std::string_view::npos) return ParseError{"no_think_block"};
  const auto body_start = open + delims.open.size();
  const auto close = raw.find(delims.close, body_start);
  if (close == std::string_view::npos) return ParseError{"no_think_block"};
  // A second opening delimiter inside the block means the tags are unbalanced.
  if (raw.substr(body_start, close - body_start).find(delims.open) != std::string_view::npos)
    return ParseError{"no_think_block"};
  GenOutput out;
  out.thinking = std::string(text::trim(raw.substr(body_start, close - body_start)));
  out.answer = std::string(text::trim(raw.substr(close + delims.close.size())));
  out.raw = std::string(raw);
  if (out.answer.empty()) return ParseError{"no_answer"};
  return out;
}

std::string_view strip_thinking(std::string_view raw, const ThinkDelimiters& delims) {
  if (const auto pos = raw.rfind(delims.close); pos != std::string_view::npos)
    return raw.substr(pos + delims.close.size());
  return raw;
}

namespace {

std::string fold_blank_lines(std::string_view s) {
  std::string out;
  for (const auto& line : text::split_lines(s)) {
    const auto t = text::trim(line);
    if (t.empty()) continue;
    if (!out.empty()) out += '\n';
    out += t;
  }
  return out;
}

bool is_marker(std::string_view s) {
  while (!s.empty() && (s.front() == '`' || s.front() == '"' || s.front() == '*')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == '`' || s.back() == '"' || s.back() == '*' || s.back() == '.')) s.remove_suffix(1);
  return s == kNoRevisionMarker;
}

}  // namespace

FacetRationale interpret_facet_reply(FacetId facet, std::string_view reply, const ThinkDelimiters& delims) {
  const auto body = text::trim(strip_thinking(reply, delims));
  if (body.empty()) {
    spdlog::warn("empty {} evaluation; treating it as no revision", to_string(facet));
    return {facet, std::string(kNoRevisionMarker), true};
  }
  if (is_marker(body)) return {facet, std::string(kNoRevisionMarker), true};
  return {facet, fold_blank_lines(body), false};
}

std::string splice_reasoning(std::string_view t0, std::span<const FacetRationale> rationales) {
  std::string out(t0);
  std::size_t k = 0;
  for (const auto& r : rationales) {
    if (r.is_noop) continue;
    out += "\n\n";
    out += kConnectives[k % kConnectives.size()];
    out += ' ';
    out += r.rationale;
    ++k;
  }
  return out;
}

std::size_t count_spliced_segments(std::string_view t0, std::string_view t_prime) {
  if (!t_prime.starts_with(t0)) return 0;
  auto rest = t_prime.substr(t0.size());
  std::size_t n = 0;
  std::size_t pos = 0;
  while ((pos = rest.find("\n\n", pos)) != std::string_view::npos) {
    pos += 2;
    const auto para = rest.substr(pos);
    for (const auto c : kConnectives) {
      if (para.starts_with(c) && para.size() > c.size() && para[c.size()] == ' ') {
        ++n;
        break;
      }
    }
  }
  return n;
}

const PromptTemplate& RefinePrompts::for_facet(FacetId f) const {
  switch (f) {
    case FacetId::decision_making: return decision_making;
    case FacetId::communication: return communication;
    case FacetId::safety: return safety;
  }
  return decision_making;
}

namespace {

ChatResponse call(Gateway& gateway, ChatRequest req, std::string_view stage) {
  try {
    return gateway.complete(req);
  } catch (const Error& e) {
    throw RefinementFailure(std::string(stage), "backend_error", e.what());
  }
}

}  // namespace

GenOutput generate_initial(const SynthQuery& q, Gateway& gateway, const RefineOptions& options) {
  auto resp = call(gateway,
                   {{{MessageRole::user, q.text}}, options.sampling, options.model_id, std::string(tags::kRefineGen)},
                   refine_stage::kGenerate);
  auto split = split_thinking(resp.content, options.delims);
  if (auto* err = std::get_if<ParseError>(&split))
    throw RefinementFailure(std::string(refine_stage::kGenerate), err->reason);
  return std::get<GenOutput>(std::move(split));
}

FacetRationale evaluate_facet(const SynthQuery& q, std::string_view r0, const Facet& facet, Gateway& gateway,
                              const RefineOptions& options) {
  const auto prompt = options.prompts.for_facet(facet.id).render({{"query", q.text}, {"answer", std::string(r0)}});
  auto resp = call(gateway,
                   {{{MessageRole::user, prompt}},
                    options.sampling,
                    options.model_id,
                    std::string(tags::kRefineEvalPrefix) + std::string(to_string(facet.id))},
                   refine_stage::kEvaluate);
  return interpret_facet_reply(facet.id, resp.content, options.delims);
}

std::string refine_answer(const SynthQuery& q, const GenOutput& initial, std::span<const FacetRationale> rationales,
                          Gateway& gateway, const RefineOptions& options) {
  const bool all_noop = std::all_of(rationales.begin(), rationales.end(), [](const auto& r) { return r.is_noop; });
  if (all_noop) return initial.answer;

  ChatRequest req;
  req.sampling = options.sampling;
  req.model_id = options.model_id;
  if (options.strategy == AnswerStrategy::direct_refine) {
    std::string notes;
    for (const auto& r : rationales) {
      if (r.is_noop) continue;
      if (!notes.empty()) notes += '\n';
      notes += "- " + r.rationale;
    }
    req.messages = {{MessageRole::user,
                     options.prompts.direct.render({{"query", q.text}, {"answer", initial.answer}, {"rationales", notes}})}};
    req.request_tag = std::string(tags::kRefineDirect);
  } else {
    const auto t_prime = splice_reasoning(initial.thinking, rationales);
    req.messages = {{MessageRole::system, options.prompts.continual.render({{"reasoning", t_prime}})},
                    {MessageRole::user, q.text}};
    req.request_tag = std::string(tags::kRefineContinue);
  }
  auto resp = call(gateway, std::move(req), refine_stage::kRefine);
  auto answer = std::string(text::trim(strip_thinking(resp.content, options.delims)));
  if (answer.empty()) throw RefinementFailure(std::string(refine_stage::kRefine), "empty_refined_answer");
  return answer;
}

ItemResult<RefinementRecord> refine_one(const SynthQuery& q, Gateway& gateway, const RefineOptions& options) {
  try {
    const auto initial = generate_initial(q, gateway, options);
    std::vector<FacetRationale> rationales;
    rationales.reserve(kFacets.size());
    for (const auto& facet : kFacets) rationales.push_back(evaluate_facet(q, initial.answer, facet, gateway, options));
    RefinementRecord rec;
    rec.query_id = q.query_id;
    rec.query_text = q.text;
    rec.t0 = initial.thinking;
    rec.r0 = initial.answer;
    rec.t_prime = splice_reasoning(initial.thinking, rationales);
    rec.r_prime = refine_answer(q, initial, rationales, gateway, options);
    rec.rationales = std::move(rationales);
    rec.strategy = options.strategy;
    rec.model_id = options.model_id;
    return rec;
  } catch (const RefinementFailure& f) {
    return ItemFailure{q.query_id, f.stage(), f.reason(), f.detail()};
  } catch (const TemplateError& e) {
    return ItemFailure{q.query_id, "template", "template_error", e.what()};
  }
}

RefinementBatch run_refinement(std::span<const SynthQuery> queries, Gateway& gateway, const RefineOptions& options) {
  RefinementBatch batch;
  ordered_parallel_map(
      queries.size(), options.workers, [&](std::size_t i) { return refine_one(queries[i], gateway, options); },
      [&](std::size_t, ItemResult<RefinementRecord>&& r) {
        if (auto* rec = std::get_if<RefinementRecord>(&r))
          batch.records.push_back(std::move(*rec));
        else
          batch.skips.push_back(std::get<ItemFailure>(std::move(r)));
        return true;
      });
  return batch;
}

}  // namespace ctxrefine
