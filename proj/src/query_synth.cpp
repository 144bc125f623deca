#include "ctxrefine/query_synth.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <unordered_set>

#include "ctxrefine/hash.hpp"
#include "ctxrefine/parallel.hpp"
#include "ctxrefine/tags.hpp"
#include "ctxrefine/text.hpp"

namespace ctxrefine {

std::map<std::string, std::string, std::less<>> query_slot_values(const AttributeSet& a) {
  return {
      {"role", std::string(to_string(a.role))},
      {"country", a.country},
      {"locality", std::string(to_string(a.locality))},
      {"disease", a.disease.name},
      {"icd_code", a.disease.icd_code},
      {"intent", a.intent.category},
      {"intent_description", a.intent.description},
      {"intent_vagueness", std::string(to_string(a.intent_vagueness))},
      {"info_completeness", std::string(to_string(a.info_completeness))},
      {"language_style", std::string(to_string(a.language_style))},
  };
}

void check_query_template(const PromptTemplate& tmpl) {
  const auto& used = tmpl.placeholders();
  for (const auto& slot : used) {
    const bool known = std::find(kRequiredQuerySlots.begin(), kRequiredQuerySlots.end(), slot) !=
                           kRequiredQuerySlots.end() ||
                       std::find(kOptionalQuerySlots.begin(), kOptionalQuerySlots.end(), slot) !=
                           kOptionalQuerySlots.end();
    if (!known) throw TemplateError("unknown placeholder: " + slot);
  }
  for (const auto slot : kRequiredQuerySlots) {
    if (!used.contains(slot)) throw TemplateError("unused attribute: " + std::string(slot));
  }
}

QueryPrompt render_prompt(const PromptTemplate& tmpl, const AttributeSet& attrs) {
  check_query_template(tmpl);
  return QueryPrompt{tmpl.id(), tmpl.render(query_slot_values(attrs)), attrs};
}

std::string make_query_id(std::uint64_t seed_index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "q%07llu", static_cast<unsigned long long>(seed_index));
  return buf;
}

namespace {

std::string_view strip_label(std::string_view s) {
  for (std::string_view label : {"user query:", "query:", "message:", "user message:"}) {
    if (text::starts_with_ci(s, label)) return text::trim(s.substr(label.size()));
  }
  return s;
}

std::string_view strip_fences(std::string_view s) {
  if (!s.starts_with("```")) return s;
  auto first_nl = s.find('\n');
  if (first_nl == std::string_view::npos) return {};
  s.remove_prefix(first_nl + 1);
  s = text::trim(s);
  if (s.ends_with("```")) s.remove_suffix(3);
  return text::trim(s);
}

std::string_view strip_quotes(std::string_view s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return text::trim(s.substr(1, s.size() - 2));
  constexpr std::string_view open = "“", close = "”";
  if (s.size() >= open.size() + close.size() && s.starts_with(open) && s.ends_with(close))
    return text::trim(s.substr(open.size(), s.size() - open.size() - close.size()));
  return s;
}

std::size_t find_ci(std::string_view hay, std::string_view needle, std::size_t from = 0) {
  for (std::size_t i = from; i + needle.size() <= hay.size(); ++i)
    if (text::starts_with_ci(hay.substr(i), needle)) return i;
  return std::string_view::npos;
}

}  // namespace

std::string parse_generated_query(std::string_view raw, std::string_view think_close) {
  std::string_view s = raw;
  if (!think_close.empty()) {
    if (const auto pos = s.rfind(think_close); pos != std::string_view::npos) s.remove_prefix(pos + think_close.size());
  }
  s = text::trim(s);
  if (const auto open = find_ci(s, "<query>"); open != std::string_view::npos) {
    auto body = s.substr(open + 7);
    if (const auto close = find_ci(body, "</query>"); close != std::string_view::npos) body = body.substr(0, close);
    s = text::trim(body);
  } else {
    s = strip_label(s);
  }
  s = strip_fences(s);
  s = strip_quotes(s);
  return std::string(text::trim(s));
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

ItemResult<SynthQuery> generate_query(const AttributeSet& attrs, Gateway& gateway, const PromptTemplate& tmpl,
                                      const QueryGenOptions& options) {
  const auto id = make_query_id(attrs.seed_index);
  const auto prompt = render_prompt(tmpl, attrs);
  ChatRequest req{{{MessageRole::user, prompt.rendered_text}}, options.sampling, options.model_id,
                  std::string(tags::kGenQueries)};
  req.sampling.seed = Fnv1a{}.update(options.sample_seed).separator().update(attrs.seed_index).digest();
  ChatResponse resp;
  try {
    resp = gateway.complete(req);
  } catch (const Error& e) {
    return ItemFailure{id, "gen-queries", "backend_error", e.what()};
  }
  auto query = parse_generated_query(resp.content, options.think_close);
  if (query.empty()) return ItemFailure{id, "gen-queries", "empty query", {}};
  return SynthQuery{id, std::move(query), attrs, options.model_id, utc_timestamp()};
}

QueryBatch generate_queries(std::span<const AttributeSet> attr_sets, Gateway& gateway, const PromptTemplate& tmpl,
                            const QueryGenOptions& options) {
  check_query_template(tmpl);
  QueryBatch batch;
  ordered_parallel_map(
      attr_sets.size(), options.workers,
      [&](std::size_t i) { return generate_query(attr_sets[i], gateway, tmpl, options); },
      [&](std::size_t, ItemResult<SynthQuery>&& r) {
        if (auto* q = std::get_if<SynthQuery>(&r))
          batch.queries.push_back(std::move(*q));
        else
          batch.failures.push_back(std::get<ItemFailure>(std::move(r)));
        return true;
      });
  return batch;
}

std::vector<SynthQuery> dedup(std::vector<SynthQuery> queries) {
  std::unordered_set<std::string> seen;
  std::vector<SynthQuery> out;
  out.reserve(queries.size());
  for (auto& q : queries) {
    if (seen.insert(text::normalize_for_dedup(q.text)).second) out.push_back(std::move(q));
  }
  return out;
}

}  // namespace ctxrefine
