#pragma once

#include <array>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctxrefine/attributes.hpp"
#include "ctxrefine/common.hpp"
#include "ctxrefine/gateway.hpp"
#include "ctxrefine/prompt_template.hpp"

namespace ctxrefine {

// Slots a query template must reference: one per attribute, with the region
// attribute split into country and locality.
inline constexpr std::array<std::string_view, 8> kRequiredQuerySlots = {
    "role", "country", "locality", "disease", "intent", "intent_vagueness", "info_completeness", "language_style"};

// Extra slots a template may use.
inline constexpr std::array<std::string_view, 2> kOptionalQuerySlots = {"icd_code", "intent_description"};

struct QueryPrompt {
  std::string template_id;
  std::string rendered_text;
  AttributeSet attribute_set;
};

std::map<std::string, std::string, std::less<>> query_slot_values(const AttributeSet& attrs);

// Throws TemplateError "unused attribute: <slot>" when a required slot is
// missing and "unknown placeholder: <slot>" for slots outside the known set.
void check_query_template(const PromptTemplate& tmpl);

QueryPrompt render_prompt(const PromptTemplate& tmpl, const AttributeSet& attrs);

struct SynthQuery {
  std::string query_id;
  std::string text;
  AttributeSet attribute_set;
  std::string generator_model;
  std::string created_at;  // ISO-8601 UTC

  bool operator==(const SynthQuery&) const = default;
};

std::string make_query_id(std::uint64_t seed_index);

// Reduces raw generator output to the user-voice query: drops any reasoning
// block, unwraps <query>...</query> (or a leading "Query:" label), code
// fences and enclosing quotes. Returns an empty string when nothing remains.
std::string parse_generated_query(std::string_view raw, std::string_view think_close = "</think>");

struct QueryGenOptions {
  std::string model_id;
  SamplingParams sampling;
  // Each request gets sampling seed hash(sample_seed, seed_index), so equal
  // attribute sets still draw distinct queries.
  std::uint64_t sample_seed = 0;
  std::size_t workers = 8;
  std::string think_close = "</think>";
};

ItemResult<SynthQuery> generate_query(const AttributeSet& attrs, Gateway& gateway, const PromptTemplate& tmpl,
                                      const QueryGenOptions& options);

struct QueryBatch {
  std::vector<SynthQuery> queries;
  std::vector<ItemFailure> failures;
};

// Output order follows `attr_sets` regardless of completion order.
QueryBatch generate_queries(std::span<const AttributeSet> attr_sets, Gateway& gateway, const PromptTemplate& tmpl,
                            const QueryGenOptions& options);

// Keeps the first query of every group that is equal after case folding and
// whitespace collapsing; order is preserved.
std::vector<SynthQuery> dedup(std::vector<SynthQuery> queries);

std::string utc_timestamp();

}  // namespace ctxrefine
