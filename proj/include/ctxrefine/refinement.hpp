#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ctxrefine/common.hpp"
#include "ctxrefine/gateway.hpp"
#include "ctxrefine/prompt_template.hpp"
#include "ctxrefine/query_synth.hpp"

namespace ctxrefine {

enum class FacetId { decision_making, communication, safety };

std::string_view to_string(FacetId f);
std::optional<FacetId> parse_facet_id(std::string_view s);

struct Facet {
  FacetId id;
  std::string_view prompt_template_id;
};

// Evaluation order is fixed: decision-making, communication, safety.
inline constexpr std::array<Facet, 3> kFacets = {{
    {FacetId::decision_making, "facet_decision_making"},
    {FacetId::communication, "facet_communication"},
    {FacetId::safety, "facet_safety"},
}};

inline constexpr std::string_view kNoRevisionMarker = "NO_REVISION";
inline constexpr std::array<std::string_view, 3> kConnectives = {"First,", "Next,", "Finally,"};

struct ThinkDelimiters {
  std::string open = "<think>";
  std::string close = "</think>";
};

struct GenOutput {
  std::string thinking;
  std::string answer;
  std::string raw;
};

struct ParseError {
  std::string reason;  // "no_think_block" or "no_answer"
};

// Splits "<open>thinking<close>answer". Missing or unbalanced delimiters give
// "no_think_block"; an empty remainder gives "no_answer".
std::variant<GenOutput, ParseError> split_thinking(std::string_view raw, const ThinkDelimiters& delims = {});

// Text after the last closing delimiter, or the whole text if there is none.
std::string_view strip_thinking(std::string_view raw, const ThinkDelimiters& delims = {});

struct FacetRationale {
  FacetId facet = FacetId::decision_making;
  std::string rationale;
  bool is_noop = false;

  bool operator==(const FacetRationale&) const = default;
};

// Interprets an evaluator reply. Empty output and the bare marker are no-ops
// (rationale set to the marker). Blank lines inside a rationale are folded so
// that each rationale stays a single paragraph once spliced.
FacetRationale interpret_facet_reply(FacetId facet, std::string_view reply, const ThinkDelimiters& delims = {});

enum class AnswerStrategy { direct_refine, continual_gen };

std::string_view to_string(AnswerStrategy s);
std::optional<AnswerStrategy> parse_answer_strategy(std::string_view s);

struct RefinementRecord {
  std::string query_id;
  std::string query_text;
  std::string t0;
  std::string r0;
  std::vector<FacetRationale> rationales;
  std::string t_prime;
  std::string r_prime;
  AnswerStrategy strategy = AnswerStrategy::direct_refine;
  std::string model_id;

  bool operator==(const RefinementRecord&) const = default;
};

// t0 followed by one paragraph per non-noop rationale, each introduced by the
// next connective. No-op rationales contribute nothing.
std::string splice_reasoning(std::string_view t0, std::span<const FacetRationale> rationales);

// Number of connective-introduced paragraphs that follow `t0` in `t_prime`.
std::size_t count_spliced_segments(std::string_view t0, std::string_view t_prime);

struct RefinePrompts {
  PromptTemplate decision_making = PromptTemplate::from_asset("facet_decision_making");
  PromptTemplate communication = PromptTemplate::from_asset("facet_communication");
  PromptTemplate safety = PromptTemplate::from_asset("facet_safety");
  PromptTemplate direct = PromptTemplate::from_asset("refine_direct");
  PromptTemplate continual = PromptTemplate::from_asset("refine_continual");

  const PromptTemplate& for_facet(FacetId f) const;
};

struct RefineOptions {
  std::string model_id;
  SamplingParams sampling;
  AnswerStrategy strategy = AnswerStrategy::direct_refine;
  ThinkDelimiters delims;
  std::size_t workers = 8;
  RefinePrompts prompts;
};

// Stage-specific failure inside one query's refinement.
class RefinementFailure : public Error {
 public:
  RefinementFailure(std::string stage, std::string reason, const std::string& detail = {})
      : Error(stage + ": " + reason + (detail.empty() ? "" : " (" + detail + ")")),
        stage_(std::move(stage)),
        reason_(std::move(reason)),
        detail_(detail) {}
  const std::string& stage() const noexcept { return stage_; }
  const std::string& reason() const noexcept { return reason_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string stage_;
  std::string reason_;
  std::string detail_;
};

// Stage labels used in skip records.
namespace refine_stage {
inline constexpr std::string_view kGenerate = "generate";
inline constexpr std::string_view kEvaluate = "evaluate";
inline constexpr std::string_view kRefine = "refine";
}  // namespace refine_stage

GenOutput generate_initial(const SynthQuery& q, Gateway& gateway, const RefineOptions& options);

// Sees only the query, the initial answer and the facet; never the initial
// reasoning.
FacetRationale evaluate_facet(const SynthQuery& q, std::string_view r0, const Facet& facet, Gateway& gateway,
                              const RefineOptions& options);

// Returns r'. With every rationale a no-op no request is made and r0 is
// returned unchanged.
std::string refine_answer(const SynthQuery& q, const GenOutput& initial, std::span<const FacetRationale> rationales,
                          Gateway& gateway, const RefineOptions& options);

ItemResult<RefinementRecord> refine_one(const SynthQuery& q, Gateway& gateway, const RefineOptions& options);

struct RefinementBatch {
  std::vector<RefinementRecord> records;
  std::vector<ItemFailure> skips;
};

RefinementBatch run_refinement(std::span<const SynthQuery> queries, Gateway& gateway, const RefineOptions& options);

}  // namespace ctxrefine
