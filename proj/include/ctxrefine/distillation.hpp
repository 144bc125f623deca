#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctxrefine/common.hpp"
#include "ctxrefine/gateway.hpp"
#include "ctxrefine/query_synth.hpp"
#include "ctxrefine/refinement.hpp"

namespace ctxrefine {

struct TeacherResponse {
  std::string query_id;
  std::string query_text;
  std::string thinking;
  std::string answer;
  std::string teacher_model;
  std::size_t word_count_answer = 0;
  // Set when the raw output could not be split into thinking and answer.
  std::string parse_error;

  bool operator==(const TeacherResponse&) const = default;
};

enum class FilterReason { ok, too_short, no_answer };

std::string_view to_string(FilterReason r);

struct FilterVerdict {
  bool kept = false;
  FilterReason reason = FilterReason::no_answer;

  bool operator==(const FilterVerdict&) const = default;
};

struct FilterOptions {
  std::size_t min_words = 50;
  // An answer made of nothing but one of these phrases counts as missing.
  std::vector<std::string> refusal_phrases = default_refusal_phrases();

  static std::vector<std::string> default_refusal_phrases();
};

bool is_refusal_only(std::string_view answer, std::span<const std::string> phrases);

// Rejects answers that are empty, refusal-only, or shorter than
// `min_words` whitespace-delimited tokens.
FilterVerdict filter_response(const TeacherResponse& resp, const FilterOptions& options = {});

// Filter for any answer text; used on refined answers as well.
FilterVerdict filter_answer(std::string_view answer, const FilterOptions& options = {});

struct DistillOptions {
  std::string teacher_model;
  SamplingParams sampling;  // defaults already match the teacher settings
  ThinkDelimiters delims;
  std::size_t workers = 8;
};

// Parse failures come back as a TeacherResponse with an empty answer and
// `parse_error` set; only backend errors become ItemFailure.
ItemResult<TeacherResponse> distill_one(const SynthQuery& q, Gateway& gateway, const DistillOptions& options);

struct DistillBatch {
  std::vector<TeacherResponse> responses;
  std::vector<ItemFailure> failures;
};

DistillBatch distill(std::span<const SynthQuery> queries, Gateway& gateway, const DistillOptions& options);

}  // namespace ctxrefine
