#pragma once

#include <string_view>

// Request tags used for ledger accounting and for shaping mock replies.
namespace ctxrefine::tags {

inline constexpr std::string_view kGenQueries = "gen-queries";
inline constexpr std::string_view kDistill = "distill";
inline constexpr std::string_view kRefineGen = "refine.gen";
inline constexpr std::string_view kRefineEvalPrefix = "refine.eval.";
inline constexpr std::string_view kRefineDirect = "refine.refine";
inline constexpr std::string_view kRefineContinue = "refine.continue";
inline constexpr std::string_view kScoreGenerate = "score.generate";
inline constexpr std::string_view kScoreJudge = "score.judge";

}  // namespace ctxrefine::tags
