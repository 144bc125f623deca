#include "ctxrefine/backends.hpp"
#include "ctxrefine/distillation.hpp"
#include "ctxrefine/tags.hpp"
#include "ctxrefine/text.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace ctxrefine;

namespace {

std::string words(std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += (i ? " w" : "w") + std::to_string(i);
  return s;
}

std::vector<SynthQuery> queries(std::size_t n) {
  std::vector<SynthQuery> qs;
  for (std::size_t i = 0; i < n; ++i) {
    SynthQuery q;
    q.query_id = "q" + std::to_string(i);
    q.text = "Distill question " + std::to_string(i);
    qs.push_back(q);
  }
  return qs;
}

}  // namespace

TEST_CASE("the word-count filter rejects fewer than 50 words") {
  CHECK(text::count_words(words(49)) == 49);
  CHECK(filter_answer(words(49)) == FilterVerdict{false, FilterReason::too_short});
  CHECK(filter_answer(words(50)) == FilterVerdict{true, FilterReason::ok});
  CHECK(filter_answer("") == FilterVerdict{false, FilterReason::no_answer});
  CHECK(filter_answer("  \n ") == FilterVerdict{false, FilterReason::no_answer});
}

TEST_CASE("a 50-word answer with valid thinking is kept") {
  TeacherResponse t;
  t.thinking = "Let me think.";
  t.answer = words(50);
  CHECK(filter_response(t).kept);
  t.parse_error = "no_answer";
  CHECK(filter_response(t) == FilterVerdict{false, FilterReason::no_answer});
}

TEST_CASE("refusal-only answers count as missing") {
  CHECK(is_refusal_only("I'm sorry, but I can't help with that.", FilterOptions::default_refusal_phrases()));
  CHECK(filter_answer("I cannot help with that").reason == FilterReason::no_answer);
  CHECK_FALSE(is_refusal_only("I can't help with that, but here is what usually helps: rest.",
                              FilterOptions::default_refusal_phrases()));
}

TEST_CASE("teacher requests use the default sampling parameters") {
  auto backend = std::make_shared<testing::ScriptedBackend>([](const ChatRequest&) {
    ChatResponse r;
    r.content = "<think>why</think>" + words(60);
    return r;
  });
  Gateway gw(backend, nullptr, testing::no_sleep());
  DistillOptions opts{.teacher_model = "teacher"};
  const auto batch = distill(queries(5), gw, opts);
  CHECK(batch.responses.size() == 5);
  REQUIRE(backend->requests.size() == 5);
  for (const auto& req : backend->requests) {
    CHECK(req.sampling.temperature == 0.6);
    CHECK(req.sampling.top_p == 0.95);
    CHECK(req.sampling.top_k == 40);
    CHECK(req.sampling.max_new_tokens == 40960);
    CHECK(req.model_id == "teacher");
    CHECK(req.request_tag == tags::kDistill);
  }
}

TEST_CASE("50 queries on the mock give 50 teacher responses") {
  Gateway gw(std::make_shared<MockBackend>(MockOptions{.seed = 4}), nullptr, testing::no_sleep());
  const auto qs = queries(50);
  const auto batch = distill(qs, gw, {.teacher_model = "teacher"});
  REQUIRE(batch.responses.size() == 50);
  CHECK(batch.failures.empty());
  std::size_t kept = 0;
  for (std::size_t i = 0; i < qs.size(); ++i) {
    const auto& r = batch.responses[i];
    CHECK(r.query_id == qs[i].query_id);
    CHECK(r.query_text == qs[i].text);
    CHECK(r.parse_error.empty());
    CHECK(r.word_count_answer == text::count_words(r.answer));
    kept += filter_response(r).kept;
  }
  // The mock emits some short answers so both filter outcomes occur.
  CHECK(kept > 0);
  CHECK(kept < 50);
}

TEST_CASE("teacher output with an empty answer part is rejected as no_answer") {
  auto backend = std::make_shared<testing::ScriptedBackend>([](const ChatRequest&) {
    ChatResponse r;
    r.content = "<think>long reasoning</think>   ";
    return r;
  });
  Gateway gw(backend, nullptr, testing::no_sleep());
  const auto result = distill_one(queries(1)[0], gw, {.teacher_model = "teacher"});
  REQUIRE(std::holds_alternative<TeacherResponse>(result));
  const auto& t = std::get<TeacherResponse>(result);
  CHECK(t.parse_error == "no_answer");
  CHECK(filter_response(t) == FilterVerdict{false, FilterReason::no_answer});
}

TEST_CASE("teacher backend errors become item failures") {
  auto backend = std::make_shared<testing::ScriptedBackend>(
      [](const ChatRequest&) -> ChatResponse { throw BackendFailure("gone", 404, false); });
  Gateway gw(backend, nullptr, testing::no_sleep());
  const auto result = distill_one(queries(1)[0], gw, {.teacher_model = "teacher"});
  REQUIRE(std::holds_alternative<ItemFailure>(result));
  CHECK(std::get<ItemFailure>(result).stage == "distill");
  CHECK(std::get<ItemFailure>(result).reason == "backend_error");
}
