#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

#include <random>
#include <thread>

#include "ctxrefine/backends.hpp"
#include "ctxrefine/errors.hpp"
#include "ctxrefine/gateway.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace ctxrefine;

namespace {

ChatRequest simple_request(std::string text = "hello", std::string tag = "test") {
  return {{{MessageRole::user, std::move(text)}}, {}, "m", std::move(tag)};
}

ChatResponse tokens(std::uint64_t prompt, std::uint64_t completion) {
  ChatResponse r;
  r.content = "ok";
  r.prompt_tokens = prompt;
  r.completion_tokens = completion;
  return r;
}

// Local chat-completions endpoint that answers 429 for the first
// `failures` requests.
struct FakeServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::atomic<int> hits{0};
  int failures = 0;
  int fail_status = 429;
  std::string last_body;

  FakeServer() {
    server.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const int n = ++hits;
      last_body = req.body;
      if (n <= failures) {
        res.status = fail_status;
        res.set_content(R"({"error":"slow down"})", "application/json");
        return;
      }
      res.set_content(
          R"({"choices":[{"message":{"role":"assistant","content":"final answer","reasoning_content":"because"}}],)"
          R"("usage":{"prompt_tokens":12,"completion_tokens":34}})",
          "application/json");
    });
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~FakeServer() {
    server.stop();
    thread.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port) + "/v1"; }
};

}  // namespace

TEST_CASE("sampling defaults match the teacher settings") {
  SamplingParams s;
  CHECK(s.temperature == 0.6);
  CHECK(s.top_p == 0.95);
  CHECK(s.top_k == 40);
  CHECK(s.max_new_tokens == 40960);
  CHECK_NOTHROW(s.validate());
  s.top_p = 1.5;
  CHECK_THROWS_AS(s.validate(), ValidationError);
}

TEST_CASE("requests must end with a user turn") {
  ChatRequest r;
  CHECK_THROWS_AS(r.validate(), ValidationError);
  r.messages = {{MessageRole::assistant, "hi"}};
  CHECK_THROWS_AS(r.validate(), ValidationError);
  r.messages.push_back({MessageRole::user, "hi"});
  CHECK_NOTHROW(r.validate());
}

TEST_CASE("ledger totals are additive") {
  auto backend = std::make_shared<testing::ScriptedBackend>([](const ChatRequest&) { return tokens(100, 200); });
  auto ledger = std::make_shared<UsageLedger>();
  Gateway gw(backend, ledger, testing::no_sleep());
  gw.complete(simple_request());
  gw.complete(simple_request());
  const auto t = ledger->stage_totals("test");
  CHECK(t.requests == 2);
  CHECK(t.prompt_tokens == 200);
  CHECK(t.completion_tokens == 400);
  CHECK(ledger->model_totals("m") == t);
  CHECK(ledger->grand_totals() == t);
}

TEST_CASE("cost estimation") {
  CHECK(cost_of(UsageTotals{}, ModelPrice{1.0, 1.0}) == 0.0);
  CHECK(cost_of(UsageTotals{1, 1000000, 0}, ModelPrice{1.0, 5.0}) == doctest::Approx(1.0).epsilon(1e-12));

  UsageLedger ledger({{"priced", ModelPrice{1.0, 2.0}}});
  ledger.record("s", "priced", 1000000, 500000);
  CHECK(estimate_cost(ledger) == doctest::Approx(2.0).epsilon(1e-12));
  ledger.record("s", "unpriced", 10, 10);
  CHECK_THROWS_AS(estimate_cost(ledger), ConfigError);
  CHECK_FALSE(ledger.try_stage_cost("s").has_value());
}

TEST_CASE("ledger replay of a recorded trace matches an independent summation") {
  // Synthetic trace: 100k calls across three models and four stages.
  const std::map<std::string, ModelPrice, std::less<>> prices{
      {"gen", {0.15, 0.60}}, {"teacher", {0.55, 2.19}}, {"judge", {2.0, 8.0}}};
  const std::array<std::string, 3> models{"gen", "teacher", "judge"};
  const std::array<std::string, 4> stages{"gen-queries", "distill", "refine.gen", "score.judge"};
  std::mt19937_64 rng(5);
  struct Row {
    std::string stage, model;
    std::uint64_t p, c;
  };
  std::vector<Row> trace;
  for (int i = 0; i < 100000; ++i)
    trace.push_back({stages[rng() % 4], models[rng() % 3], 200 + rng() % 2000, 50 + rng() % 4000});

  UsageLedger ledger(prices);
  for (const auto& r : trace) ledger.record(r.stage, r.model, r.p, r.c);

  long double hand = 0;
  for (const auto& r : trace) {
    const auto& price = prices.find(r.model)->second;
    hand += static_cast<long double>(r.p) * price.prompt_per_million / 1e6L +
            static_cast<long double>(r.c) * price.completion_per_million / 1e6L;
  }
  const double total = estimate_cost(ledger);
  CHECK(std::abs(total - static_cast<double>(hand)) <= 0.10 * static_cast<double>(hand));
  CHECK(std::abs(total - static_cast<double>(hand)) <= 1e-9 * static_cast<double>(hand));
  double by_stage = 0;
  for (const auto& s : ledger.stages()) by_stage += ledger.stage_cost(s);
  CHECK(by_stage == doctest::Approx(total).epsilon(1e-12));
}

TEST_CASE("backoff caps grow geometrically up to the ceiling") {
  RetryPolicy p;
  CHECK(p.backoff_cap(0).count() == 1000);
  CHECK(p.backoff_cap(1).count() == 2000);
  CHECK(p.backoff_cap(3).count() == 8000);
  CHECK(p.backoff_cap(10).count() == 60000);
}

TEST_CASE("retryable failures are retried max_retries times, then surface as transport errors") {
  auto backend = std::make_shared<testing::ScriptedBackend>(
      [](const ChatRequest&) -> ChatResponse { throw BackendFailure("rate limited", 429, true); });
  std::vector<std::chrono::milliseconds> sleeps;
  auto opts = testing::no_sleep();
  opts.sleep = [&](std::chrono::milliseconds d) { sleeps.push_back(d); };
  Gateway gw(backend, nullptr, opts);
  try {
    gw.complete(simple_request());
    FAIL("expected TransportError");
  } catch (const TransportError& e) {
    CHECK(e.attempts() == 5);
  }
  CHECK(backend->calls == 5);
  REQUIRE(sleeps.size() == 4);
  for (std::size_t i = 0; i < sleeps.size(); ++i) CHECK(sleeps[i] <= opts.retry.backoff_cap(static_cast<int>(i)));
}

TEST_CASE("a transient failure followed by success returns the success") {
  std::atomic<int> n{0};
  auto backend = std::make_shared<testing::ScriptedBackend>([&](const ChatRequest&) -> ChatResponse {
    if (++n < 3) throw BackendFailure("503", 503, true);
    return tokens(1, 1);
  });
  auto ledger = std::make_shared<UsageLedger>();
  Gateway gw(backend, ledger, testing::no_sleep());
  CHECK(gw.complete(simple_request()).content == "ok");
  CHECK(backend->calls == 3);
  CHECK(ledger->grand_totals().requests == 1);
}

TEST_CASE("non-retryable statuses and protocol errors fail at once") {
  CHECK(is_retryable_status(429));
  CHECK(is_retryable_status(408));
  CHECK(is_retryable_status(500));
  CHECK(is_retryable_status(0));
  CHECK_FALSE(is_retryable_status(400));
  CHECK_FALSE(is_retryable_status(401));

  auto denied = std::make_shared<testing::ScriptedBackend>(
      [](const ChatRequest&) -> ChatResponse { throw BackendFailure("bad request", 400, false); });
  Gateway g1(denied, nullptr, testing::no_sleep());
  CHECK_THROWS_AS(g1.complete(simple_request()), PermanentError);
  CHECK(denied->calls == 1);

  auto garbled = std::make_shared<testing::ScriptedBackend>(
      [](const ChatRequest&) -> ChatResponse { throw ProtocolError("bad payload"); });
  Gateway g2(garbled, nullptr, testing::no_sleep());
  CHECK_THROWS_AS(g2.complete(simple_request()), ProtocolError);
  CHECK(garbled->calls == 1);
}

TEST_CASE("in-flight requests never exceed max_concurrency") {
  MockOptions mo;
  mo.latency = std::chrono::milliseconds(5);
  auto mock = std::make_shared<MockBackend>(mo);
  Gateway gw(mock, nullptr, testing::no_sleep(3));
  std::vector<std::future<ChatResponse>> futures;
  for (int i = 0; i < 40; ++i) futures.push_back(gw.submit(simple_request("q" + std::to_string(i), "distill")));
  for (auto& f : futures) f.get();
  CHECK(mock->calls() == 40);
  CHECK(mock->max_in_flight() <= 3);
  CHECK(mock->max_in_flight() >= 2);
}

TEST_CASE("mock backend is a pure function of request and seed") {
  MockBackend a({.seed = 11}), b({.seed = 11}), c({.seed = 12});
  const auto req = simple_request("Is aspirin safe?", "distill");
  const auto ra = a.send(req).content;
  CHECK(ra == b.send(req).content);
  CHECK(ra == a.send(req).content);
  CHECK(ra != c.send(req).content);
  auto other = req;
  other.sampling.temperature = 0.7;
  CHECK(MockBackend::request_key(req, 11) != MockBackend::request_key(other, 11));
}

TEST_CASE("request body carries model, messages and sampling") {
  ChatRequest req = simple_request();
  req.sampling = {0.6, 0.95, 40, 40960};
  const auto body = OpenAiCompatibleBackend::request_body(req);
  CHECK(body["model"] == "m");
  CHECK(body["messages"][0]["role"] == "user");
  CHECK(body["temperature"] == 0.6);
  CHECK(body["top_p"] == 0.95);
  CHECK(body["top_k"] == 40);
  CHECK(body["max_tokens"] == 40960);
}

TEST_CASE("HTTP backend: 429 five times with retry limit 4 gives a transport error after 5 attempts") {
  FakeServer srv;
  srv.failures = 100;
  auto backend = std::make_shared<OpenAiCompatibleBackend>(HttpBackendConfig{.base_url = srv.url()});
  Gateway gw(backend, nullptr, testing::no_sleep());
  try {
    gw.complete(simple_request());
    FAIL("expected TransportError");
  } catch (const TransportError& e) {
    CHECK(e.attempts() == 5);
  }
  CHECK(srv.hits == 5);
}

TEST_CASE("HTTP backend: recovers after rate limiting and folds reasoning into think tags") {
  FakeServer srv;
  srv.failures = 2;
  auto backend = std::make_shared<OpenAiCompatibleBackend>(HttpBackendConfig{.base_url = srv.url(), .api_key = "k"});
  auto ledger = std::make_shared<UsageLedger>();
  Gateway gw(backend, ledger, testing::no_sleep());
  const auto resp = gw.complete(simple_request());
  CHECK(resp.content == "<think>because</think>final answer");
  CHECK(srv.hits == 3);
  CHECK(ledger->stage_totals("test") == UsageTotals{1, 12, 34});
  const auto sent = nlohmann::json::parse(srv.last_body);
  CHECK(sent["top_k"] == 40);
}

TEST_CASE("HTTP backend: client errors are permanent") {
  FakeServer srv;
  srv.failures = 100;
  srv.fail_status = 401;
  auto backend = std::make_shared<OpenAiCompatibleBackend>(HttpBackendConfig{.base_url = srv.url()});
  Gateway gw(backend, nullptr, testing::no_sleep());
  try {
    gw.complete(simple_request());
    FAIL("expected PermanentError");
  } catch (const PermanentError& e) {
    CHECK(e.status() == 401);
  }
  CHECK(srv.hits == 1);
}

TEST_CASE("HTTP backend rejects unusable payloads and base URLs") {
  OpenAiCompatibleBackend b(HttpBackendConfig{.base_url = "http://localhost:1/v1"});
  CHECK_THROWS_AS(b.parse_response_body("not json"), ProtocolError);
  CHECK_THROWS_AS(b.parse_response_body(R"({"choices":[]})"), ProtocolError);
  CHECK_THROWS_AS(OpenAiCompatibleBackend(HttpBackendConfig{.base_url = "localhost:8000"}), ConfigError);
}
