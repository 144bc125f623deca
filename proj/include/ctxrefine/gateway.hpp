#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

#include "ctxrefine/errors.hpp"
#include "json.hpp"

namespace ctxrefine {

enum class MessageRole { system, user, assistant };

std::string_view to_string(MessageRole r);
std::optional<MessageRole> parse_message_role(std::string_view s);

struct Message {
  MessageRole role = MessageRole::user;
  std::string content;

  bool operator==(const Message&) const = default;
};

void to_json(nlohmann::json& j, const Message& m);
void from_json(const nlohmann::json& j, Message& m);

struct SamplingParams {
  double temperature = 0.6;
  double top_p = 0.95;
  int top_k = 40;
  int max_new_tokens = 40960;
  // Per-request sampling seed, forwarded as "seed" when set.
  std::optional<std::uint64_t> seed;

  void validate() const;
  bool operator==(const SamplingParams&) const = default;
};

void to_json(nlohmann::json& j, const SamplingParams& s);
// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, SamplingParams& s);

struct ChatRequest {
  std::vector<Message> messages;
  SamplingParams sampling;
  std::string model_id;
  std::string request_tag;  // pipeline stage label, used for accounting

  // Non-empty, ends with a user turn (optionally preceded by a system turn).
  void validate() const;
};

struct ChatResponse {
  std::string content;
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
  std::string backend_id;
  std::chrono::milliseconds latency{0};
};

// Outcome of a single failed attempt. status 0 means no HTTP response
// (connect failure, timeout).
class BackendFailure : public Error {
 public:
  BackendFailure(const std::string& what, int status, bool retryable)
      : Error(what), status_(status), retryable_(retryable) {}
  int status() const noexcept { return status_; }
  bool retryable() const noexcept { return retryable_; }

 private:
  int status_;
  bool retryable_;
};

bool is_retryable_status(int status);

// A chat-completion endpoint. `send` performs exactly one attempt and throws
// BackendFailure or ProtocolError; retries live in Gateway.
class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual ChatResponse send(const ChatRequest& req) = 0;
  virtual std::string id() const = 0;
};

struct RetryPolicy {
  int max_retries = 4;
  std::chrono::milliseconds base_delay{1000};
  double multiplier = 2.0;
  std::chrono::milliseconds max_delay{60000};
  bool full_jitter = true;

  // Upper bound of the wait before retry number `retry` (0-based).
  std::chrono::milliseconds backoff_cap(int retry) const;
};

struct ModelPrice {
  double prompt_per_million = 0.0;
  double completion_per_million = 0.0;
};

struct UsageTotals {
  std::uint64_t requests = 0;
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;

  UsageTotals& operator+=(const UsageTotals& o) {
    requests += o.requests;
    prompt_tokens += o.prompt_tokens;
    completion_tokens += o.completion_tokens;
    return *this;
  }
  bool operator==(const UsageTotals&) const = default;
};

// Token accounting keyed by (stage, model). Safe for concurrent use.
class UsageLedger {
 public:
  UsageLedger() = default;
  explicit UsageLedger(std::map<std::string, ModelPrice, std::less<>> pricing) : pricing_(std::move(pricing)) {}

  void record(std::string_view stage, std::string_view model, std::uint64_t prompt_tokens,
              std::uint64_t completion_tokens);

  UsageTotals stage_totals(std::string_view stage) const;
  UsageTotals model_totals(std::string_view model) const;
  UsageTotals grand_totals() const;
  std::vector<std::string> stages() const;
  std::vector<std::string> models() const;

  // Cost of one stage. Throws ConfigError if a model used in it has no price.
  double stage_cost(std::string_view stage) const;
  // Like stage_cost but nullopt instead of throwing.
  std::optional<double> try_stage_cost(std::string_view stage) const;

  const std::map<std::string, ModelPrice, std::less<>>& pricing() const { return pricing_; }
  void set_price(std::string model, ModelPrice price);

 private:
  friend double estimate_cost(const UsageLedger& ledger);
  using Key = std::pair<std::string, std::string>;
  mutable std::mutex mu_;
  std::map<Key, UsageTotals> totals_;
  std::map<std::string, ModelPrice, std::less<>> pricing_;
};

double cost_of(const UsageTotals& totals, const ModelPrice& price);

// Sum over models of token totals times configured prices.
double estimate_cost(const UsageLedger& ledger);

struct GatewayOptions {
  std::size_t max_concurrency = 8;
  RetryPolicy retry;
  // Injected for tests; defaults to std::this_thread::sleep_for.
  std::function<void(std::chrono::milliseconds)> sleep;
};

// Retrying, concurrency-bounded front end over one backend. Shareable across
// threads; every successful response is recorded in the ledger under the
// request's tag.
class Gateway {
 public:
  Gateway(std::shared_ptr<ChatBackend> backend, std::shared_ptr<UsageLedger> ledger, GatewayOptions options = {});

  ChatResponse complete(const ChatRequest& req);
  std::future<ChatResponse> submit(ChatRequest req);

  std::size_t max_concurrency() const noexcept { return options_.max_concurrency; }
  const std::string& backend_id() const noexcept { return backend_id_; }
  UsageLedger& ledger() noexcept { return *ledger_; }

 private:
  std::chrono::milliseconds jittered(int retry);

  std::shared_ptr<ChatBackend> backend_;
  std::shared_ptr<UsageLedger> ledger_;
  GatewayOptions options_;
  std::string backend_id_;
  std::counting_semaphore<1 << 20> slots_;
  std::mutex jitter_mu_;
  std::uint64_t jitter_state_;
};

}  // namespace ctxrefine
