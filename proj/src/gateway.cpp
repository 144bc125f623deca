#include "ctxrefine/gateway.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <thread>

namespace ctxrefine {

std::string_view to_string(MessageRole r) {
  switch (r) {
    case MessageRole::system: return "system";
    case MessageRole::user: return "user";
    case MessageRole::assistant: return "assistant";
  }
  return "user";
}

std::optional<MessageRole> parse_message_role(std::string_view s) {
  if (s == "system") return MessageRole::system;
  if (s == "user") return MessageRole::user;
  if (s == "assistant") return MessageRole::assistant;
  return std::nullopt;
}

void to_json(nlohmann::json& j, const Message& m) { j = {{"role", to_string(m.role)}, {"content", m.content}}; }

void from_json(const nlohmann::json& j, Message& m) {
  auto role = parse_message_role(j.at("role").get<std::string>());
  if (!role) throw ValidationError("unknown message role '" + j.at("role").get<std::string>() + "'");
  m.role = *role;
  m.content = j.at("content").get<std::string>();
}

void SamplingParams::validate() const {
  if (!(temperature >= 0.0)) throw ValidationError("temperature must be >= 0");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ValidationError("top_p must be in (0, 1]");
  if (top_k < 1) throw ValidationError("top_k must be positive");
  if (max_new_tokens < 1) throw ValidationError("max_new_tokens must be positive");
}

void to_json(nlohmann::json& j, const SamplingParams& s) {
  j = {{"temperature", s.temperature}, {"top_p", s.top_p}, {"top_k", s.top_k}, {"max_new_tokens", s.max_new_tokens}};
  if (s.seed) j["seed"] = *s.seed;
}

void from_json(const nlohmann::json& j, SamplingParams& s) {
  s.temperature = j.value("temperature", s.temperature);
  s.top_p = j.value("top_p", s.top_p);
  s.top_k = j.value("top_k", s.top_k);
  s.max_new_tokens = j.value("max_new_tokens", s.max_new_tokens);
  if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
  s.validate();
}

void ChatRequest::validate() const {
  if (messages.empty()) throw ValidationError("chat request has no messages");
  if (messages.back().role != MessageRole::user) throw ValidationError("chat request must end with a user message");
  sampling.validate();
}

bool is_retryable_status(int status) { return status == 0 || status == 408 || status == 429 || status >= 500; }

std::chrono::milliseconds RetryPolicy::backoff_cap(int retry) const {
  const double raw = static_cast<double>(base_delay.count()) * std::pow(multiplier, retry);
  const double capped = std::min(raw, static_cast<double>(max_delay.count()));
  return std::chrono::milliseconds(static_cast<std::int64_t>(capped));
}

void UsageLedger::record(std::string_view stage, std::string_view model, std::uint64_t prompt_tokens,
                         std::uint64_t completion_tokens) {
  std::lock_guard lock(mu_);
  auto& t = totals_[Key{std::string(stage), std::string(model)}];
  t.requests += 1;
  t.prompt_tokens += prompt_tokens;
  t.completion_tokens += completion_tokens;
}

UsageTotals UsageLedger::stage_totals(std::string_view stage) const {
  std::lock_guard lock(mu_);
  UsageTotals out;
  for (const auto& [k, v] : totals_)
    if (k.first == stage) out += v;
  return out;
}

UsageTotals UsageLedger::model_totals(std::string_view model) const {
  std::lock_guard lock(mu_);
  UsageTotals out;
  for (const auto& [k, v] : totals_)
    if (k.second == model) out += v;
  return out;
}

UsageTotals UsageLedger::grand_totals() const {
  std::lock_guard lock(mu_);
  UsageTotals out;
  for (const auto& [k, v] : totals_) out += v;
  return out;
}

std::vector<std::string> UsageLedger::stages() const {
  std::lock_guard lock(mu_);
  std::set<std::string> s;
  for (const auto& [k, v] : totals_) s.insert(k.first);
  return {s.begin(), s.end()};
}

std::vector<std::string> UsageLedger::models() const {
  std::lock_guard lock(mu_);
  std::set<std::string> s;
  for (const auto& [k, v] : totals_) s.insert(k.second);
  return {s.begin(), s.end()};
}

void UsageLedger::set_price(std::string model, ModelPrice price) {
  std::lock_guard lock(mu_);
  pricing_[std::move(model)] = price;
}

double cost_of(const UsageTotals& totals, const ModelPrice& price) {
  return static_cast<double>(totals.prompt_tokens) * price.prompt_per_million / 1e6 +
         static_cast<double>(totals.completion_tokens) * price.completion_per_million / 1e6;
}

double UsageLedger::stage_cost(std::string_view stage) const {
  std::lock_guard lock(mu_);
  double cost = 0.0;
  for (const auto& [k, v] : totals_) {
    if (k.first != stage) continue;
    auto it = pricing_.find(k.second);
    if (it == pricing_.end()) throw ConfigError("no pricing configured for model '" + k.second + "'");
    cost += cost_of(v, it->second);
  }
  return cost;
}

std::optional<double> UsageLedger::try_stage_cost(std::string_view stage) const {
  try {
    return stage_cost(stage);
  } catch (const ConfigError&) {
    return std::nullopt;
  }
}

double estimate_cost(const UsageLedger& ledger) {
  std::map<std::string, UsageTotals, std::less<>> per_model;
  {
    std::lock_guard lock(ledger.mu_);
    for (const auto& [k, v] : ledger.totals_) per_model[k.second] += v;
  }
  double cost = 0.0;
  for (const auto& [model, totals] : per_model) {
    auto it = ledger.pricing_.find(model);
    if (it == ledger.pricing_.end()) throw ConfigError("no pricing configured for model '" + model + "'");
    cost += cost_of(totals, it->second);
  }
  return cost;
}

Gateway::Gateway(std::shared_ptr<ChatBackend> backend, std::shared_ptr<UsageLedger> ledger, GatewayOptions options)
    : backend_(std::move(backend)),
      ledger_(ledger ? std::move(ledger) : std::make_shared<UsageLedger>()),
      options_(std::move(options)),
      backend_id_(backend_ ? backend_->id() : std::string{}),
      slots_(static_cast<std::ptrdiff_t>(std::max<std::size_t>(1, options_.max_concurrency))),
      jitter_state_(std::random_device{}()) {
  if (!backend_) throw ConfigError("gateway requires a backend");
  if (options_.max_concurrency == 0) throw ConfigError("max_concurrency must be at least 1");
  if (options_.retry.max_retries < 0) throw ConfigError("max_retries must be >= 0");
  if (!options_.sleep) options_.sleep = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

std::chrono::milliseconds Gateway::jittered(int retry) {
  const auto cap = options_.retry.backoff_cap(retry);
  if (!options_.retry.full_jitter || cap.count() <= 0) return cap;
  std::lock_guard lock(jitter_mu_);
  // splitmix64 step; jitter does not need to be reproducible.
  std::uint64_t z = (jitter_state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return std::chrono::milliseconds(static_cast<std::int64_t>(z % static_cast<std::uint64_t>(cap.count() + 1)));
}

ChatResponse Gateway::complete(const ChatRequest& req) {
  req.validate();
  spdlog::debug("request {} model={} temperature={} top_p={} top_k={} max_new_tokens={}", req.request_tag,
                req.model_id, req.sampling.temperature, req.sampling.top_p, req.sampling.top_k,
                req.sampling.max_new_tokens);
  const int max_attempts = options_.retry.max_retries + 1;
  std::string last_error;
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    try {
      slots_.acquire();
      ChatResponse resp;
      try {
        const auto start = std::chrono::steady_clock::now();
        resp = backend_->send(req);
        resp.latency = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
      } catch (...) {
        slots_.release();
        throw;
      }
      slots_.release();
      if (resp.backend_id.empty()) resp.backend_id = backend_id_;
      ledger_->record(req.request_tag, req.model_id, resp.prompt_tokens, resp.completion_tokens);
      return resp;
    } catch (const BackendFailure& f) {
      if (!f.retryable()) throw PermanentError(backend_id_ + ": " + f.what(), f.status());
      last_error = f.what();
    }
    if (attempt < max_attempts) options_.sleep(jittered(attempt - 1));
  }
  throw TransportError(backend_id_ + ": " + last_error, max_attempts);
}

std::future<ChatResponse> Gateway::submit(ChatRequest req) {
  return std::async(std::launch::async, [this, r = std::move(req)] { return complete(r); });
}

}  // namespace ctxrefine
