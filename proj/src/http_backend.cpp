#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

#include "ctxrefine/backends.hpp"

namespace ctxrefine {

OpenAiCompatibleBackend::OpenAiCompatibleBackend(HttpBackendConfig config) : config_(std::move(config)) {
  const auto scheme_end = config_.base_url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("base_url must include a scheme: '" + config_.base_url + "'");
  const auto scheme = config_.base_url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") throw ConfigError("unsupported scheme in base_url: '" + scheme + "'");
  const auto path_start = config_.base_url.find('/', scheme_end + 3);
  scheme_host_port_ = config_.base_url.substr(0, path_start);
  if (path_start != std::string::npos) path_prefix_ = config_.base_url.substr(path_start);
  while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
}

nlohmann::json OpenAiCompatibleBackend::request_body(const ChatRequest& req) {
  nlohmann::json body;
  body["model"] = req.model_id;
  body["messages"] = req.messages;
  body["temperature"] = req.sampling.temperature;
  body["top_p"] = req.sampling.top_p;
  body["top_k"] = req.sampling.top_k;
  body["max_tokens"] = req.sampling.max_new_tokens;
  if (req.sampling.seed) body["seed"] = *req.sampling.seed;
  body["stream"] = false;
  return body;
}

ChatResponse OpenAiCompatibleBackend::parse_response_body(const std::string& body) const {
  const auto j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded()) throw ProtocolError("response is not valid JSON");
  const auto* choices = j.contains("choices") ? &j["choices"] : nullptr;
  if (!choices || !choices->is_array() || choices->empty() || !(*choices)[0].contains("message"))
    throw ProtocolError("response has no choices[0].message");
  const auto& msg = (*choices)[0]["message"];
  if (!msg.contains("content") || !msg["content"].is_string()) throw ProtocolError("response is missing message content");

  ChatResponse out;
  out.content = msg["content"].get<std::string>();
  if (msg.contains("reasoning_content") && msg["reasoning_content"].is_string()) {
    const auto reasoning = msg["reasoning_content"].get<std::string>();
    if (!reasoning.empty() && out.content.find(config_.think_open) == std::string::npos)
      out.content = config_.think_open + reasoning + config_.think_close + out.content;
  }
  if (j.contains("usage") && j["usage"].is_object()) {
    const auto& u = j["usage"];
    out.prompt_tokens = u.value("prompt_tokens", std::uint64_t{0});
    out.completion_tokens = u.value("completion_tokens", std::uint64_t{0});
  }
  out.backend_id = id();
  return out;
}

ChatResponse OpenAiCompatibleBackend::send(const ChatRequest& req) {
  httplib::Client cli(scheme_host_port_);
  cli.set_connection_timeout(config_.connect_timeout);
  cli.set_read_timeout(config_.read_timeout);
  cli.set_write_timeout(std::chrono::seconds(60));
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

  const auto body = request_body(req).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
  auto res = cli.Post(path_prefix_ + "/chat/completions", headers, body, "application/json");
  if (!res) throw BackendFailure("request failed: " + httplib::to_string(res.error()), 0, true);
  if (res->status < 200 || res->status >= 300) {
    std::string snippet = res->body.substr(0, 300);
    throw BackendFailure("HTTP " + std::to_string(res->status) + ": " + snippet, res->status,
                         is_retryable_status(res->status));
  }
  return parse_response_body(res->body);
}

}  // namespace ctxrefine
