#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "ctxrefine/gateway.hpp"

namespace ctxrefine {

struct HttpBackendConfig {
  // e.g. "https://api.openai.com/v1" or "http://localhost:8000/v1"
  std::string base_url;
  std::string api_key;
  std::chrono::seconds connect_timeout{10};
  std::chrono::seconds read_timeout{600};
  // Servers that return reasoning in a separate `reasoning_content` field get
  // it folded back into the content between these delimiters.
  std::string think_open = "<think>";
  std::string think_close = "</think>";
};

// OpenAI-compatible POST {base_url}/chat/completions.
class OpenAiCompatibleBackend final : public ChatBackend {
 public:
  explicit OpenAiCompatibleBackend(HttpBackendConfig config);

  ChatResponse send(const ChatRequest& req) override;
  std::string id() const override { return "http:" + config_.base_url; }

  static nlohmann::json request_body(const ChatRequest& req);
  // Throws ProtocolError when choices[0].message.content is absent.
  ChatResponse parse_response_body(const std::string& body) const;

 private:
  HttpBackendConfig config_;
  std::string scheme_host_port_;
  std::string path_prefix_;
};

struct MockOptions {
  std::uint64_t seed = 0;
  // Generation requests whose last user message contains one of these
  // substrings come back without think delimiters.
  std::vector<std::string> omit_think_when_contains;
  std::chrono::milliseconds latency{0};
  std::string think_open = "<think>";
  std::string think_close = "</think>";
};

// Offline backend. The reply is a pure function of (messages, sampling, seed);
// the request tag only selects which stage-shaped template is filled in.
class MockBackend final : public ChatBackend {
 public:
  explicit MockBackend(MockOptions options = {});

  ChatResponse send(const ChatRequest& req) override;
  std::string id() const override { return "mock"; }

  std::size_t max_in_flight() const noexcept { return max_in_flight_.load(); }
  std::uint64_t calls() const noexcept { return calls_.load(); }

  static std::uint64_t request_key(const ChatRequest& req, std::uint64_t seed);

 private:
  std::string reply(const ChatRequest& req, std::uint64_t key) const;

  MockOptions options_;
  std::atomic<std::size_t> in_flight_{0};
  std::atomic<std::size_t> max_in_flight_{0};
  std::atomic<std::uint64_t> calls_{0};
};

}  // namespace ctxrefine
