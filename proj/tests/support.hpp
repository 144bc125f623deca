#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <random>
#include <mutex>
#include <string>
#include <vector>

#include "ctxrefine/gateway.hpp"

namespace testing {

inline std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(CTXREFINE_TEST_FIXTURES) / name;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("ctxrefine-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// Backend driven by a callback; records every request it sees.
class ScriptedBackend final : public ctxrefine::ChatBackend {
 public:
  using Fn = std::function<ctxrefine::ChatResponse(const ctxrefine::ChatRequest&)>;
  explicit ScriptedBackend(Fn fn) : fn_(std::move(fn)) {}
  ctxrefine::ChatResponse send(const ctxrefine::ChatRequest& req) override {
    ++calls;
    {
      std::lock_guard lock(mu_);
      requests.push_back(req);
    }
    return fn_(req);
  }
  std::string id() const override { return "scripted"; }

  std::atomic<int> calls{0};
  std::vector<ctxrefine::ChatRequest> requests;

 private:
  Fn fn_;
  std::mutex mu_;
};

inline ctxrefine::GatewayOptions no_sleep(std::size_t concurrency = 8) {
  ctxrefine::GatewayOptions o;
  o.max_concurrency = concurrency;
  o.sleep = [](std::chrono::milliseconds) {};
  return o;
}

}  // namespace testing
