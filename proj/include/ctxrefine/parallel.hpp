#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

namespace ctxrefine {

// Runs `work(i)` for i in [0, n) on up to `workers` threads and hands each
// result to `sink(i, result)` in index order, one call at a time. When `sink`
// returns false no further indices are started; work already started is
// still delivered. The first exception thrown by `work` or `sink` is
// rethrown after all threads have joined.
template <typename Work, typename Sink>
void ordered_parallel_map(std::size_t n, std::size_t workers, Work&& work, Sink&& sink) {
  using Result = decltype(work(std::size_t{0}));
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::mutex mu;
  std::map<std::size_t, Result> pending;
  std::size_t emit_cursor = 0;
  std::exception_ptr error;

  auto run = [&] {
    while (!stop.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) break;
      std::optional<Result> r;
      try {
        r.emplace(work(i));
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
        stop = true;
        break;
      }
      std::lock_guard lock(mu);
      pending.emplace(i, std::move(*r));
      while (!pending.empty() && pending.begin()->first == emit_cursor) {
        auto node = pending.extract(pending.begin());
        ++emit_cursor;
        if (error) continue;
        try {
          if (!sink(node.key(), std::move(node.mapped()))) stop = true;
        } catch (...) {
          error = std::current_exception();
          stop = true;
        }
      }
    }
  };

  const std::size_t threads = std::max<std::size_t>(1, std::min(workers, n));
  if (threads == 1) {
    run();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(run);
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace ctxrefine
