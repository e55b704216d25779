#pragma once
// Minimal fork-join helper. Each index is processed exactly once; results are
// written by the callee into preallocated slots, so output order never depends
// on scheduling. The first exception is rethrown after all workers join.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace memhom {

inline int worker_count() {
  if (const char* e = std::getenv("MEMHOM_THREADS")) {
    int n = std::atoi(e);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline void parallel_for(int n, const std::function<void(int)>& body) {
  int nw = std::min(worker_count(), n);
  if (nw <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex mu;
  auto work = [&] {
    for (int i; (i = next++) < n;) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  std::vector<std::thread> ts;
  for (int t = 0; t < nw; ++t) ts.emplace_back(work);
  for (auto& t : ts) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace memhom
