#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace sfuda {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem / serialization failures.
struct IoError : Error {
  using Error::Error;
};

// Declared metadata disagrees with stored bytes.
struct CorruptionError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct InvalidInputError : Error {
  using Error::Error;
};

struct TrainingDivergedError : Error {
  long step;
  TrainingDivergedError(const std::string& msg, long step_)
      : Error(msg), step(step_) {}
};

struct UnsupportedObjectiveError : Error {
  using Error::Error;
};

// Session misuse: submit after finalize, unknown session, empty finalize.
struct ProtocolError : Error {
  using Error::Error;
};

// A query batch contained forbidden (source/target) content.
struct BoundaryViolationError : Error {
  std::vector<std::string> rejected_ids;
  BoundaryViolationError(const std::string& msg, std::vector<std::string> ids)
      : Error(msg), rejected_ids(std::move(ids)) {}
};

// SFUDA_THREADS caps worker threads for batch-parallel loops.
inline int thread_cap() {
  static const int cap = [] {
    if (const char* env = std::getenv("SFUDA_THREADS")) {
      const int v = std::atoi(env);
      if (v >= 1) return v < 256 ? v : 256;
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc < 16 ? hc : 16);
  }();
  return cap;
}

// Static contiguous partition of [0, n). Workers touch disjoint slots only,
// so results do not depend on the number of threads.
template <class Fn>
void parallel_for(int n, Fn&& fn) {
  const int workers = std::min(thread_cap(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const int chunk = (n + workers - 1) / workers;
  for (int t = 0; t < workers; ++t) {
    const int lo = t * chunk;
    const int hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace sfuda
