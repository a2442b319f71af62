#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace sdflow {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Row-major strides.
inline std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * s[i + 1];
  return st;
}

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

// Malformed or missing input data (files, checkpoints, datasets).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric failure during training/inference (NaN abort).
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

#define SDFLOW_CHECK(cond, msg)                  \
  do {                                           \
    if (!(cond)) {                               \
      std::ostringstream os_;                    \
      os_ << msg;                                \
      throw std::invalid_argument(os_.str());    \
    }                                            \
  } while (0)

// Worker count for kernel loops. SDFF_THREADS caps it; results are
// independent of the count because every output element is written by
// exactly one worker in a fixed order.
inline int worker_threads() {
  static int n = [] {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw <= 0) hw = 1;
    if (hw > 8) hw = 8;
    if (const char* env = std::getenv("SDFF_THREADS")) {
      int cap = std::atoi(env);
      if (cap >= 1 && cap < hw) hw = cap;
    }
    return hw;
  }();
  return n;
}

// Static split of [0, n) into contiguous ranges, one per worker.
inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
  int nt = worker_threads();
  if (n <= 0) return;
  if (nt <= 1 || n < 2 * nt) {
    body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  int64_t chunk = (n + nt - 1) / nt;
  for (int t = 0; t < nt; ++t) {
    int64_t lo = t * chunk;
    int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace sdflow
