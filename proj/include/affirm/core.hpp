#pragma once

// Shared plumbing: error types, the counter-based RNG, and a deterministic
// parallel-for.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace affirm {

inline constexpr double kPi = std::numbers::pi;

inline constexpr double deg2rad(double deg) { return deg * kPi / 180.0; }
inline constexpr double rad2deg(double rad) { return rad * 180.0 / kPi; }

// Bad input: malformed files, inconsistent shapes, violated preconditions.
class InvalidInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical breakdown: divergence, NaN, exhausted retry budgets.
class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// =============================================================================
// Counter-based RNG
// =============================================================================
//
// Every draw is a pure function of (key, counter): the 64-bit output is
// splitmix64_finalize(key + counter * 0x9E3779B97F4A7C15), where key is
// splitmix64_finalize(seed ^ stream * 0xD1B54A32D192ED03). Uniform doubles take
// the top 53 bits. Normals use Box-Muller on two consecutive uniforms (no
// caching of the second variate). Nothing here depends on <random>
// distributions, so streams reproduce bit-identically across platforms.

inline constexpr std::uint64_t splitmix64_finalize(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(splitmix64_finalize(seed ^ (stream * 0xD1B54A32D192ED03ULL))) {}

  std::uint64_t next_u64() {
    const std::uint64_t c = counter_++;
    return splitmix64_finalize(key_ + c * 0x9E3779B97F4A7C15ULL);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  std::uint64_t counter() const { return counter_; }

  // Independent child stream; used to give each slice/stack/sample its own
  // generator without sharing state across threads.
  CounterRng child(std::uint64_t stream) const {
    CounterRng r(0);
    r.key_ = splitmix64_finalize(key_ ^ (stream * 0xD1B54A32D192ED03ULL + 0x632BE59BD9B4E019ULL));
    return r;
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// =============================================================================
// Parallelism
// =============================================================================

namespace detail {
inline std::atomic<int>& thread_setting() {
  static std::atomic<int> n{1};
  return n;
}
}  // namespace detail

inline void set_num_threads(int n) { detail::thread_setting() = std::max(1, n); }
inline int num_threads() { return detail::thread_setting().load(); }

// Runs fn(i) for i in [0, n). Each index must write only its own outputs;
// under that contract results do not depend on the worker count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(num_threads()), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  auto work = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n || failed.load()) return;
      try {
        fn(i);
      } catch (...) {
        if (!failed.exchange(true)) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace affirm
