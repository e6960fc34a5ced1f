#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace gstab {

// Worker count: GCNN_STAB_THREADS overrides the requested value; 0 means hardware concurrency.
inline std::size_t resolve_threads(std::size_t requested) {
  if (const char* env = std::getenv("GCNN_STAB_THREADS"); env != nullptr && *env != '\0') {
    try {
      requested = static_cast<std::size_t>(std::stoul(env));
    } catch (...) {
    }
  }
  if (requested == 0) requested = std::max(1u, std::thread::hardware_concurrency());
  return requested;
}

// Evaluates fn(i) for i in [0, count) and returns results in index order.
// The output does not depend on the number of threads.
template <typename Fn>
auto parallel_map(std::size_t count, std::size_t threads, Fn&& fn) -> std::vector<decltype(fn(std::size_t{}))> {
  using R = decltype(fn(std::size_t{}));
  std::vector<R> out(count);
  threads = std::min(std::max<std::size_t>(threads, 1), std::max<std::size_t>(count, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) out[i] = fn(i);
    return out;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < count; i += threads) out[i] = fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double v) noexcept {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v))
      comp_ += (sum_ - t) + v;
    else
      comp_ += (v - t) + sum_;
    sum_ = t;
  }
  double value() const noexcept { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1)
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  CompensatedSum s;
  for (double x : v) s.add(x);
  r.mean = s.value() / static_cast<double>(v.size());
  if (v.size() < 2) return r;
  CompensatedSum q;
  for (double x : v) q.add((x - r.mean) * (x - r.mean));
  r.std = std::sqrt(q.value() / static_cast<double>(v.size() - 1));
  return r;
}

}  // namespace gstab
