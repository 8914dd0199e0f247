#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "nerform/check.hpp"

namespace nf {

// Counter-based splittable RNG.  A single master seed is forked into named
// child streams; forks are independent of draw order, so adding a consumer
// somewhere does not shift the numbers seen by unrelated consumers.  All
// output is a pure function of (key, counter), which keeps every run with the
// same seed bit-identical across platforms and thread counts.
namespace detail {
inline std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_string(std::string_view s) {
  // FNV-1a, then scrambled
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return mix64(h);
}
}  // namespace detail

class Rng {
 public:
  Rng() : key_(detail::mix64(0)) {}
  explicit Rng(std::uint64_t seed) : key_(detail::mix64(seed ^ 0xa02b0cf5d3f0e1ffull)) {}

  // Derived stream; independent of this stream's draw position.
  Rng fork(std::uint64_t tag) const {
    Rng r;
    r.key_ = detail::mix64(key_ ^ detail::mix64(tag + 0x6a09e667f3bcc909ull));
    return r;
  }
  Rng fork(std::string_view name) const { return fork(detail::hash_string(name)); }

  std::uint64_t next_u64() { return detail::mix64(key_ + 0x9e3779b97f4a7c15ull * ++ctr_); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n) {
    NF_CHECK(n > 0, "uniform_int needs n > 0, got " << n);
    // rejection sampling to avoid modulo bias
    const std::uint64_t un = std::uint64_t(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return std::int64_t(x % un);
  }

  // Standard normal via Box-Muller (cached spare kept for determinism).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // avoid log(0)
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    // Fisher-Yates
    for (std::int64_t i = std::int64_t(v.size()) - 1; i > 0; --i) {
      std::int64_t j = uniform_int(i + 1);
      std::swap(v[std::size_t(i)], v[std::size_t(j)]);
    }
  }

  // Draw k distinct indices from [0, n) in shuffled order.
  std::vector<std::int64_t> sample_without_replacement(std::int64_t n, std::int64_t k) {
    NF_CHECK(k <= n, "cannot draw " << k << " distinct values from " << n);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[std::size_t(i)] = i;
    shuffle(idx);
    idx.resize(std::size_t(k));
    return idx;
  }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t ctr_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace nf
