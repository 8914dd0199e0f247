#pragma once

#include <cmath>
#include <vector>

#include "nerform/check.hpp"
#include "nerform/tensor.hpp"

namespace nf {

// Harmonic positional embedding applied per coordinate with octave
// frequencies 2^0 .. 2^{n_freq-1}.
struct PeConfig {
  int n_freq = 8;
  bool include_raw = true;

  void validate() const { NF_CHECK(n_freq >= 1, "embedding needs at least one octave"); }

  // output channels for a k-dimensional input
  i64 dim(i64 k) const { return k * (2 * i64(n_freq) + (include_raw ? 1 : 0)); }
};

// Coordinate-major layout: for each input coordinate c, the block
// [c (if raw), sin(c), cos(c), sin(2c), cos(2c), ..., sin(2^{n-1}c), cos(2^{n-1}c)].
inline void positional_embed_into(const double* x, i64 k, const PeConfig& cfg, double* out) {
  i64 w = 0;
  for (i64 i = 0; i < k; ++i) {
    const double c = x[i];
    if (cfg.include_raw) out[w++] = c;
    double f = 1.0;
    for (int j = 0; j < cfg.n_freq; ++j) {
      out[w++] = std::sin(f * c);
      out[w++] = std::cos(f * c);
      f *= 2.0;
    }
  }
}

inline std::vector<double> positional_embed(const std::vector<double>& x, const PeConfig& cfg) {
  cfg.validate();
  NF_CHECK(!x.empty(), "positional embedding of an empty vector");
  std::vector<double> out(static_cast<std::size_t>(cfg.dim(i64(x.size()))));
  positional_embed_into(x.data(), i64(x.size()), cfg, out.data());
  return out;
}

// Batched embedding of row vectors: [N,k] -> [N, dim(k)].
inline Tensor positional_embed_batch(const Tensor& x, const PeConfig& cfg) {
  cfg.validate();
  NF_CHECK(x.shape.rank == 2, "batched embedding wants [N,k], got " << x.shape.str());
  const i64 n = x.shape[0], k = x.shape[1];
  Tensor out(Shape{n, cfg.dim(k)});
  for (i64 r = 0; r < n; ++r)
    positional_embed_into(x.ptr() + r * k, k, cfg, out.ptr() + r * cfg.dim(k));
  return out;
}

}  // namespace nf
