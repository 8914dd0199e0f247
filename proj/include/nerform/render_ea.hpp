#pragma once

// Emission-absorption raymarcher. Per sample i with opacity sigma_i and
// spacing delta_i, transmittance T_i = exp(-delta_i * sigma_i); the sample
// weight is the product of all earlier T_j times (1 - T_i). Pixel color is
// the weight-sum of sample colors, alpha = 1 - prod T. A coarse uniform pass
// drives importance sampling of a fine pass; the final composite runs on the
// union of both sample sets. Both composites are exposed so training can
// optimize their sum.

#include <functional>
#include <utility>
#include <vector>

#include "nerform/check.hpp"
#include "nerform/geometry.hpp"
#include "nerform/tape.hpp"

namespace nf {

struct EaWeights {
  std::vector<double> w;              // per-sample contribution weights
  std::vector<double> transmittance;  // per-sample T_i = exp(-delta_i * sigma_i)
  double alpha = 0.0;                 // 1 - prod T_i
};

// Reference weights on plain doubles; the on-tape composite must agree.
inline EaWeights ea_weights(const std::vector<double>& opacities,
                            const std::vector<double>& deltas) {
  NF_CHECK(opacities.size() == deltas.size(),
           "ea_weights: " << opacities.size() << " opacities vs " << deltas.size() << " deltas");
  NF_CHECK(!opacities.empty(), "ea_weights: empty input");
  EaWeights out;
  out.w.resize(opacities.size());
  out.transmittance.resize(opacities.size());
  double trans = 1.0;
  for (std::size_t i = 0; i < opacities.size(); ++i) {
    NF_CHECK(opacities[i] >= 0.0, "ea_weights: opacity[" << i << "] negative");
    NF_CHECK(deltas[i] >= 0.0, "ea_weights: delta[" << i << "] negative");
    const double T = std::exp(-deltas[i] * opacities[i]);
    out.transmittance[i] = T;
    out.w[i] = trans * (1.0 - T);
    trans *= T;
  }
  out.alpha = 1.0 - trans;
  return out;
}

// delta_i = d_{i+1} - d_i, last delta runs to the far plane.
inline std::vector<double> deltas_from_depths(const std::vector<double>& depths, double far) {
  NF_CHECK(!depths.empty(), "deltas_from_depths: empty depth list");
  std::vector<double> deltas(depths.size());
  for (std::size_t i = 0; i + 1 < depths.size(); ++i) {
    deltas[i] = depths[i + 1] - depths[i];
    NF_CHECK(deltas[i] >= 0.0, "deltas_from_depths: depths not sorted at index " << i);
  }
  deltas.back() = far - depths.back();
  NF_CHECK(deltas.back() >= 0.0, "deltas_from_depths: last depth beyond far plane");
  return deltas;
}

// Evaluates a radiance field at [T,3] points with [T,3] unit view directions;
// returns (opacity [T,1], rgb [T,3]) on the given tape.
using FieldEval = std::function<std::pair<Var, Var>(Tape&, const Tensor&, const Tensor&)>;

struct EaRenderConfig {
  int n_coarse = 32;
  int n_fine = 16;
  bool stratified = true;
  bool white_background = false;

  void validate() const {
    NF_CHECK(n_coarse >= 1, "n_coarse must be >= 1, got " << n_coarse);
    NF_CHECK(n_fine >= 0, "n_fine must be >= 0, got " << n_fine);
  }
};

// One composite over a batch of rays that share a sample count.
struct EaPass {
  Var rgb;      // [R,3]
  Var alpha;    // [R]
  Var weights;  // [R,N]
  Tensor depths;              // [R,N] sample depths along each ray
  std::vector<double> depth;  // [R] weight-averaged expected depth

  i64 n_rays() const { return depths.shape[0]; }
  i64 n_samples() const { return depths.shape[1]; }
};

struct EaRender {
  EaPass coarse;
  EaPass fine;  // the final composite; aliases coarse when n_fine == 0
  bool has_fine = false;
};

namespace detail {

// Strict upper-triangular ones; (x * U)_i = sum_{j<i} x_j.
inline Var strict_upper_ones(Tape& tape, i64 n) {
  Tensor u = Tensor::zeros(Shape{n, n});
  for (i64 r = 0; r < n; ++r)
    for (i64 c = r + 1; c < n; ++c) u.at(r * n + c) = 1.0;
  return tape.constant(std::move(u));
}

inline EaPass ea_composite_batch(Tape& tape, Var opacity, Var colors, Tensor depths,
                                 const std::vector<double>& fars, bool white_background) {
  const i64 rays = depths.shape[0], n = depths.shape[1];
  NF_CHECK(i64(fars.size()) == rays, "composite: one far plane per ray");
  NF_CHECK((tape.shape(opacity) == Shape{rays * n, 1}),
           "composite: opacity shape " << tape.shape(opacity).str());
  NF_CHECK((tape.shape(colors) == Shape{rays * n, 3}),
           "composite: colors shape " << tape.shape(colors).str());

  Tensor deltas = Tensor::zeros(Shape{rays, n});
  for (i64 r = 0; r < rays; ++r) {
    std::vector<double> d(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) d[std::size_t(i)] = depths.at(r * n + i);
    const std::vector<double> dl = deltas_from_depths(d, fars[std::size_t(r)]);
    for (i64 i = 0; i < n; ++i) deltas.at(r * n + i) = dl[std::size_t(i)];
  }

  const Var sd = tape.mul(tape.reshape(opacity, Shape{rays, n}), tape.constant(deltas));
  const Var acc = tape.reshape(
      tape.matmul(tape.reshape(sd, Shape{rays, 1, n}), strict_upper_ones(tape, n)),
      Shape{rays, n});
  const Var trans_before = tape.exp(tape.neg(acc));                      // prod_{j<i} T_j
  const Var absorb = tape.offset(tape.neg(tape.exp(tape.neg(sd))), 1.0);  // 1 - T_i

  EaPass pass;
  pass.weights = tape.mul(trans_before, absorb);
  pass.alpha = tape.offset(tape.neg(tape.exp(tape.neg(tape.reduce_sum(sd, 1)))), 1.0);
  Var pix = tape.reshape(tape.matmul(tape.reshape(pass.weights, Shape{rays, 1, n}),
                                     tape.reshape(colors, Shape{rays, n, 3})),
                         Shape{rays, 3});
  if (white_background) {
    const Var bg = tape.repeat(tape.reshape(tape.offset(tape.neg(pass.alpha), 1.0),
                                            Shape{rays, 1}),
                               1, 3);
    pix = tape.add(pix, bg);
  }
  pass.rgb = pix;
  pass.depths = std::move(depths);

  pass.depth.resize(std::size_t(rays));
  const Tensor& wv = tape.value(pass.weights);
  for (i64 r = 0; r < rays; ++r) {
    double num = 0.0, den = 0.0;
    for (i64 i = 0; i < n; ++i) {
      num += wv.at(r * n + i) * pass.depths.at(r * n + i);
      den += wv.at(r * n + i);
    }
    pass.depth[std::size_t(r)] = num / std::max(den, 1e-10);
  }
  return pass;
}

inline std::pair<Var, Var> eval_field_at(Tape& tape, const FieldEval& field,
                                         const std::vector<Ray>& rays, const Tensor& depths) {
  const i64 n = depths.shape[1];
  Tensor points = Tensor::zeros(Shape{i64(rays.size()) * n, 3});
  Tensor dirs = Tensor::zeros(Shape{i64(rays.size()) * n, 3});
  for (i64 r = 0; r < i64(rays.size()); ++r) {
    const Ray& ray = rays[std::size_t(r)];
    for (i64 i = 0; i < n; ++i) {
      const Eigen::Vector3d p = ray.at(depths.at(r * n + i));
      for (i64 k = 0; k < 3; ++k) {
        points.at((r * n + i) * 3 + k) = p[k];
        dirs.at((r * n + i) * 3 + k) = ray.dir[k];
      }
    }
  }
  try {
    return field(tape, points, dirs);
  } catch (const std::exception& e) {
    // Re-run ray by ray so the failure names the ray that caused it.
    for (const Ray& ray : rays) {
      Tensor p1 = Tensor::zeros(Shape{n, 3}), d1 = Tensor::zeros(Shape{n, 3});
      const i64 r = &ray - rays.data();
      for (i64 i = 0; i < n * 3; ++i) {
        p1.at(i) = points.at(r * n * 3 + i);
        d1.at(i) = dirs.at(r * n * 3 + i);
      }
      try {
        Tape probe;
        field(probe, p1, d1);
      } catch (const std::exception&) {
        throw error("field evaluation failed for ray at pixel (" + std::to_string(ray.pixel.x()) +
                    ", " + std::to_string(ray.pixel.y()) + "): " + e.what());
      }
    }
    throw error(std::string("field evaluation failed for ray batch: ") + e.what());
  }
}

}  // namespace detail

// Composites one ray from explicit samples: opacity [N,1], colors [N,3] at
// the given sorted depths.
inline EaPass ea_composite(Tape& tape, Var opacity, Var colors, const std::vector<double>& depths,
                           double far, bool white_background = false) {
  NF_CHECK(!depths.empty(), "ea_composite: empty depth list");
  Tensor d = Tensor::zeros(Shape{1, i64(depths.size())});
  for (i64 i = 0; i < i64(depths.size()); ++i) d.at(i) = depths[std::size_t(i)];
  return detail::ea_composite_batch(tape, opacity, colors, std::move(d), {far}, white_background);
}

// Renders a batch of rays that share a sample count but may carry their own
// near/far planes. The rng drives stratified jitter and importance sampling;
// rays are forked from it by index, so results do not depend on chunking.
inline EaRender ea_render(Tape& tape, const FieldEval& field, const std::vector<Ray>& rays,
                          const EaRenderConfig& cfg, Rng& rng) {
  cfg.validate();
  NF_CHECK(!rays.empty(), "ea_render: empty ray batch");
  const i64 nr = i64(rays.size());
  for (const Ray& r : rays)
    NF_CHECK(r.near > 0.0 && r.far > r.near,
             "ea_render: bad near/far [" << r.near << ", " << r.far << "]");

  Tensor coarse_d = Tensor::zeros(Shape{nr, cfg.n_coarse});
  std::vector<Rng> ray_rngs;
  ray_rngs.reserve(std::size_t(nr));
  for (i64 r = 0; r < nr; ++r) {
    ray_rngs.push_back(rng.fork("ray/" + std::to_string(r)));
    const std::vector<double> d = sample_uniform(rays[std::size_t(r)].near,
                                                 rays[std::size_t(r)].far, cfg.n_coarse,
                                                 cfg.stratified, ray_rngs.back());
    for (i64 i = 0; i < cfg.n_coarse; ++i) coarse_d.at(r * cfg.n_coarse + i) = d[std::size_t(i)];
  }

  std::vector<double> fars;
  fars.reserve(std::size_t(nr));
  for (const Ray& r : rays) fars.push_back(r.far);

  EaRender out;
  {
    auto [opacity, colors] = detail::eval_field_at(tape, field, rays, coarse_d);
    out.coarse = detail::ea_composite_batch(tape, opacity, colors, coarse_d, fars,
                                            cfg.white_background);
  }
  if (cfg.n_fine == 0) {
    out.fine = out.coarse;
    out.has_fine = false;
    return out;
  }

  const i64 nm = cfg.n_coarse + cfg.n_fine;
  Tensor merged_d = Tensor::zeros(Shape{nr, nm});
  const Tensor& wv = tape.value(out.coarse.weights);
  for (i64 r = 0; r < nr; ++r) {
    std::vector<double> cd(std::size_t(cfg.n_coarse)), cw(std::size_t(cfg.n_coarse));
    for (i64 i = 0; i < cfg.n_coarse; ++i) {
      cd[std::size_t(i)] = coarse_d.at(r * cfg.n_coarse + i);
      cw[std::size_t(i)] = wv.at(r * cfg.n_coarse + i);
    }
    const std::vector<double> md = sample_importance(cd, cw, cfg.n_fine, ray_rngs[std::size_t(r)]);
    NF_CHECK(i64(md.size()) == nm, "importance sampling returned " << md.size() << " depths");
    for (i64 i = 0; i < nm; ++i) merged_d.at(r * nm + i) = md[std::size_t(i)];
  }

  auto [opacity, colors] = detail::eval_field_at(tape, field, rays, merged_d);
  out.fine = detail::ea_composite_batch(tape, opacity, colors, merged_d, fars,
                                        cfg.white_background);
  out.has_fine = true;
  return out;
}

inline EaRender ea_render(Tape& tape, const FieldEval& field, const Ray& ray,
                          const EaRenderConfig& cfg, Rng& rng) {
  return ea_render(tape, field, std::vector<Ray>{ray}, cfg, rng);
}

}  // namespace nf
