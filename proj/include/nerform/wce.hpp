#pragma once

// Source-view feature encoding and warp-conditioned embeddings: a small
// convolutional pyramid over each source image, projective feature sampling
// at 3-D points with validity flags, multi-view aggregation, and assembly of
// the per-ray feature tensor consumed by the transformer renderer.

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <utility>
#include <vector>

#include "nerform/embedding.hpp"
#include "nerform/fields.hpp"
#include "nerform/geometry.hpp"
#include "nerform/tape.hpp"

namespace nf {

// Feature image produced by the source encoder for one source view:
// [H, W, C] values plus the camera the pixels were observed from.  `var`
// is the node on the encoder tape when gradients are being tracked.
struct FeatureGrid {
  CameraPose cam;
  Tensor values;  // [H, W, C]
  Var var;        // optional: encoder-tape node the values belong to

  i64 height() const { return values.shape[0]; }
  i64 width() const { return values.shape[1]; }
  i64 channels() const { return values.shape[2]; }
};

namespace detail {

// Row indices of an im2col expansion for a 3x3 stride-2 pad-1 convolution
// over an [h, w] raster whose rows are flattened row-major.  Out-of-bounds
// taps point at index h*w, where callers append a zero row.
inline std::vector<i64> conv3x3_s2_rows(i64 h, i64 w, i64& oh, i64& ow) {
  oh = (h - 1) / 2 + 1;
  ow = (w - 1) / 2 + 1;
  std::vector<i64> rows;
  rows.reserve(std::size_t(oh * ow * 9));
  for (i64 r = 0; r < oh; ++r)
    for (i64 c = 0; c < ow; ++c)
      for (i64 dr = -1; dr <= 1; ++dr)
        for (i64 dc = -1; dc <= 1; ++dc) {
          const i64 ir = 2 * r + dr;
          const i64 ic = 2 * c + dc;
          const bool in = ir >= 0 && ir < h && ic >= 0 && ic < w;
          rows.push_back(in ? ir * w + ic : h * w);
        }
  return rows;
}

// Nearest-neighbour upsampling indices from an [sh, sw] raster to [h, w].
inline std::vector<i64> upsample_rows(i64 sh, i64 sw, i64 h, i64 w, i64 factor) {
  std::vector<i64> rows;
  rows.reserve(std::size_t(h * w));
  for (i64 r = 0; r < h; ++r)
    for (i64 c = 0; c < w; ++c) {
      const i64 sr = std::min(r / factor, sh - 1);
      const i64 sc = std::min(c / factor, sw - 1);
      rows.push_back(sr * sw + sc);
    }
  return rows;
}

}  // namespace detail

// Convolutional pyramid encoder: three stride-2 stages (16/32/32 channels),
// each followed by a 1x1 projection to 32 channels that is L2-normalised per
// spatial location, upsampled back to the input raster and stacked together
// with the mask and raw RGB channels.  Output channel count is
// 3*32 + 1 + 3 = 100.
class SourceEncoder {
 public:
  static constexpr i64 stage_width[3] = {16, 32, 32};
  static constexpr i64 proj_width = 32;
  std::string prefix = "encoder";

  static constexpr i64 out_channels() { return 3 * proj_width + 1 + 3; }

  // image [H, W, 3], mask [H, W]; returns the [H, W, 100] grid node.
  Var encode(Tape& tape, TapeParams& tp, ParamStore& store, const Rng& init_rng,
             const Tensor& image, const Tensor& mask) const {
    NF_CHECK(image.shape.rank == 3 && image.shape[2] == 3,
             "image must be [H,W,3], got " << image.shape.str());
    NF_CHECK((mask.shape == Shape{image.shape[0], image.shape[1]}),
             "mask raster " << mask.shape.str() << " does not match image " << image.shape.str());
    const i64 h0 = image.shape[0], w0 = image.shape[1];

    // input rows: [H*W, 4] = rgb + mask
    Tensor in = Tensor::zeros(Shape{h0 * w0, 4});
    for (i64 p = 0; p < h0 * w0; ++p) {
      in.at(p * 4 + 0) = image.at(p * 3 + 0);
      in.at(p * 4 + 1) = image.at(p * 3 + 1);
      in.at(p * 4 + 2) = image.at(p * 3 + 2);
      in.at(p * 4 + 3) = mask.at(p);
    }

    Var x = tape.constant(std::move(in));
    i64 h = h0, w = w0, cin = 4;
    std::vector<Var> stacked;
    for (int s = 0; s < 3; ++s) {
      i64 oh = 0, ow = 0;
      auto rows = detail::conv3x3_s2_rows(h, w, oh, ow);
      Var padded = tape.concat({x, tape.constant(Tensor::zeros(Shape{1, cin}))}, 0);
      Var cols = tape.reshape(tape.gather(padded, std::move(rows)), Shape{oh * ow, 9 * cin});
      const std::string cn = prefix + "/conv" + std::to_string(s);
      x = tape.relu(dense(tape, tp, store, init_rng, cn, cols, 9 * cin, stage_width[s]));
      h = oh;
      w = ow;
      cin = stage_width[s];

      // 1x1 projection + per-location L2 normalisation at stage resolution;
      // the epsilon under the sqrt keeps the map smooth at all-zero features
      Var p = dense(tape, tp, store, init_rng, prefix + "/proj" + std::to_string(s), x, cin,
                    proj_width);
      Var ss = tape.reshape(tape.reduce_sum(tape.mul(p, p), 1), Shape{h * w, 1});
      Var norm = tape.sqrt(tape.offset(ss, 1e-8));
      Var pn = tape.div(p, tape.repeat(norm, 1, proj_width));
      const i64 factor = i64(1) << (s + 1);
      stacked.push_back(tape.gather(pn, detail::upsample_rows(h, w, h0, w0, factor)));
    }

    Tensor mask_col = Tensor::zeros(Shape{h0 * w0, 1});
    Tensor rgb_cols = Tensor::zeros(Shape{h0 * w0, 3});
    for (i64 p = 0; p < h0 * w0; ++p) {
      mask_col.at(p) = mask.at(p);
      for (i64 c = 0; c < 3; ++c) rgb_cols.at(p * 3 + c) = image.at(p * 3 + c);
    }
    stacked.push_back(tape.constant(std::move(mask_col)));
    stacked.push_back(tape.constant(std::move(rgb_cols)));
    Var grid = tape.concat(stacked, 1);
    return tape.reshape(grid, Shape{h0, w0, out_channels()});
  }

  // Convenience wrapper producing a FeatureGrid for one source view.
  FeatureGrid encode_source(Tape& tape, TapeParams& tp, ParamStore& store, const Rng& init_rng,
                            const CameraPose& cam, const Tensor& image, const Tensor& mask) const {
    NF_CHECK(i64(cam.height) == image.shape[0] && i64(cam.width) == image.shape[1],
             "camera raster does not match image size");
    FeatureGrid g;
    g.cam = cam;
    g.var = encode(tape, tp, store, init_rng, image, mask);
    g.values = tape.value(g.var);
    return g;
  }
};

namespace detail {

// Plain bilinear read of grid [H, W, C] at raster position u (pixel-center
// convention), matching the tape's bilinear op.
inline void bilinear_read(const Tensor& grid, const Eigen::Vector2d& u, double* out) {
  const i64 h = grid.shape[0], w = grid.shape[1], c = grid.shape[2];
  const double gx = u.x() - 0.5, gy = u.y() - 0.5;
  const double fx = std::floor(gx), fy = std::floor(gy);
  const double ax = gx - fx, ay = gy - fy;
  const i64 x0 = std::clamp(i64(fx), i64(0), w - 1);
  const i64 x1 = std::clamp(i64(fx) + 1, i64(0), w - 1);
  const i64 y0 = std::clamp(i64(fy), i64(0), h - 1);
  const i64 y1 = std::clamp(i64(fy) + 1, i64(0), h - 1);
  const double w00 = (1 - ax) * (1 - ay), w10 = ax * (1 - ay);
  const double w01 = (1 - ax) * ay, w11 = ax * ay;
  const double* g00 = grid.ptr() + (y0 * w + x0) * c;
  const double* g10 = grid.ptr() + (y0 * w + x1) * c;
  const double* g01 = grid.ptr() + (y1 * w + x0) * c;
  const double* g11 = grid.ptr() + (y1 * w + x1) * c;
  for (i64 ch = 0; ch < c; ++ch)
    out[ch] = w00 * g00[ch] + w10 * g10[ch] + w01 * g01[ch] + w11 * g11[ch];
}

}  // namespace detail

// Validity for feature sampling: inside the raster with depth comfortably
// positive (the same cutoff the on-tape projective divide is clamped at).
inline bool wce_valid(const CameraPose& cam, const Eigen::Vector3d& x) {
  Eigen::Vector4d h = cam.P * x.homogeneous();
  if (h.z() <= 1e-6) return false;
  const double ux = h.x() / h.z();
  const double uy = h.y() / h.z();
  return ux >= 0.0 && ux < double(cam.width) && uy >= 0.0 && uy < double(cam.height);
}

// Samples one grid at a world point: project into the source camera, bilinear
// sample when the projection lands in the raster with positive depth,
// otherwise zeros with valid=false.
inline std::pair<std::vector<double>, bool> sample_wce(const FeatureGrid& grid,
                                                       const Eigen::Vector3d& x) {
  std::vector<double> z(std::size_t(grid.channels()), 0.0);
  if (!wce_valid(grid.cam, x)) return {std::move(z), false};
  detail::bilinear_read(grid.values, project(grid.cam, x).u, z.data());
  return {std::move(z), true};
}

// On-tape projective sampling of `grid_var` ([H,W,C] node) at `points`
// ([N,3] node): differentiable in both the grid and the points.  Rows whose
// projection is invalid are zeroed (and their flags cleared); the projective
// divide is clamped away from zero so invalid rows stay finite.
inline Var sample_wce_on_tape(Tape& tape, Var grid_var, const CameraPose& cam, Var points,
                              std::vector<std::uint8_t>* validity = nullptr) {
  const Shape& ps = points.shape();
  NF_CHECK(ps.rank == 2 && ps[1] == 3, "points must be [N,3], got " << ps.str());
  const i64 n = ps[0];
  const i64 c = grid_var.shape()[2];

  // homogeneous projection rows: H = [x 1] P^T
  Tensor pmat = Tensor::zeros(Shape{4, 4});
  for (i64 r = 0; r < 4; ++r)
    for (i64 cc = 0; cc < 4; ++cc) pmat.at(r * 4 + cc) = cam.P(r, cc);
  Var hom = tape.concat({points, tape.constant(Tensor::full(Shape{n, 1}, 1.0))}, 1);
  Var proj = tape.matmul(hom, tape.constant(std::move(pmat)), false, true);
  Var uv = tape.slice(proj, 1, 0, 2);
  Var depth = tape.slice(proj, 1, 2, 1);
  Var coords = tape.div(uv, tape.repeat(tape.clamp(depth, 1e-6, 1e300), 1, 2));
  Var sampled = tape.bilinear_sample_2d(grid_var, coords);

  // validity + zeroing of invalid rows (blocks gradients through them too)
  const Tensor& pv = tape.value(points);
  Tensor row_mask = Tensor::full(Shape{n, c}, 1.0);
  std::vector<std::uint8_t> flags(std::size_t(n), 1);
  bool any_invalid = false;
  for (i64 i = 0; i < n; ++i) {
    const Eigen::Vector3d x(pv.at(i * 3), pv.at(i * 3 + 1), pv.at(i * 3 + 2));
    if (!wce_valid(cam, x)) {
      flags[std::size_t(i)] = 0;
      any_invalid = true;
      for (i64 ch = 0; ch < c; ++ch) row_mask.at(i * c + ch) = 0.0;
    }
  }
  if (validity) *validity = std::move(flags);
  if (!any_invalid) return sampled;
  return tape.mul(sampled, tape.constant(std::move(row_mask)));
}

// Mean and population standard deviation over the valid samples, concatenated
// to a 2C vector; all-invalid input yields zeros.  Per-channel terms are
// accumulated in sorted order so the result is bit-identical under any
// permutation of the input list.
inline std::vector<double> aggregate_wce(
    const std::vector<std::pair<std::vector<double>, bool>>& samples) {
  NF_CHECK(!samples.empty(), "aggregate_wce needs at least one sample");
  const std::size_t c = samples.front().first.size();
  std::vector<double> out(2 * c, 0.0);
  std::vector<const std::vector<double>*> valid;
  for (const auto& [z, ok] : samples) {
    NF_CHECK(z.size() == c, "inconsistent sample widths");
    if (ok) valid.push_back(&z);
  }
  if (valid.empty()) return out;
  std::vector<double> buf(valid.size());
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t v = 0; v < valid.size(); ++v) buf[v] = (*valid[v])[i];
    std::sort(buf.begin(), buf.end());
    double acc = 0.0;
    for (double b : buf) acc += b;
    const double mean = acc / double(valid.size());
    for (std::size_t v = 0; v < valid.size(); ++v) {
      const double d = (*valid[v])[i] - mean;
      buf[v] = d * d;
    }
    std::sort(buf.begin(), buf.end());
    double acc2 = 0.0;
    for (double b : buf) acc2 += b;
    out[i] = mean;
    out[c + i] = std::sqrt(acc2 / double(valid.size()));
  }
  return out;
}

// On-tape aggregation of a [N, n_src, C] sample block with a validity mask:
// per ray-sample mean and population std over the valid sources, -> [N, 2C].
inline Var aggregate_wce_on_tape(Tape& tape, Var z, const std::vector<std::uint8_t>& validity) {
  const Shape& s = z.shape();
  NF_CHECK(s.rank == 3, "expected [N,n_src,C], got " << s.str());
  const i64 n = s[0], k = s[1], c = s[2];
  NF_CHECK(i64(validity.size()) == n * k, "validity size mismatch");

  Tensor mask3 = Tensor::zeros(Shape{n, k, c});
  Tensor inv_count = Tensor::zeros(Shape{n, 1});
  Tensor live = Tensor::zeros(Shape{n, 1});  // 1 when any source is valid
  for (i64 i = 0; i < n; ++i) {
    i64 cnt = 0;
    for (i64 j = 0; j < k; ++j)
      if (validity[std::size_t(i * k + j)]) {
        ++cnt;
        for (i64 ch = 0; ch < c; ++ch) mask3.at((i * k + j) * c + ch) = 1.0;
      }
    inv_count.at(i) = cnt > 0 ? 1.0 / double(cnt) : 0.0;
    live.at(i) = cnt > 0 ? 1.0 : 0.0;
  }
  Var msk = tape.constant(std::move(mask3));
  Var invc = tape.repeat(tape.constant(std::move(inv_count)), 1, c);        // [N,C]
  Var zm = tape.mul(z, msk);
  Var mean = tape.mul(tape.reduce_sum(zm, 1), invc);                        // [N,C]
  Var mean_sq = tape.mul(tape.reduce_sum(tape.mul(zm, zm), 1), invc);      // E[z^2]
  Var var = tape.clamp(tape.sub(mean_sq, tape.mul(mean, mean)), 0.0, 1e300);
  Var sd = tape.sqrt(var);
  Var livec = tape.repeat(tape.constant(std::move(live)), 1, 2 * c);
  return tape.mul(tape.concat({mean, sd}, 1), livec);
}

// Per-ray feature tensor: the stack of per-source warp-conditioned
// embeddings for every ray sample, plus a validity mask, with the point and
// direction embeddings appended identically to every source column.
struct RayFeatureTensor {
  Var z;                                // [N, n_src, C]
  std::vector<std::uint8_t> validity;   // N * n_src flags, source-minor
  i64 n_samples = 0;
  i64 n_src = 0;
  i64 channels = 0;
};

struct RayTensorConfig {
  bool append_pe = true;
  PeConfig pe_pos{8, true};
  PeConfig pe_dir{4, true};

  i64 extra_channels() const { return append_pe ? pe_pos.dim(3) + pe_dir.dim(3) : 0; }
};

// Assembles Z for a stack of ray samples: Z[j][i] = sample_wce(grid_i, x_j),
// ray-sample major, with one view direction per sample row.  `points` may be
// a constant or a gradient leaf; several rays' samples can be concatenated.
inline RayFeatureTensor build_ray_tensor_rows(Tape& tape,
                                              const std::vector<const FeatureGrid*>& grids,
                                              Var points, const Tensor& dirs,
                                              const RayTensorConfig& cfg = {}) {
  NF_CHECK(!grids.empty(), "need at least one source grid");
  const i64 n = points.shape()[0];
  const i64 n_src = i64(grids.size());
  const i64 dz = grids.front()->channels();
  NF_CHECK(dirs.shape.rank == 2 && dirs.shape[1] == 3 && dirs.shape[0] == n,
           "dirs must be [N,3] matching points, got " << dirs.shape.str());
  for (const FeatureGrid* g : grids)
    NF_CHECK(g->channels() == dz, "inconsistent feature channels across sources");

  Var pe;  // [N, Cpe] appended to every source column
  if (cfg.append_pe) {
    Tensor pe_x = positional_embed_batch(tape.value(points), cfg.pe_pos);
    Tensor pe_d = positional_embed_batch(dirs, cfg.pe_dir);
    Tensor both = Tensor::zeros(Shape{n, cfg.extra_channels()});
    const i64 cx = cfg.pe_pos.dim(3), cd = cfg.pe_dir.dim(3);
    for (i64 i = 0; i < n; ++i) {
      for (i64 cc = 0; cc < cx; ++cc) both.at(i * (cx + cd) + cc) = pe_x.at(i * cx + cc);
      for (i64 cc = 0; cc < cd; ++cc) both.at(i * (cx + cd) + cx + cc) = pe_d.at(i * cd + cc);
    }
    pe = tape.constant(std::move(both));
  }

  RayFeatureTensor out;
  out.n_samples = n;
  out.n_src = n_src;
  out.channels = dz + cfg.extra_channels();
  out.validity.assign(std::size_t(n * n_src), 0);

  std::vector<Var> slabs;
  for (i64 i = 0; i < n_src; ++i) {
    const FeatureGrid& g = *grids[std::size_t(i)];
    Var gv = g.var.valid() && g.var.tape == &tape ? g.var : tape.constant(g.values);
    std::vector<std::uint8_t> flags;
    Var zi = sample_wce_on_tape(tape, gv, g.cam, points, &flags);
    for (i64 j = 0; j < n; ++j) out.validity[std::size_t(j * n_src + i)] = flags[std::size_t(j)];
    if (cfg.append_pe) zi = tape.concat({zi, pe}, 1);
    slabs.push_back(tape.reshape(zi, Shape{n, 1, out.channels}));
  }
  out.z = slabs.size() == 1 ? slabs[0] : tape.concat(slabs, 1);
  return out;
}

// Single-ray convenience wrapper: one shared view direction for every sample.
inline RayFeatureTensor build_ray_tensor(Tape& tape, const std::vector<const FeatureGrid*>& grids,
                                         Var points, const Eigen::Vector3d& dir,
                                         const RayTensorConfig& cfg = {}) {
  const i64 n = points.shape()[0];
  Tensor dir_rows = Tensor::zeros(Shape{n, 3});
  for (i64 i = 0; i < n; ++i)
    for (i64 cc = 0; cc < 3; ++cc) dir_rows.at(i * 3 + cc) = dir[cc];
  return build_ray_tensor_rows(tape, grids, points, dir_rows, cfg);
}

}  // namespace nf
