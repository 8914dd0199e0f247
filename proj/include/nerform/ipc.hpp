#pragma once

// Implicit point-cloud rendering: a template cloud deformed by an offset MLP
// (optionally latent-conditioned), colored by a color MLP, and splatted
// differentiably.  A point influences a pixel when its projection lands
// within epsilon * focal pixels; its transmittance ramps linearly from 0 at
// the projection center to 1 at the rim, and hits composite front to back
// with the usual emission-absorption weights.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <utility>
#include <vector>

#include "nerform/adam.hpp"
#include "nerform/check.hpp"
#include "nerform/embedding.hpp"
#include "nerform/fields.hpp"
#include "nerform/geometry.hpp"
#include "nerform/tape.hpp"

namespace nf {

// Evenly spread template points on a sphere (spiral construction, no rng).
inline Tensor sphere_template(i64 n_points, double radius = 1.0) {
  NF_CHECK(n_points >= 1, "sphere_template: need at least one point");
  Tensor out = Tensor::zeros(Shape{n_points, 3});
  const double golden = M_PI * (3.0 - std::sqrt(5.0));
  for (i64 k = 0; k < n_points; ++k) {
    const double z = 1.0 - 2.0 * (double(k) + 0.5) / double(n_points);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * double(k);
    out.at(k * 3 + 0) = radius * r * std::cos(phi);
    out.at(k * 3 + 1) = radius * r * std::sin(phi);
    out.at(k * 3 + 2) = radius * z;
  }
  return out;
}

namespace detail {

// Raster-space projections of [P,3] points: coords Var [P,2] on tape plus
// off-tape depths and validity (depth above the projective clamp).
struct CloudProjection {
  Var coords;
  std::vector<double> depth;
  std::vector<uint8_t> valid;
};

inline CloudProjection project_cloud(Tape& tape, Var positions, const CameraPose& cam) {
  const Shape s = tape.shape(positions);
  NF_CHECK(s.rank == 2 && s[1] == 3, "project_cloud: positions must be [P,3]");
  const i64 p = s[0];
  Tensor pm = Tensor::zeros(Shape{4, 4});
  for (i64 r = 0; r < 4; ++r)
    for (i64 c = 0; c < 4; ++c) pm.at(r * 4 + c) = cam.P(r, c);
  const Var hom = tape.concat({positions, tape.constant(Tensor::full(Shape{p, 1}, 1.0))}, 1);
  const Var proj = tape.matmul(hom, tape.constant(std::move(pm)), false, true);
  const Var depth = tape.clamp(tape.slice(proj, 1, 2, 1), 1e-6, 1e300);
  CloudProjection out;
  out.coords = tape.div(tape.slice(proj, 1, 0, 2), tape.repeat(depth, 1, 2));
  out.depth.resize(std::size_t(p));
  out.valid.resize(std::size_t(p));
  const Tensor& pv = tape.value(proj);
  for (i64 i = 0; i < p; ++i) {
    out.depth[std::size_t(i)] = pv.at(i * 4 + 2);
    out.valid[std::size_t(i)] = pv.at(i * 4 + 2) > 1e-6 ? 1 : 0;
  }
  return out;
}

}  // namespace detail

struct IpcRender {
  Var rgb;    // [n_pixels, 3]
  Var alpha;  // [n_pixels]
  std::vector<std::pair<int, int>> pixels;  // (col, row) per output index
};

// Splats the cloud onto the requested pixels (all of them when empty).
inline IpcRender ipc_render(Tape& tape, Var positions, Var colors, const CameraPose& cam,
                            double epsilon, std::vector<std::pair<int, int>> pixels = {}) {
  const Shape ps = tape.shape(positions);
  NF_CHECK((tape.shape(colors) == Shape{ps[0], 3}),
           "ipc_render: colors shape " << tape.shape(colors).str());
  const double radius = epsilon * focal_px_of(cam);
  NF_CHECK(radius >= 0.5,
           "ipc_render: projected point radius " << radius << " px is under half a pixel");

  if (pixels.empty()) {
    pixels.reserve(std::size_t(cam.width) * std::size_t(cam.height));
    for (int r = 0; r < cam.height; ++r)
      for (int c = 0; c < cam.width; ++c) pixels.emplace_back(c, r);
  }

  const detail::CloudProjection proj = detail::project_cloud(tape, positions, cam);
  const Tensor cv = tape.value(proj.coords).clone();  // node storage may reallocate below
  const i64 np = ps[0];

  // Uniform hash over raster space with cell size = splat radius.
  std::map<std::pair<i64, i64>, std::vector<i64>> cells;
  const auto cell_of = [&](double x, double y) {
    return std::make_pair(i64(std::floor(x / radius)), i64(std::floor(y / radius)));
  };
  for (i64 i = 0; i < np; ++i)
    if (proj.valid[std::size_t(i)]) cells[cell_of(cv.at(i * 2), cv.at(i * 2 + 1))].push_back(i);

  // Hit list per pixel: candidates from the 3x3 cell neighborhood, filtered
  // by distance, ordered by depth (ties by point index).
  struct Hit {
    i64 point;
    double depth;
  };
  std::vector<std::vector<Hit>> hits(pixels.size());
  std::vector<i64> pair_point;
  std::vector<double> pair_center;
  for (std::size_t px = 0; px < pixels.size(); ++px) {
    const double ux = double(pixels[px].first) + 0.5;
    const double uy = double(pixels[px].second) + 0.5;
    const auto base = cell_of(ux, uy);
    std::vector<i64> cand;
    for (i64 dx = -1; dx <= 1; ++dx)
      for (i64 dy = -1; dy <= 1; ++dy) {
        const auto it = cells.find({base.first + dx, base.second + dy});
        if (it != cells.end()) cand.insert(cand.end(), it->second.begin(), it->second.end());
      }
    std::sort(cand.begin(), cand.end());
    for (i64 i : cand) {
      const double d = std::hypot(cv.at(i * 2) - ux, cv.at(i * 2 + 1) - uy);
      if (d < radius) hits[px].push_back({i, proj.depth[std::size_t(i)]});
    }
    std::stable_sort(hits[px].begin(), hits[px].end(), [](const Hit& a, const Hit& b) {
      if (a.depth != b.depth) return a.depth < b.depth;
      return a.point < b.point;
    });
    for (const Hit& h : hits[px]) {
      pair_point.push_back(h.point);
      pair_center.push_back(ux);
      pair_center.push_back(uy);
    }
  }

  // One batched transmittance computation over every (pixel, point) pair.
  Var pair_T;
  if (!pair_point.empty()) {
    const i64 q = i64(pair_point.size());
    const Var g = tape.gather(proj.coords, pair_point);
    const Var diff = tape.sub(g, tape.constant(Tensor::from(Shape{q, 2}, pair_center)));
    const Var dist = tape.sqrt(tape.reduce_sum(tape.mul(diff, diff), 1));
    pair_T = tape.clamp(tape.scale(dist, 1.0 / radius), 0.0, 1.0);
  }

  const Var zero3 = tape.constant(Tensor::zeros(Shape{1, 3}));
  const Var zero1 = tape.constant(Tensor::zeros(Shape{1}));
  const Var one1 = tape.constant(Tensor::full(Shape{1}, 1.0));
  std::vector<Var> rgb_rows, alpha_rows;
  rgb_rows.reserve(pixels.size());
  alpha_rows.reserve(pixels.size());
  i64 cursor = 0;
  for (std::size_t px = 0; px < pixels.size(); ++px) {
    if (hits[px].empty()) {
      rgb_rows.push_back(zero3);
      alpha_rows.push_back(zero1);
      continue;
    }
    Var trans = one1;
    Var acc = zero3;
    for (const Hit& h : hits[px]) {
      const Var ti = tape.slice(pair_T, 0, cursor, 1);
      ++cursor;
      const Var w = tape.mul(trans, tape.offset(tape.neg(ti), 1.0));
      const Var ci = tape.gather(colors, {h.point});
      acc = tape.add(acc, tape.mul(tape.repeat(tape.reshape(w, Shape{1, 1}), 1, 3), ci));
      trans = tape.mul(trans, ti);
    }
    rgb_rows.push_back(acc);
    alpha_rows.push_back(tape.offset(tape.neg(trans), 1.0));
  }

  IpcRender out;
  out.rgb = tape.concat(rgb_rows, 0);
  out.alpha = tape.concat(alpha_rows, 0);
  out.pixels = std::move(pixels);
  return out;
}

// Symmetric mean nearest-neighbor distance, in pixels, between the projected
// cloud and the foreground pixel centers of a mask.  Assignment happens off
// tape; distances stay differentiable in the point positions.  Points that
// project behind the camera contribute a fixed far-plane penalty instead of
// a distance (degenerate clouds stay finite, gradient-free).
inline Var chamfer_mask_loss(Tape& tape, Var positions, const CameraPose& cam,
                             const Tensor& mask, Rng& rng, i64 max_mask_pixels = 4096) {
  NF_CHECK((mask.shape == Shape{cam.height, cam.width}),
           "chamfer_mask_loss: mask shape " << mask.shape.str() << " does not match camera");
  std::vector<double> fg;
  for (i64 r = 0; r < cam.height; ++r)
    for (i64 c = 0; c < cam.width; ++c)
      if (mask.at(r * cam.width + c) > 0.5) {
        fg.push_back(double(c) + 0.5);
        fg.push_back(double(r) + 0.5);
      }
  NF_CHECK(!fg.empty(), "chamfer_mask_loss: mask has no foreground pixels");
  i64 m = i64(fg.size()) / 2;
  if (m > max_mask_pixels) {
    // Deterministic stratified subsample: one pixel per contiguous stratum.
    std::vector<double> keep;
    Rng sub = rng.fork("chamfer/subsample");
    for (i64 k = 0; k < max_mask_pixels; ++k) {
      const i64 lo = k * m / max_mask_pixels;
      const i64 hi = (k + 1) * m / max_mask_pixels;
      const i64 pick = lo + sub.uniform_int(std::max<i64>(1, hi - lo));
      keep.push_back(fg[std::size_t(pick * 2)]);
      keep.push_back(fg[std::size_t(pick * 2 + 1)]);
    }
    fg = std::move(keep);
    m = max_mask_pixels;
  }

  const detail::CloudProjection proj = detail::project_cloud(tape, positions, cam);
  const Tensor cv = tape.value(proj.coords).clone();  // node storage may reallocate below
  const i64 np = tape.shape(positions)[0];
  const double penalty = cam.far * focal_px_of(cam);

  std::vector<i64> valid_pts;
  for (i64 i = 0; i < np; ++i)
    if (proj.valid[std::size_t(i)]) valid_pts.push_back(i);

  // cloud -> mask term: each valid point to its nearest mask pixel.
  Var cloud_term;
  {
    std::vector<i64> idx;
    std::vector<double> target;
    for (i64 i : valid_pts) {
      const double x = cv.at(i * 2), y = cv.at(i * 2 + 1);
      double best = std::numeric_limits<double>::infinity();
      i64 bj = 0;
      for (i64 j = 0; j < m; ++j) {
        const double d = std::hypot(x - fg[std::size_t(j * 2)], y - fg[std::size_t(j * 2 + 1)]);
        if (d < best) {
          best = d;
          bj = j;
        }
      }
      idx.push_back(i);
      target.push_back(fg[std::size_t(bj * 2)]);
      target.push_back(fg[std::size_t(bj * 2 + 1)]);
    }
    Var sum;
    if (!idx.empty()) {
      const Var g = tape.gather(proj.coords, idx);
      const Var diff = tape.sub(g, tape.constant(Tensor::from(Shape{i64(idx.size()), 2}, target)));
      sum = tape.reduce_sum(tape.sqrt(tape.reduce_sum(tape.mul(diff, diff), 1)));
    } else {
      sum = tape.constant_scalar(0.0);
    }
    const double invalid = penalty * double(np - i64(valid_pts.size()));
    cloud_term = tape.scale(tape.offset(sum, invalid), 1.0 / double(np));
  }

  // mask -> cloud term: each mask pixel to its nearest valid point.
  Var mask_term;
  if (!valid_pts.empty()) {
    std::vector<i64> idx;
    std::vector<double> target;
    for (i64 j = 0; j < m; ++j) {
      const double x = fg[std::size_t(j * 2)], y = fg[std::size_t(j * 2 + 1)];
      double best = std::numeric_limits<double>::infinity();
      i64 bi = valid_pts[0];
      for (i64 i : valid_pts) {
        const double d = std::hypot(x - cv.at(i * 2), y - cv.at(i * 2 + 1));
        if (d < best) {
          best = d;
          bi = i;
        }
      }
      idx.push_back(bi);
      target.push_back(x);
      target.push_back(y);
    }
    const Var g = tape.gather(proj.coords, idx);
    const Var diff = tape.sub(g, tape.constant(Tensor::from(Shape{m, 2}, target)));
    mask_term = tape.reduce_mean(tape.sqrt(tape.reduce_sum(tape.mul(diff, diff), 1)));
  } else {
    mask_term = tape.constant_scalar(penalty);
  }

  return tape.add(cloud_term, mask_term);
}

struct IpcConfig {
  i64 n_points = 1024;
  double epsilon = 0.05;       // splat radius as a fraction of focal length
  double template_radius = 1.0;
  PeConfig pe{6, true};
  int trunk_layers = 3;
  int trunk_width = 128;
  int latent_dim = 0;  // 0 = single-scene cloud, no conditioning

  void validate() const {
    NF_CHECK(n_points >= 1, "n_points must be >= 1");
    NF_CHECK(epsilon > 0.0, "epsilon must be positive");
    NF_CHECK(trunk_layers >= 1 && trunk_width >= 1, "bad trunk size");
    NF_CHECK(latent_dim >= 0, "latent_dim must be >= 0");
  }
};

struct IpcPrediction {
  Var positions;  // [P,3] template + predicted offsets
  Var colors;     // [P,3] in (0,1)
};

// Template cloud deformed and colored by two MLP heads.  The offset head's
// final layer starts at zero, so a fresh model reproduces the template
// exactly regardless of the latent code.
struct IpcModel {
  IpcConfig cfg;
  std::string prefix = "ipc";
  Tensor tmpl;  // [P,3]

  explicit IpcModel(IpcConfig c = {}) : cfg(c) {
    cfg.validate();
    tmpl = sphere_template(cfg.n_points, cfg.template_radius);
  }

  IpcPrediction predict(Tape& tape, TapeParams& tp, ParamStore& store, const Rng& init_rng,
                        Var z = {}) const {
    const i64 p = cfg.n_points;
    Tensor pe = Tensor::zeros(Shape{p, cfg.pe.dim(3)});
    for (i64 i = 0; i < p; ++i) {
      const std::vector<double> e = positional_embed(
          {tmpl.at(i * 3), tmpl.at(i * 3 + 1), tmpl.at(i * 3 + 2)}, cfg.pe);
      for (i64 k = 0; k < i64(e.size()); ++k) pe.at(i * pe.shape[1] + k) = e[std::size_t(k)];
    }
    Var h = tape.constant(std::move(pe));
    i64 in_dim = cfg.pe.dim(3);
    if (cfg.latent_dim > 0) {
      NF_CHECK(z.valid(), "latent-conditioned cloud needs a latent code");
      NF_CHECK((tape.shape(z) == Shape{1, cfg.latent_dim}) ||
                   (tape.shape(z) == Shape{cfg.latent_dim}),
               "latent code shape " << tape.shape(z).str());
      const Var rows = tape.repeat(tape.reshape(z, Shape{1, cfg.latent_dim}), 0, p);
      h = tape.concat({h, rows}, 1);
      in_dim += cfg.latent_dim;
    }

    const auto trunk = [&](const std::string& head) {
      Var x = h;
      i64 d = in_dim;
      for (int l = 0; l < cfg.trunk_layers; ++l) {
        x = tape.relu(dense(tape, tp, store, init_rng,
                            prefix + "/" + head + "/trunk" + std::to_string(l), x, d,
                            cfg.trunk_width));
        d = cfg.trunk_width;
      }
      return x;
    };

    const std::string off_head = prefix + "/offset/head";
    if (!store.contains(off_head + "/w")) {
      store.create(off_head + "/w", Tensor::zeros(Shape{cfg.trunk_width, 3}));
      store.create(off_head + "/b", Tensor::zeros(Shape{3}));
    }
    IpcPrediction outp;
    const Var offsets =
        dense(tape, tp, store, init_rng, off_head, trunk("offset"), cfg.trunk_width, 3);
    outp.positions = tape.add(tape.constant(tmpl.clone()), offsets);
    outp.colors = tape.sigmoid(dense(tape, tp, store, init_rng, prefix + "/color/head",
                                     trunk("color"), cfg.trunk_width, 3));
    return outp;
  }
};

// ASCII point-cloud export, one "x y z r g b" line per vertex.
inline void export_ply(const std::filesystem::path& path, const Tensor& positions,
                       const Tensor& colors) {
  NF_CHECK(positions.shape.rank == 2 && positions.shape[1] == 3,
           "export_ply: positions must be [P,3]");
  NF_CHECK(positions.shape == colors.shape, "export_ply: colors must match positions");
  const i64 p = positions.shape[0];
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  NF_CHECK(out.good(), "cannot open '" << path.string() << "' for writing");
  out << "ply\nformat ascii 1.0\nelement vertex " << p
      << "\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\n"
         "property uchar green\nproperty uchar blue\nend_header\n";
  char line[160];
  for (i64 i = 0; i < p; ++i) {
    std::snprintf(line, sizeof line, "%.9g %.9g %.9g %d %d %d\n", positions.at(i * 3),
                  positions.at(i * 3 + 1), positions.at(i * 3 + 2),
                  int(std::lround(255.0 * std::clamp(colors.at(i * 3), 0.0, 1.0))),
                  int(std::lround(255.0 * std::clamp(colors.at(i * 3 + 1), 0.0, 1.0))),
                  int(std::lround(255.0 * std::clamp(colors.at(i * 3 + 2), 0.0, 1.0))));
    out << line;
  }
  NF_CHECK(out.good(), "write failed for '" << path.string() << "'");
}

}  // namespace nf
