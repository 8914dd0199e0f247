#pragma once

// Scene sequences: procedural synthetic generation with exact masks and
// depths, world normalization, train/test splits, batch sampling, and a
// versioned plain-text manifest that round-trips byte-exactly.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "nerform/check.hpp"
#include "nerform/geometry.hpp"
#include "nerform/image_io.hpp"
#include "nerform/rng.hpp"
#include "nerform/tensor.hpp"

namespace nf {

struct SceneFrame {
  Tensor image;  // [H,W,3] linear values on the 8-bit gamma grid
  Tensor mask;   // [H,W] foreground in [0,1]; synthetic masks are hard 0/1
  Tensor depth;  // [H,W] ray-distance to the first hit, 0 where empty
  CameraPose cam;
};

struct SceneSequence {
  std::string id;
  std::string category;
  std::vector<SceneFrame> frames;
  Tensor cloud;  // [P,3] surface point cloud; empty tensor = absent

  bool has_cloud() const { return cloud.numel() > 0; }
};

// ---------------------------------------------------------------------------
// procedural scene geometry
// ---------------------------------------------------------------------------

// Closed-form scene content (shape, normals, albedo, shading) derived
// deterministically from (kind, seed).  The generator raytraces it exactly;
// tests reuse it as the oracle opaque field.
struct SceneGeometry {
  std::string kind;  // textured-sphere | textured-box | two-blob
  double radius = 0.8;
  Eigen::Vector3d half = Eigen::Vector3d(0.7, 0.5, 0.6);
  Eigen::Vector3d c1 = Eigen::Vector3d(-0.45, 0, 0), c2 = Eigen::Vector3d(0.45, 0, 0);
  double r1 = 0.5, r2 = 0.45;
  Eigen::Vector3d color_a = Eigen::Vector3d(0.9, 0.3, 0.2);
  Eigen::Vector3d color_b = Eigen::Vector3d(0.2, 0.4, 0.9);
  double checker_freq = 6.0;
  Eigen::Vector3d light = Eigen::Vector3d(0.5, 0.7, -0.5).normalized();

  double sdf(const Eigen::Vector3d& x) const {
    if (kind == "textured-sphere") return x.norm() - radius;
    if (kind == "textured-box") {
      const Eigen::Vector3d q = x.cwiseAbs() - half;
      const Eigen::Vector3d qp = q.cwiseMax(0.0);
      return qp.norm() + std::min(0.0, q.maxCoeff());
    }
    return std::min((x - c1).norm() - r1, (x - c2).norm() - r2);
  }

  Eigen::Vector3d normal(const Eigen::Vector3d& x) const {
    if (kind == "textured-sphere") return x.normalized();
    if (kind == "textured-box") {
      // face of the largest normalized coordinate
      const Eigen::Vector3d q = x.cwiseQuotient(half);
      int axis = 0;
      q.cwiseAbs().maxCoeff(&axis);
      Eigen::Vector3d n = Eigen::Vector3d::Zero();
      n[axis] = q[axis] > 0 ? 1.0 : -1.0;
      return n;
    }
    const bool first = (x - c1).norm() - r1 < (x - c2).norm() - r2;
    return first ? (x - c1).normalized() : (x - c2).normalized();
  }

  // Smallest hit parameter in (0, inf) for a unit-direction ray, exact.
  bool raycast(const Eigen::Vector3d& origin, const Eigen::Vector3d& dir, double* t_out) const {
    const auto sphere_hit = [&](const Eigen::Vector3d& c, double r, double* t) {
      const Eigen::Vector3d oc = origin - c;
      const double b = oc.dot(dir);
      const double disc = b * b - (oc.squaredNorm() - r * r);
      if (disc < 0.0) return false;
      const double root = -b - std::sqrt(disc);
      if (root <= 0.0) return false;
      *t = root;
      return true;
    };
    if (kind == "textured-sphere") return sphere_hit(Eigen::Vector3d::Zero(), radius, t_out);
    if (kind == "textured-box") {
      double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
      for (int a = 0; a < 3; ++a) {
        if (std::abs(dir[a]) < 1e-12) {
          if (std::abs(origin[a]) > half[a]) return false;
          continue;
        }
        double lo = (-half[a] - origin[a]) / dir[a];
        double hi = (half[a] - origin[a]) / dir[a];
        if (lo > hi) std::swap(lo, hi);
        t0 = std::max(t0, lo);
        t1 = std::min(t1, hi);
      }
      if (t0 > t1 || t0 <= 0.0) return false;
      *t_out = t0;
      return true;
    }
    double ta = 0.0, tb = 0.0;
    const bool ha = sphere_hit(c1, r1, &ta);
    const bool hb = sphere_hit(c2, r2, &tb);
    if (!ha && !hb) return false;
    *t_out = ha && hb ? std::min(ta, tb) : (ha ? ta : tb);
    return true;
  }

  Eigen::Vector3d albedo(const Eigen::Vector3d& x) const {
    Eigen::Vector3d local = x;
    double scale = radius;
    if (kind == "textured-box") {
      // parameterize by the two in-face coordinates
      const Eigen::Vector3d q = x.cwiseQuotient(half);
      int axis = 0;
      q.cwiseAbs().maxCoeff(&axis);
      const int u_axis = (axis + 1) % 3, v_axis = (axis + 2) % 3;
      const double u = q[u_axis], v = q[v_axis];
      const int cells = int(std::floor((u + 2.0) * checker_freq)) +
                        int(std::floor((v + 2.0) * checker_freq));
      return cells % 2 == 0 ? color_a : color_b;
    }
    if (kind == "two-blob") {
      const bool first = (x - c1).norm() - r1 < (x - c2).norm() - r2;
      local = first ? x - c1 : x - c2;
      scale = first ? r1 : r2;
    }
    const double u = (std::atan2(local.z(), local.x()) / M_PI + 1.0) * 0.5;
    const double v = std::acos(std::clamp(local.y() / std::max(local.norm(), 1e-12), -1.0, 1.0)) /
                     M_PI;
    const int cells = int(std::floor(u * 2.0 * checker_freq)) + int(std::floor(v * checker_freq));
    (void)scale;
    return cells % 2 == 0 ? color_a : color_b;
  }

  Eigen::Vector3d shade(const Eigen::Vector3d& x) const {
    const double lambert = 0.25 + 0.75 * std::max(0.0, normal(x).dot(light));
    Eigen::Vector3d c = albedo(x) * lambert;
    return c.cwiseMin(1.0).cwiseMax(0.0);
  }

  // Deterministic surface samples (spiral over each primitive).
  Tensor sample_surface(i64 n) const {
    const auto spiral = [](i64 k, i64 count) {
      const double golden = M_PI * (3.0 - std::sqrt(5.0));
      const double z = 1.0 - 2.0 * (double(k) + 0.5) / double(count);
      const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
      const double phi = golden * double(k);
      return Eigen::Vector3d(r * std::cos(phi), r * std::sin(phi), z);
    };
    std::vector<Eigen::Vector3d> pts;
    pts.reserve(std::size_t(n));
    if (kind == "textured-sphere") {
      for (i64 k = 0; k < n; ++k) pts.push_back(radius * spiral(k, n));
    } else if (kind == "textured-box") {
      // distribute over faces proportionally via a spiral direction cast
      for (i64 k = 0; k < n; ++k) {
        const Eigen::Vector3d d = spiral(k, n);
        // project direction onto the box surface from the center
        double tmin = std::numeric_limits<double>::infinity();
        for (int a = 0; a < 3; ++a)
          if (std::abs(d[a]) > 1e-12) tmin = std::min(tmin, half[a] / std::abs(d[a]));
        pts.push_back(d * tmin);
      }
    } else {
      const i64 n1 = n / 2;
      for (i64 k = 0; k < n; ++k) {
        const bool first = k < n1;
        const Eigen::Vector3d p = first ? Eigen::Vector3d(c1 + r1 * spiral(k, n1))
                                        : Eigen::Vector3d(c2 + r2 * spiral(k - n1, n - n1));
        if (sdf(p) > -1e-9) pts.push_back(p);  // drop samples swallowed by the other blob
      }
    }
    Tensor out = Tensor::zeros(Shape{i64(pts.size()), 3});
    for (i64 i = 0; i < i64(pts.size()); ++i)
      for (i64 k = 0; k < 3; ++k) out.at(i * 3 + k) = pts[std::size_t(i)][k];
    return out;
  }
};

inline SceneGeometry make_scene_geometry(const std::string& kind, std::uint64_t seed) {
  NF_CHECK(kind == "textured-sphere" || kind == "textured-box" || kind == "two-blob",
           "unknown scene kind '" << kind << "'");
  SceneGeometry g;
  g.kind = kind;
  Rng rng(seed);
  Rng geo = rng.fork("geometry");
  g.radius = 0.65 + 0.25 * geo.uniform();
  g.half = Eigen::Vector3d(0.5 + 0.3 * geo.uniform(), 0.4 + 0.3 * geo.uniform(),
                           0.45 + 0.3 * geo.uniform());
  g.r1 = 0.4 + 0.15 * geo.uniform();
  g.r2 = 0.35 + 0.15 * geo.uniform();
  const double sep = 0.35 + 0.15 * geo.uniform();
  g.c1 = Eigen::Vector3d(-sep, 0.05 * geo.normal(), 0.05 * geo.normal());
  g.c2 = Eigen::Vector3d(sep, 0.05 * geo.normal(), 0.05 * geo.normal());

  Rng app = rng.fork("appearance");
  const auto bright = [&](Rng& r) {
    Eigen::Vector3d c(0.15 + 0.8 * r.uniform(), 0.15 + 0.8 * r.uniform(),
                      0.15 + 0.8 * r.uniform());
    c[std::size_t(r.uniform_int(3))] = 0.85;  // keep one strong channel
    return c;
  };
  g.color_a = bright(app);
  g.color_b = bright(app);
  g.checker_freq = double(3 + app.uniform_int(5));
  Eigen::Vector3d l(app.normal(), app.normal(), app.normal());
  if (l.norm() < 1e-6) l = Eigen::Vector3d(0.5, 0.7, -0.5);
  g.light = l.normalized();
  return g;
}

// ---------------------------------------------------------------------------
// synthetic sequence generation
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::string kind = "textured-sphere";
  int n_frames = 100;
  int raster = 64;
  double orbit_radius = 2.7;
  double orbit_elevation = 0.6;  // radians above the orbit plane
  std::uint64_t seed = 0;
  std::string id;  // defaults to "<kind>-<seed>"
  i64 cloud_points = 2048;

  void validate() const {
    NF_CHECK(n_frames >= 1, "n_frames must be >= 1");
    NF_CHECK(raster >= 16, "raster must be >= 16, got " << raster);
    NF_CHECK(orbit_radius > 1.0, "orbit radius must clear the scene, got " << orbit_radius);
    NF_CHECK(cloud_points >= 1, "cloud_points must be >= 1");
  }
};

inline SceneSequence generate_synthetic_scene(const SynthConfig& cfg) {
  cfg.validate();
  const SceneGeometry geo = make_scene_geometry(cfg.kind, cfg.seed);

  SceneSequence seq;
  seq.id = cfg.id.empty() ? cfg.kind + "-" + std::to_string(cfg.seed) : cfg.id;
  seq.category = cfg.kind;
  seq.cloud = geo.sample_surface(cfg.cloud_points);

  const double focal = 1.1 * double(cfg.raster);
  const double near = std::max(0.2, cfg.orbit_radius - 1.5);
  const double far = cfg.orbit_radius + 1.5;
  seq.frames.reserve(std::size_t(cfg.n_frames));
  for (int k = 0; k < cfg.n_frames; ++k) {
    const double phi = 2.0 * M_PI * double(k) / double(cfg.n_frames);
    const Eigen::Vector3d eye(cfg.orbit_radius * std::cos(cfg.orbit_elevation) * std::cos(phi),
                              cfg.orbit_radius * std::sin(cfg.orbit_elevation),
                              cfg.orbit_radius * std::cos(cfg.orbit_elevation) * std::sin(phi));
    SceneFrame fr;
    fr.cam = make_lookat_camera(eye, {0, 0, 0}, {0, 1, 0}, focal, cfg.raster, cfg.raster, near,
                                far);
    fr.image = Tensor::zeros(Shape{cfg.raster, cfg.raster, 3});
    fr.mask = Tensor::zeros(Shape{cfg.raster, cfg.raster});
    fr.depth = Tensor::zeros(Shape{cfg.raster, cfg.raster});
    for (int r = 0; r < cfg.raster; ++r)
      for (int c = 0; c < cfg.raster; ++c) {
        const Ray ray = emit_ray(fr.cam, c, r);
        double t = 0.0;
        if (!geo.raycast(ray.origin, ray.dir, &t)) continue;
        const Eigen::Vector3d x = ray.origin + t * ray.dir;
        const Eigen::Vector3d col = geo.shade(x);
        const i64 base = (i64(r) * cfg.raster + c) * 3;
        for (i64 ch = 0; ch < 3; ++ch) fr.image.at(base + ch) = quantize_8bit(col[ch]);
        fr.mask.at(i64(r) * cfg.raster + c) = 1.0;
        fr.depth.at(i64(r) * cfg.raster + c) = double(float(t));
      }
    seq.frames.push_back(std::move(fr));
  }
  return seq;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

struct NormalizeResult {
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  double scale = 1.0;
};

// Shifts the ground-truth cloud to zero centroid and rescales so the mean of
// the three per-axis standard deviations is 1; cameras and depth rasters are
// remapped so every render is unchanged (raster positions identical, depths
// divided by the scale).
inline NormalizeResult normalize_scene(SceneSequence& seq) {
  NF_CHECK(seq.has_cloud(), "normalize_scene: sequence '" << seq.id << "' has no point cloud");
  const i64 p = seq.cloud.shape[0];
  NF_CHECK(p >= 2, "normalize_scene: cloud of " << p << " points is degenerate");

  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (i64 i = 0; i < p; ++i)
    for (i64 k = 0; k < 3; ++k) centroid[k] += seq.cloud.at(i * 3 + k);
  centroid /= double(p);

  Eigen::Vector3d var = Eigen::Vector3d::Zero();
  for (i64 i = 0; i < p; ++i)
    for (i64 k = 0; k < 3; ++k) {
      const double d = seq.cloud.at(i * 3 + k) - centroid[k];
      var[k] += d * d;
    }
  var /= double(p);
  const double scale =
      (std::sqrt(var[0]) + std::sqrt(var[1]) + std::sqrt(var[2])) / 3.0;
  NF_CHECK(std::isfinite(scale) && scale > 1e-12,
           "normalize_scene: degenerate cloud (scale " << scale << ")");

  for (i64 i = 0; i < p; ++i)
    for (i64 k = 0; k < 3; ++k)
      seq.cloud.at(i * 3 + k) = (seq.cloud.at(i * 3 + k) - centroid[k]) / scale;

  // world map x' = (x - centroid)/scale; P' = diag(1/s,1/s,1/s,1) * P * [sI c; 0 1]
  Eigen::Matrix4d S = Eigen::Matrix4d::Identity();
  S(0, 0) = S(1, 1) = S(2, 2) = scale;
  S.block<3, 1>(0, 3) = centroid;
  Eigen::Matrix4d D = Eigen::Matrix4d::Identity();
  D(0, 0) = D(1, 1) = D(2, 2) = 1.0 / scale;
  for (SceneFrame& fr : seq.frames) {
    fr.cam.P = D * fr.cam.P * S;
    fr.cam.near /= scale;
    fr.cam.far /= scale;
    fr.cam.validate();
    for (i64 i = 0; i < fr.depth.numel(); ++i)
      if (fr.depth.at(i) != 0.0) fr.depth.at(i) = double(float(fr.depth.at(i) / scale));
  }
  return NormalizeResult{centroid, scale};
}

// ---------------------------------------------------------------------------
// splits and batch sampling
// ---------------------------------------------------------------------------

struct SeqMeta {
  std::string id;
  std::string category;
  i64 n_frames = 0;
};

struct Splits {
  std::vector<std::string> train_seqs, test_seqs;
  std::map<std::string, std::vector<i64>> known, unseen;  // frame ids per sequence
  std::map<std::string, std::string> category;
};

// Sequences split 9:1 per category, frames 80/20 per sequence; the smaller
// part takes the floor.  Shuffles are seeded and input-order independent.
inline Splits make_splits(std::vector<SeqMeta> seqs, std::uint64_t seed) {
  NF_CHECK(!seqs.empty(), "make_splits: no sequences");
  std::sort(seqs.begin(), seqs.end(), [](const SeqMeta& a, const SeqMeta& b) {
    return a.id < b.id;
  });
  for (std::size_t i = 1; i < seqs.size(); ++i)
    NF_CHECK(seqs[i].id != seqs[i - 1].id, "duplicate sequence id '" << seqs[i].id << "'");
  const Rng base(seed);

  Splits sp;
  std::map<std::string, std::vector<std::string>> by_cat;
  for (const SeqMeta& m : seqs) {
    by_cat[m.category].push_back(m.id);
    sp.category[m.id] = m.category;
  }
  for (auto& [cat, ids] : by_cat) {
    Rng rng = base.fork("seqs/" + cat);
    rng.shuffle(ids);
    const i64 n_test = i64(ids.size()) / 10;
    std::vector<std::string> test(ids.begin(), ids.begin() + n_test);
    std::vector<std::string> train(ids.begin() + n_test, ids.end());
    std::sort(test.begin(), test.end());
    std::sort(train.begin(), train.end());
    sp.test_seqs.insert(sp.test_seqs.end(), test.begin(), test.end());
    sp.train_seqs.insert(sp.train_seqs.end(), train.begin(), train.end());
  }
  std::sort(sp.train_seqs.begin(), sp.train_seqs.end());
  std::sort(sp.test_seqs.begin(), sp.test_seqs.end());

  for (const SeqMeta& m : seqs) {
    NF_CHECK(m.n_frames >= 1, "sequence '" << m.id << "' has no frames");
    std::vector<i64> frames(std::size_t(m.n_frames));
    for (i64 i = 0; i < m.n_frames; ++i) frames[std::size_t(i)] = i;
    Rng rng = base.fork("frames/" + m.id);
    rng.shuffle(frames);
    const i64 n_unseen = m.n_frames / 5;
    std::vector<i64> unseen(frames.begin(), frames.begin() + n_unseen);
    std::vector<i64> known(frames.begin() + n_unseen, frames.end());
    std::sort(unseen.begin(), unseen.end());
    std::sort(known.begin(), known.end());
    sp.unseen[m.id] = std::move(unseen);
    sp.known[m.id] = std::move(known);
  }
  return sp;
}

enum class EvalSet { train_known, train_unseen, test_known, test_unseen };

inline const char* eval_set_name(EvalSet s) {
  switch (s) {
    case EvalSet::train_known: return "train-known";
    case EvalSet::train_unseen: return "train-unseen";
    case EvalSet::test_known: return "test-known";
    case EvalSet::test_unseen: return "test-unseen";
  }
  return "?";
}

inline EvalSet eval_set_from_name(const std::string& s) {
  if (s == "train-known") return EvalSet::train_known;
  if (s == "train-unseen") return EvalSet::train_unseen;
  if (s == "test-known") return EvalSet::test_known;
  if (s == "test-unseen") return EvalSet::test_unseen;
  throw error("unknown evaluation set '" + s + "'");
}

struct BatchSample {
  std::string seq;
  i64 target = 0;            // target frame id
  std::vector<i64> sources;  // source frame ids, all from the known split
  int n_src_requested = 0;
  bool capped = false;  // fewer known frames than requested sources
};

// Draws a target frame from the requested set and source views from the same
// sequence's known frames (never the target, no repeats).  The source count
// is uniform over {1,3,5,7,9}, capped by availability.
// When fixed_n_src > 0 the source count is pinned instead of drawn from
// {1, 3, 5, 7, 9}.
inline BatchSample sample_batch(const Splits& sp, EvalSet set, Rng& rng, i64 fixed_n_src = 0) {
  const bool test = set == EvalSet::test_known || set == EvalSet::test_unseen;
  const bool unseen = set == EvalSet::train_unseen || set == EvalSet::test_unseen;
  const std::vector<std::string>& pool = test ? sp.test_seqs : sp.train_seqs;
  NF_CHECK(!pool.empty(), "sample_batch: no sequences in the " << (test ? "test" : "train")
                                                               << " split");

  BatchSample out;
  out.seq = pool[std::size_t(rng.uniform_int(i64(pool.size())))];
  const auto& frames = (unseen ? sp.unseen : sp.known).at(out.seq);
  NF_CHECK(!frames.empty(),
           "sample_batch: sequence '" << out.seq << "' has no " << eval_set_name(set)
                                      << " frames");
  out.target = frames[std::size_t(rng.uniform_int(i64(frames.size())))];

  static constexpr int kSourceCounts[5] = {1, 3, 5, 7, 9};
  out.n_src_requested = fixed_n_src > 0 ? fixed_n_src : kSourceCounts[rng.uniform_int(5)];

  std::vector<i64> candidates;
  for (i64 f : sp.known.at(out.seq))
    if (f != out.target) candidates.push_back(f);
  const i64 take = std::min<i64>(out.n_src_requested, i64(candidates.size()));
  out.capped = take < out.n_src_requested;
  NF_CHECK(take >= 1, "sample_batch: sequence '" << out.seq << "' has no usable source frames");
  for (i64 i : rng.sample_without_replacement(i64(candidates.size()), take))
    out.sources.push_back(candidates[std::size_t(i)]);
  return out;
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::map<std::string, std::string> read_kv(const std::filesystem::path& p,
                                                  std::vector<std::string>* order = nullptr) {
  std::ifstream in(p);
  NF_CHECK(in.good(), "cannot open '" << p.string() << "'");
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    NF_CHECK(eq != std::string::npos, "malformed line '" << line << "' in " << p.string());
    const std::string key = line.substr(0, eq);
    NF_CHECK(!kv.count(key), "duplicate key '" << key << "' in " << p.string());
    kv[key] = line.substr(eq + 1);
    if (order) order->push_back(key);
  }
  return kv;
}

inline const std::string& kv_get(const std::map<std::string, std::string>& kv,
                                 const std::string& key, const std::filesystem::path& p) {
  const auto it = kv.find(key);
  NF_CHECK(it != kv.end(), "missing key '" << key << "' in " << p.string());
  return it->second;
}

inline std::string frame_base(i64 k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04lld", static_cast<long long>(k));
  return buf;
}

}  // namespace detail

constexpr int kManifestVersion = 1;

inline void write_camera(const std::filesystem::path& path, const CameraPose& cam) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  NF_CHECK(out.good(), "cannot open '" << path.string() << "' for writing");
  out << "width=" << cam.width << "\nheight=" << cam.height
      << "\nnear=" << detail::fmt_double(cam.near) << "\nfar=" << detail::fmt_double(cam.far)
      << "\n";
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      out << "P" << r << c << "=" << detail::fmt_double(cam.P(r, c)) << "\n";
  NF_CHECK(out.good(), "write failed for '" << path.string() << "'");
}

inline CameraPose read_camera(const std::filesystem::path& path) {
  const auto kv = detail::read_kv(path);
  CameraPose cam;
  cam.width = std::stoi(detail::kv_get(kv, "width", path));
  cam.height = std::stoi(detail::kv_get(kv, "height", path));
  cam.near = std::strtod(detail::kv_get(kv, "near", path).c_str(), nullptr);
  cam.far = std::strtod(detail::kv_get(kv, "far", path).c_str(), nullptr);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      const std::string key = "P" + std::to_string(r) + std::to_string(c);
      cam.P(r, c) = std::strtod(detail::kv_get(kv, key, path).c_str(), nullptr);
    }
  cam.validate();
  return cam;
}

// Writes root/<id>/ with index.txt, per-frame rasters and camera records,
// and the optional cloud.  Returns the sequence directory.
inline std::filesystem::path write_scene(const std::filesystem::path& root,
                                         const SceneSequence& seq) {
  NF_CHECK(!seq.id.empty(), "write_scene: sequence id is empty");
  NF_CHECK(!seq.frames.empty(), "write_scene: sequence '" << seq.id << "' has no frames");
  const std::filesystem::path dir = root / seq.id;
  std::filesystem::create_directories(dir);

  const i64 h = seq.frames[0].image.shape[0], w = seq.frames[0].image.shape[1];
  std::ofstream idx(dir / "index.txt", std::ios::binary | std::ios::trunc);
  NF_CHECK(idx.good(), "cannot open '" << (dir / "index.txt").string() << "'");
  idx << "format_version=" << kManifestVersion << "\nid=" << seq.id
      << "\ncategory=" << seq.category << "\nraster_width=" << w << "\nraster_height=" << h
      << "\nn_frames=" << seq.frames.size() << "\nhas_cloud=" << (seq.has_cloud() ? 1 : 0)
      << "\n";
  for (i64 k = 0; k < i64(seq.frames.size()); ++k)
    idx << "frame_" << k << "=" << detail::frame_base(k) << "\n";
  NF_CHECK(idx.good(), "write failed for index.txt");

  for (i64 k = 0; k < i64(seq.frames.size()); ++k) {
    const SceneFrame& fr = seq.frames[std::size_t(k)];
    NF_CHECK((fr.image.shape == Shape{h, w, 3}), "frame " << k << " image shape mismatch");
    const std::string base = detail::frame_base(k);
    write_ppm(dir / (base + ".ppm"), fr.image);
    write_pgm(dir / (base + ".pgm"), fr.mask);
    write_depth(dir / (base + ".depth"), fr.depth);
    write_camera(dir / (base + ".cam"), fr.cam);
  }
  if (seq.has_cloud()) {
    std::ofstream out(dir / "cloud.txt", std::ios::binary | std::ios::trunc);
    out << "n=" << seq.cloud.shape[0] << "\n";
    for (i64 i = 0; i < seq.cloud.shape[0]; ++i)
      out << detail::fmt_double(seq.cloud.at(i * 3)) << " "
          << detail::fmt_double(seq.cloud.at(i * 3 + 1)) << " "
          << detail::fmt_double(seq.cloud.at(i * 3 + 2)) << "\n";
    NF_CHECK(out.good(), "write failed for cloud.txt");
  }
  return dir;
}

inline SceneSequence read_scene(const std::filesystem::path& dir) {
  const std::filesystem::path index = dir / "index.txt";
  const auto kv = detail::read_kv(index);
  const int version = std::stoi(detail::kv_get(kv, "format_version", index));
  NF_CHECK(version == kManifestVersion, "manifest '" << index.string() << "' has format version "
                                                     << version << ", expected "
                                                     << kManifestVersion);
  SceneSequence seq;
  seq.id = detail::kv_get(kv, "id", index);
  seq.category = detail::kv_get(kv, "category", index);
  const i64 w = std::stoll(detail::kv_get(kv, "raster_width", index));
  const i64 h = std::stoll(detail::kv_get(kv, "raster_height", index));
  const i64 n = std::stoll(detail::kv_get(kv, "n_frames", index));
  NF_CHECK(n >= 1 && w >= 1 && h >= 1, "manifest '" << index.string() << "' is malformed");

  for (i64 k = 0; k < n; ++k) {
    const std::string base =
        detail::kv_get(kv, "frame_" + std::to_string(k), index);
    SceneFrame fr;
    fr.image = read_ppm(dir / (base + ".ppm"));
    fr.mask = read_pgm(dir / (base + ".pgm"));
    fr.depth = read_depth(dir / (base + ".depth"));
    fr.cam = read_camera(dir / (base + ".cam"));
    NF_CHECK((fr.image.shape == Shape{h, w, 3}),
             "frame " << k << " raster does not match the index");
    NF_CHECK((fr.mask.shape == Shape{h, w}) && (fr.depth.shape == Shape{h, w}),
             "frame " << k << " mask/depth raster does not match the index");
    NF_CHECK(fr.cam.width == w && fr.cam.height == h,
             "frame " << k << " camera raster does not match the index");
    seq.frames.push_back(std::move(fr));
  }

  if (std::stoi(detail::kv_get(kv, "has_cloud", index)) == 1) {
    std::ifstream in(dir / "cloud.txt");
    NF_CHECK(in.good(), "missing cloud.txt in '" << dir.string() << "'");
    std::string header;
    std::getline(in, header);
    NF_CHECK(header.rfind("n=", 0) == 0, "malformed cloud.txt header");
    const i64 p = std::stoll(header.substr(2));
    NF_CHECK(p >= 1, "malformed cloud.txt count");
    seq.cloud = Tensor::zeros(Shape{p, 3});
    for (i64 i = 0; i < p; ++i) {
      double x = 0, y = 0, z = 0;
      NF_CHECK(bool(in >> x >> y >> z), "cloud.txt truncated at point " << i);
      seq.cloud.at(i * 3) = x;
      seq.cloud.at(i * 3 + 1) = y;
      seq.cloud.at(i * 3 + 2) = z;
    }
  }
  return seq;
}

// All sequence directories under a data root, sorted by id.
inline std::vector<std::filesystem::path> list_scene_dirs(const std::filesystem::path& root) {
  NF_CHECK(std::filesystem::is_directory(root), "data root '" << root.string()
                                                              << "' is not a directory");
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory() && std::filesystem::exists(e.path() / "index.txt"))
      dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

}  // namespace nf
