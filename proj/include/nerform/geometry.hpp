#pragma once

// Cameras, projection, ray generation, depth sampling, and the voxel-grid
// camera-distance / view-difficulty machinery.
//
// Conventions: a camera is a single 4x4 matrix P mapping world homogeneous
// coordinates to raster homogeneous coordinates: P [x;1] = d_u [u_x, u_y, 1, *]
// in the first three components, where u is the pixel position and d_u the
// depth along the optical axis.  Pixels use u = (column+0.5, row+0.5) with
// the origin at the top-left corner and y pointing down.  Ray-march depths t
// measure world distance along the unit ray direction (not optical-axis
// depth); ground-truth depth rasters and expected-depth outputs use t.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "nerform/check.hpp"
#include "nerform/rng.hpp"
#include "nerform/tensor.hpp"

namespace nf {

struct CameraPose {
  Eigen::Matrix4d P = Eigen::Matrix4d::Identity();
  int width = 0;
  int height = 0;
  double near = 0.1;
  double far = 10.0;

  void validate() const {
    NF_CHECK(width > 0 && height > 0, "camera raster must be positive");
    NF_CHECK(near < far, "camera near " << near << " !< far " << far);
    NF_CHECK(std::abs(P.determinant()) > 1e-18, "camera matrix not invertible");
  }

  // World-space camera center: the preimage of the raster origin direction,
  // i.e. the point with projective depth 0.
  Eigen::Vector3d center() const {
    Eigen::Matrix4d inv = P.inverse();
    Eigen::Vector4d b = inv.col(3);
    NF_CHECK(std::abs(b.w()) > 1e-15, "degenerate camera (no affine center)");
    return b.head<3>() / b.w();
  }
};

struct Projection {
  Eigen::Vector2d u;
  double depth = 0.0;  // optical-axis depth d_u
};

inline Projection project(const CameraPose& cam, const Eigen::Vector3d& x) {
  Eigen::Vector4d h = cam.P * x.homogeneous();
  NF_CHECK(std::abs(h.z()) >= 1e-12, "point on the camera plane cannot be projected");
  return Projection{Eigen::Vector2d(h.x() / h.z(), h.y() / h.z()), h.z()};
}

// Visibility test used by WCE sampling and the camera-distance grid: the
// projection must land inside the raster with positive depth.
inline bool in_raster(const CameraPose& cam, const Eigen::Vector3d& x) {
  Eigen::Vector4d h = cam.P * x.homogeneous();
  if (h.z() <= 1e-12) return false;
  const double ux = h.x() / h.z();
  const double uy = h.y() / h.z();
  return ux >= 0.0 && ux < double(cam.width) && uy >= 0.0 && uy < double(cam.height);
}

struct Ray {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d dir = Eigen::Vector3d::UnitZ();
  Eigen::Vector2d pixel = Eigen::Vector2d::Zero();
  double near = 0.0;
  double far = 1.0;

  Eigen::Vector3d at(double t) const { return origin + t * dir; }
};

// Ray through pixel u.  Works for any invertible P by solving
// P [x;1] = [d u_x, d u_y, d, beta] with the fourth output left free.
inline Ray emit_ray(const CameraPose& cam, const Eigen::Vector2d& u) {
  cam.validate();
  Eigen::Matrix4d inv = cam.P.inverse();
  Eigen::Vector4d a = inv * Eigen::Vector4d(u.x(), u.y(), 1.0, 0.0);
  Eigen::Vector4d b = inv * Eigen::Vector4d(0.0, 0.0, 0.0, 1.0);
  NF_CHECK(std::abs(b.w()) > 1e-15, "degenerate camera");
  auto point_at = [&](double d) {
    const double beta = (1.0 - d * a.w()) / b.w();
    Eigen::Vector4d h = d * a + beta * b;
    return h.head<3>().eval();
  };
  Ray r;
  r.origin = point_at(0.0);
  Eigen::Vector3d p1 = point_at(1.0);
  Eigen::Vector3d d = p1 - r.origin;
  const double len = d.norm();
  NF_CHECK(len > 1e-15, "camera ray has zero length");
  r.dir = d / len;
  r.pixel = u;
  r.near = cam.near;
  r.far = cam.far;
  return r;
}

inline Ray emit_ray(const CameraPose& cam, int col, int row) {
  return emit_ray(cam, Eigen::Vector2d(col + 0.5, row + 0.5));
}

// N_S depths over [near, far]: bin centers, or one uniform draw per bin when
// stratified.
inline std::vector<double> sample_uniform(double near, double far, int n_samples,
                                          bool stratified, Rng& rng) {
  NF_CHECK(n_samples >= 1, "need at least one depth sample");
  NF_CHECK(near < far, "near " << near << " !< far " << far);
  std::vector<double> out(static_cast<std::size_t>(n_samples));
  const double step = (far - near) / double(n_samples);
  for (int i = 0; i < n_samples; ++i) {
    const double jitter = stratified ? rng.uniform() : 0.5;
    out[std::size_t(i)] = near + (double(i) + jitter) * step;
  }
  return out;
}

// Draws n_fine depths from the piecewise-constant density proportional to
// coarse_weights over the coarse bins (edges at midpoints of consecutive
// coarse depths, extended symmetrically at both ends), then returns the fine
// and coarse depths merged in ascending order.  All-zero weights fall back
// to a uniform density.
inline std::vector<double> sample_importance(const std::vector<double>& coarse_depths,
                                             const std::vector<double>& coarse_weights,
                                             int n_fine, Rng& rng) {
  const std::size_t n = coarse_depths.size();
  NF_CHECK(n >= 2, "importance sampling needs at least two coarse depths");
  NF_CHECK(coarse_weights.size() == n, "depth/weight length mismatch");
  NF_CHECK(n_fine >= 1, "need at least one fine sample");
  for (std::size_t i = 1; i < n; ++i)
    NF_CHECK(coarse_depths[i] >= coarse_depths[i - 1], "coarse depths must ascend");

  // bin edges: midpoints of consecutive coarse depths, closed by the first
  // and last depth themselves, so every draw stays inside the coarse range
  std::vector<double> edges(n + 1);
  for (std::size_t i = 1; i < n; ++i) edges[i] = 0.5 * (coarse_depths[i - 1] + coarse_depths[i]);
  edges[0] = coarse_depths[0];
  edges[n] = coarse_depths[n - 1];

  double total = 0.0;
  for (double w : coarse_weights) {
    NF_CHECK(w >= 0.0, "negative importance weight");
    total += w;
  }
  std::vector<double> cdf(n + 1, 0.0);
  if (total <= 0.0) {
    for (std::size_t i = 0; i <= n; ++i)
      cdf[i] = (edges[i] - edges[0]) / (edges[n] - edges[0]);
  } else {
    for (std::size_t i = 0; i < n; ++i) cdf[i + 1] = cdf[i] + coarse_weights[i] / total;
    cdf[n] = 1.0;
  }

  std::vector<double> out;
  out.reserve(n + std::size_t(n_fine));
  for (int k = 0; k < n_fine; ++k) {
    // stratified inverse-CDF draw
    const double u = (double(k) + rng.uniform()) / double(n_fine);
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    std::size_t hi = std::min(std::size_t(it - cdf.begin()), n);
    std::size_t lo = hi - 1;
    const double c0 = cdf[lo], c1 = cdf[hi];
    const double frac = c1 > c0 ? (u - c0) / (c1 - c0) : 0.5;
    out.push_back(edges[lo] + frac * (edges[hi] - edges[lo]));
  }
  out.insert(out.end(), coarse_depths.begin(), coarse_depths.end());
  std::sort(out.begin(), out.end());
  return out;
}

struct RayBundle {
  std::vector<Ray> rays;
  int n_samples = 0;
  std::vector<double> depths;           // [n_rays * n_samples], ascending per ray
  std::vector<Eigen::Vector3d> points;  // same layout

  i64 n_rays() const { return i64(rays.size()); }

  void fill_points() {
    points.resize(depths.size());
    for (i64 r = 0; r < n_rays(); ++r)
      for (int s = 0; s < n_samples; ++s) {
        const i64 i = r * n_samples + s;
        points[std::size_t(i)] = rays[std::size_t(r)].at(depths[std::size_t(i)]);
      }
  }
};

// ---------------------------------------------------------------------------
// camera distance and view difficulty
// ---------------------------------------------------------------------------

struct CameraDistanceResult {
  double d = 1.0;
  bool degenerate = false;  // no grid cell visible in both rasters
};

// One minus the generalized IoU of per-cell ray similarities over an
// axis-aligned voxel grid centered at the origin spanning
// [-grid_extent, grid_extent]^3:
//   s(r_i, r_j) = [both cells project in-raster] * (1 + r_i . r_j)
//   d = 1 - sum s_ij / sum (s_ii + s_jj - s_ij)
// where rays point from the cell center to each camera center.
inline CameraDistanceResult camera_distance_full(const CameraPose& a, const CameraPose& b,
                                                 int grid_resolution = 32,
                                                 double grid_extent = 1.0) {
  NF_CHECK(grid_resolution >= 1, "grid resolution must be positive");
  NF_CHECK(grid_extent > 0.0, "grid extent must be positive");
  a.validate();
  b.validate();
  const Eigen::Vector3d ca = a.center();
  const Eigen::Vector3d cb = b.center();
  const double cell = 2.0 * grid_extent / double(grid_resolution);
  double num = 0.0, den = 0.0;
  for (int iz = 0; iz < grid_resolution; ++iz)
    for (int iy = 0; iy < grid_resolution; ++iy)
      for (int ix = 0; ix < grid_resolution; ++ix) {
        const Eigen::Vector3d x(-grid_extent + (ix + 0.5) * cell,
                                -grid_extent + (iy + 0.5) * cell,
                                -grid_extent + (iz + 0.5) * cell);
        const bool va = in_raster(a, x);
        const bool vb = in_raster(b, x);
        if (!va && !vb) continue;
        double s_ij = 0.0;
        if (va && vb) {
          const Eigen::Vector3d ra = (ca - x).normalized();
          const Eigen::Vector3d rb = (cb - x).normalized();
          s_ij = 1.0 + ra.dot(rb);
        }
        const double s_ii = va ? 2.0 : 0.0;
        const double s_jj = vb ? 2.0 : 0.0;
        num += s_ij;
        den += s_ii + s_jj - s_ij;
      }
  if (den <= 0.0 || num <= 0.0) return CameraDistanceResult{1.0, true};
  double d = 1.0 - num / den;
  d = std::clamp(d, 0.0, 1.0);
  return CameraDistanceResult{d, false};
}

inline double camera_distance(const CameraPose& a, const CameraPose& b,
                              int grid_resolution = 32, double grid_extent = 1.0) {
  return camera_distance_full(a, b, grid_resolution, grid_extent).d;
}

enum class DifficultyBin { easy, medium, hard };

inline const char* difficulty_bin_name(DifficultyBin b) {
  switch (b) {
    case DifficultyBin::easy: return "easy";
    case DifficultyBin::medium: return "medium";
    case DifficultyBin::hard: return "hard";
  }
  return "?";
}

inline DifficultyBin difficulty_bin(double d) {
  if (d < 1.0 / 6.0) return DifficultyBin::easy;
  if (d < 1.0 / 3.0) return DifficultyBin::medium;
  return DifficultyBin::hard;
}

struct ViewDifficulty {
  double d = 0.0;
  DifficultyBin bin = DifficultyBin::easy;
};

// Mean of the two smallest distances; a single source contributes alone.
inline ViewDifficulty difficulty_from_distances(std::vector<double> dist) {
  NF_CHECK(!dist.empty(), "view difficulty needs at least one source");
  std::partial_sort(dist.begin(), dist.begin() + std::min<std::size_t>(2, dist.size()),
                    dist.end());
  const double d = dist.size() == 1 ? dist[0] : 0.5 * (dist[0] + dist[1]);
  return ViewDifficulty{d, difficulty_bin(d)};
}

// Difficulty of rendering from `target` given `sources`.
inline ViewDifficulty view_difficulty(const CameraPose& target,
                                      const std::vector<CameraPose>& sources,
                                      int grid_resolution = 32, double grid_extent = 1.0) {
  std::vector<double> dist;
  dist.reserve(sources.size());
  for (const CameraPose& s : sources)
    dist.push_back(camera_distance(target, s, grid_resolution, grid_extent));
  return difficulty_from_distances(std::move(dist));
}

// ---------------------------------------------------------------------------
// camera construction helpers
// ---------------------------------------------------------------------------

// Pinhole camera at `eye` looking at `target`: P = K [R|t] with the principal
// point at the raster center and focal length in pixels.
inline CameraPose make_lookat_camera(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                                     const Eigen::Vector3d& up, double focal_px, int width,
                                     int height, double near, double far) {
  Eigen::Vector3d fwd = (target - eye).normalized();
  Eigen::Vector3d right = fwd.cross(up).normalized();
  Eigen::Vector3d down = fwd.cross(right);  // y axis points down in raster space
  Eigen::Matrix3d R;
  R.row(0) = right.transpose();
  R.row(1) = down.transpose();
  R.row(2) = fwd.transpose();
  Eigen::Vector3d t = -R * eye;
  Eigen::Matrix3d K = Eigen::Matrix3d::Identity();
  K(0, 0) = focal_px;
  K(1, 1) = focal_px;
  K(0, 2) = 0.5 * width;
  K(1, 2) = 0.5 * height;
  CameraPose cam;
  cam.P.setIdentity();
  cam.P.block<3, 3>(0, 0) = K * R;
  cam.P.block<3, 1>(0, 3) = K * t;
  cam.P.row(3) << 0, 0, 0, 1;
  cam.width = width;
  cam.height = height;
  cam.near = near;
  cam.far = far;
  cam.validate();
  return cam;
}

// Approximate focal length (pixels) recovered from P: the norm of the
// first-row linear part after removing its principal-point component along
// the optical axis.
inline double focal_px_of(const CameraPose& cam) {
  Eigen::Vector3d r0 = cam.P.block<1, 3>(0, 0).transpose();
  Eigen::Vector3d r2 = cam.P.block<1, 3>(2, 0).transpose();
  const double n2 = r2.squaredNorm();
  NF_CHECK(n2 > 1e-30, "degenerate optical axis");
  Eigen::Vector3d f = r0 - (r0.dot(r2) / n2) * r2;
  return f.norm() / std::sqrt(n2);
}

}  // namespace nf
