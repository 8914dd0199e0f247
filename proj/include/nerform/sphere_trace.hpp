#pragma once

// Sphere tracing for signed distance fields: march x <- x + f(x) * dir until
// |f| drops under the hit threshold.  Valid SDFs never let the march
// overshoot the surface, so every iterate stays outside (f >= 0).

#include <functional>

#include "nerform/check.hpp"
#include "nerform/geometry.hpp"

namespace nf {

using SdfEval = std::function<double(const Eigen::Vector3d&)>;

struct SphereTraceResult {
  bool hit = false;
  double t = 0.0;           // depth along the ray at termination
  Eigen::Vector3d point = Eigen::Vector3d::Zero();
  int iters = 0;            // advancement steps taken
};

inline SphereTraceResult sphere_trace(const SdfEval& sdf, const Ray& ray, int max_iter = 64,
                                      double eps_hit = 1e-6) {
  NF_CHECK(max_iter >= 1, "sphere_trace: max_iter must be >= 1");
  NF_CHECK(eps_hit > 0.0, "sphere_trace: eps_hit must be positive");
  NF_CHECK(std::abs(ray.dir.norm() - 1.0) < 1e-9, "sphere_trace: ray direction must be unit");

  SphereTraceResult res;
  res.t = 0.0;
  res.point = ray.origin;
  const double d0 = sdf(ray.origin);
  NF_CHECK(std::isfinite(d0), "sphere_trace: SDF not finite at the ray origin");
  NF_CHECK(d0 >= 0.0, "sphere_trace: ray origin is inside the surface (sdf = " << d0 << ")");

  double d = d0;
  int it = 0;
  while (true) {
    if (d < eps_hit) {
      res.hit = true;
      res.iters = it;
      return res;
    }
    if (it == max_iter || res.t > ray.far) {
      res.iters = it;
      return res;
    }
    res.t += d;
    res.point = ray.origin + res.t * ray.dir;
    d = sdf(res.point);
    NF_CHECK(std::isfinite(d), "sphere_trace: SDF not finite at iteration " << it + 1);
    ++it;
  }
}

}  // namespace nf
