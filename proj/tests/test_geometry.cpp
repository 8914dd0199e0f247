#include <catch2/catch_amalgamated.hpp>

#include "nerform/geometry.hpp"
#include "testutil.hpp"

using namespace nf;
using Eigen::Vector2d;
using Eigen::Vector3d;

namespace {

CameraPose axis_camera(double f, int w, int h) {
  CameraPose cam;
  cam.P.setZero();
  cam.P(0, 0) = f;
  cam.P(0, 2) = 0.5 * w;
  cam.P(1, 1) = f;
  cam.P(1, 2) = 0.5 * h;
  cam.P(2, 2) = 1.0;
  cam.P(3, 3) = 1.0;
  cam.width = w;
  cam.height = h;
  cam.near = 0.5;
  cam.far = 5.0;
  return cam;
}

CameraPose random_orbit_camera(Rng& rng, double radius, double focal, int raster = 64) {
  const double az = rng.uniform(0.0, 2.0 * M_PI);
  const double el = rng.uniform(-0.9, 0.9);
  const Vector3d eye(radius * std::cos(el) * std::cos(az), radius * std::sin(el),
                     radius * std::cos(el) * std::sin(az));
  return make_lookat_camera(eye, Vector3d::Zero(), Vector3d::UnitY(), focal, raster, raster,
                            radius - 2.0, radius + 2.0);
}

}  // namespace

TEST_CASE("optical-axis point projects to the principal point") {
  CameraPose cam = axis_camera(50.0, 64, 48);
  Projection p = project(cam, Vector3d(0, 0, 2));
  CHECK(p.u.x() == Catch::Approx(32.0).margin(1e-12));
  CHECK(p.u.y() == Catch::Approx(24.0).margin(1e-12));
  CHECK(p.depth == Catch::Approx(2.0).margin(1e-12));
}

TEST_CASE("project agrees with a direct homogeneous-multiply oracle") {
  Rng rng(101);
  for (int trial = 0; trial < 50; ++trial) {
    CameraPose cam = random_orbit_camera(rng, 4.0, 80.0);
    const Vector3d x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    Eigen::Vector4d h = cam.P * x.homogeneous();
    if (std::abs(h.z()) < 1e-6) continue;
    Projection p = project(cam, x);
    CHECK(std::abs(p.u.x() - h.x() / h.z()) < 1e-10);
    CHECK(std::abs(p.u.y() - h.y() / h.z()) < 1e-10);
    CHECK(std::abs(p.depth - h.z()) < 1e-10);
    // post: P[x;1] = d_u [u;1] in the first three components
    Eigen::Vector3d recon = p.depth * Eigen::Vector3d(p.u.x(), p.u.y(), 1.0);
    CHECK((h.head<3>() - recon).norm() < 1e-10);
  }
}

TEST_CASE("point on the camera plane is rejected") {
  CameraPose cam = axis_camera(50.0, 64, 64);
  CHECK_THROWS_AS(project(cam, Vector3d(0.3, 0.2, 0.0)), nf::error);
}

TEST_CASE("emit_ray round-trips through project") {
  Rng rng(77);
  CameraPose cam = random_orbit_camera(rng, 4.0, 80.0);
  const Vector2d pixels[] = {{32.0, 32.0}, {0.5, 0.5}, {63.5, 0.5}, {0.5, 63.5}, {63.5, 63.5}};
  for (const Vector2d& u : pixels) {
    Ray ray = emit_ray(cam, u);
    CHECK(std::abs(ray.dir.norm() - 1.0) < 1e-12);
    for (double t : {0.7, 2.0, 3.9}) {
      Projection p = project(cam, ray.at(t));
      CHECK((p.u - u).norm() < 1e-6);
      CHECK(p.depth > 0.0);
    }
  }
  CHECK((emit_ray(cam, Vector2d(32.0, 32.0)).origin - cam.center()).norm() < 1e-9);
}

TEST_CASE("camera center matches the eye used for construction") {
  CameraPose cam = make_lookat_camera(Vector3d(1.5, -2.0, 3.0), Vector3d::Zero(),
                                      Vector3d::UnitY(), 60.0, 64, 64, 0.5, 8.0);
  CHECK((cam.center() - Vector3d(1.5, -2.0, 3.0)).norm() < 1e-10);
}

TEST_CASE("sample_uniform bin centers and stratified draws") {
  Rng rng(1);
  auto centers = sample_uniform(0.0, 1.0, 2, false, rng);
  REQUIRE(centers.size() == 2);
  CHECK(centers[0] == Catch::Approx(0.25).margin(1e-15));
  CHECK(centers[1] == Catch::Approx(0.75).margin(1e-15));

  for (int trial = 0; trial < 200; ++trial) {
    auto d = sample_uniform(2.0, 6.0, 8, true, rng);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double lo = 2.0 + double(i) * 0.5;
      CHECK(d[i] >= lo);
      CHECK(d[i] < lo + 0.5);
    }
  }

  // Monte-Carlo mean over many stratified draws approaches the interval center
  double sum = 0.0;
  i64 count = 0;
  for (int trial = 0; trial < 100000 / 4; ++trial) {
    auto d = sample_uniform(0.0, 1.0, 4, true, rng);
    for (double v : d) sum += v;
    count += 4;
  }
  CHECK(sum / double(count) == Catch::Approx(0.5).margin(0.002));
  CHECK_THROWS_AS(sample_uniform(1.0, 1.0, 4, false, rng), nf::error);
}

TEST_CASE("one-hot importance weights concentrate all fine samples") {
  Rng rng(5);
  std::vector<double> depths = {0.125, 0.375, 0.625, 0.875};
  std::vector<double> weights = {0.0, 0.0, 1.0, 0.0};
  auto merged = sample_importance(depths, weights, 16, rng);
  REQUIRE(merged.size() == 20);
  CHECK(std::is_sorted(merged.begin(), merged.end()));
  int fine_in_bin = 0, fine_total = 0;
  for (double d : merged) {
    if (std::find(depths.begin(), depths.end(), d) != depths.end()) continue;
    ++fine_total;
    if (d >= 0.5 && d <= 0.75) ++fine_in_bin;  // bin 2 spans the midpoints around 0.625
  }
  CHECK(fine_total == 16);
  CHECK(fine_in_bin == 16);
}

TEST_CASE("importance draws follow the weight ratio") {
  Rng rng(6);
  std::vector<double> depths = {0.25, 0.75};
  std::vector<double> weights = {1.0, 3.0};
  i64 lo = 0, hi = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    auto merged = sample_importance(depths, weights, 10, rng);
    for (double d : merged) {
      if (d == 0.25 || d == 0.75) continue;
      if (d < 0.5) ++lo;
      else ++hi;
    }
  }
  const double frac_lo = double(lo) / double(lo + hi);
  CHECK(std::abs(frac_lo - 0.25) < 0.01);  // total-variation tolerance

  // all-zero weights fall back to uniform
  auto fallback = sample_importance(depths, {0.0, 0.0}, 8, rng);
  CHECK(fallback.size() == 10);
  for (double d : fallback) {
    CHECK(d >= 0.25);
    CHECK(d <= 0.75);
  }
  CHECK_THROWS_AS(sample_importance(depths, {1.0}, 4, rng), nf::error);
}

TEST_CASE("identical cameras are at distance zero") {
  Rng rng(9);
  CameraPose cam = random_orbit_camera(rng, 4.0, 80.0);
  CHECK(camera_distance(cam, cam) <= 1e-12);
}

TEST_CASE("distant perpendicular cameras sit near distance two-thirds") {
  // Cameras far from the grid with narrow FOV covering it fully: ray
  // directions are nearly constant, so s_ij -> 1 + cos(angle).
  const double radius = 60.0;
  const double focal = 20.0 * 64;  // covers ~±1.6 world units at this range
  CameraPose a = make_lookat_camera(Vector3d(radius, 0, 0), Vector3d::Zero(), Vector3d::UnitY(),
                                    focal, 64, 64, radius - 2, radius + 2);
  CameraPose b = make_lookat_camera(Vector3d(0, 0, radius), Vector3d::Zero(), Vector3d::UnitY(),
                                    focal, 64, 64, radius - 2, radius + 2);
  auto res = camera_distance_full(a, b);
  CHECK_FALSE(res.degenerate);
  CHECK(std::abs(res.d - 2.0 / 3.0) <= 0.05);
}

TEST_CASE("opposite-facing cameras approach the maximum distance") {
  const double radius = 60.0;
  const double focal = 20.0 * 64;
  CameraPose a = make_lookat_camera(Vector3d(radius, 0, 0), Vector3d::Zero(), Vector3d::UnitY(),
                                    focal, 64, 64, radius - 2, radius + 2);
  CameraPose b = make_lookat_camera(Vector3d(-radius, 0, 0), Vector3d::Zero(), Vector3d::UnitY(),
                                    focal, 64, 64, radius - 2, radius + 2);
  CHECK(camera_distance(a, b) >= 0.95);
}

TEST_CASE("camera distance is symmetric and within the unit interval") {
  Rng rng(12);
  for (int trial = 0; trial < 40; ++trial) {
    CameraPose a = random_orbit_camera(rng, rng.uniform(2.5, 6.0), 80.0);
    CameraPose b = random_orbit_camera(rng, rng.uniform(2.5, 6.0), 80.0);
    const double dab = camera_distance(a, b, 16);
    const double dba = camera_distance(b, a, 16);
    CHECK(std::abs(dab - dba) <= 1e-12);
    CHECK(dab >= 0.0);
    CHECK(dab <= 1.0);
  }
}

TEST_CASE("cameras with no shared visibility are flagged degenerate") {
  // both cameras look away from the grid
  CameraPose a = make_lookat_camera(Vector3d(5, 0, 0), Vector3d(50, 0, 0), Vector3d::UnitY(),
                                    200.0, 64, 64, 0.5, 10.0);
  CameraPose b = make_lookat_camera(Vector3d(0, 5, 0), Vector3d(0, 50, 0), Vector3d::UnitX(),
                                    200.0, 64, 64, 0.5, 10.0);
  auto res = camera_distance_full(a, b);
  CHECK(res.degenerate);
  CHECK(res.d == 1.0);
}

TEST_CASE("view difficulty arithmetic and binning") {
  auto vd = difficulty_from_distances({0.1, 0.2, 0.9});
  CHECK(vd.d == Catch::Approx(0.15).margin(1e-15));
  CHECK(vd.bin == DifficultyBin::easy);

  CHECK(difficulty_from_distances({0.4}).bin == DifficultyBin::hard);
  CHECK(difficulty_from_distances({0.0, 0.0}).bin == DifficultyBin::easy);
  CHECK(difficulty_from_distances({1.0 / 6.0, 1.0 / 6.0}).bin == DifficultyBin::medium);
  CHECK(difficulty_from_distances({1.0 / 3.0, 1.0 / 3.0}).bin == DifficultyBin::hard);
  CHECK_THROWS_AS(difficulty_from_distances({}), nf::error);

  // bins partition [0,1]
  for (double d = 0.0; d <= 1.0; d += 0.01) {
    DifficultyBin b = difficulty_bin(d);
    const bool easy = d < 1.0 / 6.0;
    const bool medium = !easy && d < 1.0 / 3.0;
    CHECK(b == (easy ? DifficultyBin::easy : medium ? DifficultyBin::medium : DifficultyBin::hard));
  }
}

TEST_CASE("perpendicular-plus-opposite sources land in the hard bin") {
  const double radius = 60.0;
  const double focal = 20.0 * 64;
  auto cam_at = [&](double x, double z) {
    return make_lookat_camera(Vector3d(x, 0, z), Vector3d::Zero(), Vector3d::UnitY(), focal, 64,
                              64, radius - 2, radius + 2);
  };
  CameraPose target = cam_at(radius, 0);
  std::vector<CameraPose> sources = {cam_at(0, radius), cam_at(-radius, 0)};
  ViewDifficulty vd = view_difficulty(target, sources);
  CHECK(vd.d == Catch::Approx(0.5 * (2.0 / 3.0 + 1.0)).margin(0.06));
  CHECK(vd.bin == DifficultyBin::hard);
}

TEST_CASE("ray bundle points satisfy the ray equation") {
  Rng rng(21);
  CameraPose cam = random_orbit_camera(rng, 4.0, 80.0);
  RayBundle bundle;
  bundle.n_samples = 4;
  for (int i = 0; i < 3; ++i) {
    Ray r = emit_ray(cam, Vector2d(10.0 + i, 20.0));
    auto depths = sample_uniform(r.near, r.far, 4, true, rng);
    bundle.rays.push_back(r);
    bundle.depths.insert(bundle.depths.end(), depths.begin(), depths.end());
  }
  bundle.fill_points();
  for (i64 r = 0; r < bundle.n_rays(); ++r)
    for (int s = 0; s < bundle.n_samples; ++s) {
      const i64 i = r * 4 + s;
      const Vector3d expect =
          bundle.rays[std::size_t(r)].origin + bundle.depths[std::size_t(i)] * bundle.rays[std::size_t(r)].dir;
      CHECK((bundle.points[std::size_t(i)] - expect).norm() < 1e-10);
    }
}
