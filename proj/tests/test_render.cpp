#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "nerform/image_io.hpp"
#include "nerform/render_ea.hpp"
#include "testutil.hpp"

using namespace nf;

namespace {

// Constant-opacity field: opacity sigma everywhere, fixed color.
FieldEval const_field(double sigma, Eigen::Vector3d color) {
  return [sigma, color](Tape& t, const Tensor& points, const Tensor&) {
    const i64 n = points.shape[0];
    Tensor op = Tensor::full(Shape{n, 1}, sigma);
    Tensor rgb = Tensor::zeros(Shape{n, 3});
    for (i64 i = 0; i < n; ++i)
      for (i64 k = 0; k < 3; ++k) rgb.at(i * 3 + k) = color[k];
    return std::make_pair(t.constant(std::move(op)), t.constant(std::move(rgb)));
  };
}

Ray z_ray(double near = 0.5, double far = 4.0) {
  Ray r;
  r.origin = Eigen::Vector3d::Zero();
  r.dir = Eigen::Vector3d(0, 0, 1);
  r.pixel = Eigen::Vector2d(7.5, 3.5);
  r.near = near;
  r.far = far;
  return r;
}

}  // namespace

TEST_CASE("ea_weights matches the hand-derived three-sample example") {
  // [PAPER] opacities [1,1,1], deltas 0.5: per-sample T = exp(-0.5) and the
  // weights telescope to [0.39347, 0.23865, 0.14475], total 0.77687.
  const EaWeights r = ea_weights({1.0, 1.0, 1.0}, {0.5, 0.5, 0.5});
  for (int i = 0; i < 3; ++i) CHECK(r.transmittance[std::size_t(i)] == Catch::Approx(0.60653).margin(1e-5));
  CHECK(r.w[0] == Catch::Approx(0.39347).margin(1e-5));
  CHECK(r.w[1] == Catch::Approx(0.23865).margin(1e-5));
  CHECK(r.w[2] == Catch::Approx(0.14475).margin(1e-5));
  CHECK(r.w[0] + r.w[1] + r.w[2] == Catch::Approx(0.77687).margin(1e-5));
  CHECK(r.alpha == Catch::Approx(1.0 - std::exp(-1.5)).margin(1e-12));
}

TEST_CASE("ea_weights edge behavior") {
  // [TRIVIAL] zero opacity: fully transparent.
  const EaWeights zero = ea_weights({0.0, 0.0, 0.0}, {0.5, 0.5, 0.5});
  for (double t : zero.transmittance) CHECK(t == 1.0);
  for (double w : zero.w) CHECK(w == 0.0);
  CHECK(zero.alpha == 0.0);

  // [TRIVIAL] a saturating first sample takes all the weight.
  const EaWeights sat = ea_weights({1e6, 1.0, 1.0}, {0.5, 0.5, 0.5});
  CHECK(sat.w[0] == Catch::Approx(1.0).margin(1e-12));
  CHECK(sat.w[1] == Catch::Approx(0.0).margin(1e-12));
  CHECK(sat.alpha == Catch::Approx(1.0).margin(1e-12));

  CHECK_THROWS_AS(ea_weights({-0.1, 1.0}, {0.5, 0.5}), nf::error);
  CHECK_THROWS_AS(ea_weights({0.1, 1.0}, {0.5, -0.5}), nf::error);
  CHECK_THROWS_AS(ea_weights({0.1}, {0.5, 0.5}), nf::error);
}

TEST_CASE("weight total and residual transmittance always sum to one") {
  // [DERIVED] algebraic identity sum(w) = 1 - prod(T) on random inputs.
  Rng rng(20240601);
  for (int trial = 0; trial < 10000; ++trial) {
    const int n = 1 + int(rng.uniform_int(64));
    std::vector<double> op(static_cast<std::size_t>(n)), dl(static_cast<std::size_t>(n));
    for (auto& v : op) v = 5.0 * rng.uniform();
    for (auto& v : dl) v = 0.3 * rng.uniform();
    const EaWeights r = ea_weights(op, dl);
    double wsum = 0.0, tprod = 1.0;
    for (std::size_t i = 0; i < op.size(); ++i) {
      wsum += r.w[i];
      tprod *= r.transmittance[i];
    }
    REQUIRE(std::abs(wsum - (1.0 - tprod)) <= 1e-10);
    REQUIRE(std::abs(r.alpha - wsum) <= 1e-10);
  }
}

TEST_CASE("deltas come from actual sample spacing") {
  const std::vector<double> d = deltas_from_depths({1.0, 1.5, 2.5}, 4.0);
  CHECK(d == std::vector<double>{0.5, 1.0, 1.5});
  CHECK_THROWS_AS(deltas_from_depths({1.0, 0.9}, 4.0), nf::error);
  CHECK_THROWS_AS(deltas_from_depths({1.0, 5.0}, 4.0), nf::error);
}

TEST_CASE("on-tape composite agrees with the reference weights") {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const i64 n = 1 + rng.uniform_int(12);
    std::vector<double> depths(static_cast<std::size_t>(n));
    double d = 0.2 + 0.3 * rng.uniform();
    for (auto& v : depths) {
      v = d;
      d += 0.05 + 0.4 * rng.uniform();
    }
    const double far = d + rng.uniform();

    Tape tape;
    const Tensor op_t = Tensor::uniform(Shape{n, 1}, rng, 0.0, 3.0);
    const Tensor col_t = Tensor::uniform(Shape{n, 3}, rng, 0.0, 1.0);
    const Var op = tape.leaf(op_t.clone(), false);
    const Var col = tape.leaf(col_t.clone(), false);
    const EaPass pass = ea_composite(tape, op, col, depths, far);

    std::vector<double> opv(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) opv[std::size_t(i)] = op_t.at(i);
    const EaWeights ref = ea_weights(opv, deltas_from_depths(depths, far));

    const Tensor& w = tape.value(pass.weights);
    double rgb[3] = {0, 0, 0}, wsum = 0.0, dsum = 0.0;
    for (i64 i = 0; i < n; ++i) {
      REQUIRE(w.at(i) == Catch::Approx(ref.w[std::size_t(i)]).margin(1e-12));
      for (i64 k = 0; k < 3; ++k) rgb[k] += ref.w[std::size_t(i)] * col_t.at(i * 3 + k);
      wsum += ref.w[std::size_t(i)];
      dsum += ref.w[std::size_t(i)] * depths[std::size_t(i)];
    }
    for (i64 k = 0; k < 3; ++k)
      REQUIRE(tape.value(pass.rgb).at(k) == Catch::Approx(rgb[k]).margin(1e-12));
    REQUIRE(tape.value(pass.alpha).at(0) == Catch::Approx(ref.alpha).margin(1e-10));
    REQUIRE(std::abs(wsum - tape.value(pass.alpha).at(0)) <= 1e-10);
    REQUIRE(pass.depth[0] == Catch::Approx(dsum / std::max(wsum, 1e-10)).margin(1e-9));
  }
}

TEST_CASE("two-sample composite matches a fully manual derivation") {
  // [DERIVED] sigma = [0.8, 2.0], depths [1.0, 1.6], far 2.1 so deltas are
  // [0.6, 0.5].  w1 = 1-exp(-0.48), w2 = exp(-0.48)*(1-exp(-1.0)).
  Tape tape;
  const Var op = tape.leaf(Tensor::from(Shape{2, 1}, {0.8, 2.0}), false);
  const Var col = tape.leaf(Tensor::from(Shape{2, 3}, {0.9, 0.1, 0.4, 0.2, 0.7, 0.05}), false);
  const EaPass pass = ea_composite(tape, op, col, {1.0, 1.6}, 2.1);

  const double w1 = 1.0 - std::exp(-0.48);
  const double w2 = std::exp(-0.48) * (1.0 - std::exp(-1.0));
  CHECK(tape.value(pass.weights).at(0) == Catch::Approx(w1).margin(1e-12));
  CHECK(tape.value(pass.weights).at(1) == Catch::Approx(w2).margin(1e-12));
  CHECK(tape.value(pass.rgb).at(0) == Catch::Approx(w1 * 0.9 + w2 * 0.2).margin(1e-12));
  CHECK(tape.value(pass.rgb).at(1) == Catch::Approx(w1 * 0.1 + w2 * 0.7).margin(1e-12));
  CHECK(tape.value(pass.rgb).at(2) == Catch::Approx(w1 * 0.4 + w2 * 0.05).margin(1e-12));
  CHECK(tape.value(pass.alpha).at(0) == Catch::Approx(1.0 - std::exp(-1.48)).margin(1e-12));
  CHECK(pass.depth[0] == Catch::Approx((w1 * 1.0 + w2 * 1.6) / (w1 + w2)).margin(1e-12));
}

TEST_CASE("alpha is monotone in every single opacity") {
  Rng rng(4242);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + int(rng.uniform_int(10));
    std::vector<double> op(static_cast<std::size_t>(n)), dl(static_cast<std::size_t>(n));
    for (auto& v : op) v = 2.0 * rng.uniform();
    for (auto& v : dl) v = 0.05 + 0.3 * rng.uniform();
    const double base = ea_weights(op, dl).alpha;
    const std::size_t i = std::size_t(rng.uniform_int(n));
    op[i] += 0.5;
    REQUIRE(ea_weights(op, dl).alpha > base);
  }
}

TEST_CASE("empty field renders the background") {
  Rng rng(11);
  Tape tape;
  EaRenderConfig cfg;
  cfg.n_coarse = 8;
  cfg.n_fine = 4;
  const EaRender r = ea_render(tape, const_field(0.0, {0.3, 0.3, 0.3}), z_ray(), cfg, rng);
  CHECK(tape.value(r.fine.alpha).at(0) == 0.0);
  CHECK(tape.value(r.coarse.alpha).at(0) == 0.0);
  for (i64 k = 0; k < 3; ++k) CHECK(tape.value(r.fine.rgb).at(k) == 0.0);

  Rng rng2(11);
  Tape tape2;
  cfg.white_background = true;
  const EaRender rw = ea_render(tape2, const_field(0.0, {0.3, 0.3, 0.3}), z_ray(), cfg, rng2);
  for (i64 k = 0; k < 3; ++k) CHECK(tape2.value(rw.fine.rgb).at(k) == 1.0);
}

TEST_CASE("opaque plane: expected depth lands within a coarse bin of the surface") {
  // [DERIVED] wall of near-infinite opacity at z = z0; closed-form hit depth
  // is z0 for a +z ray from the origin.
  const double z0 = 2.35;
  FieldEval wall = [z0](Tape& t, const Tensor& points, const Tensor&) {
    const i64 n = points.shape[0];
    Tensor op = Tensor::zeros(Shape{n, 1});
    Tensor rgb = Tensor::full(Shape{n, 3}, 0.5);
    for (i64 i = 0; i < n; ++i)
      if (points.at(i * 3 + 2) >= z0) op.at(i) = 1e4;
    return std::make_pair(t.constant(std::move(op)), t.constant(std::move(rgb)));
  };

  EaRenderConfig cfg;  // defaults: 32 coarse + 16 fine
  const Ray ray = z_ray(0.5, 4.0);
  const double bound = 2.0 * (ray.far - ray.near) / double(cfg.n_coarse);
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    Rng rng(seed);
    Tape tape;
    const EaRender r = ea_render(tape, wall, ray, cfg, rng);
    REQUIRE(tape.value(r.fine.alpha).at(0) == Catch::Approx(1.0).margin(1e-6));
    REQUIRE(std::abs(r.fine.depth[0] - z0) <= bound);
  }
}

TEST_CASE("render gradients against finite differences") {
  // Tiny analytic field built from two leaves; 4 coarse samples, no fine pass
  // so sample positions stay fixed under parameter perturbation.
  Rng crng(909);
  const auto build = [](Tape& t, const std::vector<Var>& leaves) {
    FieldEval field = [&t, &leaves](Tape& tape, const Tensor& points, const Tensor&) {
      NF_CHECK(&tape == &t, "test field is bound to the outer tape");
      const Var p = tape.constant(points.clone());
      const Var op = tape.softplus(tape.matmul(p, leaves[0]));
      const Var rgb = tape.sigmoid(tape.matmul(p, leaves[1]));
      return std::make_pair(op, rgb);
    };
    Rng rng(31);
    EaRenderConfig cfg;
    cfg.n_coarse = 4;
    cfg.n_fine = 0;
    std::vector<Ray> rays = {z_ray(0.5, 3.0), z_ray(1.0, 4.0)};
    rays[1].origin = Eigen::Vector3d(0.2, -0.1, 0.0);
    rays[1].dir = Eigen::Vector3d(0, 1, 0);
    const EaRender r = ea_render(t, field, rays, cfg, rng);
    return t.add(t.reduce_sum(r.fine.rgb), t.reduce_sum(r.fine.alpha));
  };
  Rng lrng(5150);
  const std::vector<Tensor> leaves = {Tensor::normal(Shape{3, 1}, lrng, 0.0, 0.6),
                                      Tensor::normal(Shape{3, 3}, lrng, 0.0, 0.6)};
  const GradCheckReport rep = grad_check(build, leaves, 1e-5, 1e-4);
  INFO("max_rel_err=" << rep.max_rel_err << " n=" << rep.n_checked);
  CHECK(rep.pass);
  CHECK(rep.n_checked == 12);
}

TEST_CASE("fixed seed renders are bit-identical") {
  Rng prng(606);
  const Tensor w_op = Tensor::normal(Shape{3, 1}, prng, 0.0, 0.5);
  const Tensor w_rgb = Tensor::normal(Shape{3, 3}, prng, 0.0, 0.5);
  const auto run = [&](Tensor& rgb, Tensor& alpha, Tensor& weights, Tensor& depths) {
    Tape tape;
    const Var a = tape.leaf(w_op.clone(), false);
    const Var b = tape.leaf(w_rgb.clone(), false);
    FieldEval field = [&](Tape& t, const Tensor& points, const Tensor&) {
      const Var p = t.constant(points.clone());
      return std::make_pair(t.softplus(t.matmul(p, a)), t.sigmoid(t.matmul(p, b)));
    };
    Rng rng(12345);
    EaRenderConfig cfg;
    cfg.n_coarse = 16;
    cfg.n_fine = 8;
    const EaRender r = ea_render(tape, field, std::vector<Ray>{z_ray(), z_ray(0.7, 3.0)}, cfg, rng);
    rgb = tape.value(r.fine.rgb).clone();
    alpha = tape.value(r.fine.alpha).clone();
    weights = tape.value(r.fine.weights).clone();
    depths = r.fine.depths.clone();
  };
  Tensor r1, a1, w1, d1, r2, a2, w2, d2;
  run(r1, a1, w1, d1);
  run(r2, a2, w2, d2);
  CHECK(nftest::bytes_equal(r1, r2));
  CHECK(nftest::bytes_equal(a1, a2));
  CHECK(nftest::bytes_equal(w1, w2));
  CHECK(nftest::bytes_equal(d1, d2));
}

TEST_CASE("field failures carry the ray identity") {
  FieldEval bad = [](Tape& t, const Tensor& points, const Tensor&) -> std::pair<Var, Var> {
    const i64 n = points.shape[0];
    for (i64 i = 0; i < n; ++i)
      NF_CHECK(points.at(i * 3 + 2) < 3.0, "synthetic field failure");
    return std::make_pair(t.constant(Tensor::zeros(Shape{n, 1})),
                          t.constant(Tensor::zeros(Shape{n, 3})));
  };
  Rng rng(5);
  Tape tape;
  EaRenderConfig cfg;
  cfg.n_coarse = 8;
  cfg.n_fine = 0;
  try {
    ea_render(tape, bad, z_ray(0.5, 4.0), cfg, rng);
    FAIL("expected a field failure");
  } catch (const nf::error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("pixel (7.5") != std::string::npos);
    CHECK(msg.find("synthetic field failure") != std::string::npos);
  }
}

TEST_CASE("importance sampling concentrates fine samples near high weights") {
  // Wall field again: at least half the fine samples should land in the
  // coarse bin straddling the wall and no merged depth may exceed far.
  const double z0 = 2.0;
  FieldEval wall = [z0](Tape& t, const Tensor& points, const Tensor&) {
    const i64 n = points.shape[0];
    Tensor op = Tensor::zeros(Shape{n, 1});
    for (i64 i = 0; i < n; ++i)
      if (points.at(i * 3 + 2) >= z0) op.at(i) = 1e4;
    return std::make_pair(t.constant(std::move(op)),
                          t.constant(Tensor::full(Shape{n, 3}, 0.5)));
  };
  Rng rng(99);
  Tape tape;
  EaRenderConfig cfg;
  cfg.n_coarse = 16;
  cfg.n_fine = 16;
  const Ray ray = z_ray(0.5, 4.0);
  const EaRender r = ea_render(tape, wall, ray, cfg, rng);
  const double bin = (ray.far - ray.near) / double(cfg.n_coarse);
  int near_wall = 0;
  for (i64 i = 0; i < r.fine.n_samples(); ++i) {
    const double d = r.fine.depths.at(i);
    REQUIRE(d <= ray.far);
    REQUIRE(d >= ray.near);
    if (i > 0) REQUIRE(d >= r.fine.depths.at(i - 1));
    if (std::abs(d - z0) <= 1.5 * bin) ++near_wall;
  }
  CHECK(near_wall >= cfg.n_fine / 2);
}

TEST_CASE("PPM round-trips quantized images bit-exactly") {
  nftest::TempDir dir("ppm");
  Rng rng(2024);
  Tensor img = Tensor::zeros(Shape{7, 5, 3});
  for (i64 i = 0; i < img.numel(); ++i) img.at(i) = quantize_8bit(rng.uniform());
  write_ppm(dir.path / "a.ppm", img);
  const Tensor back = read_ppm(dir.path / "a.ppm");
  REQUIRE(back.shape == img.shape);
  REQUIRE(nftest::bytes_equal(img, back));

  write_ppm(dir.path / "b.ppm", back);
  CHECK(nftest::read_file(dir.path / "a.ppm") == nftest::read_file(dir.path / "b.ppm"));
}

TEST_CASE("PGM round-trips hard masks exactly") {
  nftest::TempDir dir("pgm");
  Tensor mask = Tensor::zeros(Shape{4, 6});
  for (i64 i = 0; i < mask.numel(); i += 2) mask.at(i) = 1.0;
  write_pgm(dir.path / "m.pgm", mask);
  const Tensor back = read_pgm(dir.path / "m.pgm");
  REQUIRE(back.shape == mask.shape);
  REQUIRE(nftest::bytes_equal(mask, back));
}

TEST_CASE("depth raster round-trips f32 values exactly") {
  nftest::TempDir dir("nfdp");
  Rng rng(31);
  Tensor depth = Tensor::zeros(Shape{5, 9});
  for (i64 i = 0; i < depth.numel(); ++i) depth.at(i) = double(float(4.0 * rng.uniform()));
  write_depth(dir.path / "d.bin", depth);
  const Tensor back = read_depth(dir.path / "d.bin");
  REQUIRE(back.shape == depth.shape);
  REQUIRE(nftest::bytes_equal(depth, back));
}

TEST_CASE("raster readers reject malformed files") {
  nftest::TempDir dir("badio");
  {
    std::ofstream out(dir.path / "bad.ppm", std::ios::binary);
    out << "P5\n2 2\n255\n";
  }
  CHECK_THROWS_AS(read_ppm(dir.path / "bad.ppm"), nf::error);

  {
    std::ofstream out(dir.path / "trunc.ppm", std::ios::binary);
    out << "P6\n4 4\n255\nxx";
  }
  CHECK_THROWS_AS(read_ppm(dir.path / "trunc.ppm"), nf::error);

  {
    std::ofstream out(dir.path / "bad.bin", std::ios::binary);
    out << "NOPE";
  }
  CHECK_THROWS_AS(read_depth(dir.path / "bad.bin"), nf::error);

  Tensor depth = Tensor::full(Shape{2, 2}, 1.0);
  write_depth(dir.path / "short.bin", depth);
  {
    // Chop the payload in half.
    std::string whole = nftest::read_file(dir.path / "short.bin");
    std::ofstream out(dir.path / "short.bin", std::ios::binary | std::ios::trunc);
    out.write(whole.data(), std::streamsize(whole.size() - 8));
  }
  CHECK_THROWS_AS(read_depth(dir.path / "short.bin"), nf::error);

  CHECK_THROWS_AS(read_ppm(dir.path / "missing.ppm"), nf::error);
}
