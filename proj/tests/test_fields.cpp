#include <catch2/catch_amalgamated.hpp>

#include "nerform/fields.hpp"
#include "testutil.hpp"

using namespace nf;
using Eigen::Vector3d;

TEST_CASE("positional embedding of zero alternates zeros and ones") {
  PeConfig cfg{3, false};
  auto e = positional_embed({0.0}, cfg);
  REQUIRE(e.size() == 6);
  for (std::size_t i = 0; i < e.size(); i += 2) {
    CHECK(e[i] == 0.0);
    CHECK(e[i + 1] == 1.0);
  }
}

TEST_CASE("positional embedding octaves hit exact trig values") {
  PeConfig cfg{2, false};
  auto e = positional_embed({M_PI / 2.0}, cfg);
  REQUIRE(e.size() == 4);
  CHECK(e[0] == Catch::Approx(1.0).margin(1e-15));   // sin(pi/2)
  CHECK(e[1] == Catch::Approx(0.0).margin(1e-15));   // cos(pi/2)
  CHECK(e[2] == Catch::Approx(0.0).margin(1e-12));   // sin(pi)
  CHECK(e[3] == Catch::Approx(-1.0).margin(1e-15));  // cos(pi)
}

TEST_CASE("positional embedding matches a direct trig oracle") {
  Rng rng(404);
  PeConfig cfg{5, true};
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x = {rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)};
    auto e = positional_embed(x, cfg);
    REQUIRE(i64(e.size()) == cfg.dim(3));
    std::size_t w = 0;
    for (double c : x) {
      CHECK(e[w++] == c);  // raw
      for (int j = 0; j < cfg.n_freq; ++j) {
        const double f = std::pow(2.0, j);
        CHECK(e[w++] == Catch::Approx(std::sin(f * c)).margin(1e-12));
        CHECK(e[w++] == Catch::Approx(std::cos(f * c)).margin(1e-12));
      }
    }
  }
}

TEST_CASE("embedding with raw coordinates is injective under collision search") {
  Rng rng(11);
  PeConfig cfg{1, true};
  for (int trial = 0; trial < 100000; ++trial) {
    std::vector<double> a = {rng.uniform(-M_PI, M_PI)};
    std::vector<double> b = {rng.uniform(-M_PI, M_PI)};
    auto ea = positional_embed(a, cfg);
    auto eb = positional_embed(b, cfg);
    double dist = 0.0;
    for (std::size_t i = 0; i < ea.size(); ++i) dist += (ea[i] - eb[i]) * (ea[i] - eb[i]);
    if (dist == 0.0) CHECK(a[0] == b[0]);
  }
}

TEST_CASE("zero-initialized heads give the closed-form outputs") {
  MlpFieldConfig cfg;
  cfg.trunk_layers = 2;
  cfg.trunk_width = 16;
  MlpField field(cfg);
  ParamStore store;
  Rng init(7);
  // force-create parameters, then zero the heads
  field.eval_point(store, init, Vector3d(0.1, 0.2, 0.3), Vector3d::UnitZ());
  for (const char* n : {"field/opacity/w", "field/opacity/b", "field/color/w", "field/color/b"})
    detail::emap(store.get(n)).setZero();
  auto [opacity, rgb] = field.eval_point(store, init, Vector3d(0.4, -0.2, 0.1), Vector3d::UnitX());
  CHECK(opacity == Catch::Approx(std::log(2.0)).epsilon(1e-12));  // softplus(0)
  CHECK(rgb.x() == Catch::Approx(0.5).margin(1e-15));
  CHECK(rgb.y() == Catch::Approx(0.5).margin(1e-15));
  CHECK(rgb.z() == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("field outputs stay in their activation ranges") {
  MlpFieldConfig cfg;
  cfg.trunk_layers = 2;
  cfg.trunk_width = 24;
  MlpField field(cfg);
  ParamStore store;
  Rng init(99);
  Rng rng(100);
  for (int trial = 0; trial < 200; ++trial) {
    Vector3d x(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    Vector3d d = Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized();
    auto [opacity, rgb] = field.eval_point(store, init, x, d);
    CHECK(opacity >= 0.0);
    for (int c = 0; c < 3; ++c) {
      CHECK(rgb[c] > 0.0);
      CHECK(rgb[c] < 1.0);
    }
  }
}

TEST_CASE("opacity is invariant to the view direction") {
  MlpFieldConfig cfg;
  cfg.trunk_layers = 2;
  cfg.trunk_width = 24;
  MlpField field(cfg);
  ParamStore store;
  Rng init(3);
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    Vector3d x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    Vector3d d1 = Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized();
    Vector3d d2 = Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized();
    auto [o1, rgb1] = field.eval_point(store, init, x, d1);
    auto [o2, rgb2] = field.eval_point(store, init, x, d2);
    CHECK(o1 == o2);  // direction feeds only the color head
    (void)rgb1;
    (void)rgb2;
  }
}

TEST_CASE("field gradients match finite differences") {
  MlpFieldConfig cfg;
  cfg.trunk_layers = 2;
  cfg.trunk_width = 8;
  cfg.pe_pos = PeConfig{2, true};
  cfg.pe_dir = PeConfig{1, true};
  cfg.latent_dim = 4;
  MlpField field(cfg);
  ParamStore store;
  Rng init(17);
  Rng rng(18);
  Tensor points = Tensor::uniform(Shape{3, 3}, rng, -1.0, 1.0);
  Tensor dirs = Tensor::zeros(Shape{3, 3});
  for (i64 r = 0; r < 3; ++r) {
    Vector3d d = Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized();
    for (i64 c = 0; c < 3; ++c) dirs.at(r * 3 + c) = d[c];
  }
  // create parameters once
  {
    Tape t0;
    TapeParams tp0(t0, store);
    Var z0 = t0.constant(Tensor::zeros(Shape{3, 4}));
    field.eval(t0, tp0, store, init, points, dirs, z0);
  }

  // leaves under test: the latent plus every parameter
  std::vector<std::string> names;
  std::vector<Tensor> leaves;
  leaves.push_back(Tensor::uniform(Shape{3, 4}, rng, -0.5, 0.5));
  for (const auto& [name, t] : store.all()) {
    names.push_back(name);
    leaves.push_back(t.clone());
  }

  // analytic pass: latent as a gradient leaf, parameters through TapeParams
  Tape tape;
  Var zvar = tape.leaf(leaves[0].clone(), true);
  ParamStore shadow;
  for (std::size_t i = 0; i < names.size(); ++i) shadow.create(names[i], leaves[i + 1].clone());
  TapeParams tp(tape, shadow);
  FieldOut out = field.eval(tape, tp, shadow, init, points, dirs, zvar);
  Var obj = tape.add(tape.reduce_sum(out.opacity), tape.reduce_sum(out.rgb));
  tape.backward(obj);

  auto eval_obj = [&](const std::vector<Tensor>& ins) {
    Tape t2;
    ParamStore st2;
    for (std::size_t i = 0; i < names.size(); ++i) st2.create(names[i], ins[i + 1].clone());
    TapeParams tp2(t2, st2);
    Var z = t2.constant(ins[0].clone());
    FieldOut o2 = field.eval(t2, tp2, st2, init, points, dirs, z);
    Var ob = t2.add(t2.reduce_sum(o2.opacity), t2.reduce_sum(o2.rgb));
    return t2.value(ob).at(0);
  };

  Rng pick(55);
  double max_rel = 0.0;
  auto fd_check = [&](const Tensor& analytic, std::size_t leaf_idx, i64 coord) {
    std::vector<Tensor> work;
    for (const Tensor& t : leaves) work.push_back(t.clone());
    const double eps = 1e-5;
    const double orig = work[leaf_idx].at(coord);
    work[leaf_idx].at(coord) = orig + eps;
    const double fp = eval_obj(work);
    work[leaf_idx].at(coord) = orig - eps;
    const double fm = eval_obj(work);
    const double fd = (fp - fm) / (2 * eps);
    const double an = analytic.at(coord);
    max_rel = std::max(max_rel, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1.0}));
  };
  Tensor zg = tape.grad(zvar);
  for (int k = 0; k < 6; ++k) fd_check(zg, 0, pick.uniform_int(zg.numel()));
  auto param_grads = tp.collect_grads();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Tensor& g = param_grads.at(names[i]);
    for (int k = 0; k < 3; ++k) fd_check(g, i + 1, pick.uniform_int(g.numel()));
  }
  INFO("max relative error " << max_rel);
  CHECK(max_rel <= 1e-4);
}

TEST_CASE("latent table entries are per-sequence trainable rows") {
  ParamStore store;
  Rng init(8);
  LatentTable::init(store, {"seq_b", "seq_a"}, 6, init);
  CHECK(store.contains("latent/seq_a"));
  CHECK(store.contains("latent/seq_b"));
  CHECK(store.get("latent/seq_a").shape == Shape{6});
  // re-init is a no-op for existing entries
  Tensor before = store.get("latent/seq_a").clone();
  LatentTable::init(store, {"seq_a"}, 6, init);
  CHECK(nftest::bytes_equal(before, store.get("latent/seq_a")));

  Tape tape;
  TapeParams tp(tape, store);
  Var z = LatentTable::lookup(tape, tp, "seq_a", 5);
  REQUIRE(tape.shape(z) == Shape{5, 6});
  for (i64 r = 0; r < 5; ++r)
    for (i64 c = 0; c < 6; ++c)
      CHECK(tape.value(z).at(r * 6 + c) == store.get("latent/seq_a").at(c));
}

TEST_CASE("sphere SDF is the exact signed distance") {
  AnalyticSdf s = AnalyticSdf::make_sphere(Vector3d::Zero(), 1.0);
  CHECK(s.eval(Vector3d(2, 0, 0)) == Catch::Approx(1.0).margin(1e-15));
  CHECK(s.eval(Vector3d::Zero()) == Catch::Approx(-1.0).margin(1e-15));
  CHECK(s.eval(Vector3d(0, 1, 0)) == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("SDF magnitudes match brute-force surface sampling") {
  Rng rng(31);
  AnalyticSdf sphere = AnalyticSdf::make_sphere(Vector3d(0.2, -0.1, 0.3), 0.8);
  AnalyticSdf box = AnalyticSdf::make_box(Vector3d(-0.1, 0.2, 0.0), Vector3d(0.5, 0.4, 0.6));

  // dense sample of each surface
  std::vector<Vector3d> sphere_pts, box_pts;
  for (int i = 0; i < 150000; ++i) {
    Vector3d d = Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized();
    sphere_pts.push_back(sphere.center + 0.8 * d);
  }
  for (int face = 0; face < 6; ++face)
    for (int i = 0; i < 7000; ++i) {
      const int axis = face / 2;
      const double sign = face % 2 ? 1.0 : -1.0;
      Vector3d p;
      for (int c = 0; c < 3; ++c)
        p[c] = c == axis ? sign * box.half_extents[c]
                         : rng.uniform(-box.half_extents[c], box.half_extents[c]);
      box_pts.push_back(box.center + p);
    }

  auto nearest = [](const std::vector<Vector3d>& pts, const Vector3d& x) {
    double best = 1e300;
    for (const Vector3d& p : pts) best = std::min(best, (x - p).norm());
    return best;
  };

  int checked = 0;
  for (int trial = 0; trial < 60 && checked < 20; ++trial) {
    Vector3d x(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));
    // very near the surface the discrete sample spacing dominates; skip
    if (std::abs(sphere.eval(x)) < 0.05 || std::abs(box.eval(x)) < 0.05) continue;
    CHECK(std::abs(std::abs(sphere.eval(x)) - nearest(sphere_pts, x)) < 1e-3);
    CHECK(std::abs(std::abs(box.eval(x)) - nearest(box_pts, x)) < 2e-2);
    ++checked;
  }
  CHECK(checked == 20);
}

TEST_CASE("sphere SDF is 1-Lipschitz") {
  Rng rng(32);
  AnalyticSdf s = AnalyticSdf::make_sphere(Vector3d(0.1, 0.0, -0.2), 0.9);
  for (int trial = 0; trial < 1000; ++trial) {
    Vector3d a(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    Vector3d b(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    CHECK(std::abs(s.eval(a) - s.eval(b)) <= (a - b).norm() + 1e-12);
  }
}
