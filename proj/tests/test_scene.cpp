#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "nerform/render_ea.hpp"
#include "nerform/scene.hpp"
#include "testutil.hpp"

using namespace nf;

namespace {

SynthConfig small_cfg(const std::string& kind, std::uint64_t seed, int frames = 3,
                      int raster = 24) {
  SynthConfig cfg;
  cfg.kind = kind;
  cfg.seed = seed;
  cfg.n_frames = frames;
  cfg.raster = raster;
  cfg.cloud_points = 256;
  return cfg;
}

bool dirs_byte_equal(const std::filesystem::path& a, const std::filesystem::path& b) {
  std::vector<std::filesystem::path> fa, fb;
  for (const auto& e : std::filesystem::recursive_directory_iterator(a))
    if (e.is_regular_file()) fa.push_back(std::filesystem::relative(e.path(), a));
  for (const auto& e : std::filesystem::recursive_directory_iterator(b))
    if (e.is_regular_file()) fb.push_back(std::filesystem::relative(e.path(), b));
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb) return false;
  for (const auto& rel : fa)
    if (nftest::read_file(a / rel) != nftest::read_file(b / rel)) return false;
  return true;
}

}  // namespace

TEST_CASE("sphere frames show a filled disc of the analytic radius") {
  // [DERIVED] silhouette radius of a sphere: f * R / sqrt(d^2 - R^2).
  const SynthConfig cfg = small_cfg("textured-sphere", 3, 4, 48);
  const SceneSequence seq = generate_synthetic_scene(cfg);
  const SceneGeometry geo = make_scene_geometry(cfg.kind, cfg.seed);
  const double f = 1.1 * 48.0, d = cfg.orbit_radius, R = geo.radius;
  const double r_expect = f * R / std::sqrt(d * d - R * R);

  for (const SceneFrame& fr : seq.frames) {
    i64 count = 0;
    const double cx = 24.0, cy = 24.0;  // sphere center projects to the raster center
    for (i64 r = 0; r < 48; ++r)
      for (i64 c = 0; c < 48; ++c) {
        const double m = fr.mask.at(r * 48 + c);
        REQUIRE((m == 0.0 || m == 1.0));  // hard masks
        const double dist = std::hypot(double(c) + 0.5 - cx, double(r) + 0.5 - cy);
        if (dist < r_expect - 1.0) REQUIRE(m == 1.0);  // filled
        if (dist > r_expect + 1.0) REQUIRE(m == 0.0);  // bounded
        count += m > 0.5 ? 1 : 0;
      }
    const double r_measured = std::sqrt(double(count) / M_PI);
    REQUIRE(std::abs(r_measured - r_expect) <= 1.0);
  }
}

TEST_CASE("opposite orbit frames are nearly maximally distant cameras") {
  SynthConfig flat = small_cfg("textured-sphere", 1, 8);
  flat.orbit_elevation = 0.0;  // frames 0 and 4 become antipodal views
  const SceneSequence seq = generate_synthetic_scene(flat);
  const double d_opposite = camera_distance(seq.frames[0].cam, seq.frames[4].cam);
  CHECK(d_opposite >= 0.9);
  CHECK(camera_distance(seq.frames[0].cam, seq.frames[0].cam) <= 1e-12);
  CHECK(camera_distance(seq.frames[0].cam, seq.frames[1].cam) < d_opposite);

  // An elevated orbit never reaches antipodal pairs; distance still peaks opposite.
  const SceneSequence tilted = generate_synthetic_scene(small_cfg("textured-sphere", 1, 8));
  const double d_tilt = camera_distance(tilted.frames[0].cam, tilted.frames[4].cam);
  CHECK(d_tilt > camera_distance(tilted.frames[0].cam, tilted.frames[1].cam));
  CHECK(d_tilt >= 0.5);
}

TEST_CASE("generation is deterministic and byte-identical per seed") {
  const SceneSequence a = generate_synthetic_scene(small_cfg("two-blob", 17));
  const SceneSequence b = generate_synthetic_scene(small_cfg("two-blob", 17));
  REQUIRE(a.frames.size() == b.frames.size());
  for (std::size_t k = 0; k < a.frames.size(); ++k) {
    REQUIRE(nftest::bytes_equal(a.frames[k].image, b.frames[k].image));
    REQUIRE(nftest::bytes_equal(a.frames[k].mask, b.frames[k].mask));
    REQUIRE(nftest::bytes_equal(a.frames[k].depth, b.frames[k].depth));
  }
  REQUIRE(nftest::bytes_equal(a.cloud, b.cloud));

  nftest::TempDir dir("synth_det");
  write_scene(dir.path / "a", a);
  write_scene(dir.path / "b", b);
  CHECK(dirs_byte_equal(dir.path / "a" / a.id, dir.path / "b" / b.id));

  const SceneSequence c = generate_synthetic_scene(small_cfg("two-blob", 18));
  CHECK_FALSE(nftest::bytes_equal(a.frames[0].image, c.frames[0].image));
}

TEST_CASE("depth rasters match fresh analytic raycasts") {
  for (const std::string kind : {"textured-sphere", "textured-box", "two-blob"}) {
    const SynthConfig cfg = small_cfg(kind, 9, 2);
    const SceneSequence seq = generate_synthetic_scene(cfg);
    const SceneGeometry geo = make_scene_geometry(kind, cfg.seed);
    for (const SceneFrame& fr : seq.frames) {
      i64 fg = 0;
      for (int r = 0; r < cfg.raster; ++r)
        for (int c = 0; c < cfg.raster; ++c) {
          const i64 i = i64(r) * cfg.raster + c;
          const Ray ray = emit_ray(fr.cam, c, r);
          double t = 0.0;
          const bool hit = geo.raycast(ray.origin, ray.dir, &t);
          REQUIRE((fr.mask.at(i) > 0.5) == hit);
          REQUIRE((fr.depth.at(i) > 0.0) == hit);
          if (hit) {
            REQUIRE(fr.depth.at(i) == double(float(t)));
            ++fg;
          }
        }
      REQUIRE(fg > 20);                              // object visible
      REQUIRE(fg < i64(cfg.raster) * cfg.raster);    // background visible
    }
  }
}

TEST_CASE("ground-truth clouds lie on the surface") {
  for (const std::string kind : {"textured-sphere", "textured-box", "two-blob"}) {
    const SceneSequence seq = generate_synthetic_scene(small_cfg(kind, 5, 1));
    const SceneGeometry geo = make_scene_geometry(kind, 5);
    REQUIRE(seq.cloud.shape[0] >= 128);
    for (i64 i = 0; i < seq.cloud.shape[0]; ++i) {
      const Eigen::Vector3d p(seq.cloud.at(i * 3), seq.cloud.at(i * 3 + 1),
                              seq.cloud.at(i * 3 + 2));
      REQUIRE(std::abs(geo.sdf(p)) <= 1e-9);
    }
  }
}

TEST_CASE("normalization zeroes the centroid and unitizes the spread") {
  SceneSequence seq = generate_synthetic_scene(small_cfg("textured-box", 21));
  // Knock the scene off-center and off-scale first.
  const double k = 3.7;
  const Eigen::Vector3d shift(0.4, -1.2, 2.0);
  for (i64 i = 0; i < seq.cloud.shape[0]; ++i)
    for (i64 c = 0; c < 3; ++c) seq.cloud.at(i * 3 + c) = k * seq.cloud.at(i * 3 + c) + shift[c];
  Eigen::Matrix4d S = Eigen::Matrix4d::Identity();  // x_new = k x_old + shift
  S(0, 0) = S(1, 1) = S(2, 2) = 1.0 / k;
  S.block<3, 1>(0, 3) = -shift / k;
  Eigen::Matrix4d D = Eigen::Matrix4d::Identity();
  D(0, 0) = D(1, 1) = D(2, 2) = k;
  for (SceneFrame& fr : seq.frames) {
    fr.cam.P = D * fr.cam.P * S;
    fr.cam.near *= k;
    fr.cam.far *= k;
    for (i64 i = 0; i < fr.depth.numel(); ++i)
      if (fr.depth.at(i) != 0.0) fr.depth.at(i) = double(float(fr.depth.at(i) * k));
  }

  std::vector<Eigen::Vector3d> world_before;
  std::vector<Projection> proj_before;
  for (i64 i = 0; i < 40; ++i) {
    const Eigen::Vector3d p(seq.cloud.at(i * 3), seq.cloud.at(i * 3 + 1),
                            seq.cloud.at(i * 3 + 2));
    world_before.push_back(p);
    proj_before.push_back(project(seq.frames[0].cam, p));
  }

  const NormalizeResult nr = normalize_scene(seq);
  CHECK(nr.scale > 0.0);

  const i64 p = seq.cloud.shape[0];
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (i64 i = 0; i < p; ++i)
    for (i64 c = 0; c < 3; ++c) centroid[c] += seq.cloud.at(i * 3 + c);
  centroid /= double(p);
  REQUIRE(centroid.norm() <= 1e-10);
  Eigen::Vector3d var = Eigen::Vector3d::Zero();
  for (i64 i = 0; i < p; ++i)
    for (i64 c = 0; c < 3; ++c) {
      const double d = seq.cloud.at(i * 3 + c) - centroid[c];
      var[c] += d * d;
    }
  var /= double(p);
  REQUIRE(std::abs((std::sqrt(var[0]) + std::sqrt(var[1]) + std::sqrt(var[2])) / 3.0 - 1.0) <=
          1e-10);

  // Renders unchanged: identical raster coords, depths divided by the scale.
  for (std::size_t i = 0; i < world_before.size(); ++i) {
    const Eigen::Vector3d pn(seq.cloud.at(i64(i) * 3), seq.cloud.at(i64(i) * 3 + 1),
                             seq.cloud.at(i64(i) * 3 + 2));
    const Projection pr = project(seq.frames[0].cam, pn);
    REQUIRE((pr.u - proj_before[i].u).norm() <= 1e-8);
    REQUIRE(pr.depth == Catch::Approx(proj_before[i].depth / nr.scale).margin(1e-8));
  }

  // Idempotent: a second pass is the identity up to rounding.
  SceneSequence snap;
  snap.cloud = seq.cloud.clone();
  const NormalizeResult nr2 = normalize_scene(seq);
  REQUIRE(nr2.centroid.norm() <= 1e-10);
  REQUIRE(std::abs(nr2.scale - 1.0) <= 1e-10);
  for (i64 i = 0; i < 30; ++i)
    REQUIRE(seq.cloud.at(i) == Catch::Approx(snap.cloud.at(i)).margin(1e-9));
}

TEST_CASE("normalization is invariant to a global scene scale") {
  SceneSequence a = generate_synthetic_scene(small_cfg("textured-sphere", 33, 2));
  SceneSequence b = generate_synthetic_scene(small_cfg("textured-sphere", 33, 2));
  const double k = 5.25;
  Eigen::Matrix4d S = Eigen::Matrix4d::Identity();
  S(0, 0) = S(1, 1) = S(2, 2) = 1.0 / k;
  Eigen::Matrix4d D = Eigen::Matrix4d::Identity();
  D(0, 0) = D(1, 1) = D(2, 2) = k;
  for (i64 i = 0; i < b.cloud.numel(); ++i) b.cloud.at(i) *= k;
  for (SceneFrame& fr : b.frames) {
    fr.cam.P = D * fr.cam.P * S;
    fr.cam.near *= k;
    fr.cam.far *= k;
  }
  normalize_scene(a);
  normalize_scene(b);
  for (i64 i = 0; i < 60; ++i)
    REQUIRE(a.cloud.at(i) == Catch::Approx(b.cloud.at(i)).margin(1e-9));
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      REQUIRE(a.frames[0].cam.P(r, c) ==
              Catch::Approx(b.frames[0].cam.P(r, c)).margin(1e-8 * (1 + std::abs(a.frames[0].cam.P(r, c)))));
}

TEST_CASE("normalization rejects degenerate scenes") {
  SceneSequence seq = generate_synthetic_scene(small_cfg("textured-sphere", 2, 1));
  seq.cloud = Tensor{};
  CHECK_THROWS_AS(normalize_scene(seq), nf::error);

  SceneSequence flat = generate_synthetic_scene(small_cfg("textured-sphere", 2, 1));
  flat.cloud = Tensor::full(Shape{64, 3}, 0.25);  // all points identical
  CHECK_THROWS_AS(normalize_scene(flat), nf::error);
}

TEST_CASE("splits carve sequences 9:1 per category and frames 80/20") {
  std::vector<SeqMeta> seqs;
  for (int i = 0; i < 10; ++i) seqs.push_back({"sph-" + std::to_string(i), "sphere", 100});
  for (int i = 0; i < 20; ++i) seqs.push_back({"box-" + std::to_string(i), "box", 40});
  const Splits sp = make_splits(seqs, 7);

  i64 sphere_test = 0, box_test = 0;
  for (const std::string& id : sp.test_seqs) (sp.category.at(id) == "sphere" ? sphere_test : box_test)++;
  CHECK(sphere_test == 1);
  CHECK(box_test == 2);
  CHECK(sp.train_seqs.size() + sp.test_seqs.size() == 30);

  for (const SeqMeta& m : seqs) {
    const auto& known = sp.known.at(m.id);
    const auto& unseen = sp.unseen.at(m.id);
    CHECK(i64(known.size()) == (m.n_frames == 100 ? 80 : 32));
    CHECK(i64(unseen.size()) == (m.n_frames == 100 ? 20 : 8));
    std::set<i64> all(known.begin(), known.end());
    all.insert(unseen.begin(), unseen.end());
    REQUIRE(i64(all.size()) == m.n_frames);  // disjoint and exhaustive
    REQUIRE(*all.begin() == 0);
    REQUIRE(*all.rbegin() == m.n_frames - 1);
  }

  // Deterministic in the seed, independent of input order.
  std::vector<SeqMeta> reversed(seqs.rbegin(), seqs.rend());
  const Splits sp2 = make_splits(reversed, 7);
  CHECK(sp2.train_seqs == sp.train_seqs);
  CHECK(sp2.test_seqs == sp.test_seqs);
  CHECK(sp2.known == sp.known);
  const Splits sp3 = make_splits(seqs, 8);
  CHECK(sp3.test_seqs != sp.test_seqs);

  // Fewer than 10 sequences: the smaller split takes the floor (none).
  std::vector<SeqMeta> few;
  for (int i = 0; i < 7; ++i) few.push_back({"s" + std::to_string(i), "sphere", 10});
  const Splits spf = make_splits(few, 1);
  CHECK(spf.test_seqs.empty());
  CHECK(spf.train_seqs.size() == 7);
  CHECK(spf.known.at("s0").size() == 8);
  CHECK(spf.unseen.at("s0").size() == 2);
}

TEST_CASE("batch sampling draws valid targets and sources") {
  std::vector<SeqMeta> seqs;
  for (int i = 0; i < 12; ++i) seqs.push_back({"seq-" + std::to_string(i), "sphere", 25});
  const Splits sp = make_splits(seqs, 3);

  Rng rng(1001);
  std::map<int, i64> hist;
  for (int trial = 0; trial < 10000; ++trial) {
    const EvalSet set = trial % 2 == 0 ? EvalSet::train_known : EvalSet::train_unseen;
    const BatchSample b = sample_batch(sp, set, rng);
    const auto& pool = trial % 2 == 0 ? sp.known.at(b.seq) : sp.unseen.at(b.seq);
    REQUIRE(std::count(pool.begin(), pool.end(), b.target) == 1);
    REQUIRE(std::count(sp.train_seqs.begin(), sp.train_seqs.end(), b.seq) == 1);
    std::set<i64> src(b.sources.begin(), b.sources.end());
    REQUIRE(src.size() == b.sources.size());  // no repeats
    REQUIRE(src.count(b.target) == 0);        // never the target
    for (i64 s : b.sources)
      REQUIRE(std::count(sp.known.at(b.seq).begin(), sp.known.at(b.seq).end(), s) == 1);
    REQUIRE_FALSE(b.capped);  // 20 known frames always suffice for 9 sources
    REQUIRE(i64(b.sources.size()) == b.n_src_requested);
    hist[b.n_src_requested]++;
  }
  // [DERIVED] requested source counts are uniform over {1,3,5,7,9}.
  double tv = 0.0;
  for (int n : {1, 3, 5, 7, 9}) tv += std::abs(double(hist[n]) / 10000.0 - 0.2);
  CHECK(tv / 2.0 <= 0.02);

  // Deterministic per seed.
  Rng ra(5), rb(5);
  for (int i = 0; i < 50; ++i) {
    const BatchSample x = sample_batch(sp, EvalSet::train_known, ra);
    const BatchSample y = sample_batch(sp, EvalSet::train_known, rb);
    REQUIRE(x.seq == y.seq);
    REQUIRE(x.target == y.target);
    REQUIRE(x.sources == y.sources);
  }
}

TEST_CASE("batch sampling caps the source count when frames run short") {
  std::vector<SeqMeta> seqs = {{"tiny", "sphere", 4}};  // 4 known, 0 unseen
  const Splits sp = make_splits(seqs, 1);
  REQUIRE(sp.known.at("tiny").size() == 4);
  Rng rng(2);
  bool saw_capped = false;
  for (int i = 0; i < 200; ++i) {
    const BatchSample b = sample_batch(sp, EvalSet::train_known, rng);
    REQUIRE(i64(b.sources.size()) == std::min<i64>(b.n_src_requested, 3));
    if (b.capped) {
      REQUIRE(b.n_src_requested > 3);
      saw_capped = true;
    }
  }
  CHECK(saw_capped);
}

TEST_CASE("manifest round-trips byte-exactly") {
  nftest::TempDir dir("manifest");
  const SceneSequence seq = generate_synthetic_scene(small_cfg("textured-box", 11));
  const std::filesystem::path d1 = write_scene(dir.path / "first", seq);
  const SceneSequence back = read_scene(d1);

  REQUIRE(back.id == seq.id);
  REQUIRE(back.category == seq.category);
  REQUIRE(back.frames.size() == seq.frames.size());
  for (std::size_t k = 0; k < seq.frames.size(); ++k) {
    REQUIRE(nftest::bytes_equal(back.frames[k].image, seq.frames[k].image));
    REQUIRE(nftest::bytes_equal(back.frames[k].mask, seq.frames[k].mask));
    REQUIRE(nftest::bytes_equal(back.frames[k].depth, seq.frames[k].depth));
    REQUIRE(back.frames[k].cam.P == seq.frames[k].cam.P);
    REQUIRE(back.frames[k].cam.near == seq.frames[k].cam.near);
    REQUIRE(back.frames[k].cam.far == seq.frames[k].cam.far);
  }
  REQUIRE(nftest::bytes_equal(back.cloud, seq.cloud));

  const std::filesystem::path d2 = write_scene(dir.path / "second", back);
  CHECK(dirs_byte_equal(d1, d2));

  const auto dirs = list_scene_dirs(dir.path / "first");
  REQUIRE(dirs.size() == 1);
  CHECK(dirs[0] == d1);
}

TEST_CASE("manifest reader rejects corrupted inputs") {
  nftest::TempDir dir("manifest_bad");
  const SceneSequence seq = generate_synthetic_scene(small_cfg("textured-sphere", 1, 2));
  const std::filesystem::path d = write_scene(dir.path, seq);

  {  // bump the version
    std::string idx = nftest::read_file(d / "index.txt");
    idx.replace(idx.find("format_version=1"), 16, "format_version=9");
    std::ofstream out(d / "index.txt", std::ios::binary | std::ios::trunc);
    out << idx;
  }
  try {
    read_scene(d);
    FAIL("expected a version rejection");
  } catch (const nf::error& e) {
    CHECK(std::string(e.what()).find("format version") != std::string::npos);
  }
  {  // restore, then drop a frame file
    write_scene(dir.path, seq);
    std::filesystem::remove(d / "frame_0001.ppm");
  }
  CHECK_THROWS_AS(read_scene(d), nf::error);

  {  // restore, then truncate the cloud
    write_scene(dir.path, seq);
    const std::string cloud = nftest::read_file(d / "cloud.txt");
    std::ofstream out(d / "cloud.txt", std::ios::binary | std::ios::trunc);
    out.write(cloud.data(), std::streamsize(cloud.size() / 2));
  }
  CHECK_THROWS_AS(read_scene(d), nf::error);
}

TEST_CASE("EA-rendering the oracle opaque field reproduces masks and depths") {
  // Module invariant tying generation, cameras, and the raymarcher together.
  const SynthConfig cfg = small_cfg("textured-sphere", 13, 1, 24);
  const SceneSequence seq = generate_synthetic_scene(cfg);
  const SceneGeometry geo = make_scene_geometry(cfg.kind, cfg.seed);
  const SceneFrame& fr = seq.frames[0];

  FieldEval oracle = [&](Tape& t, const Tensor& points, const Tensor&) {
    const i64 n = points.shape[0];
    Tensor op = Tensor::zeros(Shape{n, 1});
    for (i64 i = 0; i < n; ++i) {
      const Eigen::Vector3d x(points.at(i * 3), points.at(i * 3 + 1), points.at(i * 3 + 2));
      if (geo.sdf(x) <= 0.0) op.at(i) = 1e4;
    }
    return std::make_pair(t.constant(std::move(op)),
                          t.constant(Tensor::full(Shape{n, 3}, 0.5)));
  };

  std::vector<Ray> rays;
  for (int r = 0; r < 24; ++r)
    for (int c = 0; c < 24; ++c) rays.push_back(emit_ray(fr.cam, c, r));

  EaRenderConfig rc;
  rc.n_coarse = 32;
  rc.n_fine = 0;
  Rng rng(55);
  Tape tape;
  const EaRender render = ea_render(tape, oracle, rays, rc, rng);

  i64 inter = 0, uni = 0;
  double depth_err = 0.0;
  i64 depth_n = 0;
  const double bound = 2.0 * (fr.cam.far - fr.cam.near) / double(rc.n_coarse);
  for (i64 i = 0; i < 24 * 24; ++i) {
    const bool pred = tape.value(render.fine.alpha).at(i) > 0.5;
    const bool truth = fr.mask.at(i) > 0.5;
    inter += (pred && truth) ? 1 : 0;
    uni += (pred || truth) ? 1 : 0;
    if (pred && truth) {
      depth_err += std::abs(render.fine.depth[std::size_t(i)] - fr.depth.at(i));
      ++depth_n;
    }
  }
  REQUIRE(uni > 0);
  const double iou = double(inter) / double(uni);
  INFO("iou=" << iou << " depth_l1=" << depth_err / double(std::max<i64>(depth_n, 1)));
  CHECK(iou >= 0.98);
  REQUIRE(depth_n > 0);
  CHECK(depth_err / double(depth_n) <= bound);
}
