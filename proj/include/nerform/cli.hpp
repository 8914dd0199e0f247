#pragma once

// Operator surface: scene synthesis, training, single-view rendering,
// evaluation, and camera-difficulty inspection.  Every subcommand takes the
// same flag set, draws all randomness from one master seed, owns its output
// directory through a lock, and echoes the effective configuration there.

#include <deque>
#include <filesystem>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "nerform/config.hpp"
#include "nerform/image_io.hpp"
#include "nerform/parallel.hpp"
#include "nerform/train.hpp"

namespace nf {

inline const char* cli_usage() {
  return
      "usage: nerform <subcommand> [flags]\n"
      "\n"
      "subcommands:\n"
      "  synth     generate procedural scene sequences\n"
      "  train     fit a model on a scene set\n"
      "  render    render one view from a checkpoint\n"
      "  eval      run the evaluation protocol on held-out views\n"
      "  camdist   camera-distance matrix and difficulty bins for a sequence\n"
      "\n"
      "flags:\n"
      "  --config PATH   load key=value settings (repeatable, applied in order)\n"
      "  --set K=V       override one setting (repeatable)\n"
      "  --seed N        master seed        (same as --set seed=N)\n"
      "  --out DIR       output directory   (same as --set out=DIR)\n"
      "  --threads N     worker threads     (same as --set threads=N)\n"
      "  --attention     export per-source attention maps from render\n"
      "\n"
      "The full setting list with effective values is echoed to config.cfg in\n"
      "the output directory; that file reproduces the run when passed back\n"
      "via --config.  Exit status: 0 success, 1 usage error, 2 runtime failure.\n";
}

struct CliArgs {
  std::string subcommand;
  std::vector<std::filesystem::path> configs;
  std::vector<std::pair<std::string, std::string>> sets;  // applied in order
};

namespace detail {

inline std::string flag_value(int argc, char** argv, int& i, const std::string& flag) {
  if (i + 1 >= argc) throw usage_error("flag '" + flag + "' expects a value");
  return argv[++i];
}

// One process owns one output directory for the duration of a run.
struct DirLock {
  std::filesystem::path lock;

  explicit DirLock(const std::filesystem::path& out) {
    std::filesystem::create_directories(out);
    lock = out / ".lock";
    std::error_code ec;
    const bool created = std::filesystem::create_directory(lock, ec);
    NF_CHECK(created && !ec,
             "output directory '" << out.string() << "' is locked by another run");
  }
  ~DirLock() {
    std::error_code ec;
    std::filesystem::remove(lock, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;
};

struct SceneSet {
  std::deque<SceneSequence> storage;  // stable addresses for the map
  SceneMap map;
  std::vector<SeqMeta> metas;
};

inline SceneSet load_scene_set(const std::filesystem::path& root) {
  NF_CHECK(std::filesystem::exists(root),
           "scene directory '" << root.string() << "' does not exist");
  const std::vector<std::filesystem::path> dirs = list_scene_dirs(root);
  NF_CHECK(!dirs.empty(), "no scene directories under '" << root.string() << "'");
  SceneSet out;
  for (const std::filesystem::path& d : dirs) {
    out.storage.push_back(read_scene(d));
    const SceneSequence& s = out.storage.back();
    out.map[s.id] = &s;
    out.metas.push_back(SeqMeta{s.id, s.category, i64(s.frames.size())});
  }
  return out;
}

inline std::filesystem::path need_out(const RunConfig& c) {
  if (c.str("out").empty()) throw usage_error("this subcommand needs an output directory (--out DIR)");
  return c.str("out");
}

inline std::filesystem::path need_path(const RunConfig& c, const std::string& key,
                                       const std::string& what) {
  if (c.str(key).empty())
    throw usage_error("this subcommand needs " + what + " (--set " + key + "=...)");
  return c.str(key);
}

inline std::vector<i64> parse_sources(const std::string& s) {
  std::vector<i64> out;
  std::size_t at = 0;
  while (at <= s.size()) {
    const std::size_t comma = std::min(s.find(',', at), s.size());
    const std::string tok = trim(s.substr(at, comma - at));
    if (tok.empty()) throw usage_error("config key 'sources': empty entry in '" + s + "'");
    char* end = nullptr;
    const long long v = std::strtoll(tok.c_str(), &end, 10);
    if (end == tok.c_str() || *end != '\0')
      throw usage_error("config key 'sources': cannot parse '" + tok + "' as a frame index");
    out.push_back(i64(v));
    at = comma + 1;
    if (comma == s.size()) break;
  }
  if (out.empty()) throw usage_error("config key 'sources': no source frames given");
  return out;
}

inline std::string pad3(i64 k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03lld", static_cast<long long>(k));
  return buf;
}

}  // namespace detail

inline int cmd_synth(RunConfig& c) {
  const std::filesystem::path out = detail::need_out(c);
  detail::DirLock lock(out);
  c.echo(out / "config.cfg");

  const std::uint64_t seed = c.getu("seed");
  const i64 n_seqs = c.geti("n_seqs");
  NF_CHECK(n_seqs >= 1, "n_seqs must be >= 1");
  const Rng master(seed);
  for (i64 k = 0; k < n_seqs; ++k) {
    SynthConfig sc;
    sc.kind = c.str("kind");
    sc.n_frames = int(c.geti("n_frames"));
    sc.raster = int(c.geti("raster"));
    sc.orbit_radius = c.getd("orbit_radius");
    sc.orbit_elevation = c.getd("orbit_elevation");
    sc.cloud_points = c.geti("cloud_points");
    sc.seed = master.fork("seq/" + std::to_string(k)).next_u64();
    sc.id = sc.kind + "-s" + std::to_string(seed) + "-" + detail::pad3(k);
    SceneSequence seq = generate_synthetic_scene(sc);
    if (c.getb("normalize")) normalize_scene(seq);
    write_scene(out, seq);
  }
  std::cout << "wrote " << n_seqs << " sequence(s) to " << out.string() << "\n";
  return 0;
}

inline int cmd_train(RunConfig& c) {
  const std::filesystem::path out = detail::need_out(c);
  const std::filesystem::path scene_root = detail::need_path(c, "scenes", "a scene directory");
  detail::DirLock lock(out);
  c.echo(out / "config.cfg");

  const detail::SceneSet ss = detail::load_scene_set(scene_root);
  const TrainConfig tcfg = train_config_from(c);
  const Splits splits = make_splits(ss.metas, c.getu("split_seed"));

  ParamStore store;
  const FitResult res = fit(store, ss.map, splits, tcfg, out);
  std::cout << "applied " << res.curve.size() << " step(s), skipped " << res.skipped;
  if (!res.curve.empty()) std::cout << ", final loss " << res.curve.back().total;
  std::cout << "\n";
  NF_CHECK(!res.aborted, "training aborted: " << res.abort_reason);
  std::cout << "checkpoint: " << res.checkpoint_path.string() << "\n";
  return 0;
}

inline int cmd_render(RunConfig& c) {
  const std::filesystem::path out = detail::need_out(c);
  const std::filesystem::path scene_root = detail::need_path(c, "scenes", "a scene directory");
  const std::filesystem::path ckpt = detail::need_path(c, "checkpoint", "a checkpoint file");
  const std::string seq_id = detail::need_path(c, "seq", "a sequence id").string();
  detail::DirLock lock(out);
  c.echo(out / "config.cfg");

  NF_CHECK(std::filesystem::exists(ckpt), "checkpoint '" << ckpt.string() << "' does not exist");
  const detail::SceneSet ss = detail::load_scene_set(scene_root);
  const auto it = ss.map.find(seq_id);
  NF_CHECK(it != ss.map.end(),
           "sequence '" << seq_id << "' not found under '" << scene_root.string() << "'");
  const SceneSequence& seq = *it->second;

  const std::vector<i64> sources = detail::parse_sources(c.str("sources"));
  const i64 target = c.geti("target");
  ParamStore store = ParamStore::load(ckpt);
  const TrainConfig tcfg = train_config_from(c);
  const bool attention = c.getb("attention");
  const std::uint64_t vseed = Rng(c.getu("seed")).fork("render").next_u64();

  const ViewRender vr = render_view(store, tcfg, seq, target, sources, vseed, attention);
  write_ppm(out / "rgb.ppm", vr.rgb);
  write_pgm(out / "alpha.pgm", vr.alpha);
  if (!vr.depth.empty()) write_depth(out / "depth.nfdp", vr.depth);
  if (!vr.attention.empty()) {
    const i64 h = vr.attention.shape[0], w = vr.attention.shape[1], s = vr.attention.shape[2];
    for (i64 src = 0; src < s; ++src) {
      Tensor gray = Tensor::zeros(Shape{h, w});
      for (i64 p = 0; p < h * w; ++p) gray.at(p) = vr.attention.at(p * s + src);
      write_pgm(out / ("attention_" + detail::pad3(src) + ".pgm"), gray);
    }
  }

  const Metrics m = view_metrics(vr, seq.frames[std::size_t(target)]);
  std::cout << "rendered frame " << target << " of " << seq_id;
  if (m.has_psnr) std::cout << ", fg psnr " << m.psnr << " dB";
  std::cout << ", iou " << m.iou << "\n";
  return 0;
}

inline int cmd_eval(RunConfig& c) {
  const std::filesystem::path out = detail::need_out(c);
  const std::filesystem::path scene_root = detail::need_path(c, "scenes", "a scene directory");
  const std::filesystem::path ckpt = detail::need_path(c, "checkpoint", "a checkpoint file");
  const std::string set_name = c.str("set");
  if (set_name != "train-unseen" && set_name != "test-unseen")
    throw usage_error("config key 'set': expected train-unseen or test-unseen, got '" + set_name +
                      "'");
  detail::DirLock lock(out);
  c.echo(out / "config.cfg");

  NF_CHECK(std::filesystem::exists(ckpt), "checkpoint '" << ckpt.string() << "' does not exist");
  const detail::SceneSet ss = detail::load_scene_set(scene_root);
  const TrainConfig tcfg = train_config_from(c);
  const Splits splits = make_splits(ss.metas, c.getu("split_seed"));
  ParamStore store = ParamStore::load(ckpt);

  const EvalReport rep = eval_protocol(store, tcfg, ss.map, splits, eval_set_from_name(set_name),
                                       c.geti("n_samples"), c.getu("seed"));
  eval_report_write(out / "report.txt", rep);
  std::cout << "evaluated " << rep.samples.size() << " sample(s): mean fg psnr "
            << rep.overall.mean_psnr() << " dB, mean iou " << rep.overall.mean_iou() << "\n";
  return 0;
}

inline int cmd_camdist(RunConfig& c) {
  const std::filesystem::path out = detail::need_out(c);
  const std::filesystem::path scene_root = detail::need_path(c, "scenes", "a scene directory");
  const std::string seq_id = detail::need_path(c, "seq", "a sequence id").string();
  detail::DirLock lock(out);
  c.echo(out / "config.cfg");

  const detail::SceneSet ss = detail::load_scene_set(scene_root);
  const auto it = ss.map.find(seq_id);
  NF_CHECK(it != ss.map.end(),
           "sequence '" << seq_id << "' not found under '" << scene_root.string() << "'");
  const SceneSequence& seq = *it->second;
  const i64 n = i64(seq.frames.size());
  const i64 res = c.geti("grid_res");
  const double extent = c.getd("grid_extent");
  const int threads = int(c.geti("threads"));

  Tensor d = Tensor::zeros(Shape{n, n});
  parallel_for(int(n), threads, [&](int i) {
    for (i64 j = 0; j < n; ++j)
      d.at(i64(i) * n + j) = camera_distance(seq.frames[std::size_t(i)].cam,
                                             seq.frames[std::size_t(j)].cam, res, extent);
  });

  std::ofstream dm(out / "dcam.csv", std::ios::binary);
  NF_CHECK(dm.good(), "cannot open '" << (out / "dcam.csv").string() << "' for writing");
  std::ofstream bm(out / "bins.csv", std::ios::binary);
  NF_CHECK(bm.good(), "cannot open '" << (out / "bins.csv").string() << "' for writing");
  for (i64 i = 0; i < n; ++i) {
    for (i64 j = 0; j < n; ++j) {
      const double v = d.at(i * n + j);
      dm << (j ? "," : "") << nf::detail::fmt_double(v);
      bm << (j ? "," : "") << difficulty_bin_name(difficulty_bin(v));
    }
    dm << "\n";
    bm << "\n";
  }
  NF_CHECK(dm.good() && bm.good(), "write failed under '" << out.string() << "'");
  std::cout << "wrote " << n << "x" << n << " camera-distance matrix to " << out.string() << "\n";
  return 0;
}

inline CliArgs parse_cli(int argc, char** argv) {
  CliArgs a;
  a.subcommand = argv[1];
  for (int i = 2; i < argc; ++i) {
    const std::string f = argv[i];
    if (f == "--config") {
      a.configs.emplace_back(detail::flag_value(argc, argv, i, f));
    } else if (f == "--set") {
      const std::string kv = detail::flag_value(argc, argv, i, f);
      const std::size_t eq = kv.find('=');
      if (eq == std::string::npos)
        throw usage_error("flag --set expects key=value, got '" + kv + "'");
      a.sets.emplace_back(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    } else if (f == "--seed") {
      a.sets.emplace_back("seed", detail::flag_value(argc, argv, i, f));
    } else if (f == "--out") {
      a.sets.emplace_back("out", detail::flag_value(argc, argv, i, f));
    } else if (f == "--threads") {
      a.sets.emplace_back("threads", detail::flag_value(argc, argv, i, f));
    } else if (f == "--attention") {
      a.sets.emplace_back("attention", "true");
    } else {
      throw usage_error("unknown flag '" + f + "'");
    }
  }
  return a;
}

inline int cli_main(int argc, char** argv) {
  try {
    if (argc < 2) throw usage_error("missing subcommand");
    const std::string sub = argv[1];
    if (sub == "--help" || sub == "-h" || sub == "help") {
      std::cout << cli_usage();
      return 0;
    }
    const CliArgs a = parse_cli(argc, argv);
    RunConfig c = default_run_config();
    for (const std::filesystem::path& p : a.configs) c.load_file(p);
    for (const auto& [k, v] : a.sets) c.set(k, v);

    if (sub == "synth") return cmd_synth(c);
    if (sub == "train") return cmd_train(c);
    if (sub == "render") return cmd_render(c);
    if (sub == "eval") return cmd_eval(c);
    if (sub == "camdist") return cmd_camdist(c);
    throw usage_error("unknown subcommand '" + sub + "'");
  } catch (const usage_error& e) {
    std::cerr << "error: " << e.what() << "\n\n" << cli_usage();
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace nf
