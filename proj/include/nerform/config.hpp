#pragma once

// Plain-text key=value run configuration: a single declared key set with
// defaults, overridden by a config file and then by command-line settings.
// Unknown keys and malformed values are usage errors; the effective
// configuration echoes back out as a file that reproduces the run.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "nerform/check.hpp"
#include "nerform/train.hpp"

namespace nf {

// Operator mistakes (bad flags, unknown keys, unparsable values): exit 1,
// as opposed to nf::error runtime failures: exit 2.
struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace detail

class RunConfig {
 public:
  void declare(const std::string& key, std::string def) {
    NF_CHECK(!values_.count(key), "config key '" << key << "' declared twice");
    values_[key] = std::move(def);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  void set(const std::string& key, std::string value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw usage_error("unknown config key '" + key + "'");
    it->second = std::move(value);
  }

  // "key = value" lines; blank lines and lines starting with '#' are skipped.
  void load_file(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in.good()) throw usage_error("cannot read config file '" + p.string() + "'");
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string t = detail::trim(line);
      if (t.empty() || t[0] == '#') continue;
      const std::size_t eq = t.find('=');
      if (eq == std::string::npos)
        throw usage_error(p.string() + ":" + std::to_string(lineno) + ": expected key=value");
      set(detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
    }
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    NF_CHECK(it != values_.end(), "config key '" << key << "' was never declared");
    return it->second;
  }

  i64 geti(const std::string& key) const {
    const std::string& v = str(key);
    char* end = nullptr;
    const long long r = std::strtoll(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0')
      throw usage_error("config key '" + key + "': cannot parse '" + v + "' as an integer");
    return i64(r);
  }

  std::uint64_t getu(const std::string& key) const {
    const std::string& v = str(key);
    char* end = nullptr;
    const unsigned long long r = std::strtoull(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0')
      throw usage_error("config key '" + key + "': cannot parse '" + v + "' as an unsigned integer");
    return std::uint64_t(r);
  }

  double getd(const std::string& key) const {
    const std::string& v = str(key);
    char* end = nullptr;
    const double r = std::strtod(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0')
      throw usage_error("config key '" + key + "': cannot parse '" + v + "' as a number");
    return r;
  }

  bool getb(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw usage_error("config key '" + key + "': expected true/false, got '" + v + "'");
  }

  // Every declared key with its effective value, in name order.  The output
  // directory is run-local (a re-run needs a fresh one anyway), so it is the
  // one key left out; this keeps fixed-seed runs byte-identical.
  void echo(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    NF_CHECK(out.good(), "cannot open '" << path.string() << "' for writing");
    out << "# nerform config v1 (pass back with --config; out= is run-local and omitted)\n";
    for (const auto& [k, v] : values_)
      if (k != "out") out << k << "=" << v << "\n";
    NF_CHECK(out.good(), "write failed for '" << path.string() << "'");
  }

 private:
  std::map<std::string, std::string> values_;
};

// The full key set shared by every subcommand; each one consumes the subset
// it needs, so a training run's echoed config feeds straight into render and
// eval.
inline RunConfig default_run_config() {
  RunConfig c;
  // common
  c.declare("seed", "0");
  c.declare("threads", "1");
  c.declare("out", "");
  // synth
  c.declare("kind", "textured-sphere");
  c.declare("n_seqs", "1");
  c.declare("n_frames", "20");
  c.declare("raster", "64");
  c.declare("orbit_radius", "2.7");
  c.declare("orbit_elevation", "0.6");
  c.declare("cloud_points", "2048");
  c.declare("normalize", "false");
  // data and splits
  c.declare("scenes", "");
  c.declare("split_seed", "1");
  // model
  c.declare("model", "nerformer");
  c.declare("d_model", "80");
  c.declare("n_pairs", "2");
  c.declare("n_heads", "4");
  c.declare("d_ff", "160");
  c.declare("pe_dir_freq", "4");
  c.declare("rt_pe_pos_freq", "8");
  c.declare("rt_pe_dir_freq", "4");
  c.declare("trunk_layers", "4");
  c.declare("trunk_width", "128");
  c.declare("field_pe_pos_freq", "8");
  c.declare("field_pe_dir_freq", "4");
  c.declare("latent_dim", "32");
  c.declare("ipc_points", "1024");
  c.declare("ipc_epsilon", "0.05");
  c.declare("ipc_latent_dim", "0");
  // raymarcher
  c.declare("n_coarse", "32");
  c.declare("n_fine", "16");
  c.declare("stratified", "true");
  c.declare("white_background", "false");
  // training
  c.declare("steps", "2000");
  c.declare("rays_per_step", "200");
  c.declare("chunk_rays", "32");
  c.declare("eval_chunk_rays", "256");
  c.declare("fixed_n_src", "0");
  c.declare("checkpoint_every", "0");
  c.declare("lr", "5e-4");
  c.declare("beta1", "0.9");
  c.declare("beta2", "0.999");
  c.declare("adam_eps", "1e-8");
  c.declare("lambda_mask", "1.0");
  c.declare("chamfer_weight", "0.05");
  // render
  c.declare("checkpoint", "");
  c.declare("seq", "");
  c.declare("target", "0");
  c.declare("sources", "0");
  c.declare("attention", "false");
  // eval
  c.declare("set", "test-unseen");
  c.declare("n_samples", "100");
  // camera-distance grid
  c.declare("grid_res", "32");
  c.declare("grid_extent", "1.0");
  return c;
}

inline TrainConfig train_config_from(const RunConfig& c) {
  TrainConfig t;
  const std::string& model = c.str("model");
  if (model != "nerformer" && model != "mlp-wce" && model != "mlp-latent" && model != "ipc")
    throw usage_error("config key 'model': unknown model '" + model +
                      "' (expected nerformer, mlp-wce, mlp-latent, or ipc)");
  t.kind = model_kind_from_name(model);
  t.steps = c.geti("steps");
  t.rays_per_step = c.geti("rays_per_step");
  t.chunk_rays = c.geti("chunk_rays");
  t.eval_chunk_rays = c.geti("eval_chunk_rays");
  t.fixed_n_src = c.geti("fixed_n_src");
  t.checkpoint_every = c.geti("checkpoint_every");
  t.seed = c.getu("seed");
  t.lambda_mask = c.getd("lambda_mask");
  t.ipc_chamfer_weight = c.getd("chamfer_weight");
  t.adam.lr = c.getd("lr");
  t.adam.beta1 = c.getd("beta1");
  t.adam.beta2 = c.getd("beta2");
  t.adam.eps = c.getd("adam_eps");
  t.render.n_coarse = int(c.geti("n_coarse"));
  t.render.n_fine = int(c.geti("n_fine"));
  t.render.stratified = c.getb("stratified");
  t.render.white_background = c.getb("white_background");
  t.nerformer.d_model = c.geti("d_model");
  t.nerformer.n_pairs = int(c.geti("n_pairs"));
  t.nerformer.n_heads = int(c.geti("n_heads"));
  t.nerformer.d_ff = c.geti("d_ff");
  t.nerformer.pe_dir = PeConfig{int(c.geti("pe_dir_freq")), true};
  t.ray_tensor.pe_pos = PeConfig{int(c.geti("rt_pe_pos_freq")), true};
  t.ray_tensor.pe_dir = PeConfig{int(c.geti("rt_pe_dir_freq")), true};
  t.field.trunk_layers = int(c.geti("trunk_layers"));
  t.field.trunk_width = int(c.geti("trunk_width"));
  t.field.pe_pos = PeConfig{int(c.geti("field_pe_pos_freq")), true};
  t.field.pe_dir = PeConfig{int(c.geti("field_pe_dir_freq")), true};
  t.latent_dim = c.geti("latent_dim");
  t.ipc.n_points = c.geti("ipc_points");
  t.ipc.epsilon = c.getd("ipc_epsilon");
  t.ipc.latent_dim = int(c.geti("ipc_latent_dim"));
  return t;
}

}  // namespace nf
