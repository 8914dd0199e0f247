#pragma once

// Implicit fields: the baseline MLP opacity/color field, autodecoder latent
// tables, and analytic SDF primitives used by the sphere tracer.

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "nerform/adam.hpp"
#include "nerform/embedding.hpp"
#include "nerform/tape.hpp"

namespace nf {

// Xavier-uniform init with an rng stream forked from the parameter name, so
// values are independent of creation order.
inline Tensor xavier_init(Shape s, i64 fan_in, i64 fan_out, const Rng& base,
                          const std::string& name) {
  Rng rng = base.fork(name);
  const double a = std::sqrt(6.0 / double(fan_in + fan_out));
  return Tensor::uniform(s, rng, -a, a);
}

// Creates (if absent) an affine layer's parameters and applies it.
inline Var dense(Tape& tape, TapeParams& tp, ParamStore& store, const Rng& init_rng,
                 const std::string& name, Var x, i64 in_dim, i64 out_dim) {
  const std::string wn = name + "/w";
  const std::string bn = name + "/b";
  if (!store.contains(wn)) {
    store.create(wn, xavier_init(Shape{in_dim, out_dim}, in_dim, out_dim, init_rng, wn));
    store.create(bn, Tensor::zeros(Shape{out_dim}));
  }
  return tape.affine(x, tp[wn], tp[bn]);
}

struct MlpFieldConfig {
  PeConfig pe_pos{8, true};
  PeConfig pe_dir{4, true};
  int trunk_layers = 4;
  int trunk_width = 128;
  int latent_dim = 0;  // 0 = unconditioned field
  // extra per-point conditioning channels appended to the trunk input
  // (used by the warp-conditioned variant)
  int cond_dim = 0;
};

struct FieldOut {
  Var opacity;   // [T,1], nonnegative (softplus)
  Var rgb;       // [T,3], components in (0,1) (sigmoid)
  Var features;  // trunk features before the heads
};

// f_MLP = heads ∘ trunk: opacity = softplus(head_o(trunk([γ(x); z; cond]))),
// rgb = sigmoid(head_c([trunk; γ(dir)])).
class MlpField {
 public:
  MlpFieldConfig cfg;
  std::string prefix = "field";

  MlpField() = default;
  explicit MlpField(MlpFieldConfig c, std::string pfx = "field")
      : cfg(std::move(c)), prefix(std::move(pfx)) {}

  i64 trunk_in_dim() const { return cfg.pe_pos.dim(3) + cfg.latent_dim + cfg.cond_dim; }

  // Batched evaluation.  points/dirs are [T,3] plain tensors (treated as
  // constants); z is an optional conditioning Var [T, latent_dim]; cond an
  // optional Var [T, cond_dim].  Parameters are created on first use.
  FieldOut eval(Tape& tape, TapeParams& tp, ParamStore& store, const Rng& init_rng,
                const Tensor& points, const Tensor& dirs, Var z = {}, Var cond = {}) const {
    NF_CHECK(points.shape.rank == 2 && points.shape[1] == 3,
             "points must be [T,3], got " << points.shape.str());
    NF_CHECK(dirs.shape.rank == 2 && dirs.shape[1] == 3 && dirs.shape[0] == points.shape[0],
             "dirs must be [T,3] matching points, got " << dirs.shape.str());
    const i64 tcount = points.shape[0];

    std::vector<Var> trunk_parts;
    trunk_parts.push_back(tape.constant(positional_embed_batch(points, cfg.pe_pos)));
    if (cfg.latent_dim > 0) {
      NF_CHECK(z.valid(), "field expects a latent input of dim " << cfg.latent_dim);
      NF_CHECK((z.shape() == Shape{tcount, cfg.latent_dim}),
               "latent shape " << z.shape().str() << " does not match [T," << cfg.latent_dim << "]");
      trunk_parts.push_back(z);
    } else {
      NF_CHECK(!z.valid(), "field is unconditioned but received a latent");
    }
    if (cfg.cond_dim > 0) {
      NF_CHECK(cond.valid(), "field expects conditioning of dim " << cfg.cond_dim);
      NF_CHECK((cond.shape() == Shape{tcount, cfg.cond_dim}), "conditioning shape mismatch");
      trunk_parts.push_back(cond);
    }
    Var h = trunk_parts.size() == 1 ? trunk_parts[0] : tape.concat(trunk_parts, 1);

    i64 in_dim = trunk_in_dim();
    for (int l = 0; l < cfg.trunk_layers; ++l) {
      h = tape.relu(dense(tape, tp, store, init_rng, prefix + "/trunk" + std::to_string(l), h,
                          in_dim, cfg.trunk_width));
      in_dim = cfg.trunk_width;
    }

    FieldOut out;
    out.features = h;
    out.opacity = tape.softplus(
        dense(tape, tp, store, init_rng, prefix + "/opacity", h, cfg.trunk_width, 1));
    Var color_in = tape.concat({h, tape.constant(positional_embed_batch(dirs, cfg.pe_dir))}, 1);
    out.rgb = tape.sigmoid(dense(tape, tp, store, init_rng, prefix + "/color", color_in,
                                 cfg.trunk_width + cfg.pe_dir.dim(3), 3));
    return out;
  }

  // Single-point convenience evaluation (no gradients retained).
  std::pair<double, Eigen::Vector3d> eval_point(ParamStore& store, const Rng& init_rng,
                                                const Eigen::Vector3d& x,
                                                const Eigen::Vector3d& dir,
                                                const std::vector<double>& z = {}) const {
    Tape tape;
    TapeParams tp(tape, store);
    Tensor px = Tensor::from(Shape{1, 3}, {x.x(), x.y(), x.z()});
    Tensor pd = Tensor::from(Shape{1, 3}, {dir.x(), dir.y(), dir.z()});
    Var zv;
    if (cfg.latent_dim > 0) {
      NF_CHECK(i64(z.size()) == cfg.latent_dim,
               "latent size " << z.size() << " != " << cfg.latent_dim);
      zv = tape.constant(Tensor::from(Shape{1, cfg.latent_dim}, z));
    } else {
      NF_CHECK(z.empty(), "field is unconditioned but received a latent");
    }
    FieldOut out = eval(tape, tp, store, init_rng, px, pd, zv);
    const Tensor& rgb = tape.value(out.rgb);
    return {tape.value(out.opacity).at(0), Eigen::Vector3d(rgb.at(0), rgb.at(1), rgb.at(2))};
  }
};

// Autodecoder latent table: one trainable vector per training sequence,
// stored as parameters "latent/<sequence-id>".
struct LatentTable {
  static std::string param_name(const std::string& seq_id) { return "latent/" + seq_id; }

  static void init(ParamStore& store, const std::vector<std::string>& seq_ids, i64 dim,
                   const Rng& init_rng, double stddev = 0.01) {
    for (const std::string& id : seq_ids) {
      const std::string name = param_name(id);
      if (store.contains(name)) {
        NF_CHECK(store.get(name).numel() == dim, "latent dim mismatch for '" << id << "'");
        continue;
      }
      Rng rng = init_rng.fork(name);
      store.create(name, Tensor::normal(Shape{dim}, rng, 0.0, stddev));
    }
  }

  // [T, dim] latent rows for one sequence (same row repeated per token).
  static Var lookup(Tape& tape, TapeParams& tp, const std::string& seq_id, i64 tokens) {
    Var z = tp[param_name(seq_id)];
    const i64 dim = z.shape()[0];
    return tape.repeat(tape.reshape(z, Shape{1, dim}), 0, tokens);
  }
};

// Analytic signed distance fields for sphere-tracer verification.
struct AnalyticSdf {
  enum class Kind { sphere, box };
  Kind kind = Kind::sphere;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double radius = 1.0;                                    // sphere
  Eigen::Vector3d half_extents = Eigen::Vector3d::Ones();  // box

  static AnalyticSdf make_sphere(const Eigen::Vector3d& c, double r) {
    AnalyticSdf s;
    s.kind = Kind::sphere;
    s.center = c;
    s.radius = r;
    return s;
  }
  static AnalyticSdf make_box(const Eigen::Vector3d& c, const Eigen::Vector3d& he) {
    AnalyticSdf s;
    s.kind = Kind::box;
    s.center = c;
    s.half_extents = he;
    return s;
  }

  double eval(const Eigen::Vector3d& x) const {
    switch (kind) {
      case Kind::sphere:
        return (x - center).norm() - radius;
      case Kind::box: {
        const Eigen::Vector3d q = (x - center).cwiseAbs() - half_extents;
        const double outside = q.cwiseMax(0.0).norm();
        const double inside = std::min(q.maxCoeff(), 0.0);
        return outside + inside;
      }
    }
    return 0.0;
  }
};

}  // namespace nf
