#pragma once

// Transformer renderer trunk: alternating transformer-encoder layers over the
// source dimension and the ray-sample dimension of the per-ray feature
// tensor, terminated by a softmax pooling head over sources and small
// opacity/color heads.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nerform/embedding.hpp"
#include "nerform/fields.hpp"
#include "nerform/tape.hpp"
#include "nerform/wce.hpp"

namespace nf {

struct NerformerConfig {
  i64 d_model = 80;   // trunk width after the input projection
  int n_pairs = 2;    // number of (source-dim, ray-dim) layer pairs
  int n_heads = 4;
  i64 d_ff = 160;     // hidden width of the per-layer MLP
  PeConfig pe_dir{4, true};  // direction embedding fed to the color head

  void validate() const {
    NF_CHECK(d_model > 0 && n_pairs > 0 && n_heads > 0 && d_ff > 0, "bad transformer config");
    NF_CHECK(d_model % n_heads == 0,
             "d_model " << d_model << " not divisible by " << n_heads << " heads");
  }
};

class Nerformer {
 public:
  NerformerConfig cfg;
  std::string prefix = "nerformer";

  Nerformer() = default;
  explicit Nerformer(NerformerConfig c, std::string pfx = "nerformer")
      : cfg(std::move(c)), prefix(std::move(pfx)) {}

  struct Out {
    Var opacity;                       // [N, 1], empty samples forced to 0
    Var rgb;                           // [N, 3]
    Var omega;                         // [N, S] pooling weights
    std::vector<std::uint8_t> empty;   // per-sample: no valid source at all
  };

  // One transformer-encoder layer over dimension `dim` of a [N, S, D] tensor
  // (1 = source/pooling dimension, 0 = ray dimension):
  // z' = LN(MHA(z) + z); out = LN(MLP(z') + z').  When attending over the
  // source dimension, invalid columns are zeroed on entry and masked out of
  // every attention row (probability exactly zero).  With n_rays > 1 the N
  // rows are the concatenated samples of n_rays rays and ray-dimension
  // attention stays confined to each ray's own samples.
  Var te_layer(Tape& tape, TapeParams& tp, ParamStore& store, const Rng& init_rng,
               const std::string& name, Var z, int dim,
               const std::vector<std::uint8_t>* validity = nullptr, i64 n_rays = 1) const {
    const Shape& s = z.shape();
    NF_CHECK(s.rank == 3, "te_layer expects [N,S,D], got " << s.str());
    NF_CHECK(dim == 0 || dim == 1, "te_layer dim must be 0 (ray) or 1 (source)");
    const i64 n = s[0], ns = s[1], d = s[2];
    NF_CHECK(d == cfg.d_model, "channel width " << d << " != d_model " << cfg.d_model);
    NF_CHECK(n_rays >= 1 && n % n_rays == 0,
             "row count " << n << " is not divisible into " << n_rays << " rays");
    const i64 dh = cfg.d_model / cfg.n_heads;

    std::shared_ptr<std::vector<std::uint8_t>> mask;
    if (dim == 1 && validity) {
      NF_CHECK(i64(validity->size()) == n * ns, "validity size mismatch");
      // zero invalid columns so their (perturbed) contents can never leak
      bool any = false;
      Tensor m3 = Tensor::full(Shape{n, ns, d}, 1.0);
      for (i64 i = 0; i < n * ns; ++i)
        if (!(*validity)[std::size_t(i)]) {
          any = true;
          for (i64 c = 0; c < d; ++c) m3.at(i * d + c) = 0.0;
        }
      if (any) z = tape.mul(z, tape.constant(std::move(m3)));
      mask = std::make_shared<std::vector<std::uint8_t>>(*validity);
    }

    // batch over the untouched dimensions: x3 is [B, T, D]
    const bool over_source = dim == 1;
    const i64 n_per = n / n_rays;
    Var x3;
    if (over_source) {
      x3 = z;
    } else if (n_rays == 1) {
      x3 = tape.permute(z, {1, 0, 2}, 3);
    } else {
      Var x4 = tape.permute(tape.reshape(z, Shape{n_rays, n_per, ns, d}), {0, 2, 1, 3}, 4);
      x3 = tape.reshape(x4, Shape{n_rays * ns, n_per, d});
    }
    const i64 b = over_source ? n : ns * n_rays;
    const i64 t = over_source ? ns : n_per;

    Var xf = tape.reshape(x3, Shape{b * t, d});
    Var q = dense(tape, tp, store, init_rng, name + "/wq", xf, d, d);
    Var k = dense(tape, tp, store, init_rng, name + "/wk", xf, d, d);
    Var v = dense(tape, tp, store, init_rng, name + "/wv", xf, d, d);

    std::vector<Var> head_outs;
    for (int h = 0; h < cfg.n_heads; ++h) {
      Var qh = tape.reshape(tape.slice(q, 1, h * dh, dh), Shape{b, t, dh});
      Var kh = tape.reshape(tape.slice(k, 1, h * dh, dh), Shape{b, t, dh});
      Var vh = tape.reshape(tape.slice(v, 1, h * dh, dh), Shape{b, t, dh});
      Var logits = tape.scale(tape.matmul(qh, kh, false, true), 1.0 / std::sqrt(double(dh)));
      Var probs = tape.softmax(logits, mask, /*rows_per_group=*/t);
      head_outs.push_back(tape.reshape(tape.matmul(probs, vh), Shape{b * t, dh}));
    }
    Var attn = dense(tape, tp, store, init_rng, name + "/wo",
                     head_outs.size() == 1 ? head_outs[0] : tape.concat(head_outs, 1), d, d);

    Var h1 = ln(tape, tp, store, name + "/ln1", tape.add(xf, attn));
    Var m = dense(tape, tp, store, init_rng, name + "/mlp1",
                  tape.relu(dense(tape, tp, store, init_rng, name + "/mlp0", h1, d, cfg.d_ff)),
                  cfg.d_ff, d);
    Var out = ln(tape, tp, store, name + "/ln2", tape.add(h1, m));

    Var o3 = tape.reshape(out, Shape{b, t, d});
    if (over_source) return o3;
    if (n_rays == 1) return tape.permute(o3, {1, 0, 2}, 3);
    Var o4 = tape.permute(tape.reshape(o3, Shape{n_rays, ns, n_per, d}), {0, 2, 1, 3}, 4);
    return tape.reshape(o4, Shape{n, ns, d});
  }

  // Full evaluation of a per-ray feature tensor.  dirs is [N, 3] (the view
  // direction of each ray sample, treated as constant input).  Pass n_rays
  // when the N rows stack several rays' samples back to back; source
  // attention and pooling are row-wise anyway, and ray attention is then
  // restricted to each ray's own block of rows.
  Out eval(Tape& tape, TapeParams& tp, ParamStore& store, const Rng& init_rng,
           const RayFeatureTensor& rt, const Tensor& dirs, i64 n_rays = 1) const {
    cfg.validate();
    const i64 n = rt.n_samples, ns = rt.n_src, c = rt.channels;
    NF_CHECK(rt.z.valid() && rt.z.tape == &tape, "ray tensor lives on a different tape");
    NF_CHECK((rt.z.shape() == Shape{n, ns, c}), "ray tensor shape mismatch");
    NF_CHECK((dirs.shape == Shape{n, 3}), "dirs must be [N,3], got " << dirs.shape.str());

    // learned input projection to the trunk width
    Var flat = tape.reshape(rt.z, Shape{n * ns, c});
    Var x = tape.reshape(dense(tape, tp, store, init_rng, prefix + "/inproj", flat, c, cfg.d_model),
                         Shape{n, ns, cfg.d_model});

    for (int l = 0; l < cfg.n_pairs; ++l) {
      const std::string base = prefix + "/pair" + std::to_string(l);
      x = te_layer(tape, tp, store, init_rng, base + "/src", x, 1, &rt.validity);
      x = te_layer(tape, tp, store, init_rng, base + "/ray", x, 0, nullptr, n_rays);
    }

    // softmax pooling over sources, invalid sources weighted exactly zero
    Var xflat = tape.reshape(x, Shape{n * ns, cfg.d_model});
    Var pool_logits =
        tape.reshape(dense(tape, tp, store, init_rng, prefix + "/pool", xflat, cfg.d_model, 1),
                     Shape{n, ns});
    auto mask = std::make_shared<std::vector<std::uint8_t>>(rt.validity);
    Var omega = tape.softmax(pool_logits, mask, /*rows_per_group=*/1);
    Var pooled = tape.reshape(tape.matmul(tape.reshape(omega, Shape{n, 1, ns}), x),
                              Shape{n, cfg.d_model});

    Out out;
    out.omega = omega;
    out.empty.assign(std::size_t(n), 1);
    for (i64 j = 0; j < n; ++j)
      for (i64 i = 0; i < ns; ++i)
        if (rt.validity[std::size_t(j * ns + i)]) {
          out.empty[std::size_t(j)] = 0;
          break;
        }

    Var op = tape.softplus(
        dense(tape, tp, store, init_rng, prefix + "/opacity", pooled, cfg.d_model, 1));
    bool any_empty = false;
    Tensor live = Tensor::full(Shape{n, 1}, 1.0);
    for (i64 j = 0; j < n; ++j)
      if (out.empty[std::size_t(j)]) {
        live.at(j) = 0.0;
        any_empty = true;
      }
    out.opacity = any_empty ? tape.mul(op, tape.constant(std::move(live))) : op;

    Var color_in =
        tape.concat({pooled, tape.constant(positional_embed_batch(dirs, cfg.pe_dir))}, 1);
    out.rgb = tape.sigmoid(dense(tape, tp, store, init_rng, prefix + "/color", color_in,
                                 cfg.d_model + cfg.pe_dir.dim(3), 3));
    return out;
  }

 private:
  // get-or-create layer-norm gain/bias and apply
  static Var ln(Tape& tape, TapeParams& tp, ParamStore& store, const std::string& name, Var x) {
    const std::string gn = name + "/g", bn = name + "/b";
    if (!store.contains(gn)) {
      store.create(gn, Tensor::full(Shape{x.shape()[1]}, 1.0));
      store.create(bn, Tensor::zeros(Shape{x.shape()[1]}));
    }
    return tape.layer_norm(x, tp[gn], tp[bn]);
  }
};

}  // namespace nf
