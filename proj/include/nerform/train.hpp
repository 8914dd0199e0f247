#pragma once

// Training loop (Adam over sampled ray batches, coarse+fine losses),
// full-view rendering for any model kind, test-time latent inversion with
// plateau learning-rate decay, and the evaluation protocol with per-source-
// count and per-difficulty aggregation.

#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "nerform/adam.hpp"
#include "nerform/fields.hpp"
#include "nerform/ipc.hpp"
#include "nerform/metrics.hpp"
#include "nerform/nerformer.hpp"
#include "nerform/render_ea.hpp"
#include "nerform/scene.hpp"
#include "nerform/wce.hpp"

namespace nf {

enum class ModelKind { nerformer, wce_mlp, latent_mlp, ipc };

inline const char* model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::nerformer: return "nerformer";
    case ModelKind::wce_mlp: return "mlp-wce";
    case ModelKind::latent_mlp: return "mlp-latent";
    case ModelKind::ipc: return "ipc";
  }
  return "?";
}

inline ModelKind model_kind_from_name(const std::string& s) {
  if (s == "nerformer") return ModelKind::nerformer;
  if (s == "mlp-wce") return ModelKind::wce_mlp;
  if (s == "mlp-latent") return ModelKind::latent_mlp;
  if (s == "ipc") return ModelKind::ipc;
  NF_CHECK(false, "unknown model kind '" << s
                  << "' (expected nerformer, mlp-wce, mlp-latent, or ipc)");
  return ModelKind::nerformer;
}

struct TrainConfig {
  ModelKind kind = ModelKind::nerformer;
  i64 steps = 2000;
  i64 rays_per_step = 200;
  i64 chunk_rays = 32;        // rays per gradient tape
  i64 eval_chunk_rays = 256;  // rays per forward-only tape
  i64 fixed_n_src = 0;        // 0 = draw n_src from {1,3,5,7,9}
  i64 checkpoint_every = 0;   // 0 = final checkpoint only
  std::uint64_t seed = 0;
  double lambda_mask = 1.0;
  double ipc_chamfer_weight = 0.05;
  AdamConfig adam;
  EaRenderConfig render;
  NerformerConfig nerformer;
  RayTensorConfig ray_tensor;
  MlpFieldConfig field;  // trunk for the mlp-wce / mlp-latent variants
  i64 latent_dim = 32;   // autodecoder code width
  IpcConfig ipc;

  void validate() const {
    NF_CHECK(steps >= 1, "steps must be >= 1");
    NF_CHECK(rays_per_step >= 1 && chunk_rays >= 1 && eval_chunk_rays >= 1,
             "ray counts must be >= 1");
    NF_CHECK(fixed_n_src >= 0 && fixed_n_src <= 9, "fixed_n_src must be in [0,9]");
    NF_CHECK(lambda_mask >= 0.0 && ipc_chamfer_weight >= 0.0, "loss weights must be >= 0");
    render.validate();
    if (kind == ModelKind::nerformer) nerformer.validate();
    if (kind == ModelKind::latent_mlp) NF_CHECK(latent_dim >= 1, "latent_dim must be >= 1");
    if (kind == ModelKind::ipc) ipc.validate();
  }
};

using SceneMap = std::map<std::string, const SceneSequence*>;

namespace detail {

inline std::vector<FeatureGrid> encode_sources(Tape& tape, TapeParams& tp, ParamStore& store,
                                               const Rng& init_rng, const SourceEncoder& enc,
                                               const SceneSequence& seq,
                                               const std::vector<i64>& sources) {
  NF_CHECK(!sources.empty(), "need at least one source view");
  std::vector<FeatureGrid> grids;
  grids.reserve(sources.size());
  for (i64 s : sources) {
    NF_CHECK(s >= 0 && s < i64(seq.frames.size()),
             "source frame " << s << " out of range for sequence '" << seq.id << "'");
    const SceneFrame& f = seq.frames[std::size_t(s)];
    grids.push_back(enc.encode_source(tape, tp, store, init_rng, f.cam, f.image, f.mask));
  }
  return grids;
}

// Encoder grids detached from any tape: values only, safe to sample as
// constants from later tapes.
inline std::vector<FeatureGrid> frozen_grids(ParamStore& store, const Rng& init_rng,
                                             const SceneSequence& seq,
                                             const std::vector<i64>& sources) {
  Tape tape;
  TapeParams tp(tape, store);
  SourceEncoder enc;
  std::vector<FeatureGrid> grids = encode_sources(tape, tp, store, init_rng, enc, seq, sources);
  for (FeatureGrid& g : grids) g.var = Var{};  // grids outlive this tape
  return grids;
}

inline std::vector<i64> sample_pixel_rows(i64 hw, i64 count, Rng& rng) {
  if (count >= hw) {
    std::vector<i64> all(static_cast<std::size_t>(hw));
    for (i64 i = 0; i < hw; ++i) all[std::size_t(i)] = i;
    return all;
  }
  return rng.sample_without_replacement(hw, count);
}

// Rays plus target supervision for a list of row-major pixel indices.
struct PixelBatch {
  std::vector<Ray> rays;
  std::vector<std::pair<int, int>> pixels;  // (col, row)
  Tensor rgb;                               // [R,3]
  Tensor mask;                              // [R]
};

inline PixelBatch pixel_batch(const SceneFrame& fr, const std::vector<i64>& rows) {
  const i64 w = fr.image.shape[1];
  const i64 n = i64(rows.size());
  PixelBatch b;
  b.rays.reserve(rows.size());
  b.pixels.reserve(rows.size());
  b.rgb = Tensor::zeros(Shape{n, 3});
  b.mask = Tensor::zeros(Shape{n});
  for (i64 i = 0; i < n; ++i) {
    const i64 idx = rows[std::size_t(i)];
    const int col = int(idx % w), row = int(idx / w);
    b.rays.push_back(emit_ray(fr.cam, col, row));
    b.pixels.emplace_back(col, row);
    for (i64 c = 0; c < 3; ++c) b.rgb.at(i * 3 + c) = fr.image.at(idx * 3 + c);
    b.mask.at(i) = fr.mask.at(idx);
  }
  return b;
}

inline MlpFieldConfig wce_field_config(const TrainConfig& cfg) {
  MlpFieldConfig fc = cfg.field;
  fc.cond_dim = int(2 * SourceEncoder::out_channels());
  fc.latent_dim = 0;
  return fc;
}

inline MlpFieldConfig latent_field_config(const TrainConfig& cfg) {
  MlpFieldConfig fc = cfg.field;
  fc.cond_dim = 0;
  fc.latent_dim = int(cfg.latent_dim);
  return fc;
}

// Opacity/color field evaluation for the raymarched model kinds.  The N rows
// handed over by the raymarcher stack `n_rays` rays' samples back to back.
struct FieldBuild {
  const TrainConfig* cfg = nullptr;
  ParamStore* store = nullptr;
  TapeParams* tp = nullptr;
  const Rng* init_rng = nullptr;
  const std::vector<FeatureGrid>* grids = nullptr;  // nerformer / mlp-wce
  std::string seq_id;                               // mlp-latent
  i64 n_rays = 1;
  Nerformer::Out* capture = nullptr;  // set to export pooling weights

  std::pair<Var, Var> operator()(Tape& t, const Tensor& pts, const Tensor& dirs) const {
    switch (cfg->kind) {
      case ModelKind::nerformer: {
        std::vector<const FeatureGrid*> gp;
        for (const FeatureGrid& g : *grids) gp.push_back(&g);
        Var pv = t.constant(pts);
        RayFeatureTensor rt = build_ray_tensor_rows(t, gp, pv, dirs, cfg->ray_tensor);
        const Nerformer model(cfg->nerformer);
        Nerformer::Out out = model.eval(t, *tp, *store, *init_rng, rt, dirs, n_rays);
        if (capture) *capture = out;
        return {out.opacity, out.rgb};
      }
      case ModelKind::wce_mlp: {
        Var pv = t.constant(pts);
        const i64 m = pts.shape[0];
        const i64 s = i64(grids->size());
        const i64 c = grids->front().channels();
        std::vector<Var> slabs;
        std::vector<std::uint8_t> validity(std::size_t(m * s), 0);
        for (i64 i = 0; i < s; ++i) {
          const FeatureGrid& g = (*grids)[std::size_t(i)];
          Var gv = g.var.valid() && g.var.tape == &t ? g.var : t.constant(g.values);
          std::vector<std::uint8_t> flags;
          Var zi = sample_wce_on_tape(t, gv, g.cam, pv, &flags);
          for (i64 j = 0; j < m; ++j) validity[std::size_t(j * s + i)] = flags[std::size_t(j)];
          slabs.push_back(t.reshape(zi, Shape{m, 1, c}));
        }
        Var z3 = slabs.size() == 1 ? slabs[0] : t.concat(slabs, 1);
        Var agg = aggregate_wce_on_tape(t, z3, validity);
        const MlpField field(wce_field_config(*cfg));
        FieldOut fo = field.eval(t, *tp, *store, *init_rng, pts, dirs, {}, agg);
        return {fo.opacity, fo.rgb};
      }
      case ModelKind::latent_mlp: {
        const MlpField field(latent_field_config(*cfg));
        Var z = LatentTable::lookup(t, *tp, seq_id, pts.shape[0]);
        FieldOut fo = field.eval(t, *tp, *store, *init_rng, pts, dirs, z);
        return {fo.opacity, fo.rgb};
      }
      case ModelKind::ipc:
        break;
    }
    NF_CHECK(false, "cloud models do not raymarch a field");
    return {};
  }
};

inline void check_grads_finite(const std::map<std::string, Tensor>& grads) {
  for (const auto& [name, g] : grads)
    NF_CHECK(g.all_finite(), "non-finite gradient for '" << name << "'");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// full-view rendering
// ---------------------------------------------------------------------------

struct ViewRender {
  Tensor rgb;        // [H,W,3]
  Tensor alpha;      // [H,W]
  Tensor depth;      // [H,W] expected depth in ray-parameter units; empty for cloud renders
  Tensor attention;  // [H,W,S] per-source pooling weight, only when requested
};

inline ViewRender render_view(ParamStore& store, const TrainConfig& cfg, const SceneSequence& seq,
                              i64 target, const std::vector<i64>& sources, std::uint64_t seed,
                              bool want_attention = false) {
  cfg.validate();
  NF_CHECK(target >= 0 && target < i64(seq.frames.size()),
           "target frame " << target << " out of range for sequence '" << seq.id << "'");
  const SceneFrame& tgt = seq.frames[std::size_t(target)];
  const i64 h = tgt.image.shape[0], w = tgt.image.shape[1], hw = h * w;
  const Rng init_rng = Rng(cfg.seed).fork("init");

  ViewRender out;
  out.rgb = Tensor::zeros(Shape{h, w, 3});
  out.alpha = Tensor::zeros(Shape{h, w});

  if (cfg.kind == ModelKind::ipc) {
    Tape tape;
    TapeParams tp(tape, store);
    const IpcModel model(cfg.ipc);
    Var z;
    if (cfg.ipc.latent_dim > 0) {
      NF_CHECK(store.contains(LatentTable::param_name(seq.id)),
               "no latent code for sequence '" << seq.id << "'; run inversion first");
      z = LatentTable::lookup(tape, tp, seq.id, 1);
    }
    IpcPrediction pred = model.predict(tape, tp, store, init_rng, z);
    IpcRender ir = ipc_render(tape, pred.positions, pred.colors, tgt.cam, cfg.ipc.epsilon);
    const Tensor& rv = tape.value(ir.rgb);
    const Tensor& av = tape.value(ir.alpha);
    for (std::size_t i = 0; i < ir.pixels.size(); ++i) {
      const i64 idx = i64(ir.pixels[i].second) * w + ir.pixels[i].first;
      for (i64 c = 0; c < 3; ++c) out.rgb.at(idx * 3 + c) = rv.at(i64(i) * 3 + c);
      out.alpha.at(idx) = av.at(i64(i));
    }
    return out;
  }

  const bool uses_encoder =
      cfg.kind == ModelKind::nerformer || cfg.kind == ModelKind::wce_mlp;
  std::vector<FeatureGrid> grids;
  if (uses_encoder) {
    grids = detail::frozen_grids(store, init_rng, seq, sources);
  } else {
    NF_CHECK(store.contains(LatentTable::param_name(seq.id)),
             "no latent code for sequence '" << seq.id << "'; run inversion first");
  }
  out.depth = Tensor::zeros(Shape{h, w});
  const bool attention = want_attention && cfg.kind == ModelKind::nerformer;
  if (attention) out.attention = Tensor::zeros(Shape{h, w, i64(sources.size())});

  Rng rng(seed);
  i64 chunk_index = 0;
  for (i64 at = 0; at < hw; at += cfg.eval_chunk_rays, ++chunk_index) {
    const i64 cnt = std::min(cfg.eval_chunk_rays, hw - at);
    std::vector<i64> rows(static_cast<std::size_t>(cnt));
    for (i64 i = 0; i < cnt; ++i) rows[std::size_t(i)] = at + i;
    const detail::PixelBatch pb = detail::pixel_batch(tgt, rows);

    Tape t;
    TapeParams tp(t, store);
    Nerformer::Out captured;
    detail::FieldBuild fb{&cfg,   &store, &tp, &init_rng, uses_encoder ? &grids : nullptr,
                          seq.id, cnt,    attention ? &captured : nullptr};
    Rng crng = rng.fork("chunk/" + std::to_string(chunk_index));
    const EaRender er = ea_render(t, FieldEval(fb), pb.rays, cfg.render, crng);

    const Tensor& rv = t.value(er.fine.rgb);
    const Tensor& av = t.value(er.fine.alpha);
    for (i64 i = 0; i < cnt; ++i) {
      const i64 idx = at + i;
      for (i64 c = 0; c < 3; ++c) out.rgb.at(idx * 3 + c) = rv.at(i * 3 + c);
      out.alpha.at(idx) = av.at(i);
      out.depth.at(idx) = er.fine.depth[std::size_t(i)];
    }
    if (attention) {
      // pixel weight for source s: EA-weighted mean of the pooling weights
      const Tensor& omega = t.value(captured.omega);  // [cnt*N, S]
      const Tensor& ws = t.value(er.fine.weights);    // [cnt, N]
      const i64 n = er.fine.n_samples(), ns = i64(sources.size());
      for (i64 i = 0; i < cnt; ++i) {
        double wsum = 0.0;
        for (i64 k = 0; k < n; ++k) wsum += ws.at(i * n + k);
        const double inv = wsum > 1e-10 ? 1.0 / wsum : 0.0;
        for (i64 s = 0; s < ns; ++s) {
          double acc = 0.0;
          for (i64 k = 0; k < n; ++k) acc += ws.at(i * n + k) * omega.at((i * n + k) * ns + s);
          out.attention.at((at + i) * ns + s) = acc * inv;
        }
      }
    }
  }
  return out;
}

inline Metrics view_metrics(const ViewRender& vr, const SceneFrame& gt) {
  std::vector<double> pd;
  if (!vr.depth.empty())
    pd.assign(vr.depth.ptr(), vr.depth.ptr() + vr.depth.numel());
  return metrics_eval(vr.rgb, vr.alpha, pd, gt.image, gt.mask, gt.depth);
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct LossRow {
  i64 step = 0;
  double rgb_mse = 0.0;
  double mask_bce = 0.0;
  double total = 0.0;
};

struct FitResult {
  std::vector<LossRow> curve;  // one row per applied step
  i64 skipped = 0;
  bool aborted = false;
  std::string abort_reason;
  std::filesystem::path checkpoint_path;
};

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRow>& curve) {
  std::ofstream out(path, std::ios::binary);
  NF_CHECK(out.good(), "cannot open '" << path.string() << "' for writing");
  out << "step,rgb_mse,mask_bce,total\n";
  for (const LossRow& r : curve)
    out << r.step << ',' << detail::fmt_double(r.rgb_mse) << ',' << detail::fmt_double(r.mask_bce)
        << ',' << detail::fmt_double(r.total) << '\n';
  NF_CHECK(out.good(), "write failed for '" << path.string() << "'");
}

namespace detail {

inline LossRow train_step(ParamStore& store, const SceneMap& scenes, const Splits& splits,
                          const TrainConfig& cfg, const SourceEncoder& enc,
                          const IpcModel* ipc_model, const Rng& init_rng, Rng& srng, i64 step) {
  const BatchSample b = sample_batch(splits, EvalSet::train_known, srng, cfg.fixed_n_src);
  const SceneSequence& seq = *scenes.at(b.seq);
  const SceneFrame& tgt = seq.frames[std::size_t(b.target)];
  const i64 hw = tgt.image.shape[0] * tgt.image.shape[1];
  const std::vector<i64> rows = sample_pixel_rows(hw, cfg.rays_per_step, srng);
  const PixelBatch pb = pixel_batch(tgt, rows);

  LossRow row{step, 0.0, 0.0, 0.0};

  if (cfg.kind == ModelKind::ipc) {
    Tape tape;
    TapeParams tp(tape, store);
    Var z;
    if (cfg.ipc.latent_dim > 0) z = LatentTable::lookup(tape, tp, b.seq, 1);
    IpcPrediction pred = ipc_model->predict(tape, tp, store, init_rng, z);
    IpcRender ir =
        ipc_render(tape, pred.positions, pred.colors, tgt.cam, cfg.ipc.epsilon, pb.pixels);
    LossVars lv = compute_losses(tape, ir.rgb, ir.alpha, pb.rgb, pb.mask, cfg.lambda_mask);
    Rng chrng = srng.fork("chamfer");
    Var cham = chamfer_mask_loss(tape, pred.positions, tgt.cam, tgt.mask, chrng);
    Var obj = tape.add(lv.total, tape.scale(cham, cfg.ipc_chamfer_weight));
    tape.backward(obj);
    const std::map<std::string, Tensor> grads = tp.collect_grads();
    check_grads_finite(grads);
    const LossReport rep = loss_report(tape, lv);
    row.rgb_mse = rep.rgb_mse;
    row.mask_bce = rep.mask_bce;
    row.total = tape.value(obj).at(0);
    store.adam_step(grads, cfg.adam);
    return row;
  }

  const bool uses_encoder =
      cfg.kind == ModelKind::nerformer || cfg.kind == ModelKind::wce_mlp;
  Tape enc_tape;
  TapeParams enc_tp(enc_tape, store);
  std::vector<FeatureGrid> enc_grids;
  if (uses_encoder)
    enc_grids = encode_sources(enc_tape, enc_tp, store, init_rng, enc, seq, b.sources);
  std::vector<Tensor> grid_grad(enc_grids.size());

  std::map<std::string, Tensor> grads;
  const i64 total = i64(pb.rays.size());
  i64 chunk_index = 0;
  for (i64 at = 0; at < total; at += cfg.chunk_rays, ++chunk_index) {
    const i64 cnt = std::min(cfg.chunk_rays, total - at);
    Tape t;
    TapeParams tp(t, store);
    std::vector<FeatureGrid> cg;
    std::vector<Var> gleaves;
    cg.reserve(enc_grids.size());
    for (const FeatureGrid& g : enc_grids) {
      FeatureGrid hgrid;
      hgrid.cam = g.cam;
      hgrid.values = g.values;                  // shares the encoder buffer
      hgrid.var = t.leaf(g.values, true);       // gradient-bearing view
      gleaves.push_back(hgrid.var);
      cg.push_back(std::move(hgrid));
    }

    std::vector<Ray> chunk(pb.rays.begin() + at, pb.rays.begin() + at + cnt);
    Tensor crgb = Tensor::zeros(Shape{cnt, 3});
    Tensor cmask = Tensor::zeros(Shape{cnt});
    for (i64 i = 0; i < cnt; ++i) {
      for (i64 c = 0; c < 3; ++c) crgb.at(i * 3 + c) = pb.rgb.at((at + i) * 3 + c);
      cmask.at(i) = pb.mask.at(at + i);
    }

    FieldBuild fb{&cfg, &store, &tp,    &init_rng, uses_encoder ? &cg : nullptr,
                  b.seq, cnt,   nullptr};
    Rng crng = srng.fork("render/" + std::to_string(chunk_index));
    const EaRender er = ea_render(t, FieldEval(fb), chunk, cfg.render, crng);
    const RenderLoss rl = render_losses(t, er, crgb, cmask, cfg.lambda_mask);
    const double wgt = double(cnt) / double(total);
    t.backward(t.scale(rl.total, wgt));
    add_grads(grads, tp.collect_grads());
    for (std::size_t i = 0; i < gleaves.size(); ++i) {
      const Tensor& gg = t.grad(gleaves[i]);
      if (grid_grad[i].numel() == 0) {
        grid_grad[i] = gg.clone();
      } else {
        emap(grid_grad[i]) += emap(gg);
      }
    }
    const LossReport rep = rl.report(t);
    row.rgb_mse += wgt * rep.rgb_mse;
    row.mask_bce += wgt * rep.mask_bce;
    row.total += wgt * rep.total;
  }

  if (uses_encoder) {
    std::vector<std::pair<Var, Tensor>> seeds;
    seeds.reserve(enc_grids.size());
    for (std::size_t i = 0; i < enc_grids.size(); ++i)
      seeds.emplace_back(enc_grids[i].var, std::move(grid_grad[i]));
    enc_tape.backward_multi(seeds);
    add_grads(grads, enc_tp.collect_grads());
  }
  check_grads_finite(grads);
  store.adam_step(grads, cfg.adam);
  return row;
}

}  // namespace detail

// Trains `store` in place on the known frames of the training sequences.
// When out_dir is nonempty, writes checkpoint.nfck, loss.csv, and periodic
// ckpt_<step>.nfck files there.  A step that fails (non-finite loss or
// gradient) is skipped; three consecutive failures abort the run.
inline FitResult fit(ParamStore& store, const SceneMap& scenes, const Splits& splits,
                     const TrainConfig& cfg, const std::filesystem::path& out_dir = {}) {
  cfg.validate();
  NF_CHECK(!splits.train_seqs.empty(), "training needs at least one sequence");
  for (const std::string& id : splits.train_seqs)
    NF_CHECK(scenes.count(id), "training sequence '" << id << "' missing from the scene map");

  const Rng base(cfg.seed);
  const Rng init_rng = base.fork("init");
  const SourceEncoder enc;
  std::unique_ptr<IpcModel> ipc_model;
  if (cfg.kind == ModelKind::ipc) {
    ipc_model = std::make_unique<IpcModel>(cfg.ipc);
    if (cfg.ipc.latent_dim > 0)
      LatentTable::init(store, splits.train_seqs, cfg.ipc.latent_dim, init_rng);
  }
  if (cfg.kind == ModelKind::latent_mlp)
    LatentTable::init(store, splits.train_seqs, cfg.latent_dim, init_rng);

  FitResult result;
  int consecutive = 0;
  for (i64 step = 0; step < cfg.steps; ++step) {
    Rng srng = base.fork("step/" + std::to_string(step));
    try {
      result.curve.push_back(detail::train_step(store, scenes, splits, cfg, enc, ipc_model.get(),
                                                init_rng, srng, step));
      consecutive = 0;
    } catch (const nf::error& e) {
      ++result.skipped;
      if (++consecutive >= 3) {
        result.aborted = true;
        result.abort_reason = std::string("3 consecutive failed steps; last: ") + e.what();
        break;
      }
      continue;
    }
    if (!out_dir.empty() && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      std::filesystem::create_directories(out_dir);
      char name[40];
      std::snprintf(name, sizeof name, "ckpt_%08lld.nfck", static_cast<long long>(step + 1));
      store.save(out_dir / name);
    }
  }

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    result.checkpoint_path = out_dir / "checkpoint.nfck";
    store.save(result.checkpoint_path);
    write_loss_csv(out_dir / "loss.csv", result.curve);
  }
  return result;
}

// ---------------------------------------------------------------------------
// latent inversion
// ---------------------------------------------------------------------------

struct PlateauState {
  double best = std::numeric_limits<double>::infinity();
  i64 since = 0;
  int decays = 0;
};

// Observes one loss value; returns true when the learning rate should decay
// (no relative improvement of at least min_rel over the last `window`
// observations).
inline bool plateau_observe(PlateauState& st, double loss, i64 window, double min_rel) {
  if (loss < st.best * (1.0 - min_rel)) {
    st.best = loss;
    st.since = 0;
    return false;
  }
  if (++st.since >= window) {
    st.since = 0;
    ++st.decays;
    return true;
  }
  return false;
}

struct InversionConfig {
  i64 max_steps = 1500;
  i64 rays_per_step = 128;
  double lr = 5e-3;
  i64 window = 100;            // plateau window
  double min_rel_improve = 0.01;
  int max_decays = 3;
  std::uint64_t seed = 0;
};

struct InversionResult {
  Tensor z;
  std::vector<double> curve;
  i64 steps = 0;
  int decays = 0;
  double lr_final = 0.0;
};

// Optimizes the latent code of `seq` against its source frames with every
// model weight frozen.  Creates the code if the store has none.
inline InversionResult latent_inversion(ParamStore& store, const TrainConfig& cfg,
                                        const SceneSequence& seq, const std::vector<i64>& sources,
                                        const InversionConfig& icfg = {}) {
  NF_CHECK(cfg.kind == ModelKind::latent_mlp, "latent inversion needs an autodecoder model");
  NF_CHECK(!sources.empty(), "inversion needs at least one source frame");
  cfg.validate();
  const std::string zname = LatentTable::param_name(seq.id);
  const Rng init_rng = Rng(cfg.seed).fork("init");
  if (!store.contains(zname)) {
    Rng zr = init_rng.fork(zname);
    store.create(zname, Tensor::normal(Shape{cfg.latent_dim}, zr, 0.0, 0.01));
  }

  const Rng base(icfg.seed);
  AdamConfig opt = cfg.adam;
  opt.lr = icfg.lr;
  PlateauState plateau;
  InversionResult res;
  for (i64 step = 0; step < icfg.max_steps; ++step) {
    Rng srng = base.fork("step/" + std::to_string(step));
    const i64 sframe = sources[std::size_t(srng.uniform_int(i64(sources.size())))];
    NF_CHECK(sframe >= 0 && sframe < i64(seq.frames.size()),
             "source frame " << sframe << " out of range");
    const SceneFrame& fr = seq.frames[std::size_t(sframe)];
    const i64 hw = fr.image.shape[0] * fr.image.shape[1];
    const std::vector<i64> rows = detail::sample_pixel_rows(hw, icfg.rays_per_step, srng);
    const detail::PixelBatch pb = detail::pixel_batch(fr, rows);

    Tape t;
    TapeParams tp(t, store);
    detail::FieldBuild fb{&cfg,  &store, &tp,    &init_rng, nullptr,
                          seq.id, i64(pb.rays.size()), nullptr};
    Rng crng = srng.fork("render");
    const EaRender er = ea_render(t, FieldEval(fb), pb.rays, cfg.render, crng);
    const RenderLoss rl = render_losses(t, er, pb.rgb, pb.mask, cfg.lambda_mask);
    t.backward(rl.total);
    std::map<std::string, Tensor> all = tp.collect_grads();
    const auto it = all.find(zname);
    NF_CHECK(it != all.end(), "latent code received no gradient");
    std::map<std::string, Tensor> g;
    g.emplace(zname, it->second);
    detail::check_grads_finite(g);

    const double loss = t.value(rl.total).at(0);
    res.curve.push_back(loss);
    store.adam_step(g, opt);
    ++res.steps;
    if (plateau_observe(plateau, loss, icfg.window, icfg.min_rel_improve)) {
      opt.lr *= 0.1;
      if (plateau.decays >= icfg.max_decays) break;
    }
  }
  res.decays = plateau.decays;
  res.lr_final = opt.lr;
  res.z = store.get(zname).clone();
  return res;
}

// ---------------------------------------------------------------------------
// evaluation protocol
// ---------------------------------------------------------------------------

struct EvalSampleRecord {
  i64 index = 0;
  std::string seq;
  i64 target = 0;
  i64 n_src = 0;            // sources actually used
  i64 n_src_requested = 0;  // drawn bucket
  Metrics metrics;
  double difficulty = 0.0;
  DifficultyBin bin = DifficultyBin::easy;
};

struct GroupMean {
  double psnr_sum = 0.0;
  i64 psnr_n = 0;
  double iou_sum = 0.0;
  double l1_sum = 0.0;
  i64 l1_n = 0;
  i64 n = 0;

  void add(const Metrics& m) {
    ++n;
    iou_sum += m.iou;
    if (m.has_psnr) {
      psnr_sum += m.psnr;
      ++psnr_n;
    }
    if (m.has_depth) {
      l1_sum += m.l1_depth;
      ++l1_n;
    }
  }
  double mean_psnr() const { return psnr_n > 0 ? psnr_sum / double(psnr_n) : 0.0; }
  double mean_iou() const { return n > 0 ? iou_sum / double(n) : 0.0; }
  double mean_l1() const { return l1_n > 0 ? l1_sum / double(l1_n) : 0.0; }
};

struct EvalReport {
  std::vector<EvalSampleRecord> samples;
  GroupMean overall;
  std::map<i64, GroupMean> by_nsrc;        // keyed by the requested bucket
  std::map<std::string, GroupMean> by_bin;  // easy / medium / hard
};

inline EvalReport eval_protocol(ParamStore& store, const TrainConfig& cfg, const SceneMap& scenes,
                                const Splits& splits, EvalSet set, i64 n_samples,
                                std::uint64_t seed) {
  NF_CHECK(set == EvalSet::train_unseen || set == EvalSet::test_unseen,
           "evaluation runs on the train-unseen or test-unseen split");
  NF_CHECK(n_samples >= 1, "n_samples must be >= 1");

  EvalReport rep;
  for (const int k : {1, 3, 5, 7, 9}) rep.by_nsrc[k];  // stable bucket set
  rep.by_bin["easy"];
  rep.by_bin["medium"];
  rep.by_bin["hard"];

  const Rng base(seed);
  for (i64 k = 0; k < n_samples; ++k) {
    Rng rng = base.fork("sample/" + std::to_string(k));
    const BatchSample b = sample_batch(splits, set, rng, cfg.fixed_n_src);
    const auto it = scenes.find(b.seq);
    NF_CHECK(it != scenes.end(), "sequence '" << b.seq << "' missing from the scene map");
    const SceneSequence& seq = *it->second;

    Rng vr_rng = rng.fork("view");
    const ViewRender vr =
        render_view(store, cfg, seq, b.target, b.sources, vr_rng.next_u64());
    const SceneFrame& gt = seq.frames[std::size_t(b.target)];

    EvalSampleRecord rec;
    rec.index = k;
    rec.seq = b.seq;
    rec.target = b.target;
    rec.n_src = i64(b.sources.size());
    rec.n_src_requested = b.n_src_requested;
    rec.metrics = view_metrics(vr, gt);
    std::vector<CameraPose> scams;
    for (i64 s : b.sources) scams.push_back(seq.frames[std::size_t(s)].cam);
    const ViewDifficulty vd = view_difficulty(gt.cam, scams);
    rec.difficulty = vd.d;
    rec.bin = vd.bin;

    rep.overall.add(rec.metrics);
    rep.by_nsrc[rec.n_src_requested].add(rec.metrics);
    rep.by_bin[difficulty_bin_name(rec.bin)].add(rec.metrics);
    rep.samples.push_back(std::move(rec));
  }
  return rep;
}

// One line per sample, then one aggregate line per group; all doubles with
// round-trippable formatting, missing metrics as "na".
inline void eval_report_write(const std::filesystem::path& path, const EvalReport& rep) {
  std::ofstream out(path, std::ios::binary);
  NF_CHECK(out.good(), "cannot open '" << path.string() << "' for writing");
  const auto fmt = [](double v) { return detail::fmt_double(v); };
  out << "# eval-report v1\n";
  out << "# sample: index seq target n_src n_src_requested difficulty bin psnr iou l1_depth\n";
  for (const EvalSampleRecord& s : rep.samples) {
    out << "sample index=" << s.index << " seq=" << s.seq << " target=" << s.target
        << " n_src=" << s.n_src << " n_src_requested=" << s.n_src_requested
        << " difficulty=" << fmt(s.difficulty) << " bin=" << difficulty_bin_name(s.bin)
        << " psnr=" << (s.metrics.has_psnr ? fmt(s.metrics.psnr) : "na")
        << " iou=" << fmt(s.metrics.iou)
        << " l1_depth=" << (s.metrics.has_depth ? fmt(s.metrics.l1_depth) : "na") << '\n';
  }
  const auto agg = [&](std::ostream& os, const GroupMean& g) {
    os << " n=" << g.n << " psnr_n=" << g.psnr_n << " mean_psnr=" << fmt(g.mean_psnr())
       << " mean_iou=" << fmt(g.mean_iou()) << " l1_n=" << g.l1_n
       << " mean_l1_depth=" << fmt(g.mean_l1()) << '\n';
  };
  out << "aggregate overall";
  agg(out, rep.overall);
  for (const auto& [k, g] : rep.by_nsrc) {
    out << "aggregate n_src=" << k;
    agg(out, g);
  }
  for (const char* name : {"easy", "medium", "hard"}) {
    out << "aggregate bin=" << name;
    agg(out, rep.by_bin.at(name));
  }
  NF_CHECK(out.good(), "write failed for '" << path.string() << "'");
}

}  // namespace nf
