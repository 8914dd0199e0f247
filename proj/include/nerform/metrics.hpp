#pragma once

// Training losses (on-tape) and image-quality metrics (off-tape): foreground
// PSNR, mask IoU, and foreground depth L1.

#include <cmath>
#include <vector>

#include "nerform/render_ea.hpp"
#include "nerform/tape.hpp"

namespace nf {

// Off-tape summary of one loss evaluation.
struct LossReport {
  double rgb_mse = 0.0;
  double mask_bce = 0.0;
  double total = 0.0;  // rgb_mse + lambda * mask_bce
  i64 n_rays = 0;
};

// On-tape loss nodes for one composite.
struct LossVars {
  Var rgb_mse;   // scalar
  Var mask_bce;  // scalar
  Var total;     // scalar
  i64 n_rays = 0;
};

// rgb [R,3] and alpha [R] rendered values vs. target pixels.  The MSE is the
// mean squared error over all R*3 channel entries; the BCE treats alpha as
// the predicted foreground probability, clamped away from {0,1} so the logs
// stay finite.
inline LossVars compute_losses(Tape& tape, Var rgb, Var alpha, const Tensor& target_rgb,
                               const Tensor& target_mask, double lambda = 1.0) {
  const Shape rs = tape.shape(rgb);
  NF_CHECK(rs.rank == 2 && rs[1] == 3, "rendered rgb must be [R,3], got " << rs.str());
  const i64 r = rs[0];
  NF_CHECK((tape.shape(alpha) == Shape{r}),
           "rendered alpha must be [R], got " << tape.shape(alpha).str());
  NF_CHECK((target_rgb.shape == Shape{r, 3}),
           "target rgb shape " << target_rgb.shape.str() << " does not match render");
  NF_CHECK((target_mask.shape == Shape{r}),
           "target mask shape " << target_mask.shape.str() << " does not match render");
  for (i64 i = 0; i < r; ++i)
    NF_CHECK(target_mask.at(i) >= 0.0 && target_mask.at(i) <= 1.0,
             "target mask value " << target_mask.at(i) << " outside [0,1]");

  LossVars out;
  out.n_rays = r;
  Var diff = tape.sub(rgb, tape.constant(target_rgb.clone()));
  out.rgb_mse = tape.reduce_mean(tape.mul(diff, diff));

  Var m_hat = tape.clamp(alpha, 1e-6, 1.0 - 1e-6);
  Var m = tape.constant(target_mask.clone());
  Var one_minus_m = tape.constant([&] {
    Tensor t = Tensor::zeros(Shape{r});
    for (i64 i = 0; i < r; ++i) t.at(i) = 1.0 - target_mask.at(i);
    return t;
  }());
  Var ll = tape.add(tape.mul(m, tape.log(m_hat)),
                    tape.mul(one_minus_m, tape.log(tape.offset(tape.neg(m_hat), 1.0))));
  out.mask_bce = tape.neg(tape.reduce_mean(ll));
  out.total = tape.add(out.rgb_mse, tape.scale(out.mask_bce, lambda));
  return out;
}

inline LossReport loss_report(const Tape& tape, const LossVars& lv) {
  LossReport r;
  r.rgb_mse = tape.value(lv.rgb_mse).at(0);
  r.mask_bce = tape.value(lv.mask_bce).at(0);
  r.total = tape.value(lv.total).at(0);
  r.n_rays = lv.n_rays;
  return r;
}

// Losses for a full raymarch: the optimization objective is the sum of the
// coarse and fine composites' losses (one composite counts once when there
// is no separate fine pass).
struct RenderLoss {
  LossVars coarse;
  LossVars fine;
  Var total;  // scalar objective
  bool has_fine = false;

  LossReport report(const Tape& tape) const {
    LossReport c = loss_report(tape, coarse);
    if (!has_fine) return c;
    const LossReport f = loss_report(tape, fine);
    c.rgb_mse += f.rgb_mse;
    c.mask_bce += f.mask_bce;
    c.total += f.total;
    return c;
  }
};

inline RenderLoss render_losses(Tape& tape, const EaRender& render, const Tensor& target_rgb,
                                const Tensor& target_mask, double lambda = 1.0) {
  RenderLoss out;
  out.has_fine = render.has_fine;
  out.coarse = compute_losses(tape, render.coarse.rgb, render.coarse.alpha, target_rgb,
                              target_mask, lambda);
  if (render.has_fine) {
    out.fine = compute_losses(tape, render.fine.rgb, render.fine.alpha, target_rgb,
                              target_mask, lambda);
    out.total = tape.add(out.coarse.total, out.fine.total);
  } else {
    out.fine = out.coarse;
    out.total = out.coarse.total;
  }
  return out;
}

// Per-view quality metrics.  PSNR and depth L1 are restricted to the
// ground-truth foreground (mask > 0.5) and absent when it is empty; IoU
// binarizes both masks at 0.5.
struct Metrics {
  double psnr = 0.0;
  bool has_psnr = false;
  double iou = 0.0;
  double l1_depth = 0.0;
  bool has_depth = false;
};

constexpr double kPsnrCap = 60.0;

inline double psnr_from_mse(double mse) {
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

// pred_depth / gt_depth may be empty, which skips the depth metric; gt depth
// entries of 0 mean "no surface" and are excluded.
inline Metrics metrics_eval(const Tensor& pred_rgb, const Tensor& pred_alpha,
                            const std::vector<double>& pred_depth, const Tensor& gt_rgb,
                            const Tensor& gt_mask, const Tensor& gt_depth = {}) {
  const i64 n = gt_mask.numel();
  NF_CHECK(pred_rgb.numel() == 3 * n && gt_rgb.numel() == 3 * n,
           "rgb rasters do not match the mask size");
  NF_CHECK(pred_alpha.numel() == n, "alpha raster does not match the mask size");
  const bool want_depth = !pred_depth.empty() && gt_depth.numel() == n;
  if (!pred_depth.empty())
    NF_CHECK(i64(pred_depth.size()) == n, "depth raster does not match the mask size");

  Metrics out;
  double se = 0.0, l1 = 0.0;
  i64 fg = 0, depth_fg = 0, inter = 0, uni = 0;
  for (i64 i = 0; i < n; ++i) {
    const bool gt_fg = gt_mask.at(i) > 0.5;
    const bool pr_fg = pred_alpha.at(i) > 0.5;
    inter += (gt_fg && pr_fg) ? 1 : 0;
    uni += (gt_fg || pr_fg) ? 1 : 0;
    if (!gt_fg) continue;
    ++fg;
    for (i64 c = 0; c < 3; ++c) {
      const double d = pred_rgb.at(i * 3 + c) - gt_rgb.at(i * 3 + c);
      se += d * d;
    }
    if (want_depth && gt_depth.at(i) > 0.0) {
      l1 += std::abs(pred_depth[std::size_t(i)] - gt_depth.at(i));
      ++depth_fg;
    }
  }
  out.iou = uni == 0 ? 1.0 : double(inter) / double(uni);
  if (fg > 0) {
    out.has_psnr = true;
    out.psnr = psnr_from_mse(se / double(3 * fg));
  }
  if (depth_fg > 0) {
    out.has_depth = true;
    out.l1_depth = l1 / double(depth_fg);
  }
  return out;
}

}  // namespace nf
