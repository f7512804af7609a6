// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hrda/crop.hpp"

namespace hrda {

enum class PredictionForm { logits, probabilities };

// A segmentation prediction plus the bookkeeping needed to fuse it: which
// space the scores live in and which HR-frame box they cover.
struct Prediction {
  Tensor scores;  // [N,C,h,w]
  PredictionForm form = PredictionForm::logits;
  CropBox frame;
};

inline Prediction make_prediction(Tensor scores, PredictionForm form, const CropBox& frame) {
  check(scores.rank() == 4, "Prediction: scores must be [N,C,h,w], got " + shape_str(scores));
  return {std::move(scores), form, frame};
}

inline Prediction to_probabilities(Graph* g, const Prediction& p) {
  if (p.form == PredictionForm::probabilities) return p;
  return {ops::softmax(g, p.scores), PredictionForm::probabilities, p.frame};
}

inline void check_probabilities(const Prediction& p, const char* op) {
  check(p.form == PredictionForm::probabilities,
        std::string(op) + ": prediction must be in probability form; call softmax first "
                          "(mixing logits and probabilities is not allowed)");
}

// Zero the attention outside the detail region; indices are on the context
// feature grid where one cell spans k = s*o HR pixels.
inline Tensor mask_attention(Graph* g, const Tensor& a_c, const CropBox& ctx, const CropBox& det,
                             const CropConfig& cfg) {
  cfg.validate();
  check(a_c.rank() == 4, "mask_attention: attention must be [N,C,h,w], got " + shape_str(a_c));
  check(a_c.dim(2) == cfg.h_c / cfg.o && a_c.dim(3) == cfg.w_c / cfg.o,
        "mask_attention: attention grid " + std::to_string(a_c.dim(2)) + "x" +
            std::to_string(a_c.dim(3)) + " does not match context grid " +
            std::to_string(cfg.h_c / cfg.o) + "x" + std::to_string(cfg.w_c / cfg.o));
  check(ctx.contains(det), "mask_attention: detail box not contained in context box");
  int k = cfg.k();
  int rt = det.top - ctx.top, rl = det.left - ctx.left;
  check(rt % k == 0 && rl % k == 0 && det.height() % k == 0 && det.width() % k == 0,
        "mask_attention: detail box not aligned to the k = s*o grid");
  return ops::mask_region(g, a_c, rt / k, (det.bottom - ctx.top) / k, rl / k,
                          (det.right - ctx.left) / k);
}

// Place the detail prediction on the context-HR feature grid (stride o over
// the s*h_c x s*w_c region), zero elsewhere.
inline Prediction pad_detail(Graph* g, const Prediction& det_pred, const CropBox& ctx,
                             const CropBox& det, const CropConfig& cfg) {
  cfg.validate();
  check_probabilities(det_pred, "pad_detail");
  check(det_pred.scores.dim(2) == cfg.h_d / cfg.o && det_pred.scores.dim(3) == cfg.w_d / cfg.o,
        "pad_detail: detail grid " + std::to_string(det_pred.scores.dim(2)) + "x" +
            std::to_string(det_pred.scores.dim(3)) + " does not match h_d/o x w_d/o");
  check(ctx.contains(det), "pad_detail: detail box not contained in context box");
  int rt = det.top - ctx.top, rl = det.left - ctx.left;
  check(rt % cfg.o == 0 && rl % cfg.o == 0, "pad_detail: detail offset not aligned to stride o");
  Tensor padded = ops::zero_pad(g, det_pred.scores, cfg.s * cfg.h_c / cfg.o,
                                cfg.s * cfg.w_c / cfg.o, rt / cfg.o, rl / cfg.o);
  return {padded, PredictionForm::probabilities, ctx};
}

namespace detail {

// (1-a) (*) y_c upsampled by s, plus a upsampled by s (*) y_big.
// Shared by crop fusion and full-grid pseudo-label fusion.
inline Tensor fuse_fields(Graph* g, const Tensor& y_c, const Tensor& y_big, const Tensor& a,
                          int s) {
  Tensor keep = ops::mul(g, ops::affine(g, a, -1.0, 1.0), y_c);
  Tensor lr_part = ops::resize_bilinear(g, keep, s, 1);
  Tensor hr_gate = ops::resize_bilinear(g, a, s, 1);
  return ops::add(g, lr_part, ops::mul(g, hr_gate, y_big));
}

}  // namespace detail

// Scale-attention fusion of the context prediction with the padded detail
// prediction, on the context-HR feature grid.
inline Prediction fuse(Graph* g, const Prediction& ctx_pred, const Prediction& det_padded,
                       const Tensor& a_masked, const CropConfig& cfg) {
  cfg.validate();
  check_probabilities(ctx_pred, "fuse");
  check_probabilities(det_padded, "fuse");
  check(ctx_pred.scores.dim(2) == cfg.h_c / cfg.o && ctx_pred.scores.dim(3) == cfg.w_c / cfg.o,
        "fuse: context prediction grid does not match h_c/o x w_c/o");
  check(det_padded.scores.dim(2) == cfg.s * cfg.h_c / cfg.o &&
            det_padded.scores.dim(3) == cfg.s * cfg.w_c / cfg.o,
        "fuse: padded detail grid does not match s*h_c/o x s*w_c/o");
  check(a_masked.same_shape(ctx_pred.scores),
        "fuse: attention shape " + shape_str(a_masked) + " does not match context prediction " +
            shape_str(ctx_pred.scores));
  Tensor fused = detail::fuse_fields(g, ctx_pred.scores, det_padded.scores, a_masked, cfg.s);
  return {fused, PredictionForm::probabilities, ctx_pred.frame};
}

// Pixel-weighted cross-entropy against one-hot labels; the prediction is
// bilinearly upsampled to label resolution first.
inline Tensor weighted_cross_entropy(Graph* g, const Prediction& pred, const Tensor& y,
                                     const Tensor& q) {
  check_probabilities(pred, "weighted_cross_entropy");
  check(y.rank() == 4, "weighted_cross_entropy: labels must be [N,C,H,W], got " + shape_str(y));
  int hp = pred.scores.dim(2), wp = pred.scores.dim(3);
  int hy = y.dim(2), wy = y.dim(3);
  check(hy % hp == 0 && wy % wp == 0 && hy / hp == wy / wp,
        "weighted_cross_entropy: label size " + std::to_string(hy) + "x" + std::to_string(wy) +
            " is not an integer multiple of prediction size " + std::to_string(hp) + "x" +
            std::to_string(wp));
  int r = hy / hp;
  Tensor up = r == 1 ? pred.scores : ops::resize_bilinear(g, pred.scores, r, 1);
  return ops::weighted_nll(g, up, y, q);
}

struct LossParts {
  real fused = 0.0;
  real detail = 0.0;
};

namespace detail {

inline Tensor combine_losses(Graph* g, const Tensor& fused_loss, const Tensor& detail_loss,
                             real lambda_d, LossParts* parts) {
  if (parts != nullptr) {
    parts->fused = fused_loss.value();
    parts->detail = detail_loss.value();
  }
  return ops::add(g, ops::affine(g, fused_loss, 1.0 - lambda_d, 0.0),
                  ops::affine(g, detail_loss, lambda_d, 0.0));
}

}  // namespace detail

// (1-lambda_d) * CE(fused, y_ctx) + lambda_d * CE(detail, y_det), ground truth
// at HR resolution inside the context/detail boxes.
inline Tensor hrda_source_loss(Graph* g, const Prediction& fused, const Prediction& det_pred,
                               const Tensor& y_ctx, const Tensor& y_det, real lambda_d,
                               LossParts* parts = nullptr) {
  check(lambda_d >= 0.0 && lambda_d <= 1.0,
        "hrda_source_loss: lambda_d must lie in [0,1], got " + std::to_string(lambda_d));
  Tensor q_ctx = Tensor::full({y_ctx.dim(0), y_ctx.dim(2), y_ctx.dim(3)}, 1.0);
  Tensor q_det = Tensor::full({y_det.dim(0), y_det.dim(2), y_det.dim(3)}, 1.0);
  Tensor lf = weighted_cross_entropy(g, fused, y_ctx, q_ctx);
  Tensor ld = weighted_cross_entropy(g, det_pred, y_det, q_det);
  return detail::combine_losses(g, lf, ld, lambda_d, parts);
}

// Same shape as the source loss but against pseudo-labels with confidence
// weights.
inline Tensor hrda_target_loss(Graph* g, const Prediction& fused, const Prediction& det_pred,
                               const Tensor& p_ctx, const Tensor& q_ctx, const Tensor& p_det,
                               const Tensor& q_det, real lambda_d, LossParts* parts = nullptr) {
  check(lambda_d >= 0.0 && lambda_d <= 1.0,
        "hrda_target_loss: lambda_d must lie in [0,1], got " + std::to_string(lambda_d));
  Tensor lf = weighted_cross_entropy(g, fused, p_ctx, q_ctx);
  Tensor ld = weighted_cross_entropy(g, det_pred, p_det, q_det);
  return detail::combine_losses(g, lf, ld, lambda_d, parts);
}

}  // namespace hrda
