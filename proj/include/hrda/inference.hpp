// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hrda/pseudo_label.hpp"

namespace hrda {

enum class SlidingMode { overlapping, non_overlapping };

// Which prediction is accumulated per outer window. hrda is the fused
// two-branch output; the others exist for ablation evaluation.
enum class FusionVariant { hrda, context_only, detail_only, average };

struct InferenceResult {
  Tensor class_map;      // [H,W] class indices
  Tensor probabilities;  // [C,H,W]
  Tensor margin;         // [H,W] top-1 minus top-2 probability
  Tensor attention;      // [C,H,W]; constant for variants without a learned gate
};

struct CostEstimate {
  long long outer_windows = 0;
  long long inner_windows = 0;  // total across all outer windows
  long long window_count = 0;   // outer + inner
  long long forward_pixels = 0;
};

namespace detail {

inline int snap_stride(int stride, int o) { return std::max(o, stride - stride % o); }

inline WindowPlan outer_plan(int H, int W, const CropConfig& cfg, SlidingMode mode) {
  int wh = cfg.context_hr_h(), ww = cfg.context_hr_w();
  check(H >= wh && W >= ww, "infer_image: image " + std::to_string(H) + "x" + std::to_string(W) +
                                " is smaller than the outer window " + std::to_string(wh) + "x" +
                                std::to_string(ww));
  int o = cfg.o;
  check(H % o == 0 && W % o == 0,
        "infer_image: image size must be divisible by the output stride " + std::to_string(o));
  int sh = mode == SlidingMode::overlapping ? snap_stride(wh / 2, o) : wh;
  int sw = mode == SlidingMode::overlapping ? snap_stride(ww / 2, o) : ww;
  return plan_windows(H, W, wh, ww, sh, sw);
}

inline WindowPlan inner_plan(const CropConfig& cfg, SlidingMode mode) {
  int wh = cfg.context_hr_h(), ww = cfg.context_hr_w();
  int sh = mode == SlidingMode::overlapping ? snap_stride(cfg.h_d / 2, cfg.o) : cfg.h_d;
  int sw = mode == SlidingMode::overlapping ? snap_stride(cfg.w_d / 2, cfg.o) : cfg.w_d;
  return plan_windows(wh, ww, cfg.h_d, cfg.w_d, sh, sw);
}

}  // namespace detail

// Whole-image segmentation by sliding the two-branch model over outer windows
// of the full context size, fusing per window, and averaging probabilities
// where windows overlap. Everything runs without a gradient tape.
inline InferenceResult infer_image_full(const NetworkParams& params, const Tensor& image,
                                        const CropConfig& cfg,
                                        SlidingMode mode = SlidingMode::overlapping,
                                        FusionVariant variant = FusionVariant::hrda) {
  cfg.validate();
  check(image.rank() == 3, "infer_image: image must be [C,H,W], got " + shape_str(image));
  check(image.dim(0) == params.cfg.in_channels,
        "infer_image: image has " + std::to_string(image.dim(0)) + " channels, model expects " +
            std::to_string(params.cfg.in_channels));
  check(params.cfg.output_stride() == cfg.o,
        "infer_image: model output stride does not match the crop configuration");
  int C = params.cfg.num_classes;
  int H = image.dim(1), W = image.dim(2);
  int o = cfg.o;

  Tensor x = Tensor::zeros({1, image.dim(0), H, W});
  std::copy(image.data(), image.data() + image.size(), x.data());

  WindowPlan outer = detail::outer_plan(H, W, cfg, mode);
  WindowPlan inner = detail::inner_plan(cfg, mode);

  int Hg = H / o, Wg = W / o;
  Tensor prob_canvas = Tensor::zeros({1, C, Hg, Wg});
  Tensor att_canvas = Tensor::zeros({1, C, Hg, Wg});
  std::vector<int> counts(static_cast<std::size_t>(Hg) * Wg, 0);

  for (std::size_t ri = 0; ri < outer.row_starts.size(); ++ri)
    for (std::size_t ci = 0; ci < outer.col_starts.size(); ++ci) {
      CropBox win = outer.window(ri, ci);
      Tensor x_ctx = extract_context(x, win, cfg);
      Tensor fused_scores;
      Tensor att;
      if (variant == FusionVariant::context_only) {
        Tensor y_c = ops::softmax(nullptr, forward_seg(nullptr, params, x_ctx));
        fused_scores = ops::resize_bilinear(nullptr, y_c, cfg.s, 1);
        att = Tensor::zeros({1, C, cfg.h_c / o, cfg.w_c / o});
      } else {
        Tensor x_win = ops::crop(nullptr, x, win.top, win.left, win.height(), win.width());
        Prediction y_hr = sliding_hr_prediction(params, x_win, inner);
        if (variant == FusionVariant::detail_only) {
          fused_scores = y_hr.scores;
          att = Tensor::full({1, C, cfg.h_c / o, cfg.w_c / o}, 1.0);
        } else {
          Tensor y_c = ops::softmax(nullptr, forward_seg(nullptr, params, x_ctx));
          att = variant == FusionVariant::average
                    ? Tensor::full({1, C, cfg.h_c / o, cfg.w_c / o}, 0.5)
                    : forward_attention(nullptr, params, x_ctx);
          Prediction fused =
              fuse_full(nullptr, {y_c, PredictionForm::probabilities, win},
                        {y_hr.scores, PredictionForm::probabilities, win}, att, cfg);
          fused_scores = fused.scores;
        }
      }
      Tensor att_big = ops::resize_bilinear(nullptr, att, cfg.s, 1);
      detail::accumulate_window(prob_canvas, fused_scores, win.top / o, win.left / o);
      detail::accumulate_window(att_canvas, att_big, win.top / o, win.left / o);
      for (int i = win.top / o; i < win.bottom / o; ++i)
        for (int j = win.left / o; j < win.right / o; ++j)
          counts[static_cast<std::size_t>(i) * Wg + j]++;
    }
  detail::divide_by_counts(prob_canvas, counts);
  detail::divide_by_counts(att_canvas, counts);

  Tensor probs_full = ops::resize_bilinear(nullptr, prob_canvas, o, 1);
  Tensor att_full = ops::resize_bilinear(nullptr, att_canvas, o, 1);

  InferenceResult out;
  out.class_map = Tensor::zeros({H, W});
  out.probabilities = Tensor::zeros({C, H, W});
  out.attention = Tensor::zeros({C, H, W});
  out.margin = Tensor::zeros({H, W});
  std::copy(probs_full.data(), probs_full.data() + probs_full.size(), out.probabilities.data());
  std::copy(att_full.data(), att_full.data() + att_full.size(), out.attention.data());
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      int best = 0;
      real b1 = out.probabilities.at({0, i, j}), b2 = -1.0;
      for (int c = 1; c < C; ++c) {
        real v = out.probabilities.at({c, i, j});
        if (v > b1) {
          b2 = b1;
          b1 = v;
          best = c;
        } else if (v > b2) {
          b2 = v;
        }
      }
      out.class_map.at({i, j}) = static_cast<real>(best);
      out.margin.at({i, j}) = C > 1 ? b1 - b2 : b1;
    }
  return out;
}

inline Tensor infer_image(const NetworkParams& params, const Tensor& image, const CropConfig& cfg,
                          SlidingMode mode = SlidingMode::overlapping,
                          FusionVariant variant = FusionVariant::hrda) {
  return infer_image_full(params, image, cfg, mode, variant).class_map;
}

inline CostEstimate estimate_cost(const CropConfig& cfg, int H, int W,
                                  SlidingMode mode = SlidingMode::overlapping) {
  cfg.validate();
  WindowPlan outer = detail::outer_plan(H, W, cfg, mode);
  WindowPlan inner = detail::inner_plan(cfg, mode);
  CostEstimate est;
  est.outer_windows = outer.num_windows();
  est.inner_windows = est.outer_windows * inner.num_windows();
  est.window_count = est.outer_windows + est.inner_windows;
  est.forward_pixels = est.outer_windows * static_cast<long long>(cfg.h_c) * cfg.w_c +
                       est.inner_windows * static_cast<long long>(cfg.h_d) * cfg.w_d;
  return est;
}

}  // namespace hrda
