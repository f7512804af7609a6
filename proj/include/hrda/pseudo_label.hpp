// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hrda/fusion.hpp"
#include "hrda/model.hpp"

namespace hrda {

// Teacher-generated training signal: one-hot argmax labels plus per-pixel
// confidence weights in [0,1].
struct PseudoLabel {
  Tensor labels;   // [N,C,H,W] one-hot
  Tensor weights;  // [N,H,W]
};

enum class ConfidenceMode { per_image, per_pixel };

// Ordered tiling of a region by equally sized windows. Default stride is half
// the window size; a final flush window is appended when the strided grid does
// not end exactly at the region border.
struct WindowPlan {
  int region_h = 0, region_w = 0;
  int win_h = 0, win_w = 0;
  std::vector<int> row_starts, col_starts;
  std::vector<int> counts;  // per-pixel overlap counts, region_h x region_w

  long long num_windows() const {
    return static_cast<long long>(row_starts.size()) * static_cast<long long>(col_starts.size());
  }
  int count_at(int i, int j) const {
    return counts[static_cast<std::size_t>(i) * region_w + j];
  }
  CropBox window(std::size_t ri, std::size_t ci) const {
    int t = row_starts[ri], l = col_starts[ci];
    return {t, t + win_h, l, l + win_w};
  }
};

namespace detail {

inline std::vector<int> plan_starts(int region, int win, int stride) {
  std::vector<int> starts;
  for (int s = 0; s + win <= region; s += stride) starts.push_back(s);
  if (starts.back() != region - win) starts.push_back(region - win);
  return starts;
}

}  // namespace detail

// stride 0 selects the default overlapping stride win/2
inline WindowPlan plan_windows(int region_h, int region_w, int win_h, int win_w, int stride_h = 0,
                               int stride_w = 0) {
  check(win_h > 0 && win_w > 0, "plan_windows: window must be non-empty");
  check(win_h <= region_h && win_w <= region_w,
        "plan_windows: window " + std::to_string(win_h) + "x" + std::to_string(win_w) +
            " larger than region " + std::to_string(region_h) + "x" + std::to_string(region_w));
  if (stride_h == 0) stride_h = std::max(1, win_h / 2);
  if (stride_w == 0) stride_w = std::max(1, win_w / 2);
  check(stride_h > 0 && stride_w > 0, "plan_windows: stride must be positive");

  WindowPlan plan;
  plan.region_h = region_h;
  plan.region_w = region_w;
  plan.win_h = win_h;
  plan.win_w = win_w;
  plan.row_starts = detail::plan_starts(region_h, win_h, stride_h);
  plan.col_starts = detail::plan_starts(region_w, win_w, stride_w);
  plan.counts.assign(static_cast<std::size_t>(region_h) * region_w, 0);
  for (int rs : plan.row_starts)
    for (int cs : plan.col_starts)
      for (int i = rs; i < rs + win_h; ++i)
        for (int j = cs; j < cs + win_w; ++j)
          plan.counts[static_cast<std::size_t>(i) * region_w + j]++;
  return plan;
}

namespace detail {

// in-place accumulate probs into the canvas block at (top, left) on the same grid
inline void accumulate_window(Tensor& canvas, const Tensor& probs, int top, int left) {
  int N = canvas.dim(0), C = canvas.dim(1), H = canvas.dim(2), W = canvas.dim(3);
  int h = probs.dim(2), w = probs.dim(3);
  real* pc = canvas.data();
  const real* pp = probs.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < h; ++i) {
        real* dst = pc + ((static_cast<long long>(n) * C + c) * H + top + i) * W + left;
        const real* src = pp + ((static_cast<long long>(n) * C + c) * h + i) * w;
        for (int j = 0; j < w; ++j) dst[j] += src[j];
      }
}

inline void divide_by_counts(Tensor& canvas, const std::vector<int>& counts) {
  int N = canvas.dim(0), C = canvas.dim(1), H = canvas.dim(2), W = canvas.dim(3);
  long long hw = static_cast<long long>(H) * W;
  real* pc = canvas.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      real* plane = pc + (static_cast<long long>(n) * C + c) * hw;
      for (long long p = 0; p < hw; ++p) plane[p] /= counts[static_cast<std::size_t>(p)];
    }
}

}  // namespace detail

// Teacher HR prediction over the whole context region: the region is tiled by
// the plan's windows, each window is predicted independently, and softmax
// probabilities are averaged where windows overlap. Runs without a gradient
// tape. Output lives on the stride-o feature grid of the region.
inline Prediction sliding_hr_prediction(const NetworkParams& teacher, const Tensor& x,
                                        const WindowPlan& plan) {
  check(x.rank() == 4, "sliding_hr_prediction: input must be [N,C,H,W], got " + shape_str(x));
  check(x.dim(2) == plan.region_h && x.dim(3) == plan.region_w,
        "sliding_hr_prediction: plan region " + std::to_string(plan.region_h) + "x" +
            std::to_string(plan.region_w) + " does not match input " + shape_str(x));
  int o = teacher.cfg.output_stride();
  check(plan.win_h % o == 0 && plan.win_w % o == 0,
        "sliding_hr_prediction: window size not divisible by output stride");
  for (int s : plan.row_starts)
    check(s % o == 0, "sliding_hr_prediction: window row start " + std::to_string(s) +
                          " not aligned to output stride " + std::to_string(o));
  for (int s : plan.col_starts)
    check(s % o == 0, "sliding_hr_prediction: window col start " + std::to_string(s) +
                          " not aligned to output stride " + std::to_string(o));

  int N = x.dim(0), C = teacher.cfg.num_classes;
  int Hg = plan.region_h / o, Wg = plan.region_w / o;
  Tensor canvas = Tensor::zeros({N, C, Hg, Wg});
  std::vector<int> counts(static_cast<std::size_t>(Hg) * Wg, 0);
  for (std::size_t ri = 0; ri < plan.row_starts.size(); ++ri)
    for (std::size_t ci = 0; ci < plan.col_starts.size(); ++ci) {
      CropBox win = plan.window(ri, ci);
      Tensor xw = ops::crop(nullptr, x, win.top, win.left, win.height(), win.width());
      Tensor probs = ops::softmax(nullptr, forward_seg(nullptr, teacher, xw));
      detail::accumulate_window(canvas, probs, win.top / o, win.left / o);
      for (int i = win.top / o; i < win.bottom / o; ++i)
        for (int j = win.left / o; j < win.right / o; ++j)
          counts[static_cast<std::size_t>(i) * Wg + j]++;
    }
  detail::divide_by_counts(canvas, counts);
  return {canvas, PredictionForm::probabilities, CropBox{0, plan.region_h, 0, plan.region_w}};
}

// Scale-attention fusion over the full context region with UNMASKED attention:
// unlike the training-crop path, an HR prediction exists everywhere here.
inline Prediction fuse_full(Graph* g, const Prediction& y_c, const Prediction& y_hr,
                            const Tensor& a_c, const CropConfig& cfg) {
  cfg.validate();
  check_probabilities(y_c, "fuse_full");
  check_probabilities(y_hr, "fuse_full");
  check(y_c.scores.dim(2) == cfg.h_c / cfg.o && y_c.scores.dim(3) == cfg.w_c / cfg.o,
        "fuse_full: LR prediction grid does not match h_c/o x w_c/o");
  check(y_hr.scores.dim(2) == cfg.s * cfg.h_c / cfg.o &&
            y_hr.scores.dim(3) == cfg.s * cfg.w_c / cfg.o,
        "fuse_full: HR prediction grid does not match s*h_c/o x s*w_c/o");
  check(a_c.same_shape(y_c.scores), "fuse_full: attention shape " + shape_str(a_c) +
                                        " does not match LR prediction " +
                                        shape_str(y_c.scores));
  Tensor fused = detail::fuse_fields(g, y_c.scores, y_hr.scores, a_c, cfg.s);
  return {fused, PredictionForm::probabilities, y_c.frame};
}

// Argmax pseudo-label with confidence weighting. per_image: every pixel of an
// image gets the same weight, the fraction of pixels whose max probability
// exceeds tau. per_pixel: binary indicator per pixel. Argmax ties resolve to
// the lowest class index.
inline PseudoLabel make_pseudo_label(const Prediction& pred, real tau,
                                     ConfidenceMode mode = ConfidenceMode::per_image) {
  check(tau > 0.0 && tau < 1.0, "make_pseudo_label: tau must lie in (0,1)");
  check_probabilities(pred, "make_pseudo_label");
  const Tensor& p = pred.scores;
  int N = p.dim(0), C = p.dim(1), H = p.dim(2), W = p.dim(3);
  long long hw = static_cast<long long>(H) * W;
  const real* pp = p.data();
  for (int n = 0; n < N; ++n)
    for (long long pix = 0; pix < hw; ++pix) {
      real s = 0.0;
      for (int c = 0; c < C; ++c) {
        real v = pp[(static_cast<long long>(n) * C + c) * hw + pix];
        check(v >= 0.0, "make_pseudo_label: unnormalized input (negative probability)");
        s += v;
      }
      check(std::abs(s - 1.0) < 1e-6, "make_pseudo_label: unnormalized input");
    }

  PseudoLabel pl;
  pl.labels = Tensor::zeros(p.shape());
  pl.weights = Tensor::zeros({N, H, W});
  for (int n = 0; n < N; ++n) {
    long long confident = 0;
    for (long long pix = 0; pix < hw; ++pix) {
      long long base = static_cast<long long>(n) * C * hw + pix;
      int best = 0;
      real bv = pp[base];
      for (int c = 1; c < C; ++c) {
        real v = pp[base + c * hw];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      pl.labels.data()[base + static_cast<long long>(best) * hw] = 1.0;
      bool conf = bv > tau;
      if (conf) ++confident;
      if (mode == ConfidenceMode::per_pixel)
        pl.weights.data()[static_cast<long long>(n) * hw + pix] = conf ? 1.0 : 0.0;
    }
    if (mode == ConfidenceMode::per_image) {
      real q = static_cast<real>(confident) / static_cast<real>(hw);
      for (long long pix = 0; pix < hw; ++pix)
        pl.weights.data()[static_cast<long long>(n) * hw + pix] = q;
    }
  }
  return pl;
}

// spatial crop of labels and weights, e.g. to cut the detail-box pseudo-label
// out of the context one
inline PseudoLabel crop_pseudo_label(const PseudoLabel& pl, int top, int left, int h, int w) {
  PseudoLabel out;
  out.labels = ops::crop(nullptr, pl.labels, top, left, h, w);
  out.weights = ops::crop(nullptr, pl.weights, top, left, h, w);
  return out;
}

}  // namespace hrda
