// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hrda/ops.hpp"

namespace hrda {

// Crop geometry for the two-resolution scheme. All boxes live in HR image
// pixel coordinates, half-open [top,bottom) x [left,right). The context crop
// covers s*h_c x s*w_c HR pixels and is consumed at 1/s resolution; the detail
// crop covers h_d x w_d HR pixels at full resolution and nests inside the
// context crop. Offsets are multiples of k = s*o so both crops land on the
// feature grid of a network with output stride o.
struct CropConfig {
  int s = 2;
  int o = 4;
  int h_c = 32, w_c = 32;
  int h_d = 32, w_d = 32;

  int k() const { return s * o; }
  int context_hr_h() const { return s * h_c; }
  int context_hr_w() const { return s * w_c; }

  void validate() const {
    check(s >= 1 && o >= 1, "CropConfig: s and o must be >= 1");
    check(h_c > 0 && w_c > 0 && h_d > 0 && w_d > 0, "CropConfig: crop sizes must be positive");
    check(h_d <= s * h_c && w_d <= s * w_c,
          "CropConfig: detail crop must fit inside the HR context region");
    int kk = k();
    check(s * h_c % kk == 0 && s * w_c % kk == 0,
          "CropConfig: s*h_c and s*w_c must be divisible by k = s*o");
    check(h_d % kk == 0 && w_d % kk == 0, "CropConfig: h_d and w_d must be divisible by k = s*o");
    check(h_c % o == 0 && w_c % o == 0, "CropConfig: h_c and w_c must be divisible by o");
  }
};

struct CropBox {
  int top = 0, bottom = 0, left = 0, right = 0;

  int height() const { return bottom - top; }
  int width() const { return right - left; }

  bool contains(const CropBox& inner) const {
    return top <= inner.top && inner.bottom <= bottom && left <= inner.left &&
           inner.right <= right;
  }

  bool operator==(const CropBox& o) const = default;
};

inline void check_box_in_image(const CropBox& b, int H, int W, const char* what) {
  check(b.top >= 0 && b.left >= 0 && b.bottom <= H && b.right <= W && b.height() > 0 &&
            b.width() > 0,
        std::string(what) + ": box [" + std::to_string(b.top) + "," + std::to_string(b.bottom) +
            ")x[" + std::to_string(b.left) + "," + std::to_string(b.right) + ") outside " +
            std::to_string(H) + "x" + std::to_string(W) + " image");
}

// context offsets are uniform over {0, k, 2k, ...} such that the crop fits;
// row offset is drawn before column offset
inline CropBox sample_context_box(int H, int W, const CropConfig& cfg, Rng& rng) {
  cfg.validate();
  int ch = cfg.context_hr_h(), cw = cfg.context_hr_w();
  check(H >= ch && W >= cw, "sample_context_box: image " + std::to_string(H) + "x" +
                                std::to_string(W) + " smaller than HR context region " +
                                std::to_string(ch) + "x" + std::to_string(cw));
  int k = cfg.k();
  int top = k * static_cast<int>(rng.below(static_cast<std::uint64_t>((H - ch) / k) + 1));
  int left = k * static_cast<int>(rng.below(static_cast<std::uint64_t>((W - cw) / k) + 1));
  return {top, top + ch, left, left + cw};
}

// detail box in absolute HR coordinates, nested in the given context box
inline CropBox sample_detail_box(const CropBox& ctx, const CropConfig& cfg, Rng& rng) {
  cfg.validate();
  check(ctx.height() == cfg.context_hr_h() && ctx.width() == cfg.context_hr_w(),
        "sample_detail_box: context box size " + std::to_string(ctx.height()) + "x" +
            std::to_string(ctx.width()) + " does not match config");
  int k = cfg.k();
  int rt = k * static_cast<int>(rng.below(static_cast<std::uint64_t>((ctx.height() - cfg.h_d) / k) + 1));
  int rl = k * static_cast<int>(rng.below(static_cast<std::uint64_t>((ctx.width() - cfg.w_d) / k) + 1));
  return {ctx.top + rt, ctx.top + rt + cfg.h_d, ctx.left + rl, ctx.left + rl + cfg.w_d};
}

// crop the HR context region and downsample it by 1/s -> [..., h_c, w_c]
inline Tensor extract_context(const Tensor& img, const CropBox& box, const CropConfig& cfg) {
  auto sp = ops::detail::spatial(img, "extract_context");
  check_box_in_image(box, sp.h, sp.w, "extract_context");
  check(box.height() == cfg.context_hr_h() && box.width() == cfg.context_hr_w(),
        "extract_context: box size does not match s*h_c x s*w_c");
  Tensor hr = ops::crop(nullptr, img, box.top, box.left, box.height(), box.width());
  return ops::resize_bilinear(nullptr, hr, 1, cfg.s);
}

// full-resolution crop of the detail region -> [..., h_d, w_d]
inline Tensor extract_detail(const Tensor& img, const CropBox& box) {
  auto sp = ops::detail::spatial(img, "extract_detail");
  check_box_in_image(box, sp.h, sp.w, "extract_detail");
  return ops::crop(nullptr, img, box.top, box.left, box.height(), box.width());
}

}  // namespace hrda
