// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "hrda/tensor.hpp"

namespace hrda {
namespace ops {

inline int div_floor(int a, int b) {
  int q = a / b, r = a % b;
  return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}
inline int div_ceil(int a, int b) { return -div_floor(-a, b); }

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  check(a.same_shape(b), std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline Tensor add(Graph* g, const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  bool tr = tracked(g, {&a, &b});
  Tensor out = Tensor::zeros(a.shape(), tr);
  const real* pa = a.data();
  const real* pb = b.data();
  real* po = out.data();
  long long n = a.size();
  for (long long i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (tr) {
    Tensor a_ = a, b_ = b, o_ = out;
    g->record([a_, b_, o_]() mutable {
      const real* go = o_.grad();
      long long n = o_.size();
      if (a_.requires_grad()) {
        real* ga = a_.grad();
        for (long long i = 0; i < n; ++i) ga[i] += go[i];
      }
      if (b_.requires_grad()) {
        real* gb = b_.grad();
        for (long long i = 0; i < n; ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

inline Tensor mul(Graph* g, const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  bool tr = tracked(g, {&a, &b});
  Tensor out = Tensor::zeros(a.shape(), tr);
  const real* pa = a.data();
  const real* pb = b.data();
  real* po = out.data();
  long long n = a.size();
  for (long long i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (tr) {
    Tensor a_ = a, b_ = b, o_ = out;
    g->record([a_, b_, o_]() mutable {
      const real* go = o_.grad();
      long long n = o_.size();
      if (a_.requires_grad()) {
        real* ga = a_.grad();
        const real* pb = b_.data();
        for (long long i = 0; i < n; ++i) ga[i] += go[i] * pb[i];
      }
      if (b_.requires_grad()) {
        real* gb = b_.grad();
        const real* pa = a_.data();
        for (long long i = 0; i < n; ++i) gb[i] += go[i] * pa[i];
      }
    });
  }
  return out;
}

// s*x + t
inline Tensor affine(Graph* g, const Tensor& x, real s, real t) {
  bool tr = tracked(g, {&x});
  Tensor out = Tensor::zeros(x.shape(), tr);
  const real* px = x.data();
  real* po = out.data();
  long long n = x.size();
  for (long long i = 0; i < n; ++i) po[i] = s * px[i] + t;
  if (tr) {
    Tensor x_ = x, o_ = out;
    g->record([x_, o_, s]() mutable {
      if (!x_.requires_grad()) return;
      const real* go = o_.grad();
      real* gx = x_.grad();
      long long n = o_.size();
      for (long long i = 0; i < n; ++i) gx[i] += s * go[i];
    });
  }
  return out;
}

inline Tensor relu(Graph* g, const Tensor& x) {
  bool tr = tracked(g, {&x});
  Tensor out = Tensor::zeros(x.shape(), tr);
  const real* px = x.data();
  real* po = out.data();
  long long n = x.size();
  for (long long i = 0; i < n; ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;
  if (tr) {
    Tensor x_ = x, o_ = out;
    g->record([x_, o_]() mutable {
      if (!x_.requires_grad()) return;
      const real* go = o_.grad();
      const real* px = x_.data();
      real* gx = x_.grad();
      long long n = o_.size();
      for (long long i = 0; i < n; ++i)
        if (px[i] > 0.0) gx[i] += go[i];
    });
  }
  return out;
}

inline Tensor sigmoid(Graph* g, const Tensor& x) {
  bool tr = tracked(g, {&x});
  Tensor out = Tensor::zeros(x.shape(), tr);
  const real* px = x.data();
  real* po = out.data();
  long long n = x.size();
  for (long long i = 0; i < n; ++i) {
    real v = px[i];
    if (v >= 0.0) {
      po[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      real e = std::exp(v);
      po[i] = e / (1.0 + e);
    }
  }
  if (tr) {
    Tensor x_ = x, o_ = out;
    g->record([x_, o_]() mutable {
      if (!x_.requires_grad()) return;
      const real* go = o_.grad();
      const real* py = o_.data();
      real* gx = x_.grad();
      long long n = o_.size();
      for (long long i = 0; i < n; ++i) gx[i] += go[i] * py[i] * (1.0 - py[i]);
    });
  }
  return out;
}

namespace detail {

// spatial ops treat a rank>=2 tensor as [B, H, W] with B = product of leading dims
struct Spatial {
  long long b;
  int h, w;
};

inline Spatial spatial(const Tensor& t, const char* op) {
  check(t.rank() >= 2, std::string(op) + ": tensor rank must be >= 2, got " + shape_str(t));
  int h = t.dim(t.rank() - 2);
  int w = t.dim(t.rank() - 1);
  long long b = t.size() / (static_cast<long long>(h) * w);
  return {b, h, w};
}

inline std::vector<int> with_hw(const Tensor& t, int h, int w) {
  std::vector<int> s = t.shape();
  s[s.size() - 2] = h;
  s[s.size() - 1] = w;
  return s;
}

}  // namespace detail

inline Tensor crop(Graph* g, const Tensor& x, int top, int left, int h, int w) {
  auto sp = detail::spatial(x, "crop");
  check(h > 0 && w > 0, "crop: window must be non-empty");
  check(top >= 0 && left >= 0 && top + h <= sp.h && left + w <= sp.w,
        "crop: window [" + std::to_string(top) + "," + std::to_string(top + h) + ")x[" +
            std::to_string(left) + "," + std::to_string(left + w) + ") outside " + shape_str(x));
  bool tr = tracked(g, {&x});
  Tensor out = Tensor::zeros(detail::with_hw(x, h, w), tr);
  const real* px = x.data();
  real* po = out.data();
  for (long long b = 0; b < sp.b; ++b)
    for (int i = 0; i < h; ++i) {
      const real* src = px + (b * sp.h + top + i) * sp.w + left;
      real* dst = po + (b * h + i) * w;
      std::copy(src, src + w, dst);
    }
  if (tr) {
    Tensor x_ = x, o_ = out;
    int H = sp.h, W = sp.w;
    long long B = sp.b;
    g->record([x_, o_, top, left, h, w, H, W, B]() mutable {
      if (!x_.requires_grad()) return;
      const real* go = o_.grad();
      real* gx = x_.grad();
      for (long long b = 0; b < B; ++b)
        for (int i = 0; i < h; ++i) {
          real* dst = gx + (b * H + top + i) * W + left;
          const real* src = go + (b * h + i) * w;
          for (int j = 0; j < w; ++j) dst[j] += src[j];
        }
    });
  }
  return out;
}

inline Tensor zero_pad(Graph* g, const Tensor& x, int out_h, int out_w, int top, int left) {
  auto sp = detail::spatial(x, "zero_pad");
  check(top >= 0 && left >= 0 && top + sp.h <= out_h && left + sp.w <= out_w,
        "zero_pad: placement [" + std::to_string(top) + "," + std::to_string(top + sp.h) + ")x[" +
            std::to_string(left) + "," + std::to_string(left + sp.w) + ") outside " +
            std::to_string(out_h) + "x" + std::to_string(out_w));
  bool tr = tracked(g, {&x});
  Tensor out = Tensor::zeros(detail::with_hw(x, out_h, out_w), tr);
  const real* px = x.data();
  real* po = out.data();
  for (long long b = 0; b < sp.b; ++b)
    for (int i = 0; i < sp.h; ++i) {
      const real* src = px + (b * sp.h + i) * sp.w;
      real* dst = po + (b * out_h + top + i) * out_w + left;
      std::copy(src, src + sp.w, dst);
    }
  if (tr) {
    Tensor x_ = x, o_ = out;
    int h = sp.h, w = sp.w;
    long long B = sp.b;
    g->record([x_, o_, out_h, out_w, top, left, h, w, B]() mutable {
      if (!x_.requires_grad()) return;
      const real* go = o_.grad();
      real* gx = x_.grad();
      for (long long b = 0; b < B; ++b)
        for (int i = 0; i < h; ++i) {
          const real* src = go + (b * out_h + top + i) * out_w + left;
          real* dst = gx + (b * h + i) * w;
          for (int j = 0; j < w; ++j) dst[j] += src[j];
        }
    });
  }
  return out;
}

// keeps rows [top,bottom) x cols [left,right), zeroes the rest
inline Tensor mask_region(Graph* g, const Tensor& x, int top, int bottom, int left, int right) {
  auto sp = detail::spatial(x, "mask_region");
  check(0 <= top && top <= bottom && bottom <= sp.h && 0 <= left && left <= right && right <= sp.w,
        "mask_region: region [" + std::to_string(top) + "," + std::to_string(bottom) + ")x[" +
            std::to_string(left) + "," + std::to_string(right) + ") outside " + shape_str(x));
  bool tr = tracked(g, {&x});
  Tensor out = Tensor::zeros(x.shape(), tr);
  const real* px = x.data();
  real* po = out.data();
  for (long long b = 0; b < sp.b; ++b)
    for (int i = top; i < bottom; ++i) {
      long long off = (b * sp.h + i) * sp.w;
      for (int j = left; j < right; ++j) po[off + j] = px[off + j];
    }
  if (tr) {
    Tensor x_ = x, o_ = out;
    int H = sp.h, W = sp.w;
    long long B = sp.b;
    g->record([x_, o_, top, bottom, left, right, H, W, B]() mutable {
      if (!x_.requires_grad()) return;
      const real* go = o_.grad();
      real* gx = x_.grad();
      for (long long b = 0; b < B; ++b)
        for (int i = top; i < bottom; ++i) {
          long long off = (b * H + i) * W;
          for (int j = left; j < right; ++j) gx[off + j] += go[off + j];
        }
    });
  }
  return out;
}

inline Tensor conv2d(Graph* g, const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                     int pad) {
  check(x.rank() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(x));
  check(w.rank() == 4, "conv2d: weight must be [Co,Ci,kh,kw], got " + shape_str(w));
  check(b.rank() == 1, "conv2d: bias must be [Co], got " + shape_str(b));
  int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  int Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  check(w.dim(1) == Ci, "conv2d: input has " + std::to_string(Ci) +
                            " channels (dim 1) but weight expects " + std::to_string(w.dim(1)));
  check(b.dim(0) == Co, "conv2d: bias size " + std::to_string(b.dim(0)) + " != out channels " +
                            std::to_string(Co));
  check(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel dims must be odd");
  check(stride >= 1, "conv2d: stride must be >= 1");
  check(pad >= 0, "conv2d: pad must be >= 0");
  check(H + 2 * pad >= kh && W + 2 * pad >= kw, "conv2d: kernel larger than padded input");
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;

  bool tr = tracked(g, {&x, &w, &b});
  Tensor out = Tensor::zeros({N, Co, Ho, Wo}, tr);
  const real* px = x.data();
  const real* pw = w.data();
  const real* pb = b.data();
  real* po = out.data();

  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Co; ++co) {
      real* plane = po + (static_cast<long long>(n) * Co + co) * Ho * Wo;
      real bias = pb[co];
      for (int i = 0; i < Ho * Wo; ++i) plane[i] = bias;
      for (int ci = 0; ci < Ci; ++ci)
        for (int ky = 0; ky < kh; ++ky) {
          int oy_lo = std::max(0, div_ceil(pad - ky, stride));
          int oy_hi = std::min(Ho, div_floor(H - 1 - ky + pad, stride) + 1);
          for (int kx = 0; kx < kw; ++kx) {
            real wv = pw[((static_cast<long long>(co) * Ci + ci) * kh + ky) * kw + kx];
            if (wv == 0.0) continue;
            int ox_lo = std::max(0, div_ceil(pad - kx, stride));
            int ox_hi = std::min(Wo, div_floor(W - 1 - kx + pad, stride) + 1);
            for (int oy = oy_lo; oy < oy_hi; ++oy) {
              const real* in_row =
                  px + ((static_cast<long long>(n) * Ci + ci) * H + oy * stride + ky - pad) * W;
              real* out_row = plane + static_cast<long long>(oy) * Wo;
              for (int ox = ox_lo; ox < ox_hi; ++ox)
                out_row[ox] += wv * in_row[ox * stride + kx - pad];
            }
          }
        }
    }

  if (tr) {
    Tensor x_ = x, w_ = w, b_ = b, o_ = out;
    g->record([x_, w_, b_, o_, N, Ci, H, W, Co, kh, kw, Ho, Wo, stride, pad]() mutable {
      const real* go = o_.grad();
      if (b_.requires_grad()) {
        real* gb = b_.grad();
        for (int n = 0; n < N; ++n)
          for (int co = 0; co < Co; ++co) {
            const real* plane = go + (static_cast<long long>(n) * Co + co) * Ho * Wo;
            real s = 0.0;
            for (int i = 0; i < Ho * Wo; ++i) s += plane[i];
            gb[co] += s;
          }
      }
      if (w_.requires_grad()) {
        real* gw = w_.grad();
        const real* px = x_.data();
        for (int n = 0; n < N; ++n)
          for (int co = 0; co < Co; ++co) {
            const real* plane = go + (static_cast<long long>(n) * Co + co) * Ho * Wo;
            for (int ci = 0; ci < Ci; ++ci)
              for (int ky = 0; ky < kh; ++ky) {
                int oy_lo = std::max(0, div_ceil(pad - ky, stride));
                int oy_hi = std::min(Ho, div_floor(H - 1 - ky + pad, stride) + 1);
                for (int kx = 0; kx < kw; ++kx) {
                  int ox_lo = std::max(0, div_ceil(pad - kx, stride));
                  int ox_hi = std::min(Wo, div_floor(W - 1 - kx + pad, stride) + 1);
                  real s = 0.0;
                  for (int oy = oy_lo; oy < oy_hi; ++oy) {
                    const real* in_row =
                        px +
                        ((static_cast<long long>(n) * Ci + ci) * H + oy * stride + ky - pad) * W;
                    const real* go_row = plane + static_cast<long long>(oy) * Wo;
                    for (int ox = ox_lo; ox < ox_hi; ++ox)
                      s += go_row[ox] * in_row[ox * stride + kx - pad];
                  }
                  gw[((static_cast<long long>(co) * Ci + ci) * kh + ky) * kw + kx] += s;
                }
              }
          }
      }
      if (x_.requires_grad()) {
        real* gx = x_.grad();
        const real* pw = w_.data();
        for (int n = 0; n < N; ++n)
          for (int co = 0; co < Co; ++co) {
            const real* plane = go + (static_cast<long long>(n) * Co + co) * Ho * Wo;
            for (int ci = 0; ci < Ci; ++ci)
              for (int ky = 0; ky < kh; ++ky) {
                int oy_lo = std::max(0, div_ceil(pad - ky, stride));
                int oy_hi = std::min(Ho, div_floor(H - 1 - ky + pad, stride) + 1);
                for (int kx = 0; kx < kw; ++kx) {
                  real wv = pw[((static_cast<long long>(co) * Ci + ci) * kh + ky) * kw + kx];
                  if (wv == 0.0) continue;
                  int ox_lo = std::max(0, div_ceil(pad - kx, stride));
                  int ox_hi = std::min(Wo, div_floor(W - 1 - kx + pad, stride) + 1);
                  for (int oy = oy_lo; oy < oy_hi; ++oy) {
                    real* gx_row =
                        gx +
                        ((static_cast<long long>(n) * Ci + ci) * H + oy * stride + ky - pad) * W;
                    const real* go_row = plane + static_cast<long long>(oy) * Wo;
                    for (int ox = ox_lo; ox < ox_hi; ++ox)
                      gx_row[ox * stride + kx - pad] += wv * go_row[ox];
                  }
                }
              }
          }
      }
    });
  }
  return out;
}

namespace detail {

struct LerpAxis {
  std::vector<int> i0, i1;
  std::vector<real> f;
};

// align-corners=false source coordinates, clamped to the valid range
inline LerpAxis lerp_axis(int in, int out, int num, int den) {
  LerpAxis ax;
  ax.i0.resize(static_cast<std::size_t>(out));
  ax.i1.resize(static_cast<std::size_t>(out));
  ax.f.resize(static_cast<std::size_t>(out));
  for (int o = 0; o < out; ++o) {
    real src = (static_cast<real>(o) + 0.5) * den / num - 0.5;
    if (src <= 0.0) {
      ax.i0[o] = ax.i1[o] = 0;
      ax.f[o] = 0.0;
    } else if (src >= static_cast<real>(in - 1)) {
      ax.i0[o] = ax.i1[o] = in - 1;
      ax.f[o] = 0.0;
    } else {
      int i0 = static_cast<int>(src);
      ax.i0[o] = i0;
      ax.i1[o] = i0 + 1;
      ax.f[o] = src - static_cast<real>(i0);
    }
  }
  return ax;
}

inline int scaled_dim(int in, int num, int den, const char* op) {
  long long t = static_cast<long long>(in) * num;
  check(t % den == 0, std::string(op) + ": size " + std::to_string(in) + " * " +
                          std::to_string(num) + "/" + std::to_string(den) +
                          " is not an integer");
  long long out = t / den;
  check(out >= 1, std::string(op) + ": output size must be >= 1");
  return static_cast<int>(out);
}

}  // namespace detail

// bilinear, align-corners=false; factor num/den applies to both spatial dims.
// forward uses the lerp form a+f*(b-a) so constant fields stay bit-exact.
inline Tensor resize_bilinear(Graph* g, const Tensor& x, int num, int den) {
  check(num >= 1 && den >= 1, "resize_bilinear: factor must be positive");
  auto sp = detail::spatial(x, "resize_bilinear");
  if (num == den) {
    // factor 1 is the identity; still a fresh tensor to keep ops pure
    bool tr = tracked(g, {&x});
    Tensor out = Tensor::from_data(x.shape(), std::vector<real>(x.data(), x.data() + x.size()), tr);
    if (tr) {
      Tensor x_ = x, o_ = out;
      g->record([x_, o_]() mutable {
        if (!x_.requires_grad()) return;
        const real* go = o_.grad();
        real* gx = x_.grad();
        long long n = o_.size();
        for (long long i = 0; i < n; ++i) gx[i] += go[i];
      });
    }
    return out;
  }
  int Ho = detail::scaled_dim(sp.h, num, den, "resize_bilinear");
  int Wo = detail::scaled_dim(sp.w, num, den, "resize_bilinear");
  auto ay = detail::lerp_axis(sp.h, Ho, num, den);
  auto ax = detail::lerp_axis(sp.w, Wo, num, den);

  bool tr = tracked(g, {&x});
  Tensor out = Tensor::zeros(detail::with_hw(x, Ho, Wo), tr);
  const real* px = x.data();
  real* po = out.data();
  for (long long b = 0; b < sp.b; ++b) {
    const real* plane = px + b * sp.h * sp.w;
    real* oplane = po + b * static_cast<long long>(Ho) * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      const real* r0 = plane + static_cast<long long>(ay.i0[oy]) * sp.w;
      const real* r1 = plane + static_cast<long long>(ay.i1[oy]) * sp.w;
      real fy = ay.f[oy];
      real* orow = oplane + static_cast<long long>(oy) * Wo;
      for (int ox = 0; ox < Wo; ++ox) {
        real fx = ax.f[ox];
        real t0 = r0[ax.i0[ox]] + fx * (r0[ax.i1[ox]] - r0[ax.i0[ox]]);
        real t1 = r1[ax.i0[ox]] + fx * (r1[ax.i1[ox]] - r1[ax.i0[ox]]);
        orow[ox] = t0 + fy * (t1 - t0);
      }
    }
  }
  if (tr) {
    Tensor x_ = x, o_ = out;
    int H = sp.h, W = sp.w;
    long long B = sp.b;
    g->record([x_, o_, ay, ax, H, W, Ho, Wo, B]() mutable {
      if (!x_.requires_grad()) return;
      const real* go = o_.grad();
      real* gx = x_.grad();
      for (long long b = 0; b < B; ++b) {
        real* gplane = gx + b * H * W;
        const real* gout = go + b * static_cast<long long>(Ho) * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          real fy = ay.f[oy];
          long long r0 = static_cast<long long>(ay.i0[oy]) * W;
          long long r1 = static_cast<long long>(ay.i1[oy]) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            real fx = ax.f[ox];
            real v = gout[static_cast<long long>(oy) * Wo + ox];
            gplane[r0 + ax.i0[ox]] += (1.0 - fy) * (1.0 - fx) * v;
            gplane[r0 + ax.i1[ox]] += (1.0 - fy) * fx * v;
            gplane[r1 + ax.i0[ox]] += fy * (1.0 - fx) * v;
            gplane[r1 + ax.i1[ox]] += fy * fx * v;
          }
        }
      }
    });
  }
  return out;
}

// nearest neighbour, top-left convention: src = floor(i * in / out)
inline Tensor resize_nearest(Graph* g, const Tensor& x, int num, int den) {
  check(num >= 1 && den >= 1, "resize_nearest: factor must be positive");
  auto sp = detail::spatial(x, "resize_nearest");
  int Ho = detail::scaled_dim(sp.h, num, den, "resize_nearest");
  int Wo = detail::scaled_dim(sp.w, num, den, "resize_nearest");
  std::vector<int> sy(static_cast<std::size_t>(Ho)), sx(static_cast<std::size_t>(Wo));
  for (int i = 0; i < Ho; ++i) sy[i] = static_cast<int>(static_cast<long long>(i) * sp.h / Ho);
  for (int j = 0; j < Wo; ++j) sx[j] = static_cast<int>(static_cast<long long>(j) * sp.w / Wo);

  bool tr = tracked(g, {&x});
  Tensor out = Tensor::zeros(detail::with_hw(x, Ho, Wo), tr);
  const real* px = x.data();
  real* po = out.data();
  for (long long b = 0; b < sp.b; ++b) {
    const real* plane = px + b * sp.h * sp.w;
    real* oplane = po + b * static_cast<long long>(Ho) * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      const real* row = plane + static_cast<long long>(sy[oy]) * sp.w;
      real* orow = oplane + static_cast<long long>(oy) * Wo;
      for (int ox = 0; ox < Wo; ++ox) orow[ox] = row[sx[ox]];
    }
  }
  if (tr) {
    Tensor x_ = x, o_ = out;
    int H = sp.h, W = sp.w;
    long long B = sp.b;
    g->record([x_, o_, sy, sx, H, W, Ho, Wo, B]() mutable {
      if (!x_.requires_grad()) return;
      const real* go = o_.grad();
      real* gx = x_.grad();
      for (long long b = 0; b < B; ++b)
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox)
            gx[(b * H + sy[oy]) * W + sx[ox]] +=
                go[(b * static_cast<long long>(Ho) + oy) * Wo + ox];
    });
  }
  return out;
}

inline Tensor mean(Graph* g, const Tensor& x) {
  bool tr = tracked(g, {&x});
  long long n = x.size();
  const real* px = x.data();
  real s = 0.0;
  for (long long i = 0; i < n; ++i) s += px[i];
  Tensor out = Tensor::from_data({1}, {s / static_cast<real>(n)}, tr);
  if (tr) {
    Tensor x_ = x, o_ = out;
    g->record([x_, o_, n]() mutable {
      if (!x_.requires_grad()) return;
      real go = o_.grad()[0] / static_cast<real>(n);
      real* gx = x_.grad();
      for (long long i = 0; i < n; ++i) gx[i] += go;
    });
  }
  return out;
}

// softmax over dim 1 of [N,C,H,W]
inline Tensor softmax(Graph* g, const Tensor& x) {
  check(x.rank() == 4, "softmax: input must be [N,C,H,W], got " + shape_str(x));
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  long long hw = static_cast<long long>(H) * W;
  bool tr = tracked(g, {&x});
  Tensor out = Tensor::zeros(x.shape(), tr);
  const real* px = x.data();
  real* po = out.data();
  for (int n = 0; n < N; ++n) {
    const real* base = px + static_cast<long long>(n) * C * hw;
    real* obase = po + static_cast<long long>(n) * C * hw;
    for (long long p = 0; p < hw; ++p) {
      real m = base[p];
      for (int c = 1; c < C; ++c) m = std::max(m, base[c * hw + p]);
      real z = 0.0;
      for (int c = 0; c < C; ++c) {
        real e = std::exp(base[c * hw + p] - m);
        obase[c * hw + p] = e;
        z += e;
      }
      for (int c = 0; c < C; ++c) obase[c * hw + p] /= z;
    }
  }
  if (tr) {
    Tensor x_ = x, o_ = out;
    g->record([x_, o_, N, C, hw]() mutable {
      if (!x_.requires_grad()) return;
      const real* go = o_.grad();
      const real* py = o_.data();
      real* gx = x_.grad();
      for (int n = 0; n < N; ++n) {
        long long base = static_cast<long long>(n) * C * hw;
        for (long long p = 0; p < hw; ++p) {
          real dot = 0.0;
          for (int c = 0; c < C; ++c) dot += go[base + c * hw + p] * py[base + c * hw + p];
          for (int c = 0; c < C; ++c)
            gx[base + c * hw + p] += py[base + c * hw + p] * (go[base + c * hw + p] - dot);
        }
      }
    });
  }
  return out;
}

constexpr real kLogClamp = 1e-12;

// L = -(1/(N*H*W)) sum q * y * log(max(p, 1e-12)); y must be exactly one-hot
inline Tensor weighted_nll(Graph* g, const Tensor& p, const Tensor& y, const Tensor& q) {
  check(p.rank() == 4, "weighted_nll: prediction must be [N,C,H,W], got " + shape_str(p));
  check_same_shape("weighted_nll", p, y);
  int N = p.dim(0), C = p.dim(1), H = p.dim(2), W = p.dim(3);
  check(q.rank() == 3 && q.dim(0) == N && q.dim(1) == H && q.dim(2) == W,
        "weighted_nll: weights must be [N,H,W] matching prediction, got " + shape_str(q));
  long long hw = static_cast<long long>(H) * W;
  const real* py = y.data();
  const real* pq = q.data();
  for (long long i = 0; i < q.size(); ++i)
    check(pq[i] >= 0.0 && pq[i] <= 1.0, "weighted_nll: weights must lie in [0,1]");
  for (int n = 0; n < N; ++n)
    for (long long pix = 0; pix < hw; ++pix) {
      real s = 0.0;
      for (int c = 0; c < C; ++c) {
        real v = py[(static_cast<long long>(n) * C + c) * hw + pix];
        check(v == 0.0 || v == 1.0, "weighted_nll: labels must be one-hot");
        s += v;
      }
      check(s == 1.0, "weighted_nll: labels must be one-hot");
    }

  bool tr = tracked(g, {&p});
  const real* pp = p.data();
  real norm = static_cast<real>(N) * static_cast<real>(hw);
  real loss = 0.0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      long long base = (static_cast<long long>(n) * C + c) * hw;
      long long qbase = static_cast<long long>(n) * hw;
      for (long long pix = 0; pix < hw; ++pix)
        if (py[base + pix] == 1.0)
          loss -= pq[qbase + pix] * std::log(std::max(pp[base + pix], kLogClamp));
    }
  Tensor out = Tensor::from_data({1}, {loss / norm}, tr);
  if (tr) {
    Tensor p_ = p, y_ = y, q_ = q, o_ = out;
    g->record([p_, y_, q_, o_, N, C, hw, norm]() mutable {
      if (!p_.requires_grad()) return;
      real go = o_.grad()[0];
      const real* pp = p_.data();
      const real* py = y_.data();
      const real* pq = q_.data();
      real* gp = p_.grad();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          long long base = (static_cast<long long>(n) * C + c) * hw;
          long long qbase = static_cast<long long>(n) * hw;
          for (long long pix = 0; pix < hw; ++pix)
            if (py[base + pix] == 1.0 && pp[base + pix] > kLogClamp)
              gp[base + pix] -= go * pq[qbase + pix] / (pp[base + pix] * norm);
        }
    });
  }
  return out;
}

// argmax over channels of [N,C,H,W]; ties resolve to the lowest class index
inline std::vector<int> channel_argmax(const Tensor& p) {
  check(p.rank() == 4, "channel_argmax: input must be [N,C,H,W], got " + shape_str(p));
  int N = p.dim(0), C = p.dim(1), H = p.dim(2), W = p.dim(3);
  long long hw = static_cast<long long>(H) * W;
  std::vector<int> out(static_cast<std::size_t>(N * hw));
  const real* pp = p.data();
  for (int n = 0; n < N; ++n)
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
      out[static_cast<std::size_t>(n * hw + pix)] = best;
    }
  return out;
}

}  // namespace ops
}  // namespace hrda
