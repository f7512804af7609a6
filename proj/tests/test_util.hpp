// SPDX-License-Identifier: Apache-2.0
// Shared test helpers: independent oracles only, no reuse of library internals.
#pragma once

#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "hrda/common.hpp"
#include "hrda/tensor.hpp"

namespace testutil {

using hrda::real;
using hrda::Tensor;

inline Tensor random_tensor(const std::vector<int>& shape, hrda::Rng& rng, real lo = -1.0,
                            real hi = 1.0, bool requires_grad = false) {
  Tensor t = Tensor::zeros(shape, requires_grad);
  for (long long i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

// values bounded away from zero, for kinked ops like relu
inline Tensor random_tensor_off_zero(const std::vector<int>& shape, hrda::Rng& rng) {
  Tensor t = Tensor::zeros(shape);
  for (long long i = 0; i < t.size(); ++i) {
    real mag = rng.uniform(0.1, 1.0);
    t.data()[i] = rng.next() & 1 ? mag : -mag;
  }
  return t;
}

// random per-pixel probability simplex over channels of [N,C,H,W]
inline Tensor random_probs(int n, int c, int h, int w, hrda::Rng& rng) {
  Tensor t = Tensor::zeros({n, c, h, w});
  long long hw = static_cast<long long>(h) * w;
  for (int i = 0; i < n; ++i)
    for (long long p = 0; p < hw; ++p) {
      real z = 0.0;
      std::vector<real> e(static_cast<std::size_t>(c));
      for (int k = 0; k < c; ++k) {
        e[k] = std::exp(rng.uniform(-2.0, 2.0));
        z += e[k];
      }
      for (int k = 0; k < c; ++k) t.data()[(i * c + k) * hw + p] = e[k] / z;
    }
  return t;
}

inline Tensor one_hot_labels(int n, int c, int h, int w, hrda::Rng& rng) {
  Tensor t = Tensor::zeros({n, c, h, w});
  long long hw = static_cast<long long>(h) * w;
  for (int i = 0; i < n; ++i)
    for (long long p = 0; p < hw; ++p)
      t.data()[(i * c + rng.uniform_int(0, c - 1)) * hw + p] = 1.0;
  return t;
}

inline real max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return std::numeric_limits<real>::infinity();
  real m = 0.0;
  for (long long i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.same_shape(b) &&
         std::memcmp(a.data(), b.data(), sizeof(real) * static_cast<std::size_t>(a.size())) == 0;
}

inline bool all_finite(const Tensor& t) {
  for (long long i = 0; i < t.size(); ++i)
    if (!std::isfinite(t.data()[i])) return false;
  return true;
}

// Reference bilinear resize, align-corners=false, written in explicit weight
// form (w00*v00 + ...) as an independent check of the library's lerp form.
inline Tensor bilinear_ref(const Tensor& x, int num, int den) {
  int r = x.rank();
  int H = x.dim(r - 2), W = x.dim(r - 1);
  long long B = x.size() / (static_cast<long long>(H) * W);
  int Ho = static_cast<int>(static_cast<long long>(H) * num / den);
  int Wo = static_cast<int>(static_cast<long long>(W) * num / den);
  std::vector<int> shape = x.shape();
  shape[shape.size() - 2] = Ho;
  shape[shape.size() - 1] = Wo;
  Tensor out = Tensor::zeros(shape);
  auto src_of = [&](int o, int in, int outn) {
    real s = (o + 0.5) * static_cast<real>(in) / outn - 0.5;
    return std::min(std::max(s, 0.0), static_cast<real>(in - 1));
  };
  for (long long b = 0; b < B; ++b)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        real sy = src_of(oy, H, Ho), sx = src_of(ox, W, Wo);
        int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
        int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
        real fy = sy - y0, fx = sx - x0;
        const real* p = x.data() + b * H * W;
        real v = (1 - fy) * (1 - fx) * p[y0 * W + x0] + (1 - fy) * fx * p[y0 * W + x1] +
                 fy * (1 - fx) * p[y1 * W + x0] + fy * fx * p[y1 * W + x1];
        out.data()[(b * Ho + oy) * Wo + ox] = v;
      }
  return out;
}

// regularized incomplete gamma, for chi-square p-values (upper tail Q(a,x))
inline real gamma_q(real a, real x) {
  if (x < 0.0 || a <= 0.0) return 1.0;
  if (x == 0.0) return 1.0;
  real gln = std::lgamma(a);
  if (x < a + 1.0) {
    real ap = a, sum = 1.0 / a, del = sum;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * 1e-14) break;
    }
    real p = sum * std::exp(-x + a * std::log(x) - gln);
    return 1.0 - p;
  }
  real tiny = 1e-300;
  real b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
  for (int i = 1; i <= 500; ++i) {
    real an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    real del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-14) break;
  }
  return std::exp(-x + a * std::log(x) - gln) * h;
}

inline real chi2_pvalue(const std::vector<long long>& counts, const std::vector<real>& expected) {
  real stat = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    real diff = static_cast<real>(counts[i]) - expected[i];
    stat += diff * diff / expected[i];
  }
  return gamma_q(static_cast<real>(counts.size() - 1) / 2.0, stat / 2.0);
}

}  // namespace testutil
