// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

#include "hrda/ops.hpp"

namespace hrda {

// Central finite differences against the recorded backward pass. f must map
// (graph, input) to a scalar tensor. Returns max over coordinates of
// |analytic - numeric| / max(1, |analytic|).
inline real grad_check(const std::function<Tensor(Graph&, const Tensor&)>& f, const Tensor& x,
                       real eps = 1e-5) {
  Tensor xa = x.detached_copy();
  xa.set_requires_grad(true);
  Graph g;
  Tensor out = f(g, xa);
  check(out.defined() && out.size() == 1, "grad_check: objective must be scalar");
  g.backward(out);
  std::vector<real> analytic(xa.grad(), xa.grad() + xa.size());

  real worst = 0.0;
  for (long long i = 0; i < x.size(); ++i) {
    Tensor xp = x.detached_copy();
    Tensor xm = x.detached_copy();
    xp.data()[i] += eps;
    xm.data()[i] -= eps;
    Graph gp, gm;
    real fp = f(gp, xp).value();
    real fm = f(gm, xm).value();
    real numeric = (fp - fm) / (2.0 * eps);
    real a = analytic[static_cast<std::size_t>(i)];
    real rel = std::abs(a - numeric) / std::max(static_cast<real>(1.0), std::abs(a));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace hrda
