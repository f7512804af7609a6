// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "hrda/model.hpp"

namespace hrda {

// AdamW with decoupled weight decay and linear lr warmup. Head parameters
// (seg.*, att.*) use lr_head, encoder parameters use lr_encoder; the defaults
// keep a 10:1 head:encoder ratio.
struct AdamWConfig {
  real lr_head = 2e-3;
  real lr_encoder = 2e-4;
  real beta1 = 0.9;
  real beta2 = 0.999;
  real eps = 1e-8;
  real weight_decay = 0.01;
  int warmup_steps = 0;
};

class AdamW {
 public:
  AdamW(NetworkParams& params, const AdamWConfig& cfg) : cfg_(cfg) {
    check(cfg.lr_head >= 0.0 && cfg.lr_encoder >= 0.0, "AdamW: learning rates must be >= 0");
    check(cfg.warmup_steps >= 0, "AdamW: warmup_steps must be >= 0");
    for (auto& [name, t] : params.named()) {
      Slot s;
      s.p = t;
      s.lr = name.rfind("enc", 0) == 0 ? cfg.lr_encoder : cfg.lr_head;
      s.m.assign(static_cast<std::size_t>(t.size()), 0.0);
      s.v.assign(static_cast<std::size_t>(t.size()), 0.0);
      slots_.push_back(std::move(s));
    }
  }

  void zero_grad() {
    for (auto& s : slots_) s.p.zero_grad();
  }

  void step() {
    ++t_;
    real warm = cfg_.warmup_steps > 0
                    ? std::min(static_cast<real>(1.0), static_cast<real>(t_) / cfg_.warmup_steps)
                    : 1.0;
    real bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<real>(t_));
    real bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<real>(t_));
    for (auto& s : slots_) {
      real lr = s.lr * warm;
      real* p = s.p.data();
      const real* g = s.p.grad();
      for (long long i = 0; i < s.p.size(); ++i) {
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        real mhat = s.m[i] / bc1;
        real vhat = s.v[i] / bc2;
        p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
      }
    }
  }

  int steps_taken() const { return t_; }

 private:
  struct Slot {
    Tensor p;
    real lr = 0.0;
    std::vector<real> m, v;
  };
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  int t_ = 0;
};

}  // namespace hrda
