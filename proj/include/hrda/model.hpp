// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <utility>
#include <vector>

#include "hrda/ops.hpp"

namespace hrda {

// Toy fully-convolutional segmenter: a stack of 3x3 conv+relu blocks with
// per-block stride, then two 1x1 heads on the shared features (segmentation
// logits and per-class scale attention). Default output stride is 4.
struct ModelConfig {
  int in_channels = 3;
  int num_classes = 5;
  int kernel = 3;
  std::vector<int> channels = {16, 32, 64};
  std::vector<int> strides = {2, 2, 1};

  int output_stride() const {
    int o = 1;
    for (int s : strides) o *= s;
    return o;
  }

  void validate() const {
    check(in_channels > 0 && num_classes > 0, "ModelConfig: channel counts must be positive");
    check(kernel % 2 == 1, "ModelConfig: kernel must be odd");
    check(!channels.empty() && channels.size() == strides.size(),
          "ModelConfig: channels and strides must be non-empty and equal length");
    for (int c : channels) check(c > 0, "ModelConfig: channels must be positive");
    for (int s : strides) check(s >= 1, "ModelConfig: strides must be >= 1");
  }
};

struct NetworkParams {
  ModelConfig cfg;
  std::vector<Tensor> enc_w, enc_b;
  Tensor seg_w, seg_b, att_w, att_b;

  // Kaiming-uniform fan-in init, zero biases. Draw order is fixed (blocks in
  // order, weight before bias, then seg head, then attention head) so a seed
  // pins the whole initialization.
  static NetworkParams init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    NetworkParams p;
    p.cfg = cfg;
    int ci = cfg.in_channels;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
      int co = cfg.channels[i];
      p.enc_w.push_back(kaiming(rng, co, ci, cfg.kernel));
      p.enc_b.push_back(Tensor::zeros({co}, true));
      ci = co;
    }
    p.seg_w = kaiming(rng, cfg.num_classes, ci, 1);
    p.seg_b = Tensor::zeros({cfg.num_classes}, true);
    p.att_w = kaiming(rng, cfg.num_classes, ci, 1);
    p.att_b = Tensor::zeros({cfg.num_classes}, true);
    return p;
  }

  std::vector<std::pair<std::string, Tensor>> named() const {
    std::vector<std::pair<std::string, Tensor>> v;
    for (std::size_t i = 0; i < enc_w.size(); ++i) {
      v.emplace_back("enc" + std::to_string(i) + ".w", enc_w[i]);
      v.emplace_back("enc" + std::to_string(i) + ".b", enc_b[i]);
    }
    v.emplace_back("seg.w", seg_w);
    v.emplace_back("seg.b", seg_b);
    v.emplace_back("att.w", att_w);
    v.emplace_back("att.b", att_b);
    return v;
  }

  NetworkParams clone() const {
    NetworkParams p;
    p.cfg = cfg;
    for (const Tensor& t : enc_w) p.enc_w.push_back(t.detached_copy());
    for (const Tensor& t : enc_b) p.enc_b.push_back(t.detached_copy());
    p.seg_w = seg_w.detached_copy();
    p.seg_b = seg_b.detached_copy();
    p.att_w = att_w.detached_copy();
    p.att_b = att_b.detached_copy();
    return p;
  }

  void set_requires_grad(bool b) {
    for (auto& [name, t] : named()) {
      Tensor h = t;
      h.set_requires_grad(b);
    }
  }

  void zero_grad() {
    for (auto& [name, t] : named()) {
      Tensor h = t;
      h.zero_grad();
    }
  }

 private:
  static Tensor kaiming(Rng& rng, int co, int ci, int k) {
    Tensor w = Tensor::zeros({co, ci, k, k}, true);
    real bound = std::sqrt(6.0 / (static_cast<real>(ci) * k * k));
    for (long long i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
    return w;
  }
};

inline Tensor encode(Graph* g, const NetworkParams& p, const Tensor& x) {
  check(x.rank() == 4, "encode: input must be [N,C,H,W], got " + shape_str(x));
  check(x.dim(1) == p.cfg.in_channels, "encode: input has " + std::to_string(x.dim(1)) +
                                           " channels, model expects " +
                                           std::to_string(p.cfg.in_channels));
  int o = p.cfg.output_stride();
  check(x.dim(2) % o == 0 && x.dim(3) % o == 0,
        "encode: input size " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
            " not divisible by output stride " + std::to_string(o));
  Tensor h = x;
  for (std::size_t i = 0; i < p.enc_w.size(); ++i)
    h = ops::relu(g, ops::conv2d(g, h, p.enc_w[i], p.enc_b[i], p.cfg.strides[i], p.cfg.kernel / 2));
  return h;
}

inline Tensor seg_head(Graph* g, const NetworkParams& p, const Tensor& features) {
  return ops::conv2d(g, features, p.seg_w, p.seg_b, 1, 0);
}

inline Tensor attention_head(Graph* g, const NetworkParams& p, const Tensor& features) {
  return ops::sigmoid(g, ops::conv2d(g, features, p.att_w, p.att_b, 1, 0));
}

// segmentation logits at 1/o resolution
inline Tensor forward_seg(Graph* g, const NetworkParams& p, const Tensor& x) {
  return seg_head(g, p, encode(g, p, x));
}

// per-class scale attention in (0,1) at 1/o resolution
inline Tensor forward_attention(Graph* g, const NetworkParams& p, const Tensor& x) {
  return attention_head(g, p, encode(g, p, x));
}

struct TeacherState {
  NetworkParams params;
  real alpha = 0.999;

  static TeacherState init_from(const NetworkParams& student, real alpha) {
    check(alpha >= 0.0 && alpha <= 1.0, "TeacherState: alpha must lie in [0,1]");
    TeacherState t;
    t.params = student.clone();
    t.params.set_requires_grad(false);
    t.alpha = alpha;
    return t;
  }
};

// phi <- alpha*phi + (1-alpha)*theta, applied to every parameter
inline void ema_update(TeacherState& teacher, const NetworkParams& student) {
  auto tp = teacher.params.named();
  auto sp = student.named();
  check(tp.size() == sp.size(), "ema_update: parameter lists differ in length");
  for (std::size_t i = 0; i < tp.size(); ++i) {
    Tensor t = tp[i].second;
    const Tensor& s = sp[i].second;
    check(t.same_shape(s), "ema_update: shape mismatch for " + tp[i].first + ": " + shape_str(t) +
                               " vs " + shape_str(s));
    real a = teacher.alpha;
    real* pt = t.data();
    const real* ps = s.data();
    for (long long j = 0; j < t.size(); ++j) pt[j] = a * pt[j] + (1.0 - a) * ps[j];
  }
}

}  // namespace hrda
