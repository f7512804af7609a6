// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hrda/checkpoint.hpp"
#include "hrda/data.hpp"
#include "hrda/inference.hpp"
#include "hrda/optim.hpp"

namespace hrda {

enum class AttentionSetting { learned, average, none };

struct TrainConfig {
  CropConfig crop;
  ModelConfig model;
  AdamWConfig optim;

  real lambda_d = 0.1;   // detail loss weight
  real lambda = 1.0;     // target loss weight
  real alpha = 0.999;    // teacher EMA
  real tau = 0.968;      // pseudo-label confidence threshold
  ConfidenceMode confidence = ConfidenceMode::per_image;

  int batch_size = 2;
  int steps = 2000;
  int eval_interval = 100;
  real warmup_frac = 0.1;
  std::uint64_t seed = 1;

  // ablation switches
  bool use_context_crop = true;
  bool use_detail_crop = true;
  AttentionSetting attention = AttentionSetting::learned;
  bool overlapping_pseudolabel = true;
  bool detail_loss = true;

  // target-student augmentation
  real aug_jitter = 0.08;
  real aug_noise = 0.02;

  void validate() const {
    crop.validate();
    model.validate();
    check(model.output_stride() == crop.o, "TrainConfig: model output stride " +
                                               std::to_string(model.output_stride()) +
                                               " does not match crop o " + std::to_string(crop.o));
    check(lambda_d >= 0.0 && lambda_d <= 1.0, "TrainConfig: lambda_d must lie in [0,1]");
    check(lambda >= 0.0, "TrainConfig: lambda must be >= 0");
    check(alpha >= 0.0 && alpha <= 1.0, "TrainConfig: alpha must lie in [0,1]");
    check(tau > 0.0 && tau < 1.0, "TrainConfig: tau must lie in (0,1)");
    check(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    check(steps >= 0, "TrainConfig: steps must be >= 0");
    check(eval_interval >= 1, "TrainConfig: eval_interval must be >= 1");
    check(warmup_frac >= 0.0 && warmup_frac <= 1.0, "TrainConfig: warmup_frac must lie in [0,1]");
    check(use_context_crop || use_detail_crop,
          "TrainConfig: at least one of use_context_crop/use_detail_crop must be on");
    check(aug_jitter >= 0.0 && aug_noise >= 0.0, "TrainConfig: augmentation strengths must be >= 0");
  }

  // how this configuration is evaluated at inference time; attention none
  // trains with a == 0, which fuses to the pure context prediction
  FusionVariant eval_variant() const {
    if (!use_detail_crop) return FusionVariant::context_only;
    if (!use_context_crop) return FusionVariant::detail_only;
    if (attention == AttentionSetting::average) return FusionVariant::average;
    if (attention == AttentionSetting::none) return FusionVariant::context_only;
    return FusionVariant::hrda;
  }
};

// ---------------------------------------------------------------------------
// config file parsing

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  fail("train config: key '" + key + "' expects a boolean, got '" + v + "'");
}

inline real parse_real(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    real r = std::stod(v, &used);
    check(used == v.size(), "");
    return r;
  } catch (const std::exception&) {
    fail("train config: key '" + key + "' expects a number, got '" + v + "'");
  }
}

inline int parse_int(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    int r = std::stoi(v, &used);
    check(used == v.size(), "");
    return r;
  } catch (const std::exception&) {
    fail("train config: key '" + key + "' expects an integer, got '" + v + "'");
  }
}

inline std::vector<int> parse_int_list(const std::string& v, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse_int(item, key));
  check(!out.empty(), "train config: key '" + key + "' expects a comma-separated list");
  return out;
}

}  // namespace detail

inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_int;
  using detail::parse_int_list;
  using detail::parse_real;

  if (key == "seed") {
    try {
      std::size_t used = 0;
      check(!value.empty() && value[0] != '-', "");
      cfg.seed = std::stoull(value, &used);
      check(used == value.size(), "");
    } catch (const std::exception&) {
      fail("train config: key 'seed' expects an unsigned integer, got '" + value + "'");
    }
  } else if (key == "steps") cfg.steps = parse_int(value, key);
  else if (key == "batch_size") cfg.batch_size = parse_int(value, key);
  else if (key == "eval_interval") cfg.eval_interval = parse_int(value, key);
  else if (key == "warmup_frac") cfg.warmup_frac = parse_real(value, key);
  else if (key == "lambda_d") cfg.lambda_d = parse_real(value, key);
  else if (key == "lambda") cfg.lambda = parse_real(value, key);
  else if (key == "alpha") cfg.alpha = parse_real(value, key);
  else if (key == "tau") cfg.tau = parse_real(value, key);
  else if (key == "confidence") {
    if (value == "per_image") cfg.confidence = ConfidenceMode::per_image;
    else if (value == "per_pixel") cfg.confidence = ConfidenceMode::per_pixel;
    else fail("train config: confidence must be per_image or per_pixel, got '" + value + "'");
  } else if (key == "s") cfg.crop.s = parse_int(value, key);
  else if (key == "o") cfg.crop.o = parse_int(value, key);
  else if (key == "h_c") cfg.crop.h_c = parse_int(value, key);
  else if (key == "w_c") cfg.crop.w_c = parse_int(value, key);
  else if (key == "h_d") cfg.crop.h_d = parse_int(value, key);
  else if (key == "w_d") cfg.crop.w_d = parse_int(value, key);
  else if (key == "num_classes") cfg.model.num_classes = parse_int(value, key);
  else if (key == "in_channels") cfg.model.in_channels = parse_int(value, key);
  else if (key == "kernel") cfg.model.kernel = parse_int(value, key);
  else if (key == "channels") cfg.model.channels = parse_int_list(value, key);
  else if (key == "strides") cfg.model.strides = parse_int_list(value, key);
  else if (key == "lr_head") cfg.optim.lr_head = parse_real(value, key);
  else if (key == "lr_encoder") cfg.optim.lr_encoder = parse_real(value, key);
  else if (key == "weight_decay") cfg.optim.weight_decay = parse_real(value, key);
  else if (key == "beta1") cfg.optim.beta1 = parse_real(value, key);
  else if (key == "beta2") cfg.optim.beta2 = parse_real(value, key);
  else if (key == "use_context_crop") cfg.use_context_crop = parse_bool(value, key);
  else if (key == "use_detail_crop") cfg.use_detail_crop = parse_bool(value, key);
  else if (key == "attention") {
    if (value == "learned") cfg.attention = AttentionSetting::learned;
    else if (value == "average") cfg.attention = AttentionSetting::average;
    else if (value == "none") cfg.attention = AttentionSetting::none;
    else fail("train config: attention must be learned, average or none, got '" + value + "'");
  } else if (key == "overlapping_pseudolabel") cfg.overlapping_pseudolabel = parse_bool(value, key);
  else if (key == "detail_loss") cfg.detail_loss = parse_bool(value, key);
  else if (key == "aug_jitter") cfg.aug_jitter = parse_real(value, key);
  else if (key == "aug_noise") cfg.aug_noise = parse_real(value, key);
  else fail("train config: unknown key '" + key + "'");
}

inline TrainConfig parse_config_text(const std::string& text) {
  TrainConfig cfg;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    std::size_t eq = line.find('=');
    check(eq != std::string::npos && eq > 0,
          "train config: line " + std::to_string(lineno) + " is not of the form key=value");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto strip = [](std::string& s) {
      auto a = s.find_first_not_of(" \t");
      auto b = s.find_last_not_of(" \t");
      s = a == std::string::npos ? "" : s.substr(a, b - a + 1);
    };
    strip(key);
    strip(value);
    set_config_value(cfg, key, value);
  }
  return cfg;
}

inline TrainConfig parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail("train config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

// ---------------------------------------------------------------------------
// batch assembly helpers

namespace detail {

inline Tensor stack_batch(const std::vector<Tensor>& xs) {
  check(!xs.empty(), "stack_batch: empty batch");
  std::vector<int> shape = {static_cast<int>(xs.size())};
  for (int i = 0; i < xs[0].rank(); ++i) shape.push_back(xs[0].dim(i));
  Tensor out = Tensor::zeros(shape);
  long long per = xs[0].size();
  for (std::size_t b = 0; b < xs.size(); ++b) {
    check(xs[b].same_shape(xs[0]), "stack_batch: ragged batch");
    std::copy(xs[b].data(), xs[b].data() + per, out.data() + static_cast<long long>(b) * per);
  }
  return out;
}

inline Tensor one_hot_crop(const Tensor& label, const CropBox& box, int C) {
  Tensor out = Tensor::zeros({C, box.height(), box.width()});
  for (int i = 0; i < box.height(); ++i)
    for (int j = 0; j < box.width(); ++j) {
      int cls = static_cast<int>(label.at({box.top + i, box.left + j}));
      check(cls >= 0 && cls < C, "train_step: label class id out of range");
      out.at({cls, i, j}) = 1.0;
    }
  return out;
}

inline Tensor augment_window(const Tensor& win, real jitter, real noise, Rng& rng) {
  Tensor out = win.detached_copy();
  int C = win.dim(0);
  long long per = win.size() / C;
  for (int c = 0; c < C; ++c) {
    real scale = 1.0 + rng.uniform(-jitter, jitter);
    real shift = rng.uniform(-jitter, jitter);
    real* p = out.data() + static_cast<long long>(c) * per;
    for (long long i = 0; i < per; ++i) p[i] = p[i] * scale + shift;
  }
  for (long long i = 0; i < out.size(); ++i) out.data()[i] += noise * rng.normal();
  return out;
}

inline void normalize_channels(Tensor& probs) {
  int N = probs.dim(0), C = probs.dim(1);
  long long hw = probs.size() / (static_cast<long long>(N) * C);
  for (int n = 0; n < N; ++n)
    for (long long p = 0; p < hw; ++p) {
      real s = 0.0;
      for (int c = 0; c < C; ++c) s += probs.data()[(static_cast<long long>(n) * C + c) * hw + p];
      check(s > 0.0, "normalize_channels: non-positive channel sum");
      for (int c = 0; c < C; ++c) probs.data()[(static_cast<long long>(n) * C + c) * hw + p] /= s;
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// training state and step

struct StepStats {
  real total = 0.0;
  real src_fused = 0.0, src_detail = 0.0;
  real tgt_fused = 0.0, tgt_detail = 0.0;
  real pseudo_weight = 0.0;  // mean confidence weight of the target batch
};

struct TrainState {
  TrainConfig cfg;
  NetworkParams student;
  TeacherState teacher;
  AdamW opt;
  Rng rng_batch_src, rng_batch_tgt, rng_crop_src, rng_crop_tgt, rng_aug;
  long long step = 0;

  static TrainState init(const TrainConfig& cfg) {
    cfg.validate();
    Rng init_rng(mix_seed(cfg.seed, 0, 0x171ULL));
    NetworkParams student = NetworkParams::init(cfg.model, init_rng);
    TeacherState teacher = TeacherState::init_from(student, cfg.alpha);
    AdamWConfig oc = cfg.optim;
    oc.warmup_steps = static_cast<int>(cfg.warmup_frac * cfg.steps);
    AdamW opt(student, oc);
    return TrainState{cfg,
                      student,
                      std::move(teacher),
                      std::move(opt),
                      Rng(mix_seed(cfg.seed, 1, 0xB5EBULL)),
                      Rng(mix_seed(cfg.seed, 2, 0xB5E7ULL)),
                      Rng(mix_seed(cfg.seed, 3, 0xC509ULL)),
                      Rng(mix_seed(cfg.seed, 4, 0xC50AULL)),
                      Rng(mix_seed(cfg.seed, 5, 0xA060ULL)),
                      0};
  }
};

namespace detail {

struct CropBatch {
  CropBox ctx, det;       // shared by the batch; det is absolute image coords
  Tensor x_ctx, x_det;    // [B,3,h_c,w_c], [B,3,h_d,w_d]
  std::vector<Tensor> windows;  // clean HR context windows, each [3,s*h_c,s*w_c]
};

// one context+detail box pair per domain per step, applied to every image in
// the batch
inline CropBatch assemble_crops(const Dataset& ds, const std::vector<int>& idx,
                                const TrainConfig& cfg, Rng& crop_rng, Rng* aug_rng) {
  CropBatch cb;
  cb.ctx = sample_context_box(ds.height, ds.width, cfg.crop, crop_rng);
  if (cfg.use_detail_crop || !cfg.use_context_crop)
    cb.det = sample_detail_box(cb.ctx, cfg.crop, crop_rng);
  std::vector<Tensor> ctxs, dets;
  for (int i : idx) {
    const Tensor& img = ds.samples[static_cast<std::size_t>(i)].image;
    Tensor win = ops::crop(nullptr, img, cb.ctx.top, cb.ctx.left, cb.ctx.height(), cb.ctx.width());
    cb.windows.push_back(win);
    Tensor used = aug_rng ? augment_window(win, cfg.aug_jitter, cfg.aug_noise, *aug_rng) : win;
    if (cfg.use_context_crop) ctxs.push_back(ops::resize_bilinear(nullptr, used, 1, cfg.crop.s));
    if (cfg.use_detail_crop || !cfg.use_context_crop)
      dets.push_back(ops::crop(nullptr, used, cb.det.top - cb.ctx.top, cb.det.left - cb.ctx.left,
                               cfg.crop.h_d, cfg.crop.w_d));
  }
  if (!ctxs.empty()) cb.x_ctx = stack_batch(ctxs);
  if (!dets.empty()) cb.x_det = stack_batch(dets);
  return cb;
}

inline Tensor attention_for(Graph* g, const NetworkParams& params, const Tensor& x_ctx,
                            const TrainConfig& cfg) {
  int C = cfg.model.num_classes;
  int h = cfg.crop.h_c / cfg.crop.o, w = cfg.crop.w_c / cfg.crop.o;
  switch (cfg.attention) {
    case AttentionSetting::learned: return forward_attention(g, params, x_ctx);
    case AttentionSetting::average: return Tensor::full({x_ctx.dim(0), C, h, w}, 0.5);
    case AttentionSetting::none: return Tensor::zeros({x_ctx.dim(0), C, h, w});
  }
  fail("attention_for: unreachable");
}

struct ForwardOut {
  Prediction fused;     // probabilities on the fused grid
  Prediction det_pred;  // probabilities on the detail grid
  Prediction ctx_pred;  // probabilities on the context grid
};

inline ForwardOut student_forward(Graph* g, const NetworkParams& params, const CropBatch& cb,
                                  const TrainConfig& cfg) {
  ForwardOut out;
  if (cfg.use_context_crop) {
    Tensor y_c = ops::softmax(g, forward_seg(g, params, cb.x_ctx));
    out.ctx_pred = make_prediction(y_c, PredictionForm::probabilities, cb.ctx);
  }
  if (cfg.use_detail_crop || !cfg.use_context_crop) {
    Tensor y_d = ops::softmax(g, forward_seg(g, params, cb.x_det));
    out.det_pred = make_prediction(y_d, PredictionForm::probabilities, cb.det);
  }
  if (cfg.use_context_crop && cfg.use_detail_crop) {
    Tensor a = attention_for(g, params, cb.x_ctx, cfg);
    Tensor a_masked = mask_attention(g, a, cb.ctx, cb.det, cfg.crop);
    Prediction padded = pad_detail(g, out.det_pred, cb.ctx, cb.det, cfg.crop);
    out.fused = fuse(g, out.ctx_pred, padded, a_masked, cfg.crop);
  }
  return out;
}

// teacher pseudo-label on the clean HR context windows, at window pixel
// resolution
inline PseudoLabel teacher_pseudo_label(const TrainState& st, const CropBatch& cb) {
  const TrainConfig& cfg = st.cfg;
  const NetworkParams& tp = st.teacher.params;
  Tensor win = stack_batch(cb.windows);
  Tensor probs;
  if (!cfg.use_context_crop) {
    Tensor x_det = ops::crop(nullptr, win, cb.det.top - cb.ctx.top, cb.det.left - cb.ctx.left,
                             cfg.crop.h_d, cfg.crop.w_d);
    Tensor y_d = ops::softmax(nullptr, forward_seg(nullptr, tp, x_det));
    probs = ops::resize_bilinear(nullptr, y_d, cfg.crop.o, 1);
  } else {
    Tensor x_ctx = ops::resize_bilinear(nullptr, win, 1, cfg.crop.s);
    Tensor y_c = ops::softmax(nullptr, forward_seg(nullptr, tp, x_ctx));
    if (!cfg.use_detail_crop) {
      probs = ops::resize_bilinear(nullptr, y_c, cfg.crop.s * cfg.crop.o, 1);
    } else {
      int stride = cfg.overlapping_pseudolabel ? 0 : cfg.crop.h_d;
      WindowPlan plan = plan_windows(cb.ctx.height(), cb.ctx.width(), cfg.crop.h_d, cfg.crop.w_d,
                                     stride, stride);
      Prediction y_hr = sliding_hr_prediction(tp, win, plan);
      Tensor a = attention_for(nullptr, tp, x_ctx, cfg);
      Prediction fused = fuse_full(nullptr, make_prediction(y_c, PredictionForm::probabilities, cb.ctx),
                                   y_hr, a, cfg.crop);
      probs = ops::resize_bilinear(nullptr, fused.scores, cfg.crop.o, 1);
      // per-class attention leaves channel sums slightly off one
      normalize_channels(probs);
    }
  }
  CropBox frame = cfg.use_context_crop ? cb.ctx : cb.det;
  return make_pseudo_label(make_prediction(probs, PredictionForm::probabilities, frame), cfg.tau,
                           cfg.confidence);
}

inline Tensor ones_weights(const Tensor& y) { return Tensor::full({y.dim(0), y.dim(2), y.dim(3)}, 1.0); }

}  // namespace detail

inline std::vector<int> sample_indices(int n, int batch, Rng& rng) {
  check(n >= 1, "sample_indices: empty dataset");
  std::vector<int> idx(static_cast<std::size_t>(batch));
  for (int& v : idx) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
  return idx;
}

inline StepStats train_step(TrainState& st, const Dataset& source, const Dataset& target) {
  const TrainConfig& cfg = st.cfg;
  check(source.domain == Domain::source && target.domain == Domain::target,
        "train_step: datasets passed in the wrong order");
  for (const Sample& s : source.samples)
    check(s.has_label, "train_step: source samples must carry labels");

  real lambda_d = cfg.detail_loss && cfg.use_detail_crop && cfg.use_context_crop ? cfg.lambda_d : 0.0;
  Graph g;
  StepStats stats;

  // source branch
  std::vector<int> sidx = sample_indices(source.size(), cfg.batch_size, st.rng_batch_src);
  detail::CropBatch scb = detail::assemble_crops(source, sidx, cfg, st.rng_crop_src, nullptr);
  detail::ForwardOut sf = detail::student_forward(&g, st.student, scb, cfg);

  Tensor src_loss;
  if (cfg.use_context_crop && cfg.use_detail_crop) {
    std::vector<Tensor> yc, yd;
    for (int i : sidx) {
      const Tensor& lab = source.samples[static_cast<std::size_t>(i)].label;
      yc.push_back(detail::one_hot_crop(lab, scb.ctx, cfg.model.num_classes));
      yd.push_back(detail::one_hot_crop(lab, scb.det, cfg.model.num_classes));
    }
    LossParts parts;
    src_loss = hrda_source_loss(&g, sf.fused, sf.det_pred, detail::stack_batch(yc),
                                detail::stack_batch(yd), lambda_d, &parts);
    stats.src_fused = parts.fused;
    stats.src_detail = parts.detail;
  } else {
    const Prediction& pred = cfg.use_context_crop ? sf.ctx_pred : sf.det_pred;
    const CropBox& box = cfg.use_context_crop ? scb.ctx : scb.det;
    std::vector<Tensor> ys;
    for (int i : sidx)
      ys.push_back(detail::one_hot_crop(source.samples[static_cast<std::size_t>(i)].label, box,
                                        cfg.model.num_classes));
    Tensor y = detail::stack_batch(ys);
    src_loss = weighted_cross_entropy(&g, pred, y, detail::ones_weights(y));
    stats.src_fused = src_loss.value();
  }

  // target branch, inert when lambda is zero
  Tensor total = src_loss;
  if (cfg.lambda > 0.0) {
    std::vector<int> tidx = sample_indices(target.size(), cfg.batch_size, st.rng_batch_tgt);
    detail::CropBatch tcb = detail::assemble_crops(target, tidx, cfg, st.rng_crop_tgt, &st.rng_aug);
    PseudoLabel pl = detail::teacher_pseudo_label(st, tcb);
    detail::ForwardOut tf = detail::student_forward(&g, st.student, tcb, cfg);

    Tensor tgt_loss;
    if (cfg.use_context_crop && cfg.use_detail_crop) {
      PseudoLabel det_pl = crop_pseudo_label(pl, tcb.det.top - tcb.ctx.top,
                                             tcb.det.left - tcb.ctx.left, cfg.crop.h_d, cfg.crop.w_d);
      LossParts parts;
      tgt_loss = hrda_target_loss(&g, tf.fused, tf.det_pred, pl.labels, pl.weights, det_pl.labels,
                                  det_pl.weights, lambda_d, &parts);
      stats.tgt_fused = parts.fused;
      stats.tgt_detail = parts.detail;
    } else {
      const Prediction& pred = cfg.use_context_crop ? tf.ctx_pred : tf.det_pred;
      tgt_loss = weighted_cross_entropy(&g, pred, pl.labels, pl.weights);
      stats.tgt_fused = tgt_loss.value();
    }
    real qs = 0.0;
    for (long long i = 0; i < pl.weights.size(); ++i) qs += pl.weights.data()[i];
    stats.pseudo_weight = qs / static_cast<real>(pl.weights.size());
    total = ops::add(&g, src_loss, ops::affine(&g, tgt_loss, cfg.lambda, 0.0));
  }

  stats.total = total.value();
  st.opt.zero_grad();
  g.backward(total);
  st.opt.step();
  ema_update(st.teacher, st.student);
  st.step++;
  return stats;
}

// ---------------------------------------------------------------------------
// evaluation and the experiment loop

struct EvalStats {
  IouReport report;
  real att_small = 0.0;  // mean ground-truth-class attention over small+thin pixels
  real att_large = 0.0;  // same over large-stuff pixels
};

inline EvalStats evaluate(const NetworkParams& params, const Dataset& eval_ds,
                          const TrainConfig& cfg) {
  check(eval_ds.size() > 0, "evaluate: empty dataset");
  ConfusionMatrix cm(cfg.model.num_classes);
  real att_small_sum = 0.0, att_large_sum = 0.0;
  long long small_px = 0, large_px = 0;
  for (const Sample& s : eval_ds.samples) {
    check(s.has_label, "evaluate: evaluation samples must carry labels");
    InferenceResult res = infer_image_full(params, s.image, cfg.crop, SlidingMode::overlapping,
                                           cfg.eval_variant());
    cm.add(res.class_map, s.label);
    for (int i = 0; i < eval_ds.height; ++i)
      for (int j = 0; j < eval_ds.width; ++j) {
        int cls = static_cast<int>(s.label.at({i, j}));
        real a = res.attention.at({cls, i, j});
        if (cls == cls_small_object || cls == cls_thin_structure) {
          att_small_sum += a;
          ++small_px;
        } else if (cls == cls_large_stuff) {
          att_large_sum += a;
          ++large_px;
        }
      }
  }
  EvalStats es;
  es.report = iou_from_confusion(cm);
  es.att_small = small_px > 0 ? att_small_sum / static_cast<real>(small_px) : 0.0;
  es.att_large = large_px > 0 ? att_large_sum / static_cast<real>(large_px) : 0.0;
  return es;
}

struct EvalRow {
  long long step = 0;
  StepStats mean_loss;
  EvalStats eval;
};

struct RunResult {
  std::vector<EvalRow> history;
  real final_miou = 0.0;
  std::string csv_path, checkpoint_path;
};

namespace detail {

inline std::string csv_header(int num_classes) {
  std::string h =
      "step,loss_total,loss_src_fused,loss_src_detail,loss_tgt_fused,loss_tgt_detail,pseudo_weight";
  for (int c = 0; c < num_classes; ++c) h += ",iou_" + std::to_string(c);
  h += ",miou,att_small,att_large";
  return h;
}

inline void append_csv_row(std::string& out, const EvalRow& r, int num_classes) {
  char buf[64];
  auto put = [&](real v) {
    std::snprintf(buf, sizeof(buf), ",%.10g", v);
    out += buf;
  };
  out += std::to_string(r.step);
  put(r.mean_loss.total);
  put(r.mean_loss.src_fused);
  put(r.mean_loss.src_detail);
  put(r.mean_loss.tgt_fused);
  put(r.mean_loss.tgt_detail);
  put(r.mean_loss.pseudo_weight);
  for (int c = 0; c < num_classes; ++c) put(r.eval.report.iou[static_cast<std::size_t>(c)]);
  put(r.eval.report.miou);
  put(r.eval.att_small);
  put(r.eval.att_large);
  out += "\n";
}

}  // namespace detail

inline RunResult run_experiment(const TrainConfig& cfg, const Dataset& source,
                                const Dataset& target_train, const Dataset& target_eval,
                                const std::string& out_dir) {
  namespace fs = std::filesystem;
  cfg.validate();
  fs::create_directories(out_dir);

  TrainState st = TrainState::init(cfg);
  RunResult rr;
  std::string csv = detail::csv_header(cfg.model.num_classes) + "\n";

  StepStats acc;
  int acc_n = 0;
  auto flush_eval = [&](long long step) {
    StepStats mean;
    if (acc_n > 0) {
      mean = acc;
      real n = static_cast<real>(acc_n);
      mean.total /= n;
      mean.src_fused /= n;
      mean.src_detail /= n;
      mean.tgt_fused /= n;
      mean.tgt_detail /= n;
      mean.pseudo_weight /= n;
    }
    EvalRow row{step, mean, evaluate(st.student, target_eval, cfg)};
    rr.history.push_back(row);
    detail::append_csv_row(csv, row, cfg.model.num_classes);
    acc = StepStats{};
    acc_n = 0;
  };

  flush_eval(0);
  for (int t = 1; t <= cfg.steps; ++t) {
    StepStats s = train_step(st, source, target_train);
    acc.total += s.total;
    acc.src_fused += s.src_fused;
    acc.src_detail += s.src_detail;
    acc.tgt_fused += s.tgt_fused;
    acc.tgt_detail += s.tgt_detail;
    acc.pseudo_weight += s.pseudo_weight;
    acc_n++;
    if (t % cfg.eval_interval == 0 || t == cfg.steps) flush_eval(t);
  }

  rr.final_miou = rr.history.back().eval.report.miou;
  rr.csv_path = (fs::path(out_dir) / "metrics.csv").string();
  std::ofstream cf(rr.csv_path, std::ios::binary);
  if (!cf) fail("run_experiment: cannot write " + rr.csv_path);
  cf << csv;
  cf.close();
  rr.checkpoint_path = (fs::path(out_dir) / "checkpoint.bin").string();
  save_params(st.student, rr.checkpoint_path);
  return rr;
}

}  // namespace hrda
