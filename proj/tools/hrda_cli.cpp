// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "hrda/trainer.hpp"

namespace fs = std::filesystem;

namespace {

hrda::TrainConfig resolve_config(const std::string& config_path,
                                 const std::vector<std::string>& sets) {
  hrda::TrainConfig cfg =
      config_path.empty() ? hrda::TrainConfig{} : hrda::parse_config_file(config_path);
  for (const std::string& kv : sets) {
    std::size_t eq = kv.find('=');
    hrda::check(eq != std::string::npos && eq > 0,
                "--set expects key=value, got '" + kv + "'");
    hrda::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

hrda::Tensor image_from_png(const std::string& path) {
  hrda::png::PngImage pi = hrda::png::read_png(path);
  hrda::check(pi.color_type == 2, path + " must be an 8-bit RGB image");
  hrda::Tensor img = hrda::Tensor::zeros({3, pi.height, pi.width});
  for (int y = 0; y < pi.height; ++y)
    for (int x = 0; x < pi.width; ++x)
      for (int c = 0; c < 3; ++c)
        img.at({c, y, x}) = pi.data[(static_cast<std::size_t>(y) * pi.width + x) * 3 + c] / 255.0;
  return img;
}

void write_class_map(const std::string& path, const hrda::Tensor& class_map) {
  int H = class_map.dim(0), W = class_map.dim(1);
  std::vector<std::uint8_t> idx(static_cast<std::size_t>(H) * W);
  for (long long p = 0; p < class_map.size(); ++p)
    idx[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(class_map.data()[p]);
  hrda::png::write_png_palette(path, W, H, idx, hrda::class_palette());
}

void write_unit_field(const std::string& path, const hrda::Tensor& field) {
  int H = field.dim(0), W = field.dim(1);
  std::vector<std::uint8_t> gray(static_cast<std::size_t>(H) * W);
  for (long long p = 0; p < field.size(); ++p) {
    hrda::real v = std::clamp(field.data()[p], hrda::real(0), hrda::real(1));
    gray[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  hrda::png::write_png_gray(path, W, H, gray);
}

int cmd_generate(const std::string& out, int count, const std::string& domain,
                 std::uint64_t seed, int height, int width, bool hide_labels) {
  hrda::SceneSpec spec;
  // shape-size defaults are tuned for 128px scenes; keep proportions for
  // other sizes
  double f = std::min(height, width) / 128.0;
  auto scaled = [f](int v, int lo) { return std::max(lo, static_cast<int>(std::lround(v * f))); };
  spec.large_min = scaled(spec.large_min, 2);
  spec.large_max = scaled(spec.large_max, spec.large_min);
  spec.big_min = scaled(spec.big_min, 2);
  spec.big_max = scaled(spec.big_max, spec.big_min);
  spec.disk_rmin = scaled(spec.disk_rmin, 1);
  spec.disk_rmax = scaled(spec.disk_rmax, spec.disk_rmin);
  spec.line_len_min = scaled(spec.line_len_min, 4);
  spec.line_len_max = scaled(spec.line_len_max, spec.line_len_min);
  spec.stripe_half = scaled(spec.stripe_half, 2);
  spec.height = height;
  spec.width = width;
  hrda::Domain d = domain == "source" ? hrda::Domain::source : hrda::Domain::target;
  hrda::Dataset ds = hrda::generate(spec, count, d, seed, hide_labels);
  hrda::save_dataset(ds, out);
  std::printf("wrote %d %s images (%dx%d, %d classes) to %s\n", count, domain.c_str(), height,
              width, spec.num_classes, out.c_str());
  return 0;
}

int cmd_train(const hrda::TrainConfig& cfg, const std::string& source_dir,
              const std::string& target_dir, const std::string& eval_dir,
              const std::string& out) {
  hrda::Dataset source = hrda::load_dataset(source_dir);
  hrda::Dataset target = hrda::load_dataset(target_dir);
  hrda::Dataset eval_ds = hrda::load_dataset(eval_dir);
  hrda::RunResult rr = hrda::run_experiment(cfg, source, target, eval_ds, out);
  std::printf("trained %d steps, final mIoU %.4f\n", cfg.steps, rr.final_miou);
  std::printf("metrics: %s\n", rr.csv_path.c_str());
  std::printf("checkpoint: %s\n", rr.checkpoint_path.c_str());
  return 0;
}

int cmd_eval(const hrda::TrainConfig& cfg, const std::string& checkpoint,
             const std::string& data_dir, const std::string& out) {
  hrda::NetworkParams params = hrda::load_params(checkpoint);
  hrda::Dataset ds = hrda::load_dataset(data_dir);
  fs::create_directories(out);

  hrda::ConfusionMatrix cm(params.cfg.num_classes);
  bool any_labels = false;
  for (int i = 0; i < ds.size(); ++i) {
    const hrda::Sample& s = ds.samples[static_cast<std::size_t>(i)];
    hrda::InferenceResult res = hrda::infer_image_full(params, s.image, cfg.crop,
                                                       hrda::SlidingMode::overlapping,
                                                       cfg.eval_variant());
    char name[48];
    std::snprintf(name, sizeof(name), "pred_%06d.png", i);
    write_class_map((fs::path(out) / name).string(), res.class_map);

    int H = ds.height, W = ds.width;
    hrda::Tensor att_pred = hrda::Tensor::zeros({H, W});
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        att_pred.at({y, x}) =
            res.attention.at({static_cast<int>(res.class_map.at({y, x})), y, x});
    std::snprintf(name, sizeof(name), "attention_%06d.png", i);
    write_unit_field((fs::path(out) / name).string(), att_pred);
    std::snprintf(name, sizeof(name), "margin_%06d.png", i);
    write_unit_field((fs::path(out) / name).string(), res.margin);

    if (s.has_label) {
      cm.add(res.class_map, s.label);
      any_labels = true;
    }
  }

  std::string metrics_path = (fs::path(out) / "metrics.txt").string();
  std::ofstream mf(metrics_path);
  if (!mf) hrda::fail("eval: cannot write " + metrics_path);
  if (any_labels) {
    hrda::IouReport rep = hrda::iou_from_confusion(cm);
    for (std::size_t c = 0; c < rep.iou.size(); ++c) {
      char line[64];
      std::snprintf(line, sizeof(line), "iou_%zu %.6f\n", c, rep.iou[c]);
      mf << line;
      std::printf("%s", line);
    }
    char line[64];
    std::snprintf(line, sizeof(line), "miou %.6f\n", rep.miou);
    mf << line;
    std::printf("%s", line);
  } else {
    mf << "miou n/a (no labels in dataset)\n";
    std::printf("no labels in %s, wrote prediction dumps only\n", data_dir.c_str());
  }
  std::printf("dumps: %s\n", out.c_str());
  return 0;
}

struct AblationRun {
  std::string name;
  hrda::TrainConfig cfg;
};

std::vector<AblationRun> ablation_runs(const std::string& axis, const hrda::TrainConfig& base) {
  std::vector<AblationRun> runs;
  if (axis == "lambda_d") {
    for (hrda::real v : {0.0, 0.1, 0.2, 0.3, 0.5, 1.0}) {
      AblationRun r{"", base};
      r.cfg.lambda_d = v;
      char buf[32];
      std::snprintf(buf, sizeof(buf), "lambda_d_%g", v);
      r.name = buf;
      runs.push_back(r);
    }
  } else if (axis == "resolution") {
    AblationRun lr{"context_only", base}, hr{"detail_only", base}, both{"hrda", base};
    lr.cfg.use_detail_crop = false;
    hr.cfg.use_context_crop = false;
    runs = {lr, hr, both};
  } else if (axis == "attention") {
    AblationRun a{"learned", base}, b{"average", base}, c{"none", base};
    a.cfg.attention = hrda::AttentionSetting::learned;
    b.cfg.attention = hrda::AttentionSetting::average;
    c.cfg.attention = hrda::AttentionSetting::none;
    runs = {a, b, c};
  } else if (axis == "context_scale") {
    for (int s : {1, 2}) {
      AblationRun r{"s_" + std::to_string(s), base};
      r.cfg.crop.s = s;
      runs.push_back(r);
    }
  } else {
    hrda::fail("ablate: unknown axis '" + axis + "'");
  }
  for (const AblationRun& r : runs) r.cfg.validate();
  return runs;
}

int cmd_ablate(const std::string& axis, const hrda::TrainConfig& base,
               const std::string& source_dir, const std::string& target_dir,
               const std::string& eval_dir, const std::string& out) {
  hrda::Dataset source = hrda::load_dataset(source_dir);
  hrda::Dataset target = hrda::load_dataset(target_dir);
  hrda::Dataset eval_ds = hrda::load_dataset(eval_dir);
  std::vector<AblationRun> runs = ablation_runs(axis, base);
  std::printf("ablation axis %s: %zu runs\n", axis.c_str(), runs.size());
  for (const AblationRun& r : runs) {
    std::string run_out = (fs::path(out) / r.name).string();
    hrda::RunResult rr = hrda::run_experiment(r.cfg, source, target, eval_ds, run_out);
    std::printf("  %-16s final mIoU %.4f  (%s)\n", r.name.c_str(), rr.final_miou,
                rr.csv_path.c_str());
  }
  return 0;
}

int cmd_infer(const hrda::TrainConfig& cfg, const std::string& checkpoint,
              const std::string& image_path, const std::string& out) {
  hrda::NetworkParams params = hrda::load_params(checkpoint);
  hrda::Tensor img = image_from_png(image_path);
  hrda::Tensor class_map =
      hrda::infer_image(params, img, cfg.crop, hrda::SlidingMode::overlapping, cfg.eval_variant());
  write_class_map(out, class_map);
  std::printf("wrote class map %s\n", out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-resolution domain-adaptive semantic segmentation workbench"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  auto add_config_opts = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key=value config file");
    sub->add_option("--set", sets, "override a config key, e.g. --set steps=500")
        ->take_all();
  };

  auto* gen = app.add_subcommand("generate-data", "render a synthetic dataset to a directory");
  std::string gen_out, gen_domain;
  int gen_count = 200, gen_h = 128, gen_w = 128;
  std::uint64_t gen_seed = 1;
  bool gen_hide = false;
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--domain", gen_domain, "source or target")
      ->required()
      ->check(CLI::IsMember({"source", "target"}));
  gen->add_option("--count", gen_count, "number of images");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--height", gen_h, "image height");
  gen->add_option("--width", gen_w, "image width");
  gen->add_flag("--hide-labels", gen_hide, "omit label maps (unlabeled split)");

  auto* train = app.add_subcommand("train", "train a model and log metrics");
  std::string tr_src, tr_tgt, tr_eval, tr_out;
  train->add_option("--source", tr_src, "labeled source dataset dir")->required();
  train->add_option("--target", tr_tgt, "unlabeled target dataset dir")->required();
  train->add_option("--eval", tr_eval, "labeled target eval dataset dir")->required();
  train->add_option("--out", tr_out, "output dir for metrics.csv + checkpoint.bin")->required();
  add_config_opts(train);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint and dump predictions");
  std::string ev_ckpt, ev_data, ev_out;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--data", ev_data, "dataset dir")->required();
  ev->add_option("--out", ev_out, "output dir for dumps + metrics.txt")->required();
  add_config_opts(ev);

  auto* ab = app.add_subcommand("ablate", "run a named configuration sweep");
  std::string ab_axis, ab_src, ab_tgt, ab_eval, ab_out;
  ab->add_option("--axis", ab_axis, "sweep axis")
      ->required()
      ->check(CLI::IsMember({"lambda_d", "resolution", "attention", "context_scale"}));
  ab->add_option("--source", ab_src, "labeled source dataset dir")->required();
  ab->add_option("--target", ab_tgt, "unlabeled target dataset dir")->required();
  ab->add_option("--eval", ab_eval, "labeled target eval dataset dir")->required();
  ab->add_option("--out", ab_out, "output dir, one subdir per run")->required();
  add_config_opts(ab);

  auto* inf = app.add_subcommand("infer", "predict a class map for a single image");
  std::string in_ckpt, in_img, in_out;
  inf->add_option("--checkpoint", in_ckpt, "checkpoint file")->required();
  inf->add_option("--image", in_img, "input RGB png")->required();
  inf->add_option("--out", in_out, "output paletted class-map png")->required();
  add_config_opts(inf);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_generate(gen_out, gen_count, gen_domain, gen_seed, gen_h, gen_w, gen_hide);
    hrda::TrainConfig cfg = resolve_config(config_path, sets);
    if (train->parsed()) return cmd_train(cfg, tr_src, tr_tgt, tr_eval, tr_out);
    if (ev->parsed()) return cmd_eval(cfg, ev_ckpt, ev_data, ev_out);
    if (ab->parsed()) return cmd_ablate(ab_axis, cfg, ab_src, ab_tgt, ab_eval, ab_out);
    if (inf->parsed()) return cmd_infer(cfg, in_ckpt, in_img, in_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
