// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hrda/png_io.hpp"
#include "hrda/tensor.hpp"

namespace hrda {

enum class Domain { source, target };

inline const char* domain_name(Domain d) { return d == Domain::source ? "source" : "target"; }

// class ids of the synthetic scenes
enum SceneClass : int {
  cls_background = 0,
  cls_large_stuff = 1,
  cls_big_object = 2,
  cls_small_object = 3,
  cls_thin_structure = 4,
};

// fixed visualization palette for label maps and prediction dumps
inline const std::vector<std::array<std::uint8_t, 3>>& class_palette() {
  static const std::vector<std::array<std::uint8_t, 3>> p = {
      {64, 64, 64},    // background-stuff
      {128, 64, 128},  // large-stuff
      {204, 40, 40},   // big-object
      {250, 220, 60},  // small-object
      {60, 180, 220},  // thin-structure
  };
  return p;
}

// per-image color scale, brightness offset, and noise amplitude, drawn
// uniformly from the ranges below; a domain is a distribution over imaging
// conditions. noise_block > 1 gives spatially correlated speckle instead of
// per-pixel grain.
struct DomainAppearance {
  real scale_min = 1.0, scale_max = 1.0;
  real bright_min = 0.0, bright_max = 0.0;
  real noise_min = 0.03, noise_max = 0.03;
  int noise_block = 1;
  bool blur = false;
};

struct SceneSpec {
  int height = 128, width = 128;
  int num_classes = 5;

  // shape generators; sizes in pixels, ranges inclusive
  int large_min = 52, large_max = 72;      // large-stuff rectangles
  int big_min = 12, big_max = 22;          // big-object rectangles
  int disk_rmin = 4, disk_rmax = 6;        // small-object disks
  int line_len_min = 32, line_len_max = 80;  // thin-structure segments, 3-4 px wide

  // large-stuff renders as a two-tone stripe texture whose second tone is the
  // background color. Band interiors match background up close, so telling
  // them apart takes a wider view than a detail crop. The tones differ in hue
  // at similar brightness, which keeps stripes apart under any appearance in
  // the domain ranges below.
  int stripe_half = 14;  // stripe band thickness in pixels
  std::array<real, 3> stripe_color2 = {0.32, 0.24, 0.46};
  std::array<std::array<real, 3>, 5> class_colors = {{
      {0.32, 0.24, 0.46},  // background-stuff, equals stripe_color2
      {0.66, 0.22, 0.18},  // large-stuff, alternating with stripe_color2
      {0.12, 0.46, 0.20},  // big-object
      {0.95, 0.85, 0.15},  // small-object
      {0.10, 0.60, 0.90},  // thin-structure
  }};

  DomainAppearance source_app = {1.0, 1.0, 0.0, 0.0, 0.02, 0.04, 1, false};
  DomainAppearance target_app = {0.80, 1.05, 0.02, 0.10, 0.05, 0.30, 3, true};

  const DomainAppearance& appearance(Domain d) const {
    return d == Domain::source ? source_app : target_app;
  }

  void validate() const {
    check(height >= 32 && width >= 32, "SceneSpec: image size must be at least 32x32");
    check(num_classes == 5, "SceneSpec: the synthetic benchmark defines exactly 5 classes");
    check(large_min > 0 && large_min <= large_max && large_max <= std::min(height, width),
          "SceneSpec: degenerate large-stuff size range");
    check(big_min > 0 && big_min <= big_max, "SceneSpec: degenerate big-object size range");
    check(disk_rmin >= 1 && disk_rmin <= disk_rmax, "SceneSpec: degenerate disk radius range");
    check(line_len_min >= 2 && line_len_min <= line_len_max,
          "SceneSpec: degenerate line length range");
    check(stripe_half >= 2, "SceneSpec: stripe bands must be at least 2 px");
    for (const DomainAppearance* app : {&source_app, &target_app}) {
      check(app->scale_min > 0.0 && app->scale_min <= app->scale_max,
            "SceneSpec: degenerate appearance scale range");
      check(app->bright_min <= app->bright_max, "SceneSpec: degenerate brightness range");
      check(app->noise_min >= 0.0 && app->noise_min <= app->noise_max,
            "SceneSpec: degenerate noise range");
      check(app->noise_block >= 1, "SceneSpec: noise block must be at least 1 px");
    }
  }
};

struct Sample {
  Tensor image;  // [3,H,W], values k/255
  Tensor label;  // [H,W] class ids; empty handle when hidden
  bool has_label = false;
};

struct Dataset {
  std::vector<Sample> samples;
  Domain domain = Domain::source;
  int height = 0, width = 0, num_classes = 0;

  int size() const { return static_cast<int>(samples.size()); }
};

namespace detail {

inline void paint_rect(std::vector<int>& lab, int H, int W, int top, int left, int h, int w,
                       int cls) {
  for (int i = std::max(0, top); i < std::min(H, top + h); ++i)
    for (int j = std::max(0, left); j < std::min(W, left + w); ++j)
      lab[static_cast<std::size_t>(i) * W + j] = cls;
}

inline void paint_disk(std::vector<int>& lab, int H, int W, int cy, int cx, int r, int cls) {
  for (int i = std::max(0, cy - r); i <= std::min(H - 1, cy + r); ++i)
    for (int j = std::max(0, cx - r); j <= std::min(W - 1, cx + r); ++j)
      if ((i - cy) * (i - cy) + (j - cx) * (j - cx) <= r * r)
        lab[static_cast<std::size_t>(i) * W + j] = cls;
}

inline void paint_line(std::vector<int>& lab, int H, int W, int y0, int x0, int y1, int x1,
                       int thick, int cls) {
  int steps = std::max(std::abs(y1 - y0), std::abs(x1 - x0));
  steps = std::max(steps, 1);
  for (int t = 0; t <= steps; ++t) {
    int y = y0 + (y1 - y0) * t / steps;
    int x = x0 + (x1 - x0) * t / steps;
    for (int dy = 0; dy < thick; ++dy)
      for (int dx = 0; dx < thick; ++dx) {
        int yy = y + dy, xx = x + dx;
        if (yy >= 0 && yy < H && xx >= 0 && xx < W)
          lab[static_cast<std::size_t>(yy) * W + xx] = cls;
      }
  }
}

// layout is shared between domains; retry with a bumped seed in the rare case
// a class gets fully overpainted
inline std::vector<int> sample_layout(const SceneSpec& spec, std::uint64_t seed) {
  int H = spec.height, W = spec.width;
  for (std::uint64_t attempt = 0; attempt < 16; ++attempt) {
    Rng rng(mix_seed(seed, attempt, 0x1a707ULL));
    std::vector<int> lab(static_cast<std::size_t>(H) * W, cls_background);

    int n_large = rng.uniform_int(2, 3);
    for (int k = 0; k < n_large; ++k) {
      int h = rng.uniform_int(spec.large_min, spec.large_max);
      int w = rng.uniform_int(spec.large_min, spec.large_max);
      paint_rect(lab, H, W, rng.uniform_int(-h / 4, H - 3 * h / 4),
                 rng.uniform_int(-w / 4, W - 3 * w / 4), h, w, cls_large_stuff);
    }
    int n_big = rng.uniform_int(2, 3);
    for (int k = 0; k < n_big; ++k) {
      int h = rng.uniform_int(spec.big_min, spec.big_max);
      int w = rng.uniform_int(spec.big_min, spec.big_max);
      paint_rect(lab, H, W, rng.uniform_int(0, H - h), rng.uniform_int(0, W - w), h, w,
                 cls_big_object);
    }
    int n_small = rng.uniform_int(3, 6);
    for (int k = 0; k < n_small; ++k) {
      int r = rng.uniform_int(spec.disk_rmin, spec.disk_rmax);
      paint_disk(lab, H, W, rng.uniform_int(r, H - 1 - r), rng.uniform_int(r, W - 1 - r), r,
                 cls_small_object);
    }
    int n_thin = rng.uniform_int(2, 4);
    for (int k = 0; k < n_thin; ++k) {
      int len = rng.uniform_int(spec.line_len_min, spec.line_len_max);
      int thick = rng.uniform_int(2, 3);
      int y0 = rng.uniform_int(0, H - 1), x0 = rng.uniform_int(0, W - 1);
      int dir = rng.uniform_int(0, 3);  // horizontal, vertical, two diagonals
      int y1 = y0, x1 = x0;
      if (dir == 0) x1 = x0 + len;
      if (dir == 1) y1 = y0 + len;
      if (dir == 2) { y1 = y0 + len; x1 = x0 + len; }
      if (dir == 3) { y1 = y0 + len; x1 = x0 - len; }
      paint_line(lab, H, W, y0, x0, std::min(y1, H - 1), std::clamp(x1, 0, W - 1), thick,
                 cls_thin_structure);
    }

    std::array<bool, 5> present = {};
    for (int v : lab) present[static_cast<std::size_t>(v)] = true;
    if (std::all_of(present.begin(), present.end(), [](bool b) { return b; })) return lab;
  }
  fail("generate: could not place all classes; spec too tight for the image size");
}

inline Tensor render(const SceneSpec& spec, const std::vector<int>& lab, Domain domain,
                     std::uint64_t seed) {
  int H = spec.height, W = spec.width;
  const DomainAppearance& app = spec.appearance(domain);
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(domain), 0x401531ULL));
  real scale = rng.uniform(app.scale_min, app.scale_max);
  real bright = rng.uniform(app.bright_min, app.bright_max);
  real noise = rng.uniform(app.noise_min, app.noise_max);
  Tensor img = Tensor::zeros({3, H, W});
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      int cls = lab[static_cast<std::size_t>(i) * W + j];
      const auto* base = &spec.class_colors[static_cast<std::size_t>(cls)];
      if (cls == cls_large_stuff && (i / spec.stripe_half) % 2 == 1) base = &spec.stripe_color2;
      for (int c = 0; c < 3; ++c)
        img.at({c, i, j}) = scale * (*base)[static_cast<std::size_t>(c)] + bright;
    }
  if (app.blur) {
    Tensor blurred = Tensor::zeros({3, H, W});
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          real s = 0.0;
          int n = 0;
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              int y = i + di, x = j + dj;
              if (y >= 0 && y < H && x >= 0 && x < W) {
                s += img.at({c, y, x});
                ++n;
              }
            }
          blurred.at({c, i, j}) = s / n;
        }
    img = blurred;
  }
  if (app.noise_block <= 1) {
    for (long long i = 0; i < img.size(); ++i) img.data()[i] += noise * rng.normal();
  } else {
    int g = app.noise_block;
    int gh = (H + g - 1) / g, gw = (W + g - 1) / g;
    std::vector<real> field(static_cast<std::size_t>(3) * gh * gw);
    for (real& v : field) v = noise * rng.normal();
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
          img.at({c, i, j}) += field[(static_cast<std::size_t>(c) * gh + i / g) * gw + j / g];
  }
  // quantize to 8 bits so PNG round-trips are pixel-exact
  for (long long i = 0; i < img.size(); ++i) {
    real v = std::clamp(img.data()[i], 0.0, 1.0);
    img.data()[i] = std::round(v * 255.0) / 255.0;
  }
  return img;
}

}  // namespace detail

inline Dataset generate(const SceneSpec& spec, int n, Domain domain, std::uint64_t seed,
                        bool hide_labels = false) {
  spec.validate();
  check(n >= 1, "generate: need at least one sample");
  Dataset ds;
  ds.domain = domain;
  ds.height = spec.height;
  ds.width = spec.width;
  ds.num_classes = spec.num_classes;
  ds.samples.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::uint64_t sample_seed = mix_seed(seed, static_cast<std::uint64_t>(i), 0x5ce9eULL);
    std::vector<int> lab = detail::sample_layout(spec, sample_seed);
    Sample s;
    s.image = detail::render(spec, lab, domain, sample_seed);
    if (!hide_labels) {
      s.label = Tensor::zeros({spec.height, spec.width});
      for (int p = 0; p < spec.height * spec.width; ++p)
        s.label.data()[p] = static_cast<real>(lab[static_cast<std::size_t>(p)]);
      s.has_label = true;
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  check(ds.size() > 0, "save_dataset: empty dataset");
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "labels");

  std::ofstream mf(fs::path(dir) / "manifest.txt");
  if (!mf) fail("save_dataset: cannot write manifest in " + dir);
  mf << "hrda-dataset 1\n";
  mf << "domain " << domain_name(ds.domain) << "\n";
  mf << "size " << ds.height << " " << ds.width << "\n";
  mf << "classes " << ds.num_classes << "\n";
  mf << "count " << ds.size() << "\n";

  for (int i = 0; i < ds.size(); ++i) {
    const Sample& s = ds.samples[static_cast<std::size_t>(i)];
    char name[32];
    std::snprintf(name, sizeof(name), "%06d.png", i);
    std::string img_rel = std::string("images/") + name;

    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(ds.height) * ds.width * 3);
    for (int y = 0; y < ds.height; ++y)
      for (int x = 0; x < ds.width; ++x)
        for (int c = 0; c < 3; ++c)
          rgb[(static_cast<std::size_t>(y) * ds.width + x) * 3 + c] = static_cast<std::uint8_t>(
              std::lround(s.image.at({c, y, x}) * 255.0));
    png::write_png_rgb((fs::path(dir) / img_rel).string(), ds.width, ds.height, rgb);

    std::string lab_rel = "-";
    if (s.has_label) {
      lab_rel = std::string("labels/") + name;
      std::vector<std::uint8_t> idx(static_cast<std::size_t>(ds.height) * ds.width);
      for (int p = 0; p < ds.height * ds.width; ++p) {
        int v = static_cast<int>(s.label.data()[p]);
        check(v >= 0 && v < ds.num_classes, "save_dataset: label class id out of range");
        idx[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(v);
      }
      png::write_png_palette((fs::path(dir) / lab_rel).string(), ds.width, ds.height, idx,
                             class_palette());
    }
    mf << "sample " << img_rel << " " << lab_rel << "\n";
  }
  if (!mf) fail("save_dataset: manifest write failed in " + dir);
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.txt");
  if (!mf) fail("load_dataset: cannot open manifest in " + dir);

  std::string magic;
  int version = 0;
  mf >> magic >> version;
  if (magic != "hrda-dataset" || version != 1)
    fail("load_dataset: " + dir + " does not hold a version-1 dataset manifest");

  Dataset ds;
  std::string key;
  int count = -1;
  while (mf >> key) {
    if (key == "domain") {
      std::string d;
      mf >> d;
      if (d == "source")
        ds.domain = Domain::source;
      else if (d == "target")
        ds.domain = Domain::target;
      else
        fail("load_dataset: unknown domain '" + d + "' in manifest");
    } else if (key == "size") {
      mf >> ds.height >> ds.width;
    } else if (key == "classes") {
      mf >> ds.num_classes;
    } else if (key == "count") {
      mf >> count;
    } else if (key == "sample") {
      std::string img_rel, lab_rel;
      mf >> img_rel >> lab_rel;
      std::string img_path = (fs::path(dir) / img_rel).string();
      if (!fs::exists(img_path)) fail("load_dataset: missing image file " + img_path);
      png::PngImage pi = png::read_png(img_path);
      if (pi.color_type != 2 || pi.width != ds.width || pi.height != ds.height)
        fail("load_dataset: " + img_path + " does not match the manifest geometry");
      Sample s;
      s.image = Tensor::zeros({3, ds.height, ds.width});
      for (int y = 0; y < ds.height; ++y)
        for (int x = 0; x < ds.width; ++x)
          for (int c = 0; c < 3; ++c)
            s.image.at({c, y, x}) =
                pi.data[(static_cast<std::size_t>(y) * ds.width + x) * 3 + c] / 255.0;
      if (lab_rel != "-") {
        std::string lab_path = (fs::path(dir) / lab_rel).string();
        if (!fs::exists(lab_path)) fail("load_dataset: missing label file " + lab_path);
        png::PngImage li = png::read_png(lab_path);
        if (li.color_type != 3 || li.width != ds.width || li.height != ds.height)
          fail("load_dataset: " + lab_path + " is not a paletted label map of the right size");
        const auto& pal = class_palette();
        if (li.palette.size() != pal.size() ||
            !std::equal(pal.begin(), pal.end(), li.palette.begin()))
          fail("load_dataset: palette mismatch in " + lab_path);
        s.label = Tensor::zeros({ds.height, ds.width});
        for (int p = 0; p < ds.height * ds.width; ++p) {
          int v = li.data[static_cast<std::size_t>(p)];
          if (v >= ds.num_classes) fail("load_dataset: class id out of range in " + lab_path);
          s.label.data()[p] = static_cast<real>(v);
        }
        s.has_label = true;
      }
      ds.samples.push_back(std::move(s));
    } else {
      fail("load_dataset: unknown manifest key '" + key + "' in " + dir);
    }
  }
  if (count != ds.size())
    fail("load_dataset: manifest count " + std::to_string(count) + " does not match " +
         std::to_string(ds.size()) + " samples in " + dir);
  return ds;
}

// streaming confusion matrix so evaluation can aggregate over many images
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<long long> m;  // truth-major C x C

  explicit ConfusionMatrix(int C) : num_classes(C), m(static_cast<std::size_t>(C) * C, 0) {
    check(C >= 2, "ConfusionMatrix: need at least two classes");
  }

  void add(const Tensor& pred, const Tensor& truth) {
    check(pred.same_shape(truth), "iou_metrics: prediction and truth shapes differ");
    for (long long p = 0; p < pred.size(); ++p) {
      int pv = static_cast<int>(pred.data()[p]);
      int tv = static_cast<int>(truth.data()[p]);
      check(pv >= 0 && pv < num_classes && tv >= 0 && tv < num_classes,
            "iou_metrics: class id out of range");
      m[static_cast<std::size_t>(tv) * num_classes + pv]++;
    }
  }

  long long tp(int c) const { return m[static_cast<std::size_t>(c) * num_classes + c]; }
  long long truth_total(int c) const {
    long long s = 0;
    for (int j = 0; j < num_classes; ++j) s += m[static_cast<std::size_t>(c) * num_classes + j];
    return s;
  }
  long long pred_total(int c) const {
    long long s = 0;
    for (int i = 0; i < num_classes; ++i) s += m[static_cast<std::size_t>(i) * num_classes + c];
    return s;
  }
};

struct IouReport {
  std::vector<real> iou;         // -1 for classes excluded (absent everywhere)
  std::vector<bool> considered;  // present in pred or truth
  real miou = 0.0;
};

inline IouReport iou_from_confusion(const ConfusionMatrix& cm) {
  IouReport r;
  int C = cm.num_classes;
  r.iou.assign(static_cast<std::size_t>(C), -1.0);
  r.considered.assign(static_cast<std::size_t>(C), false);
  real sum = 0.0;
  int used = 0;
  for (int c = 0; c < C; ++c) {
    long long tp = cm.tp(c);
    long long denom = cm.truth_total(c) + cm.pred_total(c) - tp;  // TP+FP+FN
    if (denom == 0) continue;  // absent from both pred and truth
    r.considered[static_cast<std::size_t>(c)] = true;
    r.iou[static_cast<std::size_t>(c)] = static_cast<real>(tp) / static_cast<real>(denom);
    sum += r.iou[static_cast<std::size_t>(c)];
    ++used;
  }
  check(used > 0, "iou_metrics: no class present in either map");
  r.miou = sum / used;
  return r;
}

inline IouReport iou_metrics(const Tensor& pred, const Tensor& truth, int C) {
  ConfusionMatrix cm(C);
  cm.add(pred, truth);
  return iou_from_confusion(cm);
}

}  // namespace hrda
