#pragma once

// Procedural scenes: class 0 fills the canvas, then each further class paints
// one shape on top. Every region gets a flat HSV colour, a per-scene
// illumination gradient and pixel noise. Also reads and writes the on-disk
// layout images/NNNN.png + masks/NNNN.png.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "casis/image_io.hpp"
#include "casis/mask.hpp"
#include "casis/nn.hpp"

namespace casis {

enum class ShapeKind { background, rectangle, disk, stripe };

struct SceneConfig {
  std::size_t num_classes = 4;
  std::size_t resolution = 64;
  std::vector<ShapeKind> shapes;  // per class; empty: background, then rectangle/disk/stripe cycling
  double style_correlation = 0.5;
  std::uint64_t seed = 7;
  std::size_t linked_a = 1;  // the designated pair whose hues may be linked
  std::size_t linked_b = 2;
  double linked_hue_jitter = 0.02;
  double noise = 0.03;
  double illumination = 0.1;

  ShapeKind shape_of(std::size_t cls) const {
    if (!shapes.empty()) return shapes.at(cls);
    if (cls == 0) return ShapeKind::background;
    static constexpr ShapeKind cycle[] = {ShapeKind::rectangle, ShapeKind::disk, ShapeKind::stripe};
    return cycle[(cls - 1) % 3];
  }

  bool has_linked_pair() const { return linked_a < num_classes && linked_b < num_classes && linked_a != linked_b; }

  void validate() const {
    if (num_classes < 1 || num_classes > 255) throw ConfigError("scene: num_classes must lie in [1,255]");
    if (resolution < 4) throw ConfigError("scene: resolution must be >= 4");
    if (!shapes.empty() && shapes.size() != num_classes)
      throw ConfigError("scene: shapes must list one entry per class");
    if (!(style_correlation >= 0.0 && style_correlation <= 1.0))
      throw ConfigError("scene: style_correlation must lie in [0,1]");
  }
};

struct ClassStyle {
  double hue = 0, saturation = 0, value = 0;
};

struct Scene {
  Tensor<float> image;  // [3,R,R] in [-1,1]
  SemanticMask mask;
  std::vector<ClassStyle> styles;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = (h - std::floor(h)) * 6.0;
  const int i = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  const double table[6][3] = {{v, t, p}, {q, v, p}, {p, v, t}, {p, q, v}, {t, p, v}, {v, p, q}};
  for (int c = 0; c < 3; ++c) rgb[c] = table[i][c];
}

}  // namespace detail

/// Hue of an RGB triple in [0,1); 0 for greys.
inline double rgb_hue(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
  if (d <= 0) return 0.0;
  double h;
  if (mx == r)
    h = std::fmod((g - b) / d, 6.0);
  else if (mx == g)
    h = (b - r) / d + 2.0;
  else
    h = (r - g) / d + 4.0;
  h /= 6.0;
  return h < 0 ? h + 1.0 : h;
}

/// Distance between two hues on the unit circle, in [0, 0.5].
inline double hue_distance(double a, double b) {
  const double d = std::abs(a - b);
  return std::min(d, 1.0 - d);
}

inline Scene generate_scene(const SceneConfig& cfg, std::uint64_t index) {
  cfg.validate();
  Rng rng(detail::splitmix64(cfg.seed ^ detail::splitmix64(index + 1)));
  const std::size_t R = cfg.resolution, C = cfg.num_classes;
  const double Rd = static_cast<double>(R);

  std::vector<ClassStyle> styles(C);
  for (auto& s : styles) {
    s.hue = rng.uniform();
    s.saturation = rng.uniform(0.45, 0.9);
    s.value = rng.uniform(0.4, 0.85);
  }
  const double link_draw = rng.uniform();
  const double jitter = rng.uniform(-cfg.linked_hue_jitter, cfg.linked_hue_jitter);
  if (cfg.has_linked_pair() && link_draw < cfg.style_correlation) {
    const double h = styles[cfg.linked_a].hue + jitter;
    styles[cfg.linked_b].hue = h - std::floor(h);
  }

  std::vector<std::uint16_t> labels(R * R, 0);
  for (std::size_t c = 0; c < C; ++c) {
    const ShapeKind kind = cfg.shape_of(c);
    const auto cls = static_cast<std::uint16_t>(c);
    switch (kind) {
      case ShapeKind::background:
        if (c == 0) break;
        std::fill(labels.begin(), labels.end(), cls);
        break;
      case ShapeKind::rectangle: {
        const double w = rng.uniform(0.3, 0.6) * Rd, h = rng.uniform(0.3, 0.6) * Rd;
        const double x0 = rng.uniform(0, Rd - w), y0 = rng.uniform(0, Rd - h);
        for (std::size_t y = 0; y < R; ++y)
          for (std::size_t x = 0; x < R; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            if (px >= x0 && px < x0 + w && py >= y0 && py < y0 + h) labels[y * R + x] = cls;
          }
        break;
      }
      case ShapeKind::disk: {
        const double r = rng.uniform(0.15, 0.28) * Rd;
        const double cx = rng.uniform(r, Rd - r), cy = rng.uniform(r, Rd - r);
        for (std::size_t y = 0; y < R; ++y)
          for (std::size_t x = 0; x < R; ++x) {
            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            if (dx * dx + dy * dy < r * r) labels[y * R + x] = cls;
          }
        break;
      }
      case ShapeKind::stripe: {
        const bool vertical = rng.uniform() < 0.5;
        const double t = rng.uniform(0.1, 0.18) * Rd;
        const double o = rng.uniform(0, Rd - t);
        for (std::size_t y = 0; y < R; ++y)
          for (std::size_t x = 0; x < R; ++x) {
            const double p = (vertical ? x : y) + 0.5;
            if (p >= o && p < o + t) labels[y * R + x] = cls;
          }
        break;
      }
    }
  }

  const double angle = rng.uniform(0, 2 * std::numbers::pi);
  const double gx = std::cos(angle), gy = std::sin(angle);
  std::vector<double> rgb(C * 3);
  for (std::size_t c = 0; c < C; ++c) detail::hsv_to_rgb(styles[c].hue, styles[c].saturation, styles[c].value, &rgb[c * 3]);

  std::vector<float> img(3 * R * R);
  for (std::size_t y = 0; y < R; ++y)
    for (std::size_t x = 0; x < R; ++x) {
      const double u = 2.0 * (x + 0.5) / Rd - 1.0, v = 2.0 * (y + 0.5) / Rd - 1.0;
      const double light = 1.0 + cfg.illumination * (gx * u + gy * v) / std::numbers::sqrt2;
      const std::size_t cls = labels[y * R + x];
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double p = std::clamp(rgb[cls * 3 + ch] * light + cfg.noise * rng.normal(), 0.0, 1.0);
        img[ch * R * R + y * R + x] = static_cast<float>(2.0 * p - 1.0);
      }
    }
  return {Tensor<float>({3, R, R}, std::move(img)), SemanticMask(C, R, R, std::move(labels)), std::move(styles)};
}

/// Reads an RGB image and an 8-bit index mask; the image is scaled to [-1,1].
inline std::pair<Tensor<float>, SemanticMask> load_pair(const std::string& image_path, const std::string& mask_path,
                                                        std::size_t num_classes) {
  const Image8 im = read_png(image_path, 3);
  const Image8 mk = read_png(mask_path, 1);
  if (im.width != mk.width || im.height != mk.height)
    throw DataError("load_pair: image " + image_path + " is " + std::to_string(im.width) + "x" +
                    std::to_string(im.height) + " but mask " + mask_path + " is " + std::to_string(mk.width) +
                    "x" + std::to_string(mk.height));
  std::vector<std::uint16_t> labels(mk.pixels.begin(), mk.pixels.end());
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= num_classes)
      throw DataError("load_pair: " + mask_path + " pixel (" + std::to_string(i / mk.width) + "," +
                      std::to_string(i % mk.width) + ") has class " + std::to_string(labels[i]) +
                      " >= " + std::to_string(num_classes));
  return {from_image8<float>(im), SemanticMask(num_classes, mk.height, mk.width, std::move(labels))};
}

inline std::string pair_stem(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu", index);
  return buf;
}

inline void save_pair(const std::filesystem::path& dir, std::size_t index, const Tensor<float>& image,
                      const SemanticMask& mask) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  const std::string stem = pair_stem(index) + ".png";
  write_png((dir / "images" / stem).string(), to_image8(image));
  Image8 mk{mask.width(), mask.height(), 1, {}};
  mk.pixels.assign(mask.labels().begin(), mask.labels().end());
  write_png((dir / "masks" / stem).string(), mk);
}

/// Indexed access to (image, mask) pairs: procedural or from a directory.
class SceneSource {
 public:
  SceneSource() = default;
  SceneSource(SceneConfig cfg, std::size_t offset, std::size_t count)
      : cfg_(std::move(cfg)), offset_(offset), count_(count) {
    cfg_.validate();
  }
  /// Pairs offset..offset+count-1 of a directory in the images/ + masks/ layout.
  static SceneSource from_directory(const std::filesystem::path& dir, std::size_t num_classes, std::size_t offset,
                                    std::size_t count) {
    SceneSource s;
    s.dir_ = dir;
    s.cfg_.num_classes = num_classes;
    s.offset_ = offset;
    s.count_ = count;
    for (std::size_t i = 0; i < count; ++i)
      if (!std::filesystem::exists(dir / "images" / (pair_stem(offset + i) + ".png")))
        throw DataError("dataset " + dir.string() + " has no pair " + pair_stem(offset + i));
    return s;
  }

  std::size_t size() const { return count_; }
  std::size_t num_classes() const { return cfg_.num_classes; }

  std::pair<Tensor<float>, SemanticMask> get(std::size_t i) const {
    if (i >= count_) throw ArgumentError("scene index " + std::to_string(i) + " out of range");
    if (!dir_.empty()) {
      const std::string stem = pair_stem(offset_ + i) + ".png";
      return load_pair((dir_ / "images" / stem).string(), (dir_ / "masks" / stem).string(), cfg_.num_classes);
    }
    Scene s = generate_scene(cfg_, offset_ + i);
    return {s.image, s.mask};
  }

 private:
  SceneConfig cfg_;
  std::filesystem::path dir_;
  std::size_t offset_ = 0, count_ = 0;
};

}  // namespace casis
