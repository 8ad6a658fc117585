#pragma once

// Multi-scale patch discriminator and the training losses: hinge adversarial,
// discriminator feature matching, frozen random-feature perceptual proxy and
// the attention loss (BCE between cross-attention maps and the mask).

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "casis/attention.hpp"
#include "casis/mask.hpp"
#include "casis/nn.hpp"

namespace casis {

struct DiscriminatorConfig {
  std::size_t num_classes = 4;
  std::size_t base_width = 32;
  std::size_t num_scales = 2;
};

template <class T>
struct ScaleOutput {
  std::vector<Tensor<T>> features;  // intermediate activations, shallow to deep
  Tensor<T> score;                  // [N,1,h,w] patch scores
};

template <class T>
using DiscriminatorOutputs = std::vector<ScaleOutput<T>>;

/// conv4x4/s2 -> conv4x4/s2 -> conv4x4/s1 -> conv4x4/s1 score, LeakyReLU(0.2) between.
template <class T>
class PatchDiscriminator {
 public:
  PatchDiscriminator() = default;
  PatchDiscriminator(std::size_t in_channels, std::size_t width, Rng& rng) {
    const double g = std::sqrt(2.0);
    layers_.emplace_back(in_channels, width, 4, Conv2dParams{2, 1, 1}, rng, g);
    layers_.emplace_back(width, 2 * width, 4, Conv2dParams{2, 1, 1}, rng, g);
    layers_.emplace_back(2 * width, 4 * width, 4, Conv2dParams{1, 1, 1}, rng, g);
    score_ = Conv2d<T>(4 * width, 1, 4, Conv2dParams{1, 1, 1}, rng);
  }

  ScaleOutput<T> operator()(const Tensor<T>& x) const {
    ScaleOutput<T> out;
    Tensor<T> h = x;
    for (const auto& l : layers_) {
      h = leaky_relu(l(h), T(0.2));
      out.features.push_back(h);
    }
    out.score = score_(h);
    return out;
  }

  /// Spatial size of the score map for an input of side `n`.
  static std::size_t score_side(std::size_t n) {
    n = (n + 2 - 4) / 2 + 1;
    n = (n + 2 - 4) / 2 + 1;
    n = (n + 2 - 4) / 1 + 1;
    return (n + 2 - 4) / 1 + 1;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(out, prefix + ".conv" + std::to_string(i));
    score_.collect(out, prefix + ".score");
  }

 private:
  std::vector<Conv2d<T>> layers_;
  Conv2d<T> score_;
};

/// Conditional discriminator on concat(image, mask), evaluated at full
/// resolution and at successive 2x average-pooled resolutions.
template <class T>
class MultiScaleDiscriminator {
 public:
  MultiScaleDiscriminator() = default;
  MultiScaleDiscriminator(const DiscriminatorConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.num_scales < 1) throw ConfigError("discriminator: num_scales must be >= 1");
    for (std::size_t s = 0; s < cfg.num_scales; ++s)
      scales_.emplace_back(3 + cfg.num_classes, cfg.base_width, rng);
  }

  DiscriminatorOutputs<T> operator()(const Tensor<T>& images, const Tensor<T>& masks) const {
    if (images.rank() != 4 || images.dim(1) != 3)
      throw DimensionError("discriminator: images must be [N,3,H,W], got " + shape_str(images.shape()));
    if (masks.rank() != 4 || masks.dim(1) != cfg_.num_classes)
      throw DimensionError("discriminator: mask channel axis (1) must be " + std::to_string(cfg_.num_classes));
    if (masks.dim(0) != images.dim(0) || masks.dim(2) != images.dim(2) || masks.dim(3) != images.dim(3))
      throw DimensionError("discriminator: image and mask shapes differ");
    DiscriminatorOutputs<T> out;
    Tensor<T> x = concat<T>({images, masks.detach()}, 1);
    for (std::size_t s = 0; s < scales_.size(); ++s) {
      if (s) x = avg_pool2x(x);
      out.push_back(scales_[s](x));
    }
    return out;
  }

  const PatchDiscriminator<T>& scale(std::size_t s) const { return scales_.at(s); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t s = 0; s < scales_.size(); ++s) scales_[s].collect(out, prefix + ".scale" + std::to_string(s));
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    collect(out, "discriminator");
    return out;
  }

 private:
  DiscriminatorConfig cfg_;
  std::vector<PatchDiscriminator<T>> scales_;
};

/// adv_d = sum over scales of mean(max(0,1-real)) + mean(max(0,1+fake)), divided by
/// the scale count; adv_g = -mean over scales of mean(fake).
template <class T>
std::pair<Tensor<T>, Tensor<T>> hinge_losses(const DiscriminatorOutputs<T>& real,
                                             const DiscriminatorOutputs<T>& fake) {
  if (real.size() != fake.size() || real.empty())
    throw DimensionError("hinge_losses: scale structures differ");
  Tensor<T> d, g;
  for (std::size_t s = 0; s < real.size(); ++s) {
    const Tensor<T> dr = mean(relu(add_scalar(neg(real[s].score), T(1))));
    const Tensor<T> df = mean(relu(add_scalar(fake[s].score, T(1))));
    const Tensor<T> gs = neg(mean(fake[s].score));
    d = d.defined() ? add(d, add(dr, df)) : add(dr, df);
    g = g.defined() ? add(g, gs) : gs;
  }
  const T inv = T(1) / static_cast<T>(real.size());
  return {scale(d, inv), scale(g, inv)};
}

/// Generator-side hinge term only.
template <class T>
Tensor<T> hinge_generator_loss(const DiscriminatorOutputs<T>& fake) {
  Tensor<T> g;
  for (const auto& s : fake) {
    const Tensor<T> gs = neg(mean(s.score));
    g = g.defined() ? add(g, gs) : gs;
  }
  return scale(g, T(1) / static_cast<T>(fake.size()));
}

/// Mean over every (scale, layer) pair of mean|fake - real|; real features are targets.
template <class T>
Tensor<T> feature_matching_loss(const DiscriminatorOutputs<T>& real, const DiscriminatorOutputs<T>& fake) {
  if (real.size() != fake.size()) throw DimensionError("feature_matching_loss: scale counts differ");
  Tensor<T> total;
  std::size_t terms = 0;
  for (std::size_t s = 0; s < real.size(); ++s) {
    if (real[s].features.size() != fake[s].features.size())
      throw DimensionError("feature_matching_loss: layer counts differ at scale " + std::to_string(s));
    for (std::size_t l = 0; l < real[s].features.size(); ++l) {
      const Tensor<T> t = l1_mean(fake[s].features[l], real[s].features[l].detach());
      total = total.defined() ? add(total, t) : t;
      ++terms;
    }
  }
  if (!terms) throw DimensionError("feature_matching_loss: no features");
  return scale(total, T(1) / static_cast<T>(terms));
}

/// Frozen, randomly initialized conv pyramid used for the perceptual proxy and the
/// Frechet feature distance. Levels: the image itself, then three ReLU conv stages
/// (16, 32, 64 channels) with 2x average pooling between them.
template <class T>
class FrozenFeatures {
 public:
  FrozenFeatures() = default;
  explicit FrozenFeatures(std::uint64_t seed) : seed_(seed) {
    Rng rng(seed);
    convs_.emplace_back(3, 16, 3, Conv2dParams{1, 1, 1}, rng, std::sqrt(2.0));
    convs_.emplace_back(16, 32, 3, Conv2dParams{1, 1, 1}, rng, std::sqrt(2.0));
    convs_.emplace_back(32, 64, 3, Conv2dParams{1, 1, 1}, rng, std::sqrt(2.0));
    for (auto& c : convs_) {
      c.weight.set_requires_grad(false);
      c.bias.set_requires_grad(false);
    }
  }

  std::uint64_t seed() const { return seed_; }

  std::vector<Tensor<T>> levels(const Tensor<T>& images) const {
    std::vector<Tensor<T>> out{images};
    Tensor<T> h = images;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      if (i) h = avg_pool2x(h);
      h = relu(convs_[i](h));
      out.push_back(h);
    }
    return out;
  }

  /// Spatially averaged activations of the conv levels, [N, 16+32+64].
  Tensor<T> pooled(const Tensor<T>& images) const {
    NoGradGuard ng;
    const auto lv = levels(images);
    const std::size_t N = images.dim(0);
    std::vector<Tensor<T>> parts;
    for (std::size_t i = 1; i < lv.size(); ++i) {
      const Tensor<T>& l = lv[i];
      parts.push_back(mean(reshape(l, {N, l.dim(1), l.dim(2) * l.dim(3)}), 2));
    }
    return concat(parts, 1);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(out, prefix + ".conv" + std::to_string(i));
  }

 private:
  std::uint64_t seed_ = 0;
  std::vector<Conv2d<T>> convs_;
};

/// Mean over pyramid levels of mean|features(a) - features(b)|.
template <class T>
Tensor<T> perceptual_loss(const FrozenFeatures<T>& net, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("perceptual_loss: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto fa = net.levels(a);
  const auto fb = net.levels(b);
  Tensor<T> total;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    const Tensor<T> t = l1_mean(fa[i], fb[i]);
    total = total.defined() ? add(total, t) : t;
  }
  return scale(total, T(1) / static_cast<T>(fa.size()));
}

/// BCE between every head's map and the mask resized to the map resolution,
/// averaged over pixels, heads and classes, then over layers.
template <class T>
Tensor<T> attention_loss(const std::vector<AttentionMaps<T>>& layers, const Tensor<T>& masks,
                         T eps = T(1e-7)) {
  if (layers.empty()) throw DimensionError("attention_loss: no attention layers");
  Tensor<T> total;
  for (const auto& maps : layers) {
    if (maps.rank() != 5) throw DimensionError("attention_loss: maps must be [N,h,C,H,W]");
    const std::size_t N = maps.dim(0), h = maps.dim(1), C = maps.dim(2), H = maps.dim(3), W = maps.dim(4);
    if (masks.rank() != 4 || masks.dim(0) != N || masks.dim(1) != C)
      throw DimensionError("attention_loss: mask must be [N," + std::to_string(C) + ",H,W]");
    const Tensor<T> m = resize_mask_batch(masks, H, W);
    std::vector<T> target(maps.numel());
    const std::size_t plane = C * H * W;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < h; ++k)
        std::copy_n(m.values().begin() + static_cast<std::ptrdiff_t>(n * plane), plane,
                    target.begin() + static_cast<std::ptrdiff_t>((n * h + k) * plane));
    const Tensor<T> t = bce_mean(maps, Tensor<T>(maps.shape(), std::move(target)), eps);
    total = total.defined() ? add(total, t) : t;
  }
  return scale(total, T(1) / static_cast<T>(layers.size()));
}

struct LossWeights {
  double feature_matching = 10.0;
  double perceptual = 10.0;
  double attention = 1.0;
};

/// Scalar values of one training step. `weighted_total` is the generator-side objective.
struct LossBundle {
  double adv_g = 0, adv_d = 0, feat_match = 0, perceptual = 0, attention = 0;
  double weighted_total = 0;
  std::map<std::string, double> weights;

  bool finite(std::string* first_bad = nullptr) const {
    const std::pair<const char*, double> terms[] = {{"adv_g", adv_g},           {"adv_d", adv_d},
                                                     {"feat_match", feat_match}, {"perceptual", perceptual},
                                                     {"attention", attention},   {"weighted_total", weighted_total}};
    for (const auto& [name, v] : terms)
      if (!std::isfinite(v)) {
        if (first_bad) *first_bad = name;
        return false;
      }
    return true;
  }
};

}  // namespace casis
