#pragma once

// Grouped multi-resolution style encoder. One convolution group per semantic
// class; group j reads the image restricted to class j. Per-class codes are
// pooled under the resized mask at every up-sampling layer, projected to
// code_dim by a grouped 1x1 convolution, and concatenated coarsest first.

#include <cstddef>
#include <string>
#include <vector>

#include "casis/mask.hpp"
#include "casis/nn.hpp"

namespace casis {

/// Per-class style codes, [N, C, S] with S = up_layers * code_dim.
template <class T>
using StyleCodes = Tensor<T>;

struct EncoderConfig {
  std::size_t num_classes = 4;
  std::size_t filters_per_group = 4;
  std::size_t down_layers = 6;
  std::size_t up_layers = 5;
  std::size_t code_dim = 256;
  std::size_t image_size = 64;
  bool grouped = true;
  // When true, skip features are appended as a plain channel block, so the
  // grouped conv of an up layer reads features of neighbouring classes.
  bool mix_skip_groups = false;

  std::size_t style_width() const { return up_layers * code_dim; }

  void validate() const {
    if (num_classes < 1) throw ConfigError("encoder: num_classes must be >= 1");
    if (filters_per_group < 1) throw ConfigError("encoder: filters_per_group must be >= 1");
    if (up_layers < 1) throw ConfigError("encoder: up_layers must be >= 1");
    if (up_layers >= down_layers)
      throw ConfigError("encoder: up_layers must be smaller than down_layers");
    if (code_dim < 1) throw ConfigError("encoder: code_dim must be >= 1");
    if (image_size == 0 || image_size % (std::size_t{1} << down_layers))
      throw ConfigError("encoder: image_size " + std::to_string(image_size) +
                        " not divisible by 2^down_layers");
  }
};

template <class T>
class StyleEncoder {
 public:
  StyleEncoder() = default;
  StyleEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const std::size_t C = cfg.num_classes, f = cfg.filters_per_group;
    const std::size_t G = cfg.grouped ? C : 1;
    const std::size_t width = C * f;
    std::size_t cin = 3 * C;
    for (std::size_t i = 0; i < cfg.down_layers; ++i) {
      down_conv_.emplace_back(cin, width, 3, Conv2dParams{2, 1, G}, rng, std::sqrt(2.0));
      down_norm_.emplace_back(width, C);
      cin = width;
    }
    for (std::size_t i = 0; i < cfg.up_layers; ++i) {
      up_conv_.emplace_back(2 * width, width, 3, Conv2dParams{1, 1, G}, rng, std::sqrt(2.0));
      up_norm_.emplace_back(width, C);
      proj_.emplace_back(width, C * cfg.code_dim, 1, Conv2dParams{1, 0, C}, rng);
    }
  }

  const EncoderConfig& config() const { return cfg_; }

  /// images [N,3,H,W] in [-1,1], masks [N,C,H,W] one-hot -> [N, C, up_layers*code_dim].
  StyleCodes<T> encode(const Tensor<T>& images, const Tensor<T>& masks) const {
    const std::size_t C = cfg_.num_classes, f = cfg_.filters_per_group;
    if (images.rank() != 4 || images.dim(1) != 3)
      throw DimensionError("style encoder: images must be [N,3,H,W], got " + shape_str(images.shape()));
    if (masks.rank() != 4 || masks.dim(1) != C)
      throw ConfigError("style encoder: mask must have " + std::to_string(C) + " channels, got " +
                        shape_str(masks.shape()));
    const std::size_t N = images.dim(0), H = images.dim(2), W = images.dim(3);
    if (masks.dim(0) != N || masks.dim(2) != H || masks.dim(3) != W)
      throw DimensionError("style encoder: image and mask shapes differ");
    if (H != cfg_.image_size || W != cfg_.image_size)
      throw ConfigError("style encoder: configured for " + std::to_string(cfg_.image_size) +
                        "px images, got " + std::to_string(H) + "x" + std::to_string(W));

    // Class-restricted image copies: [N,C,3,H,W] -> [N,3C,H,W].
    const Tensor<T> m5 = reshape(masks.detach(), {N, C, 1, H, W});
    const Tensor<T> x5 = mul(reshape(images, {N, 1, 3, H, W}), m5);
    Tensor<T> x = reshape(x5, {N, 3 * C, H, W});

    std::vector<Tensor<T>> skips;
    for (std::size_t i = 0; i < down_conv_.size(); ++i) {
      x = relu(down_norm_[i](down_conv_[i](x)));
      skips.push_back(x);
    }
    std::vector<Tensor<T>> codes;
    for (std::size_t k = 0; k < up_conv_.size(); ++k) {
      x = upsample_nearest2x(x);
      const Tensor<T>& skip = skips[skips.size() - 2 - k];
      x = relu(up_norm_[k](up_conv_[k](join_skip(x, skip))));
      const std::size_t h = x.dim(2), w = x.dim(3);
      const Tensor<T> m = resize_mask_batch(masks, h, w);
      const Tensor<T> pooled = masked_average_pool(x, m);  // [N,C,f]
      Tensor<T> code = proj_[k](reshape(pooled, {N, C * f, 1, 1}));
      codes.push_back(reshape(code, {N, C, cfg_.code_dim}));
    }
    return concat(codes, 2);
  }

  /// Single-image convenience: [3,H,W] + mask -> [C, S].
  StyleCodes<T> encode(const Tensor<T>& image, const SemanticMask& mask) const {
    const SemanticMask masks[] = {mask};
    const Tensor<T> codes = encode(reshape(image, {1, 3, image.dim(1), image.dim(2)}),
                                   mask_batch<T>(masks));
    return reshape(codes, {cfg_.num_classes, cfg_.style_width()});
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < down_conv_.size(); ++i) {
      down_conv_[i].collect(out, prefix + ".down" + std::to_string(i) + ".conv");
      down_norm_[i].collect(out, prefix + ".down" + std::to_string(i) + ".norm");
    }
    for (std::size_t i = 0; i < up_conv_.size(); ++i) {
      up_conv_[i].collect(out, prefix + ".up" + std::to_string(i) + ".conv");
      up_norm_[i].collect(out, prefix + ".up" + std::to_string(i) + ".norm");
      proj_[i].collect(out, prefix + ".proj" + std::to_string(i));
    }
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    collect(out, "style_encoder");
    return out;
  }

 private:
  Tensor<T> join_skip(const Tensor<T>& up, const Tensor<T>& skip) const {
    if (cfg_.mix_skip_groups) return concat<T>({up, skip}, 1);
    const std::size_t N = up.dim(0), C = cfg_.num_classes, f = cfg_.filters_per_group;
    const std::size_t h = up.dim(2), w = up.dim(3);
    const Tensor<T> j = concat<T>({reshape(up, {N, C, f, h, w}), reshape(skip, {N, C, f, h, w})}, 2);
    return reshape(j, {N, 2 * C * f, h, w});
  }

  EncoderConfig cfg_;
  std::vector<Conv2d<T>> down_conv_;
  std::vector<GroupNorm<T>> down_norm_;
  std::vector<Conv2d<T>> up_conv_;
  std::vector<GroupNorm<T>> up_norm_;
  std::vector<Conv2d<T>> proj_;
};

}  // namespace casis
