#pragma once

// Cross-attention generator: a stack of (residual conv block, spatial
// transformer) stages at resolutions base, 2*base, ... with nearest-neighbour
// x2 upsampling between consecutive stages, then GN -> LeakyReLU -> 3x3 conv ->
// tanh. The SPADE ablation swaps each transformer for a class-adaptive
// de-normalization driven by the resized mask and the per-class style rows.

#include <string>
#include <vector>

#include "casis/attention.hpp"
#include "casis/mask_embedder.hpp"
#include "casis/nn.hpp"

namespace casis {

enum class ConditioningMode { cross_attention, spade_ablation };

struct GeneratorConfig {
  std::size_t num_classes = 4;
  std::size_t num_blocks = 3;
  std::size_t base_resolution = 16;
  std::size_t top_width = 64;
  std::size_t min_width = 8;
  std::size_t self_attention_cutoff = 32;
  std::size_t style_width = 1280;
  std::size_t nominal_head_dim = 64;
  ConditioningMode conditioning = ConditioningMode::cross_attention;

  std::size_t resolution(std::size_t block) const { return base_resolution << block; }
  std::size_t output_resolution() const { return resolution(num_blocks - 1); }
  bool self_attention_at(std::size_t block) const { return resolution(block) <= self_attention_cutoff; }

  std::vector<std::size_t> channel_widths() const {
    std::vector<std::size_t> w;
    for (std::size_t b = 0; b < num_blocks; ++b) w.push_back(std::max(min_width, top_width >> b));
    return w;
  }

  void validate() const {
    if (num_classes < 1) throw ConfigError("generator: num_classes must be >= 1");
    if (num_blocks < 1) throw ConfigError("generator: num_blocks must be >= 1");
    if (base_resolution < 1) throw ConfigError("generator: base_resolution must be >= 1");
    if (top_width < 1 || min_width < 1) throw ConfigError("generator: widths must be positive");
    if (style_width < 1) throw ConfigError("generator: style_width must be positive");
  }
};

template <class T>
struct GeneratedSample {
  Tensor<T> image;                           // [N,3,H,W] in [-1,1]
  std::vector<AttentionMaps<T>> attention;   // one [N,h,C,Hi,Wi] per cross-attention layer
};

/// Pre-activation residual block: two 3x3 convs with GN and LeakyReLU(0.2),
/// 1x1 shortcut when the width changes.
template <class T>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(std::size_t cin, std::size_t cout, Rng& rng)
      : norm1_(cin, norm_groups_for(cin)),
        conv1_(cin, cout, 3, {1, 1, 1}, rng, std::sqrt(2.0)),
        norm2_(cout, norm_groups_for(cout)),
        conv2_(cout, cout, 3, {1, 1, 1}, rng, 1.0) {
    if (cin != cout) shortcut_ = Conv2d<T>(cin, cout, 1, {}, rng, 1.0, false);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    const T slope = T(0.2);
    Tensor<T> h = conv1_(leaky_relu(norm1_(x), slope));
    h = conv2_(leaky_relu(norm2_(h), slope));
    return add(shortcut_.weight.defined() ? shortcut_(x) : x, h);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    norm1_.collect(out, prefix + ".norm1");
    conv1_.collect(out, prefix + ".conv1");
    norm2_.collect(out, prefix + ".norm2");
    conv2_.collect(out, prefix + ".conv2");
    if (shortcut_.weight.defined()) shortcut_.collect(out, prefix + ".shortcut");
  }

 private:
  GroupNorm<T> norm1_;
  Conv2d<T> conv1_;
  GroupNorm<T> norm2_;
  Conv2d<T> conv2_;
  Conv2d<T> shortcut_;
};

/// Class-adaptive de-normalization: GN(x) * (1 + gamma(p)) + beta(p), where
/// gamma(p), beta(p) are linear maps of the style row of the class at pixel p.
template <class T>
class ClassAdaptiveDenorm {
 public:
  ClassAdaptiveDenorm() = default;
  ClassAdaptiveDenorm(std::size_t width, std::size_t style_width, Rng& rng)
      : groups_(norm_groups_for(width)),
        gamma_(style_width, width, rng, 0.1),
        beta_(style_width, width, rng, 0.1) {}

  /// (gamma map, beta map), each [N, width, H, W].
  std::pair<Tensor<T>, Tensor<T>> modulation(const Tensor<T>& styles, const Tensor<T>& masks) const {
    const std::size_t N = masks.dim(0), C = masks.dim(1), H = masks.dim(2), W = masks.dim(3);
    const Tensor<T> m = reshape(masks, {N, C, H * W});
    const Tensor<T> g = bmm(gamma_(styles), m, true, false);  // [N, width, HW]
    const Tensor<T> b = bmm(beta_(styles), m, true, false);
    const std::size_t w = g.dim(1);
    return {reshape(g, {N, w, H, W}), reshape(b, {N, w, H, W})};
  }

  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& styles, const Tensor<T>& masks) const {
    auto [g, b] = modulation(styles, masks);
    const Tensor<T> n = group_norm(x, groups_, Tensor<T>(), Tensor<T>());
    return add(mul(n, add_scalar(g, T(1))), b);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    gamma_.collect(out, prefix + ".gamma");
    beta_.collect(out, prefix + ".beta");
  }

 private:
  std::size_t groups_ = 1;
  Linear<T> gamma_, beta_;
};

template <class T>
class Generator {
 public:
  Generator() = default;
  Generator(const GeneratorConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const auto widths = cfg.channel_widths();
    lift_ = Conv2d<T>(cfg.num_classes, widths[0], 1, {}, rng);
    std::size_t cin = widths[0];
    for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
      res_.emplace_back(cin, widths[b], rng);
      if (cfg.conditioning == ConditioningMode::cross_attention) {
        const std::size_t cutoff = cfg.self_attention_cutoff;
        st_.emplace_back(AttentionConfig{widths[b], cfg.nominal_head_dim}, cfg.style_width,
                         cfg.num_classes, cfg.self_attention_at(b), cutoff * cutoff, rng);
      } else {
        spade_.emplace_back(widths[b], cfg.style_width, rng);
      }
      cin = widths[b];
    }
    out_norm_ = GroupNorm<T>(cin, norm_groups_for(cin));
    out_conv_ = Conv2d<T>(cin, 3, 3, {1, 1, 1}, rng);
  }

  const GeneratorConfig& config() const { return cfg_; }

  /// Cross-attention path. input [N,C,base,base] (mask embedding view), styles [N,C,S].
  GeneratedSample<T> generate(const Tensor<T>& input, const Tensor<T>& styles) const {
    if (cfg_.conditioning != ConditioningMode::cross_attention)
      throw ConfigError("generator: generate() needs conditioning_mode=cross_attention");
    check(input, styles);
    GeneratedSample<T> out;
    Tensor<T> x = lift_(input);
    for (std::size_t b = 0; b < cfg_.num_blocks; ++b) {
      if (b) x = upsample_nearest2x(x);
      x = res_[b](x);
      auto [y, maps] = st_[b](x, styles);
      x = y;
      out.attention.push_back(maps);
    }
    out.image = head(x);
    return out;
  }

  /// SPADE ablation path; masks [N,C,H,W] at any resolution, resized per stage.
  GeneratedSample<T> generate_spade(const Tensor<T>& input, const Tensor<T>& masks,
                                    const Tensor<T>& styles) const {
    if (cfg_.conditioning != ConditioningMode::spade_ablation)
      throw ConfigError("generator: generate_spade() needs conditioning_mode=spade_ablation");
    check(input, styles);
    if (masks.rank() != 4 || masks.dim(1) != cfg_.num_classes)
      throw ConfigError("generator: mask must have " + std::to_string(cfg_.num_classes) + " channels");
    GeneratedSample<T> out;
    Tensor<T> x = lift_(input);
    for (std::size_t b = 0; b < cfg_.num_blocks; ++b) {
      if (b) x = upsample_nearest2x(x);
      x = res_[b](x);
      const Tensor<T> m = resize_mask_batch(masks, x.dim(2), x.dim(3));
      x = spade_[b](x, styles, m);
    }
    out.image = head(x);
    return out;
  }

  /// Image produced by the residual convolutional pathway alone.
  Tensor<T> generate_residual_only(const Tensor<T>& input) const {
    Tensor<T> x = lift_(input);
    for (std::size_t b = 0; b < cfg_.num_blocks; ++b) {
      if (b) x = upsample_nearest2x(x);
      x = res_[b](x);
    }
    return head(x);
  }

  const SpatialTransformer<T>& transformer(std::size_t b) const { return st_.at(b); }
  const ClassAdaptiveDenorm<T>& denorm(std::size_t b) const { return spade_.at(b); }

  void zero_attention_outputs() {
    for (auto& st : st_) st.zero_output_projections();
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    lift_.collect(out, prefix + ".lift");
    for (std::size_t b = 0; b < res_.size(); ++b) {
      const std::string p = prefix + ".block" + std::to_string(b);
      res_[b].collect(out, p + ".res");
      if (b < st_.size()) st_[b].collect(out, p + ".transformer");
      if (b < spade_.size()) spade_[b].collect(out, p + ".denorm");
    }
    out_norm_.collect(out, prefix + ".out_norm");
    out_conv_.collect(out, prefix + ".out_conv");
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    collect(out, "generator");
    return out;
  }

 private:
  void check(const Tensor<T>& input, const Tensor<T>& styles) const {
    if (input.rank() != 4 || input.dim(1) != cfg_.num_classes)
      throw ConfigError("generator: input must be [N," + std::to_string(cfg_.num_classes) +
                        ",H,W], got " + shape_str(input.shape()));
    if (input.dim(2) != cfg_.base_resolution || input.dim(3) != cfg_.base_resolution)
      throw DimensionError("generator: input spatial size must be " +
                           std::to_string(cfg_.base_resolution));
    if (styles.rank() != 3 || styles.dim(1) != cfg_.num_classes)
      throw ConfigError("generator: styles must have " + std::to_string(cfg_.num_classes) +
                        " rows, got " + shape_str(styles.shape()));
  }

  Tensor<T> head(const Tensor<T>& x) const {
    return tanh(out_conv_(leaky_relu(out_norm_(x), T(0.2))));
  }

  GeneratorConfig cfg_;
  Conv2d<T> lift_;
  std::vector<ResidualBlock<T>> res_;
  std::vector<SpatialTransformer<T>> st_;
  std::vector<ClassAdaptiveDenorm<T>> spade_;
  GroupNorm<T> out_norm_;
  Conv2d<T> out_conv_;
};

}  // namespace casis
