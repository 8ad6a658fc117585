#pragma once

// Self-attention, cross-attention and spatial-transformer blocks.
//
// Blocks keep features channel-major ([N, dim, H*W] per head group) so the
// projections are 1x1 convolutions and no token transposes are needed. Logits
// are computed key-major, [batch*heads, keys, queries], which makes the
// cross-attention map come out directly as [N, h, C, H, W] with the softmax
// over the class axis.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "casis/nn.hpp"

namespace casis {

/// Scaled dot-product attention weights in token layout:
/// Q [B,Nq,d], K [B,Nk,d] -> softmax_k(Q K^T / sqrt(d)) [B,Nq,Nk].
template <class T>
Tensor<T> attention_map(const Tensor<T>& q, const Tensor<T>& k) {
  if (q.rank() != 3 || k.rank() != 3) throw DimensionError("attention_map: Q and K must be rank 3");
  if (q.dim(0) != k.dim(0)) throw DimensionError("attention_map: head axis (0) mismatch");
  if (q.dim(2) != k.dim(2)) throw DimensionError("attention_map: head-dim axis (2) mismatch");
  const T inv = T(1) / std::sqrt(static_cast<T>(q.dim(2)));
  return softmax(scale(bmm(q, k, false, true), inv), -1);
}

/// attention_map(Q,K) * V with V [B,Nk,d] -> [B,Nq,d].
template <class T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  if (v.rank() != 3 || v.dim(0) != k.dim(0) || v.dim(1) != k.dim(1))
    throw DimensionError("attend: V must be [B,Nk,dv] matching K");
  return bmm(attention_map(q, k), v);
}

/// Applies an explicit map [B,Nq,Nk] to V [B,Nk,d].
template <class T>
Tensor<T> attend_with_map(const Tensor<T>& map, const Tensor<T>& v) {
  return bmm(map, v);
}

struct AttentionConfig {
  std::size_t model_dim = 64;
  std::size_t nominal_head_dim = 64;

  std::size_t num_heads() const { return std::max<std::size_t>(1, model_dim / nominal_head_dim); }
  std::size_t head_dim() const { return model_dim / num_heads(); }

  void validate() const {
    if (model_dim == 0) throw ConfigError("attention: model_dim must be positive");
    if (model_dim % num_heads())
      throw ConfigError("attention: model_dim " + std::to_string(model_dim) +
                        " not divisible into " + std::to_string(num_heads()) + " heads");
  }
};

/// Per-layer cross-attention maps, [N, h, C, H, W]; sums to one over C.
template <class T>
using AttentionMaps = Tensor<T>;

namespace detail {

// [N, h*d, H, W] -> [N*h, d, H*W]
template <class T>
Tensor<T> heads_channel_major(const Tensor<T>& x, std::size_t heads) {
  const std::size_t N = x.dim(0), dim = x.dim(1), hw = x.dim(2) * x.dim(3);
  return reshape(x, {N * heads, dim / heads, hw});
}

// [N, L, h*d] -> [N*h, L, d]
template <class T>
Tensor<T> heads_token_major(const Tensor<T>& x, std::size_t heads) {
  const std::size_t N = x.dim(0), L = x.dim(1), dim = x.dim(2), d = dim / heads;
  if (heads == 1) return reshape(x, {N, L, d});
  return reshape(permute(reshape(x, {N, L, heads, d}), {0, 2, 1, 3}), {N * heads, L, d});
}

}  // namespace detail

/// x + W_O * MHA(Q,K,V from GN(x)). Zero-initialized W_O makes it the identity.
template <class T>
class SelfAttentionBlock {
 public:
  SelfAttentionBlock() = default;
  SelfAttentionBlock(const AttentionConfig& cfg, std::size_t max_tokens, Rng& rng)
      : cfg_(cfg), max_tokens_(max_tokens) {
    cfg.validate();
    const std::size_t dim = cfg.model_dim;
    norm_ = GroupNorm<T>(dim, norm_groups_for(dim));
    q_ = Conv2d<T>(dim, dim, 1, {}, rng, 1.0, false);
    k_ = Conv2d<T>(dim, dim, 1, {}, rng, 1.0, false);
    v_ = Conv2d<T>(dim, dim, 1, {}, rng, 1.0, false);
    out_ = Conv2d<T>(dim, dim, 1, {}, rng);
    out_.zero_init();
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    check_input(x);
    const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3), h = cfg_.num_heads();
    const Tensor<T> n = norm_(x);
    const Tensor<T> q = detail::heads_channel_major(q_(n), h);
    const Tensor<T> k = detail::heads_channel_major(k_(n), h);
    const Tensor<T> v = detail::heads_channel_major(v_(n), h);
    const T inv = T(1) / std::sqrt(static_cast<T>(cfg_.head_dim()));
    // [N*h, keys, queries], normalized over keys.
    const Tensor<T> a = softmax(scale(bmm(k, q, true, false), inv), 1);
    const Tensor<T> o = reshape(bmm(v, a), {N, cfg_.model_dim, H, W});
    return add(x, out_(o));
  }

  Conv2d<T>& out_proj() { return out_; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    norm_.collect(out, prefix + ".norm");
    q_.collect(out, prefix + ".q");
    k_.collect(out, prefix + ".k");
    v_.collect(out, prefix + ".v");
    out_.collect(out, prefix + ".out");
  }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.model_dim)
      throw DimensionError("self-attention: expected [N," + std::to_string(cfg_.model_dim) +
                           ",H,W], got " + shape_str(x.shape()));
    if (x.dim(2) * x.dim(3) > max_tokens_)
      throw ConfigError("self-attention: " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                        " feature map exceeds the configured self-attention limit of " +
                        std::to_string(max_tokens_) + " positions");
  }

  AttentionConfig cfg_;
  std::size_t max_tokens_ = 64 * 64;
  GroupNorm<T> norm_;
  Conv2d<T> q_, k_, v_, out_;
};

/// Queries from generator features, keys/values from the C style rows.
template <class T>
class CrossAttentionBlock {
 public:
  CrossAttentionBlock() = default;
  CrossAttentionBlock(const AttentionConfig& cfg, std::size_t style_width, std::size_t num_classes,
                      Rng& rng)
      : cfg_(cfg), style_width_(style_width), classes_(num_classes) {
    cfg.validate();
    const std::size_t dim = cfg.model_dim;
    norm_ = GroupNorm<T>(dim, norm_groups_for(dim));
    q_ = Conv2d<T>(dim, dim, 1, {}, rng, 1.0, false);
    k_ = Linear<T>(style_width, dim, rng, 1.0, false);
    v_ = Linear<T>(style_width, dim, rng, 1.0, false);
    out_ = Conv2d<T>(dim, dim, 1, {}, rng);
    out_.zero_init();
  }

  /// x [N,dim,H,W], styles [N,C,S] -> (x + attention output, maps [N,h,C,H,W]).
  std::pair<Tensor<T>, AttentionMaps<T>> operator()(const Tensor<T>& x, const Tensor<T>& styles) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.model_dim)
      throw DimensionError("cross-attention: expected [N," + std::to_string(cfg_.model_dim) +
                           ",H,W], got " + shape_str(x.shape()));
    if (styles.rank() != 3 || styles.dim(1) != classes_)
      throw ConfigError("cross-attention: expected " + std::to_string(classes_) +
                        " style rows, got " + shape_str(styles.shape()));
    if (styles.dim(2) != style_width_)
      throw DimensionError("cross-attention: style axis 2 is " + std::to_string(styles.dim(2)) +
                           ", expected " + std::to_string(style_width_));
    if (styles.dim(0) != x.dim(0)) throw DimensionError("cross-attention: batch axis (0) mismatch");
    const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3), h = cfg_.num_heads();
    const Tensor<T> q = detail::heads_channel_major(q_(norm_(x)), h);  // [N*h, d, HW]
    const Tensor<T> k = detail::heads_token_major(k_(styles), h);       // [N*h, C, d]
    const Tensor<T> v = detail::heads_token_major(v_(styles), h);       // [N*h, C, d]
    const T inv = T(1) / std::sqrt(static_cast<T>(cfg_.head_dim()));
    const Tensor<T> a = softmax(scale(bmm(k, q), inv), 1);  // [N*h, C, HW]
    const Tensor<T> o = reshape(bmm(v, a, true, false), {N, cfg_.model_dim, H, W});
    return {add(x, out_(o)), reshape(a, {N, h, classes_, H, W})};
  }

  Conv2d<T>& out_proj() { return out_; }
  const Conv2d<T>& query_proj() const { return q_; }
  const Linear<T>& key_proj() const { return k_; }
  const Linear<T>& value_proj() const { return v_; }
  const GroupNorm<T>& norm() const { return norm_; }
  const AttentionConfig& config() const { return cfg_; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    norm_.collect(out, prefix + ".norm");
    q_.collect(out, prefix + ".q");
    k_.collect(out, prefix + ".k");
    v_.collect(out, prefix + ".v");
    out_.collect(out, prefix + ".out");
  }

 private:
  AttentionConfig cfg_;
  std::size_t style_width_ = 0;
  std::size_t classes_ = 0;
  GroupNorm<T> norm_;
  Conv2d<T> q_;
  Linear<T> k_, v_;
  Conv2d<T> out_;
};

/// x + W2 * lrelu(W1 * GN(x)), both maps pointwise; width 4*dim.
template <class T>
class FeedForwardBlock {
 public:
  FeedForwardBlock() = default;
  FeedForwardBlock(std::size_t dim, Rng& rng) {
    norm_ = GroupNorm<T>(dim, norm_groups_for(dim));
    in_ = Conv2d<T>(dim, 4 * dim, 1, {}, rng, std::sqrt(2.0));
    out_ = Conv2d<T>(4 * dim, dim, 1, {}, rng);
    out_.zero_init();
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return add(x, out_(leaky_relu(in_(norm_(x)), T(0.2))));
  }

  Conv2d<T>& out_proj() { return out_; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    norm_.collect(out, prefix + ".norm");
    in_.collect(out, prefix + ".in");
    out_.collect(out, prefix + ".out");
  }

 private:
  GroupNorm<T> norm_;
  Conv2d<T> in_, out_;
};

/// Optional self-attention, then cross-attention, then feed-forward; each residual.
template <class T>
class SpatialTransformer {
 public:
  SpatialTransformer() = default;
  SpatialTransformer(const AttentionConfig& cfg, std::size_t style_width, std::size_t num_classes,
                     bool use_self_attention, std::size_t max_self_tokens, Rng& rng)
      : use_self_(use_self_attention), cross_(cfg, style_width, num_classes, rng), ff_(cfg.model_dim, rng) {
    if (use_self_) self_ = SelfAttentionBlock<T>(cfg, max_self_tokens, rng);
  }

  std::pair<Tensor<T>, AttentionMaps<T>> operator()(const Tensor<T>& x, const Tensor<T>& styles) const {
    Tensor<T> h = use_self_ ? self_(x) : x;
    auto [c, maps] = cross_(h, styles);
    return {ff_(c), maps};
  }

  bool uses_self_attention() const { return use_self_; }

  /// Zeroes every residual output projection.
  void zero_output_projections() {
    if (use_self_) self_.out_proj().zero_init();
    cross_.out_proj().zero_init();
    ff_.out_proj().zero_init();
  }

  const CrossAttentionBlock<T>& cross() const { return cross_; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    if (use_self_) self_.collect(out, prefix + ".self");
    cross_.collect(out, prefix + ".cross");
    ff_.collect(out, prefix + ".ff");
  }

 private:
  bool use_self_ = false;
  SelfAttentionBlock<T> self_;
  CrossAttentionBlock<T> cross_;
  FeedForwardBlock<T> ff_;
};

}  // namespace casis
