#pragma once

#include <cmath>
#include <set>
#include <string>

#include "casis/mask.hpp"
#include "casis/nn.hpp"

namespace casis {

struct EmbedderConfig {
  std::size_t num_classes = 4;
  std::size_t input_size = 64;
  std::size_t code_dim = 256;

  std::size_t view_side() const { return static_cast<std::size_t>(std::lround(std::sqrt(double(code_dim)))); }

  void validate() const {
    if (num_classes < 1) throw ConfigError("embedder: num_classes must be >= 1");
    if (input_size < 1) throw ConfigError("embedder: input_size must be >= 1");
    if (view_side() * view_side() != code_dim)
      throw ConfigError("embedder: code_dim " + std::to_string(code_dim) + " is not a perfect square");
  }
};

/// C latent codes per sample, [N, C, D]; the generator reads them as [N, C, sqrt(D), sqrt(D)].
template <class T>
struct MaskEmbedding {
  Tensor<T> codes;

  std::size_t num_classes() const { return codes.dim(1); }

  Tensor<T> spatial_view() const {
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(double(codes.dim(2)))));
    return reshape(codes, {codes.dim(0), codes.dim(1), side, side});
  }
};

/// One linear layer shared by all classes, applied to each flattened mask channel.
template <class T>
class MaskEmbedder {
 public:
  MaskEmbedder() = default;
  MaskEmbedder(const EmbedderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    proj_ = Linear<T>(cfg.input_size * cfg.input_size, cfg.code_dim, rng);
  }

  const EmbedderConfig& config() const { return cfg_; }

  /// masks [N,C,H,W] one-hot -> codes [N,C,code_dim].
  MaskEmbedding<T> embed(const Tensor<T>& masks) const {
    if (masks.rank() != 4) throw DimensionError("mask embedder: expected [N,C,H,W]");
    if (masks.dim(1) != cfg_.num_classes)
      throw ConfigError("mask embedder: expected " + std::to_string(cfg_.num_classes) +
                        " classes, got " + std::to_string(masks.dim(1)));
    if (masks.dim(2) != cfg_.input_size || masks.dim(3) != cfg_.input_size)
      throw ConfigError("mask embedder: configured for " + std::to_string(cfg_.input_size) +
                        "x" + std::to_string(cfg_.input_size) + " masks, got " +
                        shape_str(masks.shape()));
    const std::size_t N = masks.dim(0), C = masks.dim(1);
    const Tensor<T> flat = reshape(masks, {N, C, cfg_.input_size * cfg_.input_size});
    return {proj_(flat)};
  }

  MaskEmbedding<T> embed(const SemanticMask& mask) const {
    const SemanticMask masks[] = {mask};
    return embed(mask_batch<T>(masks));
  }

  void collect(ParamList<T>& out, const std::string& prefix) const { proj_.collect(out, prefix + ".proj"); }

  ParamList<T> parameters() const {
    ParamList<T> out;
    collect(out, "mask_embedder");
    return out;
  }

 private:
  EmbedderConfig cfg_;
  Linear<T> proj_;
};

/// Codes of `classes` become alpha*e1 + (1-alpha)*e2; all others are copied from e1.
template <class T>
MaskEmbedding<T> interpolate_embeddings(const MaskEmbedding<T>& e1, const MaskEmbedding<T>& e2,
                                        const std::set<std::size_t>& classes, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ArgumentError("interpolate_embeddings: alpha " + std::to_string(alpha) + " outside [0,1]");
  if (e1.codes.shape() != e2.codes.shape())
    throw DimensionError("interpolate_embeddings: embeddings have different shapes");
  const std::size_t N = e1.codes.dim(0), C = e1.codes.dim(1), D = e1.codes.dim(2);
  for (auto c : classes)
    if (c >= C) throw ArgumentError("interpolate_embeddings: class " + std::to_string(c) + " out of range");
  std::vector<T> out(e1.codes.values());
  const auto& b = e2.codes.values();
  const T a = static_cast<T>(alpha);
  const T ra = static_cast<T>(1.0 - alpha);
  for (std::size_t n = 0; n < N; ++n)
    for (auto c : classes)
      for (std::size_t d = 0; d < D; ++d) {
        const std::size_t i = (n * C + c) * D + d;
        if (alpha == 0.0)
          out[i] = b[i];
        else if (alpha != 1.0)
          out[i] = a * out[i] + ra * b[i];
      }
  return {Tensor<T>(e1.codes.shape(), std::move(out))};
}

/// Codes of `classes` taken from `donor`; others from `base`.
template <class T>
MaskEmbedding<T> swap_embedding_rows(const MaskEmbedding<T>& base, const MaskEmbedding<T>& donor,
                                     const std::set<std::size_t>& classes) {
  return interpolate_embeddings(base, donor, classes, 0.0);
}

}  // namespace casis
