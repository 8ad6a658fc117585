#pragma once

// The synthesis model: style encoder + mask embedder + generator, the frozen
// feature pyramid used by the perceptual loss, and an optional mapping network
// added by the diversity phase.

#include <memory>
#include <optional>
#include <string>

#include "casis/adversarial.hpp"
#include "casis/checkpoint.hpp"
#include "casis/config.hpp"
#include "casis/diversity.hpp"
#include "casis/generator.hpp"
#include "casis/mask_embedder.hpp"
#include "casis/style_encoder.hpp"

namespace casis {

template <class T>
class Model {
 public:
  explicit Model(const RunConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    encoder_ = StyleEncoder<T>(cfg.encoder(), rng);
    embedder_ = MaskEmbedder<T>(cfg.embedder(), rng);
    generator_ = Generator<T>(cfg.generator(), rng);
    features_ = FrozenFeatures<T>(cfg.perceptual_seed);
  }

  const RunConfig& config() const { return cfg_; }
  const StyleEncoder<T>& encoder() const { return encoder_; }
  const MaskEmbedder<T>& embedder() const { return embedder_; }
  const Generator<T>& generator() const { return generator_; }
  Generator<T>& generator() { return generator_; }
  const FrozenFeatures<T>& features() const { return features_; }

  StyleCodes<T> styles(const Tensor<T>& images, const Tensor<T>& masks) const {
    return encoder_.encode(images, masks);
  }

  /// Learned embedding, or the mask itself resized to the generator's input
  /// resolution when the embedder is ablated.
  MaskEmbedding<T> embed(const Tensor<T>& masks) const {
    if (!cfg_.no_mask_embedder) return embedder_.embed(masks);
    const std::size_t N = masks.dim(0), C = masks.dim(1), b = cfg_.base_resolution;
    return {reshape(resize_mask_batch(masks, b, b), {N, C, b * b})};
  }

  /// `masks` is only read by the SPADE ablation.
  GeneratedSample<T> generate(const MaskEmbedding<T>& emb, const StyleCodes<T>& styles,
                              const Tensor<T>& masks) const {
    if (cfg_.no_cross_attention) return generator_.generate_spade(emb.spatial_view(), masks, styles);
    return generator_.generate(emb.spatial_view(), styles);
  }

  GeneratedSample<T> reconstruct(const Tensor<T>& images, const Tensor<T>& masks) const {
    return generate(embed(masks), styles(images, masks), masks);
  }

  /// Parameters updated by the reconstruction phase.
  ParamList<T> trainable_parameters() const {
    ParamList<T> out;
    encoder_.collect(out, "style_encoder");
    if (!cfg_.no_mask_embedder) embedder_.collect(out, "mask_embedder");
    generator_.collect(out, "generator");
    return out;
  }

  /// Everything persisted in a checkpoint.
  ParamList<T> all_parameters() const {
    ParamList<T> out;
    encoder_.collect(out, "style_encoder");
    embedder_.collect(out, "mask_embedder");
    generator_.collect(out, "generator");
    features_.collect(out, "perceptual");
    if (mapping_) mapping_->collect(out, "mapping");
    return out;
  }

  bool has_mapping() const { return static_cast<bool>(mapping_); }
  const MappingNetwork<T>& mapping() const {
    if (!mapping_) throw UsageError("model has no mapping network; run the diversity phase first");
    return *mapping_;
  }
  MappingNetwork<T>& add_mapping(std::uint64_t seed) {
    Rng rng(seed);
    mapping_.emplace(cfg_.mapping(), rng);
    return *mapping_;
  }

  void save(const std::string& path) const { save_checkpoint(path, cfg_.to_text(), all_parameters()); }

  static Model load(const std::string& path) {
    const CheckpointData ck = load_checkpoint(path);
    return from_checkpoint(ck, RunConfig::from_text(ck.config_text));
  }

  /// Parameters from `ck` under `cfg`, which may differ from the stored config
  /// in anything that does not change a parameter shape.
  static Model from_checkpoint(const CheckpointData& ck, const RunConfig& cfg) {
    Model m(cfg);
    bool mapping = false;
    for (const auto& name : ck.order)
      if (name.rfind("mapping.", 0) == 0) mapping = true;
    if (mapping) m.add_mapping(0);
    restore_parameters(ck, m.all_parameters());
    return m;
  }

 private:
  RunConfig cfg_;
  StyleEncoder<T> encoder_;
  MaskEmbedder<T> embedder_;
  Generator<T> generator_;
  FrozenFeatures<T> features_;
  std::optional<MappingNetwork<T>> mapping_;
};

}  // namespace casis
