#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "casis/nn.hpp"

namespace casis {

struct MappingConfig {
  std::size_t num_classes = 4;
  std::size_t noise_dim = 512;
  std::size_t hidden = 512;
  std::size_t trunk_layers = 3;
  std::size_t branch_layers = 4;
  std::size_t branch_out = 1280;

  void validate() const {
    if (num_classes < 1 || noise_dim < 1 || hidden < 1 || branch_out < 1)
      throw ConfigError("mapping: sizes must be positive");
    if (trunk_layers < 1 || branch_layers < 1) throw ConfigError("mapping: need at least one layer per stage");
  }
};

/// Noise -> per-class style codes: a shared LeakyReLU trunk, then one branch per
/// class whose last layer (no activation) emits that class's style row.
template <class T>
class MappingNetwork {
 public:
  MappingNetwork() = default;
  MappingNetwork(const MappingConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    std::size_t din = cfg.noise_dim;
    for (std::size_t i = 0; i < cfg.trunk_layers; ++i) {
      trunk_.emplace_back(din, cfg.hidden, rng, std::sqrt(2.0));
      din = cfg.hidden;
    }
    branches_.resize(cfg.num_classes);
    for (auto& br : branches_) {
      std::size_t bin = cfg.hidden;
      for (std::size_t i = 0; i < cfg.branch_layers; ++i) {
        const bool last = i + 1 == cfg.branch_layers;
        const std::size_t bout = last ? cfg.branch_out : cfg.hidden;
        br.emplace_back(bin, bout, rng, last ? 1.0 : std::sqrt(2.0));
        bin = bout;
      }
    }
  }

  const MappingConfig& config() const { return cfg_; }

  /// z [N, noise_dim] -> styles [N, C, branch_out].
  Tensor<T> operator()(const Tensor<T>& z) const {
    if (z.rank() != 2 || z.dim(1) != cfg_.noise_dim)
      throw DimensionError("mapping: noise must be [N," + std::to_string(cfg_.noise_dim) + "], got " +
                           shape_str(z.shape()));
    Tensor<T> h = z;
    for (const auto& l : trunk_) h = leaky_relu(l(h), T(0.2));
    const std::size_t N = z.dim(0);
    std::vector<Tensor<T>> rows;
    for (const auto& br : branches_) {
      Tensor<T> r = h;
      for (std::size_t i = 0; i < br.size(); ++i) {
        r = br[i](r);
        if (i + 1 < br.size()) r = leaky_relu(r, T(0.2));
      }
      rows.push_back(reshape(r, {N, 1, cfg_.branch_out}));
    }
    return concat(rows, 1);
  }

  /// Sets each branch's output bias to row j of `means` [C, branch_out].
  void set_output_bias(const Tensor<T>& means) {
    if (means.shape() != Shape{cfg_.num_classes, cfg_.branch_out})
      throw DimensionError("mapping: bias rows must be [" + std::to_string(cfg_.num_classes) + "," +
                           std::to_string(cfg_.branch_out) + "], got " + shape_str(means.shape()));
    for (std::size_t j = 0; j < branches_.size(); ++j) {
      const auto b = branches_[j].back().bias.mutable_data();
      std::copy_n(means.values().begin() + j * cfg_.branch_out, cfg_.branch_out, b.begin());
    }
  }

  /// Parameters of class j's branch only.
  ParamList<T> branch_parameters(std::size_t j) const {
    ParamList<T> out;
    for (std::size_t i = 0; i < branches_.at(j).size(); ++i)
      branches_[j][i].collect(out, "mapping.branch" + std::to_string(j) + ".fc" + std::to_string(i));
    return out;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < trunk_.size(); ++i) trunk_[i].collect(out, prefix + ".trunk" + std::to_string(i));
    for (std::size_t j = 0; j < branches_.size(); ++j)
      for (std::size_t i = 0; i < branches_[j].size(); ++i)
        branches_[j][i].collect(out, prefix + ".branch" + std::to_string(j) + ".fc" + std::to_string(i));
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    collect(out, "mapping");
    return out;
  }

 private:
  MappingConfig cfg_;
  std::vector<Linear<T>> trunk_;
  std::vector<std::vector<Linear<T>>> branches_;
};

/// -mean|a - b|; added to a minimized objective it pushes the two images apart.
template <class T>
Tensor<T> diversity_loss(const Tensor<T>& a, const Tensor<T>& b) {
  return neg(l1_mean(a, b));
}

}  // namespace casis
