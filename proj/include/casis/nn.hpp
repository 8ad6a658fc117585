#pragma once

// Parameterized layers, parameter registry, initializers and the Adam optimizer.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "casis/ops.hpp"

namespace casis {

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

template <class T>
std::size_t param_count(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

template <class T>
std::vector<Tensor<T>> tensors_of(const ParamList<T>& params) {
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

template <class T>
void set_requires_grad(const ParamList<T>& params, bool on) {
  for (auto p : params) p.tensor.set_requires_grad(on);
}

template <class T>
void zero_grad(const ParamList<T>& params) {
  for (auto p : params) p.tensor.zero_grad();
}

/// Deterministic random source shared by initializers and data synthesis.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double normal() { return normal_(gen_); }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(gen_);
  }
  std::uint64_t next() { return gen_(); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(gen_() % n); }
  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

template <class T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad = false) {
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

template <class T>
Tensor<T> uniform_tensor(Shape shape, double lo, double hi, Rng& rng) {
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(std::move(shape), std::move(v));
}

template <class T>
Tensor<T> zero_param(Shape shape) {
  return Tensor<T>::zeros(std::move(shape)).set_requires_grad(true);
}

/// Grouped 2-D convolution layer with normal(0, gain/sqrt(fan_in)) weights.
template <class T>
struct Conv2d {
  Tensor<T> weight;
  Tensor<T> bias;
  Conv2dParams params;

  Conv2d() = default;
  Conv2d(std::size_t cin, std::size_t cout, std::size_t kernel, Conv2dParams p, Rng& rng,
         double gain = 1.0, bool with_bias = true)
      : params(p) {
    if (p.groups == 0 || cin % p.groups || cout % p.groups)
      throw ConfigError("Conv2d: channels " + std::to_string(cin) + "->" + std::to_string(cout) +
                        " not divisible by groups " + std::to_string(p.groups));
    const std::size_t fan_in = cin / p.groups * kernel * kernel;
    weight = normal_tensor<T>({cout, cin / p.groups, kernel, kernel},
                              gain / std::sqrt(static_cast<double>(fan_in)), rng, true);
    if (with_bias) bias = zero_param<T>({cout});
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, params); }

  void zero_init() {
    std::fill(weight.mutable_data().begin(), weight.mutable_data().end(), T(0));
    if (bias.defined()) std::fill(bias.mutable_data().begin(), bias.mutable_data().end(), T(0));
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  Linear(std::size_t din, std::size_t dout, Rng& rng, double gain = 1.0, bool with_bias = true) {
    weight = normal_tensor<T>({dout, din}, gain / std::sqrt(static_cast<double>(din)), rng, true);
    if (with_bias) bias = zero_param<T>({dout});
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void zero_init() {
    std::fill(weight.mutable_data().begin(), weight.mutable_data().end(), T(0));
    if (bias.defined()) std::fill(bias.mutable_data().begin(), bias.mutable_data().end(), T(0));
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

template <class T>
struct GroupNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  std::size_t groups = 1;
  T eps = T(1e-5);

  GroupNorm() = default;
  GroupNorm(std::size_t channels, std::size_t num_groups) : groups(num_groups) {
    if (num_groups == 0 || channels % num_groups)
      throw ConfigError("GroupNorm: " + std::to_string(channels) + " channels not divisible by " +
                        std::to_string(num_groups) + " groups");
    gamma = Tensor<T>::ones({channels}).set_requires_grad(true);
    beta = zero_param<T>({channels});
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return group_norm(x, groups, gamma, beta, eps); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

/// Largest of {32,16,8,4,2,1} that divides `channels`, capped at `cap`.
inline std::size_t norm_groups_for(std::size_t channels, std::size_t cap = 8) {
  for (std::size_t g : {32u, 16u, 8u, 4u, 2u, 1u})
    if (g <= cap && channels % g == 0) return g;
  return 1;
}

template <class T>
bool grads_finite(const ParamList<T>& params, std::string* first_bad = nullptr) {
  for (const auto& p : params) {
    for (T g : p.tensor.grad())
      if (!std::isfinite(g)) {
        if (first_bad) *first_bad = p.name;
        return false;
      }
  }
  return true;
}

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  /// Applies one update to every parameter that holds a gradient.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto w = p.mutable_data();
      auto g = p.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        w[i] = static_cast<T>(w[i] - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace casis
