#pragma once

#include <vector>

#include "casis/config.hpp"
#include "casis/nn.hpp"

namespace testutil {

using casis::Rng;
using casis::Shape;
using casis::Tensor;

inline Tensor<double> randn(Shape s, Rng& rng, double sd = 1.0) {
  return casis::normal_tensor<double>(std::move(s), sd, rng);
}

inline std::vector<double> vec(const Tensor<double>& t) { return t.values(); }

/// One-hot [N,C,H,W] with a random class per pixel.
inline Tensor<double> one_hot(std::size_t N, std::size_t C, std::size_t H, std::size_t W, Rng& rng) {
  std::vector<double> v(N * C * H * W, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < H * W; ++p) v[(n * C + rng.index(C)) * H * W + p] = 1.0;
  return Tensor<double>({N, C, H, W}, std::move(v));
}

inline std::size_t between(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

/// A model small enough for unit tests: 3 classes, 32x32.
inline casis::RunConfig tiny_config() {
  casis::RunConfig c;
  c.num_classes = 3;
  c.image_size = 32;
  c.train_scenes = 8;
  c.test_scenes = 4;
  c.filters_per_group = 2;
  c.down_layers = 4;
  c.up_layers = 3;
  c.code_dim = 8;
  c.embed_dim = 64;
  c.gen_blocks = 3;
  c.base_resolution = 8;
  c.top_width = 16;
  c.self_attention_cutoff = 16;
  c.head_dim = 8;
  c.disc_width = 8;
  c.noise_dim = 8;
  c.mapping_hidden = 16;
  c.mapping_trunk_layers = 1;
  c.mapping_branch_layers = 2;
  c.epochs = 1;
  return c;
}

}  // namespace testutil
