#include <gtest/gtest.h>

#include "casis/config.hpp"
#include "casis/mask_embedder.hpp"
#include "test_util.hpp"

using namespace casis;

TEST(MaskEmbedder, FullConfigurationEmbeddingIs16x16PerClass) {
  const auto cfg = RunConfig::full();
  Rng rng(1);
  MaskEmbedder<float> emb(cfg.embedder(), rng);
  const SemanticMask m = SemanticMask::uniform(cfg.num_classes, 256, 256, 0);
  const auto e = emb.embed(m);
  EXPECT_EQ(e.codes.shape(), (Shape{1, 19, 256}));
  EXPECT_EQ(e.spatial_view().shape(), (Shape{1, 19, 16, 16}));
}

TEST(MaskEmbedder, CrossChannelJacobianIsZero) {
  Rng rng(2);
  MaskEmbedder<double> emb(EmbedderConfig{4, 8, 9}, rng);
  Tensor<double> m = testutil::one_hot(1, 4, 8, 8, rng);
  m.set_requires_grad(true);
  const auto codes = emb.embed(m).codes;
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t d = 0; d < 9; ++d) {
      m.zero_grad();
      Tensor<double> pick = Tensor<double>::zeros(codes.shape());
      pick.mutable_data()[c * 9 + d] = 1.0;
      sum(mul(emb.embed(m).codes, pick)).backward();
      for (std::size_t j = 0; j < 4; ++j) {
        if (j == c) continue;
        for (std::size_t p = 0; p < 64; ++p) ASSERT_EQ(m.grad()[j * 64 + p], 0.0) << c << "<-" << j;
      }
    }
}

TEST(MaskEmbedder, SharedProjectionMapsEqualChannelsToEqualCodes) {
  Rng rng(3);
  MaskEmbedder<double> emb(EmbedderConfig{2, 4, 4}, rng);
  std::vector<double> v(2 * 16, 0.0);
  for (std::size_t p = 0; p < 16; ++p) v[p] = v[16 + p] = double(p % 2);
  const auto codes = emb.embed(Tensor<double>({1, 2, 4, 4}, v)).codes;
  for (std::size_t d = 0; d < 4; ++d) EXPECT_EQ(codes.at({0, 0, d}), codes.at({0, 1, d}));
}

TEST(MaskEmbedder, NonSquareCodeRejected) { EXPECT_THROW((EmbedderConfig{4, 8, 10}.validate()), ConfigError); }

TEST(MaskEmbedder, WrongMaskSizeRejected) {
  Rng rng(4);
  MaskEmbedder<double> emb(EmbedderConfig{2, 8, 4}, rng);
  EXPECT_THROW(emb.embed(testutil::one_hot(1, 2, 4, 4, rng)), ConfigError);
}

TEST(Interpolation, EndpointsAreExact) {
  Rng rng(5);
  const MaskEmbedding<double> a{testutil::randn({2, 3, 4}, rng)}, b{testutil::randn({2, 3, 4}, rng)};
  const std::set<std::size_t> cls{0, 2};
  EXPECT_EQ(interpolate_embeddings(a, b, cls, 1.0).codes.values(), a.codes.values());
  const auto zero = interpolate_embeddings(a, b, cls, 0.0).codes;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t d = 0; d < 4; ++d)
        EXPECT_EQ(zero.at({n, c, d}), (cls.count(c) ? b : a).codes.at({n, c, d}));
}

TEST(Interpolation, MidpointIsTheAverage) {
  Rng rng(6);
  const MaskEmbedding<double> a{testutil::randn({1, 2, 4}, rng)}, b{testutil::randn({1, 2, 4}, rng)};
  const auto mid = interpolate_embeddings(a, b, {1}, 0.5).codes;
  for (std::size_t d = 0; d < 4; ++d) {
    EXPECT_DOUBLE_EQ(mid.at({0, 1, d}), 0.5 * a.codes.at({0, 1, d}) + 0.5 * b.codes.at({0, 1, d}));
    EXPECT_EQ(mid.at({0, 0, d}), a.codes.at({0, 0, d}));
  }
}

TEST(Interpolation, AlphaOutsideUnitIntervalRejected) {
  Rng rng(7);
  const MaskEmbedding<double> a{testutil::randn({1, 2, 4}, rng)};
  EXPECT_THROW(interpolate_embeddings(a, a, {0}, 1.5), ArgumentError);
  EXPECT_THROW(interpolate_embeddings(a, a, {0}, -0.1), ArgumentError);
}

TEST(Interpolation, SwapIsAnInvolution) {
  Rng rng(8);
  const MaskEmbedding<double> a{testutil::randn({1, 3, 4}, rng)}, b{testutil::randn({1, 3, 4}, rng)};
  const auto once = swap_embedding_rows(a, b, {1});
  const auto twice = swap_embedding_rows(once, a, {1});
  EXPECT_EQ(twice.codes.values(), a.codes.values());
}
