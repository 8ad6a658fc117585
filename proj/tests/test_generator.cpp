#include <gtest/gtest.h>

#include "casis/config.hpp"
#include "casis/generator.hpp"
#include "test_util.hpp"

using namespace casis;

namespace {

GeneratorConfig tiny(ConditioningMode mode = ConditioningMode::cross_attention) {
  GeneratorConfig g = testutil::tiny_config().generator();
  g.conditioning = mode;
  return g;
}

}  // namespace

TEST(Generator, ResolutionLadderAndSelfAttentionPlacement) {
  const auto full = RunConfig::full().generator();
  EXPECT_EQ(full.output_resolution(), 256u);
  std::vector<std::size_t> with_self;
  for (std::size_t b = 0; b < full.num_blocks; ++b)
    if (full.self_attention_at(b)) with_self.push_back(full.resolution(b));
  EXPECT_EQ(with_self, (std::vector<std::size_t>{16, 32, 64}));
}

TEST(Generator, OutputAndAttentionShapes) {
  Rng rng(1);
  Generator<double> g(tiny(), rng);
  Rng r2(2);
  const auto s = g.generate(testutil::randn({2, 3, 8, 8}, r2), testutil::randn({2, 3, 24}, r2));
  EXPECT_EQ(s.image.shape(), (Shape{2, 3, 32, 32}));
  ASSERT_EQ(s.attention.size(), 3u);
  for (std::size_t b = 0; b < 3; ++b) {
    const std::size_t r = 8u << b;
    EXPECT_EQ(s.attention[b].shape(), (Shape{2, g.transformer(b).cross().config().num_heads(), 3, r, r}));
  }
  for (double v : s.image.values()) EXPECT_LE(std::abs(v), 1.0);
  EXPECT_TRUE(g.transformer(0).uses_self_attention());
  EXPECT_TRUE(g.transformer(1).uses_self_attention());
  EXPECT_FALSE(g.transformer(2).uses_self_attention());
}

TEST(Generator, ZeroInitTransformersLeaveTheResidualPath) {
  Rng rng(3);
  Generator<double> g(tiny(), rng);
  g.zero_attention_outputs();
  Rng r2(4);
  const auto in = testutil::randn({1, 3, 8, 8}, r2);
  EXPECT_EQ(g.generate(in, testutil::randn({1, 3, 24}, r2)).image.values(), g.generate_residual_only(in).values());
}

TEST(Generator, WrongInputResolutionNamesExpected) {
  Rng rng(5);
  Generator<double> g(tiny(), rng);
  EXPECT_THROW(g.generate(testutil::randn({1, 3, 4, 4}, rng), testutil::randn({1, 3, 24}, rng)), DimensionError);
}

TEST(Generator, SpadeAblationUsesDenormInsteadOfAttention) {
  Rng rng(6);
  Generator<double> g(tiny(ConditioningMode::spade_ablation), rng);
  Rng r2(7);
  const auto s = g.generate_spade(testutil::randn({1, 3, 8, 8}, r2), testutil::one_hot(1, 3, 32, 32, r2),
                                  testutil::randn({1, 3, 24}, r2));
  EXPECT_EQ(s.image.shape(), (Shape{1, 3, 32, 32}));
  EXPECT_TRUE(s.attention.empty());
  EXPECT_THROW(g.generate(testutil::randn({1, 3, 8, 8}, r2), testutil::randn({1, 3, 24}, r2)), ConfigError);
}

TEST(ClassAdaptiveDenorm, StyleRowOnlyModulatesItsRegion) {
  Rng rng(8);
  ClassAdaptiveDenorm<double> dn(4, 6, rng);
  const auto x = testutil::randn({1, 4, 5, 5}, rng);
  const auto m = testutil::one_hot(1, 3, 5, 5, rng);
  auto styles = testutil::randn({1, 3, 6}, rng);
  const auto a = dn(x, styles, m);
  for (std::size_t s = 0; s < 6; ++s) styles.mutable_data()[1 * 6 + s] += 1.0;
  const auto b = dn(x, styles, m);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t p = 0; p < 25; ++p) {
      const double d = std::abs(a.values()[c * 25 + p] - b.values()[c * 25 + p]);
      if (m.values()[25 + p] == 0.0)
        EXPECT_EQ(d, 0.0);
      else
        EXPECT_GT(d, 0.0);
    }
}

TEST(ResidualBlock, ShortcutOnlyWhenWidthChanges) {
  Rng rng(9);
  ParamList<double> same, wider;
  ResidualBlock<double>(4, 4, rng).collect(same, "a");
  ResidualBlock<double>(4, 8, rng).collect(wider, "b");
  EXPECT_EQ(same.size() + 1, wider.size());  // bias-free 1x1 projection
}
