#include <gtest/gtest.h>

#include "casis/adversarial.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace casis;
using testutil::randn;
using testutil::vec;

namespace {

DiscriminatorOutputs<double> random_outputs(Rng& rng, std::size_t scales) {
  DiscriminatorOutputs<double> o;
  for (std::size_t s = 0; s < scales; ++s) {
    ScaleOutput<double> so;
    so.features = {randn({2, 3, 4, 4}, rng), randn({2, 5, 2, 2}, rng)};
    so.score = randn({2, 1, 3, 3}, rng, 1.5);
    o.push_back(so);
  }
  return o;
}

}  // namespace

TEST(Hinge, MatchesScalarFormulas) {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const auto real = random_outputs(rng, 2), fake = random_outputs(rng, 2);
    double d = 0, g = 0;
    for (std::size_t s = 0; s < 2; ++s) {
      d += oracle::mean_relu_one_minus(vec(real[s].score)) + oracle::mean_relu_one_plus(vec(fake[s].score));
      g -= oracle::mean(vec(fake[s].score));
    }
    const auto [ld, lg] = hinge_losses(real, fake);
    EXPECT_NEAR(ld.item(), d / 2, 1e-12);
    EXPECT_NEAR(lg.item(), g / 2, 1e-12);
    EXPECT_NEAR(hinge_generator_loss(fake).item(), g / 2, 1e-12);
  }
}

TEST(FeatureMatching, MatchesScalarFormula) {
  Rng rng(2);
  const auto real = random_outputs(rng, 2), fake = random_outputs(rng, 2);
  double ref = 0;
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t l = 0; l < 2; ++l) ref += oracle::mean_abs_diff(vec(fake[s].features[l]), vec(real[s].features[l]));
  EXPECT_NEAR(feature_matching_loss(real, fake).item(), ref / 4, 1e-12);
}

TEST(FeatureMatching, RealFeaturesReceiveNoGradient) {
  Rng rng(3);
  auto real = random_outputs(rng, 1), fake = random_outputs(rng, 1);
  real[0].features[0].set_requires_grad(true);
  fake[0].features[0].set_requires_grad(true);
  feature_matching_loss(real, fake).backward();
  EXPECT_FALSE(real[0].features[0].has_grad());
  EXPECT_TRUE(fake[0].features[0].has_grad());
}

TEST(AttentionLoss, MatchesScalarFormula) {
  Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    const auto m1 = uniform_tensor<double>({2, 2, 3, 4, 4}, 0.01, 0.99, rng);
    const auto m2 = uniform_tensor<double>({2, 1, 3, 8, 8}, 0.01, 0.99, rng);
    const auto masks = testutil::one_hot(2, 3, 16, 16, rng);
    const double ref = 0.5 * (oracle::attention_bce(vec(m1), vec(masks), 2, 2, 3, 4, 4, 16, 16) +
                              oracle::attention_bce(vec(m2), vec(masks), 2, 1, 3, 8, 8, 16, 16));
    EXPECT_NEAR(attention_loss<double>({m1, m2}, masks).item(), ref, 1e-10);
  }
}

TEST(AttentionLoss, PerfectMapsScoreNearZero) {
  Rng rng(5);
  const auto masks = testutil::one_hot(1, 3, 4, 4, rng);
  const auto maps = reshape(masks, {1, 1, 3, 4, 4});
  EXPECT_LT(attention_loss<double>({maps}, masks).item(), 1e-6);
}

TEST(Perceptual, IdenticalImagesGiveZero) {
  Rng rng(6);
  FrozenFeatures<double> f(1);
  const auto a = randn({1, 3, 8, 8}, rng);
  EXPECT_EQ(perceptual_loss(f, a, a).item(), 0.0);
  EXPECT_GT(perceptual_loss(f, a, randn({1, 3, 8, 8}, rng)).item(), 0.0);
}

TEST(Perceptual, FeaturesAreFrozenAndSeeded) {
  FrozenFeatures<double> a(7), b(7), c(8);
  ParamList<double> pa, pb, pc;
  a.collect(pa, "p");
  b.collect(pb, "p");
  c.collect(pc, "p");
  for (const auto& p : pa) EXPECT_FALSE(p.tensor.requires_grad());
  EXPECT_EQ(pa[0].tensor.values(), pb[0].tensor.values());
  EXPECT_NE(pa[0].tensor.values(), pc[0].tensor.values());
}

TEST(Discriminator, MultiScaleOutputs) {
  Rng rng(9);
  MultiScaleDiscriminator<double> d(DiscriminatorConfig{3, 4, 2}, rng);
  const auto out = d(randn({2, 3, 32, 32}, rng), testutil::one_hot(2, 3, 32, 32, rng));
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].score.dim(0), 2u);
  EXPECT_EQ(out[0].score.dim(1), 1u);
  EXPECT_GT(out[0].score.dim(2), out[1].score.dim(2));
  EXPECT_FALSE(out[0].features.empty());
}
