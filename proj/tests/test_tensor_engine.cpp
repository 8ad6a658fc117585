#include <gtest/gtest.h>

#include "casis/grad_suite.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace casis;
using testutil::randn;
using testutil::vec;

TEST(Autograd, ChainAndBroadcastReduction) {
  Tensor<double> a({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor<double> b({3}, {0.5, -1, 2}, true);
  sum(mul(a, b)).backward();
  EXPECT_EQ(vec(Tensor<double>({2, 3}, {a.grad().begin(), a.grad().end()})),
            (std::vector<double>{0.5, -1, 2, 0.5, -1, 2}));
  EXPECT_EQ(std::vector<double>(b.grad().begin(), b.grad().end()), (std::vector<double>{5, 7, 9}));
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  Tensor<double> x({1}, {3.0}, true);
  const auto y = mul(x, x);
  add(y, y).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  Tensor<double> x({2}, {1, 2}, true);
  NoGradGuard ng;
  const auto y = square(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, DetachCutsTheGraph) {
  Tensor<double> x({2}, {1, 2}, true);
  Tensor<double> y = mul(x.detach(), x);
  sum(y).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 2.0);
}

TEST(Autograd, BackwardRequiresAScalar) {
  Tensor<double> x({2}, {1, 2}, true);
  EXPECT_THROW(square(x).backward(), UsageError);
}

TEST(Ops, BroadcastMismatchNamesShapes) {
  const auto a = Tensor<double>::zeros({2, 3});
  const auto b = Tensor<double>::zeros({4});
  try {
    add(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos) << e.what();
  }
}

TEST(Ops, SoftmaxRowsSumToOne) {
  Rng rng(3);
  const auto x = randn({3, 5, 4}, rng, 4.0);
  for (int axis : {0, 1, 2}) {
    const auto s = sum(softmax(x, axis), axis, false);
    for (double v : s.values()) EXPECT_NEAR(v, 1.0, 1e-12);
  }
}

TEST(Ops, BmmMatchesLoops) {
  Rng rng(4);
  const auto a = randn({2, 3, 4}, rng), b = randn({2, 4, 5}, rng);
  const auto c = bmm(a, b);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a.at({n, i, k}) * b.at({n, k, j});
        EXPECT_NEAR(c.at({n, i, j}), s, 1e-12);
      }
}

TEST(Conv2d, MatchesLoopOracleOnRandomGeometries) {
  Rng rng(11);
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t groups = testutil::between(rng, 1, 3);
    const std::size_t cin = groups * testutil::between(rng, 1, 3), cout = groups * testutil::between(rng, 1, 3);
    const std::size_t k = testutil::between(rng, 1, 4), stride = testutil::between(rng, 1, 2);
    const std::size_t pad = testutil::between(rng, 0, 2);
    const std::size_t H = testutil::between(rng, k, 7), W = testutil::between(rng, k, 7), N = testutil::between(rng, 1, 2);
    const auto x = randn({N, cin, H, W}, rng), w = randn({cout, cin / groups, k, k}, rng);
    const bool with_bias = rng.index(2);
    const auto b = with_bias ? randn({cout}, rng) : Tensor<double>();
    const auto y = conv2d(x, w, b, {stride, pad, groups});
    std::size_t Ho, Wo;
    const auto bv = with_bias ? vec(b) : std::vector<double>{};
    const auto ref =
        oracle::conv2d(vec(x), vec(w), with_bias ? &bv : nullptr, N, cin, H, W, cout, k, stride, pad, groups, Ho, Wo);
    ASSERT_EQ(y.shape(), (Shape{N, cout, Ho, Wo}));
    EXPECT_LT(oracle::max_abs_diff(vec(y), ref), 1e-10) << "trial " << trial;
  }
}

TEST(Conv2d, GroupsAreIsolated) {
  Rng rng(12);
  auto x = randn({1, 6, 5, 5}, rng);
  const auto w = randn({6, 2, 3, 3}, rng);
  const auto y0 = conv2d(x, w, Tensor<double>(), {1, 1, 3});
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t p = 0; p < 25; ++p) x.mutable_data()[c * 25 + p] += 10.0;
  const auto y1 = conv2d(x, w, Tensor<double>(), {1, 1, 3});
  for (std::size_t i = 2 * 25; i < 6 * 25; ++i) EXPECT_EQ(y0.values()[i], y1.values()[i]);
  EXPECT_NE(y0.values()[0], y1.values()[0]);
}

TEST(Conv2d, BadGroupingNamesTheAxis) {
  const auto x = Tensor<double>::zeros({1, 5, 4, 4});
  const auto w = Tensor<double>::zeros({4, 2, 3, 3});
  try {
    conv2d(x, w, Tensor<double>(), {1, 1, 2});
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("axis (1)"), std::string::npos) << e.what();
  }
}

TEST(GroupNorm, MatchesLoopOracle) {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t G = testutil::between(rng, 1, 4), C = G * testutil::between(rng, 1, 3);
    const std::size_t N = testutil::between(rng, 1, 3), H = testutil::between(rng, 1, 5), W = testutil::between(rng, 1, 5);
    const auto x = randn({N, C, H, W}, rng, 3.0), g = randn({C}, rng), b = randn({C}, rng);
    const auto gv = vec(g), bv = vec(b);
    const auto ref = oracle::group_norm(vec(x), N, C, H * W, G, &gv, &bv);
    EXPECT_LT(oracle::max_abs_diff(vec(group_norm(x, G, g, b)), ref), 1e-10);
  }
}

TEST(GroupNorm, IndivisibleChannelsRejected) {
  EXPECT_THROW(group_norm(Tensor<double>::zeros({1, 6, 2, 2}), 4, Tensor<double>(), Tensor<double>()), ConfigError);
}

TEST(MaskedAveragePool, MatchesLoopOracle) {
  Rng rng(14);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t N = testutil::between(rng, 1, 2), G = testutil::between(rng, 1, 4), F = testutil::between(rng, 1, 3);
    const std::size_t H = testutil::between(rng, 2, 6), W = testutil::between(rng, 2, 6);
    const auto f = randn({N, G * F, H, W}, rng);
    const auto m = testutil::one_hot(N, G, H, W, rng);
    const auto ref = oracle::masked_average_pool(vec(f), vec(m), N, G, F, H * W);
    EXPECT_LT(oracle::max_abs_diff(vec(masked_average_pool(f, m)), ref), 1e-12);
  }
}

TEST(MaskedAveragePool, EmptyRegionPoolsToZero) {
  Rng rng(15);
  const auto f = randn({1, 4, 3, 3}, rng);
  std::vector<double> m(2 * 9, 0.0);
  std::fill(m.begin(), m.begin() + 9, 1.0);
  const auto y = masked_average_pool(f, Tensor<double>({1, 2, 3, 3}, m));
  EXPECT_EQ(y.at({0, 1, 0}), 0.0);
  EXPECT_EQ(y.at({0, 1, 1}), 0.0);
}

TEST(Resampling, UpsampleThenPoolIsIdentity) {
  Rng rng(16);
  const auto x = randn({2, 3, 4, 5}, rng);
  EXPECT_LT(oracle::max_abs_diff(vec(avg_pool2x(upsample_nearest2x(x))), vec(x)), 1e-15);
}

TEST(BceMean, KnownValue) {
  const Tensor<double> p({2}, {0.5, 0.9});
  const Tensor<double> y({2}, {1.0, 0.0});
  EXPECT_NEAR(bce_mean(p, y).item(), 0.5 * (std::log(2.0) - std::log(0.1)), 1e-12);
}

class GradientSuite : public ::testing::TestWithParam<std::size_t> {};

TEST_P(GradientSuite, FiniteDifferencesAgree) {
  const auto cases = gradient_cases();
  const auto& c = cases.at(GetParam());
  Rng rng(2024 * 1000003ULL + GetParam());
  const GradCheckReport r = c.run(rng, 1e-4, 1e-4);
  EXPECT_TRUE(r.passed) << r.op_name << " error " << r.max_relative_error;
}

INSTANTIATE_TEST_SUITE_P(AllOpsAndBlocks, GradientSuite, ::testing::Range<std::size_t>(0, gradient_cases().size()),
                         [](const auto& info) { return gradient_cases()[info.param].name; });

TEST(GradCheck, DetectsAWrongGradient) {
  // relu at its kink: the analytic slope is 0 or 1, the symmetric difference 0.5.
  Tensor<double> x({1}, {0.0}, true);
  const auto r = grad_check("relu_at_kink", [&] { return sum(relu(x)); }, {{"x", x}});
  EXPECT_FALSE(r.passed);
}
