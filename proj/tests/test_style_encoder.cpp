#include <gtest/gtest.h>

#include "casis/config.hpp"
#include "casis/style_encoder.hpp"
#include "test_util.hpp"

using namespace casis;

namespace {

EncoderConfig small(bool grouped = true, bool mix = false) {
  EncoderConfig c;
  c.num_classes = 3;
  c.filters_per_group = 2;
  c.down_layers = 3;
  c.up_layers = 2;
  c.code_dim = 5;
  c.image_size = 16;
  c.grouped = grouped;
  c.mix_skip_groups = mix;
  return c;
}

/// Left third class 0, middle class 1, right class 2.
Tensor<double> bands(std::size_t C, std::size_t S) {
  std::vector<double> v(C * S * S, 0.0);
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < S; ++j) v[(std::min(C - 1, j * C / S) * S + i) * S + j] = 1.0;
  return Tensor<double>({1, C, S, S}, std::move(v));
}

/// Max change of style row `c` when pixels outside class `c` are perturbed.
double leak_into(const StyleEncoder<double>& enc, std::size_t c, Rng& rng) {
  const auto m = bands(3, 16);
  auto img = testutil::randn({1, 3, 16, 16}, rng);
  const auto a = enc.encode(img, m);
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t p = 0; p < 256; ++p)
      if (m.values()[c * 256 + p] == 0.0) img.mutable_data()[ch * 256 + p] += 0.7;
  const auto b = enc.encode(img, m);
  double d = 0;
  for (std::size_t s = 0; s < a.dim(2); ++s) d = std::max(d, std::abs(a.at({0, c, s}) - b.at({0, c, s})));
  return d;
}

}  // namespace

TEST(StyleEncoder, CodeShapeIsClassesByStyleWidth) {
  Rng rng(1);
  StyleEncoder<double> enc(small(), rng);
  Rng r2(2);
  const auto codes = enc.encode(testutil::randn({2, 3, 16, 16}, r2), testutil::one_hot(2, 3, 16, 16, r2));
  EXPECT_EQ(codes.shape(), (Shape{2, 3, 10}));
}

TEST(StyleEncoder, FullConfigurationGivesWidth1280) {
  EXPECT_EQ(RunConfig::full().encoder().style_width(), 1280u);
  EXPECT_EQ(RunConfig::desk().encoder().style_width(), 1280u);
}

TEST(StyleEncoder, GroupedCodesSeeOnlyTheirOwnRegion) {
  Rng rng(3);
  StyleEncoder<double> enc(small(), rng);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(leak_into(enc, c, rng), 0.0) << "class " << c;
}

TEST(StyleEncoder, UngroupedCodesMixRegions) {
  Rng rng(4);
  StyleEncoder<double> enc(small(false), rng);
  EXPECT_GT(leak_into(enc, 1, rng), 1e-6);
}

TEST(StyleEncoder, MixedSkipsLeakAcrossClasses) {
  Rng rng(5);
  StyleEncoder<double> enc(small(true, true), rng);
  EXPECT_GT(leak_into(enc, 1, rng), 1e-6);
}

TEST(StyleEncoder, RejectsWrongMaskChannels) {
  Rng rng(6);
  StyleEncoder<double> enc(small(), rng);
  EXPECT_THROW(enc.encode(testutil::randn({1, 3, 16, 16}, rng), testutil::one_hot(1, 4, 16, 16, rng)), ConfigError);
}

TEST(StyleEncoder, RejectsIndivisibleImageSize) {
  auto c = small();
  c.image_size = 12;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(StyleEncoder, SingleImageOverloadMatchesBatch) {
  Rng rng(7);
  StyleEncoder<double> enc(small(), rng);
  const auto img = testutil::randn({3, 16, 16}, rng);
  std::vector<std::uint16_t> lab(256);
  for (std::size_t p = 0; p < 256; ++p) lab[p] = static_cast<std::uint16_t>(p % 3);
  const SemanticMask m(3, 16, 16, lab);
  const SemanticMask ms[] = {m};
  const auto one = enc.encode(img, m);
  const auto batch = enc.encode(reshape(img, {1, 3, 16, 16}), mask_batch<double>(ms));
  EXPECT_EQ(one.values(), batch.values());
}
