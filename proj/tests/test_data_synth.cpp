#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "casis/data_synth.hpp"

using namespace casis;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  fs::path p = fs::temp_directory_path() / (std::string("casis_") + info->test_suite_name() + "_" + info->name());
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double hue_gap(double a, double b) {
  const double d = std::abs(a - b);
  return std::min(d, 1.0 - d);
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

SceneConfig small(double rho) {
  SceneConfig c;
  c.resolution = 8;
  c.style_correlation = rho;
  return c;
}

void write_mask(const fs::path& path, std::size_t w, std::size_t h, std::vector<std::uint8_t> px) {
  write_png(path.string(), Image8{w, h, 1, std::move(px)});
}

void write_rgb(const fs::path& path, std::size_t w, std::size_t h) {
  write_png(path.string(), Image8{w, h, 3, std::vector<std::uint8_t>(w * h * 3, 128)});
}

}  // namespace

TEST(SceneGenerator, SameSeedAndIndexGiveIdenticalScenes) {
  SceneConfig c;
  const Scene a = generate_scene(c, 11), b = generate_scene(c, 11), other = generate_scene(c, 12);
  EXPECT_EQ(a.image.values(), b.image.values());
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_NE(a.image.values(), other.image.values());
  c.seed = 8;
  EXPECT_NE(generate_scene(c, 11).image.values(), a.image.values());
}

TEST(SceneGenerator, MasksAreOneHotAndImagesInRange) {
  SceneConfig c;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const Scene s = generate_scene(c, i);
    const auto ch = s.mask.channels<double>();
    const std::size_t P = c.resolution * c.resolution;
    for (std::size_t p = 0; p < P; ++p) {
      double total = 0;
      for (std::size_t k = 0; k < c.num_classes; ++k) total += ch.values()[k * P + p];
      ASSERT_EQ(total, 1.0);
    }
    for (float v : s.image.values()) {
      ASSERT_GE(v, -1.0f);
      ASSERT_LE(v, 1.0f);
    }
    EXPECT_GT(s.mask.count(0), 0u);
  }
}

TEST(SceneGenerator, FullCorrelationLinksHuesEverywhere) {
  const SceneConfig c = small(1.0);
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const Scene s = generate_scene(c, i);
    ASSERT_LE(hue_gap(s.styles[1].hue, s.styles[2].hue), c.linked_hue_jitter + 1e-12) << "scene " << i;
  }
}

TEST(SceneGenerator, ZeroCorrelationLeavesHuesIndependent) {
  const SceneConfig c = small(0.0);
  std::vector<double> a, b;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const Scene s = generate_scene(c, i);
    a.push_back(s.styles[1].hue);
    b.push_back(s.styles[2].hue);
  }
  EXPECT_LT(std::abs(pearson(a, b)), 0.1);
}

TEST(SceneGenerator, RejectsBadConfig) {
  SceneConfig c;
  c.style_correlation = 1.5;
  EXPECT_THROW(generate_scene(c, 0), ConfigError);
  c = {};
  c.shapes = {ShapeKind::disk};
  EXPECT_THROW(generate_scene(c, 0), ConfigError);
}

TEST(LoadPair, AllZeroMaskIsClassZeroEverywhere) {
  const auto dir = scratch_dir();
  write_rgb(dir / "i.png", 5, 4);
  write_mask(dir / "m.png", 5, 4, std::vector<std::uint8_t>(20, 0));
  const auto [img, mask] = load_pair((dir / "i.png").string(), (dir / "m.png").string(), 3);
  EXPECT_EQ(img.shape(), (Shape{3, 4, 5}));
  EXPECT_EQ(mask.count(0), 20u);
  const auto ch = mask.channels<double>();
  for (std::size_t p = 0; p < 20; ++p) {
    EXPECT_EQ(ch.values()[p], 1.0);
    EXPECT_EQ(ch.values()[20 + p], 0.0);
    EXPECT_EQ(ch.values()[40 + p], 0.0);
  }
}

TEST(LoadPair, CheckerboardCountsMatch) {
  const auto dir = scratch_dir();
  const std::size_t W = 7, H = 6;
  std::vector<std::uint8_t> px(W * H);
  std::size_t expected[3] = {0, 0, 0};
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const auto cls = static_cast<std::uint8_t>((x + y) % 2 + ((x == 0 && y == 0) ? 2 : 0));
      px[y * W + x] = cls;
      ++expected[cls];
    }
  write_rgb(dir / "i.png", W, H);
  write_mask(dir / "m.png", W, H, px);
  const auto [img, mask] = load_pair((dir / "i.png").string(), (dir / "m.png").string(), 3);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(mask.count(c), expected[c]);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) EXPECT_EQ(mask.label(y, x), px[y * W + x]);
}

TEST(LoadPair, UnknownIndexNamesThePixel) {
  const auto dir = scratch_dir();
  std::vector<std::uint8_t> px(12, 0);
  px[1 * 4 + 2] = 9;
  write_rgb(dir / "i.png", 4, 3);
  write_mask(dir / "m.png", 4, 3, px);
  try {
    load_pair((dir / "i.png").string(), (dir / "m.png").string(), 3);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("(1,2)"), std::string::npos) << e.what();
  }
}

TEST(LoadPair, SizeMismatchIsRejected) {
  const auto dir = scratch_dir();
  write_rgb(dir / "i.png", 4, 4);
  write_mask(dir / "m.png", 4, 3, std::vector<std::uint8_t>(12, 0));
  EXPECT_THROW(load_pair((dir / "i.png").string(), (dir / "m.png").string(), 3), DataError);
}

TEST(SemanticMask, ChannelRoundTrip) {
  const Scene s = generate_scene(SceneConfig{}, 3);
  EXPECT_EQ(SemanticMask::from_channels(s.mask.channels<double>()), s.mask);
  auto ch = s.mask.channels<double>();
  ch.mutable_data()[0] = 0.5;
  EXPECT_THROW(SemanticMask::from_channels(ch), DataError);
}

TEST(SemanticMask, OutOfRangeLabelNamesThePixel) {
  std::vector<std::uint16_t> l(6, 0);
  l[4] = 3;
  try {
    SemanticMask(3, 2, 3, l);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("(1,1)"), std::string::npos) << e.what();
  }
}

TEST(SceneSource, SavedDirectoryReloadsIdentically) {
  const auto dir = scratch_dir();
  SceneConfig c;
  c.resolution = 16;
  const SceneSource procedural(c, 5, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto [img, mask] = procedural.get(i);
    save_pair(dir, 5 + i, img, mask);
  }
  const auto loaded = SceneSource::from_directory(dir, c.num_classes, 5, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto [a, ma] = procedural.get(i);
    const auto [b, mb] = loaded.get(i);
    EXPECT_EQ(ma, mb);
    for (std::size_t k = 0; k < a.numel(); ++k) ASSERT_NEAR(a.values()[k], b.values()[k], 1.0 / 255 + 1e-6);
  }
  EXPECT_THROW(SceneSource::from_directory(dir, c.num_classes, 5, 4), DataError);
  EXPECT_THROW(loaded.get(3), ArgumentError);
}
