#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "casis/trainer.hpp"
#include "test_util.hpp"

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

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
}

// Per-class IoU written out directly from the definition.
std::vector<double> iou_oracle(const std::vector<double>& maps, std::size_t h, std::size_t C, std::size_t H,
                               std::size_t W, const std::vector<std::uint16_t>& labels, double thr) {
  std::vector<double> out(C);
  for (std::size_t c = 0; c < C; ++c) {
    double inter = 0, uni = 0;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double s = 0;
        for (std::size_t k = 0; k < h; ++k) s += maps[((k * C + c) * H + y) * W + x];
        const bool p = s / double(h) > thr, g = labels[y * W + x] == c;
        inter += (p && g) ? 1 : 0;
        uni += (p || g) ? 1 : 0;
      }
    out[c] = uni > 0 ? inter / uni : std::nan("");
  }
  return out;
}

Batch first_batch(const RunConfig& cfg) {
  const std::size_t idx[] = {0};
  return load_batch(train_source(cfg), idx);
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(CASIS_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(RunConfig, TextRoundTrip) {
  RunConfig c = testutil::tiny_config();
  c.lambda_att = 0.25;
  c.no_group_conv = true;
  c.data_dir = "/some/where";
  const RunConfig back = RunConfig::from_text(c.to_text());
  EXPECT_EQ(back.to_text(), c.to_text());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(back.lambda_att, 0.25);
  EXPECT_TRUE(back.no_group_conv);
}

TEST(RunConfig, UnknownKeyAndBadValueAreRejected) {
  EXPECT_THROW(RunConfig::from_text("no_such_key = 3\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("epochs = -2\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("lr = fast\n"), ConfigError);
  EXPECT_EQ(RunConfig::from_text("# comment only\n\n epochs = 3 # trailing\n").epochs, 3u);
}

TEST(RunConfig, HashIsStableAndSensitive) {
  RunConfig a, b;
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.hash().size(), 8u);
  b.seed = 2;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(RunConfig, PresetsValidate) {
  EXPECT_NO_THROW(RunConfig::full().validate());
  EXPECT_NO_THROW(RunConfig::desk().validate());
  EXPECT_EQ(RunConfig::full().num_classes, 19u);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const auto dir = scratch_dir();
  Rng rng(1);
  ParamList<double> params;
  Conv2d<double>(3, 4, 3, Conv2dParams{}, rng).collect(params, "conv");
  Linear<double>(5, 2, rng).collect(params, "lin");
  save_checkpoint((dir / "a.cacp").string(), "x = 1\n", params);
  const CheckpointData ck = load_checkpoint((dir / "a.cacp").string());
  EXPECT_EQ(ck.config_text, "x = 1\n");
  ASSERT_EQ(ck.order.size(), params.size());
  for (const auto& p : params) EXPECT_EQ(ck.tensors.at(p.name).as<double>().values(), p.tensor.values());
  EXPECT_THROW(ck.tensors.at(params[0].name).as<float>(), CheckpointError);
}

TEST(Checkpoint, CorruptionAndTruncationAreDetected) {
  const auto dir = scratch_dir();
  Rng rng(2);
  ParamList<float> params;
  Linear<float>(4, 4, rng).collect(params, "lin");
  save_checkpoint((dir / "a.cacp").string(), "", params);
  auto bytes = read_bytes(dir / "a.cacp");
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  write_bytes(dir / "flip.cacp", flipped);
  EXPECT_THROW(load_checkpoint((dir / "flip.cacp").string()), CheckpointError);
  write_bytes(dir / "short.cacp", std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 9));
  EXPECT_THROW(load_checkpoint((dir / "short.cacp").string()), CheckpointError);
  EXPECT_THROW(load_checkpoint((dir / "missing.cacp").string()), CheckpointError);
}

TEST(Checkpoint, RestoreRejectsShapeMismatch) {
  const auto dir = scratch_dir();
  Rng rng(3);
  ParamList<float> small, big;
  Linear<float>(4, 4, rng).collect(small, "lin");
  Linear<float>(4, 5, rng).collect(big, "lin");
  save_checkpoint((dir / "a.cacp").string(), "", small);
  EXPECT_THROW(restore_parameters(load_checkpoint((dir / "a.cacp").string()), big), CheckpointError);
}

TEST(Model, SaveLoadReproducesOutputs) {
  const auto dir = scratch_dir();
  RunConfig cfg = testutil::tiny_config();
  cfg.seed = 5;
  Model<float> m(cfg);
  m.save((dir / "m.cacp").string());
  const Model<float> back = Model<float>::load((dir / "m.cacp").string());
  EXPECT_EQ(back.config().hash(), cfg.hash());
  EXPECT_EQ(parameter_hash(back.all_parameters()), parameter_hash(m.all_parameters()));
  const Batch b = first_batch(cfg);
  NoGradGuard ng;
  EXPECT_EQ(back.reconstruct(b.images, b.masks).image.values(), m.reconstruct(b.images, b.masks).image.values());
}

TEST(AttentionIou, InjectedMapsScoreOne) {
  Rng rng(4);
  const std::size_t C = 3, R = 8;
  std::vector<std::uint16_t> labels(R * R);
  for (auto& l : labels) l = static_cast<std::uint16_t>(rng.index(2));  // class 2 absent
  const SemanticMask mask(C, R, R, labels);
  const auto ch = mask.channels<double>();
  std::vector<double> maps;
  for (int k = 0; k < 2; ++k) maps.insert(maps.end(), ch.values().begin(), ch.values().end());
  const auto iou = attention_iou(Tensor<double>({2, C, R, R}, maps), mask, 2.0 / C);
  EXPECT_EQ(iou[0], 1.0);
  EXPECT_EQ(iou[1], 1.0);
  EXPECT_TRUE(std::isnan(iou[2]));
}

TEST(AttentionIou, UniformMapsBelowThresholdScoreZero) {
  const SemanticMask mask = SemanticMask::uniform(3, 4, 4, 1);
  const auto iou = attention_iou(Tensor<double>::full({1, 3, 4, 4}, 1.0 / 3), mask, 0.5);
  EXPECT_TRUE(std::isnan(iou[0]));
  EXPECT_EQ(iou[1], 0.0);
  EXPECT_TRUE(std::isnan(iou[2]));
}

TEST(AttentionIou, RandomMapsMatchOracle) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t h = testutil::between(rng, 1, 3), C = testutil::between(rng, 2, 5), R = testutil::between(rng, 2, 9);
    std::vector<std::uint16_t> labels(R * R);
    for (auto& l : labels) l = static_cast<std::uint16_t>(rng.index(C));
    const SemanticMask mask(C, R, R, labels);
    const auto maps = uniform_tensor<double>({h, C, R, R}, 0, 1, rng);
    const double thr = rng.uniform(0.2, 0.8);
    const auto got = attention_iou(maps, mask, thr);
    const auto want = iou_oracle(maps.values(), h, C, R, R, labels, thr);
    for (std::size_t c = 0; c < C; ++c) {
      if (std::isnan(want[c]))
        EXPECT_TRUE(std::isnan(got[c]));
      else
        EXPECT_NEAR(got[c], want[c], 1e-12);
    }
  }
}

TEST(FrechetDistance, IdenticalSetsGiveZeroAndShiftGivesSquaredNorm) {
  Rng rng(6);
  Eigen::MatrixXd a(40, 5);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
  EXPECT_EQ(frechet_distance(a, a), 0.0);
  Eigen::RowVectorXd shift(5);
  shift << 1, -2, 0.5, 0, 3;
  const Eigen::MatrixXd b = a.rowwise() + shift;
  EXPECT_NEAR(frechet_distance(a, b), shift.squaredNorm(), 1e-6);
  EXPECT_THROW(frechet_distance(a, Eigen::MatrixXd(40, 4)), DimensionError);
}

TEST(Evaluate, IsDeterministic) {
  const RunConfig cfg = testutil::tiny_config();
  const Model<float> m(cfg);
  const auto a = evaluate(m, test_source(cfg), 3), b = evaluate(m, test_source(cfg), 3);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_EQ(a.samples, cfg.test_scenes);
  EXPECT_EQ(a.config_hash, cfg.hash());
}

TEST(Trainer, NoAttentionLossDropsTheTerm) {
  RunConfig cfg = testutil::tiny_config();
  cfg.no_attention_loss = true;
  Model<float> m(cfg);
  Trainer tr(m, train_source(cfg));
  const auto r = tr.step(first_batch(cfg));
  EXPECT_EQ(r.losses.attention, 0.0);
  EXPECT_EQ(r.losses.weights.at("attention"), 0.0);
  const auto rec = tr.run_epoch(1);
  EXPECT_FALSE(to_json(rec, cfg.hash()).contains("attention"));
  EXPECT_NEAR(rec.losses.weighted_total,
              rec.losses.adv_g + cfg.lambda_fm * rec.losses.feat_match + cfg.lambda_p * rec.losses.perceptual, 1e-4);
}

TEST(Trainer, WeightedTotalIncludesAttention) {
  const RunConfig cfg = testutil::tiny_config();
  Model<float> m(cfg);
  Trainer tr(m, train_source(cfg));
  const auto r = tr.step(first_batch(cfg)).losses;
  EXPECT_GT(r.attention, 0.0);
  EXPECT_NEAR(r.weighted_total,
              r.adv_g + cfg.lambda_fm * r.feat_match + cfg.lambda_p * r.perceptual + cfg.lambda_att * r.attention,
              1e-4 * std::max(1.0, std::abs(r.weighted_total)));
}

TEST(Trainer, TenStepTrajectoryIsReproducible) {
  RunConfig cfg = testutil::tiny_config();
  cfg.steps_per_epoch = 5;
  std::vector<double> totals[2];
  std::uint32_t hashes[2];
  for (int run = 0; run < 2; ++run) {
    Model<float> m(cfg);
    Trainer tr(m, train_source(cfg));
    for (std::size_t e = 1; e <= 2; ++e) totals[run].push_back(tr.run_epoch(e).losses.weighted_total);
    EXPECT_EQ(tr.global_step(), 10u);
    hashes[run] = parameter_hash(m.all_parameters());
  }
  for (std::size_t i = 0; i < totals[0].size(); ++i) EXPECT_NEAR(totals[0][i], totals[1][i], 1e-5);
  EXPECT_EQ(hashes[0], hashes[1]);
}

TEST(Trainer, NonFiniteInputStopsBeforeAnyUpdate) {
  const RunConfig cfg = testutil::tiny_config();
  Model<float> m(cfg);
  Trainer tr(m, train_source(cfg));
  Batch b = first_batch(cfg);
  b.images.mutable_data()[0] = std::nanf("");
  const auto gen_before = parameter_hash(m.all_parameters());
  const auto disc_before = parameter_hash(tr.discriminator().parameters());
  EXPECT_THROW(tr.step(b), NonFiniteError);
  EXPECT_EQ(parameter_hash(m.all_parameters()), gen_before);
  EXPECT_EQ(parameter_hash(tr.discriminator().parameters()), disc_before);
  EXPECT_EQ(tr.global_step(), 0u);
}

TEST(Trainer, CheckFiniteNamesTheTerm) {
  LossBundle b;
  b.perceptual = std::numeric_limits<double>::infinity();
  try {
    detail::check_finite(b, "step 3");
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("perceptual"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("step 3"), std::string::npos);
  }
}

TEST(Trainer, CheckGradsNamesTheParameter) {
  Rng rng(7);
  ParamList<double> params;
  Linear<double>(3, 2, rng).collect(params, "head");
  set_requires_grad(params, true);
  Tensor<double> w = params[0].tensor;
  Tensor<double> poison = Tensor<double>::full(w.shape(), std::nan(""));
  sum(mul(w, poison)).backward();
  try {
    detail::check_grads(params, "step 0");
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find(params[0].name), std::string::npos) << e.what();
  }
}

TEST(Trainer, EpochOrderIsSeededPermutation) {
  const auto a = detail::epoch_order(20, 1, 3), b = detail::epoch_order(20, 1, 3), c = detail::epoch_order(20, 1, 4);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  auto s = a;
  std::sort(s.begin(), s.end());
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(s[i], i);
}

TEST(Trainer, DatasetClassCountMustMatch) {
  RunConfig cfg = testutil::tiny_config();
  Model<float> m(cfg);
  cfg.num_classes = 4;
  EXPECT_THROW(Trainer(m, train_source(cfg)), ConfigError);
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch_dir();
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("no-such-command"), 2);
  EXPECT_EQ(run_cli("eval --checkpoint " + (dir / "absent.cacp").string()), 2);
  write_bytes(dir / "junk.cacp", std::vector<std::uint8_t>(64, 7));
  EXPECT_EQ(run_cli("eval --checkpoint " + (dir / "junk.cacp").string()), 1);
  EXPECT_EQ(run_cli("synth-data --out " + (dir / "d").string() + " --count 2 --size 16"), 0);
  EXPECT_TRUE(fs::exists(dir / "d" / "images" / "0000.png"));
  EXPECT_EQ(run_cli("train --no-such-flag 1"), 2);
  EXPECT_EQ(run_cli("train --preset desk --style-correlation 2 --run-dir " + (dir / "r").string()), 1);
}

TEST(Train, EveryMetricsRecordCarriesTheConfigHash) {
  const auto dir = scratch_dir();
  RunConfig cfg = testutil::tiny_config();
  cfg.epochs = 2;
  cfg.steps_per_epoch = 1;
  Model<float> m(cfg);
  train(m, train_source(cfg), (dir / "run").string());
  std::ifstream in(dir / "run" / "metrics.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(nlohmann::json::parse(line).at("config_hash"), cfg.hash());
    ++n;
  }
  EXPECT_EQ(n, 2u);
  EXPECT_TRUE(fs::exists(dir / "run" / "final.cacp"));
}

TEST(Evaluate, RefusesMismatchedClassCount) {
  const RunConfig cfg = testutil::tiny_config();
  const Model<float> m(cfg);
  RunConfig other = cfg;
  other.num_classes = 4;
  EXPECT_THROW(evaluate(m, test_source(other)), ConfigError);
}

TEST(TrainMapping, LeavesTheGeneratorBitwiseUnchanged) {
  const auto dir = scratch_dir();
  RunConfig cfg = testutil::tiny_config();
  cfg.diversity_steps_per_epoch = 3;
  Model<float> m(cfg);
  const auto before = parameter_hash(m.trainable_parameters());
  const auto recs = train_mapping(m, train_source(cfg), (dir / "div").string());
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(parameter_hash(m.trainable_parameters()), before);
  ASSERT_TRUE(m.has_mapping());
  for (const auto& p : m.trainable_parameters()) EXPECT_TRUE(p.tensor.requires_grad()) << p.name;

  std::ifstream in(dir / "div" / "metrics.jsonl");
  std::string line;
  ASSERT_TRUE(std::getline(in, line));
  const auto j = nlohmann::json::parse(line);
  EXPECT_TRUE(j.contains("adversarial"));
  EXPECT_TRUE(j.contains("diversity"));
  EXPECT_FALSE(j.contains("perceptual"));
  EXPECT_FALSE(j.contains("feat_match"));

  const Model<float> back = Model<float>::load((dir / "div" / "final.cacp").string());
  EXPECT_TRUE(back.has_mapping());
  EXPECT_EQ(parameter_hash(back.all_parameters()), parameter_hash(m.all_parameters()));
}

TEST(TrainMapping, ClassMeansSkipScenesWithoutTheClass) {
  RunConfig cfg = testutil::tiny_config();
  const Model<float> m(cfg);
  const SceneSource src = train_source(cfg);
  const std::size_t n = 4, C = cfg.num_classes;
  const auto means = class_mean_styles(m, src, n);
  const std::size_t S = means.dim(1);
  NoGradGuard ng;
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> acc(S, 0.0);
    double seen = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto [img, mask] = src.get(i);
      if (!mask.count(c)) continue;
      const auto st = m.styles(reshape(img, {1, img.dim(0), img.dim(1), img.dim(2)}), mask_batch<float>(std::vector<SemanticMask>{mask}));
      for (std::size_t d = 0; d < S; ++d) acc[d] += st.at({0, c, d});
      seen += 1;
    }
    for (std::size_t d = 0; d < S; ++d)
      EXPECT_NEAR(means.at({c, d}), seen ? acc[d] / seen : 0.0, 1e-6) << "class " << c;
  }
}

TEST(TrainMapping, NewMappingStartsAtTheClassMeans) {
  RunConfig cfg = testutil::tiny_config();
  cfg.diversity_steps_per_epoch = 1;
  cfg.diversity_lr = 0.0;
  Model<float> m(cfg);
  const auto src = train_source(cfg);
  const auto means = class_mean_styles(m, src, 200);
  train_mapping(m, src);
  const std::size_t last = cfg.mapping_branch_layers - 1;
  std::size_t found = 0;
  for (std::size_t c = 0; c < cfg.num_classes; ++c)
    for (const auto& p : m.mapping().branch_parameters(c))
      if (p.name == "mapping.branch" + std::to_string(c) + ".fc" + std::to_string(last) + ".bias") {
        ++found;
        for (std::size_t d = 0; d < means.dim(1); ++d) EXPECT_EQ(p.tensor.values()[d], means.at({c, d}));
      }
  EXPECT_EQ(found, cfg.num_classes);
}
