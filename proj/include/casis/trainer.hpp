#pragma once

// Training loops (reconstruction phase, diversity phase) and evaluation.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "casis/data_synth.hpp"
#include "casis/editing.hpp"
#include "casis/metrics.hpp"
#include "casis/model.hpp"

namespace casis {

inline SceneConfig scene_config(const RunConfig& cfg) {
  SceneConfig s;
  s.num_classes = cfg.num_classes;
  s.resolution = cfg.image_size;
  s.style_correlation = cfg.style_correlation;
  s.seed = cfg.data_seed;
  return s;
}

/// Training split: scenes 0..train_scenes-1. Test split: the next test_scenes.
inline SceneSource train_source(const RunConfig& cfg) {
  if (!cfg.data_dir.empty()) return SceneSource::from_directory(cfg.data_dir, cfg.num_classes, 0, cfg.train_scenes);
  return SceneSource(scene_config(cfg), 0, cfg.train_scenes);
}

inline SceneSource test_source(const RunConfig& cfg) {
  if (!cfg.data_dir.empty())
    return SceneSource::from_directory(cfg.data_dir, cfg.num_classes, cfg.train_scenes, cfg.test_scenes);
  return SceneSource(scene_config(cfg), cfg.train_scenes, cfg.test_scenes);
}

struct Batch {
  Tensor<float> images;  // [N,3,H,W]
  Tensor<float> masks;   // [N,C,H,W]
  std::vector<SemanticMask> mask_list;
};

inline Batch load_batch(const SceneSource& src, std::span<const std::size_t> indices) {
  Batch b;
  std::vector<Tensor<float>> imgs;
  for (auto i : indices) {
    auto [img, mask] = src.get(i);
    imgs.push_back(reshape(img, {1, img.dim(0), img.dim(1), img.dim(2)}));
    b.mask_list.push_back(std::move(mask));
  }
  b.images = imgs.size() == 1 ? imgs[0] : concat(imgs, 0);
  b.masks = mask_batch<float>(b.mask_list);
  return b;
}

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  LossBundle losses;  // averaged over the epoch's steps
  bool attention_in_total = true;
  double recon_l1 = 0;
  double attention_iou = 0;
  double seconds = 0;
};

inline nlohmann::json to_json(const EpochRecord& r, const std::string& config_hash) {
  nlohmann::json j;
  j["phase"] = "reconstruction";
  j["epoch"] = r.epoch;
  j["steps"] = r.steps;
  j["config_hash"] = config_hash;
  j["adv_g"] = r.losses.adv_g;
  j["adv_d"] = r.losses.adv_d;
  j["feat_match"] = r.losses.feat_match;
  j["perceptual"] = r.losses.perceptual;
  if (r.attention_in_total) j["attention"] = r.losses.attention;
  j["weighted_total"] = r.losses.weighted_total;
  j["weights"] = r.losses.weights;
  j["recon_l1"] = r.recon_l1;
  j["attention_iou"] = r.attention_iou;
  j["seconds"] = r.seconds;
  return j;
}

namespace detail {

inline void check_finite(const LossBundle& b, const std::string& where) {
  std::string bad;
  if (!b.finite(&bad)) throw NonFiniteError("non-finite loss term '" + bad + "' at " + where);
}

template <class T>
void check_grads(const ParamList<T>& params, const std::string& where) {
  std::string bad;
  if (!grads_finite(params, &bad))
    throw NonFiniteError("non-finite gradient in parameter '" + bad + "' at " + where + "; no update applied");
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(splitmix64(seed ^ splitmix64(0x5eedULL + epoch)));
  std::shuffle(order.begin(), order.end(), rng.engine());
  return order;
}

}  // namespace detail

/// Reconstruction-phase trainer: one discriminator step, then one step of the
/// encoder, embedder and generator, per batch.
class Trainer {
 public:
  Trainer(Model<float>& model, SceneSource data)
      : model_(model), data_(std::move(data)), cfg_(model.config()) {
    if (data_.num_classes() != cfg_.num_classes)
      throw ConfigError("trainer: dataset has " + std::to_string(data_.num_classes()) + " classes, model " +
                        std::to_string(cfg_.num_classes));
    Rng rng(detail::splitmix64(cfg_.seed + 17));
    disc_ = MultiScaleDiscriminator<float>(cfg_.discriminator(), rng);
    gen_params_ = model_.trainable_parameters();
    disc_params_ = disc_.parameters();
    set_requires_grad(gen_params_, true);
    opt_g_.emplace(tensors_of(gen_params_), cfg_.adam());
    opt_d_.emplace(tensors_of(disc_params_), cfg_.adam());
  }

  const MultiScaleDiscriminator<float>& discriminator() const { return disc_; }

  std::size_t steps_per_epoch() const {
    const std::size_t full = (data_.size() + cfg_.batch_size - 1) / cfg_.batch_size;
    return cfg_.steps_per_epoch ? std::min(cfg_.steps_per_epoch, full) : full;
  }

  struct StepResult {
    LossBundle losses;
    double recon_l1 = 0;
    double attention_iou = 0;
  };

  StepResult step(const Batch& b) {
    const std::string where = "step " + std::to_string(global_step_);
    const LossWeights w = cfg_.loss_weights();
    const bool use_att = !cfg_.no_cross_attention && w.attention > 0;

    const StyleCodes<float> st = model_.styles(b.images, b.masks);
    const GeneratedSample<float> sample = model_.generate(model_.embed(b.masks), st, b.masks);

    // Discriminator step on detached fakes.
    const auto d_real = disc_(b.images, b.masks);
    const auto d_fake = disc_(sample.image.detach(), b.masks);
    const Tensor<float> adv_d = hinge_losses(d_real, d_fake).first;
    StepResult r;
    r.losses.adv_d = adv_d.item();
    if (!std::isfinite(r.losses.adv_d)) throw NonFiniteError("non-finite loss term 'adv_d' at " + where);
    zero_grad(disc_params_);
    adv_d.backward();
    detail::check_grads(disc_params_, where);
    opt_d_->step();
    zero_grad(disc_params_);

    // Generator side against the updated discriminator; real features are constants.
    DiscriminatorOutputs<float> real_now;
    {
      NoGradGuard ng;
      real_now = disc_(b.images, b.masks);
    }
    const auto d_fake_g = disc_(sample.image, b.masks);
    const Tensor<float> adv_g = hinge_generator_loss(d_fake_g);
    const Tensor<float> fm = feature_matching_loss(real_now, d_fake_g);
    const Tensor<float> perc = perceptual_loss(model_.features(), sample.image, b.images);
    Tensor<float> total = add(adv_g, add(scale(fm, float(w.feature_matching)), scale(perc, float(w.perceptual))));
    Tensor<float> att;
    if (use_att) {
      att = attention_loss(sample.attention, b.masks);
      total = add(total, scale(att, float(w.attention)));
    }

    r.losses.adv_g = adv_g.item();
    r.losses.feat_match = fm.item();
    r.losses.perceptual = perc.item();
    r.losses.attention = use_att ? att.item() : 0.0;
    r.losses.weighted_total = total.item();
    r.losses.weights = {{"feat_match", w.feature_matching}, {"perceptual", w.perceptual}, {"attention", w.attention}};
    detail::check_finite(r.losses, where);
    r.recon_l1 = mean_abs_diff(sample.image, b.images);
    if (!sample.attention.empty())
      r.attention_iou = mean_attention_iou(sample.attention, std::span<const SemanticMask>(b.mask_list),
                                           2.0 / double(cfg_.num_classes));

    zero_grad(gen_params_);
    total.backward();
    detail::check_grads(gen_params_, where);
    opt_g_->step();
    zero_grad(disc_params_);
    zero_grad(gen_params_);
    ++global_step_;
    return r;
  }

  EpochRecord run_epoch(std::size_t epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = detail::epoch_order(data_.size(), cfg_.seed, epoch);
    const std::size_t steps = steps_per_epoch();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.attention_in_total = !cfg_.no_cross_attention && cfg_.attention_weight() > 0;
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t lo = s * cfg_.batch_size;
      const std::size_t hi = std::min(lo + cfg_.batch_size, order.size());
      const Batch b = load_batch(data_, std::span<const std::size_t>(order.data() + lo, hi - lo));
      const StepResult r = step(b);
      auto& L = rec.losses;
      L.adv_g += r.losses.adv_g;
      L.adv_d += r.losses.adv_d;
      L.feat_match += r.losses.feat_match;
      L.perceptual += r.losses.perceptual;
      L.attention += r.losses.attention;
      L.weighted_total += r.losses.weighted_total;
      L.weights = r.losses.weights;
      rec.recon_l1 += r.recon_l1;
      rec.attention_iou += r.attention_iou;
    }
    const double inv = steps ? 1.0 / double(steps) : 0.0;
    for (double* v : {&rec.losses.adv_g, &rec.losses.adv_d, &rec.losses.feat_match, &rec.losses.perceptual,
                      &rec.losses.attention, &rec.losses.weighted_total, &rec.recon_l1, &rec.attention_iou})
      *v *= inv;
    rec.steps = steps;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
  }

  std::size_t global_step() const { return global_step_; }

 private:
  Model<float>& model_;
  SceneSource data_;
  RunConfig cfg_;
  MultiScaleDiscriminator<float> disc_;
  ParamList<float> gen_params_, disc_params_;
  std::optional<Adam<float>> opt_g_, opt_d_;
  std::size_t global_step_ = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

/// Full reconstruction phase. With a non-empty run_dir, writes config.txt,
/// metrics.jsonl (one record per epoch), periodic checkpoints and final.cacp.
inline std::vector<EpochRecord> train(Model<float>& model, const SceneSource& data, const std::string& run_dir = "",
                                      const EpochCallback& on_epoch = nullptr) {
  const RunConfig& cfg = model.config();
  Trainer trainer(model, data);
  std::ofstream log;
  std::filesystem::path dir(run_dir);
  if (!run_dir.empty()) {
    std::filesystem::create_directories(dir);
    write_text(dir / "config.txt", cfg.to_text());
    log.open(dir / "metrics.jsonl", std::ios::app);
  }
  std::vector<EpochRecord> out;
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    out.push_back(trainer.run_epoch(e));
    if (log.is_open()) log << to_json(out.back(), cfg.hash()).dump() << '\n' << std::flush;
    if (on_epoch) on_epoch(out.back());
    if (!run_dir.empty() && cfg.checkpoint_every && e % cfg.checkpoint_every == 0)
      model.save((dir / ("epoch" + std::to_string(e) + ".cacp")).string());
  }
  if (!run_dir.empty()) model.save((dir / "final.cacp").string());
  return out;
}

// ---------------------------------------------------------------------------
// Diversity phase

struct DiversityRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double adversarial = 0;  // generator-side hinge term
  double discriminator = 0;
  double diversity = 0;    // -mean|G(z1) - G(z2)|
  double seconds = 0;
};

inline nlohmann::json to_json(const DiversityRecord& r, const std::string& config_hash) {
  return {{"phase", "diversity"},     {"epoch", r.epoch},
          {"steps", r.steps},         {"config_hash", config_hash},
          {"adversarial", r.adversarial}, {"adv_d", r.discriminator},
          {"diversity", r.diversity}, {"seconds", r.seconds}};
}

/// Styles for a batch from noise: [N,C,S].
inline StyleCodes<float> sample_styles(const MappingNetwork<float>& mapping, std::size_t n, Rng& rng) {
  const Tensor<float> z = normal_tensor<float>({n, mapping.config().noise_dim}, 1.0, rng);
  return mapping(z);
}

/// Per-class mean of the encoder's style rows over the first `count` scenes of
/// `data`, taken only where the class is present: [C,S]. Absent classes stay 0.
inline Tensor<float> class_mean_styles(const Model<float>& model, const SceneSource& data, std::size_t count) {
  const std::size_t C = model.config().num_classes;
  NoGradGuard ng;
  std::vector<double> sum;
  std::vector<double> seen(C, 0);
  std::size_t S = 0;
  for (std::size_t i = 0; i < std::min(count, data.size()); ++i) {
    const auto [img, mask] = data.get(i);
    const StyleCodes<float> st = model.styles(detail::batch_of<float>(img), detail::batch_of<float>(mask));
    if (sum.empty()) S = st.dim(2), sum.assign(C * S, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      if (!mask.count(c)) continue;
      seen[c] += 1;
      for (std::size_t d = 0; d < S; ++d) sum[c * S + d] += st.values()[c * S + d];
    }
  }
  std::vector<float> out(sum.size(), 0.0f);
  for (std::size_t c = 0; c < C; ++c)
    if (seen[c] > 0)
      for (std::size_t d = 0; d < S; ++d) out[c * S + d] = static_cast<float>(sum[c * S + d] / seen[c]);
  return Tensor<float>({C, S}, std::move(out));
}

/// Trains a mapping network with every other model parameter frozen. The
/// objective is the adversarial term plus lambda_div times the diversity loss.
/// A new mapping starts with each branch's output bias at that class's mean
/// encoder style over the first 200 training scenes.
inline std::vector<DiversityRecord> train_mapping(Model<float>& model, const SceneSource& data,
                                                  const std::string& run_dir = "",
                                                  const std::function<void(const DiversityRecord&)>& on_epoch = nullptr) {
  const RunConfig& cfg = model.config();
  if (data.num_classes() != cfg.num_classes) throw ConfigError("train_mapping: dataset class count mismatch");
  if (!model.has_mapping()) {
    const Tensor<float> means = class_mean_styles(model, data, 200);
    model.add_mapping(detail::splitmix64(cfg.seed + 99)).set_output_bias(means);
  }
  const ParamList<float> frozen = model.trainable_parameters();
  set_requires_grad(frozen, false);
  struct Restore {
    const ParamList<float>& p;
    ~Restore() { set_requires_grad(p, true); }
  } restore{frozen};

  const MappingNetwork<float>& mapping = model.mapping();
  const ParamList<float> map_params = mapping.parameters();
  set_requires_grad(map_params, true);
  Rng drng(detail::splitmix64(cfg.seed + 31));
  MultiScaleDiscriminator<float> disc(cfg.discriminator(), drng);
  const ParamList<float> disc_params = disc.parameters();
  AdamConfig adam = cfg.adam();
  adam.lr = cfg.diversity_lr;
  Adam<float> opt_m(tensors_of(map_params), adam);
  Adam<float> opt_d(tensors_of(disc_params), adam);
  Rng noise(detail::splitmix64(cfg.seed + 57));

  std::ofstream log;
  std::filesystem::path dir(run_dir);
  if (!run_dir.empty()) {
    std::filesystem::create_directories(dir);
    write_text(dir / "config.txt", cfg.to_text());
    log.open(dir / "metrics.jsonl", std::ios::app);
  }

  const std::size_t full = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t steps = cfg.diversity_steps_per_epoch ? std::min(cfg.diversity_steps_per_epoch, full) : full;
  std::vector<DiversityRecord> out;
  std::size_t global = 0;
  for (std::size_t e = 1; e <= cfg.diversity_epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = detail::epoch_order(data.size(), cfg.seed + 1, e);
    DiversityRecord rec;
    rec.epoch = e;
    for (std::size_t s = 0; s < steps; ++s, ++global) {
      const std::string where = "diversity step " + std::to_string(global);
      const std::size_t lo = s * cfg.batch_size, hi = std::min(lo + cfg.batch_size, order.size());
      const Batch b = load_batch(data, std::span<const std::size_t>(order.data() + lo, hi - lo));
      const std::size_t n = hi - lo;
      MaskEmbedding<float> emb;
      {
        NoGradGuard ng;
        emb = model.embed(b.masks);
      }
      const GeneratedSample<float> g1 = model.generate(emb, sample_styles(mapping, n, noise), b.masks);
      const GeneratedSample<float> g2 = model.generate(emb, sample_styles(mapping, n, noise), b.masks);
      const Tensor<float> fakes = concat<float>({g1.image, g2.image}, 0);
      const Tensor<float> masks2 = concat<float>({b.masks, b.masks}, 0);

      const auto d_real = disc(b.images, b.masks);
      const auto d_fake = disc(fakes.detach(), masks2);
      const Tensor<float> adv_d = hinge_losses(d_real, d_fake).first;
      LossBundle check;
      check.adv_d = adv_d.item();
      detail::check_finite(check, where);
      zero_grad(disc_params);
      adv_d.backward();
      detail::check_grads(disc_params, where);
      opt_d.step();
      zero_grad(disc_params);

      const Tensor<float> adv = hinge_generator_loss(disc(fakes, masks2));
      const Tensor<float> div = diversity_loss(g1.image, g2.image);
      const Tensor<float> total = add(adv, scale(div, float(cfg.lambda_div)));
      check.adv_g = adv.item();
      check.weighted_total = total.item();
      detail::check_finite(check, where);
      if (!std::isfinite(div.item())) throw NonFiniteError("non-finite loss term 'diversity' at " + where);
      zero_grad(map_params);
      total.backward();
      detail::check_grads(map_params, where);
      opt_m.step();
      zero_grad(disc_params);
      zero_grad(map_params);

      rec.adversarial += check.adv_g;
      rec.discriminator += check.adv_d;
      rec.diversity += div.item();
    }
    const double inv = steps ? 1.0 / double(steps) : 0.0;
    rec.adversarial *= inv;
    rec.discriminator *= inv;
    rec.diversity *= inv;
    rec.steps = steps;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(rec);
    if (log.is_open()) log << to_json(rec, cfg.hash()).dump() << '\n' << std::flush;
    if (on_epoch) on_epoch(rec);
  }
  if (!run_dir.empty()) model.save((dir / "final.cacp").string());
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalRecord {
  std::size_t samples = 0;
  double mean_l1 = 0;
  double psnr = 0;
  double feature_distance = 0;  // Frechet distance of frozen random features; not FID
  double attention_iou = 0;
  std::string config_hash;
};

inline nlohmann::json to_json(const EvalRecord& r) {
  return {{"phase", "eval"},
          {"samples", r.samples},
          {"mean_l1", r.mean_l1},
          {"psnr", r.psnr},
          {"frozen_feature_distance_not_fid", r.feature_distance},
          {"attention_iou", r.attention_iou},
          {"config_hash", r.config_hash}};
}

/// Reconstructs every test scene and compares against the originals.
inline EvalRecord evaluate(const Model<float>& model, const SceneSource& test, std::size_t batch = 8) {
  const RunConfig& cfg = model.config();
  if (test.num_classes() != cfg.num_classes)
    throw ConfigError("evaluate: test set has " + std::to_string(test.num_classes()) + " classes, model " +
                      std::to_string(cfg.num_classes));
  NoGradGuard ng;
  EvalRecord r;
  r.config_hash = cfg.hash();
  std::vector<Tensor<float>> real_feats, fake_feats;
  double iou_sum = 0, psnr_sum = 0, l1_sum = 0;
  std::size_t iou_batches = 0;
  for (std::size_t lo = 0; lo < test.size(); lo += batch) {
    const std::size_t hi = std::min(lo + batch, test.size());
    std::vector<std::size_t> idx(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    const Batch b = load_batch(test, idx);
    const GeneratedSample<float> s = model.reconstruct(b.images, b.masks);
    const std::size_t n = hi - lo;
    l1_sum += mean_abs_diff(s.image, b.images) * double(n);
    const std::size_t per = s.image.numel() / n;
    for (std::size_t i = 0; i < n; ++i) {
      const Shape one{3, s.image.dim(2), s.image.dim(3)};
      const auto slice = [&](const Tensor<float>& t) {
        return Tensor<float>(one, std::vector<float>(t.values().begin() + std::ptrdiff_t(i * per),
                                                     t.values().begin() + std::ptrdiff_t((i + 1) * per)));
      };
      psnr_sum += psnr(slice(s.image), slice(b.images));
    }
    if (!s.attention.empty()) {
      iou_sum += mean_attention_iou(s.attention, std::span<const SemanticMask>(b.mask_list),
                                    2.0 / double(cfg.num_classes)) * double(n);
      iou_batches += n;
    }
    real_feats.push_back(model.features().pooled(b.images));
    fake_feats.push_back(model.features().pooled(s.image));
    r.samples += n;
  }
  r.mean_l1 = l1_sum / double(r.samples);
  r.psnr = psnr_sum / double(r.samples);
  r.attention_iou = iou_batches ? iou_sum / double(iou_batches) : 0.0;
  r.feature_distance = frechet_distance(to_matrix(concat(real_feats, 0)), to_matrix(concat(fake_feats, 0)));
  return r;
}

}  // namespace casis
