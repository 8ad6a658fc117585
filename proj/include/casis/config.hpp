#pragma once

// Run configuration and its key=value text form. The same key names are used
// by the config file, the CLI flags and the checkpoint's config blob.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>

#include <zlib.h>

#include "casis/adversarial.hpp"
#include "casis/diversity.hpp"
#include "casis/generator.hpp"
#include "casis/mask_embedder.hpp"
#include "casis/style_encoder.hpp"

namespace casis {

struct RunConfig {
  // data
  std::size_t num_classes = 4;
  std::size_t image_size = 64;
  std::size_t train_scenes = 2000;
  std::size_t test_scenes = 200;
  double style_correlation = 0.5;
  std::uint64_t data_seed = 7;
  std::string data_dir;  // empty: procedural scenes

  // style encoder
  std::size_t filters_per_group = 4;
  std::size_t down_layers = 6;
  std::size_t up_layers = 5;
  std::size_t code_dim = 256;
  bool mix_skip_groups = false;

  // mask embedder
  std::size_t embed_dim = 256;

  // generator
  std::size_t gen_blocks = 3;
  std::size_t base_resolution = 16;
  std::size_t top_width = 64;
  std::size_t self_attention_cutoff = 32;
  std::size_t head_dim = 64;

  // discriminator
  std::size_t disc_width = 32;
  std::size_t disc_scales = 2;

  // mapping network
  std::size_t noise_dim = 512;
  std::size_t mapping_hidden = 512;
  std::size_t mapping_trunk_layers = 3;
  std::size_t mapping_branch_layers = 4;

  // optimization
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::size_t epochs = 100;
  std::size_t batch_size = 1;
  std::size_t steps_per_epoch = 0;  // 0: one pass over the training scenes
  std::uint64_t seed = 1;

  // loss weights
  double lambda_fm = 10.0;
  double lambda_p = 10.0;
  double lambda_att = 1.0;
  double lambda_div = 0.1;
  std::uint64_t perceptual_seed = 1234;

  // diversity phase
  std::size_t diversity_epochs = 1;
  std::size_t diversity_steps_per_epoch = 0;
  double diversity_lr = 2e-5;  // mapping and its discriminator

  // ablation arms
  bool no_group_conv = false;
  bool no_mask_embedder = false;
  bool no_cross_attention = false;
  bool no_attention_loss = false;

  std::size_t checkpoint_every = 0;  // epochs; 0 keeps only the final checkpoint

  /// Visits every field as (key, reference); the order defines the text form.
  template <class Self, class F>
  static void visit(Self& c, F&& f) {
    f("num_classes", c.num_classes);
    f("image_size", c.image_size);
    f("train_scenes", c.train_scenes);
    f("test_scenes", c.test_scenes);
    f("style_correlation", c.style_correlation);
    f("data_seed", c.data_seed);
    f("data_dir", c.data_dir);
    f("filters_per_group", c.filters_per_group);
    f("down_layers", c.down_layers);
    f("up_layers", c.up_layers);
    f("code_dim", c.code_dim);
    f("mix_skip_groups", c.mix_skip_groups);
    f("embed_dim", c.embed_dim);
    f("gen_blocks", c.gen_blocks);
    f("base_resolution", c.base_resolution);
    f("top_width", c.top_width);
    f("self_attention_cutoff", c.self_attention_cutoff);
    f("head_dim", c.head_dim);
    f("disc_width", c.disc_width);
    f("disc_scales", c.disc_scales);
    f("noise_dim", c.noise_dim);
    f("mapping_hidden", c.mapping_hidden);
    f("mapping_trunk_layers", c.mapping_trunk_layers);
    f("mapping_branch_layers", c.mapping_branch_layers);
    f("lr", c.lr);
    f("beta1", c.beta1);
    f("beta2", c.beta2);
    f("epochs", c.epochs);
    f("batch_size", c.batch_size);
    f("steps_per_epoch", c.steps_per_epoch);
    f("seed", c.seed);
    f("lambda_fm", c.lambda_fm);
    f("lambda_p", c.lambda_p);
    f("lambda_att", c.lambda_att);
    f("lambda_div", c.lambda_div);
    f("perceptual_seed", c.perceptual_seed);
    f("diversity_epochs", c.diversity_epochs);
    f("diversity_steps_per_epoch", c.diversity_steps_per_epoch);
    f("diversity_lr", c.diversity_lr);
    f("no_group_conv", c.no_group_conv);
    f("no_mask_embedder", c.no_mask_embedder);
    f("no_cross_attention", c.no_cross_attention);
    f("no_attention_loss", c.no_attention_loss);
    f("checkpoint_every", c.checkpoint_every);
  }

  /// Full-size architecture: 19 classes, 256x256, five generator stages.
  static RunConfig full() {
    RunConfig c;
    c.num_classes = 19;
    c.image_size = 256;
    c.embed_dim = 256;
    c.gen_blocks = 5;
    c.base_resolution = 16;
    c.top_width = 256;
    c.self_attention_cutoff = 64;
    c.epochs = 100;
    return c;
  }

  /// Small CPU configuration used by the acceptance suite.
  static RunConfig desk() {
    RunConfig c;
    c.epochs = 30;
    return c;
  }

  double attention_weight() const { return no_attention_loss ? 0.0 : lambda_att; }

  EncoderConfig encoder() const {
    EncoderConfig e;
    e.num_classes = num_classes;
    e.filters_per_group = filters_per_group;
    e.down_layers = down_layers;
    e.up_layers = up_layers;
    e.code_dim = code_dim;
    e.image_size = image_size;
    e.grouped = !no_group_conv;
    e.mix_skip_groups = mix_skip_groups;
    return e;
  }

  EmbedderConfig embedder() const { return {num_classes, image_size, embed_dim}; }

  GeneratorConfig generator() const {
    GeneratorConfig g;
    g.num_classes = num_classes;
    g.num_blocks = gen_blocks;
    g.base_resolution = base_resolution;
    g.top_width = top_width;
    g.self_attention_cutoff = self_attention_cutoff;
    g.style_width = up_layers * code_dim;
    g.nominal_head_dim = head_dim;
    g.conditioning = no_cross_attention ? ConditioningMode::spade_ablation : ConditioningMode::cross_attention;
    return g;
  }

  DiscriminatorConfig discriminator() const { return {num_classes, disc_width, disc_scales}; }

  MappingConfig mapping() const {
    MappingConfig m;
    m.num_classes = num_classes;
    m.noise_dim = noise_dim;
    m.hidden = mapping_hidden;
    m.trunk_layers = mapping_trunk_layers;
    m.branch_layers = mapping_branch_layers;
    m.branch_out = up_layers * code_dim;
    return m;
  }

  AdamConfig adam() const { return {lr, beta1, beta2, 1e-8}; }

  LossWeights loss_weights() const { return {lambda_fm, lambda_p, attention_weight()}; }

  void validate() const {
    encoder().validate();
    embedder().validate();
    generator().validate();
    mapping().validate();
    const std::size_t side = embedder().view_side();
    if (side != base_resolution)
      throw ConfigError("config: embedding view is " + std::to_string(side) + "x" + std::to_string(side) +
                        " but base_resolution is " + std::to_string(base_resolution));
    if (generator().output_resolution() != image_size)
      throw ConfigError("config: generator output " + std::to_string(generator().output_resolution()) +
                        " != image_size " + std::to_string(image_size));
    if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
    if (!(style_correlation >= 0.0 && style_correlation <= 1.0))
      throw ConfigError("config: style_correlation must lie in [0,1]");
  }

  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    visit(*this, [&](const char* key, const auto& v) {
      using V = std::decay_t<decltype(v)>;
      os << key << '=';
      if constexpr (std::is_same_v<V, bool>)
        os << (v ? "true" : "false");
      else
        os << v;
      os << '\n';
    });
    return os.str();
  }

  /// Sets one field from its text form; returns false for an unknown key.
  bool set(const std::string& key, const std::string& value) {
    bool found = false;
    visit(*this, [&](const char* k, auto& v) {
      if (key != k) return;
      found = true;
      using V = std::decay_t<decltype(v)>;
      try {
        if constexpr (std::is_same_v<V, bool>) {
          if (value == "true" || value == "1")
            v = true;
          else if (value == "false" || value == "0")
            v = false;
          else
            throw ConfigError("");
        } else if constexpr (std::is_same_v<V, std::string>) {
          v = value;
        } else if constexpr (std::is_floating_point_v<V>) {
          std::size_t pos = 0;
          v = std::stod(value, &pos);
          if (pos != value.size()) throw ConfigError("");
        } else {
          if (!value.empty() && value[0] == '-') throw ConfigError("");
          std::size_t pos = 0;
          v = static_cast<V>(std::stoull(value, &pos));
          if (pos != value.size()) throw ConfigError("");
        }
      } catch (const std::exception&) {
        throw ConfigError("config: invalid value '" + value + "' for " + key);
      }
    });
    return found;
  }

  /// Parses key=value lines; '#' starts a comment. Unknown keys are errors.
  static RunConfig from_text(const std::string& text, RunConfig base) {
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      const auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
      const std::string key = trim(line.substr(0, eq));
      if (!base.set(key, trim(line.substr(eq + 1))))
        throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    return base;
  }

  static RunConfig from_file(const std::string& path, RunConfig base) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str(), base);
  }

  static RunConfig from_text(const std::string& text) { return from_text(text, RunConfig{}); }
  static RunConfig from_file(const std::string& path) { return from_file(path, RunConfig{}); }

  /// CRC-32 of the text form, as 8 hex digits.
  std::string hash() const {
    const std::string t = to_text();
    const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(t.data()), static_cast<uInt>(t.size()));
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
    return buf;
  }
};

}  // namespace casis
