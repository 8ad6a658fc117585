// casis: command-line front end (training, evaluation, editing, data, gradient checks).

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "casis/editing.hpp"
#include "casis/grad_suite.hpp"
#include "casis/image_io.hpp"
#include "casis/trainer.hpp"

namespace fs = std::filesystem;
using namespace casis;

namespace {

/// Every RunConfig field as a --flag, plus --preset and --config.
struct ConfigFlags {
  std::string preset = "desk";
  std::string config_file;
  std::map<std::string, std::string> values;
  std::map<std::string, bool> flags;
  std::vector<std::pair<std::string, CLI::Option*>> options;

  void attach(CLI::App& app) {
    app.add_option("--preset", preset, "Starting configuration")->check(CLI::IsMember({"desk", "full", "default"}));
    app.add_option("--config", config_file, "key=value file applied over the preset")->check(CLI::ExistingFile);
    RunConfig probe;
    RunConfig::visit(probe, [&](const char* key, auto& v) {
      using V = std::decay_t<decltype(v)>;
      std::string dashed(key);
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      std::string names = "--" + dashed;
      if (dashed != key) names += std::string(",--") + key;
      CLI::Option* o;
      if constexpr (std::is_same_v<V, bool>)
        o = app.add_flag(names, flags[key]);
      else
        o = app.add_option(names, values[key]);
      o->group("Run configuration");
      options.emplace_back(key, o);
    });
  }

  RunConfig base() const {
    if (preset == "full") return RunConfig::full();
    if (preset == "desk") return RunConfig::desk();
    return RunConfig{};
  }

  /// Applies the file and the command-line flags over `cfg`.
  RunConfig apply(RunConfig cfg) const {
    if (!config_file.empty()) cfg = RunConfig::from_file(config_file, cfg);
    for (const auto& [key, o] : options) {
      if (!o->count()) continue;
      if (flags.count(key))
        cfg.set(key, flags.at(key) ? "true" : "false");
      else
        cfg.set(key, values.at(key));
    }
    cfg.validate();
    return cfg;
  }
};

/// A scene given by files or by index into the test split.
struct SceneArg {
  std::string image, mask;
  std::optional<std::size_t> scene;

  void attach(CLI::App& app, const std::string& prefix, const std::string& what, bool need_image = true) {
    if (need_image) app.add_option("--" + prefix + "image", image, what + " image (PNG)")->check(CLI::ExistingFile);
    app.add_option("--" + prefix + "mask", mask, what + " index mask (PNG)")->check(CLI::ExistingFile);
    app.add_option("--" + prefix + "scene", scene, what + " as a test-split scene index");
  }

  std::pair<Tensor<float>, SemanticMask> load(const RunConfig& cfg, const std::string& what) const {
    if (scene) {
      const SceneSource test = test_source(cfg);
      return test.get(*scene);
    }
    if (mask.empty()) throw UsageError(what + ": give a scene index or a mask file");
    if (image.empty()) {
      const Image8 m = read_png(mask, 1);
      std::vector<std::uint16_t> labels(m.pixels.begin(), m.pixels.end());
      return {Tensor<float>(), SemanticMask(cfg.num_classes, m.height, m.width, std::move(labels))};
    }
    return load_pair(image, mask, cfg.num_classes);
  }
};

std::set<std::size_t> parse_classes(const std::string& text) {
  std::set<std::size_t> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::size_t pos = 0;
    std::size_t c;
    try {
      c = std::stoull(tok, &pos);
    } catch (const std::exception&) {
      throw UsageError("bad class list '" + text + "'");
    }
    if (pos != tok.size()) throw UsageError("bad class list '" + text + "'");
    out.insert(c);
  }
  if (out.empty()) throw UsageError("class list is empty");
  return out;
}

void write_image(const std::string& path, const Tensor<float>& batch) {
  const Tensor<float> one = reshape(batch.detach(), {3, batch.dim(2), batch.dim(3)});
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  write_png(path, to_image8(one));
  std::cout << nlohmann::json{{"image", path}}.dump() << '\n';
}

Model<float> load_model(const std::string& path, const ConfigFlags* flags) {
  const CheckpointData ck = load_checkpoint(path);
  RunConfig cfg = RunConfig::from_text(ck.config_text);
  if (flags) cfg = flags->apply(cfg);
  return Model<float>::from_checkpoint(ck, cfg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-adaptive cross-attention semantic image synthesis"};
  app.require_subcommand(1);

  // train
  ConfigFlags train_cfg;
  std::string train_dir;
  auto* train = app.add_subcommand("train", "Reconstruction training");
  train_cfg.attach(*train);
  train->add_option("--run-dir", train_dir, "Output directory")->required();

  // train-diversity
  ConfigFlags div_cfg;
  std::string div_ckpt, div_dir;
  auto* train_div = app.add_subcommand("train-diversity", "Train a noise-to-style mapping with the generator frozen");
  div_cfg.attach(*train_div);
  train_div->add_option("--checkpoint", div_ckpt, "Trained model")->required()->check(CLI::ExistingFile);
  train_div->add_option("--run-dir", div_dir, "Output directory")->required();

  // eval
  ConfigFlags eval_cfg;
  std::string eval_ckpt, eval_dir;
  std::size_t eval_batch = 8;
  auto* eval = app.add_subcommand("eval", "Evaluate reconstructions on the test split");
  eval_cfg.attach(*eval);
  eval->add_option("--checkpoint", eval_ckpt, "Model")->required()->check(CLI::ExistingFile);
  eval->add_option("--run-dir", eval_dir, "Write eval.json here");
  eval->add_option("--eval-batch", eval_batch, "Scenes per forward pass")->check(CLI::PositiveNumber);

  // editing commands share target options
  std::string edit_ckpt, out_path, classes_text;
  SceneArg target, reference;
  double alpha = 0;
  auto add_edit = [&](const char* name, const char* help) {
    auto* c = app.add_subcommand(name, help);
    c->add_option("--checkpoint", edit_ckpt, "Model")->required()->check(CLI::ExistingFile);
    c->add_option("--out", out_path, "Output PNG")->required();
    target.attach(*c, "", "Target");
    return c;
  };
  auto* recon = add_edit("reconstruct", "Reconstruct one scene");
  auto* style = add_edit("style-transfer", "Copy class styles from a reference scene");
  reference.attach(*style, "ref-", "Reference");
  style->add_option("--classes", classes_text, "Comma-separated class indices")->required();
  auto* shape = add_edit("shape-transfer", "Copy class shapes from a reference mask");
  reference.attach(*shape, "ref-", "Reference", false);
  shape->add_option("--classes", classes_text, "Comma-separated class indices")->required();
  auto* interp = add_edit("interp", "Blend class shapes between the target mask and a second mask");
  reference.attach(*interp, "ref-", "Second", false);
  interp->add_option("--classes", classes_text, "Comma-separated class indices")->required();
  interp->add_option("--alpha", alpha, "Weight of the target mask")->required()->check(CLI::Range(0.0, 1.0));

  // grad-check
  std::uint64_t gc_seed = 2024;
  double gc_tol = 1e-4, gc_step = 1e-4;
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of every op and block");
  gc->add_option("--seed", gc_seed);
  gc->add_option("--tolerance", gc_tol);
  gc->add_option("--step", gc_step);

  // synth-data
  std::string synth_out;
  std::uint64_t synth_seed = 7;
  std::size_t synth_count = 2200, synth_offset = 0, synth_classes = 4, synth_size = 64;
  double synth_corr = 0.5;
  auto* synth = app.add_subcommand("synth-data", "Write procedural scenes as images/ + masks/ PNG pairs");
  synth->add_option("--out", synth_out, "Dataset directory")->required();
  synth->add_option("--seed", synth_seed);
  synth->add_option("--count", synth_count)->check(CLI::PositiveNumber);
  synth->add_option("--offset", synth_offset);
  synth->add_option("--num-classes,--num_classes", synth_classes)->check(CLI::Range(2, 255));
  synth->add_option("--size,--image-size,--image_size", synth_size)->check(CLI::PositiveNumber);
  synth->add_option("--style-correlation,--style_correlation", synth_corr)->check(CLI::Range(0.0, 1.0));

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (train->parsed()) {
      const RunConfig cfg = train_cfg.apply(train_cfg.base());
      Model<float> model(cfg);
      const std::string hash = cfg.hash();
      casis::train(model, train_source(cfg), train_dir,
                   [&](const EpochRecord& r) { std::cout << to_json(r, hash).dump() << '\n' << std::flush; });
      return 0;
    }
    if (train_div->parsed()) {
      Model<float> model = load_model(div_ckpt, &div_cfg);
      const std::string hash = model.config().hash();
      train_mapping(model, train_source(model.config()), div_dir,
                    [&](const DiversityRecord& r) { std::cout << to_json(r, hash).dump() << '\n' << std::flush; });
      return 0;
    }
    if (eval->parsed()) {
      const Model<float> model = load_model(eval_ckpt, &eval_cfg);
      const nlohmann::json j = to_json(evaluate(model, test_source(model.config()), eval_batch));
      std::cout << j.dump() << '\n';
      if (!eval_dir.empty()) {
        fs::create_directories(eval_dir);
        write_text(fs::path(eval_dir) / "eval.json", j.dump(2) + "\n");
      }
      return 0;
    }
    if (recon->parsed() || style->parsed() || shape->parsed() || interp->parsed()) {
      const Model<float> model = load_model(edit_ckpt, nullptr);
      const RunConfig& cfg = model.config();
      const auto [img, mask] = target.load(cfg, "target");
      if (!img.defined()) throw UsageError("target: an image is required");
      GeneratedSample<float> out;
      if (recon->parsed()) {
        out = reconstruct(model, img, mask);
      } else {
        EditRequest<float> req;
        req.target_image = img;
        req.target_mask = mask;
        req.classes = parse_classes(classes_text);
        auto [rimg, rmask] = reference.load(cfg, "reference");
        req.ref_image = rimg;
        req.ref_mask = rmask;
        if (style->parsed()) {
          if (!rimg.defined()) throw UsageError("reference: an image is required for style transfer");
          req.mode = EditMode::style;
        } else if (shape->parsed()) {
          req.mode = EditMode::shape;
        } else {
          req.mode = EditMode::shape_interpolate;
          req.alpha = alpha;
        }
        out = apply_edit(model, req);
      }
      write_image(out_path, out.image);
      return 0;
    }
    if (gc->parsed()) {
      bool ok = true;
      for (const auto& r : run_gradient_suite(gc_seed, gc_tol, gc_step)) {
        nlohmann::json per;
        for (const auto& [k, v] : r.per_parameter_errors) per[k] = v;
        std::cout << nlohmann::json{{"op", r.op_name},
                                    {"max_relative_error", r.max_relative_error},
                                    {"tolerance", r.tolerance},
                                    {"passed", r.passed},
                                    {"inputs", per}}
                         .dump()
                  << '\n';
        ok = ok && r.passed;
      }
      return ok ? 0 : 1;
    }
    if (synth->parsed()) {
      SceneConfig sc;
      sc.num_classes = synth_classes;
      sc.resolution = synth_size;
      sc.style_correlation = synth_corr;
      sc.seed = synth_seed;
      sc.validate();
      for (std::size_t i = synth_offset; i < synth_offset + synth_count; ++i) {
        const Scene s = generate_scene(sc, i);
        save_pair(synth_out, i, s.image, s.mask);
      }
      std::cout << nlohmann::json{{"out", synth_out}, {"count", synth_count}, {"offset", synth_offset}}.dump() << '\n';
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n' << app.help() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
