#pragma once

// The finite-difference suite run by `casis grad-check` and the test binaries:
// every differentiable op and every composite block on small random shapes,
// in double precision. Outputs are reduced to a scalar by a fixed random
// projection so that every output element contributes.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "casis/adversarial.hpp"
#include "casis/diversity.hpp"
#include "casis/generator.hpp"
#include "casis/grad_check.hpp"
#include "casis/mask_embedder.hpp"
#include "casis/style_encoder.hpp"

namespace casis {

namespace gradsuite {

using D = double;
using T64 = Tensor<D>;

inline T64 randn(Shape s, Rng& rng, double sd = 1.0) { return normal_tensor<D>(std::move(s), sd, rng, true); }

/// Values bounded away from zero, for ops with a kink there.
inline T64 away_from_zero(Shape s, Rng& rng) {
  T64 t = randn(std::move(s), rng);
  for (auto& v : t.mutable_data()) v = (v < 0 ? -1.0 : 1.0) * (0.1 + std::abs(v));
  return t;
}

inline T64 uniform(Shape s, double lo, double hi, Rng& rng) {
  T64 t = uniform_tensor<D>(std::move(s), lo, hi, rng);
  t.set_requires_grad(true);
  return t;
}

/// Random one-hot masks [N,C,H,W].
inline T64 random_masks(std::size_t N, std::size_t C, std::size_t H, std::size_t W, Rng& rng) {
  std::vector<D> v(N * C * H * W, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < H * W; ++p) v[(n * C + rng.index(C)) * H * W + p] = 1.0;
  return T64({N, C, H, W}, std::move(v));
}

/// sum(y * R) for a fixed random R of y's shape.
struct Projector {
  Rng* rng;
  std::map<Shape, T64> cache;
  T64 operator()(const T64& y) {
    auto it = cache.find(y.shape());
    if (it == cache.end()) it = cache.emplace(y.shape(), normal_tensor<D>(y.shape(), 1.0, *rng)).first;
    return sum(mul(y, it->second));
  }
};

/// Replaces every parameter with fresh random values (zero-initialized
/// projections would otherwise hide gradients).
inline void randomize(const ParamList<D>& params, Rng& rng, double sd = 0.5) {
  for (const auto& p : params) {
    Tensor<D> t = p.tensor;
    for (auto& v : t.mutable_data()) v = sd * rng.normal();
  }
}

inline std::vector<NamedInput> named(const ParamList<D>& params) {
  std::vector<NamedInput> out;
  for (const auto& p : params) out.push_back({p.name, p.tensor});
  return out;
}

}  // namespace gradsuite

struct GradCase {
  std::string name;
  std::function<GradCheckReport(Rng&, double tol, double step)> run;
};

inline std::vector<GradCase> gradient_cases() {
  using namespace gradsuite;
  std::vector<GradCase> cases;
  const auto unary_case = [&](const std::string& name, std::function<T64(const T64&)> f, bool kink) {
    cases.push_back({name, [f, kink, name](Rng& rng, double tol, double step) {
                       T64 x = kink ? away_from_zero({2, 3, 4}, rng) : randn({2, 3, 4}, rng);
                       Projector P{&rng, {}};
                       return grad_check(name, [&] { return P(f(x)); }, {{"x", x}}, tol, step);
                     }});
  };
  unary_case("relu", [](const T64& x) { return relu(x); }, true);
  unary_case("leaky_relu", [](const T64& x) { return leaky_relu(x, 0.2); }, true);
  unary_case("sigmoid", [](const T64& x) { return sigmoid(x); }, false);
  unary_case("tanh", [](const T64& x) { return tanh(x); }, false);
  unary_case("abs", [](const T64& x) { return abs(x); }, true);
  unary_case("neg", [](const T64& x) { return neg(x); }, false);
  unary_case("square", [](const T64& x) { return square(x); }, false);
  unary_case("scale", [](const T64& x) { return scale(x, 1.7); }, false);
  unary_case("add_scalar", [](const T64& x) { return add_scalar(x, -0.3); }, false);
  unary_case("sum_axis", [](const T64& x) { return sum(x, 1, false); }, false);
  unary_case("mean_axis_keepdim", [](const T64& x) { return mean(x, -1, true); }, false);
  unary_case("sum_all", [](const T64& x) { return sum(x); }, false);
  unary_case("mean_all", [](const T64& x) { return mean(x); }, false);
  unary_case("reshape", [](const T64& x) { return reshape(x, {6, 4}); }, false);
  unary_case("permute", [](const T64& x) { return permute(x, {2, 0, 1}); }, false);
  unary_case("transpose", [](const T64& x) { return transpose(x, 0, 2); }, false);
  unary_case("slice", [](const T64& x) { return slice(x, 2, 1, 2); }, false);
  unary_case("softmax_last", [](const T64& x) { return softmax(x, -1); }, false);
  unary_case("softmax_middle", [](const T64& x) { return softmax(x, 1); }, false);

  const auto binary_case = [&](const std::string& name, Shape sa, Shape sb,
                               std::function<T64(const T64&, const T64&)> f) {
    cases.push_back({name, [=](Rng& rng, double tol, double step) {
                       T64 a = randn(sa, rng), b = randn(sb, rng);
                       Projector P{&rng, {}};
                       return grad_check(name, [&] { return P(f(a, b)); }, {{"a", a}, {"b", b}}, tol, step);
                     }});
  };
  binary_case("add_broadcast", {2, 3, 4}, {3, 1}, [](const T64& a, const T64& b) { return add(a, b); });
  binary_case("sub_broadcast", {2, 1, 4}, {3, 4}, [](const T64& a, const T64& b) { return sub(a, b); });
  binary_case("mul_broadcast", {2, 3, 4}, {1, 3, 1}, [](const T64& a, const T64& b) { return mul(a, b); });
  binary_case("concat", {2, 3, 4}, {2, 2, 4}, [](const T64& a, const T64& b) { return concat<D>({a, b}, 1); });
  binary_case("linear", {2, 3, 5}, {4, 5}, [](const T64& a, const T64& b) { return linear(a, b, T64()); });
  binary_case("bmm", {2, 3, 4}, {2, 4, 5}, [](const T64& a, const T64& b) { return bmm(a, b); });
  binary_case("bmm_ta", {2, 4, 3}, {2, 4, 5}, [](const T64& a, const T64& b) { return bmm(a, b, true, false); });
  binary_case("bmm_tb", {2, 3, 4}, {2, 5, 4}, [](const T64& a, const T64& b) { return bmm(a, b, false, true); });
  binary_case("bmm_tab", {2, 4, 3}, {2, 5, 4}, [](const T64& a, const T64& b) { return bmm(a, b, true, true); });
  binary_case("attention_map", {2, 3, 4}, {2, 5, 4}, [](const T64& q, const T64& k) { return attention_map(q, k); });

  cases.push_back({"l1_mean", [](Rng& rng, double tol, double step) {
                     T64 a = randn({2, 3, 4}, rng);
                     T64 b = randn({2, 3, 4}, rng);
                     // keep |a - b| away from the kink
                     for (std::size_t i = 0; i < a.numel(); ++i)
                       if (std::abs(a.values()[i] - b.values()[i]) < 0.05) a.mutable_data()[i] += 0.2;
                     return grad_check("l1_mean", [&] { return l1_mean(a, b); }, {{"a", a}, {"b", b}}, tol, step);
                   }});
  cases.push_back({"linear_bias", [](Rng& rng, double tol, double step) {
                     T64 x = randn({3, 5}, rng), w = randn({4, 5}, rng), b = randn({4}, rng);
                     Projector P{&rng, {}};
                     return grad_check("linear_bias", [&] { return P(linear(x, w, b)); },
                                       {{"x", x}, {"w", w}, {"b", b}}, tol, step);
                   }});
  cases.push_back({"attend", [](Rng& rng, double tol, double step) {
                     T64 q = randn({2, 3, 4}, rng), k = randn({2, 5, 4}, rng), v = randn({2, 5, 3}, rng);
                     Projector P{&rng, {}};
                     return grad_check("attend", [&] { return P(attend(q, k, v)); }, {{"q", q}, {"k", k}, {"v", v}},
                                       tol, step);
                   }});
  cases.push_back({"upsample_nearest2x", [](Rng& rng, double tol, double step) {
                     T64 x = randn({1, 2, 3, 3}, rng);
                     Projector P{&rng, {}};
                     return grad_check("upsample_nearest2x", [&] { return P(upsample_nearest2x(x)); }, {{"x", x}}, tol,
                                       step);
                   }});
  cases.push_back({"avg_pool2x", [](Rng& rng, double tol, double step) {
                     T64 x = randn({1, 2, 4, 6}, rng);
                     Projector P{&rng, {}};
                     return grad_check("avg_pool2x", [&] { return P(avg_pool2x(x)); }, {{"x", x}}, tol, step);
                   }});
  const auto conv_case = [&](const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                             Conv2dParams p, bool bias) {
    cases.push_back({name, [=](Rng& rng, double tol, double step) {
                       T64 x = randn({2, cin, 5, 6}, rng), w = randn({cout, cin / p.groups, k, k}, rng, 0.5);
                       T64 b = bias ? randn({cout}, rng) : T64();
                       Projector P{&rng, {}};
                       std::vector<NamedInput> in{{"x", x}, {"w", w}};
                       if (bias) in.push_back({"b", b});
                       return grad_check(name, [&] { return P(conv2d(x, w, b, p)); }, in, tol, step);
                     }});
  };
  conv_case("conv2d_3x3", 3, 4, 3, {1, 1, 1}, true);
  conv_case("conv2d_strided_grouped", 4, 6, 3, {2, 1, 2}, true);
  conv_case("conv2d_4x4_stride2", 2, 3, 4, {2, 1, 1}, false);
  conv_case("conv2d_pointwise", 4, 2, 1, {1, 0, 1}, true);
  cases.push_back({"group_norm_affine", [](Rng& rng, double tol, double step) {
                     T64 x = randn({2, 4, 3, 3}, rng), g = randn({4}, rng), b = randn({4}, rng);
                     Projector P{&rng, {}};
                     return grad_check("group_norm_affine", [&] { return P(group_norm(x, 2, g, b)); },
                                       {{"x", x}, {"gamma", g}, {"beta", b}}, tol, step);
                   }});
  cases.push_back({"group_norm_plain", [](Rng& rng, double tol, double step) {
                     T64 x = randn({2, 6, 5}, rng);
                     Projector P{&rng, {}};
                     return grad_check("group_norm_plain", [&] { return P(group_norm(x, 3, T64(), T64())); },
                                       {{"x", x}}, tol, step);
                   }});
  cases.push_back({"masked_average_pool", [](Rng& rng, double tol, double step) {
                     T64 f = randn({2, 6, 3, 4}, rng);
                     const T64 m = random_masks(2, 3, 3, 4, rng);
                     Projector P{&rng, {}};
                     return grad_check("masked_average_pool", [&] { return P(masked_average_pool(f, m)); },
                                       {{"features", f}}, tol, step);
                   }});
  cases.push_back({"bce_mean", [](Rng& rng, double tol, double step) {
                     T64 x = uniform({2, 3, 4}, 0.05, 0.95, rng);
                     const T64 t = uniform_tensor<D>({2, 3, 4}, 0.0, 1.0, rng);
                     return grad_check("bce_mean", [&] { return bce_mean(x, t); }, {{"x", x}}, tol, step);
                   }});

  // Composite blocks.
  cases.push_back({"style_encoder", [](Rng& rng, double tol, double step) {
                     EncoderConfig c;
                     c.num_classes = 2;
                     c.filters_per_group = 2;
                     c.down_layers = 3;
                     c.up_layers = 2;
                     c.code_dim = 3;
                     c.image_size = 8;
                     StyleEncoder<D> enc(c, rng);
                     T64 img = randn({1, 3, 8, 8}, rng);
                     const T64 m = random_masks(1, 2, 8, 8, rng);
                     Projector P{&rng, {}};
                     auto in = named(enc.parameters());
                     in.push_back({"image", img});
                     return grad_check("style_encoder", [&] { return P(enc.encode(img, m)); }, in, tol, step);
                   }});
  cases.push_back({"mask_embedder", [](Rng& rng, double tol, double step) {
                     MaskEmbedder<D> emb(EmbedderConfig{3, 4, 4}, rng);
                     T64 m = uniform({2, 3, 4, 4}, 0.0, 1.0, rng);
                     Projector P{&rng, {}};
                     auto in = named(emb.parameters());
                     in.push_back({"mask", m});
                     return grad_check("mask_embedder", [&] { return P(emb.embed(m).codes); }, in, tol, step);
                   }});
  cases.push_back({"self_attention", [](Rng& rng, double tol, double step) {
                     SelfAttentionBlock<D> blk(AttentionConfig{4, 2}, 64, rng);
                     ParamList<D> ps;
                     blk.collect(ps, "self");
                     randomize(ps, rng);
                     T64 x = randn({2, 4, 3, 3}, rng);
                     Projector P{&rng, {}};
                     auto in = named(ps);
                     in.push_back({"x", x});
                     return grad_check("self_attention", [&] { return P(blk(x)); }, in, tol, step);
                   }});
  cases.push_back({"cross_attention", [](Rng& rng, double tol, double step) {
                     CrossAttentionBlock<D> blk(AttentionConfig{4, 2}, 5, 3, rng);
                     ParamList<D> ps;
                     blk.collect(ps, "cross");
                     randomize(ps, rng);
                     T64 x = randn({2, 4, 3, 3}, rng), s = randn({2, 3, 5}, rng);
                     Projector P{&rng, {}};
                     auto in = named(ps);
                     in.push_back({"x", x});
                     in.push_back({"styles", s});
                     return grad_check("cross_attention",
                                       [&] {
                                         auto [y, maps] = blk(x, s);
                                         return add(P(y), P(maps));
                                       },
                                       in, tol, step);
                   }});
  cases.push_back({"spatial_transformer", [](Rng& rng, double tol, double step) {
                     SpatialTransformer<D> blk(AttentionConfig{4, 4}, 5, 2, true, 64, rng);
                     ParamList<D> ps;
                     blk.collect(ps, "st");
                     randomize(ps, rng);
                     T64 x = randn({1, 4, 2, 3}, rng), s = randn({1, 2, 5}, rng);
                     Projector P{&rng, {}};
                     auto in = named(ps);
                     in.push_back({"x", x});
                     in.push_back({"styles", s});
                     return grad_check("spatial_transformer", [&] { return P(blk(x, s).first); }, in, tol, step);
                   }});
  cases.push_back({"residual_block", [](Rng& rng, double tol, double step) {
                     ResidualBlock<D> blk(2, 4, rng);
                     ParamList<D> ps;
                     blk.collect(ps, "res");
                     randomize(ps, rng);
                     T64 x = randn({1, 2, 4, 4}, rng);
                     Projector P{&rng, {}};
                     auto in = named(ps);
                     in.push_back({"x", x});
                     return grad_check("residual_block", [&] { return P(blk(x)); }, in, tol, step);
                   }});
  cases.push_back({"class_adaptive_denorm", [](Rng& rng, double tol, double step) {
                     ClassAdaptiveDenorm<D> blk(4, 5, rng);
                     ParamList<D> ps;
                     blk.collect(ps, "denorm");
                     T64 x = randn({1, 4, 3, 3}, rng), s = randn({1, 2, 5}, rng);
                     const T64 m = random_masks(1, 2, 3, 3, rng);
                     Projector P{&rng, {}};
                     auto in = named(ps);
                     in.push_back({"x", x});
                     in.push_back({"styles", s});
                     return grad_check("class_adaptive_denorm", [&] { return P(blk(x, s, m)); }, in, tol, step);
                   }});
  cases.push_back({"mapping_network", [](Rng& rng, double tol, double step) {
                     MappingNetwork<D> net(MappingConfig{2, 3, 4, 2, 2, 5}, rng);
                     T64 z = randn({2, 3}, rng);
                     Projector P{&rng, {}};
                     auto in = named(net.parameters());
                     in.push_back({"z", z});
                     return grad_check("mapping_network", [&] { return P(net(z)); }, in, tol, step);
                   }});

  // Losses.
  const auto disc_outputs = [](Rng& rng, std::size_t scales) {
    DiscriminatorOutputs<D> o;
    for (std::size_t s = 0; s < scales; ++s) {
      ScaleOutput<D> so;
      so.features = {randn({1, 2, 3, 3}, rng), randn({1, 3, 2, 2}, rng)};
      so.score = randn({1, 1, 2, 2}, rng);
      o.push_back(so);
    }
    return o;
  };
  cases.push_back({"hinge_losses", [disc_outputs](Rng& rng, double tol, double step) {
                     auto real = disc_outputs(rng, 2), fake = disc_outputs(rng, 2);
                     for (auto* set : {&real, &fake})
                       for (auto& s : *set)
                         for (auto& v : s.score.mutable_data()) v = (v < 0 ? -1.0 : 1.0) * (0.1 + std::abs(v)) * 0.9;
                     // keep scores away from the hinge points +-1
                     for (auto* set : {&real, &fake})
                       for (auto& s : *set)
                         for (auto& v : s.score.mutable_data())
                           if (std::abs(std::abs(v) - 1.0) < 0.05) v *= 1.2;
                     std::vector<NamedInput> in;
                     for (std::size_t s = 0; s < 2; ++s) {
                       in.push_back({"real" + std::to_string(s), real[s].score});
                       in.push_back({"fake" + std::to_string(s), fake[s].score});
                     }
                     return grad_check("hinge_losses",
                                       [&] {
                                         auto [d, g] = hinge_losses(real, fake);
                                         return add(d, scale(g, 0.7));
                                       },
                                       in, tol, step);
                   }});
  cases.push_back({"feature_matching", [disc_outputs](Rng& rng, double tol, double step) {
                     auto real = disc_outputs(rng, 2), fake = disc_outputs(rng, 2);
                     std::vector<NamedInput> in;
                     for (std::size_t s = 0; s < 2; ++s)
                       for (std::size_t l = 0; l < 2; ++l) {
                         auto& fv = fake[s].features[l];
                         const auto& rv = real[s].features[l].values();
                         auto d = fv.mutable_data();
                         for (std::size_t i = 0; i < d.size(); ++i)
                           if (std::abs(d[i] - rv[i]) < 0.05) d[i] += 0.2;
                         in.push_back({"fake" + std::to_string(s) + "." + std::to_string(l), fv});
                       }
                     return grad_check("feature_matching", [&] { return feature_matching_loss(real, fake); }, in, tol,
                                       step);
                   }});
  cases.push_back({"perceptual_loss", [](Rng& rng, double tol, double step) {
                     FrozenFeatures<D> net(11);
                     T64 a = randn({1, 3, 8, 8}, rng, 0.5), b = randn({1, 3, 8, 8}, rng, 0.5);
                     return grad_check("perceptual_loss", [&] { return perceptual_loss(net, a, b); }, {{"a", a}, {"b", b}},
                                       tol, step);
                   }});
  cases.push_back({"attention_loss", [](Rng& rng, double tol, double step) {
                     T64 m1 = uniform({1, 2, 3, 2, 2}, 0.05, 0.95, rng);
                     T64 m2 = uniform({1, 1, 3, 4, 4}, 0.05, 0.95, rng);
                     const T64 masks = random_masks(1, 3, 8, 8, rng);
                     return grad_check("attention_loss", [&] { return attention_loss<D>({m1, m2}, masks); },
                                       {{"maps0", m1}, {"maps1", m2}}, tol, step);
                   }});
  cases.push_back({"diversity_loss", [](Rng& rng, double tol, double step) {
                     T64 a = randn({1, 3, 4, 4}, rng), b = randn({1, 3, 4, 4}, rng);
                     for (std::size_t i = 0; i < a.numel(); ++i)
                       if (std::abs(a.values()[i] - b.values()[i]) < 0.05) a.mutable_data()[i] += 0.2;
                     return grad_check("diversity_loss", [&] { return diversity_loss(a, b); }, {{"a", a}, {"b", b}}, tol,
                                       step);
                   }});
  return cases;
}

/// Runs every case with its own deterministic generator.
inline std::vector<GradCheckReport> run_gradient_suite(std::uint64_t seed = 2024, double tol = 1e-4,
                                                       double step = 1e-4) {
  std::vector<GradCheckReport> out;
  std::uint64_t k = 0;
  for (const auto& c : gradient_cases()) {
    Rng rng(seed * 1000003ULL + k++);
    out.push_back(c.run(rng, tol, step));
  }
  return out;
}

}  // namespace casis
