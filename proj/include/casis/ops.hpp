#pragma once

// Differentiable primitives. Every op validates shapes eagerly and records a
// backward closure through detail::make_result.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "casis/errors.hpp"
#include "casis/gemm.hpp"
#include "casis/tensor.hpp"

namespace casis {

namespace detail {

inline std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r)
    throw DimensionError("axis " + std::to_string(axis) + " invalid for rank " +
                         std::to_string(rank));
  return static_cast<std::size_t>(a);
}

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& a, const char* name, F f, DF df) {
  const auto& x = a.values();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  auto an = a.node();
  return make_result<T>(a.shape(), std::move(y), {&a}, name, [an, df](Node<T>& self) {
    T* g = an->grad_ptr();
    const T* gy = self.grad.data();
    for (std::size_t i = 0; i < self.data.size(); ++i)
      g[i] += gy[i] * df(an->data[i], self.data[i]);
  });
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b) +
                           " on axis " + std::to_string(i));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `s` laid against broadcast shape `out`, zero on broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  const auto st = strides_of(s);
  std::vector<std::size_t> r(out.size(), 0);
  const std::size_t off = out.size() - s.size();
  for (std::size_t i = 0; i < s.size(); ++i) r[i + off] = s[i] == 1 ? 0 : st[i];
  return r;
}

template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F f) {
  const std::size_t n = numel_of(out);
  const std::size_t r = out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * idx[d];
      ib -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <class T, class F, class DA, class DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, F f, DA da, DB db) {
  if (a.shape() == b.shape()) {
    const auto& x = a.values();
    const auto& y = b.values();
    std::vector<T> z(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = f(x[i], y[i]);
    auto an = a.node();
    auto bn = b.node();
    return make_result<T>(a.shape(), std::move(z), {&a, &b}, name, [an, bn, da, db](Node<T>& self) {
      const T* gz = self.grad.data();
      const std::size_t n = self.data.size();
      if (an->requires_grad) {
        T* g = an->grad_ptr();
        for (std::size_t i = 0; i < n; ++i) g[i] += gz[i] * da(an->data[i], bn->data[i]);
      }
      if (bn->requires_grad) {
        T* g = bn->grad_ptr();
        for (std::size_t i = 0; i < n; ++i) g[i] += gz[i] * db(an->data[i], bn->data[i]);
      }
    });
  }
  Shape out = broadcast_shape(a.shape(), b.shape());
  auto sa = broadcast_strides(a.shape(), out);
  auto sb = broadcast_strides(b.shape(), out);
  std::vector<T> z(numel_of(out));
  const auto& x = a.values();
  const auto& y = b.values();
  for_each_broadcast(out, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    z[i] = f(x[ia], y[ib]);
  });
  auto an = a.node();
  auto bn = b.node();
  Shape out_copy = out;
  return make_result<T>(std::move(out), std::move(z), {&a, &b}, name,
                        [an, bn, da, db, out_copy, sa, sb](Node<T>& self) {
                          const T* gz = self.grad.data();
                          T* ga = an->requires_grad ? an->grad_ptr() : nullptr;
                          T* gb = bn->requires_grad ? bn->grad_ptr() : nullptr;
                          for_each_broadcast(out_copy, sa, sb,
                                             [&](std::size_t i, std::size_t ia, std::size_t ib) {
                                               const T xa = an->data[ia], xb = bn->data[ib];
                                               if (ga) ga[ia] += gz[i] * da(xa, xb);
                                               if (gb) gb[ib] += gz[i] * db(xa, xb);
                                             });
                        });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(
      a, "relu", [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope = T(0.2)) {
  return detail::unary(
      a, "leaky_relu", [slope](T x) { return x > T(0) ? x : slope * x; },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      a, "sigmoid", [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary(
      a, "tanh", [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  return detail::unary(
      a, "abs", [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary(a, "neg", [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary(a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary(a, "scale", [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return detail::unary(a, "add_scalar", [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.values()) s += v;
  auto an = a.node();
  return detail::make_result<T>(Shape{}, {s}, {&a}, "sum", [an](Node<T>& self) {
    T* g = an->grad_ptr();
    const T gy = self.grad[0];
    for (std::size_t i = 0; i < an->data.size(); ++i) g[i] += gy;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  const T inv = T(1) / static_cast<T>(a.numel());
  return scale(sum(a), inv);
}

/// Sum over one axis.
template <class T>
Tensor<T> sum(const Tensor<T>& a, int axis, bool keepdim = false) {
  const std::size_t ax = detail::norm_axis(axis, a.rank());
  const Shape& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[ax];
  std::vector<T> y(outer * inner, T(0));
  const auto& x = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] += x[(o * len + l) * inner + i];
  Shape out = s;
  if (keepdim)
    out[ax] = 1;
  else
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(ax));
  auto an = a.node();
  return detail::make_result<T>(std::move(out), std::move(y), {&a}, "sum_axis",
                                [an, outer, inner, len](Node<T>& self) {
                                  T* g = an->grad_ptr();
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t l = 0; l < len; ++l)
                                      for (std::size_t i = 0; i < inner; ++i)
                                        g[(o * len + l) * inner + i] += self.grad[o * inner + i];
                                });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a, int axis, bool keepdim = false) {
  const std::size_t ax = detail::norm_axis(axis, a.rank());
  return scale(sum(a, axis, keepdim), T(1) / static_cast<T>(a.shape()[ax]));
}

/// mean(|a - b|)
template <class T>
Tensor<T> l1_mean(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("l1_mean: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return mean(abs(sub(a, b)));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
  auto an = a.node();
  return detail::make_result<T>(std::move(shape), a.values(), {&a}, "reshape", [an](Node<T>& self) {
    T* g = an->grad_ptr();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

/// Axis permutation: output axis i is input axis perm[i].
template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const Shape& s = a.shape();
  if (perm.size() != s.size()) throw DimensionError("permute: rank mismatch");
  std::vector<bool> used(s.size(), false);
  for (auto p : perm) {
    if (p >= s.size() || used[p]) throw DimensionError("permute: invalid axis order");
    used[p] = true;
  }
  Shape out(s.size());
  const auto in_st = detail::strides_of(s);
  std::vector<std::size_t> st(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    out[i] = s[perm[i]];
    st[i] = in_st[perm[i]];
  }
  std::vector<std::size_t> zero(s.size(), 0);
  std::vector<T> y(a.numel());
  const auto& x = a.values();
  detail::for_each_broadcast(out, st, zero,
                             [&](std::size_t i, std::size_t ia, std::size_t) { y[i] = x[ia]; });
  auto an = a.node();
  Shape out_copy = out;
  return detail::make_result<T>(std::move(out), std::move(y), {&a}, "permute",
                                [an, out_copy, st, zero](Node<T>& self) {
                                  T* g = an->grad_ptr();
                                  detail::for_each_broadcast(
                                      out_copy, st, zero,
                                      [&](std::size_t i, std::size_t ia, std::size_t) {
                                        g[ia] += self.grad[i];
                                      });
                                });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a, int i, int j) {
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[detail::norm_axis(i, a.rank())], perm[detail::norm_axis(j, a.rank())]);
  return permute(a, perm);
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const std::size_t ax = detail::norm_axis(axis, s0.size());
  std::size_t outer = 1, inner = 1, total = 0;
  for (std::size_t i = 0; i < ax; ++i) outer *= s0[i];
  for (std::size_t i = ax + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != ax && s[i] != s0[i])
        throw DimensionError("concat: size mismatch on axis " + std::to_string(i));
    lens.push_back(s[ax]);
    total += s[ax];
  }
  Shape out = s0;
  out[ax] = total;
  std::vector<T> y(numel_of(out));
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& x = parts[k].values();
    const std::size_t blk = lens[k] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * blk), blk,
                  y.begin() + static_cast<std::ptrdiff_t>(o * total * inner + off));
    off += blk;
  }
  std::vector<typename Tensor<T>::NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result_n<T>(
      std::move(out), std::move(y), parts, "concat",
      [nodes, lens, outer, inner, total](Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          const std::size_t blk = lens[k] * inner;
          if (nodes[k]->requires_grad) {
            T* g = nodes[k]->grad_ptr();
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t i = 0; i < blk; ++i) g[o * blk + i] += self.grad[o * total * inner + off + i];
          }
          off += blk;
        }
      });
}

/// Contiguous range [start, start+length) along one axis.
template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t start, std::size_t length) {
  const Shape& s = a.shape();
  const std::size_t ax = detail::norm_axis(axis, s.size());
  if (start + length > s[ax])
    throw DimensionError("slice exceeds axis " + std::to_string(ax) + " of " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[ax];
  Shape out = s;
  out[ax] = length;
  std::vector<T> y(numel_of(out));
  const auto& x = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((o * len + start) * inner), length * inner,
                y.begin() + static_cast<std::ptrdiff_t>(o * length * inner));
  auto an = a.node();
  return detail::make_result<T>(std::move(out), std::move(y), {&a}, "slice",
                                [an, outer, inner, len, start, length](Node<T>& self) {
                                  T* g = an->grad_ptr();
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t i = 0; i < length * inner; ++i)
                                      g[(o * len + start) * inner + i] += self.grad[o * length * inner + i];
                                });
}

// ---------------------------------------------------------------------------
// Spatial resampling on [N,C,H,W]

namespace detail {
inline void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4)
    throw DimensionError(std::string(op) + ": expected [N,C,H,W], got " + shape_str(s));
}
}  // namespace detail

template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& a) {
  detail::require_rank4(a.shape(), "upsample_nearest2x");
  const auto& s = a.shape();
  const std::size_t planes = s[0] * s[1], H = s[2], W = s[3];
  std::vector<T> y(planes * 4 * H * W);
  const auto& x = a.values();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < 2 * H; ++i)
      for (std::size_t j = 0; j < 2 * W; ++j)
        y[(p * 2 * H + i) * 2 * W + j] = x[(p * H + i / 2) * W + j / 2];
  auto an = a.node();
  return detail::make_result<T>(Shape{s[0], s[1], 2 * H, 2 * W}, std::move(y), {&a}, "upsample2x",
                                [an, planes, H, W](Node<T>& self) {
                                  T* g = an->grad_ptr();
                                  for (std::size_t p = 0; p < planes; ++p)
                                    for (std::size_t i = 0; i < 2 * H; ++i)
                                      for (std::size_t j = 0; j < 2 * W; ++j)
                                        g[(p * H + i / 2) * W + j / 2] +=
                                            self.grad[(p * 2 * H + i) * 2 * W + j];
                                });
}

/// 2x2 mean pooling with stride 2; H and W must be even.
template <class T>
Tensor<T> avg_pool2x(const Tensor<T>& a) {
  detail::require_rank4(a.shape(), "avg_pool2x");
  const auto& s = a.shape();
  if (s[2] % 2 || s[3] % 2) throw DimensionError("avg_pool2x: H and W must be even");
  const std::size_t planes = s[0] * s[1], H = s[2] / 2, W = s[3] / 2;
  std::vector<T> y(planes * H * W);
  const auto& x = a.values();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const std::size_t b = (p * 2 * H + 2 * i) * 2 * W + 2 * j;
        y[(p * H + i) * W + j] = T(0.25) * (x[b] + x[b + 1] + x[b + 2 * W] + x[b + 2 * W + 1]);
      }
  auto an = a.node();
  return detail::make_result<T>(Shape{s[0], s[1], H, W}, std::move(y), {&a}, "avg_pool2x",
                                [an, planes, H, W](Node<T>& self) {
                                  T* g = an->grad_ptr();
                                  for (std::size_t p = 0; p < planes; ++p)
                                    for (std::size_t i = 0; i < H; ++i)
                                      for (std::size_t j = 0; j < W; ++j) {
                                        const T v = T(0.25) * self.grad[(p * H + i) * W + j];
                                        const std::size_t b = (p * 2 * H + 2 * i) * 2 * W + 2 * j;
                                        g[b] += v;
                                        g[b + 1] += v;
                                        g[b + 2 * W] += v;
                                        g[b + 2 * W + 1] += v;
                                      }
                                });
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

namespace detail {

struct ConvGeom {
  std::size_t N, Cin, H, W, Cout, kh, kw, stride, pad, groups, Ho, Wo, cin_g, cout_g;
  std::size_t col_rows() const { return cin_g * kh * kw; }
  std::size_t col_cols() const { return Ho * Wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

/// Output columns [lo, hi) whose input column oj*stride + k - pad lies inside [0, W).
inline std::pair<std::size_t, std::size_t> valid_cols(const ConvGeom& g, std::size_t k, std::size_t W,
                                                      std::size_t Wo) {
  const long s = static_cast<long>(g.stride), off = static_cast<long>(k) - static_cast<long>(g.pad);
  long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long hi = (static_cast<long>(W) - 1 - off) >= 0 ? (static_cast<long>(W) - 1 - off) / s + 1 : 0;
  lo = std::min<long>(lo, static_cast<long>(Wo));
  hi = std::clamp<long>(hi, lo, static_cast<long>(Wo));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

/// Reusable per-thread buffer; contents are unspecified on return.
template <class T, int Slot>
T* scratch(std::size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t hw = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.cin_g; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * hw;
        const T* plane = x + c * g.H * g.W;
        const auto [lo, hi] = valid_cols(g, kj, g.W, g.Wo);
        const long joff = static_cast<long>(kj) - static_cast<long>(g.pad);
        for (std::size_t oi = 0; oi < g.Ho; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
          T* dst = row + oi * g.Wo;
          if (ii < 0 || ii >= static_cast<long>(g.H)) {
            std::fill_n(dst, g.Wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ii) * g.W;
          std::fill_n(dst, lo, T(0));
          if (g.stride == 1) {
            std::copy_n(src + static_cast<long>(lo) + joff, hi - lo, dst + lo);
          } else {
            for (std::size_t oj = lo; oj < hi; ++oj) dst[oj] = src[static_cast<long>(oj * g.stride) + joff];
          }
          std::fill_n(dst + hi, g.Wo - hi, T(0));
        }
      }
}

template <class T>
void col2im(const T* cols, const ConvGeom& g, T* dx) {
  const std::size_t hw = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.cin_g; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * hw;
        T* plane = dx + c * g.H * g.W;
        const auto [lo, hi] = valid_cols(g, kj, g.W, g.Wo);
        const long joff = static_cast<long>(kj) - static_cast<long>(g.pad);
        for (std::size_t oi = 0; oi < g.Ho; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
          if (ii < 0 || ii >= static_cast<long>(g.H)) continue;
          T* dst = plane + static_cast<std::size_t>(ii) * g.W;
          const T* src = row + oi * g.Wo;
          if (g.stride == 1) {
            T* d = dst + static_cast<long>(lo) + joff;
            for (std::size_t oj = lo; oj < hi; ++oj) d[oj - lo] += src[oj];
          } else {
            for (std::size_t oj = lo; oj < hi; ++oj) dst[static_cast<long>(oj * g.stride) + joff] += src[oj];
          }
        }
      }
}

}  // namespace detail

/// Grouped 2-D cross-correlation. input [N,Cin,H,W], weight [Cout,Cin/groups,kh,kw],
/// bias [Cout] or undefined. Output group g reads only input group g.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dParams p = {}) {
  detail::require_rank4(input.shape(), "conv2d input");
  if (weight.rank() != 4)
    throw DimensionError("conv2d: weight must be [Cout,Cin/groups,kh,kw], got " +
                         shape_str(weight.shape()));
  if (p.groups == 0 || p.stride == 0) throw ConfigError("conv2d: groups and stride must be positive");
  const auto& xs = input.shape();
  const auto& ws = weight.shape();
  detail::ConvGeom g{};
  g.N = xs[0];
  g.Cin = xs[1];
  g.H = xs[2];
  g.W = xs[3];
  g.Cout = ws[0];
  g.kh = ws[2];
  g.kw = ws[3];
  g.stride = p.stride;
  g.pad = p.padding;
  g.groups = p.groups;
  if (g.Cin % g.groups)
    throw DimensionError("conv2d: input channel axis (1) size " + std::to_string(g.Cin) +
                         " not divisible by groups " + std::to_string(g.groups));
  if (g.Cout % g.groups)
    throw DimensionError("conv2d: weight output-channel axis (0) size " + std::to_string(g.Cout) +
                         " not divisible by groups " + std::to_string(g.groups));
  g.cin_g = g.Cin / g.groups;
  g.cout_g = g.Cout / g.groups;
  if (ws[1] != g.cin_g)
    throw DimensionError("conv2d: weight input-channel axis (1) is " + std::to_string(ws[1]) +
                         ", expected Cin/groups = " + std::to_string(g.cin_g));
  if (g.H + 2 * g.pad < g.kh || g.W + 2 * g.pad < g.kw)
    throw DimensionError("conv2d: kernel larger than padded input on spatial axes (2,3)");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.Cout))
    throw DimensionError("conv2d: bias axis 0 must equal Cout = " + std::to_string(g.Cout));
  g.Ho = (g.H + 2 * g.pad - g.kh) / g.stride + 1;
  g.Wo = (g.W + 2 * g.pad - g.kw) / g.stride + 1;

  const std::size_t hw = g.col_cols();
  const std::size_t krows = g.col_rows();
  std::vector<T> out(g.N * g.Cout * hw);
  T* cols = g.pointwise() ? nullptr : detail::scratch<T, 0>(krows * hw);
  const T* x = input.values().data();
  const T* w = weight.values().data();
  for (std::size_t n = 0; n < g.N; ++n)
    for (std::size_t gi = 0; gi < g.groups; ++gi) {
      const T* xg = x + (n * g.Cin + gi * g.cin_g) * g.H * g.W;
      const T* src = xg;
      if (!g.pointwise()) {
        detail::im2col(xg, g, cols);
        src = cols;
      }
      detail::gemm<T>(false, false, g.cout_g, hw, krows, T(1), w + gi * g.cout_g * krows, src, T(0),
                      out.data() + (n * g.Cout + gi * g.cout_g) * hw);
    }
  if (bias.defined()) {
    const auto& b = bias.values();
    for (std::size_t n = 0; n < g.N; ++n)
      for (std::size_t c = 0; c < g.Cout; ++c) {
        T* o = out.data() + (n * g.Cout + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) o[i] += b[c];
      }
  }

  auto xn = input.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result<T>(
      Shape{g.N, g.Cout, g.Ho, g.Wo}, std::move(out), {&input, &weight, &bias}, "conv2d",
      [xn, wn, bn, g](Node<T>& self) {
        const std::size_t hw = g.col_cols();
        const std::size_t krows = g.col_rows();
        const T* gy = self.grad.data();
        if (bn && bn->requires_grad) {
          T* gb = bn->grad_ptr();
          for (std::size_t n = 0; n < g.N; ++n)
            for (std::size_t c = 0; c < g.Cout; ++c) {
              const T* o = gy + (n * g.Cout + c) * hw;
              T acc = 0;
              for (std::size_t i = 0; i < hw; ++i) acc += o[i];
              gb[c] += acc;
            }
        }
        const bool need_w = wn->requires_grad;
        const bool need_x = xn->requires_grad;
        T* cols = g.pointwise() ? nullptr : detail::scratch<T, 0>(krows * hw);
        T* dcols = need_x && !g.pointwise() ? detail::scratch<T, 1>(krows * hw) : nullptr;
        T* gw = need_w ? wn->grad_ptr() : nullptr;
        T* gx = need_x ? xn->grad_ptr() : nullptr;
        for (std::size_t n = 0; n < g.N; ++n)
          for (std::size_t gi = 0; gi < g.groups; ++gi) {
            const T* dy = gy + (n * g.Cout + gi * g.cout_g) * hw;
            const std::size_t xoff = (n * g.Cin + gi * g.cin_g) * g.H * g.W;
            if (need_w) {
              const T* src = xn->data.data() + xoff;
              if (!g.pointwise()) {
                detail::im2col(src, g, cols);
                src = cols;
              }
              detail::gemm<T>(false, true, g.cout_g, krows, hw, T(1), dy, src, T(1),
                              gw + gi * g.cout_g * krows);
            }
            if (need_x) {
              const T* wg = wn->data.data() + gi * g.cout_g * krows;
              if (g.pointwise()) {
                detail::gemm<T>(true, false, krows, hw, g.cout_g, T(1), wg, dy, T(1), gx + xoff);
              } else {
                detail::gemm<T>(true, false, krows, hw, g.cout_g, T(1), wg, dy, T(0), dcols);
                detail::col2im(dcols, g, gx + xoff);
              }
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-(sample, group) standardization over (C/groups, H, W), then per-channel
/// affine when gamma/beta are defined. Works for any rank >= 2 laid out [N,C,...].
template <class T>
Tensor<T> group_norm(const Tensor<T>& input, std::size_t num_groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  const auto& s = input.shape();
  if (s.size() < 2) throw DimensionError("group_norm: expected [N,C,...], got " + shape_str(s));
  if (!(eps > T(0))) throw ConfigError("group_norm: eps must be positive");
  const std::size_t N = s[0], C = s[1];
  if (num_groups == 0 || C % num_groups)
    throw ConfigError("group_norm: channel count " + std::to_string(C) +
                      " not divisible by num_groups " + std::to_string(num_groups));
  if (gamma.defined() && (gamma.rank() != 1 || gamma.dim(0) != C))
    throw DimensionError("group_norm: gamma axis 0 must equal channel count");
  if (beta.defined() && (beta.rank() != 1 || beta.dim(0) != C))
    throw DimensionError("group_norm: beta axis 0 must equal channel count");
  std::size_t spatial = 1;
  for (std::size_t i = 2; i < s.size(); ++i) spatial *= s[i];
  const std::size_t cg = C / num_groups;
  const std::size_t cnt = cg * spatial;

  const auto& x = input.values();
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(N * num_groups);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t gi = 0; gi < num_groups; ++gi) {
      const std::size_t base = (n * C + gi * cg) * spatial;
      T m = 0;
      for (std::size_t i = 0; i < cnt; ++i) m += x[base + i];
      m /= static_cast<T>(cnt);
      T v = 0;
      for (std::size_t i = 0; i < cnt; ++i) {
        const T d = x[base + i] - m;
        v += d * d;
      }
      v /= static_cast<T>(cnt);
      const T is = T(1) / std::sqrt(v + eps);
      inv_std[n * num_groups + gi] = is;
      for (std::size_t i = 0; i < cnt; ++i) xhat[base + i] = (x[base + i] - m) * is;
    }
  std::vector<T> y(xhat);
  if (gamma.defined() || beta.defined()) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const T ga = gamma.defined() ? gamma.values()[c] : T(1);
        const T be = beta.defined() ? beta.values()[c] : T(0);
        T* row = y.data() + (n * C + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) row[i] = row[i] * ga + be;
      }
  }
  auto xn = input.node();
  auto gn = gamma.defined() ? gamma.node() : nullptr;
  auto bn = beta.defined() ? beta.node() : nullptr;
  return detail::make_result<T>(
      s, std::move(y), {&input, &gamma, &beta}, "group_norm",
      [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), N, C, spatial, cg,
       num_groups, cnt](Node<T>& self) {
        const T* gy = self.grad.data();
        if (gn && gn->requires_grad) {
          T* g = gn->grad_ptr();
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t b = (n * C + c) * spatial;
              T acc = 0;
              for (std::size_t i = 0; i < spatial; ++i) acc += gy[b + i] * xhat[b + i];
              g[c] += acc;
            }
        }
        if (bn && bn->requires_grad) {
          T* g = bn->grad_ptr();
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t b = (n * C + c) * spatial;
              T acc = 0;
              for (std::size_t i = 0; i < spatial; ++i) acc += gy[b + i];
              g[c] += acc;
            }
        }
        if (!xn->requires_grad) return;
        T* gx = xn->grad_ptr();
        std::vector<T> dxhat(cnt);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t gi = 0; gi < num_groups; ++gi) {
            const std::size_t base = (n * C + gi * cg) * spatial;
            T s1 = 0, s2 = 0;
            for (std::size_t i = 0; i < cnt; ++i) {
              const std::size_t c = gi * cg + i / spatial;
              const T ga = gn ? gn->data[c] : T(1);
              dxhat[i] = gy[base + i] * ga;
              s1 += dxhat[i];
              s2 += dxhat[i] * xhat[base + i];
            }
            s1 /= static_cast<T>(cnt);
            s2 /= static_cast<T>(cnt);
            const T is = inv_std[n * num_groups + gi];
            for (std::size_t i = 0; i < cnt; ++i)
              gx[base + i] += is * (dxhat[i] - s1 - xhat[base + i] * s2);
          }
      });
}

// ---------------------------------------------------------------------------
// Softmax, linear maps, batched matmul

/// Max-subtracted softmax along `axis`. Loops keep the `inner` stride contiguous.
template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  const std::size_t ax = detail::norm_axis(axis, a.rank());
  const Shape& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[ax];
  const T* x = a.values().data();
  std::vector<T> y(a.numel());
  std::vector<T> mx(inner), z(inner);
  for (std::size_t o = 0; o < outer; ++o) {
    const T* xo = x + o * len * inner;
    T* yo = y.data() + o * len * inner;
    std::fill(mx.begin(), mx.end(), -std::numeric_limits<T>::infinity());
    std::fill(z.begin(), z.end(), T(0));
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) mx[i] = std::max(mx[i], xo[l * inner + i]);
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) {
        const T e = std::exp(xo[l * inner + i] - mx[i]);
        yo[l * inner + i] = e;
        z[i] += e;
      }
    for (std::size_t i = 0; i < inner; ++i) z[i] = T(1) / z[i];
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) yo[l * inner + i] *= z[i];
  }
  auto an = a.node();
  return detail::make_result<T>(s, std::move(y), {&a}, "softmax",
                                [an, outer, inner, len](Node<T>& self) {
                                  T* g = an->grad_ptr();
                                  std::vector<T> dot(inner);
                                  for (std::size_t o = 0; o < outer; ++o) {
                                    const std::size_t b = o * len * inner;
                                    const T* gy = self.grad.data() + b;
                                    const T* y = self.data.data() + b;
                                    T* go = g + b;
                                    std::fill(dot.begin(), dot.end(), T(0));
                                    for (std::size_t l = 0; l < len; ++l)
                                      for (std::size_t i = 0; i < inner; ++i) dot[i] += gy[l * inner + i] * y[l * inner + i];
                                    for (std::size_t l = 0; l < len; ++l)
                                      for (std::size_t i = 0; i < inner; ++i)
                                        go[l * inner + i] += y[l * inner + i] * (gy[l * inner + i] - dot[i]);
                                  }
                                });
}

/// y = x W^T + b over the trailing axis. x [..,Din], W [Dout,Din], b [Dout] or undefined.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() < 1) throw DimensionError("linear: input must have rank >= 1");
  if (w.rank() != 2) throw DimensionError("linear: weight must be [Dout,Din]");
  const std::size_t din = x.dim(-1);
  if (w.dim(1) != din)
    throw DimensionError("linear: input trailing axis is " + std::to_string(din) +
                         " but weight axis 1 is " + std::to_string(w.dim(1)));
  const std::size_t dout = w.dim(0);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != dout))
    throw DimensionError("linear: bias axis 0 must equal Dout = " + std::to_string(dout));
  const std::size_t rows = x.numel() / din;
  std::vector<T> y(rows * dout);
  detail::gemm<T>(false, true, rows, dout, din, T(1), x.values().data(), w.values().data(), T(0),
                  y.data());
  if (b.defined())
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < dout; ++o) y[r * dout + o] += b.values()[o];
  Shape out = x.shape();
  out.back() = dout;
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.defined() ? b.node() : nullptr;
  return detail::make_result<T>(
      std::move(out), std::move(y), {&x, &w, &b}, "linear", [xn, wn, bn, rows, din, dout](Node<T>& self) {
        const T* gy = self.grad.data();
        if (xn->requires_grad)
          detail::gemm<T>(false, false, rows, din, dout, T(1), gy, wn->data.data(), T(1), xn->grad_ptr());
        if (wn->requires_grad)
          detail::gemm<T>(true, false, dout, din, rows, T(1), gy, xn->data.data(), T(1), wn->grad_ptr());
        if (bn && bn->requires_grad) {
          T* gb = bn->grad_ptr();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < dout; ++o) gb[o] += gy[r * dout + o];
        }
      });
}

/// Batched matmul over the leading axis: a [B,M,K] (or [B,K,M] when trans_a),
/// b [B,K,N] (or [B,N,K] when trans_b) -> [B,M,N].
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3) throw DimensionError("bmm: operands must be rank 3");
  if (a.dim(0) != b.dim(0)) throw DimensionError("bmm: batch axis (0) mismatch");
  const std::size_t B = a.dim(0);
  const std::size_t M = trans_a ? a.dim(2) : a.dim(1);
  const std::size_t K = trans_a ? a.dim(1) : a.dim(2);
  const std::size_t Kb = trans_b ? b.dim(2) : b.dim(1);
  const std::size_t N = trans_b ? b.dim(1) : b.dim(2);
  if (K != Kb)
    throw DimensionError("bmm: contraction axis mismatch (" + std::to_string(K) + " vs " +
                         std::to_string(Kb) + ")");
  std::vector<T> y(B * M * N);
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  for (std::size_t i = 0; i < B; ++i)
    detail::gemm<T>(trans_a, trans_b, M, N, K, T(1), pa + i * M * K, pb + i * K * N, T(0),
                    y.data() + i * M * N);
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>(
      Shape{B, M, N}, std::move(y), {&a, &b}, "bmm", [an, bn, B, M, N, K, trans_a, trans_b](Node<T>& self) {
        const T* gc = self.grad.data();
        for (std::size_t i = 0; i < B; ++i) {
          const T* dC = gc + i * M * N;
          const T* A = an->data.data() + i * M * K;
          const T* Bm = bn->data.data() + i * K * N;
          if (an->requires_grad) {
            T* dA = an->grad_ptr() + i * M * K;
            if (!trans_a)
              detail::gemm<T>(false, !trans_b, M, K, N, T(1), dC, Bm, T(1), dA);
            else
              detail::gemm<T>(trans_b, true, K, M, N, T(1), Bm, dC, T(1), dA);
          }
          if (bn->requires_grad) {
            T* dB = bn->grad_ptr() + i * K * N;
            if (!trans_b)
              detail::gemm<T>(!trans_a, false, K, N, M, T(1), A, dC, T(1), dB);
            else
              detail::gemm<T>(true, trans_a, N, K, M, T(1), dC, A, T(1), dB);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling and losses specific to the architecture

/// Per-group masked spatial mean. features [N, G*f, H, W], mask [N, G, H, W] (binary,
/// treated as data) -> [N, G, f]. Channel block g is pooled under mask channel g; an
/// empty mask channel yields zeros.
template <class T>
Tensor<T> masked_average_pool(const Tensor<T>& features, const Tensor<T>& mask) {
  detail::require_rank4(features.shape(), "masked_average_pool features");
  detail::require_rank4(mask.shape(), "masked_average_pool mask");
  const auto& fs = features.shape();
  const auto& ms = mask.shape();
  if (fs[0] != ms[0]) throw DimensionError("masked_average_pool: batch axis (0) mismatch");
  if (fs[2] != ms[2]) throw DimensionError("masked_average_pool: height axis (2) mismatch");
  if (fs[3] != ms[3]) throw DimensionError("masked_average_pool: width axis (3) mismatch");
  const std::size_t N = fs[0], G = ms[1], hw = fs[2] * fs[3];
  if (G == 0 || fs[1] % G)
    throw DimensionError("masked_average_pool: channel axis (1) not divisible by mask channels");
  const std::size_t f = fs[1] / G;
  const auto& x = features.values();
  const auto& m = mask.values();
  std::vector<T> inv_count(N * G, T(0));
  std::vector<T> y(N * G * f, T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t g = 0; g < G; ++g) {
      const T* mp = m.data() + (n * G + g) * hw;
      T cnt = 0;
      for (std::size_t i = 0; i < hw; ++i) cnt += mp[i];
      if (cnt <= T(0)) continue;
      const T inv = T(1) / cnt;
      inv_count[n * G + g] = inv;
      for (std::size_t k = 0; k < f; ++k) {
        const T* xp = x.data() + ((n * G + g) * f + k) * hw;
        T acc = 0;
        for (std::size_t i = 0; i < hw; ++i) acc += xp[i] * mp[i];
        y[(n * G + g) * f + k] = acc * inv;
      }
    }
  auto xn = features.node();
  auto mv = mask.node();
  return detail::make_result<T>(Shape{N, G, f}, std::move(y), {&features}, "masked_average_pool",
                                [xn, mv, inv_count = std::move(inv_count), N, G, f, hw](Node<T>& self) {
                                  T* gx = xn->grad_ptr();
                                  for (std::size_t n = 0; n < N; ++n)
                                    for (std::size_t g = 0; g < G; ++g) {
                                      const T inv = inv_count[n * G + g];
                                      if (inv == T(0)) continue;
                                      const T* mp = mv->data.data() + (n * G + g) * hw;
                                      for (std::size_t k = 0; k < f; ++k) {
                                        const T gy = self.grad[(n * G + g) * f + k] * inv;
                                        T* gp = gx + ((n * G + g) * f + k) * hw;
                                        for (std::size_t i = 0; i < hw; ++i) gp[i] += gy * mp[i];
                                      }
                                    }
                                });
}

/// Mean binary cross-entropy, -[y log x + (1-y) log(1-x)], with x clamped to
/// [eps, 1-eps]. Target is data. Clamped entries pass no gradient.
template <class T>
Tensor<T> bce_mean(const Tensor<T>& x, const Tensor<T>& target, T eps = T(1e-7)) {
  if (x.shape() != target.shape())
    throw DimensionError("bce_mean: prediction " + shape_str(x.shape()) + " vs target " +
                         shape_str(target.shape()));
  const auto& p = x.values();
  const auto& y = target.values();
  T acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T c = std::clamp(p[i], eps, T(1) - eps);
    acc -= y[i] * std::log(c) + (T(1) - y[i]) * std::log(T(1) - c);
  }
  const T inv_n = T(1) / static_cast<T>(p.size());
  auto xn = x.node();
  auto tn = target.node();
  return detail::make_result<T>(Shape{}, {acc * inv_n}, {&x}, "bce_mean",
                                [xn, tn, eps, inv_n](Node<T>& self) {
                                  T* g = xn->grad_ptr();
                                  const T gy = self.grad[0] * inv_n;
                                  for (std::size_t i = 0; i < xn->data.size(); ++i) {
                                    const T v = xn->data[i];
                                    if (v < eps || v > T(1) - eps) continue;
                                    const T t = tn->data[i];
                                    g[i] += gy * (-t / v + (T(1) - t) / (T(1) - v));
                                  }
                                });
}

}  // namespace casis
