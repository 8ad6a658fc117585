#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <vector>

#include "casis/attention.hpp"
#include "casis/mask.hpp"

namespace casis {

/// Per-class IoU between (map averaged over heads > threshold) and the mask
/// channel. maps [h,C,H,W] for one sample; the mask is resized to H x W.
/// A class whose prediction and mask are both empty yields NaN.
template <class T>
std::vector<double> attention_iou(const Tensor<T>& maps, const SemanticMask& mask, double threshold) {
  if (maps.rank() != 4) throw DimensionError("attention_iou: maps must be [h,C,H,W], got " + shape_str(maps.shape()));
  const std::size_t h = maps.dim(0), C = maps.dim(1), H = maps.dim(2), W = maps.dim(3);
  if (mask.num_classes() != C)
    throw ConfigError("attention_iou: maps have " + std::to_string(C) + " classes, mask has " +
                      std::to_string(mask.num_classes()));
  const SemanticMask m = resize_mask(mask, H, W);
  const auto& v = maps.values();
  std::vector<double> out(C);
  for (std::size_t c = 0; c < C; ++c) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t p = 0; p < H * W; ++p) {
      double avg = 0;
      for (std::size_t k = 0; k < h; ++k) avg += static_cast<double>(v[(k * C + c) * H * W + p]);
      const bool pred = avg / static_cast<double>(h) > threshold;
      const bool gt = m.labels()[p] == c;
      inter += pred && gt;
      uni += pred || gt;
    }
    out[c] = uni ? static_cast<double>(inter) / static_cast<double>(uni) : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

/// Mean over samples, layers and classes (NaN entries skipped) of attention_iou.
template <class T>
double mean_attention_iou(const std::vector<AttentionMaps<T>>& layers, std::span<const SemanticMask> masks,
                          double threshold) {
  double total = 0;
  std::size_t count = 0;
  for (const auto& maps : layers) {
    const std::size_t N = maps.dim(0);
    if (N != masks.size()) throw DimensionError("mean_attention_iou: batch size mismatch");
    const std::size_t per = maps.numel() / N;
    const Shape one(maps.shape().begin() + 1, maps.shape().end());
    for (std::size_t n = 0; n < N; ++n) {
      std::vector<T> slice(maps.values().begin() + static_cast<std::ptrdiff_t>(n * per),
                           maps.values().begin() + static_cast<std::ptrdiff_t>((n + 1) * per));
      for (double iou : attention_iou(Tensor<T>(one, std::move(slice)), masks[n], threshold))
        if (!std::isnan(iou)) {
          total += iou;
          ++count;
        }
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

template <class T>
double mean_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("mean_abs_diff: shape mismatch");
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::abs(double(a.values()[i]) - double(b.values()[i]));
  return s / static_cast<double>(a.numel());
}

/// PSNR in dB of images in [-1,1], measured on the [0,1] scale.
template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("psnr: shape mismatch");
  double se = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = 0.5 * (double(a.values()[i]) - double(b.values()[i]));
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.numel());
  return mse > 0 ? 10.0 * std::log10(1.0 / mse) : std::numeric_limits<double>::infinity();
}

/// Frechet distance between Gaussians fitted to two feature sets (rows are samples):
/// |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2).
inline double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols()) throw DimensionError("frechet_distance: feature widths differ");
  if (a.rows() < 2 || b.rows() < 2) throw ArgumentError("frechet_distance: need at least two samples per set");
  if (a.rows() == b.rows() && (a.array() == b.array()).all()) return 0.0;
  const auto stats = [](const Eigen::MatrixXd& x) {
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const Eigen::MatrixXd c = x.rowwise() - mu;
    return std::pair<Eigen::VectorXd, Eigen::MatrixXd>(mu.transpose(), c.transpose() * c / double(x.rows() - 1));
  };
  const auto psd_sqrt = [](const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return Eigen::MatrixXd(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
  };
  const auto [mu1, s1] = stats(a);
  const auto [mu2, s2] = stats(b);
  const Eigen::MatrixXd r1 = psd_sqrt(s1);
  const Eigen::MatrixXd cross = psd_sqrt(r1 * s2 * r1);
  const double fd = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * cross.trace();
  return std::max(fd, 0.0);
}

template <class T>
Eigen::MatrixXd to_matrix(const Tensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("to_matrix: expected [N,F]");
  Eigen::MatrixXd m(x.dim(0), x.dim(1));
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < x.dim(1); ++j) m(i, j) = double(x.values()[i * x.dim(1) + j]);
  return m;
}

}  // namespace casis
