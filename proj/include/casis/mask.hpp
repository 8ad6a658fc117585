#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "casis/errors.hpp"
#include "casis/tensor.hpp"

namespace casis {

/// C x H x W one-hot class layout. Stored as a per-pixel class index, which makes
/// the one-hot invariant hold by construction; `channels()` materializes it.
class SemanticMask {
 public:
  SemanticMask() = default;

  SemanticMask(std::size_t num_classes, std::size_t height, std::size_t width,
               std::vector<std::uint16_t> labels)
      : classes_(num_classes), height_(height), width_(width), labels_(std::move(labels)) {
    if (classes_ == 0) throw ConfigError("SemanticMask: need at least one class");
    if (labels_.size() != height_ * width_)
      throw DimensionError("SemanticMask: label count does not match H*W");
    for (std::size_t i = 0; i < labels_.size(); ++i)
      if (labels_[i] >= classes_)
        throw DataError("SemanticMask: pixel (" + std::to_string(i / width_) + "," +
                        std::to_string(i % width_) + ") has class " + std::to_string(labels_[i]) +
                        " >= " + std::to_string(classes_));
  }

  static SemanticMask uniform(std::size_t num_classes, std::size_t h, std::size_t w,
                              std::uint16_t cls) {
    return SemanticMask(num_classes, h, w, std::vector<std::uint16_t>(h * w, cls));
  }

  /// Validates a channel tensor [C,H,W]: every value in {0,1} and exactly one 1 per pixel.
  template <class T>
  static SemanticMask from_channels(const Tensor<T>& channels) {
    if (channels.rank() != 3) throw DimensionError("SemanticMask: channels must be [C,H,W]");
    const std::size_t C = channels.dim(0), H = channels.dim(1), W = channels.dim(2);
    std::vector<std::uint16_t> labels(H * W);
    const auto& v = channels.values();
    for (std::size_t p = 0; p < H * W; ++p) {
      int hot = -1;
      for (std::size_t c = 0; c < C; ++c) {
        const T x = v[c * H * W + p];
        if (x == T(1)) {
          if (hot >= 0)
            throw DataError("SemanticMask: pixel " + std::to_string(p) + " is not one-hot");
          hot = static_cast<int>(c);
        } else if (x != T(0)) {
          throw DataError("SemanticMask: non-binary value at channel " + std::to_string(c));
        }
      }
      if (hot < 0) throw DataError("SemanticMask: pixel " + std::to_string(p) + " has no class");
      labels[p] = static_cast<std::uint16_t>(hot);
    }
    return SemanticMask(C, H, W, std::move(labels));
  }

  std::size_t num_classes() const { return classes_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::span<const std::uint16_t> labels() const { return labels_; }
  std::uint16_t label(std::size_t y, std::size_t x) const { return labels_[y * width_ + x]; }

  std::size_t count(std::size_t cls) const {
    std::size_t n = 0;
    for (auto l : labels_) n += (l == cls);
    return n;
  }

  template <class T = float>
  Tensor<T> channels() const {
    std::vector<T> v(classes_ * labels_.size(), T(0));
    for (std::size_t p = 0; p < labels_.size(); ++p) v[labels_[p] * labels_.size() + p] = T(1);
    return Tensor<T>({classes_, height_, width_}, std::move(v));
  }

  bool operator==(const SemanticMask& o) const = default;

 private:
  std::size_t classes_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint16_t> labels_;
};

/// Nearest-neighbour resize. Output pixel i samples source floor((2i+1)*in / (2*out)),
/// the source cell containing the output pixel centre.
inline SemanticMask resize_mask(const SemanticMask& mask, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw ArgumentError("resize_mask: target dims must be positive");
  if (out_h == mask.height() && out_w == mask.width()) return mask;
  std::vector<std::uint16_t> labels(out_h * out_w);
  for (std::size_t i = 0; i < out_h; ++i) {
    const std::size_t si = (2 * i + 1) * mask.height() / (2 * out_h);
    for (std::size_t j = 0; j < out_w; ++j) {
      const std::size_t sj = (2 * j + 1) * mask.width() / (2 * out_w);
      labels[i * out_w + j] = mask.label(si, sj);
    }
  }
  return SemanticMask(mask.num_classes(), out_h, out_w, std::move(labels));
}

/// Stacks masks into a [N,C,H,W] tensor, optionally resized to (h, w).
template <class T>
Tensor<T> mask_batch(std::span<const SemanticMask> masks, std::size_t h = 0, std::size_t w = 0) {
  if (masks.empty()) throw ArgumentError("mask_batch: empty batch");
  const std::size_t C = masks[0].num_classes();
  const std::size_t H = h ? h : masks[0].height();
  const std::size_t W = w ? w : masks[0].width();
  std::vector<T> v(masks.size() * C * H * W, T(0));
  for (std::size_t n = 0; n < masks.size(); ++n) {
    if (masks[n].num_classes() != C) throw ConfigError("mask_batch: class counts differ");
    const SemanticMask r = resize_mask(masks[n], H, W);
    const auto lab = r.labels();
    for (std::size_t p = 0; p < H * W; ++p) v[(n * C + lab[p]) * H * W + p] = T(1);
  }
  return Tensor<T>({masks.size(), C, H, W}, std::move(v));
}

/// Resizes every mask of a [N,C,H,W] one-hot batch by nearest neighbour.
template <class T>
Tensor<T> resize_mask_batch(const Tensor<T>& masks, std::size_t h, std::size_t w) {
  if (masks.rank() != 4) throw DimensionError("resize_mask_batch: expected [N,C,H,W]");
  const std::size_t N = masks.dim(0), C = masks.dim(1), H = masks.dim(2), W = masks.dim(3);
  if (H == h && W == w) return masks.detach();
  std::vector<T> v(N * C * h * w);
  const auto& src = masks.values();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < h; ++i) {
        const std::size_t si = (2 * i + 1) * H / (2 * h);
        for (std::size_t j = 0; j < w; ++j) {
          const std::size_t sj = (2 * j + 1) * W / (2 * w);
          v[((n * C + c) * h + i) * w + j] = src[((n * C + c) * H + si) * W + sj];
        }
      }
  return Tensor<T>({N, C, h, w}, std::move(v));
}

}  // namespace casis
