#pragma once

// 8-bit PNG read/write (RGB and grayscale) and tensor conversions.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "casis/errors.hpp"
#include "casis/tensor.hpp"

namespace casis {

struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

inline Image8 read_png(const std::string& path, std::size_t channels) {
  if (channels != 1 && channels != 3) throw ArgumentError("read_png: channels must be 1 or 3");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw DataError("cannot read PNG " + path + ": " + img.message);
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image8 out;
  out.width = img.width;
  out.height = img.height;
  out.channels = channels;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw DataError("cannot decode PNG " + path + ": " + msg);
  }
  return out;
}

inline void write_png(const std::string& path, const Image8& im) {
  if (im.channels != 1 && im.channels != 3) throw ArgumentError("write_png: channels must be 1 or 3");
  if (im.pixels.size() != im.width * im.height * im.channels)
    throw ArgumentError("write_png: pixel buffer size does not match dimensions");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = im.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, im.pixels.data(), 0, nullptr))
    throw DataError("cannot write PNG " + path + ": " + img.message);
}

/// [3,H,W] in [-1,1] -> 8-bit RGB, rounding to nearest and clamping.
template <class T>
Image8 to_image8(const Tensor<T>& img) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw DimensionError("to_image8: expected [3,H,W], got " + shape_str(img.shape()));
  const std::size_t H = img.dim(1), W = img.dim(2);
  Image8 out{W, H, 3, std::vector<std::uint8_t>(W * H * 3)};
  const T* p = img.data().data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < H * W; ++i) {
      const double v = (static_cast<double>(p[c * H * W + i]) + 1.0) * 127.5;
      out.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  return out;
}

/// 8-bit RGB -> [3,H,W] in [-1,1].
template <class T>
Tensor<T> from_image8(const Image8& im) {
  if (im.channels != 3) throw DataError("from_image8: expected an RGB image");
  const std::size_t H = im.height, W = im.width;
  std::vector<T> v(3 * H * W);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < H * W; ++i) v[c * H * W + i] = T(im.pixels[i * 3 + c] / 127.5 - 1.0);
  return Tensor<T>({3, H, W}, std::move(v));
}

}  // namespace casis
