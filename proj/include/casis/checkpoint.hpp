#pragma once

// Binary named-tensor container, all integers little-endian:
//   "CACP" | u32 version | u32 len + config text | u32 count |
//   count x (u32 len + name | u32 rank | rank x u64 dim | u8 dtype | payload) |
//   u32 CRC-32 of every preceding byte.
// dtype 1 = float32, 2 = float64.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "casis/errors.hpp"
#include "casis/nn.hpp"
#include "casis/tensor.hpp"

namespace casis {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
constexpr std::uint8_t dtype_tag() {
  if constexpr (std::is_same_v<T, float>)
    return 1;
  else if constexpr (std::is_same_v<T, double>)
    return 2;
  else
    static_assert(sizeof(T) == 0, "unsupported checkpoint dtype");
}

struct StoredTensor {
  Shape shape;
  std::uint8_t dtype = 0;
  std::vector<std::uint8_t> bytes;

  template <class T>
  Tensor<T> as() const {
    if (dtype != dtype_tag<T>()) throw CheckpointError("checkpoint: dtype tag mismatch");
    std::vector<T> v(numel_of(shape));
    std::memcpy(v.data(), bytes.data(), bytes.size());
    return Tensor<T>(shape, std::move(v));
  }
};

struct CheckpointData {
  std::string config_text;
  std::vector<std::string> order;
  std::map<std::string, StoredTensor> tensors;
};

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf.insert(buf.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> buf;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  template <class U>
  U get() {
    U v;
    std::memcpy(&v, take(sizeof(U)), sizeof(U));
    return v;
  }
  const std::uint8_t* take(std::size_t k) {
    if (k > n_ - pos_) throw CheckpointError("checkpoint: truncated file");
    const auto* r = p_ + pos_;
    pos_ += k;
    return r;
  }
  std::string get_string() {
    const auto len = get<std::uint32_t>();
    const auto* b = take(len);
    return std::string(reinterpret_cast<const char*>(b), len);
  }
  bool done() const { return pos_ == n_; }

 private:
  const std::uint8_t* p_;
  std::size_t n_, pos_ = 0;
};

inline std::uint32_t crc_of(const std::uint8_t* p, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

template <class T>
std::vector<std::uint8_t> serialize_checkpoint(const std::string& config_text, const ParamList<T>& params) {
  detail::ByteWriter w;
  w.put_bytes("CACP", 4);
  w.put(kCheckpointVersion);
  w.put_string(config_text);
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.put_string(p.name);
    w.put(static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) w.put(static_cast<std::uint64_t>(d));
    w.put(dtype_tag<T>());
    w.put_bytes(p.tensor.data().data(), p.tensor.numel() * sizeof(T));
  }
  w.put(detail::crc_of(w.buf.data(), w.buf.size()));
  return std::move(w.buf);
}

inline CheckpointData parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "CACP", 4) != 0)
    throw CheckpointError("checkpoint: bad magic");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (detail::crc_of(bytes.data(), body) != stored) throw CheckpointError("checkpoint: CRC-32 mismatch");
  detail::ByteReader r(bytes.data() + 4, body - 4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  CheckpointData out;
  out.config_text = r.get_string();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_string();
    StoredTensor t;
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    t.dtype = r.get<std::uint8_t>();
    std::size_t elem;
    if (t.dtype == 1)
      elem = 4;
    else if (t.dtype == 2)
      elem = 8;
    else
      throw CheckpointError("checkpoint: tensor " + name + " has unknown dtype tag " + std::to_string(t.dtype));
    const std::size_t n = numel_of(t.shape) * elem;
    const auto* p = r.take(n);
    t.bytes.assign(p, p + n);
    if (out.tensors.count(name)) throw CheckpointError("checkpoint: duplicate tensor " + name);
    out.order.push_back(name);
    out.tensors.emplace(std::move(name), std::move(t));
  }
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes before CRC");
  return out;
}

template <class T>
void save_checkpoint(const std::string& path, const std::string& config_text, const ParamList<T>& params) {
  const auto bytes = serialize_checkpoint(config_text, params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

/// Copies stored values into existing parameters; every parameter must be present
/// with its exact shape.
template <class T>
void restore_parameters(const CheckpointData& ck, const ParamList<T>& params) {
  for (const auto& p : params) {
    const auto it = ck.tensors.find(p.name);
    if (it == ck.tensors.end()) throw CheckpointError("checkpoint: missing parameter " + p.name);
    if (it->second.shape != p.tensor.shape())
      throw CheckpointError("checkpoint: parameter " + p.name + " has shape " + shape_str(it->second.shape) +
                            ", model expects " + shape_str(p.tensor.shape()));
    if (it->second.dtype != dtype_tag<T>()) throw CheckpointError("checkpoint: parameter " + p.name + " dtype mismatch");
    Tensor<T> dst = p.tensor;
    std::memcpy(dst.mutable_data().data(), it->second.bytes.data(), it->second.bytes.size());
  }
}

/// CRC-32 over the raw bytes of a parameter list, as a fingerprint.
template <class T>
std::uint32_t parameter_hash(const ParamList<T>& params) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& p : params)
    crc = crc32(crc, reinterpret_cast<const Bytef*>(p.tensor.data().data()), static_cast<uInt>(p.tensor.numel() * sizeof(T)));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace casis
