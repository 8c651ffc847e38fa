#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "vprop/network.hpp"

namespace vprop {

/// Binary parameter checkpoint:
///   "PRB1" | u32 version | u32 layer count |
///   per layer: u8 kind | u32 rank | u32 dims[rank] | weights then bias as little-endian f64.
/// Several networks may share one checkpoint; their layers are written back to back.
inline constexpr char kCheckpointMagic[4] = {'P', 'R', 'B', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
    return std::bit_cast<double>(v);
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, b_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw LoadError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> save_params(std::span<const Sequential<T>* const> nets) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  std::uint32_t count = 0;
  for (const auto* n : nets) count += static_cast<std::uint32_t>(n->size());
  w.u32(count);
  for (const auto* net : nets) {
    for (std::size_t i = 0; i < net->size(); ++i) {
      const Layer<T>& layer = net->layer(i);
      w.u8(static_cast<std::uint8_t>(layer.kind()));
      const Shape dims = layer.record_shape();
      w.u32(static_cast<std::uint32_t>(dims.size()));
      for (auto d : dims) w.u32(static_cast<std::uint32_t>(d));
      if (const auto* p = layer.params()) {
        for (T v : p->weights.vec()) w.f64(static_cast<double>(v));
        for (T v : p->bias.vec()) w.f64(static_cast<double>(v));
      }
    }
  }
  return w.take();
}

template <typename T>
std::vector<std::uint8_t> save_params(const Sequential<T>& net) {
  const Sequential<T>* one[] = {&net};
  return save_params<T>(std::span<const Sequential<T>* const>(one));
}

/// Loads into already-constructed networks. Everything is validated before any
/// parameter is written, so a failed load leaves the networks untouched.
template <typename T>
void load_params(std::span<const std::uint8_t> bytes, std::span<Sequential<T>* const> nets) {
  detail::ByteReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw LoadError("checkpoint magic mismatch");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw LoadError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  std::size_t expected = 0;
  for (auto* n : nets) expected += n->size();
  if (count != expected) {
    throw LoadError("checkpoint has " + std::to_string(count) + " layers, model has " + std::to_string(expected));
  }

  struct Staged {
    LayerParams<T>* target;
    std::vector<T> weights, bias;
  };
  std::vector<Staged> staged;
  std::size_t index = 0;
  for (auto* net : nets) {
    for (std::size_t i = 0; i < net->size(); ++i, ++index) {
      Layer<T>& layer = net->layer(i);
      const auto kind = r.u8();
      if (kind != static_cast<std::uint8_t>(layer.kind())) {
        throw LoadError("layer " + std::to_string(index) + ": kind " + std::to_string(kind) + " vs model " +
                        layer_kind_name(layer.kind()));
      }
      const std::uint32_t rank = r.u32();
      if (rank > 8) throw LoadError("layer " + std::to_string(index) + ": implausible rank " + std::to_string(rank));
      Shape dims(rank);
      for (auto& d : dims) d = r.u32();
      if (dims != layer.record_shape()) {
        throw LoadError("layer " + std::to_string(index) + ": shape mismatch " + shape_str(dims) + " vs model " +
                        shape_str(layer.record_shape()));
      }
      if (auto* p = layer.params()) {
        Staged s{p, std::vector<T>(p->weights.size()), std::vector<T>(p->bias.size())};
        for (auto& v : s.weights) v = static_cast<T>(r.f64());
        for (auto& v : s.bias) v = static_cast<T>(r.f64());
        staged.push_back(std::move(s));
      }
    }
  }
  if (r.remaining() != 0) throw LoadError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
  for (auto& s : staged) {
    std::copy(s.weights.begin(), s.weights.end(), s.target->weights.data());
    std::copy(s.bias.begin(), s.bias.end(), s.target->bias.data());
  }
}

template <typename T>
void load_params(std::span<const std::uint8_t> bytes, Sequential<T>& net) {
  Sequential<T>* one[] = {&net};
  load_params<T>(bytes, std::span<Sequential<T>* const>(one));
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ValidationError("failed writing " + path);
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace vprop
