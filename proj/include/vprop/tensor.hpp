#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "vprop/errors.hpp"

namespace vprop {

#ifdef VPROP_FLOAT32
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

// SIMD-aligned storage. Eigen picks its vectorized code path from the buffer
// address, so unaligned buffers would make GEMM results allocation dependent.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor. The product of `shape` always equals `data.size()`.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::initializer_list<T> data) : Tensor(std::move(shape), Buffer<T>(data)) {}
  Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end())) {}
  Tensor(Shape shape, Buffer<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                           std::to_string(data_.size()) + " values");
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  Buffer<T>& vec() noexcept { return data_; }
  const Buffer<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Same values viewed under a different shape of equal size.
  Tensor reshaped(Shape shape) const& {
    if (shape_size(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }
  Tensor reshaped(Shape shape) && {
    if (shape_size(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    shape_ = std::move(shape);
    return std::move(*this);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const noexcept {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  /// Rows [begin, end) of the leading (batch) dimension.
  Tensor slice_batch(std::size_t begin, std::size_t end) const {
    Shape s = shape_;
    const std::size_t row = data_.size() / (s.empty() || s[0] == 0 ? 1 : s[0]);
    s[0] = end - begin;
    return Tensor(std::move(s), Buffer<T>(data_.begin() + begin * row, data_.begin() + end * row));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  Buffer<T> data_;
};

inline void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": length " + std::to_string(a) + " vs " + std::to_string(b));
  }
}

/// Stack equally-shaped per-sample rows into a [batch, ...] tensor.
template <typename T>
Tensor<T> stack_rows(std::span<const std::vector<T>> rows, const Shape& sample_shape) {
  const std::size_t n = shape_size(sample_shape);
  Shape s{rows.size()};
  s.insert(s.end(), sample_shape.begin(), sample_shape.end());
  Buffer<T> data;
  data.reserve(rows.size() * n);
  for (const auto& r : rows) {
    require_same_size(r.size(), n, "stack_rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor<T>(std::move(s), std::move(data));
}

}  // namespace vprop
