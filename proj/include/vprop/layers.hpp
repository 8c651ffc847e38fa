#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "vprop/errors.hpp"
#include "vprop/tensor.hpp"

namespace vprop {

enum class LayerKind : std::uint8_t {
  kDense = 1,
  kConv2d = 2,
  kConvTranspose2d = 3,
  kLeakyRelu = 4,
  kSigmoid = 5,
  kReshape = 6,
};

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kDense: return "dense";
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kConvTranspose2d: return "conv_transpose2d";
    case LayerKind::kLeakyRelu: return "leaky_relu";
    case LayerKind::kSigmoid: return "sigmoid";
    case LayerKind::kReshape: return "reshape";
  }
  return "unknown";
}

/// Trainable weights plus their accumulated gradients. Gradient tensors always
/// shape-match the parameter tensors.
template <typename T>
struct LayerParams {
  Tensor<T> weights;
  Tensor<T> bias;
  Tensor<T> grad_weights;
  Tensor<T> grad_bias;

  LayerParams() = default;
  LayerParams(Shape w, Shape b)
      : weights(w), bias(b), grad_weights(std::move(w)), grad_bias(std::move(b)) {}

  void zero_grad() {
    grad_weights.fill(T{0});
    grad_bias.fill(T{0});
  }
  std::size_t count() const { return weights.size() + bias.size(); }
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (k > in + 2 * pad) {
    throw DimensionError("kernel " + std::to_string(k) + " larger than padded input " +
                         std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

// Unfolds one [C,H,W] image into rows (c,ky,kx) x columns (oy,ox), writing into a
// row-major matrix with leading dimension `ld` starting at column `col0`.
template <typename T>
void im2col(const T* img, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, T* col,
            std::size_t ld, std::size_t col0) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * ld + col0;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          T* dst = row + oy * ow;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            for (std::size_t ox = 0; ox < ow; ++ox) dst[ox] = T{0};
            continue;
          }
          const T* src = img + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into the image.
template <typename T>
void col2im(const T* col, std::size_t ld, std::size_t col0, std::size_t channels, std::size_t h,
            std::size_t w, std::size_t k, std::size_t stride, std::size_t pad, std::size_t oh,
            std::size_t ow, T* img) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((c * k + ky) * k + kx) * ld + col0;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* dst = img + (c * h + static_cast<std::size_t>(iy)) * w;
          const T* src = row + oy * ow;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// [B, C, P] <-> [C, B*P]
template <typename T>
void batch_to_channel_major(const T* src, std::size_t batch, std::size_t channels, std::size_t plane, T* dst) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(src + (b * channels + c) * plane, plane, dst + c * batch * plane + b * plane);
}
template <typename T>
void channel_major_to_batch(const T* src, std::size_t batch, std::size_t channels, std::size_t plane, T* dst) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(src + c * batch * plane + b * plane, plane, dst + (b * channels + c) * plane);
}

template <typename T>
void he_uniform(Tensor<T>& w, double fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : w.vec()) v = static_cast<T>(dist(rng));
}

}  // namespace detail

/// One stage of a feed-forward network with manual reverse-mode gradients.
///
/// `infer` is const and keeps no state, so a trained layer may be shared between
/// threads for inference. `forward` additionally caches what `backward` needs;
/// `backward` accumulates parameter gradients and returns the input gradient.
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  virtual Shape output_shape(const Shape& input) const = 0;
  virtual Tensor<T> infer(const Tensor<T>& x) const = 0;
  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;

  /// Shape recorded in checkpoints: the weight shape, the reshape target, or empty.
  virtual Shape record_shape() const { return {}; }

  virtual LayerParams<T>* params() { return nullptr; }
  const LayerParams<T>* params() const { return const_cast<Layer*>(this)->params(); }
  virtual void init(std::mt19937_64& /*rng*/) {}

  bool has_cache() const noexcept { return cached_; }
  void clear_cache() noexcept { cached_ = false; }

 protected:
  void require_cache() const {
    if (!cached_) {
      throw StateError(std::string("backward called on ") + layer_kind_name(kind()) +
                       " layer before forward");
    }
  }
  bool cached_ = false;
};

/// Fully connected layer: y = W x + b with W of shape [out, in].
template <typename T>
class Dense final : public Layer<T> {
 public:
  Dense(std::size_t in, std::size_t out) : p_({out, in}, {out}) {}

  LayerKind kind() const override { return LayerKind::kDense; }
  std::size_t in_features() const { return p_.weights.dim(1); }
  std::size_t out_features() const { return p_.weights.dim(0); }

  Shape output_shape(const Shape& input) const override {
    check(input);
    return {input[0], out_features()};
  }

  Tensor<T> infer(const Tensor<T>& x) const override {
    check(x.shape());
    const std::size_t batch = x.dim(0);
    Tensor<T> y({batch, out_features()});
    detail::CMapMat<T> X(x.data(), batch, in_features());
    detail::CMapMat<T> W(p_.weights.data(), out_features(), in_features());
    detail::MapMat<T> Y(y.data(), batch, out_features());
    Y.noalias() = X * W.transpose();
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(p_.bias.data(), out_features());
    Y.rowwise() += b;
    return y;
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    input_ = x;
    this->cached_ = true;
    return infer(x);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    this->require_cache();
    const std::size_t batch = input_.dim(0);
    if (grad_out.size() != batch * out_features()) {
      throw DimensionError("dense backward: gradient " + shape_str(grad_out.shape()) + " vs output [" +
                           std::to_string(batch) + "x" + std::to_string(out_features()) + "]");
    }
    detail::CMapMat<T> G(grad_out.data(), batch, out_features());
    detail::CMapMat<T> X(input_.data(), batch, in_features());
    detail::CMapMat<T> W(p_.weights.data(), out_features(), in_features());
    detail::MapMat<T> gW(p_.grad_weights.data(), out_features(), in_features());
    gW.noalias() += G.transpose() * X;
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(p_.grad_bias.data(), out_features());
    gb += G.colwise().sum();
    Tensor<T> gx(input_.shape());
    detail::MapMat<T> GX(gx.data(), batch, in_features());
    GX.noalias() = G * W;
    return gx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dense>(*this); }
  Shape record_shape() const override { return p_.weights.shape(); }
  LayerParams<T>* params() override { return &p_; }
  void init(std::mt19937_64& rng) override {
    detail::he_uniform(p_.weights, static_cast<double>(in_features()), rng);
    p_.bias.fill(T{0});
  }

 private:
  void check(const Shape& s) const {
    if (s.empty() || shape_size(s) != s[0] * in_features()) {
      throw DimensionError("dense layer expects [batch x " + std::to_string(in_features()) +
                           "] input, got " + shape_str(s) + " for weights " + shape_str(p_.weights.shape()));
    }
  }

  LayerParams<T> p_;
  Tensor<T> input_;
};

/// 2-D cross-correlation over [batch, channels, height, width] inputs.
template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride = 1,
         std::size_t padding = 0)
      : p_({out_channels, in_channels, kernel, kernel}, {out_channels}), stride_(stride), pad_(padding) {
    if (stride == 0) throw ValidationError("conv2d stride must be >= 1");
  }

  LayerKind kind() const override { return LayerKind::kConv2d; }
  std::size_t in_channels() const { return p_.weights.dim(1); }
  std::size_t out_channels() const { return p_.weights.dim(0); }
  std::size_t kernel() const { return p_.weights.dim(2); }
  std::size_t stride() const { return stride_; }
  std::size_t padding() const { return pad_; }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 4 || in[1] != in_channels()) {
      throw DimensionError("conv2d expects [batch x " + std::to_string(in_channels()) +
                           " x h x w] input, got " + shape_str(in) + " for kernel " +
                           shape_str(p_.weights.shape()));
    }
    return {in[0], out_channels(), detail::conv_out(in[2], kernel(), stride_, pad_),
            detail::conv_out(in[3], kernel(), stride_, pad_)};
  }

  Tensor<T> infer(const Tensor<T>& x) const override {
    Buffer<T> col;
    return run(x, col);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    in_shape_ = x.shape();
    this->cached_ = true;
    return run(x, col_);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    this->require_cache();
    const Shape out = output_shape(in_shape_);
    if (grad_out.shape() != out) {
      throw DimensionError("conv2d backward: gradient " + shape_str(grad_out.shape()) + " vs output " +
                           shape_str(out));
    }
    const std::size_t batch = out[0], co = out[1], plane = out[2] * out[3];
    const std::size_t rows = in_channels() * kernel() * kernel(), cols = batch * plane;
    Buffer<T> g(co * cols);
    detail::batch_to_channel_major(grad_out.data(), batch, co, plane, g.data());
    detail::CMapMat<T> G(g.data(), co, cols);
    detail::CMapMat<T> C(col_.data(), rows, cols);
    detail::CMapMat<T> W(p_.weights.data(), co, rows);
    detail::MapMat<T> gW(p_.grad_weights.data(), co, rows);
    gW.noalias() += G * C.transpose();
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gb(p_.grad_bias.data(), co);
    gb += G.rowwise().sum();
    Buffer<T> gcol(rows * cols);
    detail::MapMat<T> GC(gcol.data(), rows, cols);
    GC.noalias() = W.transpose() * G;
    Tensor<T> gx(in_shape_);
    const std::size_t ci = in_shape_[1], h = in_shape_[2], w = in_shape_[3];
    for (std::size_t b = 0; b < batch; ++b) {
      detail::col2im(gcol.data(), cols, b * plane, ci, h, w, kernel(), stride_, pad_, out[2], out[3],
                     gx.data() + b * ci * h * w);
    }
    return gx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2d>(*this); }
  Shape record_shape() const override { return p_.weights.shape(); }
  LayerParams<T>* params() override { return &p_; }
  void init(std::mt19937_64& rng) override {
    detail::he_uniform(p_.weights, static_cast<double>(in_channels() * kernel() * kernel()), rng);
    p_.bias.fill(T{0});
  }

 private:
  Tensor<T> run(const Tensor<T>& x, Buffer<T>& col) const {
    const Shape out = output_shape(x.shape());
    const std::size_t batch = out[0], co = out[1], oh = out[2], ow = out[3], plane = oh * ow;
    const std::size_t ci = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t rows = ci * kernel() * kernel(), cols = batch * plane;
    col.assign(rows * cols, T{0});
    for (std::size_t b = 0; b < batch; ++b) {
      detail::im2col(x.data() + b * ci * h * w, ci, h, w, kernel(), stride_, pad_, oh, ow, col.data(), cols,
                     b * plane);
    }
    Buffer<T> y(co * cols);
    detail::MapMat<T> Y(y.data(), co, cols);
    Y.noalias() = detail::CMapMat<T>(p_.weights.data(), co, rows) * detail::CMapMat<T>(col.data(), rows, cols);
    Y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(p_.bias.data(), co);
    Tensor<T> result(out);
    detail::channel_major_to_batch(y.data(), batch, co, plane, result.data());
    return result;
  }

  LayerParams<T> p_;
  std::size_t stride_;
  std::size_t pad_;
  Shape in_shape_;
  Buffer<T> col_;
};

/// Transposed convolution (adjoint of Conv2d in its data argument); weights are
/// [in_channels, out_channels, k, k]; output size (in - 1) * stride - 2 * pad + k.
template <typename T>
class ConvTranspose2d final : public Layer<T> {
 public:
  ConvTranspose2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride = 1,
                  std::size_t padding = 0)
      : p_({in_channels, out_channels, kernel, kernel}, {out_channels}), stride_(stride), pad_(padding) {
    if (stride == 0) throw ValidationError("conv_transpose2d stride must be >= 1");
  }

  LayerKind kind() const override { return LayerKind::kConvTranspose2d; }
  std::size_t in_channels() const { return p_.weights.dim(0); }
  std::size_t out_channels() const { return p_.weights.dim(1); }
  std::size_t kernel() const { return p_.weights.dim(2); }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 4 || in[1] != in_channels()) {
      throw DimensionError("conv_transpose2d expects [batch x " + std::to_string(in_channels()) +
                           " x h x w] input, got " + shape_str(in));
    }
    const auto grow = [&](std::size_t n) -> std::size_t {
      const long v = static_cast<long>((n - 1) * stride_ + kernel()) - 2 * static_cast<long>(pad_);
      if (v <= 0) throw DimensionError("conv_transpose2d output would be empty for input " + shape_str(in));
      return static_cast<std::size_t>(v);
    };
    return {in[0], out_channels(), grow(in[2]), grow(in[3])};
  }

  Tensor<T> infer(const Tensor<T>& x) const override {
    Buffer<T> xm;
    return run(x, xm);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    in_shape_ = x.shape();
    this->cached_ = true;
    return run(x, x_cm_);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    this->require_cache();
    const Shape out = output_shape(in_shape_);
    if (grad_out.shape() != out) {
      throw DimensionError("conv_transpose2d backward: gradient " + shape_str(grad_out.shape()) +
                           " vs output " + shape_str(out));
    }
    const std::size_t batch = in_shape_[0], ci = in_channels(), co = out_channels();
    const std::size_t in_plane = in_shape_[2] * in_shape_[3];
    const std::size_t rows = co * kernel() * kernel(), cols = batch * in_plane;
    const std::size_t oh = out[2], ow = out[3];
    Buffer<T> gcol(rows * cols);
    for (std::size_t b = 0; b < batch; ++b) {
      detail::im2col(grad_out.data() + b * co * oh * ow, co, oh, ow, kernel(), stride_, pad_, in_shape_[2],
                     in_shape_[3], gcol.data(), cols, b * in_plane);
    }
    detail::CMapMat<T> GC(gcol.data(), rows, cols);
    detail::CMapMat<T> X(x_cm_.data(), ci, cols);
    detail::CMapMat<T> W(p_.weights.data(), ci, rows);
    detail::MapMat<T> gW(p_.grad_weights.data(), ci, rows);
    gW.noalias() += X * GC.transpose();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < co; ++c) {
        const T* g = grad_out.data() + (b * co + c) * oh * ow;
        T s{0};
        for (std::size_t i = 0; i < oh * ow; ++i) s += g[i];
        p_.grad_bias[c] += s;
      }
    Buffer<T> gx_cm(ci * cols);
    detail::MapMat<T> GX(gx_cm.data(), ci, cols);
    GX.noalias() = W * GC;
    Tensor<T> gx(in_shape_);
    detail::channel_major_to_batch(gx_cm.data(), batch, ci, in_plane, gx.data());
    return gx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ConvTranspose2d>(*this); }
  Shape record_shape() const override { return p_.weights.shape(); }
  LayerParams<T>* params() override { return &p_; }
  void init(std::mt19937_64& rng) override {
    const double fan_in = static_cast<double>(in_channels() * kernel() * kernel()) /
                          static_cast<double>(stride_ * stride_);
    detail::he_uniform(p_.weights, fan_in, rng);
    p_.bias.fill(T{0});
  }

 private:
  Tensor<T> run(const Tensor<T>& x, Buffer<T>& x_cm) const {
    const Shape out = output_shape(x.shape());
    const std::size_t batch = x.dim(0), ci = in_channels(), co = out_channels();
    const std::size_t in_plane = x.dim(2) * x.dim(3);
    const std::size_t rows = co * kernel() * kernel(), cols = batch * in_plane;
    x_cm.assign(ci * cols, T{0});
    detail::batch_to_channel_major(x.data(), batch, ci, in_plane, x_cm.data());
    Buffer<T> col(rows * cols);
    detail::MapMat<T> C(col.data(), rows, cols);
    C.noalias() = detail::CMapMat<T>(p_.weights.data(), ci, rows).transpose() *
                  detail::CMapMat<T>(x_cm.data(), ci, cols);
    Tensor<T> y(out);
    const std::size_t oh = out[2], ow = out[3];
    for (std::size_t b = 0; b < batch; ++b) {
      T* img = y.data() + b * co * oh * ow;
      detail::col2im(col.data(), cols, b * in_plane, co, oh, ow, kernel(), stride_, pad_, x.dim(2), x.dim(3), img);
      for (std::size_t c = 0; c < co; ++c)
        for (std::size_t i = 0; i < oh * ow; ++i) img[c * oh * ow + i] += p_.bias[c];
    }
    return y;
  }

  LayerParams<T> p_;
  std::size_t stride_;
  std::size_t pad_;
  Shape in_shape_;
  Buffer<T> x_cm_;
};

template <typename T>
class LeakyRelu final : public Layer<T> {
 public:
  explicit LeakyRelu(T slope = T(0.01)) : slope_(slope) {}
  LayerKind kind() const override { return LayerKind::kLeakyRelu; }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor<T> infer(const Tensor<T>& x) const override {
    Tensor<T> y = x;
    for (auto& v : y.vec()) v = v > T{0} ? v : slope_ * v;
    return y;
  }
  Tensor<T> forward(const Tensor<T>& x) override {
    input_ = x;
    this->cached_ = true;
    return infer(x);
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    this->require_cache();
    require_same_size(grad_out.size(), input_.size(), "leaky_relu backward");
    Tensor<T> gx(input_.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = input_[i] > T{0} ? grad_out[i] : slope_ * grad_out[i];
    return gx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<LeakyRelu>(*this); }

 private:
  T slope_;
  Tensor<T> input_;
};

template <typename T>
class Sigmoid final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::kSigmoid; }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor<T> infer(const Tensor<T>& x) const override {
    Tensor<T> y = x;
    for (auto& v : y.vec()) v = T{1} / (T{1} + std::exp(-v));
    return y;
  }
  Tensor<T> forward(const Tensor<T>& x) override {
    output_ = infer(x);
    this->cached_ = true;
    return output_;
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    this->require_cache();
    require_same_size(grad_out.size(), output_.size(), "sigmoid backward");
    Tensor<T> gx(output_.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = grad_out[i] * output_[i] * (T{1} - output_[i]);
    return gx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Sigmoid>(*this); }

 private:
  Tensor<T> output_;
};

/// Reinterprets each sample under `target` (per-sample shape, batch dim excluded).
template <typename T>
class Reshape final : public Layer<T> {
 public:
  explicit Reshape(Shape target) : target_(std::move(target)) {}
  LayerKind kind() const override { return LayerKind::kReshape; }

  Shape output_shape(const Shape& in) const override {
    if (in.empty() || shape_size(in) != in[0] * shape_size(target_)) {
      throw DimensionError("reshape " + shape_str(in) + " to per-sample " + shape_str(target_));
    }
    Shape s{in[0]};
    s.insert(s.end(), target_.begin(), target_.end());
    return s;
  }
  Tensor<T> infer(const Tensor<T>& x) const override { return x.reshaped(output_shape(x.shape())); }
  Tensor<T> forward(const Tensor<T>& x) override {
    in_shape_ = x.shape();
    this->cached_ = true;
    return infer(x);
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    this->require_cache();
    return grad_out.reshaped(in_shape_);
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Reshape>(*this); }
  Shape record_shape() const override { return target_; }

 private:
  Shape target_;
  Shape in_shape_;
};

}  // namespace vprop
