#pragma once

#include <memory>
#include <random>
#include <span>
#include <vector>

#include "vprop/layers.hpp"

namespace vprop {

/// Ordered stack of layers. Copying deep-copies every layer.
template <typename T>
class Sequential {
 public:
  Sequential() = default;
  Sequential(const Sequential& other) { *this = other; }
  Sequential& operator=(const Sequential& other) {
    if (this != &other) {
      layers_.clear();
      for (const auto& l : other.layers_) layers_.push_back(l->clone());
      forwarded_ = false;
    }
    return *this;
  }
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <typename L, typename... Args>
  Sequential& add(Args&&... args) {
    layers_.push_back(std::make_unique<L>(std::forward<Args>(args)...));
    return *this;
  }

  void init(std::mt19937_64& rng) {
    for (auto& l : layers_) l->init(rng);
  }

  Tensor<T> infer(const Tensor<T>& x) const {
    Tensor<T> h = x;
    for (const auto& l : layers_) h = l->infer(h);
    return h;
  }

  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> h = x;
    for (auto& l : layers_) h = l->forward(h);
    forwarded_ = true;
    return h;
  }

  /// Propagates `grad_out` through the cached forward pass, accumulating
  /// parameter gradients; returns the gradient with respect to the input.
  Tensor<T> backward(const Tensor<T>& grad_out) {
    if (!forwarded_) throw StateError("backward called before forward");
    Tensor<T> g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  std::vector<LayerParams<T>*> parameters() {
    std::vector<LayerParams<T>*> out;
    for (auto& l : layers_)
      if (auto* p = l->params()) out.push_back(p);
    return out;
  }
  std::vector<const LayerParams<T>*> parameters() const {
    std::vector<const LayerParams<T>*> out;
    for (const auto& l : layers_)
      if (const auto* p = l->params()) out.push_back(p);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->count();
    return n;
  }

  Shape output_shape(Shape input) const {
    for (const auto& l : layers_) input = l->output_shape(input);
    return input;
  }

  /// Copy of the first `n` layers.
  Sequential prefix(std::size_t n) const {
    Sequential out;
    for (std::size_t i = 0; i < n && i < layers_.size(); ++i) out.layers_.push_back(layers_[i]->clone());
    return out;
  }

  Sequential& append(const Sequential& tail) {
    for (const auto& l : tail.layers_) layers_.push_back(l->clone());
    return *this;
  }

  std::size_t size() const noexcept { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }

  /// Bitwise equality of every parameter tensor.
  bool same_parameters(const Sequential& other) const {
    const auto a = parameters();
    const auto b = other.parameters();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!(a[i]->weights == b[i]->weights) || !(a[i]->bias == b[i]->bias)) return false;
    return true;
  }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  bool forwarded_ = false;
};

/// Dense stack in -> hidden... -> out with leaky-ReLU between layers and a linear output.
template <typename T>
Sequential<T> make_mlp(std::size_t in, std::span<const std::size_t> hidden, std::size_t out) {
  Sequential<T> net;
  std::size_t prev = in;
  for (std::size_t h : hidden) {
    net.template add<Dense<T>>(prev, h);
    net.template add<LeakyRelu<T>>();
    prev = h;
  }
  net.template add<Dense<T>>(prev, out);
  return net;
}

template <typename T>
Sequential<T> make_mlp(std::size_t in, std::initializer_list<std::size_t> hidden, std::size_t out) {
  return make_mlp<T>(in, std::span<const std::size_t>(hidden.begin(), hidden.size()), out);
}

/// Single-sample dense evaluation W x + b.
template <typename T>
std::vector<T> dense_forward(std::span<const T> x, const LayerParams<T>& params) {
  const std::size_t m = params.weights.dim(0), n = params.weights.dim(1);
  if (x.size() != n) {
    throw DimensionError("dense_forward: input length " + std::to_string(x.size()) + " vs weights " +
                         shape_str(params.weights.shape()));
  }
  std::vector<T> y(params.bias.vec().begin(), params.bias.vec().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i] += params.weights[i * n + j] * x[j];
  return y;
}

/// Single-image cross-correlation of a [c_in, h, w] image with a [c_out, c_in, k, k] kernel (no bias).
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& image, const Tensor<T>& kernel, std::size_t stride, std::size_t padding) {
  if (image.rank() != 3 || kernel.rank() != 4 || kernel.dim(1) != image.dim(0) || kernel.dim(2) != kernel.dim(3)) {
    throw DimensionError("conv2d_forward: image " + shape_str(image.shape()) + " vs kernel " +
                         shape_str(kernel.shape()));
  }
  Conv2d<T> conv(kernel.dim(1), kernel.dim(0), kernel.dim(2), stride, padding);
  conv.params()->weights = kernel;
  Shape batched{1};
  batched.insert(batched.end(), image.shape().begin(), image.shape().end());
  Tensor<T> y = conv.infer(image.reshaped(batched));
  return std::move(y).reshaped({y.dim(1), y.dim(2), y.dim(3)});
}

}  // namespace vprop
