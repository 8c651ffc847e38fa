#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "vprop/layers.hpp"

namespace vprop {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

template <typename T>
struct AdamState {
  Tensor<T> first_moment_w, second_moment_w;
  Tensor<T> first_moment_b, second_moment_b;
  std::uint64_t step_count = 0;
  T beta1 = T(0.9), beta2 = T(0.999), epsilon = T(1e-8), learning_rate = T(1e-3), weight_decay = T(0);

  AdamState() = default;
  AdamState(const LayerParams<T>& p, const AdamConfig& cfg)
      : first_moment_w(p.weights.shape()),
        second_moment_w(p.weights.shape()),
        first_moment_b(p.bias.shape()),
        second_moment_b(p.bias.shape()),
        beta1(static_cast<T>(cfg.beta1)),
        beta2(static_cast<T>(cfg.beta2)),
        epsilon(static_cast<T>(cfg.epsilon)),
        learning_rate(static_cast<T>(cfg.learning_rate)),
        weight_decay(static_cast<T>(cfg.weight_decay)) {}
};

namespace detail {
template <typename T>
void adam_update(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v, const AdamState<T>& s,
                 T bc1, T bc2) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    m[i] = s.beta1 * m[i] + (T{1} - s.beta1) * g;
    v[i] = s.beta2 * v[i] + (T{1} - s.beta2) * g * g;
    const T mhat = m[i] / bc1;
    const T vhat = v[i] / bc2;
    param[i] -= s.learning_rate * (mhat / (std::sqrt(vhat) + s.epsilon) + s.weight_decay * param[i]);
  }
}
}  // namespace detail

/// One bias-corrected Adam update with decoupled weight decay.
template <typename T>
void adam_step(LayerParams<T>& params, AdamState<T>& state, const std::string& layer_id = "layer") {
  if (!params.grad_weights.all_finite() || !params.grad_bias.all_finite()) {
    throw TrainingError("non-finite gradient in " + layer_id);
  }
  state.step_count += 1;
  const T t = static_cast<T>(state.step_count);
  const T bc1 = T{1} - std::pow(state.beta1, t);
  const T bc2 = T{1} - std::pow(state.beta2, t);
  detail::adam_update(params.weights, params.grad_weights, state.first_moment_w, state.second_moment_w, state, bc1, bc2);
  detail::adam_update(params.bias, params.grad_bias, state.first_moment_b, state.second_moment_b, state, bc1, bc2);
}

/// Adam over a fixed list of parameter blocks.
template <typename T>
class Adam {
 public:
  Adam(std::vector<LayerParams<T>*> params, const AdamConfig& cfg) : params_(std::move(params)) {
    states_.reserve(params_.size());
    for (auto* p : params_) states_.emplace_back(*p, cfg);
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) adam_step(*params_[i], states_[i], "parameter block " + std::to_string(i));
  }

  const std::vector<AdamState<T>>& states() const { return states_; }

 private:
  std::vector<LayerParams<T>*> params_;
  std::vector<AdamState<T>> states_;
};

}  // namespace vprop
