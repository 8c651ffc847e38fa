#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "vprop/tensor.hpp"

namespace vprop {

template <typename T>
struct LossResult {
  T value{};
  std::vector<T> grad;
};

/// Mean squared error over all entries; gradient 2 (pred - target) / n.
template <typename T>
LossResult<T> mse_loss(std::span<const T> pred, std::span<const T> target) {
  require_same_size(pred.size(), target.size(), "mse_loss");
  if (pred.empty()) throw DimensionError("mse_loss: empty input");
  const T n = static_cast<T>(pred.size());
  LossResult<T> r;
  r.grad.resize(pred.size());
  T acc{0};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T d = pred[i] - target[i];
    acc += d * d;
    r.grad[i] = T{2} * d / n;
  }
  r.value = acc / n;
  return r;
}

template <typename T>
struct KlResult {
  T value{};
  std::vector<T> grad_mu;
  std::vector<T> grad_logvar;
};

/// KL(N(mu, exp(logvar)) || N(0, I)) = 1/2 sum(mu^2 + exp(logvar) - 1 - logvar).
template <typename T>
KlResult<T> kl_diag_gaussian(std::span<const T> mu, std::span<const T> logvar) {
  require_same_size(mu.size(), logvar.size(), "kl_diag_gaussian");
  KlResult<T> r;
  r.grad_mu.resize(mu.size());
  r.grad_logvar.resize(mu.size());
  T acc{0};
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const T e = std::exp(logvar[i]);
    acc += mu[i] * mu[i] + e - T{1} - logvar[i];
    r.grad_mu[i] = mu[i];
    r.grad_logvar[i] = T(0.5) * (e - T{1});
  }
  r.value = T(0.5) * acc;
  return r;
}

}  // namespace vprop
