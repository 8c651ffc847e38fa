#pragma once

// Central finite-difference oracle. Evaluates layers only through `infer`, so it
// shares no code path with the analytic backward passes it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "vprop/layers.hpp"

namespace vprop::testing {

struct GradReport {
  double max_rel_error = 0.0;
  std::string worst;
};

inline double rel_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  if (scale < 1e-7) return std::abs(a - b);
  return std::abs(a - b) / scale;
}

inline Tensor<double> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.vec()) v = d(rng);
  return t;
}

// Scalar objective L = sum(r * layer(x)) with fixed random r.
inline GradReport check_layer_gradients(Layer<double>& layer, const Tensor<double>& x, std::mt19937_64& rng,
                                        double step = 1e-5) {
  const Tensor<double> r = random_tensor(layer.output_shape(x.shape()), rng);
  auto objective = [&](const Tensor<double>& in) {
    const Tensor<double> y = layer.infer(in);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += r[i] * y[i];
    return s;
  };

  if (auto* p = layer.params()) p->zero_grad();
  layer.forward(x);
  const Tensor<double> gx = layer.backward(r);

  GradReport rep;
  auto note = [&](double analytic, double numeric, const std::string& where) {
    const double e = rel_error(analytic, numeric);
    if (e > rep.max_rel_error) {
      rep.max_rel_error = e;
      rep.worst = where + " analytic=" + std::to_string(analytic) + " numeric=" + std::to_string(numeric);
    }
  };

  Tensor<double> xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + step;
    const double up = objective(xp);
    xp[i] = orig - step;
    const double down = objective(xp);
    xp[i] = orig;
    note(gx[i], (up - down) / (2 * step), "input[" + std::to_string(i) + "]");
  }
  if (auto* p = layer.params()) {
    for (auto [param, grad, name] : {std::tuple{&p->weights, &p->grad_weights, "weight"},
                                     std::tuple{&p->bias, &p->grad_bias, "bias"}}) {
      for (std::size_t i = 0; i < param->size(); ++i) {
        const double orig = (*param)[i];
        (*param)[i] = orig + step;
        const double up = objective(x);
        (*param)[i] = orig - step;
        const double down = objective(x);
        (*param)[i] = orig;
        note((*grad)[i], (up - down) / (2 * step), std::string(name) + "[" + std::to_string(i) + "]");
      }
    }
  }
  return rep;
}

// Generic scalar-function gradient oracle.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double step = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = f(x);
    x[i] = orig - step;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2 * step);
  }
  return g;
}

}  // namespace vprop::testing
