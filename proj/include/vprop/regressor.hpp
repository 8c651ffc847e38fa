#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vprop/adam.hpp"
#include "vprop/kinematics.hpp"
#include "vprop/loss.hpp"
#include "vprop/network.hpp"
#include "vprop/random.hpp"

namespace vprop {

struct LatentVector {
  std::vector<double> values;
  std::size_t width() const noexcept { return values.size(); }
  friend bool operator==(const LatentVector&, const LatentVector&) = default;
};

struct TrainingConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 300;
  std::size_t patience = 20;
  double validation_fraction = 0.2;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  bool normalize_latents = false;

  void validate() const {
    if (!(validation_fraction > 0 && validation_fraction < 1)) throw ValidationError("validation fraction must lie in (0,1)");
    if (patience < 1) throw ValidationError("patience must be >= 1");
    if (batch_size < 1) throw ValidationError("batch size must be >= 1");
    if (!(learning_rate > 0)) throw ValidationError("learning rate must be positive");
  }
};

struct EpochLog {
  std::size_t epoch = 0;  // 0 = before the first update
  double train_loss = 0;
  double val_loss = 0;
  bool is_best = false;
  friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

inline std::string training_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,train_loss,val_loss,is_best\n";
  for (const auto& e : log) os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << (e.is_best ? 1 : 0) << '\n';
  return os.str();
}

inline double best_validation_loss(const std::vector<EpochLog>& log) {
  double best = INFINITY;
  for (const auto& e : log) best = std::min(best, e.val_loss);
  return best;
}

namespace detail {

template <typename T>
Tensor<T> gather_rows(const std::vector<std::vector<double>>& rows, std::span<const std::size_t> idx) {
  const std::size_t w = rows.at(idx.front()).size();
  Tensor<T> t({idx.size(), w});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& r = rows[idx[i]];
    for (std::size_t j = 0; j < w; ++j) t[i * w + j] = static_cast<T>(r[j]);
  }
  return t;
}

template <typename T>
std::vector<std::pair<Tensor<T>, Tensor<T>>> snapshot(const Sequential<T>& net) {
  std::vector<std::pair<Tensor<T>, Tensor<T>>> s;
  for (const auto* p : net.parameters()) s.emplace_back(p->weights, p->bias);
  return s;
}

template <typename T>
void restore(Sequential<T>& net, const std::vector<std::pair<Tensor<T>, Tensor<T>>>& s) {
  auto ps = net.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    ps[i]->weights = s[i].first;
    ps[i]->bias = s[i].second;
  }
}

template <typename T>
double dataset_loss(const Sequential<T>& net, const std::vector<std::vector<double>>& x,
                    const std::vector<std::vector<double>>& y, std::span<const std::size_t> idx) {
  double total = 0;
  std::size_t count = 0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t b = 0; b < idx.size(); b += kChunk) {
    const auto part = idx.subspan(b, std::min(kChunk, idx.size() - b));
    const Tensor<T> pred = net.infer(gather_rows<T>(x, part));
    const Tensor<T> target = gather_rows<T>(y, part);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
      total += d * d;
    }
    count += pred.size();
  }
  return total / static_cast<double>(count);
}

}  // namespace detail

/// Minibatch Adam on MSE with a seeded train/validation split and early
/// stopping; leaves `net` holding the best-validation parameters.
template <typename T>
std::vector<EpochLog> fit_supervised(Sequential<T>& net, const std::vector<std::vector<double>>& inputs,
                                     const std::vector<std::vector<double>>& targets, const TrainingConfig& cfg) {
  cfg.validate();
  if (inputs.size() != targets.size()) {
    throw ValidationError("got " + std::to_string(inputs.size()) + " inputs for " + std::to_string(targets.size()) +
                          " targets");
  }
  if (inputs.size() < 2) throw ValidationError("need at least two samples to train");
  const std::size_t width = inputs.front().size();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].size() != width) {
      throw ValidationError("sample " + std::to_string(i) + " has width " + std::to_string(inputs[i].size()) +
                            ", expected " + std::to_string(width));
    }
  }

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(cfg.validation_fraction * static_cast<double>(order.size()))), 1,
      order.size() - 1);
  std::vector<std::size_t> train(order.begin(), order.end() - static_cast<long>(n_val));
  const std::vector<std::size_t> val(order.end() - static_cast<long>(n_val), order.end());

  AdamConfig acfg;
  acfg.learning_rate = cfg.learning_rate;
  acfg.weight_decay = cfg.weight_decay;
  Adam<T> opt(net.parameters(), acfg);

  std::vector<EpochLog> log;
  double best = detail::dataset_loss(net, inputs, targets, val);
  log.push_back({0, detail::dataset_loss(net, inputs, targets, train), best, true});
  auto best_params = detail::snapshot(net);
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    double train_total = 0;
    for (std::size_t b = 0; b < train.size(); b += cfg.batch_size) {
      const std::span<const std::size_t> part(train.data() + b, std::min(cfg.batch_size, train.size() - b));
      const Tensor<T> x = detail::gather_rows<T>(inputs, part);
      const Tensor<T> y = detail::gather_rows<T>(targets, part);
      opt.zero_grad();
      const Tensor<T> pred = net.forward(x);
      const auto loss = mse_loss<T>(pred.values(), y.values());
      if (!std::isfinite(static_cast<double>(loss.value))) {
        throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch));
      }
      net.backward(Tensor<T>(pred.shape(), loss.grad));
      opt.step();
      train_total += static_cast<double>(loss.value) * static_cast<double>(part.size());
    }
    const double val_loss = detail::dataset_loss(net, inputs, targets, val);
    if (!std::isfinite(val_loss)) throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch));
    const bool improved = val_loss < best;
    log.push_back({epoch, train_total / static_cast<double>(train.size()), val_loss, improved});
    if (improved) {
      best = val_loss;
      best_params = detail::snapshot(net);
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  detail::restore(net, best_params);
  return log;
}

/// Maps a latent to a configuration: dense width -> 64 -> 64 -> 6, the same
/// shape for every encoder.
template <typename T>
class RegressorModel {
 public:
  static constexpr std::size_t kHidden = 64;

  RegressorModel() = default;
  explicit RegressorModel(std::size_t input_width)
      : width_(input_width), net_(make_mlp<T>(input_width, {kHidden, kHidden}, kConfigDims)) {}

  std::size_t input_width() const noexcept { return width_; }
  Sequential<T>& network() noexcept { return net_; }
  const Sequential<T>& network() const noexcept { return net_; }

  bool normalizes() const noexcept { return !mean_.empty(); }
  const std::vector<double>& latent_mean() const { return mean_; }
  const std::vector<double>& latent_scale() const { return scale_; }
  void set_normalization(std::vector<double> mean, std::vector<double> scale) {
    if (!mean.empty() && (mean.size() != width_ || scale.size() != width_)) {
      throw DimensionError("normalization statistics must match input width " + std::to_string(width_));
    }
    mean_ = std::move(mean);
    scale_ = std::move(scale);
  }

  std::vector<double> prepare(const LatentVector& z) const {
    if (z.width() != width_) {
      throw ValidationError("latent width " + std::to_string(z.width()) + " does not match regressor input " +
                            std::to_string(width_));
    }
    std::vector<double> v = z.values;
    if (normalizes())
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] - mean_[i]) / scale_[i];
    return v;
  }

 private:
  std::size_t width_ = 0;
  Sequential<T> net_;
  std::vector<double> mean_, scale_;
};

struct Prediction {
  Configuration config;                    // clamped to [0,1]
  std::array<double, kConfigDims> raw{};   // linear outputs before clamping
};

template <typename T>
Prediction predict(const RegressorModel<T>& model, const LatentVector& z) {
  const auto v = model.prepare(z);
  Tensor<T> x({1, v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) x[i] = static_cast<T>(v[i]);
  const Tensor<T> y = model.network().infer(x);
  Prediction p;
  for (std::size_t i = 0; i < kConfigDims; ++i) {
    p.raw[i] = static_cast<double>(y[i]);
    p.config[i] = std::clamp(p.raw[i], 0.0, 1.0);
  }
  return p;
}

inline std::vector<double> as_row(const Configuration& c) { return {c.a.begin(), c.a.end()}; }

template <typename T>
struct TrainedRegressor {
  RegressorModel<T> model;
  std::vector<EpochLog> log;
};

template <typename T>
TrainedRegressor<T> train_regressor(const std::vector<LatentVector>& latents, const std::vector<Configuration>& targets,
                                    const TrainingConfig& cfg) {
  if (latents.size() != targets.size()) {
    throw ValidationError("latent count " + std::to_string(latents.size()) + " != target count " +
                          std::to_string(targets.size()));
  }
  if (latents.size() < 50) throw ValidationError("regressor training needs at least 50 samples");
  const std::size_t width = latents.front().width();
  for (std::size_t i = 0; i < latents.size(); ++i) {
    if (latents[i].width() != width) {
      throw ValidationError("latent " + std::to_string(i) + " has width " + std::to_string(latents[i].width()) +
                            ", expected " + std::to_string(width));
    }
    targets[i].validate();
  }

  TrainedRegressor<T> out{RegressorModel<T>(width), {}};
  Rng init_rng = stream_rng(cfg.seed, 0x7265);
  out.model.network().init(init_rng);
  // Zero output weights: training starts from a constant predictor.
  out.model.network().parameters().back()->weights.fill(T(0));

  if (cfg.normalize_latents) {
    std::vector<double> mean(width, 0.0), var(width, 0.0);
    for (const auto& z : latents)
      for (std::size_t j = 0; j < width; ++j) mean[j] += z.values[j];
    for (auto& m : mean) m /= static_cast<double>(latents.size());
    for (const auto& z : latents)
      for (std::size_t j = 0; j < width; ++j) var[j] += (z.values[j] - mean[j]) * (z.values[j] - mean[j]);
    for (auto& v : var) v = std::max(std::sqrt(v / static_cast<double>(latents.size())), 1e-8);
    out.model.set_normalization(std::move(mean), std::move(var));
  }

  std::vector<std::vector<double>> x, y;
  x.reserve(latents.size());
  y.reserve(targets.size());
  for (const auto& z : latents) x.push_back(out.model.prepare(z));
  for (const auto& c : targets) y.push_back(as_row(c));
  out.log = fit_supervised(out.model.network(), x, y, cfg);
  return out;
}

}  // namespace vprop
