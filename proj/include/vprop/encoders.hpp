#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "vprop/adam.hpp"
#include "vprop/checkpoint.hpp"
#include "vprop/loss.hpp"
#include "vprop/network.hpp"
#include "vprop/random.hpp"
#include "vprop/regressor.hpp"
#include "vprop/scene.hpp"

namespace vprop {

enum class EncoderKind { kFiducial, kVae, kBackbone };

inline const char* encoder_kind_name(EncoderKind k) {
  switch (k) {
    case EncoderKind::kFiducial: return "fiducial";
    case EncoderKind::kVae: return "vae";
    case EncoderKind::kBackbone: return "backbone";
  }
  return "?";
}

inline EncoderKind parse_encoder_kind(const std::string& s) {
  if (s == "fiducial") return EncoderKind::kFiducial;
  if (s == "vae") return EncoderKind::kVae;
  if (s == "backbone") return EncoderKind::kBackbone;
  throw ConfigError("unknown encoder kind '" + s + "' (expected fiducial, vae or backbone)");
}

// -- bag of fiducials ----------------------------------------------------------

inline constexpr std::size_t kFiducialWidth = 128;
inline constexpr std::size_t kFiducialSlot = 9;  // 8 corner coordinates + visibility flag

/// Marker i occupies entries [9i, 9i + 9): x1, y1, ..., x4, y4, visible.
/// Entries 90..127 are zero padding.
inline LatentVector encode_fiducial(std::span<const MarkerDetection> detections) {
  if (detections.size() != kMarkerCount) {
    throw ValidationError("fiducial encoding needs 10 detections, got " + std::to_string(detections.size()));
  }
  LatentVector z{std::vector<double>(kFiducialWidth, 0.0)};
  for (std::size_t i = 0; i < kMarkerCount; ++i) {
    const MarkerDetection& d = detections[i];
    if (d.id != static_cast<int>(i)) {
      throw ValidationError("detection " + std::to_string(i) + " carries marker id " + std::to_string(d.id));
    }
    if (!d.visible) continue;
    std::copy(d.corners.begin(), d.corners.end(), z.values.begin() + static_cast<long>(i * kFiducialSlot));
    z.values[i * kFiducialSlot + 8] = 1.0;
  }
  return z;
}

// -- image helpers ----------------------------------------------------------------

template <typename T>
Tensor<T> images_to_tensor(std::span<const Image> images) {
  if (images.empty()) throw ValidationError("no images");
  const auto w = static_cast<std::size_t>(images[0].width), h = static_cast<std::size_t>(images[0].height);
  Tensor<T> t({images.size(), 1, h, w});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].width != images[0].width || images[i].height != images[0].height) {
      throw ValidationError("image " + std::to_string(i) + " is " + std::to_string(images[i].width) + "x" +
                            std::to_string(images[i].height) + ", expected " + std::to_string(w) + "x" +
                            std::to_string(h));
    }
    std::transform(images[i].pixels.begin(), images[i].pixels.end(), t.data() + i * w * h,
                   [](double v) { return static_cast<T>(v); });
  }
  return t;
}

/// Appends a stride-2 conv stack (kernel 3, pad 1, leaky-ReLU) that flattens to a vector.
template <typename T>
void add_conv_stack(Sequential<T>& net, std::span<const std::size_t> channels, std::size_t h, std::size_t w) {
  std::size_t in = 1;
  for (std::size_t c : channels) {
    net.template add<Conv2d<T>>(in, c, 3, 2, 1).template add<LeakyRelu<T>>();
    in = c;
    h = (h + 1) / 2;
    w = (w + 1) / 2;
  }
  net.template add<Reshape<T>>(Shape{in * h * w});
}

inline void check_image_dims(int w, int h) {
  if (w <= 0 || h <= 0 || w % 16 != 0 || h % 16 != 0) {
    throw ValidationError("encoder images must have sides divisible by 16, got " + std::to_string(w) + "x" +
                          std::to_string(h));
  }
}

// -- convolutional VAE ------------------------------------------------------------

struct VaeHyper {
  std::size_t epochs = 300;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double beta = 1e-3;  // KL weight against per-pixel MSE
  std::uint64_t seed = 0;
};

struct VaeEpochLog {
  std::size_t epoch = 0;
  double reconstruction = 0;  // per-pixel MSE, averaged over the epoch
  double kl = 0;              // per-sample KL, averaged over the epoch
  double loss = 0;
  friend bool operator==(const VaeEpochLog&, const VaeEpochLog&) = default;
};

inline std::string vae_log_csv(const std::vector<VaeEpochLog>& log) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,reconstruction,kl,loss\n";
  for (const auto& e : log) os << e.epoch << ',' << e.reconstruction << ',' << e.kl << ',' << e.loss << '\n';
  return os.str();
}

/// Encoder: conv 8/16/32/64 (stride 2) -> dense mu / logvar heads.
/// Decoder: dense -> 64 x h/16 x w/16 -> mirrored transposed convs -> sigmoid.
/// Only mu(o) is used as the latent; the decoder is kept for diagnostics until discarded.
template <typename T>
class VaeModel {
 public:
  static constexpr std::size_t kChannels[4] = {8, 16, 32, 64};

  VaeModel() = default;
  VaeModel(std::size_t width, int image_width = 64, int image_height = 64)
      : width_(width), image_w_(image_width), image_h_(image_height) {
    check_image_dims(image_width, image_height);
    const std::size_t gh = static_cast<std::size_t>(image_height) / 16, gw = static_cast<std::size_t>(image_width) / 16;
    const std::size_t flat = kChannels[3] * gh * gw;
    add_conv_stack<T>(encoder_, kChannels, static_cast<std::size_t>(image_height), static_cast<std::size_t>(image_width));
    mu_.template add<Dense<T>>(flat, width);
    logvar_.template add<Dense<T>>(flat, width);
    decoder_.template add<Dense<T>>(width, flat).template add<LeakyRelu<T>>();
    decoder_.template add<Reshape<T>>(Shape{kChannels[3], gh, gw});
    for (int i = 3; i > 0; --i) {
      decoder_.template add<ConvTranspose2d<T>>(kChannels[i], kChannels[i - 1], 4, 2, 1).template add<LeakyRelu<T>>();
    }
    decoder_.template add<ConvTranspose2d<T>>(kChannels[0], 1, 4, 2, 1).template add<Sigmoid<T>>();
  }

  void init(Rng& rng) {
    encoder_.init(rng);
    mu_.init(rng);
    logvar_.init(rng);
    decoder_.init(rng);
    // Start with small variances so early samples stay near the mean.
    for (auto& v : logvar_.parameters()[0]->weights.vec()) v *= T(0.1);
  }

  std::size_t width() const noexcept { return width_; }
  int image_width() const noexcept { return image_w_; }
  int image_height() const noexcept { return image_h_; }
  bool has_decoder() const noexcept { return decoder_.size() > 0; }
  void discard_decoder() { decoder_ = Sequential<T>(); }

  Sequential<T>& encoder() { return encoder_; }
  Sequential<T>& mu_head() { return mu_; }
  Sequential<T>& logvar_head() { return logvar_; }
  Sequential<T>& decoder() { return decoder_; }
  const Sequential<T>& encoder() const { return encoder_; }
  const Sequential<T>& mu_head() const { return mu_; }
  const Sequential<T>& decoder() const { return decoder_; }

  /// Networks in checkpoint order.
  std::vector<Sequential<T>*> networks() {
    std::vector<Sequential<T>*> n{&encoder_, &mu_, &logvar_};
    if (has_decoder()) n.push_back(&decoder_);
    return n;
  }
  std::vector<const Sequential<T>*> networks() const {
    std::vector<const Sequential<T>*> n{&encoder_, &mu_, &logvar_};
    if (has_decoder()) n.push_back(&decoder_);
    return n;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* s : networks()) n += s->parameter_count();
    return n;
  }

  Tensor<T> mean_batch(const Tensor<T>& images) const {
    check_input(images.shape());
    return mu_.infer(encoder_.infer(images));
  }

  LatentVector encode(const Image& image) const {
    const Image one[] = {image};
    const Tensor<T> mu = mean_batch(images_to_tensor<T>(one));
    return {std::vector<double>(mu.vec().begin(), mu.vec().end())};
  }

  Tensor<T> reconstruct(const Tensor<T>& images) const {
    if (!has_decoder()) throw StateError("VAE decoder was discarded");
    return decoder_.infer(mean_batch(images));
  }

  /// Mean per-pixel squared error of decoder(mu(o)) against o.
  double reconstruction_mse(std::span<const Image> images) const {
    double total = 0;
    std::size_t count = 0;
    for (std::size_t b = 0; b < images.size(); b += 64) {
      const auto part = images.subspan(b, std::min<std::size_t>(64, images.size() - b));
      const Tensor<T> x = images_to_tensor<T>(part);
      const Tensor<T> r = reconstruct(x);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = static_cast<double>(r[i]) - static_cast<double>(x[i]);
        total += d * d;
      }
      count += x.size();
    }
    return total / static_cast<double>(count);
  }

  void check_input(const Shape& s) const {
    if (s.size() != 4 || s[1] != 1 || s[2] != static_cast<std::size_t>(image_h_) ||
        s[3] != static_cast<std::size_t>(image_w_)) {
      throw ValidationError("VAE expects [batch x 1 x " + std::to_string(image_h_) + " x " +
                            std::to_string(image_w_) + "] images, got " + shape_str(s));
    }
  }

 private:
  std::size_t width_ = 0;
  int image_w_ = 64;
  int image_h_ = 64;
  Sequential<T> encoder_, mu_, logvar_, decoder_;
};

template <typename T>
struct TrainedVae {
  VaeModel<T> model;
  std::vector<VaeEpochLog> log;
};

/// Minimizes per-pixel reconstruction MSE + beta * KL with reparameterized
/// sampling z = mu + exp(logvar / 2) * eps.
template <typename T>
TrainedVae<T> train_conv_vae(std::span<const Image> images, std::size_t width, const VaeHyper& hyper) {
  if (images.empty()) throw ValidationError("VAE training split is empty");
  if (images.size() < 100) {
    throw ValidationError("VAE training needs at least 100 images, got " + std::to_string(images.size()));
  }
  if (width != 128 && width != 256) throw ValidationError("latent width must be 128 or 256");
  const Tensor<T> all = images_to_tensor<T>(images);

  TrainedVae<T> out{VaeModel<T>(width, images[0].width, images[0].height), {}};
  VaeModel<T>& m = out.model;
  Rng rng = stream_rng(hyper.seed, 0x7661);
  m.init(rng);
  std::vector<LayerParams<T>*> params;
  for (auto* net : m.networks())
    for (auto* p : net->parameters()) params.push_back(p);
  AdamConfig acfg;
  acfg.learning_rate = hyper.learning_rate;
  Adam<T> opt(params, acfg);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const std::size_t n = images.size(), plane = all.size() / n;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const T beta = static_cast<T>(hyper.beta);

  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double recon_sum = 0, kl_sum = 0;
    for (std::size_t b = 0; b < n; b += hyper.batch_size) {
      const std::size_t bs = std::min(hyper.batch_size, n - b);
      Tensor<T> x({bs, 1, all.dim(2), all.dim(3)});
      for (std::size_t i = 0; i < bs; ++i) std::copy_n(all.data() + order[b + i] * plane, plane, x.data() + i * plane);

      opt.zero_grad();
      const Tensor<T> h = m.encoder().forward(x);
      const Tensor<T> mu = m.mu_head().forward(h);
      const Tensor<T> lv = m.logvar_head().forward(h);
      Tensor<T> z(mu.shape()), eps(mu.shape());
      for (std::size_t i = 0; i < z.size(); ++i) {
        eps[i] = static_cast<T>(gauss(rng));
        z[i] = mu[i] + std::exp(T(0.5) * lv[i]) * eps[i];
      }
      const Tensor<T> xr = m.decoder().forward(z);
      const auto recon = mse_loss<T>(xr.values(), x.values());
      const auto kl = kl_diag_gaussian<T>(mu.values(), lv.values());
      const T kl_mean = kl.value / static_cast<T>(bs);
      if (!std::isfinite(static_cast<double>(recon.value)) || !std::isfinite(static_cast<double>(kl_mean))) {
        throw TrainingError("non-finite VAE loss at epoch " + std::to_string(epoch));
      }
      recon_sum += static_cast<double>(recon.value) * static_cast<double>(bs);
      kl_sum += static_cast<double>(kl.value);

      const Tensor<T> gz = m.decoder().backward(Tensor<T>(xr.shape(), recon.grad));
      Tensor<T> gmu(mu.shape()), glv(lv.shape());
      const T kl_scale = beta / static_cast<T>(bs);
      for (std::size_t i = 0; i < gz.size(); ++i) {
        gmu[i] = gz[i] + kl_scale * kl.grad_mu[i];
        glv[i] = gz[i] * eps[i] * T(0.5) * std::exp(T(0.5) * lv[i]) + kl_scale * kl.grad_logvar[i];
      }
      Tensor<T> gh = m.mu_head().backward(gmu);
      const Tensor<T> gh2 = m.logvar_head().backward(glv);
      for (std::size_t i = 0; i < gh.size(); ++i) gh[i] += gh2[i];
      m.encoder().backward(gh);
      opt.step();
    }
    const double r = recon_sum / static_cast<double>(n), k = kl_sum / static_cast<double>(n);
    out.log.push_back({epoch, r, k, r + hyper.beta * k});
  }
  return out;
}

template <typename T>
LatentVector encode_vae(const VaeModel<T>& model, const Image& image) {
  if (image.width != model.image_width() || image.height != model.image_height()) {
    throw ValidationError("image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                          " does not match VAE input " + std::to_string(model.image_width()) + "x" +
                          std::to_string(model.image_height()));
  }
  return model.encode(image);
}

// -- frozen backbone + proprioception-tuned reductor ------------------------------

/// Fixed random-weight conv feature extractor (stride-2 convs, channels
/// 8/16/32/F/(h/16 * w/16)). Parameters never change after construction.
template <typename T>
class BackboneModel {
 public:
  BackboneModel(std::uint64_t seed, std::size_t feature_width = 1024, int image_width = 64, int image_height = 64)
      : seed_(seed), features_(feature_width), image_w_(image_width), image_h_(image_height) {
    check_image_dims(image_width, image_height);
    const std::size_t cells = static_cast<std::size_t>(image_width / 16) * static_cast<std::size_t>(image_height / 16);
    if (feature_width == 0 || feature_width % cells != 0) {
      throw ValidationError("feature width " + std::to_string(feature_width) + " must be a multiple of " +
                            std::to_string(cells));
    }
    const std::size_t channels[4] = {8, 16, 32, feature_width / cells};
    add_conv_stack<T>(net_, channels, static_cast<std::size_t>(image_height), static_cast<std::size_t>(image_width));
    Rng rng = stream_rng(seed, 0x6262);
    net_.init(rng);
    for (auto* p : net_.parameters()) {
      std::uniform_real_distribution<double> d(-0.05, 0.05);
      for (auto& v : p->bias.vec()) v = static_cast<T>(d(rng));
    }
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t feature_width() const noexcept { return features_; }
  int image_width() const noexcept { return image_w_; }
  int image_height() const noexcept { return image_h_; }
  const Sequential<T>& network() const noexcept { return net_; }

  Tensor<T> features(const Tensor<T>& images) const { return net_.infer(images); }

  std::vector<std::vector<double>> features(std::span<const Image> images) const {
    std::vector<std::vector<double>> out;
    out.reserve(images.size());
    for (std::size_t b = 0; b < images.size(); b += 64) {
      const auto part = images.subspan(b, std::min<std::size_t>(64, images.size() - b));
      const Tensor<T> f = features(images_to_tensor<T>(part));
      for (std::size_t i = 0; i < part.size(); ++i)
        out.emplace_back(f.data() + i * features_, f.data() + (i + 1) * features_);
    }
    return out;
  }

 private:
  std::uint64_t seed_;
  std::size_t features_;
  int image_w_, image_h_;
  Sequential<T> net_;
};

template <typename T>
BackboneModel<T> build_backbone(std::uint64_t seed, std::size_t feature_width = 1024) {
  return BackboneModel<T>(seed, feature_width);
}

/// Dense projection feature_width -> hidden... -> width, paired with one backbone.
template <typename T>
class ReductorModel {
 public:
  ReductorModel() = default;
  ReductorModel(std::size_t feature_width, std::vector<std::size_t> hidden, std::size_t width, std::uint64_t backbone_seed)
      : feature_width_(feature_width),
        width_(width),
        backbone_seed_(backbone_seed),
        hidden_(std::move(hidden)),
        net_(make_mlp<T>(feature_width, std::span<const std::size_t>(hidden_), width)) {
    if (feature_width < width) throw ValidationError("backbone features narrower than latent width");
  }

  std::size_t feature_width() const noexcept { return feature_width_; }
  std::size_t width() const noexcept { return width_; }
  std::uint64_t backbone_seed() const noexcept { return backbone_seed_; }
  const std::vector<std::size_t>& hidden() const noexcept { return hidden_; }
  Sequential<T>& network() noexcept { return net_; }
  const Sequential<T>& network() const noexcept { return net_; }

  LatentVector reduce(std::span<const double> features) const {
    Tensor<T> x({1, features.size()});
    for (std::size_t i = 0; i < features.size(); ++i) x[i] = static_cast<T>(features[i]);
    const Tensor<T> z = net_.infer(x);
    return {std::vector<double>(z.vec().begin(), z.vec().end())};
  }

 private:
  std::size_t feature_width_ = 0;
  std::size_t width_ = 0;
  std::uint64_t backbone_seed_ = 0;
  std::vector<std::size_t> hidden_;
  Sequential<T> net_;
};

/// Temporary regression head used only while fine-tuning a reductor.
template <typename T>
Sequential<T> make_surrogate_head(std::size_t width) {
  return make_mlp<T>(width, {64, 16}, kConfigDims);
}

/// Supervised images with the trajectories they came from.
struct LabeledImages {
  std::string split;
  std::vector<Image> images;
  std::vector<Configuration> configs;
  std::vector<int> trajectory_ids;
};

struct ReductorHyper {
  TrainingConfig training;
  std::vector<std::size_t> hidden{512};
};

template <typename T>
struct TrainedReductor {
  ReductorModel<T> model;
  std::vector<EpochLog> log;
};

/// Untrained reductor: the random-projection control for the fine-tuning step.
template <typename T>
ReductorModel<T> random_reductor(const BackboneModel<T>& backbone, std::size_t width, const ReductorHyper& hyper) {
  ReductorModel<T> r(backbone.feature_width(), hyper.hidden, width, backbone.seed());
  Rng rng = stream_rng(hyper.training.seed, 0x7264);
  r.network().init(rng);
  return r;
}

/// Trains reductor + surrogate head on configuration MSE with the backbone
/// frozen, then drops the head and returns only the reductor.
template <typename T>
TrainedReductor<T> train_reductor(const BackboneModel<T>& backbone, const LabeledImages& finetune, std::size_t width,
                                  const ReductorHyper& hyper, std::span<const int> regression_trajectories = {}) {
  if (finetune.images.size() != finetune.configs.size()) {
    throw ValidationError("fine-tune split has mismatched image and configuration counts");
  }
  if (finetune.images.empty()) throw ValidationError("fine-tune split is empty");
  const std::set<int> reserved(regression_trajectories.begin(), regression_trajectories.end());
  for (int id : finetune.trajectory_ids) {
    if (reserved.count(id)) {
      throw ProtocolError("fine-tune split '" + finetune.split + "' shares trajectory " + std::to_string(id) +
                          " with the regression split");
    }
  }
  if (width != 128 && width != 256) throw ValidationError("latent width must be 128 or 256");

  ReductorModel<T> reductor = random_reductor(backbone, width, hyper);
  Sequential<T> full = reductor.network();
  Rng rng = stream_rng(hyper.training.seed, 0x6864);
  Sequential<T> head = make_surrogate_head<T>(width);
  head.init(rng);
  full.append(head);

  const auto features = backbone.features(finetune.images);
  std::vector<std::vector<double>> targets;
  for (const auto& c : finetune.configs) targets.push_back(as_row(c));
  TrainedReductor<T> out;
  out.log = fit_supervised(full, features, targets, hyper.training);
  reductor.network() = full.prefix(reductor.network().size());
  out.model = std::move(reductor);
  return out;
}

template <typename T>
LatentVector encode_backbone(const BackboneModel<T>& backbone, const ReductorModel<T>& reductor, const Image& image) {
  if (reductor.backbone_seed() != backbone.seed() || reductor.feature_width() != backbone.feature_width()) {
    throw ValidationError("reductor was built for backbone seed " + std::to_string(reductor.backbone_seed()) + " / " +
                          std::to_string(reductor.feature_width()) + " features, not seed " +
                          std::to_string(backbone.seed()) + " / " + std::to_string(backbone.feature_width()));
  }
  const Image one[] = {image};
  return reductor.reduce(backbone.features(std::span<const Image>(one)).front());
}

// -- deployable encoder + checkpoint container ------------------------------------

struct EncoderDescriptor {
  EncoderKind kind = EncoderKind::kFiducial;
  std::size_t width = kFiducialWidth;
  std::uint64_t backbone_seed = 0;
  std::size_t feature_width = 1024;
  std::vector<std::size_t> reductor_hidden{512};
  int image_width = 64;
  int image_height = 64;
  bool decoder = false;
  KeyValues provenance;  // free-form training record, stored under "provenance."

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("kind", encoder_kind_name(kind));
    kv.set("width", static_cast<long long>(width));
    kv.set("backbone_seed", std::to_string(backbone_seed));
    kv.set("feature_width", static_cast<long long>(feature_width));
    std::string h;
    for (auto v : reductor_hidden) h += (h.empty() ? "" : " ") + std::to_string(v);
    kv.set("reductor_hidden", h);
    kv.set("image_width", static_cast<long long>(image_width));
    kv.set("image_height", static_cast<long long>(image_height));
    kv.set("decoder", static_cast<long long>(decoder ? 1 : 0));
    for (const auto& k : provenance.keys()) kv.set("provenance." + k, provenance.str(k));
    return kv;
  }
  static EncoderDescriptor from_kv(const KeyValues& kv) {
    EncoderDescriptor d;
    d.kind = parse_encoder_kind(kv.str("kind"));
    d.width = static_cast<std::size_t>(kv.integer("width"));
    d.backbone_seed = std::stoull(kv.str("backbone_seed", "0"));
    d.feature_width = static_cast<std::size_t>(kv.integer("feature_width", 1024));
    d.reductor_hidden.clear();
    for (double v : kv.nums("reductor_hidden")) d.reductor_hidden.push_back(static_cast<std::size_t>(v));
    d.image_width = static_cast<int>(kv.integer("image_width", 64));
    d.image_height = static_cast<int>(kv.integer("image_height", 64));
    d.decoder = kv.integer("decoder", 0) != 0;
    for (const auto& k : kv.keys())
      if (k.rfind("provenance.", 0) == 0) d.provenance.set(k.substr(11), kv.str(k));
    return d;
  }
};

/// Any of the three encoder families behind one interface. Inference is const
/// and consumes no randomness.
template <typename T>
class Encoder {
 public:
  static Encoder fiducial() { return Encoder(EncoderDescriptor{}); }
  static Encoder from_vae(VaeModel<T> vae) {
    EncoderDescriptor d;
    d.kind = EncoderKind::kVae;
    d.width = vae.width();
    d.image_width = vae.image_width();
    d.image_height = vae.image_height();
    d.decoder = vae.has_decoder();
    Encoder e(d);
    e.vae_ = std::move(vae);
    return e;
  }
  static Encoder from_backbone(const BackboneModel<T>& backbone, ReductorModel<T> reductor) {
    EncoderDescriptor d;
    d.kind = EncoderKind::kBackbone;
    d.width = reductor.width();
    d.backbone_seed = backbone.seed();
    d.feature_width = backbone.feature_width();
    d.reductor_hidden = reductor.hidden();
    d.image_width = backbone.image_width();
    d.image_height = backbone.image_height();
    Encoder e(d);
    e.backbone_.emplace(backbone);
    e.reductor_ = std::move(reductor);
    return e;
  }

  const EncoderDescriptor& descriptor() const noexcept { return desc_; }
  void set_provenance(KeyValues p) { desc_.provenance = std::move(p); }
  EncoderKind kind() const noexcept { return desc_.kind; }
  std::size_t width() const noexcept { return desc_.width; }
  std::string name() const { return std::string(encoder_kind_name(desc_.kind)) + "-" + std::to_string(desc_.width); }
  const VaeModel<T>* vae() const { return vae_ ? &*vae_ : nullptr; }
  const ReductorModel<T>* reductor() const { return reductor_ ? &*reductor_ : nullptr; }
  const BackboneModel<T>* backbone() const { return backbone_ ? &*backbone_ : nullptr; }

  LatentVector encode(const Image& image, const DetectionSet& detections) const {
    switch (desc_.kind) {
      case EncoderKind::kFiducial: return encode_fiducial(detections);
      case EncoderKind::kVae: return encode_vae(*vae_, image);
      case EncoderKind::kBackbone: return encode_backbone(*backbone_, *reductor_, image);
    }
    throw ValidationError("unknown encoder");
  }

  /// Batched encoding; images are only touched by image-based encoders.
  std::vector<LatentVector> encode_all(std::span<const Image> images, std::span<const DetectionSet> detections) const {
    std::vector<LatentVector> out;
    out.reserve(detections.size());
    if (desc_.kind == EncoderKind::kFiducial) {
      for (const auto& d : detections) out.push_back(encode_fiducial(d));
      return out;
    }
    if (desc_.kind == EncoderKind::kBackbone) {
      for (const auto& f : backbone_->features(images)) out.push_back(reductor_->reduce(f));
      return out;
    }
    for (std::size_t b = 0; b < images.size(); b += 64) {
      const auto part = images.subspan(b, std::min<std::size_t>(64, images.size() - b));
      const Tensor<T> mu = vae_->mean_batch(images_to_tensor<T>(part));
      for (std::size_t i = 0; i < part.size(); ++i)
        out.push_back({std::vector<double>(mu.data() + i * desc_.width, mu.data() + (i + 1) * desc_.width)});
    }
    return out;
  }

  std::vector<std::uint8_t> save() const {
    std::string head = "VPROP-ENCODER 1\n" + desc_.to_kv().to_string() + "end\n";
    std::vector<std::uint8_t> bytes(head.begin(), head.end());
    std::vector<const Sequential<T>*> nets;
    if (vae_) nets = vae_->networks();
    if (reductor_) nets.push_back(&reductor_->network());
    const auto blob = save_params<T>(std::span<const Sequential<T>* const>(nets));
    bytes.insert(bytes.end(), blob.begin(), blob.end());
    return bytes;
  }

  static Encoder load(std::span<const std::uint8_t> bytes) {
    const std::string text(bytes.begin(), bytes.begin() + static_cast<long>(std::min<std::size_t>(bytes.size(), std::size_t{1} << 20)));
    const std::string magic = "VPROP-ENCODER 1\n";
    const auto end = text.find("\nend\n");
    if (text.rfind(magic, 0) != 0 || end == std::string::npos) throw LoadError("not an encoder checkpoint");
    const auto desc = EncoderDescriptor::from_kv(KeyValues::parse(text.substr(magic.size(), end + 1 - magic.size())));
    const auto blob = bytes.subspan(end + 5);
    Encoder e(desc);
    if (desc.kind == EncoderKind::kVae) {
      VaeModel<T> vae(desc.width, desc.image_width, desc.image_height);
      if (!desc.decoder) vae.discard_decoder();
      auto nets = vae.networks();
      load_params<T>(blob, std::span<Sequential<T>* const>(nets));
      e.vae_ = std::move(vae);
    } else if (desc.kind == EncoderKind::kBackbone) {
      e.backbone_.emplace(desc.backbone_seed, desc.feature_width, desc.image_width, desc.image_height);
      ReductorModel<T> r(desc.feature_width, desc.reductor_hidden, desc.width, desc.backbone_seed);
      load_params<T>(blob, r.network());
      e.reductor_ = std::move(r);
    } else {
      std::vector<Sequential<T>*> none;
      load_params<T>(blob, std::span<Sequential<T>* const>(none));
    }
    return e;
  }

 private:
  explicit Encoder(EncoderDescriptor d) : desc_(std::move(d)) {}

  EncoderDescriptor desc_;
  std::optional<VaeModel<T>> vae_;
  std::optional<BackboneModel<T>> backbone_;
  std::optional<ReductorModel<T>> reductor_;
};

}  // namespace vprop
