#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "vprop/checkpoint.hpp"
#include "vprop/dataset.hpp"
#include "vprop/encoders.hpp"
#include "vprop/eval.hpp"
#include "vprop/regressor.hpp"

namespace vprop {

namespace fs = std::filesystem;

/// One cell of the experiment grid: dataset recipe, encoder choice and all
/// training hyperparameters, read from `key = value` text.
struct ExperimentConfig {
  std::string name;
  std::uint64_t seed = 1;
  fs::path data_dir = "data";
  fs::path output_dir;
  DatasetSpec dataset;
  EncoderKind encoder = EncoderKind::kFiducial;
  std::size_t width = kFiducialWidth;
  VaeHyper vae;
  std::uint64_t backbone_seed = 11;
  std::size_t feature_width = 1024;
  ReductorHyper reductor;
  TrainingConfig regressor;

  void validate() const {
    if (width != 128 && width != 256) throw ValidationError("width must be 128 or 256, got " + std::to_string(width));
    if (encoder == EncoderKind::kFiducial && width != kFiducialWidth) {
      throw ValidationError("the fiducial encoder has a fixed width of 128");
    }
    if (name.empty() || name.find_first_of(",/ \t") != std::string::npos) {
      throw ValidationError("model name '" + name + "' must be non-empty without commas, slashes or spaces");
    }
    dataset.validate();
    regressor.validate();
    reductor.training.validate();
    if (vae.epochs < 1 || vae.batch_size < 1 || !(vae.learning_rate > 0) || !(vae.beta >= 0)) {
      throw ValidationError("VAE epochs, batch size and learning rate must be positive and beta >= 0");
    }
    if (feature_width < width) throw ValidationError("backbone features must be at least as wide as the latent");
  }

  static ExperimentConfig from_kv(const KeyValues& kv, std::optional<std::uint64_t> seed_override = {}) {
    check_keys(kv);
    ExperimentConfig c;
    c.seed = seed_override ? *seed_override : parse_u64(kv, "seed", 1);
    c.encoder = parse_encoder_kind(kv.str("encoder", "fiducial"));
    c.width = static_cast<std::size_t>(kv.integer("width", 128));
    c.name = kv.str("name", std::string(encoder_kind_name(c.encoder)) + "-" + std::to_string(c.width));
    c.data_dir = kv.str("data_dir", "data");
    c.output_dir = kv.has("output_dir") ? fs::path(kv.str("output_dir")) : fs::path("runs") / c.name;

    DatasetSpec& d = c.dataset;
    d.seed = parse_u64(kv, "dataset_seed", c.seed);
    d.camera_name = kv.str("camera", "side");
    d.camera = camera_from_kv(kv, "camera.", camera_preset(d.camera_name));
    d.noise = noise_from_kv(kv, "noise.");
    d.geometry = geometry_from_kv(kv, "geometry.");
    if (kv.has("sizes")) {
      const auto s = kv.nums("sizes");
      if (s.size() != 4) throw ConfigError("key 'sizes' needs 4 numbers (unsupervised finetune regression test)");
      for (std::size_t i = 0; i < 4; ++i) {
        if (!(s[i] >= 0) || s[i] != static_cast<double>(static_cast<std::size_t>(s[i]))) {
          throw ValidationError("split sizes must be non-negative integers");
        }
        d.sizes[i] = static_cast<std::size_t>(s[i]);
      }
    }
    d.trajectory_length = count(kv, "trajectory_length", d.trajectory_length);
    d.waypoint_interval = count(kv, "waypoint_interval", d.waypoint_interval);
    d.background_seed = parse_u64(kv, "background_seed", d.background_seed);

    c.vae.epochs = count(kv, "vae.epochs", c.vae.epochs);
    c.vae.batch_size = count(kv, "vae.batch_size", c.vae.batch_size);
    c.vae.learning_rate = kv.num("vae.learning_rate", c.vae.learning_rate);
    c.vae.beta = kv.num("vae.beta", c.vae.beta);
    c.vae.seed = c.seed;

    c.backbone_seed = parse_u64(kv, "backbone.seed", c.backbone_seed);
    c.feature_width = count(kv, "backbone.features", c.feature_width);
    if (kv.has("reductor.hidden")) {
      c.reductor.hidden.clear();
      for (double v : kv.nums("reductor.hidden")) {
        if (!(v >= 1)) throw ValidationError("reductor hidden sizes must be positive");
        c.reductor.hidden.push_back(static_cast<std::size_t>(v));
      }
    }
    // Deeper projection chains train with the small-batch, weight-decayed recipe.
    TrainingConfig base;
    if (c.encoder == EncoderKind::kBackbone && c.reductor.hidden.size() > 1) {
      base.learning_rate = 1e-4;
      base.batch_size = 8;
      base.weight_decay = 0.01;
    }
    base.seed = c.seed;
    c.reductor.training = training(kv, "reductor.", base);
    c.regressor = training(kv, "regressor.", base);
    c.validate();
    return c;
  }

  static ExperimentConfig load(const fs::path& path, std::optional<std::uint64_t> seed_override = {}) {
    return from_kv(KeyValues::load(path.string()), seed_override);
  }

  /// Fully resolved configuration; every default is spelled out.
  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("name", name);
    kv.set("seed", std::to_string(seed));
    kv.set("data_dir", data_dir.string());
    kv.set("output_dir", output_dir.string());
    const KeyValues d = dataset_kv();
    for (const auto& k : d.keys()) kv.set(k, d.str(k));
    kv.set("encoder", encoder_kind_name(encoder));
    kv.set("width", static_cast<long long>(width));
    kv.set("vae.epochs", static_cast<long long>(vae.epochs));
    kv.set("vae.batch_size", static_cast<long long>(vae.batch_size));
    kv.set("vae.learning_rate", vae.learning_rate);
    kv.set("vae.beta", vae.beta);
    kv.set("backbone.seed", std::to_string(backbone_seed));
    kv.set("backbone.features", static_cast<long long>(feature_width));
    std::string h;
    for (auto v : reductor.hidden) h += (h.empty() ? "" : " ") + std::to_string(v);
    kv.set("reductor.hidden", h);
    put_training(kv, "reductor.", reductor.training);
    put_training(kv, "regressor.", regressor);
    return kv;
  }

  /// Hash over everything that affects results (paths and name excluded).
  std::string hash() const {
    KeyValues kv = to_kv();
    std::string text;
    for (const auto& k : kv.keys())
      if (k != "name" && k != "data_dir" && k != "output_dir") text += k + "=" + kv.str(k) + "\n";
    return hex64(fnv1a(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size())));
  }

  /// The dataset recipe as stored in a dataset manifest, plus split sizes.
  KeyValues dataset_kv() const {
    KeyValues kv;
    kv.set("dataset_seed", std::to_string(dataset.seed));
    kv.set("camera", dataset.camera_name);
    camera_to_kv(dataset.camera, kv, "camera.");
    noise_to_kv(dataset.noise, kv, "noise.");
    kv.set("sizes", {static_cast<double>(dataset.sizes[0]), static_cast<double>(dataset.sizes[1]),
                     static_cast<double>(dataset.sizes[2]), static_cast<double>(dataset.sizes[3])});
    kv.set("trajectory_length", static_cast<long long>(dataset.trajectory_length));
    kv.set("waypoint_interval", static_cast<long long>(dataset.waypoint_interval));
    kv.set("background_seed", std::to_string(dataset.background_seed));
    const KeyValues g = geometry_to_kv(dataset.geometry);
    for (const auto& k : g.keys()) kv.set("geometry." + k, g.str(k));
    return kv;
  }

 private:
  static void check_keys(const KeyValues& kv) {
    static const std::set<std::string> known = {
        "name", "seed", "data_dir", "output_dir", "dataset_seed", "camera", "sizes", "trajectory_length",
        "waypoint_interval", "background_seed", "encoder", "width", "noise.corner_sigma", "noise.dropout",
        "noise.facing_threshold", "vae.epochs", "vae.batch_size", "vae.learning_rate", "vae.beta", "backbone.seed",
        "backbone.features", "reductor.hidden"};
    static const std::set<std::string> train_keys = {"learning_rate", "batch_size",          "max_epochs", "patience",
                                                     "weight_decay",  "validation_fraction", "normalize"};
    auto training_key = [&](const std::string& k) {
      for (const std::string p : {"reductor.", "regressor."})
        if (k.rfind(p, 0) == 0 && train_keys.count(k.substr(p.size()))) return true;
      return false;
    };
    for (const auto& k : kv.keys()) {
      if (known.count(k) || training_key(k) || k.rfind("geometry.", 0) == 0 || k.rfind("camera.", 0) == 0) continue;
      throw ConfigError("unknown configuration key '" + k + "'");
    }
  }

  static std::uint64_t parse_u64(const KeyValues& kv, const std::string& key, std::uint64_t fallback) {
    if (!kv.has(key)) return fallback;
    const std::string& s = kv.str(key);
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("key '" + key + "': not a seed: " + s);
    return v;
  }

  static std::size_t count(const KeyValues& kv, const std::string& key, std::size_t fallback) {
    const long long v = kv.integer(key, static_cast<long long>(fallback));
    if (v < 0) throw ValidationError("key '" + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
  }

  static TrainingConfig training(const KeyValues& kv, const std::string& p, TrainingConfig t) {
    t.learning_rate = kv.num(p + "learning_rate", t.learning_rate);
    t.batch_size = count(kv, p + "batch_size", t.batch_size);
    t.max_epochs = count(kv, p + "max_epochs", t.max_epochs);
    t.patience = count(kv, p + "patience", t.patience);
    t.weight_decay = kv.num(p + "weight_decay", t.weight_decay);
    t.validation_fraction = kv.num(p + "validation_fraction", t.validation_fraction);
    t.normalize_latents = kv.integer(p + "normalize", t.normalize_latents ? 1 : 0) != 0;
    return t;
  }

  static void put_training(KeyValues& kv, const std::string& p, const TrainingConfig& t) {
    kv.set(p + "learning_rate", t.learning_rate);
    kv.set(p + "batch_size", static_cast<long long>(t.batch_size));
    kv.set(p + "max_epochs", static_cast<long long>(t.max_epochs));
    kv.set(p + "patience", static_cast<long long>(t.patience));
    kv.set(p + "weight_decay", t.weight_decay);
    kv.set(p + "validation_fraction", t.validation_fraction);
    if (p == "regressor.") kv.set(p + "normalize", static_cast<long long>(t.normalize_latents ? 1 : 0));
  }
};

// -- artifact layout ----------------------------------------------------------------

inline fs::path encoder_path(const ExperimentConfig& c) { return c.output_dir / "encoder.ckpt"; }
inline fs::path regressor_path(const ExperimentConfig& c) { return c.output_dir / "regressor.ckpt"; }

/// The split each training stage is allowed to consume.
inline std::string stage_split(const std::string& stage) {
  if (stage == "vae") return "unsupervised";
  if (stage == "reductor") return "finetune";
  if (stage == "regressor") return "regression";
  throw ValidationError("unknown stage '" + stage + "' (expected vae, reductor or regressor)");
}

inline std::string join_ids(const std::vector<int>& ids) {
  std::string s;
  for (int id : ids) s += (s.empty() ? "" : " ") + std::to_string(id);
  return s;
}

inline std::vector<int> parse_ids(const KeyValues& kv, const std::string& key) {
  std::vector<int> ids;
  for (double v : kv.nums(key)) ids.push_back(static_cast<int>(v));
  return ids;
}

/// Where an artifact's training data came from.
struct Provenance {
  std::string dataset;  // manifest hash
  std::string split;
  std::vector<int> trajectories;

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("dataset", dataset);
    kv.set("split", split);
    kv.set("trajectories", join_ids(trajectories));
    return kv;
  }
  static Provenance from_kv(const KeyValues& kv, const std::string& prefix = "") {
    Provenance p;
    p.dataset = kv.str(prefix + "dataset", "");
    p.split = kv.str(prefix + "split", "");
    if (kv.has(prefix + "trajectories")) p.trajectories = parse_ids(kv, prefix + "trajectories");
    return p;
  }
  bool empty() const { return split.empty(); }
};

// -- regressor checkpoint -----------------------------------------------------------

inline constexpr const char* kRegressorMagic = "VPROP-REGRESSOR 1\n";

inline std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + KeyValues::format(x);
  return s;
}

template <typename T>
std::vector<std::uint8_t> save_regressor(const RegressorModel<T>& m, const std::string& encoder_name,
                                         const Provenance& prov) {
  KeyValues kv;
  kv.set("encoder", encoder_name);
  kv.set("input_width", static_cast<long long>(m.input_width()));
  kv.set("normalize", static_cast<long long>(m.normalizes() ? 1 : 0));
  if (m.normalizes()) {
    kv.set("latent_mean", join_doubles(m.latent_mean()));
    kv.set("latent_scale", join_doubles(m.latent_scale()));
  }
  const KeyValues p = prov.to_kv();
  for (const auto& k : p.keys()) kv.set("provenance." + k, p.str(k));
  const std::string head = std::string(kRegressorMagic) + kv.to_string() + "end\n";
  std::vector<std::uint8_t> bytes(head.begin(), head.end());
  const auto blob = save_params(m.network());
  bytes.insert(bytes.end(), blob.begin(), blob.end());
  return bytes;
}

template <typename T>
struct LoadedRegressor {
  RegressorModel<T> model;
  std::string encoder_name;
  Provenance provenance;
};

template <typename T>
LoadedRegressor<T> load_regressor(std::span<const std::uint8_t> bytes) {
  const std::string text(bytes.begin(),
                         bytes.begin() + static_cast<long>(std::min<std::size_t>(bytes.size(), std::size_t{1} << 22)));
  const std::string magic = kRegressorMagic;
  const auto end = text.find("\nend\n");
  if (text.rfind(magic, 0) != 0 || end == std::string::npos) throw LoadError("not a regressor checkpoint");
  KeyValues kv;
  LoadedRegressor<T> out;
  try {
    kv = KeyValues::parse(text.substr(magic.size(), end + 1 - magic.size()));
    out.model = RegressorModel<T>(static_cast<std::size_t>(kv.integer("input_width")));
    if (kv.integer("normalize") != 0) out.model.set_normalization(kv.nums("latent_mean"), kv.nums("latent_scale"));
    out.encoder_name = kv.str("encoder");
    out.provenance = Provenance::from_kv(kv, "provenance.");
  } catch (const LoadError&) {
    throw;
  } catch (const Error& e) {
    throw LoadError(std::string("bad regressor checkpoint header: ") + e.what());
  }
  load_params<T>(bytes.subspan(end + 5), out.model.network());
  return out;
}

// -- commands -----------------------------------------------------------------------

inline std::string manifest_hash(const fs::path& data_dir) {
  return hex64(fnv1a(read_bytes(data_dir / "manifest.txt")));
}

/// Loads the dataset named by the config and checks it was generated from the
/// same recipe.
inline SplitSet load_dataset(const ExperimentConfig& cfg) {
  if (!fs::exists(cfg.data_dir / "manifest.txt")) {
    throw LoadError("no dataset at " + cfg.data_dir.string() + " (run `vprop gen` with this config first)");
  }
  SplitSet set = load_split(cfg.data_dir);
  DatasetSpec want = cfg.dataset;
  if (set.spec.to_kv().to_string() != want.to_kv().to_string() || set.spec.sizes != want.sizes) {
    throw ValidationError("dataset at " + cfg.data_dir.string() +
                          " was generated from a different configuration (rerun `vprop gen`)");
  }
  return set;
}

/// Rows of a split in the order training should see them.
inline std::vector<std::size_t> load_order(const Split& s, std::uint64_t seed) {
  if (s.shuffle_on_load) return s.training_order(seed);
  std::vector<std::size_t> idx(s.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ValidationError("cannot create directory " + dir.string());
}

inline void write_bytes(const fs::path& p, std::span<const std::uint8_t> bytes) { write_file(p.string(), bytes); }

struct GenResult {
  fs::path dir;
  std::string manifest_hash;
};

inline GenResult cmd_gen(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.dataset.validate();
  ensure_dir(cfg.data_dir);
  const SplitSet set = build_datasets(cfg.dataset);
  save_split(set, cfg.data_dir);
  GenResult r{cfg.data_dir, manifest_hash(cfg.data_dir)};
  log << "dataset " << cfg.data_dir.string() << " (manifest " << r.manifest_hash << ")\n";
  for (const auto& s : set.splits) {
    log << "  " << s.name << ": " << s.size() << " frames, trajectories " << join_ids(s.trajectory_ids()) << "\n";
  }
  return r;
}

/// Rejects a stage/split pairing before anything is loaded.
inline void check_stage_split(const std::string& stage, const std::optional<std::string>& requested) {
  const std::string required = stage_split(stage);
  if (!requested) return;
  split_index(*requested);
  if (*requested != required) {
    throw ProtocolError("the " + stage + " stage trains on the '" + required + "' split only; refusing '" +
                        *requested + "'");
  }
}

inline void check_disjoint(const Provenance& p, const Split& split, const std::string& what) {
  const auto ids = split.trajectory_ids();
  const std::set<int> here(ids.begin(), ids.end());
  if (p.split == split.name) {
    throw ProtocolError(what + " was trained on the '" + p.split + "' split, which may not be reused here");
  }
  for (int id : p.trajectories) {
    if (here.count(id)) {
      throw ProtocolError(what + " was trained on trajectory " + std::to_string(id) + ", which belongs to the '" +
                          split.name + "' split");
    }
  }
}

inline void check_same_dataset(const Provenance& p, const std::string& hash, const std::string& what) {
  if (!p.empty() && p.dataset != hash) {
    throw ProtocolError(what + " was trained on dataset " + p.dataset + ", not on this dataset (" + hash + ")");
  }
}

/// The encoder for a config: built in for fiducials, else read from the
/// stage checkpoint.
inline Encoder<Real> load_encoder(const ExperimentConfig& cfg) {
  if (cfg.encoder == EncoderKind::kFiducial) return Encoder<Real>::fiducial();
  const fs::path p = encoder_path(cfg);
  if (!fs::exists(p)) {
    throw LoadError("missing encoder checkpoint " + p.string() + " (run `vprop train --stage " +
                    (cfg.encoder == EncoderKind::kVae ? "vae" : "reductor") + "` first)");
  }
  Encoder<Real> e = Encoder<Real>::load(read_bytes(p));
  if (e.kind() != cfg.encoder || e.width() != cfg.width) {
    throw ValidationError("encoder checkpoint " + p.string() + " holds " + e.name() + ", config expects " +
                          encoder_kind_name(cfg.encoder) + "-" + std::to_string(cfg.width));
  }
  return e;
}

struct TrainResult {
  std::vector<fs::path> written;
};

inline TrainResult cmd_train(const ExperimentConfig& cfg, const std::string& stage, std::ostream& log,
                             const std::optional<std::string>& requested_split = {}) {
  check_stage_split(stage, requested_split);
  if (stage == "vae" && cfg.encoder != EncoderKind::kVae) {
    throw ValidationError("the vae stage does not apply to encoder kind '" + std::string(encoder_kind_name(cfg.encoder)) + "'");
  }
  if (stage == "reductor" && cfg.encoder != EncoderKind::kBackbone) {
    throw ValidationError("the reductor stage does not apply to encoder kind '" +
                          std::string(encoder_kind_name(cfg.encoder)) + "'");
  }
  const SplitSet set = load_dataset(cfg);
  const std::string dhash = manifest_hash(cfg.data_dir);
  const Split& split = set.split(stage_split(stage));
  const auto order = load_order(split, cfg.seed);
  ensure_dir(cfg.output_dir);
  write_text(cfg.output_dir / "config.txt", cfg.to_kv().to_string());
  TrainResult r;
  r.written.push_back(cfg.output_dir / "config.txt");
  const Provenance prov{dhash, split.name, split.trajectory_ids()};

  if (stage == "vae") {
    std::vector<Image> images;
    for (auto i : order) images.push_back(split.frames[i].image);
    log << "training " << cfg.name << " VAE on " << images.size() << " '" << split.name << "' images for "
        << cfg.vae.epochs << " epochs\n";
    auto trained = train_conv_vae<Real>(images, cfg.width, cfg.vae);
    Encoder<Real> enc = Encoder<Real>::from_vae(std::move(trained.model));
    enc.set_provenance(prov.to_kv());
    write_bytes(encoder_path(cfg), enc.save());
    write_text(cfg.output_dir / "encoder_log.csv", vae_log_csv(trained.log));
  } else if (stage == "reductor") {
    const auto backbone = build_backbone<Real>(cfg.backbone_seed, cfg.feature_width);
    const LabeledImages data = labeled_images(split, order);
    log << "fine-tuning " << cfg.name << " reductor on " << data.images.size() << " '" << split.name << "' frames\n";
    const auto reserved = set.split("regression").trajectory_ids();
    auto trained = train_reductor(backbone, data, cfg.width, cfg.reductor, reserved);
    Encoder<Real> enc = Encoder<Real>::from_backbone(backbone, std::move(trained.model));
    enc.set_provenance(prov.to_kv());
    write_bytes(encoder_path(cfg), enc.save());
    write_text(cfg.output_dir / "encoder_log.csv", training_log_csv(trained.log));
  } else {
    const Encoder<Real> enc = load_encoder(cfg);
    const Provenance ep = Provenance::from_kv(enc.descriptor().provenance);
    check_same_dataset(ep, dhash, "encoder " + enc.name());
    if (!ep.empty()) check_disjoint(ep, split, "encoder " + enc.name());
    std::vector<Image> images;
    std::vector<DetectionSet> dets;
    std::vector<Configuration> targets;
    for (auto i : order) {
      if (enc.kind() != EncoderKind::kFiducial) images.push_back(split.frames[i].image);
      dets.push_back(split.frames[i].detections);
      targets.push_back(split.frames[i].config);
    }
    log << "training " << cfg.name << " regressor on " << targets.size() << " '" << split.name << "' frames\n";
    const auto latents = enc.encode_all(images, dets);
    auto trained = train_regressor<Real>(latents, targets, cfg.regressor);
    write_bytes(regressor_path(cfg), save_regressor(trained.model, enc.name(), prov));
    write_text(cfg.output_dir / "regressor_log.csv", training_log_csv(trained.log));
    r.written.push_back(regressor_path(cfg));
    r.written.push_back(cfg.output_dir / "regressor_log.csv");
    for (const auto& p : r.written) log << "wrote " << p.string() << "\n";
    return r;
  }
  r.written.push_back(encoder_path(cfg));
  r.written.push_back(cfg.output_dir / "encoder_log.csv");
  for (const auto& p : r.written) log << "wrote " << p.string() << "\n";
  return r;
}

/// A trained pipeline, checked against the dataset it will be evaluated on.
inline Pipeline<Real> load_pipeline(const ExperimentConfig& cfg, const SplitSet& set, const std::string& dhash) {
  Encoder<Real> enc = load_encoder(cfg);
  const fs::path rp = regressor_path(cfg);
  if (!fs::exists(rp)) {
    throw LoadError("missing regressor checkpoint " + rp.string() + " (run `vprop train --stage regressor` first)");
  }
  auto reg = load_regressor<Real>(read_bytes(rp));
  if (reg.encoder_name != enc.name() || reg.model.input_width() != enc.width()) {
    throw ValidationError("regressor " + rp.string() + " was trained on " + reg.encoder_name + " latents, not " +
                          enc.name());
  }
  const Provenance ep = Provenance::from_kv(enc.descriptor().provenance);
  check_same_dataset(ep, dhash, "encoder of " + cfg.name);
  check_same_dataset(reg.provenance, dhash, "regressor of " + cfg.name);
  const Split& test = set.split("test");
  if (!ep.empty()) check_disjoint(ep, test, "encoder of " + cfg.name);
  check_disjoint(reg.provenance, test, "regressor of " + cfg.name);
  return {cfg.name, std::move(enc), std::move(reg.model)};
}

/// The shared dataset of several configs; they must all point at one.
inline SplitSet load_shared_dataset(std::span<const ExperimentConfig> cfgs, std::string& dhash) {
  if (cfgs.empty()) throw ValidationError("no configuration given");
  std::set<std::string> names;
  for (const auto& c : cfgs) {
    if (!names.insert(c.name).second) throw ValidationError("model name '" + c.name + "' given twice");
    if (fs::weakly_canonical(c.data_dir) != fs::weakly_canonical(cfgs[0].data_dir)) {
      throw ValidationError("models " + cfgs[0].name + " and " + c.name + " use different datasets");
    }
  }
  SplitSet set = load_dataset(cfgs[0]);
  dhash = manifest_hash(cfgs[0].data_dir);
  return set;
}

inline void check_eval_split(const std::optional<std::string>& requested) {
  if (!requested) return;
  split_index(*requested);
  if (*requested != "test") throw ProtocolError("evaluation runs on the 'test' split only; refusing '" + *requested + "'");
}

struct EvalResult {
  std::vector<std::pair<std::string, MetricsReport>> reports;
  MetricsReport baseline;
  std::vector<fs::path> written;
};

inline EvalResult cmd_eval(std::span<const ExperimentConfig> cfgs, std::ostream& log,
                           std::optional<fs::path> comparison_path = {},
                           const std::optional<std::string>& requested_split = {}) {
  check_eval_split(requested_split);
  std::string dhash;
  const SplitSet set = load_shared_dataset(cfgs, dhash);
  const Split& test = set.split("test");
  const auto truths = test.configs();
  EvalResult r;
  for (const auto& cfg : cfgs) {
    const Pipeline<Real> p = load_pipeline(cfg, set, dhash);
    const auto preds = p.predict(test);
    const MetricsReport m = compute_metrics(preds, truths);
    ensure_dir(cfg.output_dir);
    const fs::path out = cfg.output_dir / "report.csv";
    write_text(out, report_csv(m, cfg.name, cfg.seed, cfg.hash()));
    r.written.push_back(out);
    r.reports.emplace_back(cfg.name, m);
  }
  const auto train_targets = set.split("regression").configs();
  const MeanBaseline base = mean_baseline(train_targets);
  r.baseline = compute_metrics(std::vector<Configuration>(truths.size(), base.predict()), truths);
  const fs::path cmp = comparison_path ? *comparison_path : cfgs[0].output_dir / "comparison.csv";
  if (cmp.has_parent_path()) ensure_dir(cmp.parent_path());
  write_text(cmp, compare_models(r.reports, r.baseline));
  r.written.push_back(cmp);
  for (const auto& [name, m] : r.reports) log << name << ": overall MSE " << format17(m.overall_mse) << "\n";
  log << "baseline: overall MSE " << format17(r.baseline.overall_mse) << "\n";
  for (const auto& p : r.written) log << "wrote " << p.string() << "\n";
  return r;
}

inline std::vector<std::string> all_components() { return {kComponentNames.begin(), kComponentNames.end()}; }

inline void write_plots(const TrackingTrace& trace, std::span<const std::string> components,
                        std::span<const std::string> models, const fs::path& dir, std::vector<fs::path>& written) {
  ensure_dir(dir);
  for (const auto& [component, svg] : plot_traces(trace, components, models)) {
    const fs::path p = dir / (component + ".svg");
    write_text(p, svg);
    written.push_back(p);
  }
}

struct TrackResult {
  TrackingTrace trace;
  std::vector<fs::path> written;
};

/// Trace over the test split plus one chart per component. `models` selects
/// the tracks (all loaded pipelines by default; at most two).
inline TrackResult cmd_track(std::span<const ExperimentConfig> cfgs, std::ostream& log,
                             std::vector<std::string> components = {}, std::vector<std::string> models = {},
                             std::optional<fs::path> out_dir = {}) {
  if (components.empty()) components = all_components();
  for (const auto& c : components) component_index(c);
  std::vector<std::string> available;
  for (const auto& c : cfgs) available.push_back(c.name);
  if (models.empty()) models = available;
  for (const auto& m : models) {
    if (std::find(available.begin(), available.end(), m) == available.end()) {
      std::string known;
      for (const auto& a : available) known += (known.empty() ? "" : ", ") + a;
      throw ValidationError("unknown model '" + m + "' (available: " + known + ")");
    }
  }
  if (models.size() > kMaxTracksPerChart) {
    throw ValidationError("at most 2 models per plot, got " + std::to_string(models.size()) + " (select with --models)");
  }
  std::string dhash;
  const SplitSet set = load_shared_dataset(cfgs, dhash);
  const Split& test = set.split("test");
  std::vector<std::pair<std::string, std::vector<Configuration>>> preds;
  for (const auto& m : models) {
    const auto& cfg = *std::find_if(cfgs.begin(), cfgs.end(), [&](const auto& c) { return c.name == m; });
    preds.emplace_back(m, load_pipeline(cfg, set, dhash).predict(test));
  }
  TrackResult r;
  r.trace = make_trace(test, preds);
  const fs::path dir = out_dir ? *out_dir : cfgs[0].output_dir;
  ensure_dir(dir);
  write_text(dir / "trace.csv", trace_csv(r.trace));
  r.written.push_back(dir / "trace.csv");
  write_plots(r.trace, components, models, dir / "plots", r.written);
  for (const auto& p : r.written) log << "wrote " << p.string() << "\n";
  return r;
}

/// Reads a trace written by cmd_track.
inline TrackingTrace parse_trace_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw LoadError("empty trace file");
  const auto head = detail::split_csv_line(line);
  const std::size_t fixed = 3 + kConfigDims;
  if (head.size() < fixed || (head.size() - fixed) % kConfigDims != 0 || head[0] != "traj") {
    throw LoadError("not a trace file (bad header)");
  }
  TrackingTrace t;
  for (std::size_t j = fixed; j < head.size(); j += kConfigDims) {
    const std::string suffix = std::string("_") + kComponentNames[0];
    if (head[j].size() <= suffix.size() || head[j].compare(head[j].size() - suffix.size(), suffix.size(), suffix) != 0) {
      throw LoadError("trace column '" + head[j] + "' is not a model column");
    }
    t.models.push_back(head[j].substr(0, head[j].size() - suffix.size()));
  }
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = "trace line " + std::to_string(lineno);
    const auto f = detail::split_csv_line(line);
    if (f.size() != head.size()) throw LoadError(where + ": wrong number of fields");
    TrackingRow r;
    r.trajectory = detail::parse_int(f[0], where);
    r.frame = detail::parse_int(f[1], where);
    r.visible = detail::parse_int(f[2], where);
    for (std::size_t k = 0; k < kConfigDims; ++k) r.truth[k] = detail::parse_double(f[3 + k], where);
    for (std::size_t m = 0; m < t.models.size(); ++m) {
      Configuration c;
      for (std::size_t k = 0; k < kConfigDims; ++k) c[k] = detail::parse_double(f[fixed + m * kConfigDims + k], where);
      r.predictions.push_back(c);
    }
    t.rows.push_back(std::move(r));
  }
  return t;
}

inline std::vector<fs::path> cmd_plot(const fs::path& trace_path, std::ostream& log,
                                      std::vector<std::string> components = {}, std::vector<std::string> models = {},
                                      std::optional<fs::path> out_dir = {}) {
  const auto bytes = read_bytes(trace_path);
  const TrackingTrace trace = parse_trace_csv(std::string(bytes.begin(), bytes.end()));
  if (components.empty()) components = all_components();
  if (models.empty()) models = trace.models;
  for (const auto& m : models) trace.model_index(m);
  std::vector<fs::path> written;
  write_plots(trace, components, models, out_dir ? *out_dir : trace_path.parent_path() / "plots", written);
  for (const auto& p : written) log << "wrote " << p.string() << "\n";
  return written;
}

}  // namespace vprop
