// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--work DIR] [--only 1,4,9] [--known-failing 4]
//
// Exit status is nonzero if any criterion fails, except those listed with
// --known-failing (they are still reported as FAIL).

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include "gradcheck.hpp"
#include "vprop/experiment.hpp"

using namespace vprop;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  const auto b = read_bytes(p);
  return {b.begin(), b.end()};
}

Configuration random_config(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Configuration c;
  for (std::size_t k = 0; k < kConfigDims; ++k) c[k] = u(rng);
  return c;
}

class Suite {
 public:
  Suite(fs::path work, fs::path configs) : work_(std::move(work)), configs_(std::move(configs)) {}

  // Loads configs/<name>.cfg with the dataset and outputs moved under the work
  // directory, plus any extra overrides. Also writes the resolved file so the
  // CLI binary can be pointed at it.
  ExperimentConfig config(const std::string& name, const fs::path& data, const fs::path& out,
                          const std::map<std::string, std::string>& extra = {}) {
    KeyValues kv = KeyValues::load((configs_ / (name + ".cfg")).string());
    kv.set("data_dir", data.string());
    kv.set("output_dir", out.string());
    for (const auto& [k, v] : extra) kv.set(k, v);
    ensure_dir(out);
    write_text(out / "acceptance.cfg", kv.to_string());
    generated_.insert(data);
    return ExperimentConfig::from_kv(kv);
  }

  std::ostringstream& log() { return log_; }

  // -- 1 ----------------------------------------------------------------------
  Outcome gradients() {
    const auto t0 = Clock::now();
    double worst = 0;
    std::string where;
    int checks = 0;
    auto check = [&](Layer<double>& layer, const Shape& in, std::uint64_t seed) {
      std::mt19937_64 rng(1000 + seed);
      layer.init(rng);
      if (auto* p = layer.params())
        for (auto& v : p->bias.vec()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
      const auto x = vprop::testing::random_tensor(in, rng);
      const auto rep = vprop::testing::check_layer_gradients(layer, x, rng);
      ++checks;
      if (rep.max_rel_error > worst) {
        worst = rep.max_rel_error;
        where = std::string(layer_kind_name(layer.kind())) + " seed " + std::to_string(seed);
      }
    };
    for (std::uint64_t s = 0; s < 10; ++s) {
      std::mt19937_64 g(s);
      auto dim = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(g); };
      const std::size_t batch = dim(1, 3);
      Dense<double> dense(dim(1, 8), dim(1, 6));
      check(dense, {batch, dense.in_features()}, s);
      const std::size_t cin = dim(1, 3), k = dim(1, 3), stride = dim(1, 2), pad = dim(0, 1);
      Conv2d<double> conv(cin, dim(1, 3), k, stride, pad);
      check(conv, {batch, cin, dim(k, 7), dim(k, 7)}, s);
      const std::size_t tin = dim(1, 3);
      ConvTranspose2d<double> tconv(tin, dim(1, 3), dim(2, 4), dim(1, 2), dim(0, 1));
      check(tconv, {batch, tin, dim(2, 4), dim(2, 4)}, s);
      const std::size_t n = dim(2, 12);
      LeakyRelu<double> lrelu;
      check(lrelu, {batch, n}, s);
      Sigmoid<double> sig;
      check(sig, {batch, n}, s);
      Reshape<double> reshape({2, 3});
      check(reshape, {batch, 6}, s);
    }
    const double t = seconds_since(t0);
    return {worst < 1e-4 && t < 30.0, std::to_string(checks) + " layer checks (6 layer types x 10 seeds), max rel err " +
                                          fmt(worst) + " at " + where + ", " + fmt(t, 3) + " s"};
  }

  // -- 2 ----------------------------------------------------------------------
  Outcome metric_oracles() {
    bool ok = true;
    std::vector<std::string> notes;
    {
      std::vector<Configuration> truths, preds(5, Configuration::uniform(0.5));
      for (double v : {0.0, 0.25, 0.5, 0.75, 1.0}) truths.push_back(Configuration::uniform(v));
      const auto m = compute_metrics(preds, truths);
      double err = 0;
      for (const auto& c : m.components) {
        err = std::max({err, std::abs(c.mae - 0.3), std::abs(c.rmse - std::sqrt(0.125))});
      }
      const auto same = compute_metrics(truths, truths);
      for (const auto& c : same.components) err = std::max({err, c.mae, c.rmse, c.mse, c.std_abs});
      ok &= err < 1e-9;
      notes.push_back("examples max err " + fmt(err, 3));
    }
    {
      std::mt19937_64 rng(2);
      int violations = 0;
      for (int t = 0; t < 1000; ++t) {
        const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 40)(rng);
        std::vector<Configuration> p, y;
        for (std::size_t i = 0; i < n; ++i) {
          p.push_back(random_config(rng));
          y.push_back(random_config(rng));
        }
        for (const auto& c : compute_metrics(p, y).components) violations += c.rmse + 1e-15 < c.mae;
      }
      ok &= violations == 0;
      notes.push_back("RMSE<MAE in " + std::to_string(violations) + "/1000 fuzz cases");
    }
    {
      std::mt19937_64 rng(3);
      std::vector<Configuration> train, test;
      for (int i = 0; i < 100000; ++i) train.push_back(random_config(rng));
      for (int i = 0; i < 100000; ++i) test.push_back(random_config(rng));
      const auto base = mean_baseline(train).predict();
      const auto m = compute_metrics(std::vector<Configuration>(test.size(), base), test);
      double dev = 0;
      for (const auto& c : m.components) dev = std::max(dev, std::abs(c.mae - 0.25));
      ok &= dev <= 0.01;
      notes.push_back("baseline MAE max |mae-0.25| " + fmt(dev, 3) + " at n=1e5");
    }
    return {ok, notes[0] + "; " + notes[1] + "; " + notes[2]};
  }

  // -- 3 ----------------------------------------------------------------------
  Outcome fiducial_layout() {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int mismatches = 0;
    const int cases = 5000;
    for (int t = 0; t < cases; ++t) {
      DetectionSet d;
      const double p_visible = u(rng);
      std::vector<double> oracle(128, 0.0);
      for (std::size_t i = 0; i < kMarkerCount; ++i) {
        d[i].id = static_cast<int>(i);
        d[i].visible = u(rng) < p_visible;
        if (!d[i].visible) continue;
        for (int c = 0; c < 8; ++c) {
          d[i].corners[c] = u(rng);
          oracle[9 * i + c] = d[i].corners[c];
        }
        oracle[9 * i + 8] = 1.0;
      }
      mismatches += encode_fiducial(d).values != oracle;
    }
    return {mismatches == 0, std::to_string(mismatches) + "/" + std::to_string(cases) +
                                 " random visibility patterns differ from the (8+1)x10 -> 128 oracle"};
  }

  // -- 4 ----------------------------------------------------------------------
  Outcome learnability() {
    const auto t0 = Clock::now();
    const fs::path dir = work_ / "c4";
    const auto cfg = config("fiducial-128", dir / "data", dir / "fiducial-128",
                            {{"camera", "side"}, {"noise.corner_sigma", "0"}, {"noise.dropout", "0"}});
    cmd_gen(cfg, log_);
    cmd_train(cfg, "regressor", log_);
    const std::vector<ExperimentConfig> cfgs{cfg};
    const auto r = cmd_eval(cfgs, log_);
    const auto& m = r.reports.front().second;
    const double t = seconds_since(t0);
    int wins = 0;
    std::string per;
    for (std::size_t k = 0; k < kConfigDims; ++k) {
      const bool win = m.components[k].mse < r.baseline.components[k].mse;
      wins += win;
      per += std::string(k ? ", " : "") + kComponentNames[k] + " " + fmt(m.components[k].mse, 3) + (win ? "<" : ">=") +
             fmt(r.baseline.components[k].mse, 3);
    }
    const double heading_mae = m.components[2].mae;
    return {wins == 6 && heading_mae < 0.05 && t < 300.0,
            "beats baseline on " + std::to_string(wins) + "/6 (MSE " + per + "), heading MAE " + fmt(heading_mae, 3) +
                ", " + fmt(t, 3) + " s"};
  }

  // -- 5 (also trains the VAE reused by 9) ------------------------------------
  Outcome learned_pipelines() {
    const fs::path data = work_ / "default" / "data";
    std::vector<ExperimentConfig> cfgs;
    for (const std::string name : {"fiducial-128", "vae-128", "vae-256", "vgg19-128", "vgg19-256"}) {
      cfgs.push_back(config(name, data, work_ / "default" / name));
    }
    cmd_gen(cfgs.front(), log_);
    for (const auto& cfg : cfgs) {
      if (cfg.encoder == EncoderKind::kVae) {
        const auto t0 = Clock::now();
        cmd_train(cfg, "vae", log_);
        vae_seconds_[cfg.name] = seconds_since(t0);
      } else if (cfg.encoder == EncoderKind::kBackbone) {
        cmd_train(cfg, "reductor", log_);
      }
      cmd_train(cfg, "regressor", log_);
    }
    const auto r = cmd_eval(cfgs, log_, work_ / "default" / "comparison.csv");
    bool ok = true;
    std::string detail;
    for (const auto& [name, m] : r.reports) {
      int wins = 0;
      for (std::size_t k = 0; k < kConfigDims; ++k) wins += m.components[k].mse < r.baseline.components[k].mse;
      ok &= wins >= 4;
      detail += (detail.empty() ? "" : ", ") + name + " " + std::to_string(wins) + "/6";
    }
    vae128_ = cfgs[1];
    default_ = cfgs[0];
    return {ok, "components beating baseline MSE: " + detail};
  }

  // -- 6 ----------------------------------------------------------------------
  Outcome reductor_ablation() {
    const fs::path data = work_ / "default" / "data";
    const auto cfg = config("vgg19-128", data, work_ / "ablation");
    if (!fs::exists(data / "manifest.txt")) cmd_gen(cfg, log_);
    const SplitSet set = load_dataset(cfg);
    const auto backbone = build_backbone<Real>(cfg.backbone_seed, cfg.feature_width);
    const Split& ft = set.split("finetune");
    const Split& reg = set.split("regression");
    const Split& test = set.split("test");
    const auto reg_order = load_order(reg, cfg.seed);
    std::vector<Image> reg_images;
    std::vector<Configuration> reg_targets;
    for (auto i : reg_order) {
      reg_images.push_back(reg.frames[i].image);
      reg_targets.push_back(reg.frames[i].config);
    }
    const auto reg_features = backbone.features(reg_images);
    const auto test_features = backbone.features(test.images());
    const auto truths = test.configs();

    auto score = [&](const ReductorModel<Real>& red, std::uint64_t seed) {
      std::vector<LatentVector> z, zt;
      for (const auto& f : reg_features) z.push_back(red.reduce(f));
      for (const auto& f : test_features) zt.push_back(red.reduce(f));
      TrainingConfig tc = cfg.regressor;
      tc.seed = seed;
      const auto trained = train_regressor<Real>(z, reg_targets, tc);
      std::vector<Configuration> preds;
      for (const auto& v : zt) preds.push_back(predict(trained.model, v).config);
      return compute_metrics(preds, truths).overall_mse;
    };

    bool ok = true;
    std::string detail;
    for (std::uint64_t seed : {1, 2, 3}) {
      ReductorHyper hyper = cfg.reductor;
      hyper.training.seed = seed;
      const auto tuned = train_reductor(backbone, labeled_images(ft, load_order(ft, seed)), cfg.width, hyper,
                                        reg.trajectory_ids());
      const auto random = random_reductor(backbone, cfg.width, hyper);
      const double a = score(tuned.model, seed), b = score(random, seed);
      ok &= a < b;
      detail += (detail.empty() ? "" : ", ") + std::string("seed ") + std::to_string(seed) + " tuned " + fmt(a) +
                " vs random " + fmt(b);
    }
    return {ok, "overall test MSE, " + detail};
  }

  // -- 7 ----------------------------------------------------------------------
  Outcome flickering() {
    const fs::path dir = work_ / "c7";
    const auto cfg = config("fiducial-128", dir / "data", dir / "fiducial-128", {{"noise.dropout", "0.5"}});
    cmd_gen(cfg, log_);
    cmd_train(cfg, "regressor", log_);
    const SplitSet set = load_dataset(cfg);
    const auto pipe = load_pipeline(cfg, set, manifest_hash(cfg.data_dir));
    const Split& test = set.split("test");
    const auto preds = pipe.predict(test);
    const auto mean = mean_baseline(set.split("regression").configs()).predict();
    double d0 = 0, d5 = 0;
    int n0 = 0, n5 = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      double d = 0;
      for (std::size_t k = 0; k < kConfigDims; ++k) d += std::pow(preds[i][k] - mean[k], 2);
      d = std::sqrt(d);
      const int vis = visible_count(test.frames[i].detections);
      if (vis == 0) d0 += d, ++n0;
      if (vis >= 5) d5 += d, ++n5;
    }
    if (n0 == 0 || n5 == 0) {
      return {false, "need both zero-visible and >=5-visible frames, got " + std::to_string(n0) + " and " +
                         std::to_string(n5)};
    }
    d0 /= n0;
    d5 /= n5;
    return {d0 < d5, "mean L2 to training mean: zero visible " + fmt(d0) + " (" + std::to_string(n0) +
                         " frames) vs >=5 visible " + fmt(d5) + " (" + std::to_string(n5) + " frames)"};
  }

  // -- 8 ----------------------------------------------------------------------
  Outcome camera_asymmetry() {
    const ArmGeometry g = default_geometry();
    std::mt19937_64 gen(8);
    Rng rs = stream_rng(8, 1), rf = stream_rng(8, 2);
    double side = 0, front = 0;
    for (int i = 0; i < 1000; ++i) {
      const ArmPose pose = forward_kinematics(random_config(gen), g);
      side += visible_count(detect_markers(pose, camera_preset("side"), NoiseModel{}, rs));
      front += visible_count(detect_markers(pose, camera_preset("front"), NoiseModel{}, rf));
    }
    return {side > front, "mean visible markers over 1000 configs: side " + fmt(side / 1000) + ", front " +
                              fmt(front / 1000)};
  }

  // -- 9 ----------------------------------------------------------------------
  Outcome vae_training() {
    if (!vae128_) learned_pipelines();
    const ExperimentConfig& cfg = *vae128_;
    const Encoder<Real> enc = load_encoder(cfg);
    const VaeModel<Real>* trained = enc.vae();
    if (!trained || !trained->has_decoder()) return {false, "vae-128 checkpoint has no decoder"};
    const SplitSet set = load_dataset(cfg);
    const auto held_out = set.split("test").images();
    VaeModel<Real> untrained(cfg.width, trained->image_width(), trained->image_height());
    Rng rng = stream_rng(cfg.vae.seed, 0x7661);
    untrained.init(rng);
    const double after = trained->reconstruction_mse(held_out), before = untrained.reconstruction_mse(held_out);

    std::istringstream log(slurp(cfg.output_dir / "encoder_log.csv"));
    std::string line;
    std::getline(log, line);
    std::size_t epochs = 0, negative_kl = 0;
    while (std::getline(log, line)) {
      std::istringstream row(line);
      std::string epoch, recon, kl;
      std::getline(row, epoch, ',');
      std::getline(row, recon, ',');
      std::getline(row, kl, ',');
      ++epochs;
      negative_kl += std::stod(kl) < 0;
    }
    const double t = vae_seconds_.count(cfg.name) ? vae_seconds_[cfg.name] : -1;
    const bool ok = after < 0.5 * before && negative_kl == 0 && epochs == cfg.vae.epochs && t >= 0 && t < 600;
    return {ok, "held-out recon MSE " + fmt(after) + " vs untrained " + fmt(before) + " (ratio " +
                    fmt(after / before, 3) + "), KL<0 in " + std::to_string(negative_kl) + "/" +
                    std::to_string(epochs) + " epochs, training " + fmt(t, 4) + " s"};
  }

  // -- 10 ---------------------------------------------------------------------
  Outcome reproducibility() {
    std::vector<std::map<std::string, std::string>> runs;
    for (const std::string tag : {"a", "b"}) {
      const fs::path dir = work_ / "c10" / tag;
      std::vector<ExperimentConfig> cfgs{config("fiducial-128", dir / "data", dir / "fiducial-128"),
                                         config("vgg19-128", dir / "data", dir / "vgg19-128")};
      cmd_gen(cfgs[0], log_);
      cmd_train(cfgs[1], "reductor", log_);
      for (const auto& c : cfgs) cmd_train(c, "regressor", log_);
      cmd_eval(cfgs, log_, dir / "comparison.csv");
      std::map<std::string, std::string> files;
      for (const auto& c : cfgs) {
        files[c.name + "/report.csv"] = slurp(c.output_dir / "report.csv");
        files[c.name + "/regressor_log.csv"] = slurp(c.output_dir / "regressor_log.csv");
      }
      files["comparison.csv"] = slurp(dir / "comparison.csv");
      runs.push_back(std::move(files));
    }
    std::string differing;
    for (const auto& [name, bytes] : runs[0]) {
      if (runs[1].at(name) != bytes) differing += " " + name;
    }
    return {differing.empty(), differing.empty() ? std::to_string(runs[0].size()) +
                                                       " metric CSVs byte-identical across two gen/train/eval runs"
                                                 : "differing:" + differing};
  }

  // -- 11 ---------------------------------------------------------------------
  Outcome protocol() {
    const fs::path dir = work_ / "c10" / "a";
    if (!fs::exists(dir / "fiducial-128" / "regressor.ckpt")) reproducibility();
    const std::string fid = (dir / "fiducial-128" / "acceptance.cfg").string();
    const std::string bb = (dir / "vgg19-128" / "acceptance.cfg").string();
    const std::vector<std::string> splits{"unsupervised", "finetune", "regression", "test"};
    int attempts = 0, rejected = 0;
    auto expect2 = [&](const std::string& args) {
      ++attempts;
      rejected += run_cli(args) == 2;
    };
    for (const std::string stage : {"vae", "reductor", "regressor"}) {
      const std::string cfg = stage == "reductor" ? bb : fid;
      for (const auto& s : splits)
        if (s != stage_split(stage)) expect2("train --config " + cfg + " --stage " + stage + " --split " + s);
    }
    for (const auto& s : splits)
      if (s != "test") expect2("eval --config " + fid + " --split " + s);

    // Checkpoints whose provenance overlaps the evaluation split.
    const fs::path ckpt = dir / "fiducial-128" / "regressor.ckpt";
    const auto original = read_bytes(ckpt);
    auto loaded = load_regressor<Real>(original);
    const auto test_ids = load_dataset(config("fiducial-128", dir / "data", dir / "fiducial-128")).split("test").trajectory_ids();
    Provenance p = loaded.provenance;
    p.split = "test";
    write_bytes(ckpt, save_regressor(loaded.model, loaded.encoder_name, p));
    expect2("eval --config " + fid);
    p = loaded.provenance;
    p.trajectories.push_back(test_ids.front());
    write_bytes(ckpt, save_regressor(loaded.model, loaded.encoder_name, p));
    expect2("eval --config " + fid);
    write_bytes(ckpt, original);
    const bool restored_ok = run_cli("eval --config " + fid) == 0;

    // Four-way trajectory disjointness on every dataset generated in this run.
    int datasets = 0, overlapping = 0;
    for (const auto& data : generated_) {
      if (!fs::exists(data / "manifest.txt")) continue;
      const SplitSet set = load_split(data);
      ++datasets;
      std::set<int> seen;
      std::size_t total = 0;
      bool empty = false;
      for (const auto& s : set.splits) {
        const auto ids = s.trajectory_ids();
        empty |= ids.empty();
        total += ids.size();
        seen.insert(ids.begin(), ids.end());
      }
      overlapping += empty || seen.size() != total || set.splits.size() != 4;
    }
    const bool ok = rejected == attempts && restored_ok && overlapping == 0 && datasets > 0;
    return {ok, std::to_string(rejected) + "/" + std::to_string(attempts) +
                    " cross-split CLI uses rejected with exit 2, clean eval " + (restored_ok ? "accepted" : "REJECTED") +
                    ", " + std::to_string(datasets - overlapping) + "/" + std::to_string(datasets) +
                    " generated datasets four-way disjoint"};
  }

 private:
  int run_cli(const std::string& args) {
    const std::string cmd = std::string(VPROP_CLI) + " " + args + " >>" + (work_ / "cli.log").string() + " 2>&1";
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  }

  fs::path work_, configs_;
  std::ostringstream log_;
  std::set<fs::path> generated_;
  std::map<std::string, double> vae_seconds_;
  std::optional<ExperimentConfig> vae128_, default_;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-11"};
  std::string work = "acceptance_work", configs = VPROP_CONFIG_DIR;
  std::vector<int> only, known_failing;
  app.add_option("--work", work, "Scratch directory for datasets and runs");
  app.add_option("--configs", configs, "Directory holding the experiment configs");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_option("--known-failing", known_failing, "Criteria whose failure does not fail the exit status")
      ->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  ensure_dir(work);
  Suite suite(fs::absolute(work), fs::absolute(configs));
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", [&] { return suite.gradients(); }},
      {"closed-form metric oracles", [&] { return suite.metric_oracles(); }},
      {"fiducial layout", [&] { return suite.fiducial_layout(); }},
      {"end-to-end learnability (noiseless, side)", [&] { return suite.learnability(); }},
      {"learned pipelines vs baseline", [&] { return suite.learned_pipelines(); }},
      {"reductor ablation", [&] { return suite.reductor_ablation(); }},
      {"flickering", [&] { return suite.flickering(); }},
      {"camera asymmetry", [&] { return suite.camera_asymmetry(); }},
      {"VAE training", [&] { return suite.vae_training(); }},
      {"reproducibility", [&] { return suite.reproducibility(); }},
      {"protocol enforcement", [&] { return suite.protocol(); }},
  };

  int unexpected = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const bool known = std::find(known_failing.begin(), known_failing.end(), id) != known_failing.end();
    if (!o.pass && !known) ++unexpected;
    std::printf("criterion %2d %s  %s: %s [%.1f s]%s\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                o.detail.c_str(), seconds_since(t0), !o.pass && known ? " (known failure, see notes)" : "");
    std::fflush(stdout);
  }
  return unexpected == 0 ? 0 : 1;
}
