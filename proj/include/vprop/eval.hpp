#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vprop/dataset.hpp"
#include "vprop/encoders.hpp"
#include "vprop/regressor.hpp"

namespace vprop {

struct ComponentMetrics {
  double mae = 0;
  double std_abs = 0;  // population standard deviation of |error|
  double rmse = 0;
  double mse = 0;
};

struct MetricsReport {
  std::array<ComponentMetrics, kConfigDims> components{};
  double overall_mse = 0;  // mean of the component MSEs
  double overall_mae = 0;
  std::size_t count = 0;
};

inline std::size_t component_index(const std::string& name) {
  for (std::size_t i = 0; i < kConfigDims; ++i)
    if (name == kComponentNames[i]) return i;
  throw ValidationError("unknown component '" + name +
                        "' (expected height, distance, heading, wrist_angle, wrist_rotation or gripper)");
}

inline MetricsReport compute_metrics(std::span<const Configuration> preds, std::span<const Configuration> truths) {
  if (preds.size() != truths.size()) {
    throw ValidationError("metrics need equal counts, got " + std::to_string(preds.size()) + " predictions and " +
                          std::to_string(truths.size()) + " truths");
  }
  if (preds.empty()) throw ValidationError("metrics need at least one sample");
  MetricsReport r;
  r.count = preds.size();
  const double n = static_cast<double>(preds.size());
  for (std::size_t k = 0; k < kConfigDims; ++k) {
    double abs_sum = 0, sq_sum = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const double d = preds[i][k] - truths[i][k];
      abs_sum += std::abs(d);
      sq_sum += d * d;
    }
    ComponentMetrics& c = r.components[k];
    c.mae = abs_sum / n;
    c.mse = sq_sum / n;
    c.rmse = std::sqrt(c.mse);
    double var = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const double e = std::abs(preds[i][k] - truths[i][k]) - c.mae;
      var += e * e;
    }
    c.std_abs = std::sqrt(var / n);
    r.overall_mse += c.mse / kConfigDims;
    r.overall_mae += c.mae / kConfigDims;
  }
  return r;
}

/// Constant predictor returning the componentwise training mean.
struct MeanBaseline {
  Configuration mean;
  Configuration predict(const LatentVector& = {}) const { return mean; }
};

inline MeanBaseline mean_baseline(std::span<const Configuration> train_targets) {
  if (train_targets.empty()) throw ValidationError("mean baseline needs training targets");
  MeanBaseline b;
  for (std::size_t k = 0; k < kConfigDims; ++k) {
    double s = 0;
    for (const auto& c : train_targets) s += c[k];
    b.mean[k] = s / static_cast<double>(train_targets.size());
  }
  return b;
}

// -- pipelines and tracking --------------------------------------------------------

/// Encoder h followed by regressor f.
template <typename T>
struct Pipeline {
  std::string name;
  Encoder<T> encoder;
  RegressorModel<T> regressor;

  std::vector<Configuration> predict(const Split& split) const {
    const auto imgs = encoder.kind() == EncoderKind::kFiducial ? std::vector<Image>{} : split.images();
    const auto dets = split.detections();
    const auto z = encoder.encode_all(imgs, dets);
    std::vector<Configuration> out;
    out.reserve(z.size());
    for (const auto& v : z) out.push_back(vprop::predict(regressor, v).config);
    return out;
  }
};

struct TrackingRow {
  int trajectory = 0;
  int frame = 0;
  Configuration truth;
  std::vector<Configuration> predictions;  // one per model, in TrackingTrace::models order
  int visible = 0;
};

struct TrackingTrace {
  std::vector<std::string> models;
  std::vector<TrackingRow> rows;

  std::size_t model_index(const std::string& name) const {
    for (std::size_t i = 0; i < models.size(); ++i)
      if (models[i] == name) return i;
    std::string known;
    for (const auto& m : models) known += (known.empty() ? "" : ", ") + m;
    throw ValidationError("unknown model '" + name + "' (available: " + known + ")");
  }
};

/// Builds a trace from per-model predictions over an ordered split.
inline TrackingTrace make_trace(const Split& split, const std::vector<std::pair<std::string, std::vector<Configuration>>>& preds) {
  TrackingTrace t;
  for (const auto& [name, p] : preds) {
    if (p.size() != split.size()) {
      throw ValidationError("model '" + name + "' has " + std::to_string(p.size()) + " predictions for " +
                            std::to_string(split.size()) + " frames");
    }
    t.models.push_back(name);
  }
  for (std::size_t i = 0; i < split.size(); ++i) {
    const Frame& f = split.frames[i];
    TrackingRow r{f.trajectory, f.index, f.config, {}, visible_count(f.detections)};
    for (const auto& mp : preds) r.predictions.push_back(mp.second[i]);
    t.rows.push_back(std::move(r));
  }
  return t;
}

template <typename T>
TrackingTrace track(std::span<const Pipeline<T>> pipelines, const Split& split) {
  std::vector<std::pair<std::string, std::vector<Configuration>>> preds;
  for (const auto& p : pipelines) preds.emplace_back(p.name, p.predict(split));
  return make_trace(split, preds);
}

inline std::string trace_csv(const TrackingTrace& t) {
  std::string out = "traj,frame,visible";
  for (const char* c : kComponentNames) out += std::string(",truth_") + c;
  for (const auto& m : t.models)
    for (const char* c : kComponentNames) out += "," + m + "_" + c;
  out += "\n";
  for (const auto& r : t.rows) {
    out += std::to_string(r.trajectory) + "," + std::to_string(r.frame) + "," + std::to_string(r.visible);
    for (double v : r.truth.a) out += "," + format17(v);
    for (const auto& p : r.predictions)
      for (double v : p.a) out += "," + format17(v);
    out += "\n";
  }
  return out;
}

// -- SVG plots --------------------------------------------------------------------

inline constexpr std::size_t kMaxTracksPerChart = 2;

/// One line chart of `component` over the frames of the trace: ground truth in
/// black plus up to two model tracks. y axis fixed to [0,1].
inline std::string plot_component(const TrackingTrace& trace, const std::string& component,
                                  std::span<const std::string> models) {
  if (trace.rows.empty()) throw ValidationError("cannot plot an empty trace");
  const std::size_t k = component_index(component);
  if (models.size() > kMaxTracksPerChart) {
    throw ValidationError("at most 2 model tracks per chart, got " + std::to_string(models.size()));
  }
  std::vector<std::size_t> idx;
  for (const auto& m : models) idx.push_back(trace.model_index(m));

  constexpr double W = 800, H = 300, L = 60, R = 20, Tm = 30, B = 45;
  const double pw = W - L - R, ph = H - Tm - B;
  const std::size_t n = trace.rows.size();
  auto fx = [&](std::size_t i) { return L + (n > 1 ? pw * static_cast<double>(i) / static_cast<double>(n - 1) : pw / 2); };
  auto fy = [&](double v) { return Tm + ph * (1.0 - std::clamp(v, 0.0, 1.0)); };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  auto polyline = [&](auto value, const char* color, const std::string& label) {
    std::string pts;
    for (std::size_t i = 0; i < n; ++i) pts += (i ? " " : "") + num(fx(i)) + "," + num(fy(value(trace.rows[i])));
    return "<polyline class=\"series\" data-label=\"" + label + "\" fill=\"none\" stroke=\"" + color +
           "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
  };

  static constexpr const char* kColors[] = {"#d62728", "#1f77b4"};
  std::string s;
  s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"300\" viewBox=\"0 0 800 300\">\n";
  s += "<rect width=\"800\" height=\"300\" fill=\"white\"/>\n";
  s += "<text x=\"400\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" + component +
       "</text>\n";
  s += "<g stroke=\"#888\" stroke-width=\"1\">\n";
  s += "<line x1=\"" + num(L) + "\" y1=\"" + num(Tm) + "\" x2=\"" + num(L) + "\" y2=\"" + num(Tm + ph) + "\"/>\n";
  s += "<line x1=\"" + num(L) + "\" y1=\"" + num(Tm + ph) + "\" x2=\"" + num(L + pw) + "\" y2=\"" + num(Tm + ph) + "\"/>\n";
  s += "</g>\n<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (double v : {0.0, 0.25, 0.5, 0.75, 1.0})
    s += "<text x=\"" + num(L - 6) + "\" y=\"" + num(fy(v) + 4) + "\" text-anchor=\"end\">" + num(v) + "</text>\n";
  s += "<text x=\"" + num(L + pw / 2) + "\" y=\"" + num(H - 10) + "\" text-anchor=\"middle\">frame</text>\n";
  s += "<text x=\"15\" y=\"" + num(Tm + ph / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 15 " +
       num(Tm + ph / 2) + ")\">" + component + " (normalized)</text>\n";
  s += "<text x=\"" + num(L) + "\" y=\"" + num(H - 25) + "\">0</text>\n";
  s += "<text x=\"" + num(L + pw) + "\" y=\"" + num(H - 25) + "\" text-anchor=\"end\">" + std::to_string(n - 1) +
       "</text>\n</g>\n";
  s += polyline([&](const TrackingRow& r) { return r.truth[k]; }, "black", "ground truth");
  for (std::size_t m = 0; m < idx.size(); ++m)
    s += polyline([&](const TrackingRow& r) { return r.predictions[idx[m]][k]; }, kColors[m], models[m]);
  s += "<g font-family=\"sans-serif\" font-size=\"11\">\n";
  s += "<text x=\"" + num(L + 8) + "\" y=\"" + num(Tm + 12) + "\" fill=\"black\">ground truth</text>\n";
  for (std::size_t m = 0; m < idx.size(); ++m)
    s += "<text x=\"" + num(L + 8) + "\" y=\"" + num(Tm + 26 + 14 * static_cast<double>(m)) + "\" fill=\"" +
         kColors[m] + "\">" + models[m] + "</text>\n";
  s += "</g>\n</svg>\n";
  return s;
}

/// One chart per requested component, keyed by component name.
inline std::vector<std::pair<std::string, std::string>> plot_traces(const TrackingTrace& trace,
                                                                    std::span<const std::string> components,
                                                                    std::span<const std::string> models) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& c : components) out.emplace_back(c, plot_component(trace, c, models));
  return out;
}

// -- tables -----------------------------------------------------------------------

/// Per-model report: six component rows plus an overall row. The header
/// comment carries the seed and configuration hash.
inline std::string report_csv(const MetricsReport& r, const std::string& model, std::uint64_t seed,
                              const std::string& config_hash) {
  std::string out = "# model=" + model + " seed=" + std::to_string(seed) + " config_hash=" + config_hash +
                    " count=" + std::to_string(r.count) + " std=population std of absolute error\n";
  out += "component,mae,std_abs,rmse,mse\n";
  for (std::size_t k = 0; k < kConfigDims; ++k) {
    const auto& c = r.components[k];
    out += std::string(kComponentNames[k]) + "," + format17(c.mae) + "," + format17(c.std_abs) + "," +
           format17(c.rmse) + "," + format17(c.mse) + "\n";
  }
  out += "overall," + format17(r.overall_mae) + ",," + format17(std::sqrt(r.overall_mse)) + "," +
         format17(r.overall_mse) + "\n";
  return out;
}

/// Rows: each model then the baseline. Columns: per component MSE, MAE and
/// RMSE plus overall MSE. A trailing '*' marks the per-column minimum (ties
/// are all marked).
inline std::string compare_models(const std::vector<std::pair<std::string, MetricsReport>>& reports,
                                  const MetricsReport& baseline) {
  std::vector<std::pair<std::string, MetricsReport>> rows = reports;
  rows.emplace_back("baseline", baseline);
  std::vector<std::string> header{"model"};
  std::vector<std::vector<double>> values(rows.size());
  for (std::size_t k = 0; k < kConfigDims; ++k) {
    for (const char* m : {"mse", "mae", "rmse"}) header.push_back(std::string(kComponentNames[k]) + "_" + m);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& c = rows[i].second.components[k];
      values[i].insert(values[i].end(), {c.mse, c.mae, c.rmse});
    }
  }
  header.push_back("overall_mse");
  for (std::size_t i = 0; i < rows.size(); ++i) values[i].push_back(rows[i].second.overall_mse);

  std::string out;
  for (std::size_t j = 0; j < header.size(); ++j) out += (j ? "," : "") + header[j];
  out += "\n";
  const std::size_t cols = values.front().size();
  std::vector<double> best(cols, INFINITY);
  for (const auto& v : values)
    for (std::size_t j = 0; j < cols; ++j) best[j] = std::min(best[j], v[j]);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out += rows[i].first;
    for (std::size_t j = 0; j < cols; ++j) out += "," + format17(values[i][j]) + (values[i][j] == best[j] ? "*" : "");
    out += "\n";
  }
  return out;
}

}  // namespace vprop
