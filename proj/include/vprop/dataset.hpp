#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vprop/encoders.hpp"
#include "vprop/keyvalue.hpp"
#include "vprop/random.hpp"
#include "vprop/scene.hpp"

namespace vprop {

// -- trajectories ----------------------------------------------------------------

/// Smooth random walk through [0,1]^6: uniform waypoints every `interval`
/// frames joined by a uniform Catmull-Rom spline (end waypoints duplicated),
/// clamped to the unit cube.
inline std::vector<Configuration> generate_trajectory(std::size_t length, std::size_t interval, Rng& rng) {
  if (length < 2 || interval < 2) throw ValidationError("trajectory needs length >= 2 and waypoint interval >= 2");
  const std::size_t segments = (length - 1 + interval - 1) / interval;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Configuration> way(segments + 1);
  for (auto& w : way)
    for (auto& v : w.a) v = u(rng);

  auto point = [&](long i) -> const Configuration& {
    return way[static_cast<std::size_t>(std::clamp<long>(i, 0, static_cast<long>(way.size()) - 1))];
  };
  std::vector<Configuration> out(length);
  for (std::size_t t = 0; t < length; ++t) {
    const long seg = static_cast<long>(t / interval);
    const double s = static_cast<double>(t % interval) / static_cast<double>(interval);
    const Configuration &p0 = point(seg - 1), &p1 = point(seg), &p2 = point(seg + 1), &p3 = point(seg + 2);
    for (std::size_t k = 0; k < kConfigDims; ++k) {
      const double v = 0.5 * (2 * p1[k] + (-p0[k] + p2[k]) * s + (2 * p0[k] - 5 * p1[k] + 4 * p2[k] - p3[k]) * s * s +
                              (-p0[k] + 3 * p1[k] - 3 * p2[k] + p3[k]) * s * s * s);
      out[t][k] = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

// -- frames and splits -------------------------------------------------------------

inline constexpr std::array<const char*, 4> kSplitNames = {"unsupervised", "finetune", "regression", "test"};

inline std::size_t split_index(const std::string& name) {
  for (std::size_t i = 0; i < kSplitNames.size(); ++i)
    if (name == kSplitNames[i]) return i;
  throw ValidationError("unknown split '" + name + "' (expected unsupervised, finetune, regression or test)");
}

struct Frame {
  int trajectory = 0;
  int index = 0;
  Configuration config;
  DetectionSet detections;
  std::string image_file;  // relative to the split directory
  Image image;
};

struct Split {
  std::string name;
  bool shuffle_on_load = false;
  std::vector<Frame> frames;

  std::vector<int> trajectory_ids() const {
    std::set<int> ids;
    for (const auto& f : frames) ids.insert(f.trajectory);
    return {ids.begin(), ids.end()};
  }
  std::size_t size() const noexcept { return frames.size(); }

  /// Frame visiting order for training: seeded permutation for shuffle-on-load
  /// splits, stored order otherwise.
  std::vector<std::size_t> training_order(std::uint64_t seed) const {
    std::vector<std::size_t> order(frames.size());
    std::iota(order.begin(), order.end(), 0);
    if (shuffle_on_load) {
      Rng rng = stream_rng(seed, 0x6f72, split_index(name));
      std::shuffle(order.begin(), order.end(), rng);
    }
    return order;
  }

  std::vector<Image> images() const {
    std::vector<Image> out;
    out.reserve(frames.size());
    for (const auto& f : frames) out.push_back(f.image);
    return out;
  }
  std::vector<Configuration> configs() const {
    std::vector<Configuration> out;
    for (const auto& f : frames) out.push_back(f.config);
    return out;
  }
  std::vector<DetectionSet> detections() const {
    std::vector<DetectionSet> out;
    for (const auto& f : frames) out.push_back(f.detections);
    return out;
  }
};

inline LabeledImages labeled_images(const Split& s, std::span<const std::size_t> order = {}) {
  LabeledImages out;
  out.split = s.name;
  auto add = [&](const Frame& f) {
    out.images.push_back(f.image);
    out.configs.push_back(f.config);
    out.trajectory_ids.push_back(f.trajectory);
  };
  if (order.empty()) {
    for (const auto& f : s.frames) add(f);
  } else {
    for (std::size_t i : order) add(s.frames.at(i));
  }
  return out;
}

/// Everything that determines a generated dataset.
struct DatasetSpec {
  std::uint64_t seed = 1;
  ArmGeometry geometry = default_geometry();
  std::string camera_name = "side";
  CameraModel camera = camera_preset("side");
  NoiseModel noise;
  std::array<std::size_t, 4> sizes{1000, 1000, 1000, 1000};
  std::size_t trajectory_length = 200;
  std::size_t waypoint_interval = 25;
  std::uint64_t background_seed = 7;

  void validate() const {
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (sizes[i] == 0) throw ValidationError(std::string("split '") + kSplitNames[i] + "' size must be positive");
    }
    if (trajectory_length < 2 || waypoint_interval < 2) {
      throw ValidationError("trajectory length and waypoint interval must be >= 2");
    }
    geometry.validate();
    camera.validate();
    noise.validate();
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("format", "vprop-dataset 1");
    kv.set("seed", std::to_string(seed));
    kv.set("trajectory_length", static_cast<long long>(trajectory_length));
    kv.set("waypoint_interval", static_cast<long long>(waypoint_interval));
    kv.set("background_seed", std::to_string(background_seed));
    kv.set("camera", camera_name);
    camera_to_kv(camera, kv, "camera.");
    noise_to_kv(noise, kv, "noise.");
    const KeyValues g = geometry_to_kv(geometry);
    for (const auto& k : g.keys()) kv.set("geometry." + k, g.str(k));
    return kv;
  }

  static DatasetSpec from_kv(const KeyValues& kv) {
    DatasetSpec s;
    s.seed = std::stoull(kv.str("seed"));
    s.trajectory_length = static_cast<std::size_t>(kv.integer("trajectory_length"));
    s.waypoint_interval = static_cast<std::size_t>(kv.integer("waypoint_interval"));
    s.background_seed = std::stoull(kv.str("background_seed", "7"));
    s.camera_name = kv.str("camera");
    s.camera = camera_from_kv(kv, "camera.", camera_preset(s.camera_name));
    s.noise = noise_from_kv(kv, "noise.");
    s.geometry = geometry_from_kv(kv, "geometry.");
    return s;
  }
};

struct SplitSet {
  DatasetSpec spec;
  std::array<Split, 4> splits;

  Split& split(const std::string& name) { return splits[split_index(name)]; }
  const Split& split(const std::string& name) const { return splits[split_index(name)]; }

  /// Throws ProtocolError if any trajectory id appears in two splits.
  void verify_disjoint() const {
    for (std::size_t a = 0; a < splits.size(); ++a) {
      const auto ia = splits[a].trajectory_ids();
      for (std::size_t b = a + 1; b < splits.size(); ++b) {
        const auto ib = splits[b].trajectory_ids();
        std::vector<int> both;
        std::set_intersection(ia.begin(), ia.end(), ib.begin(), ib.end(), std::back_inserter(both));
        if (!both.empty()) {
          throw ProtocolError("splits '" + splits[a].name + "' and '" + splits[b].name + "' share trajectory " +
                              std::to_string(both.front()));
        }
      }
    }
  }
};

inline std::string image_file_name(int traj, int frame) {
  return "img_" + std::to_string(traj) + "_" + std::to_string(frame) + ".pgm";
}

/// RNG stream used for the detections of one frame.
inline Rng detection_rng(std::uint64_t seed, int traj, int frame) {
  return stream_rng(seed, 0x646574, static_cast<std::uint64_t>(traj), static_cast<std::uint64_t>(frame));
}

inline Frame render_frame(const DatasetSpec& spec, const Image& background, int traj, int index,
                          const Configuration& c) {
  Frame f;
  f.trajectory = traj;
  f.index = index;
  f.config = c;
  const ArmPose pose = forward_kinematics(c, spec.geometry);
  Rng rng = detection_rng(spec.seed, traj, index);
  f.detections = detect_markers(pose, spec.camera, spec.noise, rng);
  f.image = quantize(rasterize(pose, spec.camera, background));
  f.image_file = image_file_name(traj, index);
  return f;
}

/// Generates the four splits. Trajectory ids are numbered globally so the
/// splits are disjoint by construction; each split is cut to its exact size.
inline SplitSet build_datasets(const DatasetSpec& spec) {
  spec.validate();
  SplitSet set;
  set.spec = spec;
  const Image background = static_background(spec.camera.width, spec.camera.height, spec.background_seed);
  int next_traj = 0;
  for (std::size_t s = 0; s < 4; ++s) {
    Split& split = set.splits[s];
    split.name = kSplitNames[s];
    split.shuffle_on_load = split.name != "test";
    while (split.frames.size() < spec.sizes[s]) {
      const int traj = next_traj++;
      Rng rng = stream_rng(spec.seed, 0x747261, static_cast<std::uint64_t>(traj));
      const auto path = generate_trajectory(spec.trajectory_length, spec.waypoint_interval, rng);
      const std::size_t take = std::min(path.size(), spec.sizes[s] - split.frames.size());
      for (std::size_t t = 0; t < take; ++t)
        split.frames.push_back(render_frame(spec, background, traj, static_cast<int>(t), path[t]));
    }
  }
  set.verify_disjoint();
  return set;
}

// -- persistence -------------------------------------------------------------------

inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string format17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string frames_csv_header() {
  std::string h = "traj,frame,a1,a2,a3,a4,a5,a6";
  for (std::size_t m = 0; m < kMarkerCount; ++m) {
    const std::string p = "m" + std::to_string(m) + "_";
    for (int c = 1; c <= 4; ++c) h += "," + p + "x" + std::to_string(c) + "," + p + "y" + std::to_string(c);
    h += "," + p + "vis";
  }
  return h + ",image";
}

inline std::string frames_csv(const Split& split) {
  std::string out = frames_csv_header() + "\n";
  for (const auto& f : split.frames) {
    out += std::to_string(f.trajectory) + "," + std::to_string(f.index);
    for (double v : f.config.a) out += "," + format17(v);
    for (const auto& d : f.detections) {
      for (double v : d.corners) out += "," + format17(v);
      out += d.visible ? ",1" : ",0";
    }
    out += "," + f.image_file + "\n";
  }
  return out;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw LoadError("missing file " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + p.string());
  out << text;
  if (!out) throw ValidationError("failed writing " + p.string());
}

/// Writes manifest.txt, <split>/frames.csv and <split>/img_<traj>_<frame>.pgm.
inline void save_split(const SplitSet& set, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ValidationError("cannot create " + dir.string() + ": " + ec.message());
  KeyValues kv = set.spec.to_kv();
  for (const auto& split : set.splits) {
    const auto sub = dir / split.name;
    std::filesystem::create_directories(sub, ec);
    if (ec) throw ValidationError("cannot create " + sub.string() + ": " + ec.message());
    const std::string csv = frames_csv(split);
    write_text(sub / "frames.csv", csv);
    std::uint64_t img_hash = fnv1a({});
    for (const auto& f : split.frames) {
      write_pgm((sub / f.image_file).string(), f.image);
      img_hash = fnv1a(read_bytes(sub / f.image_file), img_hash);
    }
    const std::string p = "split." + split.name + ".";
    kv.set(p + "frames", static_cast<long long>(split.frames.size()));
    std::string ids;
    for (int id : split.trajectory_ids()) ids += (ids.empty() ? "" : " ") + std::to_string(id);
    kv.set(p + "trajectories", ids);
    kv.set(p + "shuffle_on_load", static_cast<long long>(split.shuffle_on_load ? 1 : 0));
    kv.set(p + "csv_fnv1a", hex64(fnv1a(std::span<const std::uint8_t>(
                                 reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()))));
    kv.set(p + "images_fnv1a", hex64(img_hash));
  }
  std::string text =
      "# vprop synthetic proprioception dataset\n"
      "# <split>/frames.csv columns: traj, frame, a1..a6 (height, distance, heading, wrist_angle,\n"
      "#   wrist_rotation, gripper), then for markers m0..m9: x1,y1,..,x4,y4 normalized corners and vis,\n"
      "#   then the image file name. Invisible markers have all-zero corners.\n";
  write_text(dir / "manifest.txt", text + kv.to_string());
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) throw LoadError(where + ": bad number '" + s + "'");
  return v;
}

inline int parse_int(const std::string& s, const std::string& where) {
  std::size_t pos = 0;
  int v = 0;
  try {
    v = std::stoi(s, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != s.size()) throw LoadError(where + ": bad integer '" + s + "'");
  return v;
}

}  // namespace detail

/// Loads and validates one split directory written by save_split.
inline Split load_split_dir(const std::filesystem::path& sub, const std::string& name, const DatasetSpec& spec) {
  Split split;
  split.name = name;
  const auto csv_path = sub / "frames.csv";
  const auto bytes = read_bytes(csv_path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::string line;
  if (!std::getline(in, line) || line != frames_csv_header()) throw LoadError(csv_path.string() + ": unexpected header");
  const std::size_t columns = 2 + kConfigDims + kMarkerCount * kFiducialSlot + 1;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    const std::string where = csv_path.string() + " line " + std::to_string(line_no);
    if (cells.size() != columns) {
      throw LoadError(where + ": expected " + std::to_string(columns) + " columns, got " + std::to_string(cells.size()));
    }
    Frame f;
    f.trajectory = detail::parse_int(cells[0], where);
    f.index = detail::parse_int(cells[1], where);
    const std::string id = where + " (trajectory " + cells[0] + " frame " + cells[1] + ")";
    for (std::size_t k = 0; k < kConfigDims; ++k) f.config[k] = detail::parse_double(cells[2 + k], id);
    if (!f.config.valid()) throw LoadError(id + ": configuration outside [0,1]");
    std::size_t c = 2 + kConfigDims;
    for (std::size_t m = 0; m < kMarkerCount; ++m) {
      MarkerDetection& d = f.detections[m];
      d.id = static_cast<int>(m);
      for (auto& v : d.corners) v = detail::parse_double(cells[c++], id);
      const std::string& vis = cells[c++];
      if (vis != "0" && vis != "1") throw LoadError(id + ": marker " + std::to_string(m) + " visibility '" + vis + "'");
      d.visible = vis == "1";
      for (double v : d.corners) {
        if (d.visible ? !(v >= 0.0 && v <= 1.0) : v != 0.0) {
          throw LoadError(id + ": marker " + std::to_string(m) + " detection value " + format17(v) +
                          (d.visible ? " outside [0,1]" : " on an invisible marker"));
        }
      }
    }
    f.image_file = cells[c];
    if (f.image_file != image_file_name(f.trajectory, f.index)) {
      throw LoadError(id + ": image file '" + f.image_file + "' does not match frame identity");
    }
    f.image = read_pgm((sub / f.image_file).string());
    if (f.image.width != spec.camera.width || f.image.height != spec.camera.height) {
      throw LoadError(id + ": image " + f.image_file + " has the wrong dimensions");
    }
    split.frames.push_back(std::move(f));
  }
  return split;
}

inline SplitSet load_split(const std::filesystem::path& dir) {
  const auto manifest = dir / "manifest.txt";
  if (!std::filesystem::exists(manifest)) throw LoadError("missing file " + manifest.string());
  KeyValues kv;
  try {
    kv = KeyValues::load(manifest.string());
  } catch (const Error& e) {
    throw LoadError(std::string("bad manifest: ") + e.what());
  }
  if (kv.str("format", "") != "vprop-dataset 1") throw LoadError(manifest.string() + ": not a vprop dataset manifest");
  SplitSet set;
  try {
    set.spec = DatasetSpec::from_kv(kv);
  } catch (const LoadError&) {
    throw;
  } catch (const Error& e) {
    throw LoadError(manifest.string() + ": " + e.what());
  }
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string name = kSplitNames[s];
    const std::string p = "split." + name + ".";
    if (!kv.has(p + "frames")) throw LoadError(manifest.string() + ": no entry for split '" + name + "'");
    const auto sub = dir / name;
    Split split = load_split_dir(sub, name, set.spec);
    split.shuffle_on_load = kv.integer(p + "shuffle_on_load") != 0;
    set.spec.sizes[s] = split.frames.size();
    if (static_cast<long long>(split.frames.size()) != kv.integer(p + "frames")) {
      throw LoadError(name + "/frames.csv has " + std::to_string(split.frames.size()) + " frames, manifest says " +
                      kv.str(p + "frames"));
    }
    const auto csv = read_bytes(sub / "frames.csv");
    if (hex64(fnv1a(csv)) != kv.str(p + "csv_fnv1a")) throw LoadError(name + "/frames.csv checksum mismatch");
    std::uint64_t img_hash = fnv1a({});
    for (const auto& f : split.frames) img_hash = fnv1a(read_bytes(sub / f.image_file), img_hash);
    if (hex64(img_hash) != kv.str(p + "images_fnv1a")) throw LoadError(name + " image checksum mismatch");
    if (name == "test") {
      for (std::size_t i = 1; i < split.frames.size(); ++i) {
        const auto& a = split.frames[i - 1];
        const auto& b = split.frames[i];
        if (std::make_pair(b.trajectory, b.index) <= std::make_pair(a.trajectory, a.index)) {
          throw LoadError("test split out of order at trajectory " + std::to_string(b.trajectory) + " frame " +
                          std::to_string(b.index));
        }
      }
    }
    set.splits[s] = std::move(split);
  }
  set.verify_disjoint();
  return set;
}

/// Recomputes every frame's detections from its stored configuration and RNG
/// stream. Returns human-readable mismatches (empty when consistent).
inline std::vector<std::string> verify_detections(const SplitSet& set) {
  std::vector<std::string> problems;
  for (const auto& split : set.splits) {
    for (const auto& f : split.frames) {
      Rng rng = detection_rng(set.spec.seed, f.trajectory, f.index);
      const auto d = detect_markers(forward_kinematics(f.config, set.spec.geometry), set.spec.camera, set.spec.noise, rng);
      for (std::size_t m = 0; m < kMarkerCount; ++m) {
        if (d[m].visible != f.detections[m].visible || d[m].corners != f.detections[m].corners) {
          problems.push_back(split.name + " trajectory " + std::to_string(f.trajectory) + " frame " +
                             std::to_string(f.index) + " marker " + std::to_string(m));
        }
      }
    }
  }
  return problems;
}

}  // namespace vprop
