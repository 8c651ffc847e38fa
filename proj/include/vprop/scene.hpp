#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vprop/kinematics.hpp"
#include "vprop/random.hpp"

namespace vprop {

struct Pixel {
  double x = 0;
  double y = 0;
};

struct CameraModel {
  Vec3 position = Vec3(1, 0, 0);
  Vec3 target = Vec3::Zero();
  Vec3 up = Vec3::UnitZ();
  double focal = 60.0;  // pixels
  double cx = 32.0;
  double cy = 32.0;
  int width = 64;
  int height = 64;

  void validate() const {
    if (!(focal > 0)) throw ConfigError("camera focal length must be positive");
    if (!(cx >= 0 && cx <= width && cy >= 0 && cy <= height)) throw ConfigError("principal point outside image");
    if (width <= 0 || height <= 0) throw ConfigError("camera image size must be positive");
    if ((target - position).norm() < 1e-12) throw ConfigError("camera target equals position");
  }

  /// Rows are the camera axes in world coordinates: right, down, forward.
  Eigen::Matrix3d rotation() const {
    const Vec3 f = (target - position).normalized();
    const Vec3 r = f.cross(up).normalized();
    const Vec3 d = f.cross(r);
    Eigen::Matrix3d R;
    R.row(0) = r;
    R.row(1) = d;
    R.row(2) = f;
    return R;
  }

  Vec3 to_camera(const Vec3& p) const { return rotation() * (p - position); }
  Vec3 view_direction() const { return (target - position).normalized(); }

  /// Angle of the optical axis below the horizontal plane, in degrees.
  double pitch_down_degrees() const {
    const Vec3 f = view_direction();
    return std::asin(-f.z()) * 180.0 / std::numbers::pi;
  }
};

inline constexpr double kNearPlane = 1e-6;

inline std::optional<Pixel> project_camera_point(const CameraModel& cam, const Vec3& pc) {
  if (pc.z() <= kNearPlane) return std::nullopt;
  return Pixel{cam.cx + cam.focal * pc.x() / pc.z(), cam.cy + cam.focal * pc.y() / pc.z()};
}

inline std::optional<Pixel> project(const CameraModel& cam, const Vec3& world) {
  return project_camera_point(cam, cam.to_camera(world));
}

/// Named viewpoints. Both share intrinsics and stand 0.75 m from the workspace
/// center: "side" sits to the robot's right (-y) looking down 60 degrees,
/// "front" sits ahead of the robot (+x) looking down 45 degrees.
inline CameraModel camera_preset(const std::string& name) {
  const Vec3 center(0.16, 0.0, 0.10);
  const double dist = 0.75;
  CameraModel cam;
  cam.target = center;
  cam.focal = 80.0;
  if (name == "side") {
    const double a = 60.0 * std::numbers::pi / 180.0;
    cam.position = center + dist * Vec3(0.0, -std::cos(a), std::sin(a));
  } else if (name == "front") {
    const double a = 45.0 * std::numbers::pi / 180.0;
    cam.position = center + dist * Vec3(std::cos(a), 0.0, std::sin(a));
  } else {
    throw ConfigError("unknown camera preset '" + name + "' (expected side or front)");
  }
  return cam;
}

struct NoiseModel {
  double corner_sigma = 0.5;        // pixels
  double dropout = 0.1;             // per visible marker per frame
  double facing_threshold = 0.26;   // min cos between marker normal and direction to camera

  void validate() const {
    if (!(corner_sigma >= 0)) throw ConfigError("corner noise sigma must be >= 0");
    if (!(dropout >= 0 && dropout <= 1)) throw ConfigError("dropout must lie in [0,1]");
  }
  static NoiseModel noiseless() { return {0.0, 0.0, 0.26}; }
};

/// One marker's detection: visibility flag plus 8 normalized corner coordinates
/// (x1, y1, ..., x4, y4). Invisible markers carry all-zero coordinates.
struct MarkerDetection {
  int id = 0;
  bool visible = false;
  std::array<double, 8> corners{};
};

using DetectionSet = std::array<MarkerDetection, kMarkerCount>;

inline int visible_count(const DetectionSet& d) {
  return static_cast<int>(std::count_if(d.begin(), d.end(), [](const MarkerDetection& m) { return m.visible; }));
}

/// Simulated square-fiducial detector. A marker is reported when it faces the
/// camera, all four corners land inside the image and a dropout draw passes.
/// The RNG is consumed identically for every marker regardless of visibility.
inline DetectionSet detect_markers(const ArmPose& pose, const CameraModel& cam, const NoiseModel& noise, Rng& rng) {
  DetectionSet out;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto w = static_cast<double>(cam.width), h = static_cast<double>(cam.height);
  for (std::size_t i = 0; i < kMarkerCount; ++i) {
    MarkerDetection& det = out[i];
    det.id = static_cast<int>(i);
    const double draw = unif(rng);
    std::array<double, 8> jitter;
    for (auto& j : jitter) j = gauss(rng);
    if (i >= pose.markers.size()) continue;

    const MarkerFrame& m = pose.markers[i];
    const Vec3 to_cam = (cam.position - m.center).normalized();
    if (m.normal.dot(to_cam) <= noise.facing_threshold) continue;
    std::array<Pixel, 4> px;
    bool inside = true;
    for (int c = 0; c < 4 && inside; ++c) {
      const auto p = project(cam, m.corners[c]);
      inside = p && p->x >= 0 && p->x <= w && p->y >= 0 && p->y <= h;
      if (p) px[c] = *p;
    }
    if (!inside) continue;
    if (draw < noise.dropout) continue;
    det.visible = true;
    for (int c = 0; c < 4; ++c) {
      const double x = std::clamp(px[c].x + noise.corner_sigma * jitter[2 * c], 0.0, w);
      const double y = std::clamp(px[c].y + noise.corner_sigma * jitter[2 * c + 1], 0.0, h);
      det.corners[2 * c] = x / w;
      det.corners[2 * c + 1] = y / h;
    }
  }
  return out;
}

/// Single-channel image with intensities in [0,1], row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int w, int h, double fill = 0.0) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}
  double& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  friend bool operator==(const Image&, const Image&) = default;
};

/// Fixed backdrop: vertical and horizontal gradient, a faint grid and a seeded
/// low-amplitude texture, kept below 0.5 so the arm stands out.
inline Image static_background(int width = 64, int height = 64, std::uint64_t seed = 7) {
  Image img(width, height);
  Rng rng(mix64(seed));
  std::uniform_real_distribution<double> tex(-0.03, 0.03);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      double v = 0.10 + 0.20 * y / height + 0.08 * x / width;
      if (x % 8 == 3 || y % 8 == 5) v += 0.07;
      img.at(x, y) = std::clamp(v + tex(rng), 0.0, 1.0);
    }
  return img;
}

struct Segment {
  Vec3 a, b;
  double radius;     // world metres
  double intensity;  // drawn value
};

inline std::vector<Segment> arm_segments(const ArmPose& pose) {
  return {{pose.shoulder, pose.elbow, 0.016, 0.9},
          {pose.elbow, pose.wrist, 0.013, 0.7},
          {pose.wrist, pose.palm, 0.011, 0.5},
          {pose.jaw_roots[0], pose.jaw_tips[0], 0.005, 1.0},
          {pose.jaw_roots[1], pose.jaw_tips[1], 0.005, 1.0}};
}

/// Draws the arm links as anti-aliased capsules over `background`, far to near.
inline Image rasterize(const ArmPose& pose, const CameraModel& cam, const Image& background) {
  if (background.width != cam.width || background.height != cam.height) {
    throw ValidationError("background " + std::to_string(background.width) + "x" +
                          std::to_string(background.height) + " does not match camera " +
                          std::to_string(cam.width) + "x" + std::to_string(cam.height));
  }
  struct Projected {
    Pixel a, b;
    double radius_px, intensity, depth;
  };
  std::vector<Projected> segs;
  for (const auto& s : arm_segments(pose)) {
    const Vec3 ca = cam.to_camera(s.a), cb = cam.to_camera(s.b);
    const auto pa = project_camera_point(cam, ca);
    const auto pb = project_camera_point(cam, cb);
    if (!pa || !pb) continue;
    const double depth = 0.5 * (ca.z() + cb.z());
    segs.push_back({*pa, *pb, std::max(0.5, cam.focal * s.radius / depth), s.intensity, depth});
  }
  std::stable_sort(segs.begin(), segs.end(), [](const Projected& l, const Projected& r) { return l.depth > r.depth; });

  Image img = background;
  for (const auto& s : segs) {
    const double ex = s.b.x - s.a.x, ey = s.b.y - s.a.y;
    const double len2 = ex * ex + ey * ey;
    const double reach = s.radius_px + 1.0;
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(s.a.x, s.b.x) - reach)));
    const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(std::max(s.a.x, s.b.x) + reach)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(s.a.y, s.b.y) - reach)));
    const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(std::max(s.a.y, s.b.y) + reach)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5 - s.a.x, py = y + 0.5 - s.a.y;
        const double t = len2 > 0 ? std::clamp((px * ex + py * ey) / len2, 0.0, 1.0) : 0.0;
        const double dist = std::hypot(px - t * ex, py - t * ey);
        const double cover = std::clamp(s.radius_px + 0.5 - dist, 0.0, 1.0);
        if (cover > 0) {
          double& v = img.at(x, y);
          v = std::clamp(v * (1 - cover) + s.intensity * cover, 0.0, 1.0);
        }
      }
  }
  return img;
}

// -- binary PGM (P5, maxval 255) --------------------------------------------

inline void write_pgm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path);
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  for (double v : img.pixels) {
    const auto b = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    out.put(static_cast<char>(b));
  }
  if (!out) throw ValidationError("failed writing " + path);
}

inline Image read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("missing image file " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255) throw LoadError("malformed PGM " + path);
  in.get();
  Image img(w, h);
  for (auto& v : img.pixels) {
    const int c = in.get();
    if (c == EOF) throw LoadError("truncated PGM " + path);
    v = static_cast<double>(c) / 255.0;
  }
  return img;
}

/// 8-bit quantization identical to what a PGM round trip produces.
inline Image quantize(const Image& img) {
  Image q = img;
  for (auto& v : q.pixels) v = static_cast<double>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0;
  return q;
}

// -- text serialization ------------------------------------------------------

inline void camera_to_kv(const CameraModel& cam, KeyValues& kv, const std::string& prefix) {
  kv.set(prefix + "position", {cam.position.x(), cam.position.y(), cam.position.z()});
  kv.set(prefix + "target", {cam.target.x(), cam.target.y(), cam.target.z()});
  kv.set(prefix + "up", {cam.up.x(), cam.up.y(), cam.up.z()});
  kv.set(prefix + "focal", cam.focal);
  kv.set(prefix + "principal_point", {cam.cx, cam.cy});
  kv.set(prefix + "image_size", {static_cast<double>(cam.width), static_cast<double>(cam.height)});
}

/// Starts from `base` and applies any keys present under `prefix`.
inline CameraModel camera_from_kv(const KeyValues& kv, const std::string& prefix, CameraModel cam) {
  auto vec3 = [&](const std::string& key, Vec3& v) {
    if (!kv.has(prefix + key)) return;
    const auto n = kv.nums(prefix + key);
    if (n.size() != 3) throw ConfigError("key '" + prefix + key + "' needs 3 numbers");
    v = Vec3(n[0], n[1], n[2]);
  };
  vec3("position", cam.position);
  vec3("target", cam.target);
  vec3("up", cam.up);
  cam.focal = kv.num(prefix + "focal", cam.focal);
  if (kv.has(prefix + "principal_point")) {
    const auto n = kv.nums(prefix + "principal_point");
    if (n.size() != 2) throw ConfigError("key '" + prefix + "principal_point' needs 2 numbers");
    cam.cx = n[0];
    cam.cy = n[1];
  }
  if (kv.has(prefix + "image_size")) {
    const auto n = kv.nums(prefix + "image_size");
    if (n.size() != 2) throw ConfigError("key '" + prefix + "image_size' needs 2 numbers");
    cam.width = static_cast<int>(n[0]);
    cam.height = static_cast<int>(n[1]);
  }
  cam.validate();
  return cam;
}

inline void noise_to_kv(const NoiseModel& n, KeyValues& kv, const std::string& prefix) {
  kv.set(prefix + "corner_sigma", n.corner_sigma);
  kv.set(prefix + "dropout", n.dropout);
  kv.set(prefix + "facing_threshold", n.facing_threshold);
}

inline NoiseModel noise_from_kv(const KeyValues& kv, const std::string& prefix, NoiseModel n = {}) {
  n.corner_sigma = kv.num(prefix + "corner_sigma", n.corner_sigma);
  n.dropout = kv.num(prefix + "dropout", n.dropout);
  n.facing_threshold = kv.num(prefix + "facing_threshold", n.facing_threshold);
  n.validate();
  return n;
}

}  // namespace vprop
