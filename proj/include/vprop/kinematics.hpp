#pragma once

#include <Eigen/Geometry>

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "vprop/errors.hpp"
#include "vprop/keyvalue.hpp"

namespace vprop {

using Vec3 = Eigen::Vector3d;

inline constexpr std::size_t kConfigDims = 6;
inline constexpr std::size_t kMarkerCount = 10;

inline constexpr std::array<const char*, kConfigDims> kComponentNames = {
    "height", "distance", "heading", "wrist_angle", "wrist_rotation", "gripper"};

/// Normalized arm configuration [height, distance, heading, wrist_angle,
/// wrist_rotation, gripper], every component in [0, 1].
struct Configuration {
  std::array<double, kConfigDims> a{};

  double& operator[](std::size_t i) { return a[i]; }
  double operator[](std::size_t i) const { return a[i]; }

  bool valid() const {
    for (double v : a)
      if (!(v >= 0.0 && v <= 1.0)) return false;
    return true;
  }
  void validate() const {
    for (std::size_t i = 0; i < kConfigDims; ++i) {
      if (!(a[i] >= 0.0 && a[i] <= 1.0)) {
        throw ValidationError(std::string("configuration component ") + kComponentNames[i] + " = " +
                              KeyValues::format(a[i]) + " outside [0,1]");
      }
    }
  }
  static Configuration uniform(double v) {
    Configuration c;
    c.a.fill(v);
    return c;
  }
  friend bool operator==(const Configuration&, const Configuration&) = default;
};

enum class LinkId : int { kUpper = 0, kForearm = 1, kWrist = 2, kJawLeft = 3, kJawRight = 4 };

inline const char* link_name(LinkId id) {
  switch (id) {
    case LinkId::kUpper: return "upper";
    case LinkId::kForearm: return "forearm";
    case LinkId::kWrist: return "wrist";
    case LinkId::kJawLeft: return "jaw_left";
    case LinkId::kJawRight: return "jaw_right";
  }
  return "?";
}

inline LinkId link_from_name(const std::string& s) {
  for (int i = 0; i <= 4; ++i)
    if (s == link_name(static_cast<LinkId>(i))) return static_cast<LinkId>(i);
  throw ConfigError("unknown link '" + s + "'");
}

/// Square marker rigidly attached to a link. `offset` and `normal` are in the
/// link frame: x along the link, y lateral, z = x cross y.
struct MarkerMount {
  LinkId parent = LinkId::kUpper;
  Vec3 offset = Vec3::Zero();
  Vec3 normal = Vec3::UnitY();
  double side = 0.025;
};

struct Range {
  double lo = 0.0;
  double hi = 1.0;
  double at(double u) const { return lo + u * (hi - lo); }
};

struct ArmGeometry {
  Vec3 base = Vec3::Zero();
  double shoulder_height = 0.14;
  double upper_length = 0.146;    // L1
  double forearm_length = 0.185;  // L2
  double wrist_length = 0.09;     // Lw
  double jaw_length = 0.03;
  double jaw_max_opening = 0.03;
  double reach_margin = 1e-3;

  Range radial{0.12, 0.30};
  Range height{0.03, 0.25};
  double heading_max = std::numbers::pi / 2;
  Range pitch{-std::numbers::pi / 2, std::numbers::pi / 2};
  Range roll{-std::numbers::pi / 2, std::numbers::pi / 2};

  std::vector<MarkerMount> markers;

  /// Throws ConfigError unless the whole normalized cube is reachable and there are exactly 10 markers.
  void validate() const {
    if (markers.size() != kMarkerCount) {
      throw ConfigError("geometry needs exactly 10 marker mounts, has " + std::to_string(markers.size()));
    }
    const double inner = std::abs(upper_length - forearm_length) + reach_margin;
    const double outer = upper_length + forearm_length - reach_margin;
    // The shoulder-to-wrist distance is extremal at corners of the (r, z) box.
    const double dz_far = std::max(std::abs(height.lo - shoulder_height), std::abs(height.hi - shoulder_height));
    const double far = std::hypot(radial.hi, dz_far);
    const double dz_near = std::clamp(shoulder_height, height.lo, height.hi) - shoulder_height;
    const double near = std::hypot(radial.lo, dz_near);
    if (!(near > inner && far < outer)) {
      throw ConfigError("geometry ranges leave the reachable annulus (" + KeyValues::format(near) + ", " +
                        KeyValues::format(far) + ") vs (" + KeyValues::format(inner) + ", " +
                        KeyValues::format(outer) + ")");
    }
    for (const auto& m : markers) {
      if (!(m.side > 0) || std::abs(m.normal.norm() - 1.0) > 1e-9) {
        throw ConfigError("marker mounts need positive side and unit normal");
      }
    }
  }
};

/// Default marker layout, per side of the arm: one marker on the upper link,
/// two on the forearm, one on the wrist and one on top of a jaw. Link and wrist
/// normals are tilted `tilt` radians from the lateral axis toward the link's z
/// axis. The two jaw markers both face +z of the wrist frame, so when one is
/// seen the other usually is too, and their gap follows the jaw opening.
inline std::vector<MarkerMount> default_marker_layout(const ArmGeometry& g, double half_width = 0.02,
                                                      double tilt = 0.7) {
  std::vector<MarkerMount> out;
  const double c = std::cos(tilt), s = std::sin(tilt);
  for (int sign : {+1, -1}) {
    const Vec3 n(0.0, sign * c, s);
    const Vec3 lateral(0.0, sign * half_width, 0.0);
    out.push_back({LinkId::kUpper, Vec3(0.5 * g.upper_length, 0, 0) + lateral, n, 0.025});
    for (double f : {0.3, 0.7}) out.push_back({LinkId::kForearm, Vec3(f * g.forearm_length, 0, 0) + lateral, n, 0.025});
    out.push_back({LinkId::kWrist, Vec3(0.04, sign * 0.012, 0), n, 0.02});
    out.push_back({sign > 0 ? LinkId::kJawLeft : LinkId::kJawRight, Vec3(0.5 * g.jaw_length, sign * 0.006, 0),
                   Vec3::UnitZ(), 0.012});
  }
  return out;
}

inline ArmGeometry default_geometry() {
  ArmGeometry g;
  g.markers = default_marker_layout(g);
  return g;
}

/// Physical quantities behind a normalized configuration.
struct PhysicalPose {
  double radius = 0;       // m, horizontal distance of the wrist from the base axis
  double height = 0;       // m, wrist height above the base
  double heading = 0;      // rad about the vertical axis
  double pitch = 0;        // rad, wrist segment elevation
  double roll = 0;         // rad about the wrist segment
  double jaw_opening = 0;  // m
};

inline PhysicalPose denormalize(const Configuration& c, const ArmGeometry& g) {
  c.validate();
  return {g.radial.at(c[1]), g.height.at(c[0]), -g.heading_max + 2 * g.heading_max * c[2],
          g.pitch.at(c[3]),  g.roll.at(c[4]),   g.jaw_max_opening * c[5]};
}

struct LinkFrame {
  Vec3 origin = Vec3::Zero();
  Eigen::Matrix3d axes = Eigen::Matrix3d::Identity();  // columns: x, y, z
  Vec3 to_world(const Vec3& local) const { return origin + axes * local; }
};

struct MarkerFrame {
  std::array<Vec3, 4> corners;  // fixed winding per marker
  Vec3 center = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  LinkId parent = LinkId::kUpper;
};

struct ArmPose {
  Vec3 base, shoulder, elbow, wrist, palm;
  std::array<Vec3, 2> jaw_roots;
  std::array<Vec3, 2> jaw_tips;
  std::array<LinkFrame, 5> links;
  std::vector<MarkerFrame> markers;
};

namespace detail {
inline MarkerFrame place_marker(const MarkerMount& m, const LinkFrame& f) {
  MarkerFrame out;
  out.parent = m.parent;
  out.center = f.to_world(m.offset);
  out.normal = (f.axes * m.normal).normalized();
  Vec3 u = f.axes.col(0) - out.normal * out.normal.dot(f.axes.col(0));
  if (u.norm() < 1e-9) u = f.axes.col(1);
  u.normalize();
  const Vec3 v = out.normal.cross(u);
  const double h = m.side / 2;
  out.corners = {out.center - h * u - h * v, out.center + h * u - h * v, out.center + h * u + h * v,
                 out.center - h * u + h * v};
  return out;
}
}  // namespace detail

/// Places the wrist at cylindrical (r, heading, z) around the base axis and
/// solves the shoulder/elbow by planar two-link IK on the elbow-up branch.
inline ArmPose forward_kinematics(const Configuration& c, const ArmGeometry& g) {
  const PhysicalPose p = denormalize(c, g);
  const Vec3 up = Vec3::UnitZ();
  const Vec3 radial(std::cos(p.heading), std::sin(p.heading), 0.0);
  const Vec3 lateral(-std::sin(p.heading), std::cos(p.heading), 0.0);

  ArmPose pose;
  pose.base = g.base;
  pose.shoulder = g.base + g.shoulder_height * up;
  pose.wrist = g.base + p.radius * radial + p.height * up;

  const double rho = p.radius, h = p.height - g.shoulder_height;
  const double dist = std::hypot(rho, h);
  const double l1 = g.upper_length, l2 = g.forearm_length;
  if (!(dist > std::abs(l1 - l2) + g.reach_margin && dist < l1 + l2 - g.reach_margin)) {
    throw KinematicsError("wrist target at distance " + KeyValues::format(dist) + " outside reachable annulus");
  }
  const double cos_inner = std::clamp((l1 * l1 + dist * dist - l2 * l2) / (2 * l1 * dist), -1.0, 1.0);
  const double shoulder_angle = std::atan2(h, rho) + std::acos(cos_inner);
  pose.elbow = pose.shoulder + l1 * (std::cos(shoulder_angle) * radial + std::sin(shoulder_angle) * up);
  // Place the wrist exactly L2 from the elbow so link lengths hold to rounding.
  pose.wrist = pose.elbow + l2 * (pose.wrist - pose.elbow).normalized();

  const Vec3 wdir = std::cos(p.pitch) * radial + std::sin(p.pitch) * up;
  const Vec3 wz0 = wdir.cross(lateral);
  const Vec3 wy = std::cos(p.roll) * lateral + std::sin(p.roll) * wz0;
  pose.palm = pose.wrist + g.wrist_length * wdir;
  for (int j = 0; j < 2; ++j) {
    const double s = j == 0 ? 0.5 : -0.5;
    pose.jaw_roots[j] = pose.palm + s * p.jaw_opening * wy;
    pose.jaw_tips[j] = pose.jaw_roots[j] + g.jaw_length * wdir;
  }

  auto frame = [](const Vec3& origin, const Vec3& x, const Vec3& y) {
    LinkFrame f;
    f.origin = origin;
    f.axes.col(0) = x;
    f.axes.col(1) = y;
    f.axes.col(2) = x.cross(y);
    return f;
  };
  pose.links[0] = frame(pose.shoulder, (pose.elbow - pose.shoulder).normalized(), lateral);
  pose.links[1] = frame(pose.elbow, (pose.wrist - pose.elbow).normalized(), lateral);
  pose.links[2] = frame(pose.wrist, wdir, wy);
  pose.links[3] = frame(pose.jaw_roots[0], wdir, wy);
  pose.links[4] = frame(pose.jaw_roots[1], wdir, wy);

  pose.markers.reserve(g.markers.size());
  for (const auto& m : g.markers) pose.markers.push_back(detail::place_marker(m, pose.links[static_cast<int>(m.parent)]));
  return pose;
}

inline const std::vector<MarkerFrame>& marker_world_corners(const ArmPose& pose) { return pose.markers; }

// -- text serialization ------------------------------------------------------

inline KeyValues geometry_to_kv(const ArmGeometry& g) {
  KeyValues kv;
  kv.set("base", {g.base.x(), g.base.y(), g.base.z()});
  kv.set("shoulder_height", g.shoulder_height);
  kv.set("upper_length", g.upper_length);
  kv.set("forearm_length", g.forearm_length);
  kv.set("wrist_length", g.wrist_length);
  kv.set("jaw_length", g.jaw_length);
  kv.set("jaw_max_opening", g.jaw_max_opening);
  kv.set("radial_range", {g.radial.lo, g.radial.hi});
  kv.set("height_range", {g.height.lo, g.height.hi});
  kv.set("heading_max", g.heading_max);
  kv.set("pitch_range", {g.pitch.lo, g.pitch.hi});
  kv.set("roll_range", {g.roll.lo, g.roll.hi});
  for (std::size_t i = 0; i < g.markers.size(); ++i) {
    const auto& m = g.markers[i];
    const std::string p = "marker." + std::to_string(i) + ".";
    kv.set(p + "link", link_name(m.parent));
    kv.set(p + "offset", {m.offset.x(), m.offset.y(), m.offset.z()});
    kv.set(p + "normal", {m.normal.x(), m.normal.y(), m.normal.z()});
    kv.set(p + "side", m.side);
  }
  return kv;
}

/// Reads geometry keys (optionally under `prefix`) on top of the defaults.
inline ArmGeometry geometry_from_kv(const KeyValues& kv, const std::string& prefix = "") {
  ArmGeometry g = default_geometry();
  auto vec = [&](const std::string& key, std::size_t n) {
    const auto v = kv.nums(prefix + key);
    if (v.size() != n) throw ConfigError("key '" + prefix + key + "' needs " + std::to_string(n) + " numbers");
    return v;
  };
  auto range = [&](const std::string& key, Range& r) {
    if (kv.has(prefix + key)) {
      const auto v = vec(key, 2);
      r = {v[0], v[1]};
    }
  };
  if (kv.has(prefix + "base")) {
    const auto v = vec("base", 3);
    g.base = Vec3(v[0], v[1], v[2]);
  }
  g.shoulder_height = kv.num(prefix + "shoulder_height", g.shoulder_height);
  g.upper_length = kv.num(prefix + "upper_length", g.upper_length);
  g.forearm_length = kv.num(prefix + "forearm_length", g.forearm_length);
  g.wrist_length = kv.num(prefix + "wrist_length", g.wrist_length);
  g.jaw_length = kv.num(prefix + "jaw_length", g.jaw_length);
  g.jaw_max_opening = kv.num(prefix + "jaw_max_opening", g.jaw_max_opening);
  range("radial_range", g.radial);
  range("height_range", g.height);
  g.heading_max = kv.num(prefix + "heading_max", g.heading_max);
  range("pitch_range", g.pitch);
  range("roll_range", g.roll);
  for (std::size_t i = 0; i < kMarkerCount; ++i) {
    const std::string p = "marker." + std::to_string(i) + ".";
    if (!kv.has(prefix + p + "link")) continue;
    MarkerMount& m = g.markers[i];
    m.parent = link_from_name(kv.str(prefix + p + "link"));
    const auto o = vec(p + "offset", 3);
    const auto n = vec(p + "normal", 3);
    m.offset = Vec3(o[0], o[1], o[2]);
    m.normal = Vec3(n[0], n[1], n[2]).normalized();
    m.side = kv.num(prefix + p + "side", m.side);
  }
  g.validate();
  return g;
}

}  // namespace vprop
