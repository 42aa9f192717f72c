#pragma once

#include <array>
#include <algorithm>
#include <cstring>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "hmvmm/common.hpp"

namespace hmvmm::scene {

struct Rect2 {
  Vec2 min{0.0, 0.0};
  Vec2 max{0.0, 0.0};

  bool contains(const Vec2& p) const {
    return p.x() >= min.x() && p.x() <= max.x() && p.y() >= min.y() && p.y() <= max.y();
  }
  double width() const { return max.x() - min.x(); }
  double depth() const { return max.y() - min.y(); }
  Vec2 center() const { return 0.5 * (min + max); }
  bool degenerate() const { return width() <= 0.0 || depth() <= 0.0; }
};

struct Building {
  Rect2 footprint;
  double height = 0.0;
};

struct SensorFlags {
  bool has_gps = false;
  bool has_rgb = false;
  bool has_lidar = false;
};

struct Vehicle {
  Vec3 position{0, 0, 0};   // ground contact point, z = 0
  Vec2 velocity{0, 0};      // m/s in the world frame
  double orientation = 0.0; // beta, radians in [-pi, pi)
  SensorFlags sensors;
};

struct Scene {
  Vec3 rsu_position{0, 0, 0};
  std::vector<Building> buildings;
  std::vector<Vehicle> vehicles;
  Rect2 bounds;
  std::vector<Rect2> gps_blackout_zones;
};

// Camera index convention for per-camera containers. Yaw offsets relative to
// the vehicle orientation: front 0, rear pi, left +pi/2, right -pi/2.
enum Camera : int { kFront = 0, kRear = 1, kLeft = 2, kRight = 3 };
inline constexpr std::array<double, 4> kCameraYawOffset = {0.0, kPi, kPi / 2.0, -kPi / 2.0};

/// Detection box in normalized image coordinates, objectness score in [0,1].
struct Box {
  double u = 0, v = 0, w = 0, h = 0;
  double score = 1.0;
};

struct SensorSnapshot {
  std::optional<Vec3> gps;           // absent when no fix is available
  bool gps_dead_reckoned = false;    // fix synthesized from the last one
  std::array<std::vector<Box>, 4> detections;  // indexed by Camera
  std::vector<Vec3> point_cloud;     // vehicle frame
  double rgb_flip_prob = 0.0;        // consumed by the indicator corruption stage
};

struct SceneConfig {
  double bounds_x = 190.0;  // §V scenario extent
  double bounds_y = 135.0;
  double rsu_x = 95.0;
  double rsu_y = 80.0;
  double rsu_height = 9.0;

  int building_count = 12;
  double building_min_height = 8.0;
  double building_max_height = 20.0;
  double building_cell = 22.0;       // grid pitch for building placement
  double building_fill_min = 0.45;   // footprint side as a fraction of the cell
  double building_fill_max = 0.8;

  double road_half_width = 6.0;
  double road_y = 67.5;              // road centerline
  double vehicle_min_separation = 4.0;

  int vehicle_count = 7;
  // Per-vehicle sensor flags {gps, rgb, lidar}; cycled when shorter than
  // vehicle_count. Default mirrors the seven-vehicle mixed configuration.
  std::vector<SensorFlags> vehicle_sensors = {
      {true, false, true}, {true, false, false}, {false, true, false},
      {false, false, true}, {true, true, false}, {true, false, true},
      {true, true, false}};

  double gps_noise_std = 5.0;        // meters, x and y
  bool gps_history_fallback = true;  // dead-reckon inside blackout zones
  double gps_dead_reckon_inflation = 2.0;

  double camera_omega_min = -0.87;   // rad, horizontal FoV is [omega_min, -omega_min]
  double camera_delta_omega = 0.435; // rad per angle bin
  double camera_vertical_halffov = 0.6;
  double camera_max_range = 120.0;
  double sensor_height = 1.6;        // camera / LiDAR mount height

  double lidar_range = 80.0;
  double lidar_face_spacing = 2.0;   // surface sample pitch on building faces
  double lidar_ground_spacing = 6.0;

  std::vector<Rect2> blackout_zones = {};  // empty -> one default zone on the road
};

namespace detail {

inline double wrap_angle(double a) {
  while (a >= kPi) a -= 2.0 * kPi;
  while (a < -kPi) a += 2.0 * kPi;
  return a;
}

/// True when segment a-b penetrates the axis-aligned box (slab test, box
/// shrunk by eps so grazing contacts do not count as blockage).
inline bool segment_hits_box(const Vec3& a, const Vec3& b, const Vec3& lo, const Vec3& hi,
                             double eps = 1e-9) {
  double tmin = 0.0, tmax = 1.0;
  const Vec3 d = b - a;
  for (int ax = 0; ax < 3; ++ax) {
    const double l = lo(ax) + eps, u = hi(ax) - eps;
    if (l >= u) return false;
    if (std::abs(d(ax)) < 1e-12) {
      if (a(ax) <= l || a(ax) >= u) return false;
    } else {
      double t1 = (l - a(ax)) / d(ax);
      double t2 = (u - a(ax)) / d(ax);
      if (t1 > t2) std::swap(t1, t2);
      tmin = std::max(tmin, t1);
      tmax = std::min(tmax, t2);
      if (tmin >= tmax) return false;
    }
  }
  return true;
}

inline bool segment_blocked(const Vec3& a, const Vec3& b, const std::vector<Building>& buildings) {
  for (const auto& bl : buildings) {
    const Vec3 lo(bl.footprint.min.x(), bl.footprint.min.y(), 0.0);
    const Vec3 hi(bl.footprint.max.x(), bl.footprint.max.y(), bl.height);
    if (segment_hits_box(a, b, lo, hi)) return true;
  }
  return false;
}

}  // namespace detail

inline bool in_blackout(const Scene& s, const Vec2& p) {
  for (const auto& z : s.gps_blackout_zones)
    if (z.contains(p)) return true;
  return false;
}

/// Builds a deterministic synthetic scene: buildings on a jittered grid on
/// both sides of a straight road, vehicles placed collision-free on the road.
inline Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  if (cfg.bounds_x <= 0 || cfg.bounds_y <= 0) throw ParameterError("scene bounds must be positive");
  if (cfg.rsu_height <= 0) throw ParameterError("rsu height must be positive");
  if (cfg.building_count < 0) throw ParameterError("building count must be >= 0");

  Rng rng = make_rng(seed, 0x5ce4eULL);
  Scene s;
  s.bounds = Rect2{{0.0, 0.0}, {cfg.bounds_x, cfg.bounds_y}};
  s.rsu_position = Vec3(cfg.rsu_x, cfg.rsu_y, cfg.rsu_height);

  // Candidate cells flanking the road, south side then north side.
  const double margin = cfg.road_half_width + 4.0;
  std::vector<Rect2> cells;
  for (int side = 0; side < 2; ++side) {
    const double y0 = side == 0 ? cfg.road_y - margin - cfg.building_cell : cfg.road_y + margin;
    const double step = side == 0 ? -cfg.building_cell : cfg.building_cell;
    for (double y = y0; y > 0.0 && y + cfg.building_cell < cfg.bounds_y; y += step) {
      for (double x = 2.0; x + cfg.building_cell < cfg.bounds_x; x += cfg.building_cell) {
        cells.push_back(Rect2{{x, y}, {x + cfg.building_cell, y + cfg.building_cell}});
      }
    }
  }
  std::shuffle(cells.begin(), cells.end(), rng);
  const int n_buildings = std::min<std::size_t>(cfg.building_count, cells.size());
  std::uniform_real_distribution<double> ufill(cfg.building_fill_min, cfg.building_fill_max);
  std::uniform_real_distribution<double> uh(cfg.building_min_height, cfg.building_max_height);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int i = 0; i < n_buildings; ++i) {
    const Rect2& c = cells[i];
    const double w = ufill(rng) * c.width();
    const double d = ufill(rng) * c.depth();
    const double x0 = c.min.x() + u01(rng) * (c.width() - w);
    const double y0 = c.min.y() + u01(rng) * (c.depth() - d);
    s.buildings.push_back(Building{Rect2{{x0, y0}, {x0 + w, y0 + d}}, uh(rng)});
  }

  // Vehicles on the road strip, rejection-sampled for minimum separation.
  std::uniform_real_distribution<double> ux(4.0, cfg.bounds_x - 4.0);
  std::uniform_real_distribution<double> uy(cfg.road_y - cfg.road_half_width + 1.0,
                                            cfg.road_y + cfg.road_half_width - 1.0);
  std::uniform_real_distribution<double> uspeed(5.0, 15.0);
  for (int k = 0; k < cfg.vehicle_count; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      Vec3 p(ux(rng), uy(rng), 0.0);
      bool ok = true;
      for (const auto& v : s.vehicles)
        if ((v.position - p).norm() < cfg.vehicle_min_separation) ok = false;
      if (!ok) continue;
      Vehicle veh;
      veh.position = p;
      const double dir = u01(rng) < 0.5 ? 0.0 : kPi;  // travel direction along the road
      veh.orientation = detail::wrap_angle(dir + 0.05 * (u01(rng) - 0.5));
      veh.velocity = uspeed(rng) * Vec2(std::cos(veh.orientation), std::sin(veh.orientation));
      if (!cfg.vehicle_sensors.empty())
        veh.sensors = cfg.vehicle_sensors[k % cfg.vehicle_sensors.size()];
      s.vehicles.push_back(veh);
      placed = true;
    }
    if (!placed)
      throw ParameterError("vehicle count exceeds placeable capacity of the drivable area");
  }

  if (cfg.blackout_zones.empty()) {
    const double x0 = 0.15 * cfg.bounds_x;
    s.gps_blackout_zones.push_back(Rect2{{x0, cfg.road_y - cfg.road_half_width},
                                         {x0 + 0.15 * cfg.bounds_x, cfg.road_y + cfg.road_half_width}});
  } else {
    s.gps_blackout_zones = cfg.blackout_zones;
  }
  return s;
}

namespace detail {

inline Vec3 to_vehicle_frame(const Vehicle& veh, const Vec3& p_world) {
  const double c = std::cos(-veh.orientation), si = std::sin(-veh.orientation);
  const Vec3 d = p_world - veh.position;
  return Vec3(c * d.x() - si * d.y(), si * d.x() + c * d.y(), d.z());
}

}  // namespace detail

/// Samples one per-slot sensor snapshot for a vehicle. The detector is a
/// ground-truth stand-in: every building whose center falls inside a camera's
/// field of view yields one box with objectness 1.0.
inline SensorSnapshot sample_snapshot(const Scene& s, int vehicle_index, std::uint64_t seed,
                                      const SceneConfig& cfg = SceneConfig{}) {
  if (vehicle_index < 0 || vehicle_index >= static_cast<int>(s.vehicles.size()))
    throw ParameterError("sample_snapshot: vehicle index out of range");
  const Vehicle& veh = s.vehicles[vehicle_index];
  Rng rng = make_rng(seed, mix_seed(0x5eb5, vehicle_index));
  SensorSnapshot snap;

  if (veh.sensors.has_gps) {
    const bool blocked = in_blackout(s, veh.position.head<2>());
    if (!blocked || cfg.gps_history_fallback) {
      std::normal_distribution<double> n(0.0, 1.0);
      double std_xy = cfg.gps_noise_std;
      if (blocked) {
        std_xy *= cfg.gps_dead_reckon_inflation;
        snap.gps_dead_reckoned = true;
      }
      if (std_xy > 0.0) {
        snap.gps = veh.position + Vec3(std_xy * n(rng), std_xy * n(rng), 0.0);
      } else {
        snap.gps = veh.position;
      }
    }
  }

  if (veh.sensors.has_rgb) {
    const Vec3 cam_pos = veh.position + Vec3(0, 0, cfg.sensor_height);
    const double tan_half = std::tan(-cfg.camera_omega_min);
    const double tan_vert = std::tan(cfg.camera_vertical_halffov);
    for (int c = 0; c < 4; ++c) {
      const double cam_yaw = veh.orientation + kCameraYawOffset[c];
      for (const auto& b : s.buildings) {
        const Vec3 center(b.footprint.center().x(), b.footprint.center().y(), 0.5 * b.height);
        const Vec3 d = center - cam_pos;
        const double range = d.head<2>().norm();
        if (range > cfg.camera_max_range || range < 1e-6) continue;
        const double omega = detail::wrap_angle(std::atan2(d.y(), d.x()) - cam_yaw);
        if (omega < cfg.camera_omega_min || omega > -cfg.camera_omega_min) continue;
        Box box;
        box.u = 0.5 * (std::tan(omega) / tan_half + 1.0);
        const double elev = std::atan2(d.z(), range);
        box.v = std::clamp(0.5 * (1.0 - std::tan(elev) / tan_vert), 0.0, 1.0);
        const double half_extent = 0.5 * std::max(b.footprint.width(), b.footprint.depth());
        box.w = std::clamp(std::atan2(half_extent, range) / -cfg.camera_omega_min, 0.0, 1.0);
        box.h = std::clamp(std::atan2(0.5 * b.height, range) / cfg.camera_vertical_halffov, 0.0, 1.0);
        box.score = 1.0;
        snap.detections[c].push_back(box);
      }
    }
  }

  if (veh.sensors.has_lidar) {
    std::uniform_real_distribution<double> jitter(-0.25, 0.25);
    const Vec2 vp = veh.position.head<2>();
    auto keep = [&](const Vec3& p_world) {
      if ((p_world.head<2>() - vp).norm() > cfg.lidar_range) return;
      snap.point_cloud.push_back(detail::to_vehicle_frame(veh, p_world));
    };
    for (const auto& b : s.buildings) {
      if ((b.footprint.center() - vp).norm() > cfg.lidar_range + b.footprint.width()) continue;
      // Sample the vertical faces that face the vehicle.
      struct Face { Vec2 a, b2; Vec2 normal; };
      const Rect2& f = b.footprint;
      const std::array<Face, 4> faces = {
          Face{{f.min.x(), f.min.y()}, {f.max.x(), f.min.y()}, {0, -1}},
          Face{{f.min.x(), f.max.y()}, {f.max.x(), f.max.y()}, {0, 1}},
          Face{{f.min.x(), f.min.y()}, {f.min.x(), f.max.y()}, {-1, 0}},
          Face{{f.max.x(), f.min.y()}, {f.max.x(), f.max.y()}, {1, 0}}};
      for (const auto& face : faces) {
        const Vec2 mid = 0.5 * (face.a + face.b2);
        if ((vp - mid).dot(face.normal) <= 0.0) continue;
        const double len = (face.b2 - face.a).norm();
        const Vec2 along = (face.b2 - face.a) / len;
        for (double t = 0.5 * cfg.lidar_face_spacing; t < len; t += cfg.lidar_face_spacing) {
          for (double z = 0.5 * cfg.lidar_face_spacing; z < b.height; z += cfg.lidar_face_spacing) {
            const Vec2 q = face.a + (t + jitter(rng)) * along;
            keep(Vec3(q.x(), q.y(), std::clamp(z + jitter(rng), 0.0, b.height)));
          }
        }
      }
    }
    // Ground returns on a coarse grid around the vehicle.
    for (double gx = -cfg.lidar_range; gx <= cfg.lidar_range; gx += cfg.lidar_ground_spacing) {
      for (double gy = -cfg.lidar_range; gy <= cfg.lidar_range; gy += cfg.lidar_ground_spacing) {
        const Vec2 q = vp + Vec2(gx + jitter(rng), gy + jitter(rng));
        if (!s.bounds.contains(q)) continue;
        keep(Vec3(q.x(), q.y(), 0.0));
      }
    }
  }
  return snap;
}

struct CorruptionConfig {
  double bit_flip_prob = 0.0;       // applied to the RGB indicator downstream
  double lidar_occlusion_deg = 0.0; // angular sector erased from the point cloud
  double gps_fault_prob = 0.0;      // per-slot probability of a blackout event

  static CorruptionConfig low() { return {0.2, 30.0, 0.0}; }
  static CorruptionConfig medium() { return {0.5, 70.0, 0.0}; }
  static CorruptionConfig high() { return {0.6, 100.0, 0.0}; }

  /// Per-slot fault probability from a (frequency x duration) schedule.
  static double fault_prob(int events, double mean_duration_slots, double episode_slots) {
    if (episode_slots <= 0) throw ParameterError("episode length must be positive");
    return std::min(1.0, events * mean_duration_slots / episode_slots);
  }
};

/// Applies the sensing-inaccuracy model: erases LiDAR points inside a random
/// angular sector, records the indicator bit-flip probability, and simulates
/// GPS fault slots. Identity when all corruption parameters are zero.
inline SensorSnapshot corrupt_snapshot(const SensorSnapshot& snap, const CorruptionConfig& cor,
                                       std::uint64_t seed) {
  if (cor.bit_flip_prob < 0.0 || cor.bit_flip_prob > 1.0)
    throw ParameterError("bit flip probability must be in [0,1]");
  if (cor.lidar_occlusion_deg < 0.0 || cor.lidar_occlusion_deg > 360.0)
    throw ParameterError("occlusion sector must be in [0, 360] degrees");
  if (cor.gps_fault_prob < 0.0 || cor.gps_fault_prob > 1.0)
    throw ParameterError("gps fault probability must be in [0,1]");

  SensorSnapshot out = snap;
  Rng rng = make_rng(seed, 0xc0bb);
  if (cor.lidar_occlusion_deg > 0.0 && !out.point_cloud.empty()) {
    std::uniform_real_distribution<double> uang(-kPi, kPi);
    const double center = uang(rng);
    const double half = 0.5 * cor.lidar_occlusion_deg * kPi / 180.0;
    std::erase_if(out.point_cloud, [&](const Vec3& p) {
      const double a = detail::wrap_angle(std::atan2(p.y(), p.x()) - center);
      return std::abs(a) <= half;
    });
  }
  if (cor.bit_flip_prob > 0.0) out.rgb_flip_prob = cor.bit_flip_prob;
  if (cor.gps_fault_prob > 0.0 && out.gps.has_value()) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    if (u01(rng) < cor.gps_fault_prob) {
      out.gps.reset();
      out.gps_dead_reckoned = false;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: little-endian binary with magic "SOMSCN01" plus a readable
// text export.

namespace detail {

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ParameterError("scene stream truncated");
  return v;
}

}  // namespace detail

inline void save_scene(const Scene& s, std::ostream& os) {
  os.write("SOMSCN01", 8);
  detail::put<std::uint8_t>(os, 1);
  for (int i = 0; i < 3; ++i) detail::put(os, s.rsu_position(i));
  detail::put(os, s.bounds.min.x());
  detail::put(os, s.bounds.min.y());
  detail::put(os, s.bounds.max.x());
  detail::put(os, s.bounds.max.y());
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.buildings.size()));
  for (const auto& b : s.buildings) {
    detail::put(os, b.footprint.min.x());
    detail::put(os, b.footprint.min.y());
    detail::put(os, b.footprint.max.x());
    detail::put(os, b.footprint.max.y());
    detail::put(os, b.height);
  }
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.vehicles.size()));
  for (const auto& v : s.vehicles) {
    for (int i = 0; i < 3; ++i) detail::put(os, v.position(i));
    detail::put(os, v.velocity.x());
    detail::put(os, v.velocity.y());
    detail::put(os, v.orientation);
    const std::uint8_t flags = static_cast<std::uint8_t>((v.sensors.has_gps ? 1 : 0) |
                                                         (v.sensors.has_rgb ? 2 : 0) |
                                                         (v.sensors.has_lidar ? 4 : 0));
    detail::put(os, flags);
  }
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.gps_blackout_zones.size()));
  for (const auto& z : s.gps_blackout_zones) {
    detail::put(os, z.min.x());
    detail::put(os, z.min.y());
    detail::put(os, z.max.x());
    detail::put(os, z.max.y());
  }
}

inline Scene load_scene(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, "SOMSCN01", 8) != 0)
    throw ParameterError("bad scene magic");
  const auto version = detail::get<std::uint8_t>(is);
  if (version != 1) throw ParameterError("unsupported scene version");
  Scene s;
  for (int i = 0; i < 3; ++i) s.rsu_position(i) = detail::get<double>(is);
  s.bounds.min.x() = detail::get<double>(is);
  s.bounds.min.y() = detail::get<double>(is);
  s.bounds.max.x() = detail::get<double>(is);
  s.bounds.max.y() = detail::get<double>(is);
  const auto nb = detail::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < nb; ++i) {
    Building b;
    b.footprint.min.x() = detail::get<double>(is);
    b.footprint.min.y() = detail::get<double>(is);
    b.footprint.max.x() = detail::get<double>(is);
    b.footprint.max.y() = detail::get<double>(is);
    b.height = detail::get<double>(is);
    s.buildings.push_back(b);
  }
  const auto nv = detail::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < nv; ++i) {
    Vehicle v;
    for (int j = 0; j < 3; ++j) v.position(j) = detail::get<double>(is);
    v.velocity.x() = detail::get<double>(is);
    v.velocity.y() = detail::get<double>(is);
    v.orientation = detail::get<double>(is);
    const auto flags = detail::get<std::uint8_t>(is);
    v.sensors = SensorFlags{(flags & 1) != 0, (flags & 2) != 0, (flags & 4) != 0};
    s.vehicles.push_back(v);
  }
  const auto nz = detail::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < nz; ++i) {
    Rect2 z;
    z.min.x() = detail::get<double>(is);
    z.min.y() = detail::get<double>(is);
    z.max.x() = detail::get<double>(is);
    z.max.y() = detail::get<double>(is);
    s.gps_blackout_zones.push_back(z);
  }
  return s;
}

inline void save_scene(const Scene& s, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ParameterError("cannot open " + path);
  save_scene(s, f);
}

inline Scene load_scene(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParameterError("cannot open " + path);
  return load_scene(f);
}

inline std::string describe_scene(const Scene& s) {
  std::ostringstream os;
  os << "scene\n";
  os << "  rsu: " << s.rsu_position.transpose() << "\n";
  os << "  bounds: [" << s.bounds.min.transpose() << "] .. [" << s.bounds.max.transpose() << "]\n";
  os << "  buildings: " << s.buildings.size() << "\n";
  for (const auto& b : s.buildings)
    os << "    footprint [" << b.footprint.min.transpose() << "] .. ["
       << b.footprint.max.transpose() << "] height " << b.height << "\n";
  os << "  vehicles: " << s.vehicles.size() << "\n";
  for (const auto& v : s.vehicles)
    os << "    pos [" << v.position.transpose() << "] beta " << v.orientation << " sensors gps="
       << v.sensors.has_gps << " rgb=" << v.sensors.has_rgb << " lidar=" << v.sensors.has_lidar
       << "\n";
  os << "  blackout zones: " << s.gps_blackout_zones.size() << "\n";
  return os.str();
}

}  // namespace hmvmm::scene
