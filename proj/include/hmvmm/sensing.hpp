#pragma once

#include "hmvmm/common.hpp"
#include "hmvmm/scene.hpp"

namespace hmvmm::sensing {

/// High-frequency encoding J(p) = [sin(2^0 pi p), cos(2^0 pi p), ...,
/// sin(2^{L-1} pi p), cos(2^{L-1} pi p)].
inline RVec positional_encode(double p, int l) {
  if (l < 1) throw ParameterError("positional_encode: L must be >= 1");
  RVec out(2 * l);
  double freq = kPi;
  for (int i = 0; i < l; ++i) {
    out(2 * i) = std::sin(freq * p);
    out(2 * i + 1) = std::cos(freq * p);
    freq *= 2.0;
  }
  return out;
}

/// LoS direction feature: azimuth via four-quadrant arctangent, elevation via
/// arccos of the normalized height offset, both encoded with J at L = 5.
inline RVec gps_features(const Vec3& gps_position, const Vec3& rsu_position, int l = 5) {
  const Vec3 d = gps_position - rsu_position;
  const double dist = d.norm();
  if (dist < 1e-9) throw ParameterError("gps_features: coincident positions");
  const double theta = std::atan2(d.y(), d.x());
  const double phi = std::acos(std::clamp(-d.z() / dist, -1.0, 1.0));
  RVec out(4 * l);
  out.head(2 * l) = positional_encode(theta, l);
  out.tail(2 * l) = positional_encode(phi, l);
  return out;
}

struct FovConfig {
  double omega_min = -0.87;   // rad; horizontal FoV is [omega_min, -omega_min]
  double delta_omega = 0.435; // rad per bin, 4 bins per camera
};

/// Back-projection of a normalized box center abscissa to the camera-frame
/// azimuth, matching the pinhole intrinsic used by the detector stand-in.
inline double box_azimuth(double u, const FovConfig& fov) {
  return std::atan((2.0 * u - 1.0) * std::tan(-fov.omega_min));
}

/// 16-entry multipath indicator: per camera, bit j is set when any detection
/// with objectness above the threshold lands in angle bin j. Cameras are
/// concatenated right, left, rear, front.
inline RVec rgb_indicator(const std::array<std::vector<scene::Box>, 4>& detections,
                          const FovConfig& fov = {}, double score_threshold = 0.5) {
  if (fov.delta_omega <= 0.0) throw ParameterError("rgb_indicator: delta omega must be positive");
  RVec r = RVec::Zero(16);
  const std::array<int, 4> order = {scene::kRight, scene::kLeft, scene::kRear, scene::kFront};
  for (int slot = 0; slot < 4; ++slot) {
    for (const auto& box : detections[order[slot]]) {
      if (box.score <= score_threshold) continue;
      const double omega = box_azimuth(box.u, fov);
      int bin = static_cast<int>(std::floor((omega - fov.omega_min) / fov.delta_omega));
      bin = std::clamp(bin, 0, 3);  // FoV upper edge maps to the last bin
      r(4 * slot + bin) = 1.0;
    }
  }
  return r;
}

/// Detection-miss / false-alarm corruption: each indicator bit flips
/// independently with probability p. No RNG draw when p is 0.
inline RVec apply_bit_flips(const RVec& indicator, double p, Rng& rng) {
  if (p < 0.0 || p > 1.0) throw ParameterError("bit flip probability must be in [0,1]");
  if (p == 0.0) return indicator;
  RVec out = indicator;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (Eigen::Index i = 0; i < out.size(); ++i)
    if (u01(rng) < p) out(i) = 1.0 - out(i);
  return out;
}

/// x^RGB = [r_k, J(beta)] with the orientation encoded at L = 10; 36 values.
inline RVec rgb_features(const RVec& indicator, double beta, int l = 10) {
  if (indicator.size() != 16) throw ParameterError("rgb_features: indicator must have 16 entries");
  RVec out(indicator.size() + 2 * l);
  out.head(16) = indicator;
  out.tail(2 * l) = positional_encode(beta, l);
  return out;
}

struct BevConfig {
  int l_x = 64;
  int l_y = 64;
  int l_z = 16;
  double extent_x = 160.0;  // full width covered, centered on the vehicle
  double extent_y = 160.0;
  double z_min = -1.0;
  double z_max = 7.0;
};

/// Occupancy BEV: voxel = 1 when it contains at least one point; pixel value
/// is the column sum over z, i.e. an integer in [0, L_z].
inline RMat lidar_bev(const std::vector<Vec3>& point_cloud, const BevConfig& cfg = {}) {
  if (cfg.l_x < 1 || cfg.l_y < 1 || cfg.l_z < 1 || cfg.extent_x <= 0.0 || cfg.extent_y <= 0.0 ||
      cfg.z_max <= cfg.z_min)
    throw ParameterError("lidar_bev: invalid grid configuration");
  std::vector<std::uint8_t> occ(static_cast<std::size_t>(cfg.l_x) * cfg.l_y * cfg.l_z, 0);
  const double cx = cfg.extent_x / cfg.l_x;
  const double cy = cfg.extent_y / cfg.l_y;
  const double cz = (cfg.z_max - cfg.z_min) / cfg.l_z;
  for (const auto& p : point_cloud) {
    const int ix = static_cast<int>(std::floor((p.x() + 0.5 * cfg.extent_x) / cx));
    const int iy = static_cast<int>(std::floor((p.y() + 0.5 * cfg.extent_y) / cy));
    const int iz = static_cast<int>(std::floor((p.z() - cfg.z_min) / cz));
    if (ix < 0 || ix >= cfg.l_x || iy < 0 || iy >= cfg.l_y || iz < 0 || iz >= cfg.l_z) continue;
    occ[(static_cast<std::size_t>(ix) * cfg.l_y + iy) * cfg.l_z + iz] = 1;
  }
  RMat bev = RMat::Zero(cfg.l_x, cfg.l_y);
  for (int ix = 0; ix < cfg.l_x; ++ix)
    for (int iy = 0; iy < cfg.l_y; ++iy) {
      int count = 0;
      for (int iz = 0; iz < cfg.l_z; ++iz)
        count += occ[(static_cast<std::size_t>(ix) * cfg.l_y + iy) * cfg.l_z + iz];
      bev(ix, iy) = count;
    }
  return bev;
}

/// Feature tensor dump: ascii header {name, dims}, then row-major 32-bit floats.
inline void save_feature(const std::string& name, const std::vector<int>& dims,
                         const RVec& data, std::ostream& os) {
  os << name;
  for (int d : dims) os << " " << d;
  os << "\n";
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    const float f = static_cast<float>(data(i));
    os.write(reinterpret_cast<const char*>(&f), sizeof(float));
  }
}

}  // namespace hmvmm::sensing
