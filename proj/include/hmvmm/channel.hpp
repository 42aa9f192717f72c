#pragma once

#include <fstream>

#include "hmvmm/common.hpp"
#include "hmvmm/scene.hpp"

namespace hmvmm::channel {

/// Steering vector a(N, phi) with entry n = (1/N) * exp(+j 2 pi phi n).
/// Squared norm is 1/N.
inline CVec steering(int n, double phi) {
  if (n < 1) throw ParameterError("steering: N must be >= 1");
  CVec a(n);
  for (int i = 0; i < n; ++i) {
    const double ang = 2.0 * kPi * phi * i;
    a(i) = cxd(std::cos(ang), std::sin(ang)) / static_cast<double>(n);
  }
  return a;
}

/// DFT dictionary F = [a(N,0), a(N,1/N), ..., a(N,(N-1)/N)]; F^H F = I/N.
struct Codebook {
  CMat f;  // N x N, columns are codewords
  int n = 0;
};

inline Codebook dft_codebook(int n) {
  if (n < 1) throw ParameterError("dft_codebook: N must be >= 1");
  Codebook cb;
  cb.n = n;
  cb.f.resize(n, n);
  for (int m = 0; m < n; ++m) cb.f.col(m) = steering(n, static_cast<double>(m) / n);
  return cb;
}

/// Beamspace transform e = h^H F (one inner product per codeword).
inline CRowVec to_beamspace(const CVec& h, const Codebook& cb) {
  if (h.size() != cb.f.rows()) throw ParameterError("to_beamspace: dimension mismatch");
  return h.adjoint() * cb.f;
}

struct PathComponent {
  double azimuth = 0.0;    // departure azimuth at the RSU, radians
  double elevation = 0.0;  // departure elevation, radians (negative = downward)
  cxd gain_dl{0.0, 0.0};
  cxd gain_ul{0.0, 0.0};
  bool is_los = false;
  double length_m = 0.0;
};

struct ChannelRealization {
  CVec h_dl;
  CVec h_ul;
  std::vector<PathComponent> paths;
  bool blocked = false;  // no LoS and no usable reflector
};

struct ChannelParams {
  int n_v = 16;
  int n_h = 8;
  double dl_carrier_hz = 4.95e9;
  double ul_carrier_hz = 4.85e9;
  double ref_gain = 20.0;         // amplitude at 1 m before spreading loss
  double reflection_loss = 0.5;   // linear amplitude factor per bounce
  double reflection_jitter = 0.2; // relative jitter on the per-face loss
  double energy_budget = 0.0;     // C_h; 0 -> derived from ref_gain below

  int n() const { return n_v * n_h; }
  /// Antenna spacing: half wavelength at the DL carrier for both links.
  double spacing_m() const { return 0.5 * 299792458.0 / dl_carrier_hz; }
  /// Conservative channel energy bound for the configured gain budget,
  /// assuming >= rsu-height path length and a bounded reflection count.
  double c_h(double min_dist) const {
    if (energy_budget > 0.0) return energy_budget;
    const double amp = ref_gain / std::max(min_dist, 1.0);
    return 9.0 * n() * amp * amp;
  }
};

/// Planar-array response with unit-modulus entries, flattened vertical-major:
/// element (m, q) -> index m * n_h + q. The phase of element (m, q) is
/// -2 pi / lambda * spacing * (q cosE sinA + m sinE).
inline CVec array_response(const ChannelParams& p, double azimuth, double elevation,
                           double wavelength) {
  CVec v(p.n());
  const double ce = std::cos(elevation), se = std::sin(elevation);
  const double sa = std::sin(azimuth);
  const double k = 2.0 * kPi * p.spacing_m() / wavelength;
  for (int m = 0; m < p.n_v; ++m) {
    for (int q = 0; q < p.n_h; ++q) {
      const double phase = -k * (q * ce * sa + m * se);
      v(m * p.n_h + q) = cxd(std::cos(phase), std::sin(phase));
    }
  }
  return v;
}

namespace detail {

inline void departure_angles(const Vec3& from, const Vec3& to, double& azimuth,
                             double& elevation) {
  const Vec3 d = to - from;
  azimuth = std::atan2(d.y(), d.x());
  elevation = std::atan2(d.z(), d.head<2>().norm());
}

struct Reflection {
  Vec3 point;
  double total_length;
};

/// Image-method single bounce off one axis-aligned vertical face. `axis` is 0
/// for faces x = c, 1 for faces y = c; `outward` is +1/-1 along that axis.
inline std::optional<Reflection> reflect_off_face(const Vec3& tx, const Vec3& rx, int axis,
                                                  double c, double outward,
                                                  const scene::Rect2& footprint, double height) {
  if ((tx(axis) - c) * outward <= 0.0 || (rx(axis) - c) * outward <= 0.0)
    return std::nullopt;  // both endpoints must be on the outward side
  Vec3 img = tx;
  img(axis) = 2.0 * c - tx(axis);
  const Vec3 d = rx - img;
  if (std::abs(d(axis)) < 1e-12) return std::nullopt;
  const double t = (c - img(axis)) / d(axis);
  if (t <= 0.0 || t >= 1.0) return std::nullopt;
  const Vec3 q = img + t * d;
  if (q.z() <= 0.0 || q.z() >= height) return std::nullopt;
  const int other = 1 - axis;
  const double lo = other == 0 ? footprint.min.x() : footprint.min.y();
  const double hi = other == 0 ? footprint.max.x() : footprint.max.y();
  if (q(other) <= lo || q(other) >= hi) return std::nullopt;
  return Reflection{q, (q - tx).norm() + (rx - q).norm()};
}

/// Obstruction test for a path leg, with the endpoints pulled in slightly so
/// that a leg terminating on a face is not counted as blocked by it.
inline bool leg_blocked(const Vec3& a, const Vec3& b, const std::vector<scene::Building>& bl) {
  const Vec3 a2 = a + 1e-6 * (b - a);
  const Vec3 b2 = b - 1e-6 * (b - a);
  return scene::detail::segment_blocked(a2, b2, bl);
}

}  // namespace detail

/// Geometric multipath synthesis tied to the scene: the LoS path when the
/// RSU-vehicle segment is clear, plus one path per visible single-bounce
/// specular reflection off a building face. UL and DL share angles and gain
/// magnitudes; per-path phases are recomputed from the path length at each
/// carrier.
inline ChannelRealization synthesize_channel(const scene::Scene& s, int vehicle_index,
                                             const ChannelParams& p, std::uint64_t seed) {
  if (vehicle_index < 0 || vehicle_index >= static_cast<int>(s.vehicles.size()))
    throw ParameterError("synthesize_channel: vehicle index out of range");
  const Vec3 rx = s.vehicles[vehicle_index].position + Vec3(0, 0, 1.0);
  const Vec3 tx = s.rsu_position;
  Rng rng = make_rng(seed, mix_seed(0xc4a7, vehicle_index));
  const double lam_dl = 299792458.0 / p.dl_carrier_hz;
  const double lam_ul = 299792458.0 / p.ul_carrier_hz;

  ChannelRealization cr;
  cr.h_dl = CVec::Zero(p.n());
  cr.h_ul = CVec::Zero(p.n());

  auto add_path = [&](const Vec3& toward, double length, double amplitude, bool is_los) {
    PathComponent pc;
    detail::departure_angles(tx, toward, pc.azimuth, pc.elevation);
    pc.is_los = is_los;
    pc.length_m = length;
    const double ph_dl = -2.0 * kPi * length / lam_dl;
    const double ph_ul = -2.0 * kPi * length / lam_ul;
    pc.gain_dl = amplitude * cxd(std::cos(ph_dl), std::sin(ph_dl));
    pc.gain_ul = amplitude * cxd(std::cos(ph_ul), std::sin(ph_ul));
    cr.h_dl += pc.gain_dl * array_response(p, pc.azimuth, pc.elevation, lam_dl);
    cr.h_ul += pc.gain_ul * array_response(p, pc.azimuth, pc.elevation, lam_ul);
    cr.paths.push_back(pc);
  };

  if (!scene::detail::segment_blocked(tx, rx, s.buildings)) {
    const double d = (rx - tx).norm();
    add_path(rx, d, p.ref_gain / d, true);
  }

  std::uniform_real_distribution<double> uj(1.0 - p.reflection_jitter, 1.0 + p.reflection_jitter);
  for (const auto& b : s.buildings) {
    struct FaceSpec { int axis; double c; double outward; };
    const std::array<FaceSpec, 4> faces = {
        FaceSpec{0, b.footprint.min.x(), -1.0}, FaceSpec{0, b.footprint.max.x(), 1.0},
        FaceSpec{1, b.footprint.min.y(), -1.0}, FaceSpec{1, b.footprint.max.y(), 1.0}};
    for (const auto& f : faces) {
      const auto refl = detail::reflect_off_face(tx, rx, f.axis, f.c, f.outward, b.footprint,
                                                 b.height);
      if (!refl) continue;
      if (detail::leg_blocked(tx, refl->point, s.buildings) ||
          detail::leg_blocked(refl->point, rx, s.buildings))
        continue;
      const double amp = uj(rng) * p.reflection_loss * p.ref_gain / refl->total_length;
      add_path(refl->point, refl->total_length, amp, false);
    }
  }

  cr.blocked = cr.paths.empty();
  return cr;
}

/// CSV dump: one row per antenna, columns re(h_dl), im(h_dl), re(h_ul), im(h_ul).
inline void dump_channel_csv(const ChannelRealization& cr, std::ostream& os) {
  os << "re_dl,im_dl,re_ul,im_ul\n";
  for (Eigen::Index i = 0; i < cr.h_dl.size(); ++i)
    os << cr.h_dl(i).real() << "," << cr.h_dl(i).imag() << "," << cr.h_ul(i).real() << ","
       << cr.h_ul(i).imag() << "\n";
}

}  // namespace hmvmm::channel
