#include <catch2/catch_amalgamated.hpp>

#include "hmvmm/channel.hpp"

using namespace hmvmm;
using namespace hmvmm::channel;

TEST_CASE("steering vector matches its closed forms") {
  const CVec a0 = steering(2, 0.0);
  CHECK(std::abs(a0(0) - cxd(0.5, 0.0)) < 1e-15);
  CHECK(std::abs(a0(1) - cxd(0.5, 0.0)) < 1e-15);

  const CVec a4 = steering(4, 0.25);  // quarter steps around the unit circle
  CHECK(std::abs(a4(0) - cxd(0.25, 0.0)) < 1e-15);
  CHECK(std::abs(a4(1) - cxd(0.0, 0.25)) < 1e-15);
  CHECK(std::abs(a4(2) - cxd(-0.25, 0.0)) < 1e-15);
  CHECK(std::abs(a4(3) - cxd(0.0, -0.25)) < 1e-15);

  CHECK(steering(8, 0.3).squaredNorm() == Catch::Approx(0.125).margin(1e-15));
  CHECK_THROWS_AS(steering(0, 0.1), ParameterError);
}

TEST_CASE("DFT codebook satisfies F^H F = I/N") {
  SECTION("N = 2 columns") {
    const Codebook cb = dft_codebook(2);
    CHECK(std::abs(cb.f(0, 0) - cxd(0.5, 0.0)) < 1e-15);
    CHECK(std::abs(cb.f(1, 0) - cxd(0.5, 0.0)) < 1e-15);
    CHECK(std::abs(cb.f(0, 1) - cxd(0.5, 0.0)) < 1e-15);
    CHECK(std::abs(cb.f(1, 1) - cxd(-0.5, 0.0)) < 1e-12);
  }
  SECTION("N = 128 Gram matrix") {
    const Codebook cb = dft_codebook(128);
    const CMat gram = cb.f.adjoint() * cb.f;
    double max_offdiag = 0.0, max_diag_err = 0.0;
    for (int i = 0; i < 128; ++i)
      for (int j = 0; j < 128; ++j) {
        if (i == j)
          max_diag_err = std::max(max_diag_err, std::abs(gram(i, j) - cxd(1.0 / 128, 0)));
        else
          max_offdiag = std::max(max_offdiag, std::abs(gram(i, j)));
      }
    CHECK(max_offdiag < 1e-12);
    CHECK(max_diag_err < 1e-12);
  }
}

TEST_CASE("beamspace transform") {
  const int n = 16;
  const Codebook cb = dft_codebook(n);

  SECTION("codeword-aligned channel peaks exactly at its index") {
    for (int m : {0, 3, 9, n - 1}) {
      const CVec h = std::sqrt(static_cast<double>(n)) * cb.f.col(m);
      const CRowVec e = to_beamspace(h, cb);
      Eigen::Index peak;
      e.cwiseAbs().maxCoeff(&peak);
      CHECK(peak == m);
      CHECK(std::abs(e(m)) == Catch::Approx(1.0 / std::sqrt(static_cast<double>(n))));
    }
  }
  SECTION("zero channel maps to zero") {
    CHECK(to_beamspace(CVec::Zero(n), cb).norm() == 0.0);
  }
  SECTION("Parseval-like identity ||h^H F||^2 = ||h||^2 / N") {
    Rng rng = make_rng(5);
    const CVec h = crandn_vec(rng, n);
    CHECK(to_beamspace(h, cb).squaredNorm() ==
          Catch::Approx(h.squaredNorm() / n).epsilon(1e-12));
  }
  SECTION("dimension mismatch is rejected") {
    CHECK_THROWS_AS(to_beamspace(CVec::Zero(n + 1), cb), ParameterError);
  }
}

TEST_CASE("planar array response equals the brute-force per-element phases") {
  ChannelParams p;
  p.n_v = 3;
  p.n_h = 4;
  const double lam = 0.06;
  Rng rng = make_rng(9);
  std::uniform_real_distribution<double> ua(-kPi, kPi), ue(-kPi / 2, kPi / 2);
  for (int trial = 0; trial < 25; ++trial) {
    const double az = ua(rng), el = ue(rng);
    const CVec v = array_response(p, az, el, lam);
    // Independent route: physical element positions dotted with the unit
    // propagation direction.
    const Vec3 dir(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
    for (int m = 0; m < p.n_v; ++m)
      for (int q = 0; q < p.n_h; ++q) {
        const Vec3 pos(0.0, q * p.spacing_m(), m * p.spacing_m());
        const double phase = -2.0 * kPi / lam * dir.dot(pos);
        const cxd expect(std::cos(phase), std::sin(phase));
        CHECK(std::abs(v(m * p.n_h + q) - expect) < 1e-12);
      }
    // Kronecker structure across the flattened index.
    for (int m = 0; m < p.n_v; ++m)
      for (int q = 0; q < p.n_h; ++q)
        CHECK(std::abs(v(m * p.n_h + q) - v(m * p.n_h) * v(q) / v(0)) < 1e-12);
  }
}

namespace {

scene::Scene los_only_scene() {
  scene::Scene s;
  s.rsu_position = Vec3(0.0, 0.0, 9.0);
  s.bounds = scene::Rect2{{-100, -100}, {100, 100}};
  scene::Vehicle v;
  v.position = Vec3(40.0, 25.0, 0.0);
  s.vehicles.push_back(v);
  return s;
}

}  // namespace

TEST_CASE("LoS-only channel peaks at the exhaustive-scan codeword") {
  const scene::Scene s = los_only_scene();
  ChannelParams p;
  p.n_v = 8;
  p.n_h = 4;
  const ChannelRealization cr = synthesize_channel(s, 0, p, 3);
  REQUIRE(cr.paths.size() == 1);
  CHECK(cr.paths[0].is_los);

  const Codebook cb = dft_codebook(p.n());
  Eigen::Index peak;
  to_beamspace(cr.h_dl, cb).cwiseAbs().maxCoeff(&peak);

  // Exhaustive scan, one independent inner product per codeword.
  double best = -1.0;
  Eigen::Index best_idx = -1;
  for (int m = 0; m < p.n(); ++m) {
    const cxd inner = cr.h_dl.adjoint() * steering(p.n(), static_cast<double>(m) / p.n());
    const double mag = std::abs(inner);
    if (mag > best) {
      best = mag;
      best_idx = m;
    }
  }
  CHECK(peak == best_idx);
}

TEST_CASE("UL and DL share path angles and gain magnitudes") {
  scene::SceneConfig cfg;
  cfg.vehicle_count = 2;
  const scene::Scene s = scene::generate_scene(cfg, 31);
  ChannelParams p;
  const ChannelRealization cr = synthesize_channel(s, 0, p, 8);
  REQUIRE_FALSE(cr.paths.empty());
  for (const auto& path : cr.paths) {
    CHECK(std::abs(path.gain_dl) == Catch::Approx(std::abs(path.gain_ul)).epsilon(1e-12));
  }
  // Same seed reproduces the realization exactly.
  const ChannelRealization cr2 = synthesize_channel(s, 0, p, 8);
  CHECK((cr.h_dl - cr2.h_dl).norm() == 0.0);
  CHECK((cr.h_ul - cr2.h_ul).norm() == 0.0);
}

TEST_CASE("fully blocked vehicle yields the zero channel with a flag") {
  scene::Scene s = los_only_scene();
  scene::Building wall;
  wall.footprint = scene::Rect2{{15.0, -60.0}, {25.0, 60.0}};
  wall.height = 50.0;
  s.buildings.push_back(wall);
  // Wall sits between RSU (0,0) and vehicle (40,25) and offers no valid
  // single-bounce geometry back to the vehicle.
  s.vehicles[0].position = Vec3(40.0, 0.0, 0.0);
  ChannelParams p;
  p.n_v = 4;
  p.n_h = 2;
  const ChannelRealization cr = synthesize_channel(s, 0, p, 1);
  CHECK(cr.blocked);
  CHECK(cr.paths.empty());
  CHECK(cr.h_dl.norm() == 0.0);
  CHECK(cr.h_ul.norm() == 0.0);
}

TEST_CASE("LoS path present exactly when the segment is clear") {
  scene::Scene s = los_only_scene();
  ChannelParams p;
  p.n_v = 2;
  p.n_h = 2;
  CHECK(synthesize_channel(s, 0, p, 1).paths.at(0).is_los);

  scene::Building wall;
  wall.footprint = scene::Rect2{{18.0, 8.0}, {24.0, 18.0}};  // straddles the segment
  wall.height = 30.0;
  s.buildings.push_back(wall);
  const ChannelRealization cr = synthesize_channel(s, 0, p, 1);
  for (const auto& path : cr.paths) CHECK_FALSE(path.is_los);
}

TEST_CASE("reflections appear for buildings beside the link") {
  scene::Scene s = los_only_scene();
  scene::Building side;
  side.footprint = scene::Rect2{{10.0, 40.0}, {50.0, 50.0}};  // north of the link
  side.height = 25.0;
  s.buildings.push_back(side);
  ChannelParams p;
  p.n_v = 4;
  p.n_h = 2;
  const ChannelRealization cr = synthesize_channel(s, 0, p, 5);
  bool has_nlos = false, has_los = false;
  for (const auto& path : cr.paths) {
    if (path.is_los) has_los = true;
    else has_nlos = true;
  }
  CHECK(has_los);
  CHECK(has_nlos);
  // NLoS gain is weaker than LoS for the same geometry budget.
  double los_amp = 0, nlos_amp = 0;
  for (const auto& path : cr.paths)
    (path.is_los ? los_amp : nlos_amp) = std::abs(path.gain_dl);
  CHECK(nlos_amp < los_amp);
}

TEST_CASE("channel energy stays within the configured budget") {
  ChannelParams p;
  p.n_v = 16;
  p.n_h = 8;
  scene::SceneConfig cfg;
  cfg.vehicle_count = 7;
  const double c_h = p.c_h(cfg.rsu_height);
  int samples = 0;
  for (std::uint64_t scene_seed = 0; scene_seed < 15 && samples < 10000; ++scene_seed) {
    const scene::Scene s = scene::generate_scene(cfg, scene_seed);
    for (int veh = 0; veh < cfg.vehicle_count; ++veh) {
      for (std::uint64_t chan_seed = 0; chan_seed < 100 && samples < 10000; ++chan_seed) {
        const ChannelRealization cr =
            synthesize_channel(s, veh, p, mix_seed(scene_seed, chan_seed));
        REQUIRE(cr.h_dl.squaredNorm() <= c_h);
        ++samples;
      }
    }
  }
  CHECK(samples == 10000);
}

TEST_CASE("channel CSV dump has one row per antenna") {
  const scene::Scene s = los_only_scene();
  ChannelParams p;
  p.n_v = 2;
  p.n_h = 2;
  const ChannelRealization cr = synthesize_channel(s, 0, p, 1);
  std::ostringstream os;
  dump_channel_csv(cr, os);
  int lines = 0;
  for (char c : os.str())
    if (c == '\n') ++lines;
  CHECK(lines == 1 + p.n());
}
