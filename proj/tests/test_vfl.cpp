#include <catch2/catch_amalgamated.hpp>

#include "hmvmm/vfl.hpp"

using namespace hmvmm;
using namespace hmvmm::vfl;

namespace {

LocalModelConfig toy_model_config() {
  LocalModelConfig cfg;
  cfg.n = 8;
  cfg.pilot_len = 4;
  cfg.l_s = 16;
  cfg.l_g = 16;
  cfg.l_r = 16;
  cfg.l_l = 16;
  cfg.branch_hidden = 16;
  cfg.integ_hidden = 32;
  cfg.bev.l_x = 8;
  cfg.bev.l_y = 8;
  cfg.bev.l_z = 4;
  return cfg;
}

CMat random_channels(Rng& rng, int n, int k) {
  CMat h(n, k);
  for (int i = 0; i < k; ++i) h.col(i) = crandn_vec(rng, n);
  return h;
}

/// Orthogonal channel pair so per-user rates decouple.
CMat orthogonal_channels(int n) {
  CMat h = CMat::Zero(n, 2);
  h(0, 0) = cxd(1.0, 0.0);
  h(1, 1) = cxd(0.0, 1.0);
  return h;
}

}  // namespace

TEST_CASE("rsu_loss closed forms") {
  const double lambda = 10.0, r_t = 0.3, noise_var = 0.5;

  SECTION("single user at exactly the threshold rate") {
    Rng rng = make_rng(1);
    const CVec h = crandn_vec(rng, 4);
    // Choose |h^H v|^2 so the rate equals r_t.
    const double target = noise_var * (std::pow(2.0, r_t) - 1.0);
    CMat v(4, 1);
    v.col(0) = std::sqrt(target) / h.norm() * (h / h.norm());
    const RsuLoss out = rsu_loss(v, h, noise_var, lambda, r_t);
    CHECK(out.rates.per_user(0) == Catch::Approx(r_t));
    CHECK(out.loss == Catch::Approx(-1.3));
  }
  SECTION("every user at the threshold gives -sum(r_t + 1)") {
    const CMat h = orthogonal_channels(4);
    const double target = noise_var * (std::pow(2.0, r_t) - 1.0);
    CMat v = CMat::Zero(4, 2);
    v(0, 0) = std::sqrt(target);
    v(1, 1) = std::sqrt(target);
    const RsuLoss out = rsu_loss(v, h, noise_var, lambda, r_t);
    CHECK(out.loss == Catch::Approx(-2.0 * (r_t + 1.0)));
  }
  SECTION("regularizer gradient magnitude decreases in the rate") {
    // d/dr of lambda^(r_t - r) is -ln(lambda) lambda^(r_t - r): negative with
    // strictly decreasing magnitude.
    auto slope = [&](double r) { return -std::log(lambda) * std::pow(lambda, r_t - r); };
    double prev_mag = std::abs(slope(0.05));
    for (double r : {0.2, 0.5, 1.0, 2.0}) {
      CHECK(slope(r) < 0.0);
      CHECK(std::abs(slope(r)) < prev_mag);
      prev_mag = std::abs(slope(r));
    }
  }
  SECTION("lambda <= 1 with the regularizer enabled is rejected") {
    CHECK_THROWS_AS(rsu_loss(CMat::Zero(2, 1), CMat::Ones(2, 1), 1.0, 1.0, 0.3), ParameterError);
  }
}

TEST_CASE("rsu_loss gradient passes the finite-difference check") {
  Rng rng = make_rng(2);
  const int n = 4, k = 2;
  const CMat h = random_channels(rng, n, k);
  CMat v = random_channels(rng, n, k);

  const RsuLoss out = rsu_loss(v, h, 1.0, 10.0, 0.3);
  const double eps = 1e-5;
  double max_rel = 0.0;
  for (int col = 0; col < k; ++col)
    for (int row = 0; row < n; ++row)
      for (int part = 0; part < 2; ++part) {
        auto perturbed = [&](double delta) {
          CMat vv = v;
          vv(row, col) += part == 0 ? cxd(delta, 0.0) : cxd(0.0, delta);
          return rsu_loss(vv, h, 1.0, 10.0, 0.3).loss;
        };
        const double fd = (perturbed(eps) - perturbed(-eps)) / (2.0 * eps);
        const double an = part == 0 ? out.grad(row, col).real() : out.grad(row, col).imag();
        max_rel =
            std::max(max_rel, std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-6));
      }
  CHECK(max_rel < 1e-4);
}

TEST_CASE("power normalization and its backward pass") {
  Rng rng = make_rng(3);
  const int n = 4, k = 2;
  const double power = 2.0;
  const CMat h = random_channels(rng, n, k);
  CMat v = random_channels(rng, n, k);

  SECTION("normalization hits the budget and is idempotent on rates") {
    const PowerNormalized norm = normalize_power(v, power);
    CHECK(norm.v.squaredNorm() == Catch::Approx(power));
    const PowerNormalized again = normalize_power(norm.v, power);
    const auto r1 = precode::sum_rate(h, norm.v, 1.0);
    const auto r2 = precode::sum_rate(h, again.v, 1.0);
    CHECK(r1.total == Catch::Approx(r2.total));
  }
  SECTION("chained gradient matches finite differences") {
    auto loss_at = [&](const CMat& vv) {
      const PowerNormalized nn = normalize_power(vv, power);
      return rsu_loss(nn.v, h, 1.0, 10.0, 0.3).loss;
    };
    const PowerNormalized norm = normalize_power(v, power);
    const RsuLoss out = rsu_loss(norm.v, h, 1.0, 10.0, 0.3);
    const CMat g = normalize_power_backward(norm, v, out.grad, power);
    const double eps = 1e-5;
    double max_rel = 0.0;
    for (int col = 0; col < k; ++col)
      for (int row = 0; row < n; ++row)
        for (int part = 0; part < 2; ++part) {
          auto perturbed = [&](double delta) {
            CMat vv = v;
            vv(row, col) += part == 0 ? cxd(delta, 0.0) : cxd(0.0, delta);
            return loss_at(vv);
          };
          const double fd = (perturbed(eps) - perturbed(-eps)) / (2.0 * eps);
          const double an = part == 0 ? g(row, col).real() : g(row, col).imag();
          max_rel =
              std::max(max_rel, std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-6));
        }
    CHECK(max_rel < 1e-4);
  }
}

TEST_CASE("local model shapes follow the sensor flags") {
  SECTION("pilot-only vehicle at paper defaults") {
    LocalModelConfig cfg;  // defaults: L_S = 128 etc.
    Rng rng = make_rng(4);
    LocalModel m(cfg, scene::SensorFlags{false, false, false}, rng);
    CHECK(m.integration_input_len() == 128);
  }
  SECTION("three-sensor vehicle at paper defaults") {
    LocalModelConfig cfg;
    Rng rng = make_rng(5);
    LocalModel m(cfg, scene::SensorFlags{true, true, true}, rng);
    CHECK(m.integration_input_len() == 128 + 256 + 256 + 512);
  }
  SECTION("forward is deterministic and rejects mismatched features") {
    const LocalModelConfig cfg = toy_model_config();
    Rng rng = make_rng(6);
    LocalModel m(cfg, scene::SensorFlags{true, false, false}, rng);
    Rng drng = make_rng(7);
    const CRowVec y = crandn_row(drng, cfg.pilot_len);
    FeatureSet feat;
    feat.gps = RVec::Ones(20);
    const CVec a = m.forward(y, feat, false);
    const CVec b = m.forward(y, feat, false);
    CHECK((a - b).norm() == 0.0);
    CHECK(a.size() == cfg.n);
    FeatureSet bad;
    bad.rgb = RVec::Ones(36);  // no RGB branch on this vehicle
    CHECK_THROWS_AS(m.forward(y, bad), ParameterError);
  }
}

TEST_CASE("composed local model passes the finite-difference check") {
  const LocalModelConfig cfg = toy_model_config();
  Rng rng = make_rng(8);
  LocalModel m(cfg, scene::SensorFlags{true, true, true}, rng);
  Rng drng = make_rng(9);
  const CRowVec y = crandn_row(drng, cfg.pilot_len);
  FeatureSet feat;
  feat.gps = RVec::Random(20);
  feat.rgb = RVec::Random(36);
  feat.bev = RMat::Random(cfg.bev.l_x, cfg.bev.l_y).cwiseAbs();

  RVec r = RVec::Random(2 * cfg.n);
  auto loss = [&] {
    const CVec v = m.forward(y, feat, true);
    return r.dot(eta(v));
  };
  m.zero_grad();
  loss();
  m.backward(r);
  const auto params = m.params();
  const double err =
      nnkit::grad_check(loss, std::span<nnkit::Param* const>(params), 1e-4, 250, 77);
  CHECK(err < 1e-4);
}

namespace {

struct ToyWorld {
  scene::SceneConfig scfg;
  scene::Scene scn;
  channel::ChannelParams chan;
  CMat h_true;
  std::vector<CVec> h_dl;
  pilots::PilotMatrix pilot;
  LocalModelConfig mcfg;
  TrainingConfig tcfg;
  Dataset ds;
};

ToyWorld make_toy_world(std::uint64_t seed, int samples = 6) {
  ToyWorld w;
  w.scfg.vehicle_count = 2;
  w.scfg.building_count = 4;
  w.scfg.vehicle_sensors = {{true, false, false}, {false, false, true}};
  w.scn = scene::generate_scene(w.scfg, seed);
  w.chan.n_v = 4;
  w.chan.n_h = 2;
  w.mcfg = toy_model_config();
  w.mcfg.n = w.chan.n();
  w.h_true.resize(w.chan.n(), 2);
  for (int u = 0; u < 2; ++u) {
    const auto cr = channel::synthesize_channel(w.scn, u, w.chan, mix_seed(seed, u));
    w.h_true.col(u) = cr.h_dl;
    w.h_dl.push_back(cr.h_dl);
  }
  const auto cb = channel::dft_codebook(w.chan.n());
  w.pilot = pilots::build_pilot_matrix({0, 2, 4, 6}, cb, 1.0);
  w.tcfg.power = 1.0;
  w.tcfg.noise_var = 0.01;
  w.tcfg.lr = 2e-3;
  w.tcfg.batch_size = 3;
  w.tcfg.feedback_bits = 8;
  w.ds = build_dataset(w.scn, w.h_dl, w.pilot, w.tcfg.noise_var, samples, mix_seed(seed, 99),
                       w.scfg, w.mcfg.bev);
  return w;
}

std::vector<LocalModel> make_models(const ToyWorld& w, std::uint64_t seed) {
  std::vector<LocalModel> models;
  Rng rng = make_rng(seed);
  for (const auto& veh : w.scn.vehicles) models.emplace_back(w.mcfg, veh.sensors, rng);
  return models;
}

}  // namespace

TEST_CASE("offline training improves the decoded sum rate") {
  ToyWorld w = make_toy_world(21);
  auto models = make_models(w, 5);
  const double before = evaluate_sum_rate(models, w.ds, w.h_true, w.tcfg);
  MessageLedger ledger;
  const auto history = run_training_epochs(models, w.ds, w.h_true, w.tcfg, 40, 3, &ledger, true);
  REQUIRE(history.size() == 40);
  const double after = evaluate_sum_rate(models, w.ds, w.h_true, w.tcfg);
  CHECK(after > before);
  CHECK(history.back().sum_rate > history.front().sum_rate);

  // Ledger carries only protocol messages with exact byte counts.
  const int n = w.mcfg.n;
  const std::size_t upload_each = (2 * n * w.tcfg.feedback_bits + 7) / 8;
  for (const auto& msg : ledger.messages) {
    if (msg.kind == MessageLedger::Kind::kPrecoderUpload)
      CHECK(msg.bytes == upload_each);
    else if (msg.kind == MessageLedger::Kind::kGradientUnicast)
      CHECK(msg.bytes == 2 * static_cast<std::size_t>(n) * sizeof(float));
    else
      FAIL("unexpected message kind in offline training");
  }
  CHECK(ledger.gradient_loss_evals.size() == 40 * w.ds.samples.size());
  CHECK(ledger.gradient_path_touched_true_csi());  // offline trains on truth
}

TEST_CASE("zero epochs leave the models unchanged") {
  ToyWorld w = make_toy_world(22);
  auto models = make_models(w, 6);
  const double before = evaluate_sum_rate(models, w.ds, w.h_true, w.tcfg);
  const auto history = run_training_epochs(models, w.ds, w.h_true, w.tcfg, 0, 3, nullptr, true);
  CHECK(history.empty());
  CHECK(evaluate_sum_rate(models, w.ds, w.h_true, w.tcfg) == Catch::Approx(before));
}

TEST_CASE("16-bit feedback is within 1% of the unquantized forward pass") {
  ToyWorld w = make_toy_world(23);
  auto models = make_models(w, 7);
  // Train briefly so the outputs are not near-zero noise.
  run_training_epochs(models, w.ds, w.h_true, w.tcfg, 20, 3, nullptr, true);
  TrainingConfig fine = w.tcfg;
  fine.feedback_bits = 16;
  const double quantized = evaluate_sum_rate(models, w.ds, w.h_true, fine);
  TrainingConfig off = w.tcfg;
  off.quantize = false;
  const double exact = evaluate_sum_rate(models, w.ds, w.h_true, off);
  CHECK(quantized == Catch::Approx(exact).epsilon(0.01));
}

TEST_CASE("overhead arithmetic reproduces the reported figures") {
  OverheadConfig cfg;  // N = 128, N_c = 120, N_g = 1000, M = 12
  const OverheadReport r = overhead_report(cfg, 600, 7);
  CHECK(r.vfl_upload_kb == Catch::Approx(1050.0).margin(1e-12));
  CHECK(r.vfl_upload_bytes == 600u * 7u * 256u);
  CHECK(r.d1_kb_per_user == Catch::Approx(32.4).margin(1e-9));
  CHECK(r.d1_bytes_per_user == 120u * 276u);
  CHECK(r.d2_kb_per_user == Catch::Approx(23.4375).margin(1e-12));
  CHECK(std::round(r.d2_kb_per_user * 10.0) / 10.0 == Catch::Approx(23.4));
  CHECK(r.d2_bytes_per_user == 24000u);
}
