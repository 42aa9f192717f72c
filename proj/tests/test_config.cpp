#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "hmvmm/harness.hpp"

using namespace hmvmm;
using namespace hmvmm::cli;
using nlohmann::json;

namespace {

json toy_json() {
  return json::parse(R"({
    "system": {"n_v": 4, "n_h": 2, "k": 2, "snr_db": 20.0, "pilot_len": 4, "feedback_bits": 8},
    "scene": {"building_count": 4, "vehicle_sensors": [["gps"], ["lidar"]]},
    "train": {"epochs": 5, "batch_size": 4, "lr": 0.002, "dataset_size": 6, "eval_size": 4},
    "model": {"l_s": 16, "l_g": 16, "l_r": 16, "l_l": 16, "branch_hidden": 16,
              "integ_hidden": 32, "bev": [8, 8, 4]},
    "pcsi": {"m1": 2, "m2": 1, "t_ct": 6, "t_ps": 4, "n_c": 8, "n_g": 12, "batch": 8},
    "sweep": {"snr_db": [10.0, 20.0], "k": [1, 2], "corruption": ["none", "low"]},
    "online": {"k_new": 2, "t_up": 3}
  })");
}

}  // namespace

TEST_CASE("config parsing and validation") {
  SECTION("defaults are valid and mirror the paper's system values") {
    const ExperimentConfig cfg = parse_config(json::object());
    CHECK(cfg.n() == 128);
    CHECK(cfg.k == 7);
    CHECK(cfg.dl_carrier_hz == Catch::Approx(4.95e9));
    CHECK(cfg.ul_carrier_hz == Catch::Approx(4.85e9));
    CHECK(cfg.train.lambda == Catch::Approx(10.0));
    CHECK(cfg.train.r_t == Catch::Approx(0.3));
    CHECK(cfg.model.l_s == 128);
    CHECK(cfg.scene.gps_noise_std == Catch::Approx(5.0));
  }
  SECTION("toy config round trips through derived fields") {
    const ExperimentConfig cfg = parse_config(toy_json());
    CHECK(cfg.n() == 8);
    CHECK(cfg.model.n == 8);
    CHECK(cfg.scene.vehicle_count == 2);
    CHECK(cfg.train.noise_var == Catch::Approx(snr_db_to_noise_var(20.0, 1.0)));
    // Model pilot length covers both the offline pilots and K (M1 + M2).
    CHECK(cfg.model.pilot_len == std::max(4, 2 * 3));
  }
  SECTION("unknown keys are rejected everywhere") {
    json j = toy_json();
    j["mystery"] = 1;
    CHECK_THROWS_AS(parse_config(j), ConfigError);
    j = toy_json();
    j["system"]["mystery"] = 1;
    CHECK_THROWS_AS(parse_config(j), ConfigError);
    j = toy_json();
    j["pcsi"]["mystery"] = 1;
    CHECK_THROWS_AS(parse_config(j), ConfigError);
  }
  SECTION("codeword budget K (M1 + M2) <= N is enforced") {
    json j = toy_json();
    j["pcsi"]["m1"] = 3;
    j["pcsi"]["m2"] = 3;  // 2 * 6 = 12 > 8
    CHECK_THROWS_AS(parse_config(j), ConfigError);
  }
  SECTION("pilot index list must match the pilot length") {
    json j = toy_json();
    j["system"]["pilot_indices"] = {0, 1, 2};
    CHECK_THROWS_AS(parse_config(j), ConfigError);
    j["system"]["pilot_indices"] = {0, 1, 2, 9};  // out of range for N = 8
    CHECK_THROWS_AS(parse_config(j), ConfigError);
    j["system"]["pilot_indices"] = {0, 2, 4, 6};
    CHECK(parse_config(j).resolved_pilot_indices() == std::vector<int>{0, 2, 4, 6});
  }
  SECTION("SNR to noise variance round trip is exact") {
    const ExperimentConfig cfg = parse_config(toy_json());
    CHECK(noise_var_to_snr_db(cfg.noise_var(), cfg.power) == Catch::Approx(20.0).margin(1e-12));
  }
  SECTION("corruption levels map to the reported presets") {
    CHECK(corruption_level("low").bit_flip_prob == Catch::Approx(0.2));
    CHECK(corruption_level("low").lidar_occlusion_deg == Catch::Approx(30.0));
    CHECK(corruption_level("medium").bit_flip_prob == Catch::Approx(0.5));
    CHECK(corruption_level("high").bit_flip_prob == Catch::Approx(0.6));
    CHECK(corruption_level("high").lidar_occlusion_deg == Catch::Approx(100.0));
    CHECK_THROWS_AS(corruption_level("catastrophic"), ConfigError);
  }
  SECTION("unknown sweep level names are config errors") {
    json j = toy_json();
    j["sweep"]["corruption"] = {"none", "catastrophic"};
    CHECK_THROWS_AS(parse_config(j), ConfigError);
  }
}

TEST_CASE("baseline sweeps") {
  ExperimentConfig cfg = parse_config(toy_json());
  cfg.sweep.k = {1, 2};
  cfg.sweep.snr_db = {10.0, 20.0};
  const std::vector<std::uint64_t> seeds = {5, 6};

  const auto rows = run_baselines(cfg, seeds, 2);
  REQUIRE(rows.size() == 2 * 2 * 2 * 2);  // schemes x K x SNR x seeds

  SECTION("WMMSE dominates ZF at every sweep point") {
    for (std::size_t i = 0; i < rows.size(); i += 2) {
      CHECK(rows[i].scheme == "zf");
      CHECK(rows[i + 1].scheme == "wmmse");
      CHECK(rows[i + 1].sum_rate >= rows[i].sum_rate - 1e-9);
    }
  }
  SECTION("K = 1 rates agree within 1e-6") {
    for (std::size_t i = 0; i < rows.size(); i += 2)
      if (rows[i].k == 1)
        CHECK(rows[i].sum_rate == Catch::Approx(rows[i + 1].sum_rate).margin(1e-6));
  }
  SECTION("reruns with the same seeds are identical") {
    const auto again = run_baselines(cfg, seeds, 1);
    CHECK(baselines_csv(rows) == baselines_csv(again));
  }
}

TEST_CASE("pipeline and robustness harness") {
  ExperimentConfig cfg = parse_config(toy_json());

  SECTION("pipeline persists histories and checkpoints") {
    namespace fs = std::filesystem;
    const std::string dir = "pipeline_test_out";
    fs::remove_all(dir);
    const PipelineResult res = run_pipeline(cfg, 3, dir, /*with_online=*/true);
    CHECK(static_cast<int>(res.offline_history.size()) == cfg.train.epochs);
    CHECK(res.online_history.size() == static_cast<std::size_t>(cfg.online.t_up));
    CHECK(fs::exists(dir + "/scene.bin"));
    CHECK(fs::exists(dir + "/scene.txt"));
    CHECK(fs::exists(dir + "/history_offline.csv"));
    CHECK(fs::exists(dir + "/history_online.csv"));
    CHECK(fs::exists(dir + "/models/vehicle_0.nn"));
    CHECK(fs::exists(dir + "/summary.csv"));
    // Documented column schema.
    std::ifstream hist(dir + "/history_offline.csv");
    std::string header;
    std::getline(hist, header);
    CHECK(header == "epoch,loss,sum_rate,min_rate,bytes_up,bytes_down");
    fs::remove_all(dir);
  }
  SECTION("zero corruption reproduces the uncorrupted run bitwise") {
    const auto clean = run_pipeline(cfg, 7).model_sum_rate;
    const auto rows = run_robustness(cfg, {"none"}, {7});
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].sum_rate == clean);  // bitwise equality, not approximate
  }
  SECTION("robustness rows are regenerable and ordered by level") {
    const auto rows = run_robustness(cfg, {"none", "high"}, {4, 5}, 2);
    REQUIRE(rows.size() == 4);
    const auto again = run_robustness(cfg, {"none", "high"}, {4, 5}, 1);
    CHECK(robustness_csv(rows) == robustness_csv(again));
  }
  SECTION("unknown level names fail fast") {
    CHECK_THROWS_AS(run_robustness(cfg, {"bogus"}, {1}), ConfigError);
  }
}
