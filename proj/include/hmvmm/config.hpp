#pragma once

#include <json.hpp>

#include "hmvmm/pcsi.hpp"

namespace hmvmm::cli {

/// Configuration problems exit with code 2 at the CLI boundary.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SweepConfig {
  std::vector<double> snr_db = {0.0, 10.0, 20.0, 30.0};
  std::vector<int> k = {2, 3, 4};
  std::vector<std::string> corruption = {"none", "low", "medium", "high"};
};

struct OnlineConfig {
  int k_new = 3;   // user count after the configuration change
  int t_up = 50;   // fine-tuning epochs
};

struct ExperimentConfig {
  scene::SceneConfig scene;
  int n_v = 16;
  int n_h = 8;
  int k = 7;
  double power = 1.0;
  double snr_db = 20.0;
  int pilot_len = 8;
  double dl_carrier_hz = 4.95e9;
  double ul_carrier_hz = 4.85e9;
  double ref_gain = 20.0;
  double reflection_loss = 0.5;
  vfl::TrainingConfig train;
  vfl::LocalModelConfig model;
  pcsi::PcsiConfig pcsi;
  SweepConfig sweep;
  OnlineConfig online;
  std::vector<int> pilot_indices;  // empty -> evenly spaced over the codebook
  int dataset_size = 32;
  int eval_size = 16;

  int n() const { return n_v * n_h; }
  double noise_var() const { return snr_db_to_noise_var(snr_db, power); }

  channel::ChannelParams channel_params() const {
    channel::ChannelParams p;
    p.n_v = n_v;
    p.n_h = n_h;
    p.dl_carrier_hz = dl_carrier_hz;
    p.ul_carrier_hz = ul_carrier_hz;
    p.ref_gain = ref_gain;
    p.reflection_loss = reflection_loss;
    return p;
  }

  std::vector<int> resolved_pilot_indices() const {
    if (!pilot_indices.empty()) return pilot_indices;
    std::vector<int> idx(pilot_len);
    for (int i = 0; i < pilot_len; ++i) idx[i] = i * n() / pilot_len;
    return idx;
  }

  void validate() const {
    if (n_v < 1 || n_h < 1) throw ConfigError("antenna counts must be positive");
    if (k < 1) throw ConfigError("user count must be positive");
    if (k > n()) throw ConfigError("K must not exceed N");
    if (power <= 0.0) throw ConfigError("power must be positive");
    if (pilot_len < 1 || pilot_len > n()) throw ConfigError("pilot length must be in [1, N]");
    if (!pilot_indices.empty() && static_cast<int>(pilot_indices.size()) != pilot_len)
      throw ConfigError("pilot_indices length is inconsistent with pilot_len");
    for (int i : pilot_indices)
      if (i < 0 || i >= n()) throw ConfigError("pilot index out of codebook range");
    if (k * (pcsi.m1 + pcsi.m2) > n())
      throw ConfigError("K (M1 + M2) must not exceed N");
    if (online.k_new * (pcsi.m1 + pcsi.m2) > n())
      throw ConfigError("online K (M1 + M2) must not exceed N");
    if (train.feedback_bits < 1 || train.feedback_bits > 24)
      throw ConfigError("feedback bits must be in [1, 24]");
    if (train.regularizer && train.lambda <= 1.0)
      throw ConfigError("regularizer base lambda must exceed 1");
    if (train.r_t <= 0.0) throw ConfigError("rate threshold must be positive");
    if (model.n != n()) throw ConfigError("model antenna count diverges from N_v x N_h");
    if (model.pilot_len < pilot_len)
      throw ConfigError("model pilot length cannot be shorter than the pilot sequence");
    // Round-trip identity of the SNR <-> noise-variance mapping.
    const double back = noise_var_to_snr_db(noise_var(), power);
    if (std::abs(back - snr_db) > 1e-9) throw ConfigError("SNR round trip failed");
    for (const auto& lvl : sweep.corruption)
      if (lvl != "none" && lvl != "low" && lvl != "medium" && lvl != "high")
        throw ConfigError("unknown corruption level: " + lvl);
  }
};

namespace detail {

using nlohmann::json;

inline void expect_keys(const json& j, const std::string& where,
                        std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* key : allowed)
      if (item.key() == key) ok = true;
    if (!ok) throw ConfigError("unknown key '" + item.key() + "' in " + where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void parse_scene(const json& j, scene::SceneConfig& s) {
  expect_keys(j, "scene",
              {"bounds_x", "bounds_y", "rsu", "building_count", "building_min_height",
               "building_max_height", "road_y", "road_half_width", "gps_noise_std",
               "gps_history_fallback", "camera_omega_min", "camera_delta_omega",
               "camera_max_range", "lidar_range", "vehicle_sensors", "blackout_zones"});
  read(j, "bounds_x", s.bounds_x);
  read(j, "bounds_y", s.bounds_y);
  if (j.contains("rsu")) {
    const auto rsu = j.at("rsu").get<std::vector<double>>();
    if (rsu.size() != 3) throw ConfigError("scene.rsu must have 3 entries");
    s.rsu_x = rsu[0];
    s.rsu_y = rsu[1];
    s.rsu_height = rsu[2];
  }
  read(j, "building_count", s.building_count);
  read(j, "building_min_height", s.building_min_height);
  read(j, "building_max_height", s.building_max_height);
  read(j, "road_y", s.road_y);
  read(j, "road_half_width", s.road_half_width);
  read(j, "gps_noise_std", s.gps_noise_std);
  read(j, "gps_history_fallback", s.gps_history_fallback);
  read(j, "camera_omega_min", s.camera_omega_min);
  read(j, "camera_delta_omega", s.camera_delta_omega);
  read(j, "camera_max_range", s.camera_max_range);
  read(j, "lidar_range", s.lidar_range);
  if (j.contains("vehicle_sensors")) {
    s.vehicle_sensors.clear();
    for (const auto& entry : j.at("vehicle_sensors")) {
      scene::SensorFlags f;
      for (const auto& name : entry.get<std::vector<std::string>>()) {
        if (name == "gps") f.has_gps = true;
        else if (name == "rgb") f.has_rgb = true;
        else if (name == "lidar") f.has_lidar = true;
        else throw ConfigError("unknown sensor name: " + name);
      }
      s.vehicle_sensors.push_back(f);
    }
  }
  if (j.contains("blackout_zones")) {
    s.blackout_zones.clear();
    for (const auto& z : j.at("blackout_zones")) {
      const auto r = z.get<std::vector<double>>();
      if (r.size() != 4) throw ConfigError("blackout zone needs [x0, y0, x1, y1]");
      s.blackout_zones.push_back(scene::Rect2{{r[0], r[1]}, {r[2], r[3]}});
    }
  }
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using detail::expect_keys;
  using detail::read;
  expect_keys(j, "top level",
              {"scene", "system", "train", "model", "pcsi", "sweep", "online"});
  ExperimentConfig cfg;
  if (j.contains("scene")) detail::parse_scene(j.at("scene"), cfg.scene);
  if (j.contains("system")) {
    const auto& s = j.at("system");
    expect_keys(s, "system",
                {"n_v", "n_h", "k", "power", "snr_db", "pilot_len", "pilot_indices",
                 "feedback_bits", "dl_carrier_hz", "ul_carrier_hz", "ref_gain",
                 "reflection_loss"});
    read(s, "n_v", cfg.n_v);
    read(s, "n_h", cfg.n_h);
    read(s, "k", cfg.k);
    read(s, "power", cfg.power);
    read(s, "snr_db", cfg.snr_db);
    read(s, "pilot_len", cfg.pilot_len);
    read(s, "pilot_indices", cfg.pilot_indices);
    read(s, "feedback_bits", cfg.train.feedback_bits);
    read(s, "dl_carrier_hz", cfg.dl_carrier_hz);
    read(s, "ul_carrier_hz", cfg.ul_carrier_hz);
    read(s, "ref_gain", cfg.ref_gain);
    read(s, "reflection_loss", cfg.reflection_loss);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    expect_keys(t, "train",
                {"epochs", "batch_size", "lr", "lambda", "r_t", "regularizer", "quantize",
                 "dataset_size", "eval_size"});
    read(t, "epochs", cfg.train.epochs);
    read(t, "batch_size", cfg.train.batch_size);
    read(t, "lr", cfg.train.lr);
    read(t, "lambda", cfg.train.lambda);
    read(t, "r_t", cfg.train.r_t);
    read(t, "regularizer", cfg.train.regularizer);
    read(t, "quantize", cfg.train.quantize);
    read(t, "dataset_size", cfg.dataset_size);
    read(t, "eval_size", cfg.eval_size);
  }
  cfg.model.pilot_len = 0;  // 0 = derive from the pilot design below
  if (j.contains("model")) {
    const auto& m = j.at("model");
    expect_keys(m, "model",
                {"l_s", "l_g", "l_r", "l_l", "branch_hidden", "integ_hidden", "bev",
                 "pilot_len"});
    read(m, "l_s", cfg.model.l_s);
    read(m, "l_g", cfg.model.l_g);
    read(m, "l_r", cfg.model.l_r);
    read(m, "l_l", cfg.model.l_l);
    read(m, "branch_hidden", cfg.model.branch_hidden);
    read(m, "integ_hidden", cfg.model.integ_hidden);
    if (m.contains("bev")) {
      const auto b = m.at("bev").get<std::vector<int>>();
      if (b.size() != 3) throw ConfigError("model.bev must be [l_x, l_y, l_z]");
      cfg.model.bev.l_x = b[0];
      cfg.model.bev.l_y = b[1];
      cfg.model.bev.l_z = b[2];
    }
    read(m, "pilot_len", cfg.model.pilot_len);
  }
  if (j.contains("pcsi")) {
    const auto& p = j.at("pcsi");
    expect_keys(p, "pcsi",
                {"m1", "m2", "lambda1", "lambda2", "t_ct", "t_ps", "lr_teacher", "lr_pcsi",
                 "n_c", "n_g", "batch", "ul_est_noise_var"});
    read(p, "m1", cfg.pcsi.m1);
    read(p, "m2", cfg.pcsi.m2);
    read(p, "lambda1", cfg.pcsi.lambda1);
    read(p, "lambda2", cfg.pcsi.lambda2);
    read(p, "t_ct", cfg.pcsi.t_ct);
    read(p, "t_ps", cfg.pcsi.t_ps);
    read(p, "lr_teacher", cfg.pcsi.lr_teacher);
    read(p, "lr_pcsi", cfg.pcsi.lr_pcsi);
    read(p, "n_c", cfg.pcsi.n_c);
    read(p, "n_g", cfg.pcsi.n_g);
    read(p, "batch", cfg.pcsi.batch);
    read(p, "ul_est_noise_var", cfg.pcsi.ul_est_noise_var);
  }
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    expect_keys(s, "sweep", {"snr_db", "k", "corruption"});
    read(s, "snr_db", cfg.sweep.snr_db);
    read(s, "k", cfg.sweep.k);
    read(s, "corruption", cfg.sweep.corruption);
  }
  if (j.contains("online")) {
    const auto& o = j.at("online");
    expect_keys(o, "online", {"k_new", "t_up"});
    read(o, "k_new", cfg.online.k_new);
    read(o, "t_up", cfg.online.t_up);
  }

  // Derived consistency: the scene carries the user count; the model mirrors
  // the array size and the training noise level follows the SNR.
  cfg.scene.vehicle_count = cfg.k;
  cfg.model.n = cfg.n();
  cfg.train.power = cfg.power;
  cfg.train.noise_var = cfg.noise_var();
  int k_max = std::max(cfg.k, cfg.online.k_new);
  for (int kk : cfg.sweep.k) k_max = std::max(k_max, kk);
  cfg.model.pilot_len =
      std::max({cfg.model.pilot_len, cfg.pilot_len, k_max * (cfg.pcsi.m1 + cfg.pcsi.m2)});
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return parse_config(j);
}

inline scene::CorruptionConfig corruption_level(const std::string& name) {
  if (name == "none") return scene::CorruptionConfig{};
  if (name == "low") return scene::CorruptionConfig::low();
  if (name == "medium") return scene::CorruptionConfig::medium();
  if (name == "high") return scene::CorruptionConfig::high();
  throw ConfigError("unknown corruption level: " + name);
}

}  // namespace hmvmm::cli
