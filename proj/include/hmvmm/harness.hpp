#pragma once

#include <atomic>
#include <filesystem>
#include <iomanip>
#include <mutex>
#include <thread>

#include "hmvmm/config.hpp"

namespace hmvmm::cli {

/// Runs fn(0..count-1) on a fixed-size worker pool; results must be written
/// into pre-sized slots so the merge order is deterministic.
template <typename Fn>
void parallel_for(int count, int threads, Fn&& fn) {
  threads = std::max(1, std::min(threads, count));
  if (threads == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (int i; (i = next.fetch_add(1)) < count;) {
        try {
          fn(i);
        } catch (...) {
          std::scoped_lock lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(12) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Shared world construction: scene -> channels -> pilots -> datasets.

struct World {
  scene::Scene scn;
  channel::ChannelParams chan;
  CMat h_true;              // N x K downlink CSI
  std::vector<CVec> h_dl;
  std::vector<CVec> h_ul;
  pilots::PilotMatrix pilot;
  vfl::Dataset train_ds;
  vfl::Dataset eval_ds;
};

/// Zero-pads every received pilot row to the model's architectural length.
inline void pad_pilots(vfl::Dataset& ds, int pilot_len) {
  for (auto& sample : ds.samples)
    for (auto& y : sample.y) {
      if (y.size() > pilot_len)
        throw ParameterError("pilot rows longer than the model pilot length");
      if (y.size() == pilot_len) continue;
      CRowVec padded = CRowVec::Zero(pilot_len);
      padded.head(y.size()) = y;
      y = padded;
    }
}

inline World build_world(const ExperimentConfig& cfg, std::uint64_t seed,
                         const scene::CorruptionConfig* corruption = nullptr) {
  World w;
  w.scn = scene::generate_scene(cfg.scene, seed);
  w.chan = cfg.channel_params();
  const int k = static_cast<int>(w.scn.vehicles.size());
  w.h_true.resize(cfg.n(), k);
  for (int u = 0; u < k; ++u) {
    const auto cr = channel::synthesize_channel(w.scn, u, w.chan, mix_seed(seed, u));
    w.h_dl.push_back(cr.h_dl);
    w.h_ul.push_back(cr.h_ul);
    w.h_true.col(u) = cr.h_dl;
  }
  const auto cb = channel::dft_codebook(cfg.n());
  w.pilot = pilots::build_pilot_matrix(cfg.resolved_pilot_indices(), cb, cfg.power);
  w.train_ds = vfl::build_dataset(w.scn, w.h_dl, w.pilot, cfg.noise_var(), cfg.dataset_size,
                                  mix_seed(seed, 0x7a), cfg.scene, cfg.model.bev, corruption);
  w.eval_ds = vfl::build_dataset(w.scn, w.h_dl, w.pilot, cfg.noise_var(), cfg.eval_size,
                                 mix_seed(seed, 0xe7a), cfg.scene, cfg.model.bev, corruption);
  pad_pilots(w.train_ds, cfg.model.pilot_len);
  pad_pilots(w.eval_ds, cfg.model.pilot_len);
  return w;
}

inline std::vector<vfl::LocalModel> build_models(const ExperimentConfig& cfg,
                                                 const scene::Scene& scn, std::uint64_t seed) {
  std::vector<vfl::LocalModel> models;
  Rng rng = make_rng(seed, 0x30de1);
  for (const auto& veh : scn.vehicles) models.emplace_back(cfg.model, veh.sensors, rng);
  return models;
}

inline bool flags_equal(const scene::SensorFlags& a, const scene::SensorFlags& b) {
  return a.has_gps == b.has_gps && a.has_rgb == b.has_rgb && a.has_lidar == b.has_lidar;
}

// ---------------------------------------------------------------------------
// Baselines: ZF and WMMSE on identical channel draws per sweep point.

struct BaselineRow {
  std::string scheme;
  int k = 0;
  int n = 0;
  double snr_db = 0.0;
  std::uint64_t seed = 0;
  double sum_rate = 0.0;
};

inline std::string baselines_csv(const std::vector<BaselineRow>& rows) {
  std::ostringstream os;
  os << "scheme,K,N,snr_db,seed,sum_rate\n";
  for (const auto& r : rows)
    os << r.scheme << "," << r.k << "," << r.n << "," << format_double(r.snr_db) << "," << r.seed
       << "," << format_double(r.sum_rate) << "\n";
  return os.str();
}

inline std::vector<BaselineRow> run_baselines(const ExperimentConfig& cfg,
                                              const std::vector<std::uint64_t>& seeds,
                                              int threads = 1) {
  struct Point {
    int k;
    double snr_db;
    std::uint64_t seed;
  };
  std::vector<Point> points;
  for (int k : cfg.sweep.k)
    for (double snr : cfg.sweep.snr_db)
      for (std::uint64_t seed : seeds) points.push_back({k, snr, seed});

  std::vector<std::array<BaselineRow, 2>> slots(points.size());
  parallel_for(static_cast<int>(points.size()), threads, [&](int i) {
    const Point& pt = points[i];
    ExperimentConfig local = cfg;
    local.k = pt.k;
    local.scene.vehicle_count = pt.k;
    const std::uint64_t point_seed = mix_seed(pt.seed, mix_seed(pt.k, 1000 + (int)pt.snr_db));
    const scene::Scene scn = scene::generate_scene(local.scene, point_seed);
    CMat h(cfg.n(), pt.k);
    for (int u = 0; u < pt.k; ++u)
      h.col(u) = channel::synthesize_channel(scn, u, local.channel_params(),
                                             mix_seed(point_seed, u))
                     .h_dl;
    const double noise_var = snr_db_to_noise_var(pt.snr_db, cfg.power);
    const double zf = precode::sum_rate(h, precode::zf_precoder(h, cfg.power).v, noise_var).total;
    const double wm =
        precode::sum_rate(h, precode::wmmse_precoder(h, cfg.power, noise_var).v, noise_var).total;
    slots[i][0] = {"zf", pt.k, cfg.n(), pt.snr_db, pt.seed, zf};
    slots[i][1] = {"wmmse", pt.k, cfg.n(), pt.snr_db, pt.seed, wm};
  });

  std::vector<BaselineRow> rows;
  for (const auto& pair : slots) {
    rows.push_back(pair[0]);
    rows.push_back(pair[1]);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Offline pipeline: scene -> offline VFL -> evaluation (optionally followed by
// the online updating phase), with all histories persisted.

inline std::string history_csv(const std::vector<vfl::EpochStats>& history) {
  std::ostringstream os;
  os << "epoch,loss,sum_rate,min_rate,bytes_up,bytes_down\n";
  for (const auto& st : history)
    os << st.epoch << "," << format_double(st.loss) << "," << format_double(st.sum_rate) << ","
       << format_double(st.min_rate) << "," << st.bytes_up << "," << st.bytes_down << "\n";
  return os.str();
}

struct PipelineResult {
  std::vector<vfl::EpochStats> offline_history;
  double model_sum_rate = 0.0;  // decoded precoders on held-out snapshots
  double zf_sum_rate = 0.0;
  double wmmse_sum_rate = 0.0;
  std::vector<vfl::EpochStats> online_history;  // empty without the online stage
};

inline PipelineResult run_pipeline(const ExperimentConfig& cfg, std::uint64_t seed,
                                   const std::string& out_dir = "", bool with_online = false,
                                   vfl::MessageLedger* ledger = nullptr) {
  namespace fs = std::filesystem;
  const World w = build_world(cfg, seed);
  auto models = build_models(cfg, w.scn, mix_seed(seed, 0x91));

  PipelineResult res;
  res.offline_history =
      vfl::offline_train(models, w.train_ds, w.h_true, cfg.train, mix_seed(seed, 0x92), ledger);
  res.model_sum_rate = vfl::evaluate_sum_rate(models, w.eval_ds, w.h_true, cfg.train);
  res.zf_sum_rate =
      precode::sum_rate(w.h_true, precode::zf_precoder(w.h_true, cfg.power).v, cfg.noise_var())
          .total;
  res.wmmse_sum_rate =
      precode::sum_rate(w.h_true,
                        precode::wmmse_precoder(w.h_true, cfg.power, cfg.noise_var()).v,
                        cfg.noise_var())
          .total;

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    scene::save_scene(w.scn, out_dir + "/scene.bin");
    std::ofstream txt(out_dir + "/scene.txt");
    txt << scene::describe_scene(w.scn);
    std::ofstream hist(out_dir + "/history_offline.csv");
    hist << history_csv(res.offline_history);
    fs::create_directories(out_dir + "/models");
    for (std::size_t u = 0; u < models.size(); ++u) {
      std::ofstream mf(out_dir + "/models/vehicle_" + std::to_string(u) + ".nn",
                       std::ios::binary);
      models[u].save(mf);
    }
    std::ofstream summary(out_dir + "/summary.csv");
    summary << "metric,value\n";
    summary << "model_sum_rate," << format_double(res.model_sum_rate) << "\n";
    summary << "zf_sum_rate," << format_double(res.zf_sum_rate) << "\n";
    summary << "wmmse_sum_rate," << format_double(res.wmmse_sum_rate) << "\n";
  }

  if (with_online) {
    ExperimentConfig next = cfg;
    next.k = cfg.online.k_new;
    next.scene.vehicle_count = cfg.online.k_new;
    const scene::Scene scn2 = scene::generate_scene(next.scene, mix_seed(seed, 0x93));
    std::vector<vfl::LocalModel> updated;
    Rng mrng = make_rng(seed, 0x94);
    for (std::size_t u = 0; u < scn2.vehicles.size(); ++u) {
      if (u < models.size() && flags_equal(models[u].flags(), scn2.vehicles[u].sensors)) {
        updated.push_back(std::move(models[u]));  // pre-trained weights carry over
      } else {
        updated.emplace_back(cfg.model, scn2.vehicles[u].sensors, mrng);
      }
    }
    pcsi::OnlineSystem sys;
    sys.scn = &scn2;
    sys.scene_cfg = next.scene;
    sys.chan = next.channel_params();
    sys.train = next.train;
    sys.model = next.model;
    sys.dataset_size = next.dataset_size;
    const auto online =
        pcsi::online_update(sys, updated, next.pcsi, next.online.t_up, mix_seed(seed, 0x95),
                            ledger);
    res.online_history = online.update_history;
    if (!out_dir.empty()) {
      std::ofstream hist(out_dir + "/history_online.csv");
      hist << history_csv(res.online_history);
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Robustness sweep: offline training on corrupted sensor features.

struct RobustnessRow {
  std::string level;
  double flip_prob = 0.0;
  double occlusion_deg = 0.0;
  std::uint64_t seed = 0;
  double sum_rate = 0.0;
};

inline std::string robustness_csv(const std::vector<RobustnessRow>& rows) {
  std::ostringstream os;
  os << "level,flip_prob,occlusion_deg,seed,sum_rate\n";
  for (const auto& r : rows)
    os << r.level << "," << format_double(r.flip_prob) << "," << format_double(r.occlusion_deg)
       << "," << r.seed << "," << format_double(r.sum_rate) << "\n";
  return os.str();
}

inline std::vector<RobustnessRow> run_robustness(const ExperimentConfig& cfg,
                                                 const std::vector<std::string>& levels,
                                                 const std::vector<std::uint64_t>& seeds,
                                                 int threads = 1) {
  struct Point {
    std::string level;
    std::uint64_t seed;
  };
  std::vector<Point> points;
  for (const auto& level : levels) {
    corruption_level(level);  // validate the name up front
    for (std::uint64_t seed : seeds) points.push_back({level, seed});
  }
  std::vector<RobustnessRow> rows(points.size());
  parallel_for(static_cast<int>(points.size()), threads, [&](int i) {
    const Point& pt = points[i];
    const scene::CorruptionConfig cor = corruption_level(pt.level);
    const World w = build_world(cfg, pt.seed, &cor);
    auto models = build_models(cfg, w.scn, mix_seed(pt.seed, 0x91));
    vfl::offline_train(models, w.train_ds, w.h_true, cfg.train, mix_seed(pt.seed, 0x92));
    rows[i] = {pt.level, cor.bit_flip_prob, cor.lidar_occlusion_deg, pt.seed,
               vfl::evaluate_sum_rate(models, w.eval_ds, w.h_true, cfg.train)};
  });
  return rows;
}

// ---------------------------------------------------------------------------
// Lemma 1 verification CSV.

inline std::string lemma1_csv(const pcsi::Lemma1Report& rep) {
  std::ostringstream os;
  os << "alpha,bound,violation_rate,mean_error,predicted_mean\n";
  os << format_double(rep.alpha) << "," << format_double(rep.bound) << ","
     << format_double(rep.violation_rate) << "," << format_double(rep.mean_error) << ","
     << format_double(rep.predicted_mean) << "\n";
  return os.str();
}

}  // namespace hmvmm::cli
