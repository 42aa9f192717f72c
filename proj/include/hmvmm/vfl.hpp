#pragma once

#include <filesystem>
#include <optional>

#include "hmvmm/nnkit.hpp"
#include "hmvmm/pilots.hpp"
#include "hmvmm/precode.hpp"
#include "hmvmm/sensing.hpp"

namespace hmvmm::vfl {

using nnkit::Network;
using nnkit::Tensor;

// ---------------------------------------------------------------------------
// RSU loss (rate objective plus the heterogeneity regularizer) and its
// gradient with respect to the precoding matrix.
//
// Gradients over complex matrices use the real-pair convention
// G = dL/dRe(V) + j dL/dIm(V), so finite differences on the real and
// imaginary parts check G directly.

struct RsuLoss {
  double loss = 0.0;
  precode::RateReport rates;
  CMat grad;  // N x K, real-pair convention
};

inline RsuLoss rsu_loss(const CMat& v, const CMat& h, double noise_var, double lambda,
                        double r_t, bool regularizer = true) {
  if (regularizer && lambda <= 1.0) throw ParameterError("rsu_loss: lambda must exceed 1");
  const Eigen::Index k = h.cols();
  RsuLoss out;
  out.rates = precode::sum_rate(h, v, noise_var);
  out.grad = CMat::Zero(v.rows(), k);

  const CMat cross = h.adjoint() * v;  // (k, i) = h_k^H v_i
  const double ln2 = std::log(2.0);
  for (Eigen::Index uk = 0; uk < k; ++uk) {
    double total = noise_var, interf = noise_var;
    for (Eigen::Index i = 0; i < k; ++i) {
      total += std::norm(cross(uk, i));
      if (i != uk) interf += std::norm(cross(uk, i));
    }
    const double rk = out.rates.per_user(uk);
    double dl_drk = -1.0;
    if (regularizer) {
      out.loss -= rk + std::pow(lambda, r_t - rk);
      dl_drk += std::log(lambda) * std::pow(lambda, r_t - rk);
    } else {
      out.loss -= rk;
    }
    for (Eigen::Index j = 0; j < k; ++j) {
      const double factor = j == uk ? 1.0 / total : 1.0 / total - 1.0 / interf;
      out.grad.col(j) += dl_drk * (2.0 / ln2) * factor * cross(uk, j) * h.col(uk);
    }
  }
  return out;
}

/// Scales V to trace(VV^H) = P; also maps a downstream real-pair gradient
/// through the scaling.
struct PowerNormalized {
  CMat v;        // scaled matrix
  double scale;  // c = sqrt(P / ||V||_F^2)
  double raw_sq; // ||V||_F^2 before scaling
};

inline PowerNormalized normalize_power(const CMat& v, double power) {
  const double t = v.squaredNorm();
  if (t <= 0.0) throw NumericalError("normalize_power: zero precoding matrix");
  PowerNormalized out;
  out.raw_sq = t;
  out.scale = std::sqrt(power / t);
  out.v = out.scale * v;
  return out;
}

inline CMat normalize_power_backward(const PowerNormalized& norm, const CMat& v_raw,
                                     const CMat& grad_scaled, double power) {
  const double inner = (grad_scaled.conjugate().cwiseProduct(v_raw)).sum().real();
  return norm.scale * grad_scaled -
         (std::sqrt(power) * std::pow(norm.raw_sq, -1.5) * inner) * v_raw;
}

// ---------------------------------------------------------------------------
// Local models: per-sensor branch networks plus the integration network.

struct LocalModelConfig {
  int n = 128;        // antennas -> output is 2N reals
  int pilot_len = 8;  // L_P
  int l_s = 128;      // pilot feature size
  int l_g = 256;      // GPS feature size
  int l_r = 256;      // RGB feature size
  int l_l = 512;      // LiDAR feature size
  int branch_hidden = 128;
  int integ_hidden = 256;
  sensing::BevConfig bev;
};

/// Per-sample sensor features; absent entries match absent sensors or
/// unavailable data within a slot.
struct FeatureSet {
  std::optional<RVec> gps;  // 20
  std::optional<RVec> rgb;  // 36
  std::optional<RMat> bev;  // l_x x l_y
};

class LocalModel {
 public:
  LocalModel(const LocalModelConfig& cfg, const scene::SensorFlags& flags, Rng& rng)
      : cfg_(cfg), flags_(flags) {
    pilot_branch_ = nnkit::mlp({2 * cfg.pilot_len, cfg.branch_hidden, cfg.l_s}, rng);
    pilot_branch_.add(nnkit::relu());
    int integ_in = cfg.l_s;
    if (flags.has_gps) {
      gps_branch_ = nnkit::mlp({20, cfg.branch_hidden, cfg.l_g}, rng);
      gps_branch_->add(nnkit::relu());
      integ_in += cfg.l_g;
    }
    if (flags.has_rgb) {
      rgb_branch_ = nnkit::mlp({36, cfg.branch_hidden, cfg.l_r}, rng);
      rgb_branch_->add(nnkit::relu());
      integ_in += cfg.l_r;
    }
    if (flags.has_lidar) {
      Network lb;
      lb.add(nnkit::conv2d(1, 8, 3, 2, rng)).add(nnkit::relu());
      lb.add(nnkit::conv2d(8, 16, 3, 2, rng)).add(nnkit::relu());
      lb.add(nnkit::flatten());
      const int h1 = (cfg.bev.l_x - 3) / 2 + 1, w1 = (cfg.bev.l_y - 3) / 2 + 1;
      const int h2 = (h1 - 3) / 2 + 1, w2 = (w1 - 3) / 2 + 1;
      lb.add(nnkit::dense(16 * h2 * w2, cfg.l_l, rng));
      lb.add(nnkit::relu());
      lidar_branch_ = std::move(lb);
      integ_in += cfg.l_l;
    }
    integ_in_ = integ_in;
    integration_ = nnkit::mlp({integ_in, cfg.integ_hidden, 2 * cfg.n}, rng);
  }

  int integration_input_len() const { return integ_in_; }
  const scene::SensorFlags& flags() const { return flags_; }
  const LocalModelConfig& config() const { return cfg_; }

  /// v_hat = eta^{-1}(G^I(m^G (+) m^R (+) m^L (+) m^P)); absent modalities
  /// contribute nothing.
  CVec forward(const CRowVec& y, const FeatureSet& feat, bool training = true) {
    if (y.size() != cfg_.pilot_len) throw ParameterError("local_forward: pilot length mismatch");
    splits_.clear();
    RVec integ_in(integ_in_);
    Eigen::Index at = 0;
    auto run_branch = [&](Network& net, const Tensor& in) {
      const Tensor out = net.forward(in, training);
      const RVec o = out.to_rvec();
      integ_in.segment(at, o.size()) = o;
      splits_.push_back(o.size());
      at += o.size();
    };
    if (flags_.has_gps) {
      RVec g = feat.gps.value_or(RVec::Zero(20));
      if (g.size() != 20) throw ParameterError("local_forward: gps feature must have 20 entries");
      run_branch(*gps_branch_, Tensor::row(g));
    } else if (feat.gps) {
      throw ParameterError("local_forward: gps feature supplied without a gps branch");
    }
    if (flags_.has_rgb) {
      RVec r = feat.rgb.value_or(RVec::Zero(36));
      if (r.size() != 36) throw ParameterError("local_forward: rgb feature must have 36 entries");
      run_branch(*rgb_branch_, Tensor::row(r));
    } else if (feat.rgb) {
      throw ParameterError("local_forward: rgb feature supplied without an rgb branch");
    }
    if (flags_.has_lidar) {
      RMat bev = feat.bev.value_or(RMat::Zero(cfg_.bev.l_x, cfg_.bev.l_y));
      if (bev.rows() != cfg_.bev.l_x || bev.cols() != cfg_.bev.l_y)
        throw ParameterError("local_forward: BEV grid dims mismatch");
      Tensor t({1, 1, cfg_.bev.l_x, cfg_.bev.l_y});
      for (int i = 0; i < cfg_.bev.l_x; ++i)
        for (int j = 0; j < cfg_.bev.l_y; ++j)
          t.data[static_cast<std::size_t>(i) * cfg_.bev.l_y + j] = bev(i, j);
      run_branch(*lidar_branch_, t);
    } else if (feat.bev) {
      throw ParameterError("local_forward: BEV supplied without a lidar branch");
    }
    {
      CVec yv = y.transpose();
      run_branch(pilot_branch_, Tensor::row(eta(yv)));
    }
    const Tensor out = integration_.forward(Tensor::row(integ_in), training);
    return eta_inv(out.to_rvec());
  }

  /// Accumulates gradients from dL/d eta(v_hat).
  void backward(const RVec& grad_out) {
    if (grad_out.size() != 2 * cfg_.n) throw ParameterError("local_backward: gradient size mismatch");
    const Tensor gin = integration_.backward(Tensor::row(grad_out));
    const RVec g = gin.to_rvec();
    Eigen::Index at = 0;
    std::size_t slot = 0;
    auto back_branch = [&](Network& net) {
      const RVec seg = g.segment(at, splits_[slot]);
      net.backward(Tensor::row(seg));
      at += splits_[slot];
      ++slot;
    };
    if (flags_.has_gps) back_branch(*gps_branch_);
    if (flags_.has_rgb) back_branch(*rgb_branch_);
    if (flags_.has_lidar) back_branch(*lidar_branch_);
    back_branch(pilot_branch_);
  }

  std::vector<nnkit::Param*> params() {
    std::vector<nnkit::Param*> out;
    auto absorb = [&out](Network& n) {
      for (auto* p : n.params()) out.push_back(p);
    };
    if (gps_branch_) absorb(*gps_branch_);
    if (rgb_branch_) absorb(*rgb_branch_);
    if (lidar_branch_) absorb(*lidar_branch_);
    absorb(pilot_branch_);
    absorb(integration_);
    return out;
  }

  void zero_grad() {
    for (auto* p : params()) std::fill(p->grad.begin(), p->grad.end(), 0.0);
  }

  void adam_step(double lr) {
    if (gps_branch_) gps_branch_->adam_step(lr);
    if (rgb_branch_) rgb_branch_->adam_step(lr);
    if (lidar_branch_) lidar_branch_->adam_step(lr);
    pilot_branch_.adam_step(lr);
    integration_.adam_step(lr);
  }

  void save(std::ostream& os) const {
    if (gps_branch_) gps_branch_->save(os);
    if (rgb_branch_) rgb_branch_->save(os);
    if (lidar_branch_) lidar_branch_->save(os);
    pilot_branch_.save(os);
    integration_.save(os);
  }
  void load(std::istream& is) {
    if (gps_branch_) gps_branch_->load(is);
    if (rgb_branch_) rgb_branch_->load(is);
    if (lidar_branch_) lidar_branch_->load(is);
    pilot_branch_.load(is);
    integration_.load(is);
  }

 private:
  LocalModelConfig cfg_;
  scene::SensorFlags flags_;
  Network pilot_branch_, integration_;
  std::optional<Network> gps_branch_, rgb_branch_, lidar_branch_;
  std::vector<Eigen::Index> splits_;
  int integ_in_ = 0;
};

// ---------------------------------------------------------------------------
// Message ledger: every upload/unicast with byte sizes, plus a record of
// which CSI source fed each gradient-path loss evaluation. Supports both the
// vertical-partition isolation check and the label-free contract check.

struct MessageLedger {
  enum class Kind { kPrecoderUpload, kGradientUnicast, kD1Feedback, kD2Feedback };
  struct Message {
    Kind kind;
    int vehicle;
    std::size_t bytes;
  };
  struct LossEval {
    bool used_true_csi;
  };

  std::vector<Message> messages;
  std::vector<LossEval> gradient_loss_evals;

  void record(Kind kind, int vehicle, std::size_t bytes) {
    messages.push_back({kind, vehicle, bytes});
  }
  void record_gradient_eval(bool used_true_csi) { gradient_loss_evals.push_back({used_true_csi}); }

  std::size_t total_bytes(Kind kind) const {
    std::size_t n = 0;
    for (const auto& m : messages)
      if (m.kind == kind) n += m.bytes;
    return n;
  }
  bool gradient_path_touched_true_csi() const {
    for (const auto& e : gradient_loss_evals)
      if (e.used_true_csi) return true;
    return false;
  }
};

// ---------------------------------------------------------------------------
// Offline federated training (quantized upload, gradient unicast,
// straight-through across the quantizer).

struct TrainingConfig {
  double lambda = 10.0;
  double r_t = 0.3;
  double lr = 1e-4;
  int epochs = 200;
  int batch_size = 8;
  int feedback_bits = 2;
  bool quantize = true;  // false models infinite-resolution feedback
  double power = 1.0;
  double noise_var = 0.01;
  bool regularizer = true;
};

struct TrainSample {
  std::vector<CRowVec> y;           // per-vehicle received pilots
  std::vector<FeatureSet> features; // per-vehicle sensor features
};

struct Dataset {
  std::vector<TrainSample> samples;
};

/// Extracts the (gps, rgb, bev) feature set for one snapshot. The indicator
/// bit-flip recorded by corrupt_snapshot is applied here.
inline FeatureSet extract_features(const scene::Scene& s, int vehicle_index,
                                   const scene::SensorSnapshot& snap,
                                   const scene::SceneConfig& scfg, const sensing::BevConfig& bev,
                                   Rng& rng) {
  const auto& veh = s.vehicles[vehicle_index];
  FeatureSet f;
  if (veh.sensors.has_gps && snap.gps)
    f.gps = sensing::gps_features(*snap.gps, s.rsu_position);
  if (veh.sensors.has_rgb) {
    sensing::FovConfig fov{scfg.camera_omega_min, scfg.camera_delta_omega};
    RVec ind = sensing::rgb_indicator(snap.detections, fov);
    ind = sensing::apply_bit_flips(ind, snap.rgb_flip_prob, rng);
    f.rgb = sensing::rgb_features(ind, veh.orientation);
  }
  if (veh.sensors.has_lidar) f.bev = sensing::lidar_bev(snap.point_cloud, bev);
  return f;
}

/// Draws `count` training snapshots: fresh sensor and pilot noise on fixed
/// scene geometry, optional corruption applied to every snapshot.
inline Dataset build_dataset(const scene::Scene& s, const std::vector<CVec>& h_dl,
                             const pilots::PilotMatrix& pilot, double noise_var, int count,
                             std::uint64_t seed, const scene::SceneConfig& scfg,
                             const sensing::BevConfig& bev,
                             const scene::CorruptionConfig* corruption = nullptr) {
  Dataset ds;
  const int k = static_cast<int>(s.vehicles.size());
  for (int i = 0; i < count; ++i) {
    TrainSample sample;
    for (int veh = 0; veh < k; ++veh) {
      const std::uint64_t snap_seed = mix_seed(seed, mix_seed(i, veh));
      scene::SensorSnapshot snap = scene::sample_snapshot(s, veh, snap_seed, scfg);
      if (corruption) snap = scene::corrupt_snapshot(snap, *corruption, mix_seed(snap_seed, 7));
      Rng frng = make_rng(snap_seed, 0xfea7);
      sample.features.push_back(extract_features(s, veh, snap, scfg, bev, frng));
      Rng nrng = make_rng(snap_seed, 0x4015e);
      sample.y.push_back(pilots::transmit_downlink(h_dl[veh], pilot.s, noise_var, nrng));
    }
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double sum_rate = 0.0;  // against the CSI the loss is evaluated on
  double min_rate = 0.0;
  double report_sum_rate = 0.0;  // against the reporting CSI, when provided
  std::size_t bytes_up = 0;
  std::size_t bytes_down = 0;
};

struct ForwardOutcome {
  CMat v;       // decoded precoders, one column per vehicle
  CMat v_hat;   // raw local outputs before quantization
};

/// One federated forward over all vehicles: local forward, quantization
/// upload, RSU-side decode.
inline ForwardOutcome federated_forward(std::vector<LocalModel>& models, const TrainSample& sample,
                                        const TrainingConfig& cfg, MessageLedger* ledger,
                                        bool training = true) {
  const int k = static_cast<int>(models.size());
  const int n = models[0].config().n;
  ForwardOutcome out;
  out.v.resize(n, k);
  out.v_hat.resize(n, k);
  const double clip = pilots::recommended_clip(cfg.power / k, n);
  const pilots::QuantizerConfig q(cfg.quantize ? cfg.feedback_bits : 1, clip);
  for (int veh = 0; veh < k; ++veh) {
    const CVec v_hat = models[veh].forward(sample.y[veh], sample.features[veh], training);
    out.v_hat.col(veh) = v_hat;
    if (cfg.quantize) {
      const Bits bits = pilots::quantize_feedback(v_hat, q);
      if (ledger)
        ledger->record(MessageLedger::Kind::kPrecoderUpload, veh, pack_bits(bits).size());
      out.v.col(veh) = pilots::dequantize_feedback(bits, q);
    } else {
      if (ledger) ledger->record(MessageLedger::Kind::kPrecoderUpload, veh, 2 * n * sizeof(double));
      out.v.col(veh) = v_hat;
    }
  }
  return out;
}

/// Algorithm-style offline training loop. `h_for_loss` is the CSI matrix the
/// RSU evaluates the loss on (ground truth offline, pseudo labels online);
/// `used_true_csi` tags the ledger so the label-free contract stays checkable.
/// `report_h`, when given, is evaluated outside the gradient path and lands in
/// EpochStats::report_sum_rate.
inline std::vector<EpochStats> run_training_epochs(
    std::vector<LocalModel>& models, const Dataset& ds, const CMat& h_for_loss,
    const TrainingConfig& cfg, int epochs, std::uint64_t seed, MessageLedger* ledger,
    bool used_true_csi, const CMat* report_h = nullptr) {
  const int k = static_cast<int>(models.size());
  if (k == 0 || ds.samples.empty()) return {};
  const int n = models[0].config().n;
  std::vector<EpochStats> history;
  std::vector<int> order(ds.samples.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng erng = make_rng(seed, mix_seed(0xe90c, epoch));
    std::shuffle(order.begin(), order.end(), erng);
    double ep_loss = 0.0, ep_sum = 0.0, ep_min = 0.0, ep_report = 0.0;
    const std::size_t bytes_before =
        ledger ? ledger->total_bytes(MessageLedger::Kind::kPrecoderUpload) : 0;
    const std::size_t down_before =
        ledger ? ledger->total_bytes(MessageLedger::Kind::kGradientUnicast) : 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(stop - start);
      for (auto& m : models) m.zero_grad();
      for (std::size_t si = start; si < stop; ++si) {
        const TrainSample& sample = ds.samples[order[si]];
        const ForwardOutcome fo = federated_forward(models, sample, cfg, ledger);
        const PowerNormalized norm = normalize_power(fo.v, cfg.power);
        const RsuLoss rl =
            rsu_loss(norm.v, h_for_loss, cfg.noise_var, cfg.lambda, cfg.r_t, cfg.regularizer);
        if (ledger) ledger->record_gradient_eval(used_true_csi);
        if (!std::isfinite(rl.loss))
          throw NumericalError("offline_train diverged at epoch " + std::to_string(epoch));
        ep_loss += rl.loss;
        ep_sum += rl.rates.total;
        ep_min += rl.rates.per_user.minCoeff();
        if (report_h) ep_report += precode::sum_rate(*report_h, norm.v, cfg.noise_var).total;
        const CMat g = normalize_power_backward(norm, fo.v, rl.grad, cfg.power);
        for (int veh = 0; veh < k; ++veh) {
          // Straight-through across D(F(.)): the decoded-precoder gradient is
          // applied to the local output unchanged.
          RVec gk(2 * n);
          gk.head(n) = g.col(veh).real() * inv_batch;
          gk.tail(n) = g.col(veh).imag() * inv_batch;
          models[veh].backward(gk);
          if (ledger)
            ledger->record(MessageLedger::Kind::kGradientUnicast, veh, 2 * n * sizeof(float));
        }
      }
      for (auto& m : models) m.adam_step(cfg.lr);
    }

    const double inv = 1.0 / static_cast<double>(order.size());
    EpochStats st;
    st.epoch = epoch;
    st.loss = ep_loss * inv;
    st.sum_rate = ep_sum * inv;
    st.min_rate = ep_min * inv;
    st.report_sum_rate = report_h ? ep_report * inv : 0.0;
    st.bytes_up =
        ledger ? ledger->total_bytes(MessageLedger::Kind::kPrecoderUpload) - bytes_before : 0;
    st.bytes_down =
        ledger ? ledger->total_bytes(MessageLedger::Kind::kGradientUnicast) - down_before : 0;
    history.push_back(st);
  }
  return history;
}

/// Offline VFL training against ground-truth CSI (Algorithm-1 style).
inline std::vector<EpochStats> offline_train(std::vector<LocalModel>& models, const Dataset& ds,
                                             const CMat& h_true, const TrainingConfig& cfg,
                                             std::uint64_t seed,
                                             MessageLedger* ledger = nullptr) {
  return run_training_epochs(models, ds, h_true, cfg, cfg.epochs, seed, ledger, true);
}

/// Mean sum rate of the decoded, power-normalized precoders over a dataset.
inline double evaluate_sum_rate(std::vector<LocalModel>& models, const Dataset& ds,
                                const CMat& h_true, const TrainingConfig& cfg) {
  double acc = 0.0;
  for (const auto& sample : ds.samples) {
    const ForwardOutcome fo = federated_forward(models, sample, cfg, nullptr, false);
    const PowerNormalized norm = normalize_power(fo.v, cfg.power);
    acc += precode::sum_rate(h_true, norm.v, cfg.noise_var).total;
  }
  return acc / static_cast<double>(ds.samples.size());
}

// ---------------------------------------------------------------------------
// Communication-overhead arithmetic. KB figures follow the reporting
// convention of the accounting they reproduce: a length-N complex vector at
// 8+8 bits is 2N bytes (0.25 KB at N = 128) and a beam-index label of
// `label_indices` 4-byte integers is rounded to 0.02 KB.

struct OverheadReport {
  std::size_t vfl_upload_bytes = 0;
  double vfl_upload_kb = 0.0;
  std::size_t d1_bytes_per_user = 0;
  double d1_kb_per_user = 0.0;
  std::size_t d2_bytes_per_user = 0;
  double d2_kb_per_user = 0.0;
};

struct OverheadConfig {
  int n = 128;            // antennas
  int n_c = 120;          // labeled pairs per user (D1)
  int n_g = 1000;         // unlabeled tuples per user (D2)
  int m = 12;             // DL training codewords per slot
  int label_indices = 5;  // beam indices per D1 label
};

inline OverheadReport overhead_report(const OverheadConfig& cfg, int epochs, int k) {
  OverheadReport r;
  const std::size_t vec_bytes = 2 * static_cast<std::size_t>(cfg.n);
  r.vfl_upload_bytes = static_cast<std::size_t>(epochs) * k * vec_bytes;
  r.vfl_upload_kb = epochs * static_cast<double>(k) * vec_bytes / 1024.0;
  const std::size_t label_bytes = 4 * static_cast<std::size_t>(cfg.label_indices);
  r.d1_bytes_per_user = static_cast<std::size_t>(cfg.n_c) * (vec_bytes + label_bytes);
  r.d1_kb_per_user = cfg.n_c * (vec_bytes / 1024.0 + 0.02);
  r.d2_bytes_per_user = static_cast<std::size_t>(cfg.n_g) * 2 * cfg.m;
  r.d2_kb_per_user = r.d2_bytes_per_user / 1024.0;
  return r;
}

}  // namespace hmvmm::vfl
