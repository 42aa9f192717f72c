#pragma once

#include "hmvmm/vfl.hpp"

namespace hmvmm::pcsi {

using nnkit::Network;
using nnkit::Tensor;

struct PcsiConfig {
  int m1 = 2;
  int m2 = 2;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  int t_ct = 100;   // teacher epochs
  int t_ps = 150;   // simulator epochs
  double lr_teacher = 2e-4;
  double lr_pcsi = 1e-3;
  std::vector<int> teacher_halving = {20, 40, 60, 100};
  std::vector<int> pcsi_halving = {10, 20, 40, 60, 100};
  int n_c = 120;    // labeled pairs per user
  int n_g = 1000;   // unlabeled tuples per user
  int batch = 32;
  double ul_est_noise_var = 1e-3;  // noise on previous-slot UL CSI estimates
};

/// Codeword-Teacher / Resi-CW-Net body: [256, 512, 128] MLP with batch norm
/// after the first and second layers, sigmoid codeword probabilities out.
inline Network make_codeword_net(int n, Rng& rng) {
  Network net;
  net.add(nnkit::dense(2 * n, 256, rng)).add(nnkit::batchnorm(256)).add(nnkit::relu());
  net.add(nnkit::dense(256, 512, rng)).add(nnkit::batchnorm(512)).add(nnkit::relu());
  net.add(nnkit::dense(512, 128, rng)).add(nnkit::relu());
  net.add(nnkit::dense(128, n, rng)).add(nnkit::sigmoid());
  return net;
}

/// Main-CSI-Net / Resi-CSI-Net: width-256 dense body behind an input-to-output
/// skip, zero-initialized last layer so the untrained refiner is the identity.
inline Network make_refiner(int n, Rng& rng) {
  Network body;
  body.add(nnkit::dense(2 * n, 256, rng)).add(nnkit::relu());
  body.add(nnkit::dense(256, 256, rng)).add(nnkit::relu());
  body.add(nnkit::dense_zero(256, 2 * n, rng));
  Network net;
  net.add(nnkit::make_residual(std::move(body)));
  return net;
}

/// Binary label marking the `count` largest DL beamspace magnitudes.
inline RVec optimal_beam_label(const CVec& h, const channel::Codebook& cb, int count) {
  const CRowVec e = channel::to_beamspace(h, cb);
  std::vector<int> idx(e.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + count, idx.end(),
                    [&](int a, int b) { return std::abs(e(a)) > std::abs(e(b)); });
  RVec label = RVec::Zero(e.size());
  for (int i = 0; i < count; ++i) label(idx[i]) = 1.0;
  return label;
}

/// Step 1: per-user top-M1 beamspace magnitudes of the previous-slot UL
/// estimates, united over users (overlapping codewords broadcast once).
inline std::vector<int> select_initial_codewords(const std::vector<CVec>& ul_estimates,
                                                 const channel::Codebook& cb, int m1) {
  if (m1 < 1) throw ParameterError("select_initial_codewords: M1 must be >= 1");
  std::set<int> indices;
  for (const auto& h : ul_estimates) {
    const CRowVec e = channel::to_beamspace(h, cb);
    std::vector<int> idx(e.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + m1, idx.end(),
                      [&](int a, int b) { return std::abs(e(a)) > std::abs(e(b)); });
    indices.insert(idx.begin(), idx.begin() + m1);
  }
  return {indices.begin(), indices.end()};
}

struct ResidualSelection {
  std::vector<int> indices;
  bool padded = false;  // fewer than M2 nonzero probabilities remained
};

/// Step 2: zero the already-transmitted entries, take per-user top-M2, unite.
inline ResidualSelection select_residual_codewords(const std::vector<RVec>& p_hat,
                                                   const std::vector<int>& initial, int m2) {
  if (m2 < 1) throw ParameterError("select_residual_codewords: M2 must be >= 1");
  ResidualSelection sel;
  std::set<int> chosen;
  const std::set<int> banned(initial.begin(), initial.end());
  for (const auto& p : p_hat) {
    RVec masked = p;
    for (int i : initial) masked(i) = 0.0;
    std::vector<int> idx(masked.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return masked(a) > masked(b); });
    int taken = 0;
    for (int i : idx) {
      if (taken == m2) break;
      if (banned.count(i)) continue;
      if (masked(i) <= 0.0) break;  // only strictly positive scores qualify
      chosen.insert(i);
      ++taken;
    }
    if (taken < m2) {
      sel.padded = true;
      for (Eigen::Index i = 0; i < masked.size() && taken < m2; ++i) {
        if (banned.count(static_cast<int>(i)) || chosen.count(static_cast<int>(i))) continue;
        chosen.insert(static_cast<int>(i));
        ++taken;
      }
    }
  }
  sel.indices.assign(chosen.begin(), chosen.end());
  return sel;
}

// ---------------------------------------------------------------------------
// Datasets and state.

struct LabeledPair {
  RVec input;  // eta of the coarse LS estimate from the S_I probe
  RVec label;  // binary optimal-codeword indices
};

struct UnlabeledTuple {
  CRowVec y_o;      // y_I (+) y_R
  RVec ls_input_i;  // eta of LS estimate from the S_I block
  RVec ls_input_r;  // eta of LS estimate from the S_R block
};

struct PseudoLabel {
  CVec h;                            // synthesized pseudo DL CSI
  std::vector<int> initial_indices;  // I_I provenance
  std::vector<int> residual_indices; // I_R provenance
};

struct PcsiState {
  int n = 0;
  PcsiConfig cfg;
  std::vector<int> initial_indices;   // I_I
  std::vector<int> residual_indices;  // I_R used for the S_R probes
  pilots::PilotMatrix s_i, s_r;
  Network teacher;
  bool teacher_trained = false;
  std::vector<Network> selectors;       // per user
  std::vector<Network> main_refiners;   // per user
  std::vector<Network> resi_refiners;   // per user
  std::vector<std::vector<LabeledPair>> d1;
  std::vector<std::vector<UnlabeledTuple>> d2;
};

/// Column-vector channel estimate from a received row: (y S^+)^H.
inline CVec ls_column(const CRowVec& y, const pilots::PilotMatrix& pm) {
  return pilots::ls_estimate(y, pm).adjoint();
}

inline RVec teacher_probs(Network& teacher, const RVec& input) {
  return teacher.forward(Tensor::row(input), false).to_rvec();
}

/// Step 3 for one user; with identity-initialized refiners this returns the
/// sum of the two LS estimates.
inline PseudoLabel synthesize_pseudo_csi(const CRowVec& y_i, const CRowVec& y_r,
                                         const pilots::PilotMatrix& s_i,
                                         const pilots::PilotMatrix& s_r, Network& main_refiner,
                                         Network& resi_refiner, bool training = false) {
  PseudoLabel out;
  const CVec hi = ls_column(y_i, s_i);
  const CVec hr = ls_column(y_r, s_r);
  const RVec ri = main_refiner.forward(Tensor::row(eta(hi)), training).to_rvec();
  const RVec rr = resi_refiner.forward(Tensor::row(eta(hr)), training).to_rvec();
  out.h = eta_inv(ri) + eta_inv(rr);
  out.initial_indices = s_i.source_indices;
  out.residual_indices = s_r.source_indices;
  return out;
}

/// Online loss term (1/M) ||y_o - h^H S||_1 with its gradient with respect to
/// eta(h). Zero-magnitude residual entries contribute a zero subgradient.
inline double l1_residual_loss(const CRowVec& y_o, const CMat& s, const CVec& h, RVec* grad_eta) {
  if (y_o.size() != s.cols()) throw ParameterError("l1_residual_loss: dimension mismatch");
  const Eigen::Index m = s.cols(), n = s.rows();
  const CRowVec r = y_o - h.adjoint() * s;
  double loss = 0.0;
  if (grad_eta) *grad_eta = RVec::Zero(2 * n);
  for (Eigen::Index j = 0; j < m; ++j) {
    const double mag = std::abs(r(j));
    loss += mag;
    if (grad_eta && mag > 1e-15) {
      const cxd unit = std::conj(r(j)) / mag;
      for (Eigen::Index i = 0; i < n; ++i) {
        const cxd prod = unit * s(i, j);
        (*grad_eta)(i) -= prod.real() / m;
        (*grad_eta)(n + i) -= prod.imag() / m;
      }
    }
  }
  return loss / m;
}

// ---------------------------------------------------------------------------
// Phase A/C dataset construction.

inline void build_d1(PcsiState& st, const std::vector<CVec>& h_dl, const channel::Codebook& cb,
                     double noise_var, std::uint64_t seed, vfl::MessageLedger* ledger) {
  const int k = static_cast<int>(h_dl.size());
  st.d1.assign(k, {});
  const int label_count = st.cfg.m1 + st.cfg.m2;
  for (int u = 0; u < k; ++u) {
    Rng rng = make_rng(seed, mix_seed(0xd1, u));
    const RVec label = optimal_beam_label(h_dl[u], cb, label_count);
    for (int i = 0; i < st.cfg.n_c; ++i) {
      const CRowVec y = pilots::transmit_downlink(h_dl[u], st.s_i.s, noise_var, rng);
      LabeledPair pair;
      pair.input = eta(ls_column(y, st.s_i));
      pair.label = label;
      st.d1[u].push_back(std::move(pair));
      if (ledger)
        ledger->record(vfl::MessageLedger::Kind::kD1Feedback, u,
                       2 * static_cast<std::size_t>(st.n) + 4 * label_count);
    }
  }
}

inline void build_d2(PcsiState& st, const std::vector<CVec>& h_dl, double noise_var,
                     std::uint64_t seed, vfl::MessageLedger* ledger) {
  const int k = static_cast<int>(h_dl.size());
  st.d2.assign(k, {});
  for (int u = 0; u < k; ++u) {
    Rng rng = make_rng(seed, mix_seed(0xd2, u));
    for (int i = 0; i < st.cfg.n_g; ++i) {
      const CRowVec y_i = pilots::transmit_downlink(h_dl[u], st.s_i.s, noise_var, rng);
      const CRowVec y_r = pilots::transmit_downlink(h_dl[u], st.s_r.s, noise_var, rng);
      UnlabeledTuple t;
      t.y_o.resize(y_i.size() + y_r.size());
      t.y_o << y_i, y_r;
      t.ls_input_i = eta(ls_column(y_i, st.s_i));
      t.ls_input_r = eta(ls_column(y_r, st.s_r));
      const std::size_t bytes = 2 * static_cast<std::size_t>(t.y_o.size());
      st.d2[u].push_back(std::move(t));
      if (ledger) ledger->record(vfl::MessageLedger::Kind::kD2Feedback, u, bytes);
    }
  }
}

// ---------------------------------------------------------------------------
// Phase B: supervised teacher training on D1 (negative BCE, minimized).

struct TeacherHistory {
  std::vector<double> loss;  // per-epoch mean BCE
};

inline TeacherHistory teacher_train(PcsiState& st, std::uint64_t seed) {
  std::size_t total = 0;
  for (const auto& d : st.d1) total += d.size();
  if (total == 0) throw ParameterError("teacher_train: empty D1");
  std::vector<const LabeledPair*> pool;
  for (const auto& d : st.d1)
    for (const auto& p : d) pool.push_back(&p);

  TeacherHistory hist;
  double lr = st.cfg.lr_teacher;
  Rng rng = make_rng(seed, 0x7eac);
  for (int epoch = 0; epoch < st.cfg.t_ct; ++epoch) {
    for (int he : st.cfg.teacher_halving)
      if (epoch == he) lr *= 0.5;
    std::shuffle(pool.begin(), pool.end(), rng);
    double ep_loss = 0.0;
    for (std::size_t start = 0; start < pool.size(); start += st.cfg.batch) {
      const std::size_t stop = std::min(pool.size(), start + st.cfg.batch);
      std::vector<RVec> inputs, labels;
      for (std::size_t i = start; i < stop; ++i) {
        inputs.push_back(pool[i]->input);
        labels.push_back(pool[i]->label);
      }
      st.teacher.zero_grad();
      const Tensor pred = st.teacher.forward(Tensor::rows(inputs), true);
      Tensor grad;
      const double loss = nnkit::bce_loss(pred, Tensor::rows(labels), grad);
      // Mean over the batch.
      for (auto& g : grad.data) g /= static_cast<double>(stop - start);
      ep_loss += loss;
      st.teacher.backward(grad);
      st.teacher.adam_step(lr);
    }
    hist.loss.push_back(ep_loss / static_cast<double>(pool.size()));
  }
  st.teacher_trained = true;
  return hist;
}

// ---------------------------------------------------------------------------
// Phase D: joint training of the selector and the two refiners per user.

struct PcsiHistory {
  std::vector<double> loss_c;
  std::vector<double> loss_h;
};

inline PcsiHistory pcsi_train(PcsiState& st, std::uint64_t seed) {
  if (!st.teacher_trained) throw StateError("pcsi_train: teacher has not been trained");
  const int k = static_cast<int>(st.d2.size());
  if (k == 0) throw ParameterError("pcsi_train: empty D2");
  CMat s_full(st.n, st.s_i.s.cols() + st.s_r.s.cols());
  s_full << st.s_i.s, st.s_r.s;

  PcsiHistory hist;
  double lr = st.cfg.lr_pcsi;
  for (int epoch = 0; epoch < st.cfg.t_ps; ++epoch) {
    for (int he : st.cfg.pcsi_halving)
      if (epoch == he) lr *= 0.5;
    double ep_c = 0.0, ep_h = 0.0;
    std::size_t count = 0;
    for (int u = 0; u < k; ++u) {
      Rng rng = make_rng(seed, mix_seed(mix_seed(0x9c51, epoch), u));
      std::vector<const UnlabeledTuple*> pool;
      for (const auto& t : st.d2[u]) pool.push_back(&t);
      std::shuffle(pool.begin(), pool.end(), rng);
      for (std::size_t start = 0; start < pool.size(); start += st.cfg.batch) {
        const std::size_t stop = std::min(pool.size(), start + st.cfg.batch);
        const double inv_batch = 1.0 / static_cast<double>(stop - start);
        st.selectors[u].zero_grad();
        st.main_refiners[u].zero_grad();
        st.resi_refiners[u].zero_grad();
        for (std::size_t i = start; i < stop; ++i) {
          const UnlabeledTuple& t = *pool[i];
          // Selector against the frozen teacher.
          const RVec p_teacher = teacher_probs(st.teacher, t.ls_input_i);
          const Tensor p_pred = st.selectors[u].forward(Tensor::row(t.ls_input_i), true);
          const RVec p_hat = p_pred.to_rvec();
          ep_c += (p_teacher - p_hat).squaredNorm();
          if (st.cfg.lambda1 > 0.0) {
            RVec gc = 2.0 * (p_hat - p_teacher) * st.cfg.lambda1 * inv_batch;
            st.selectors[u].backward(Tensor::row(gc));
          }
          // Refiners against the online loss.
          const Tensor ri = st.main_refiners[u].forward(Tensor::row(t.ls_input_i), true);
          const Tensor rr = st.resi_refiners[u].forward(Tensor::row(t.ls_input_r), true);
          const CVec h_hat = eta_inv(ri.to_rvec()) + eta_inv(rr.to_rvec());
          RVec gh;
          ep_h += l1_residual_loss(t.y_o, s_full, h_hat, &gh);
          if (st.cfg.lambda2 > 0.0) {
            const RVec scaled = gh * st.cfg.lambda2 * inv_batch;
            st.main_refiners[u].backward(Tensor::row(scaled));
            st.resi_refiners[u].backward(Tensor::row(scaled));
          }
          ++count;
        }
        st.selectors[u].adam_step(lr);
        st.main_refiners[u].adam_step(lr);
        st.resi_refiners[u].adam_step(lr);
      }
    }
    hist.loss_c.push_back(ep_c / static_cast<double>(count));
    hist.loss_h.push_back(ep_h / static_cast<double>(count));
  }
  return hist;
}

/// Fraction of the true top-M2 residual codewords (beamspace magnitudes with
/// I_I zeroed) recovered by the teacher's top-M2, averaged over users and
/// fresh probe draws. The random-selection baseline is M2 / N.
inline double teacher_hit_rate(PcsiState& st, const std::vector<CVec>& h_dl,
                               const channel::Codebook& cb, double noise_var, int trials,
                               std::uint64_t seed) {
  if (!st.teacher_trained) throw StateError("teacher_hit_rate: teacher has not been trained");
  Rng rng = make_rng(seed, 0x417a);
  double acc = 0.0;
  int count = 0;
  for (const auto& h : h_dl) {
    // True residual ranking.
    const CRowVec e = channel::to_beamspace(h, cb);
    RVec mag = e.cwiseAbs().transpose();
    for (int i : st.initial_indices) mag(i) = 0.0;
    std::vector<int> idx(mag.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + st.cfg.m2, idx.end(),
                      [&](int a, int b) { return mag(a) > mag(b); });
    const std::set<int> truth(idx.begin(), idx.begin() + st.cfg.m2);

    for (int t = 0; t < trials; ++t) {
      const CRowVec y = pilots::transmit_downlink(h, st.s_i.s, noise_var, rng);
      RVec p = teacher_probs(st.teacher, eta(ls_column(y, st.s_i)));
      for (int i : st.initial_indices) p(i) = 0.0;
      std::vector<int> pidx(p.size());
      std::iota(pidx.begin(), pidx.end(), 0);
      std::partial_sort(pidx.begin(), pidx.begin() + st.cfg.m2, pidx.end(),
                        [&](int a, int b) { return p(a) > p(b); });
      int hits = 0;
      for (int i = 0; i < st.cfg.m2; ++i)
        if (truth.count(pidx[i])) ++hits;
      acc += static_cast<double>(hits) / st.cfg.m2;
      ++count;
    }
  }
  return acc / count;
}

/// NMSE of one synthesized pseudo label against the true channel.
inline double pseudo_label_nmse(const CVec& h, const pilots::PilotMatrix& s_i,
                                const pilots::PilotMatrix& s_r, Network& main_refiner,
                                Network& resi_refiner, double noise_var, Rng& rng) {
  const CRowVec y_i = pilots::transmit_downlink(h, s_i.s, noise_var, rng);
  const CRowVec y_r = pilots::transmit_downlink(h, s_r.s, noise_var, rng);
  const PseudoLabel label = synthesize_pseudo_csi(y_i, y_r, s_i, s_r, main_refiner, resi_refiner);
  return (label.h - h).squaredNorm() / h.squaredNorm();
}

// ---------------------------------------------------------------------------
// Lemma 1 verifier: Monte Carlo over noise for the closed-form minimizer
// h* = y S^+ of the online loss.

struct Lemma1Report {
  double alpha = 0.0;
  double bound = 0.0;          // N M alpha^2 sigma^2 / P
  double violation_rate = 0.0;
  double mean_error = 0.0;
  double predicted_mean = 0.0; // sigma^2 M / P
  double prob_bound = 0.0;     // exp(-(N/2)(alpha-1)^2)
  int trials = 0;
};

inline Lemma1Report verify_lemma1(int n, int m, double power, double noise_var, double alpha,
                                  int trials, std::uint64_t seed) {
  if (alpha <= 1.0) throw ParameterError("verify_lemma1: alpha must exceed 1");
  if (m < 1 || m > n) throw ParameterError("verify_lemma1: need 1 <= M <= N");
  const channel::Codebook cb = channel::dft_codebook(n);
  std::vector<int> indices(m);
  for (int i = 0; i < m; ++i) indices[i] = i * n / m;  // distinct, spread out
  const pilots::PilotMatrix s = pilots::build_pilot_matrix(indices, cb, power);

  Rng rng = make_rng(seed, 0x1e44a);
  const CVec coeffs = crandn_vec(rng, m);
  const CVec h = s.s * coeffs;  // channel within the probed subspace

  Lemma1Report rep;
  rep.alpha = alpha;
  rep.trials = trials;
  rep.bound = static_cast<double>(n) * m * alpha * alpha * noise_var / power;
  rep.predicted_mean = noise_var * m / power;
  rep.prob_bound = std::exp(-0.5 * n * (alpha - 1.0) * (alpha - 1.0));

  int violations = 0;
  double err_acc = 0.0;
  const CRowVec clean = h.adjoint() * s.s;
  for (int t = 0; t < trials; ++t) {
    CRowVec y = clean;
    if (noise_var > 0.0) y += crandn_row(rng, m, noise_var);
    const CRowVec est = pilots::ls_estimate(y, s);
    const double err = (est - h.adjoint()).squaredNorm();
    err_acc += err;
    // Absolute floor keeps LS roundoff from registering against a zero bound.
    if (err > rep.bound + 1e-24 * h.squaredNorm()) ++violations;
  }
  rep.violation_rate = static_cast<double>(violations) / trials;
  rep.mean_error = err_acc / trials;
  return rep;
}

// ---------------------------------------------------------------------------
// Algorithm-2 orchestration: phases A-E.

struct OnlineUpdateResult {
  PcsiState state;
  TeacherHistory teacher_history;
  PcsiHistory pcsi_history;
  std::vector<vfl::EpochStats> update_history;  // loss vs pseudo labels
  std::vector<double> true_sum_rate;            // reporting-only evaluation
  CMat h_pseudo;                                 // labels used in phase E
};

struct OnlineSystem {
  const scene::Scene* scn = nullptr;
  scene::SceneConfig scene_cfg;
  channel::ChannelParams chan;
  vfl::TrainingConfig train;
  vfl::LocalModelConfig model;
  int dataset_size = 32;
};

inline OnlineUpdateResult online_update(const OnlineSystem& sys, std::vector<vfl::LocalModel>& models,
                                        const PcsiConfig& cfg, int t_up, std::uint64_t seed,
                                        vfl::MessageLedger* ledger = nullptr) {
  const scene::Scene& s = *sys.scn;
  const int k = static_cast<int>(s.vehicles.size());
  if (static_cast<int>(models.size()) != k)
    throw ParameterError("online_update: one model per vehicle required");
  const int n = sys.chan.n();
  if (k * (cfg.m1 + cfg.m2) > n)
    throw ParameterError("online_update: K (M1 + M2) must not exceed N");
  const channel::Codebook cb = channel::dft_codebook(n);

  std::vector<CVec> h_dl(k), h_ul_est(k);
  CMat h_true(n, k);
  Rng rng = make_rng(seed, 0x0b11);
  for (int u = 0; u < k; ++u) {
    const auto cr = channel::synthesize_channel(s, u, sys.chan, mix_seed(seed, u));
    h_dl[u] = cr.h_dl;
    h_true.col(u) = cr.h_dl;
    h_ul_est[u] = cr.h_ul + crandn_vec(rng, n, cfg.ul_est_noise_var);
  }

  OnlineUpdateResult res;
  PcsiState& st = res.state;
  st.n = n;
  st.cfg = cfg;

  // Phase A: initial codewords from partial reciprocity, then the labeled set.
  st.initial_indices = select_initial_codewords(h_ul_est, cb, cfg.m1);
  st.s_i = pilots::build_pilot_matrix(st.initial_indices, cb, sys.train.power);
  build_d1(st, h_dl, cb, sys.train.noise_var, mix_seed(seed, 0xa), ledger);

  // Phase B: teacher.
  Rng net_rng = make_rng(seed, 0x4e7);
  st.teacher = make_codeword_net(n, net_rng);
  res.teacher_history = teacher_train(st, mix_seed(seed, 0xb));

  // Phase C: residual codewords from the teacher, then the unlabeled set.
  {
    std::vector<RVec> probs;
    Rng prng = make_rng(seed, 0xc);
    for (int u = 0; u < k; ++u) {
      const CRowVec y = pilots::transmit_downlink(h_dl[u], st.s_i.s, sys.train.noise_var, prng);
      probs.push_back(teacher_probs(st.teacher, eta(ls_column(y, st.s_i))));
    }
    st.residual_indices = select_residual_codewords(probs, st.initial_indices, cfg.m2).indices;
    st.s_r = pilots::build_pilot_matrix(st.residual_indices, cb, sys.train.power);
  }
  build_d2(st, h_dl, sys.train.noise_var, mix_seed(seed, 0xd), ledger);

  // Phase D: simulator training.
  for (int u = 0; u < k; ++u) {
    st.selectors.push_back(make_codeword_net(n, net_rng));
    st.main_refiners.push_back(make_refiner(n, net_rng));
    st.resi_refiners.push_back(make_refiner(n, net_rng));
  }
  res.pcsi_history = pcsi_train(st, mix_seed(seed, 0xe));

  // Phase E: federated fine-tuning against the synthesized pseudo labels.
  res.h_pseudo.resize(n, k);
  {
    Rng prng = make_rng(seed, 0xf);
    for (int u = 0; u < k; ++u) {
      const CRowVec y_i = pilots::transmit_downlink(h_dl[u], st.s_i.s, sys.train.noise_var, prng);
      const CRowVec y_r = pilots::transmit_downlink(h_dl[u], st.s_r.s, sys.train.noise_var, prng);
      res.h_pseudo.col(u) = synthesize_pseudo_csi(y_i, y_r, st.s_i, st.s_r, st.main_refiners[u],
                                                  st.resi_refiners[u])
                                .h;
    }
  }
  // Pilot matrix for the fine-tuning phase: the probed codewords. Received
  // rows are zero-padded to the models' architectural pilot length when
  // inter-user overlap collapsed the union below K (M1 + M2).
  std::vector<int> union_indices = st.initial_indices;
  union_indices.insert(union_indices.end(), st.residual_indices.begin(),
                       st.residual_indices.end());
  std::sort(union_indices.begin(), union_indices.end());
  const pilots::PilotMatrix pilot =
      pilots::build_pilot_matrix(union_indices, cb, sys.train.power);
  vfl::TrainingConfig tcfg = sys.train;
  vfl::Dataset ds = vfl::build_dataset(s, h_dl, pilot, tcfg.noise_var, sys.dataset_size,
                                       mix_seed(seed, 0xe5), sys.scene_cfg, sys.model.bev);
  const int lp = sys.model.pilot_len;
  if (static_cast<int>(union_indices.size()) > lp)
    throw ParameterError("online_update: probed codewords exceed the model pilot length");
  for (auto& sample : ds.samples)
    for (auto& y : sample.y) {
      CRowVec padded = CRowVec::Zero(lp);
      padded.head(y.size()) = y;
      y = padded;
    }
  res.update_history =
      vfl::run_training_epochs(models, ds, res.h_pseudo, tcfg, t_up, mix_seed(seed, 0xf7), ledger,
                               /*used_true_csi=*/false, /*report_h=*/&h_true);
  for (const auto& st_epoch : res.update_history) res.true_sum_rate.push_back(st_epoch.report_sum_rate);
  return res;
}

}  // namespace hmvmm::pcsi
