#pragma once

#include "hmvmm/common.hpp"

namespace hmvmm::precode {

struct PrecodingMatrix {
  CMat v;                   // N x K
  double power_budget = 0;  // P
  bool converged = true;
  int iterations = 0;
  std::vector<double> trajectory;  // sum rate after each iteration (WMMSE)
};

struct RateReport {
  RVec per_user;
  double total = 0.0;
};

/// Per-user achievable rate
/// R_k = log2(1 + |h_k^H v_k|^2 / (sum_{i!=k} |h_k^H v_i|^2 + sigma^2)).
inline RateReport sum_rate(const CMat& h, const CMat& v, double noise_var) {
  if (h.rows() != v.rows() || h.cols() != v.cols())
    throw ParameterError("sum_rate: dimension mismatch");
  if (noise_var <= 0.0) throw ParameterError("sum_rate: noise variance must be positive");
  const Eigen::Index k = h.cols();
  RateReport r;
  r.per_user.resize(k);
  const CMat cross = h.adjoint() * v;  // (k, i) entry = h_k^H v_i
  for (Eigen::Index uk = 0; uk < k; ++uk) {
    double interference = noise_var;
    for (Eigen::Index i = 0; i < k; ++i)
      if (i != uk) interference += std::norm(cross(uk, i));
    r.per_user(uk) = std::log2(1.0 + std::norm(cross(uk, uk)) / interference);
  }
  r.total = r.per_user.sum();
  return r;
}

/// Zero-forcing directions from the pseudo-inverse of H^H with equal per-user
/// power: v_k = sqrt(P/K) * w_k / ||w_k||, W = H (H^H H)^{-1}.
inline PrecodingMatrix zf_precoder(const CMat& h, double power) {
  const Eigen::Index n = h.rows(), k = h.cols();
  if (k > n) throw ParameterError("zf_precoder: K must not exceed N");
  if (power <= 0.0) throw ParameterError("zf_precoder: power must be positive");
  const CMat gram = h.adjoint() * h;
  Eigen::FullPivLU<CMat> lu(gram);
  if (!lu.isInvertible()) {
    // Name the most coherent user pair in the diagnostic.
    Eigen::Index bi = 0, bj = 1;
    double best = -1.0;
    for (Eigen::Index i = 0; i < k; ++i)
      for (Eigen::Index j = i + 1; j < k; ++j) {
        const double den = std::sqrt(std::abs(gram(i, i)) * std::abs(gram(j, j)));
        const double c = den > 0.0 ? std::abs(gram(i, j)) / den : 1.0;
        if (c > best) { best = c; bi = i; bj = j; }
      }
    throw NumericalError("zf_precoder: rank-deficient channel set; users " + std::to_string(bi) +
                         " and " + std::to_string(bj) + " are (near-)collinear");
  }
  const CMat w = h * lu.inverse();
  PrecodingMatrix pm;
  pm.power_budget = power;
  pm.v.resize(n, k);
  const double per_user = std::sqrt(power / static_cast<double>(k));
  for (Eigen::Index i = 0; i < k; ++i) pm.v.col(i) = per_user * w.col(i) / w.col(i).norm();
  return pm;
}

namespace detail {

/// Matched-filter precoder; also the ZF fallback under rank deficiency.
inline CMat matched_filter(const CMat& h, double power) {
  CMat v = h;
  const double per_user = std::sqrt(power / static_cast<double>(h.cols()));
  for (Eigen::Index i = 0; i < h.cols(); ++i) v.col(i) *= per_user / v.col(i).norm();
  return v;
}

}  // namespace detail

/// Weighted-MMSE block-coordinate iteration with bisection on the power
/// multiplier. Initialized from ZF (matched filters under rank deficiency);
/// stops when the sum-rate improvement falls below `tol`. Returns the best
/// iterate seen, flagged non-converged when max_iters is exhausted first.
inline PrecodingMatrix wmmse_precoder(const CMat& h, double power, double noise_var,
                                      int max_iters = 200, double tol = 1e-5) {
  const Eigen::Index n = h.rows(), k = h.cols();
  if (k < 1) throw ParameterError("wmmse_precoder: K must be >= 1");
  if (power <= 0.0 || noise_var <= 0.0)
    throw ParameterError("wmmse_precoder: power and noise variance must be positive");

  CMat v;
  try {
    v = zf_precoder(h, power).v;
  } catch (const NumericalError&) {
    v = detail::matched_filter(h, power);
  }

  PrecodingMatrix best;
  best.power_budget = power;
  best.v = v;
  double best_rate = sum_rate(h, v, noise_var).total;
  double prev_rate = best_rate;
  best.converged = false;

  for (int it = 0; it < max_iters; ++it) {
    // Receiver scalars and MSE weights.
    const CMat cross = h.adjoint() * v;
    CVec u(k);
    RVec w(k);
    for (Eigen::Index i = 0; i < k; ++i) {
      double denom = noise_var;
      for (Eigen::Index j = 0; j < k; ++j) denom += std::norm(cross(i, j));
      u(i) = cross(i, i) / denom;
      const double mse = 1.0 - std::real(std::conj(u(i)) * cross(i, i));
      w(i) = 1.0 / std::max(mse, 1e-12);
    }

    // Precoder step: v_k = (A + mu I)^{-1} h_k u_k w_k with A eigendecomposed
    // once so that the transmit power is a cheap function of mu.
    CMat a = CMat::Zero(n, n);
    for (Eigen::Index i = 0; i < k; ++i)
      a += (w(i) * std::norm(u(i))) * (h.col(i) * h.col(i).adjoint());
    Eigen::SelfAdjointEigenSolver<CMat> eig(a);
    const RVec lam = eig.eigenvalues().cwiseMax(0.0);
    CMat b(n, k);  // rotated right-hand sides
    for (Eigen::Index i = 0; i < k; ++i)
      b.col(i) = eig.eigenvectors().adjoint() * (h.col(i) * (u(i) * w(i)));
    auto power_at = [&](double mu) {
      double total = 0.0;
      for (Eigen::Index i = 0; i < k; ++i)
        for (Eigen::Index r = 0; r < n; ++r)
          total += std::norm(b(r, i)) / ((lam(r) + mu) * (lam(r) + mu));
      return total;
    };
    auto v_at = [&](double mu) {
      CMat out(n, k);
      for (Eigen::Index i = 0; i < k; ++i) {
        CVec scaled = b.col(i);
        for (Eigen::Index r = 0; r < n; ++r) scaled(r) /= lam(r) + mu;
        out.col(i) = eig.eigenvectors() * scaled;
      }
      return out;
    };

    const double mu_floor = 1e-12 * std::max(1.0, lam.maxCoeff());
    if (power_at(mu_floor) <= power) {
      v = v_at(mu_floor);  // constraint inactive
    } else {
      double lo = mu_floor, hi = std::max(1.0, mu_floor);
      while (power_at(hi) > power) hi *= 2.0;
      for (int bs = 0; bs < 200; ++bs) {
        const double mid = 0.5 * (lo + hi);
        if (power_at(mid) > power) lo = mid; else hi = mid;
        if (std::abs(power_at(hi) - power) <= 1e-8 * std::max(1.0, power)) break;
      }
      v = v_at(hi);
    }

    const double rate = sum_rate(h, v, noise_var).total;
    best.trajectory.push_back(rate);
    if (rate > best_rate) {
      best_rate = rate;
      best.v = v;
    }
    best.iterations = it + 1;
    if (std::abs(rate - prev_rate) < tol) {
      best.converged = true;
      break;
    }
    prev_rate = rate;
  }
  return best;
}

}  // namespace hmvmm::precode
