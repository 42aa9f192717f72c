#include <catch2/catch_amalgamated.hpp>

#include "hmvmm/precode.hpp"

using namespace hmvmm;
using namespace hmvmm::precode;

namespace {

CMat random_channels(Rng& rng, int n, int k, double scale = 1.0) {
  CMat h(n, k);
  for (int i = 0; i < k; ++i) h.col(i) = scale * crandn_vec(rng, n);
  return h;
}

/// Independent term-by-term evaluation of the per-user rate expression.
double brute_force_rate(const CMat& h, const CMat& v, double noise_var) {
  double total = 0.0;
  for (Eigen::Index k = 0; k < h.cols(); ++k) {
    double signal = 0.0, interference = 0.0;
    for (Eigen::Index i = 0; i < h.cols(); ++i) {
      cxd dot = 0.0;
      for (Eigen::Index r = 0; r < h.rows(); ++r) dot += std::conj(h(r, k)) * v(r, i);
      if (i == k)
        signal = std::norm(dot);
      else
        interference += std::norm(dot);
    }
    total += std::log2(1.0 + signal / (interference + noise_var));
  }
  return total;
}

}  // namespace

TEST_CASE("sum_rate closed forms and oracle") {
  Rng rng = make_rng(2);

  SECTION("single-user matched filter") {
    const int n = 8;
    const double p = 2.0, noise_var = 0.5;
    const CVec h = crandn_vec(rng, n);
    CMat v(n, 1);
    v.col(0) = std::sqrt(p) * h / h.norm();
    const RateReport r = sum_rate(h, v, noise_var);
    CHECK(r.total == Catch::Approx(std::log2(1.0 + p * h.squaredNorm() / noise_var)));
  }
  SECTION("zero precoder gives zero rates") {
    const CMat h = random_channels(rng, 8, 3);
    const RateReport r = sum_rate(h, CMat::Zero(8, 3), 1.0);
    CHECK(r.total == 0.0);
    CHECK(r.per_user.minCoeff() == 0.0);
  }
  SECTION("random K = 3 instance matches the brute-force evaluator") {
    for (int t = 0; t < 20; ++t) {
      const CMat h = random_channels(rng, 6, 3);
      const CMat v = random_channels(rng, 6, 3, 0.6);
      const RateReport r = sum_rate(h, v, 0.8);
      CHECK(r.total == Catch::Approx(brute_force_rate(h, v, 0.8)).margin(1e-12));
      CHECK(r.total == Catch::Approx(r.per_user.sum()));
      CHECK(r.per_user.minCoeff() >= 0.0);
    }
  }
  SECTION("pure-function check under channel scaling") {
    const CMat h = random_channels(rng, 6, 2);
    const CMat v = random_channels(rng, 6, 2);
    const double c = 3.7;
    CHECK(sum_rate(c * h, v, 1.0).total ==
          Catch::Approx(brute_force_rate(c * h, v, 1.0)).margin(1e-12));
  }
  SECTION("invalid inputs rejected") {
    CHECK_THROWS_AS(sum_rate(CMat::Zero(4, 2), CMat::Zero(4, 3), 1.0), ParameterError);
    CHECK_THROWS_AS(sum_rate(CMat::Zero(4, 2), CMat::Zero(4, 2), 0.0), ParameterError);
  }
}

TEST_CASE("zero-forcing precoder") {
  Rng rng = make_rng(5);

  SECTION("interference nulling on random full-rank instances") {
    for (int t = 0; t < 50; ++t) {
      const int k = 2 + t % 3;
      const CMat h = random_channels(rng, 16, k);
      const PrecodingMatrix pm = zf_precoder(h, 1.0);
      for (int uk = 0; uk < k; ++uk)
        for (int i = 0; i < k; ++i) {
          if (i == uk) continue;
          const double leak = std::abs(cxd(h.col(uk).adjoint() * pm.v.col(i))) /
                              (h.col(uk).norm() * pm.v.col(i).norm());
          CHECK(leak < 1e-9);
        }
      CHECK(pm.v.squaredNorm() == Catch::Approx(1.0).margin(1e-9));
    }
  }
  SECTION("K = 1 is collinear with the matched filter") {
    const CVec h = crandn_vec(rng, 8);
    const PrecodingMatrix pm = zf_precoder(h, 2.0);
    const cxd inner = (h / h.norm()).adjoint() * (pm.v.col(0) / pm.v.col(0).norm());
    CHECK(std::abs(inner) == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("orthogonal channels get matched directions and equal power") {
    const int n = 8;
    CMat h = CMat::Zero(n, 2);
    h(0, 0) = cxd(1.3, 0.2);
    h(3, 1) = cxd(0.0, -2.0);
    const double p = 4.0;
    const PrecodingMatrix pm = zf_precoder(h, p);
    for (int i = 0; i < 2; ++i) {
      CHECK(pm.v.col(i).squaredNorm() == Catch::Approx(p / 2).margin(1e-12));
      const cxd inner = (h.col(i) / h.col(i).norm()).adjoint() * (pm.v.col(i) / pm.v.col(i).norm());
      CHECK(std::abs(inner) == Catch::Approx(1.0).margin(1e-12));
    }
  }
  SECTION("rank deficiency names the offending pair") {
    CMat h = random_channels(rng, 8, 3);
    h.col(2) = 2.0 * h.col(0);
    try {
      zf_precoder(h, 1.0);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("users 0 and 2") != std::string::npos);
    }
  }
  SECTION("K > N rejected") {
    CHECK_THROWS_AS(zf_precoder(CMat::Zero(2, 3), 1.0), ParameterError);
  }
}

TEST_CASE("WMMSE precoder") {
  Rng rng = make_rng(8);

  SECTION("single user converges to the matched-filter rate") {
    const int n = 8;
    const double p = 2.0, noise_var = 0.4;
    const CVec h = crandn_vec(rng, n);
    const PrecodingMatrix pm = wmmse_precoder(h, p, noise_var);
    const double mf = std::log2(1.0 + p * h.squaredNorm() / noise_var);
    CHECK(sum_rate(h, pm.v, noise_var).total == Catch::Approx(mf).margin(1e-6));
    CHECK(pm.converged);
  }
  SECTION("objective is monotone non-decreasing over 100 instances") {
    for (int t = 0; t < 100; ++t) {
      const int k = 2 + t % 3;
      const CMat h = random_channels(rng, 8, k);
      const PrecodingMatrix pm = wmmse_precoder(h, 1.0, 0.5, 60);
      REQUIRE_FALSE(pm.trajectory.empty());
      for (std::size_t i = 1; i < pm.trajectory.size(); ++i)
        CHECK(pm.trajectory[i] >= pm.trajectory[i - 1] - 1e-9);
      // Power feasibility at the returned iterate.
      CHECK(pm.v.squaredNorm() <= 1.0 + 1e-9);
      CHECK(pm.v.squaredNorm() >= 1.0 - 1e-6);
    }
  }
  SECTION("WMMSE mean sum rate dominates ZF over 100 instances") {
    double zf_acc = 0.0, wmmse_acc = 0.0;
    for (int t = 0; t < 100; ++t) {
      const CMat h = random_channels(rng, 16, 4);
      zf_acc += sum_rate(h, zf_precoder(h, 1.0).v, 1.0).total;
      wmmse_acc += sum_rate(h, wmmse_precoder(h, 1.0, 1.0).v, 1.0).total;
    }
    CHECK(wmmse_acc / 100 >= zf_acc / 100);
  }
  SECTION("invalid parameters rejected") {
    CHECK_THROWS_AS(wmmse_precoder(CMat::Zero(4, 0), 1.0, 1.0), ParameterError);
    CHECK_THROWS_AS(wmmse_precoder(CMat::Zero(4, 2), -1.0, 1.0), ParameterError);
  }
}
