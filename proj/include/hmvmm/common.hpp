#pragma once

#include <Eigen/Dense>
#include <complex>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace hmvmm {

using cxd = std::complex<double>;
using CVec = Eigen::VectorXcd;
using CRowVec = Eigen::RowVectorXcd;
using CMat = Eigen::MatrixXcd;
using RVec = Eigen::VectorXd;
using RMat = Eigen::MatrixXd;
using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;

using Rng = std::mt19937_64;

/// Thrown when an operation is invoked on inconsistent or unvalidated inputs.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a numerical procedure cannot proceed (rank deficiency, divergence).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when an operation is called out of order (e.g. backward before forward).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline constexpr double kPi = 3.14159265358979323846;

// splitmix64; used to derive independent seeds from (master seed, salt) so that
// parallel sweep points and per-stage RNG streams never alias.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t salt = 0) {
  return Rng(mix_seed(seed, salt));
}

/// One draw of circularly-symmetric complex Gaussian CN(0, var).
inline cxd crandn(Rng& rng, double var = 1.0) {
  std::normal_distribution<double> n(0.0, std::sqrt(var / 2.0));
  return {n(rng), n(rng)};
}

inline CRowVec crandn_row(Rng& rng, Eigen::Index n, double var = 1.0) {
  CRowVec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = crandn(rng, var);
  return v;
}

inline CVec crandn_vec(Rng& rng, Eigen::Index n, double var = 1.0) {
  CVec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = crandn(rng, var);
  return v;
}

/// Isomorphism between C^N and R^(2N): a ↦ [Re(a); Im(a)].
inline RVec eta(const CVec& a) {
  RVec r(2 * a.size());
  r.head(a.size()) = a.real();
  r.tail(a.size()) = a.imag();
  return r;
}

inline CVec eta_inv(const RVec& r) {
  if (r.size() % 2 != 0) throw ParameterError("eta_inv: odd-length input");
  const Eigen::Index n = r.size() / 2;
  CVec a(n);
  a.real() = r.head(n);
  a.imag() = r.tail(n);
  return a;
}

/// In-memory bit sequence; one 0/1 value per element.
using Bits = std::vector<std::uint8_t>;

/// Pack bits MSB-first into bytes (final byte zero-padded).
inline std::vector<std::uint8_t> pack_bits(const Bits& bits) {
  std::vector<std::uint8_t> out((bits.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < bits.size(); ++i)
    if (bits[i]) out[i / 8] |= static_cast<std::uint8_t>(0x80u >> (i % 8));
  return out;
}

inline Bits unpack_bits(const std::vector<std::uint8_t>& bytes, std::size_t nbits) {
  if (nbits > bytes.size() * 8) throw ParameterError("unpack_bits: not enough bytes");
  Bits bits(nbits);
  for (std::size_t i = 0; i < nbits; ++i)
    bits[i] = (bytes[i / 8] >> (7 - i % 8)) & 1u;
  return bits;
}

inline double snr_db_to_noise_var(double snr_db, double power) {
  return power / std::pow(10.0, snr_db / 10.0);
}

inline double noise_var_to_snr_db(double noise_var, double power) {
  return 10.0 * std::log10(power / noise_var);
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ParameterError("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace hmvmm
