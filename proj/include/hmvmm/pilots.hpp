#pragma once

#include <set>

#include "hmvmm/channel.hpp"
#include "hmvmm/common.hpp"

namespace hmvmm::pilots {

/// Column-orthogonal pilot matrix built from codebook columns, S^H S = P I_M.
struct PilotMatrix {
  CMat s;                          // N x M
  std::vector<int> source_indices; // codebook column of each pilot, in order
  double power = 1.0;              // per-codeword transmit power P
};

/// Selects codebook columns and rescales each to squared norm P. Codebook
/// columns have norm 1/sqrt(N), so the scale factor is sqrt(P N).
inline PilotMatrix build_pilot_matrix(const std::vector<int>& indices,
                                      const channel::Codebook& cb, double power) {
  if (power <= 0.0) throw ParameterError("pilot power must be positive");
  std::set<int> seen;
  for (int i : indices) {
    if (i < 0 || i >= cb.n) throw ParameterError("pilot index out of codebook range");
    if (!seen.insert(i).second) throw ParameterError("duplicate pilot index");
  }
  PilotMatrix pm;
  pm.power = power;
  pm.source_indices = indices;
  pm.s.resize(cb.n, static_cast<Eigen::Index>(indices.size()));
  const double scale = std::sqrt(power * cb.n);
  for (std::size_t m = 0; m < indices.size(); ++m) pm.s.col(m) = scale * cb.f.col(indices[m]);
  return pm;
}

/// Received DL training signal y = h^H S + n with per-entry complex noise
/// variance sigma^2.
inline CRowVec transmit_downlink(const CVec& h, const CMat& s, double noise_var, Rng& rng) {
  if (h.size() != s.rows()) throw ParameterError("transmit_downlink: dimension mismatch");
  if (noise_var < 0.0) throw ParameterError("noise variance must be >= 0");
  CRowVec y = h.adjoint() * s;
  if (noise_var > 0.0) y += crandn_row(rng, s.cols(), noise_var);
  return y;
}

/// LS estimate y (S^H S)^{-1} S^H, a row vector estimating h^H. Uses the
/// (1/P) y S^H shortcut when the Gram matrix passes the orthogonality test.
inline CRowVec ls_estimate(const CRowVec& y, const PilotMatrix& pm) {
  if (y.size() != pm.s.cols()) throw ParameterError("ls_estimate: dimension mismatch");
  const Eigen::Index m = pm.s.cols();
  const CMat gram = pm.s.adjoint() * pm.s;
  double max_offdiag = 0.0;
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j)
      if (i != j) max_offdiag = std::max(max_offdiag, std::abs(gram(i, j)));
  if (max_offdiag < 1e-9 * pm.power) return (y * pm.s.adjoint()) / pm.power;
  Eigen::FullPivLU<CMat> lu(gram);
  if (!lu.isInvertible()) throw NumericalError("ls_estimate: rank-deficient pilot matrix");
  return y * lu.solve(pm.s.adjoint()).eval();
}

/// B-bit uniform mid-rise quantizer applied to real and imaginary components.
struct QuantizerConfig {
  int bits_per_component = 2;  // B
  double clip_magnitude = 1.0;

  QuantizerConfig(int b, double clip) : bits_per_component(b), clip_magnitude(clip) {
    if (b < 1) throw ParameterError("quantizer needs B >= 1");
    if (clip <= 0.0) throw ParameterError("quantizer clip must be positive");
  }

  int levels() const { return 1 << bits_per_component; }
  double step() const { return 2.0 * clip_magnitude / levels(); }
};

/// Clip heuristic: 3x the RMS real-component magnitude of a vector with
/// squared norm `col_power` spread over 2n real components.
inline double recommended_clip(double col_power, int n) {
  return 3.0 * std::sqrt(col_power / (2.0 * n));
}

namespace detail {

inline int quantize_component(double x, const QuantizerConfig& q) {
  const int idx = static_cast<int>(std::floor((x + q.clip_magnitude) / q.step()));
  return std::clamp(idx, 0, q.levels() - 1);
}

inline double dequantize_component(int idx, const QuantizerConfig& q) {
  return -q.clip_magnitude + (idx + 0.5) * q.step();
}

inline void append_index_bits(Bits& bits, int idx, int b) {
  for (int i = b - 1; i >= 0; --i) bits.push_back(static_cast<std::uint8_t>((idx >> i) & 1));
}

inline int read_index_bits(const Bits& bits, std::size_t offset, int b) {
  int idx = 0;
  for (int i = 0; i < b; ++i) idx = (idx << 1) | bits[offset + i];
  return idx;
}

}  // namespace detail

/// Feedback encoding F(v): Q = 2 N B bits, antenna-major, real component
/// before imaginary, each index MSB-first. Out-of-range values saturate.
inline Bits quantize_feedback(const CVec& v, const QuantizerConfig& q) {
  Bits bits;
  bits.reserve(2 * v.size() * q.bits_per_component);
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    detail::append_index_bits(bits, detail::quantize_component(v(i).real(), q),
                              q.bits_per_component);
    detail::append_index_bits(bits, detail::quantize_component(v(i).imag(), q),
                              q.bits_per_component);
  }
  return bits;
}

/// Decoder D(b): mid-rise reconstruction levels.
inline CVec dequantize_feedback(const Bits& bits, const QuantizerConfig& q) {
  const int b = q.bits_per_component;
  if (bits.size() % (2 * b) != 0)
    throw ParameterError("dequantize_feedback: bit count must be a multiple of 2B");
  const Eigen::Index n = static_cast<Eigen::Index>(bits.size() / (2 * b));
  CVec v(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double re = detail::dequantize_component(detail::read_index_bits(bits, 2 * i * b, b), q);
    const double im =
        detail::dequantize_component(detail::read_index_bits(bits, (2 * i + 1) * b, b), q);
    v(i) = cxd(re, im);
  }
  return v;
}

}  // namespace hmvmm::pilots
