#pragma once

#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <span>

#include "hmvmm/common.hpp"

namespace hmvmm::nnkit {

/// Dense row-major tensor; the first dimension is the batch.
struct Tensor {
  std::vector<int> dims;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> d) : dims(std::move(d)) {
    data.assign(numel(), 0.0);
  }
  std::size_t numel() const {
    std::size_t n = 1;
    for (int d : dims) n *= static_cast<std::size_t>(d);
    return n;
  }
  int batch() const { return dims.empty() ? 0 : dims[0]; }
  std::size_t per_sample() const { return batch() ? numel() / batch() : 0; }

  static Tensor row(const RVec& v) {
    Tensor t({1, static_cast<int>(v.size())});
    for (Eigen::Index i = 0; i < v.size(); ++i) t.data[i] = v(i);
    return t;
  }
  static Tensor rows(const std::vector<RVec>& vs) {
    if (vs.empty()) throw ParameterError("Tensor::rows: empty batch");
    Tensor t({static_cast<int>(vs.size()), static_cast<int>(vs[0].size())});
    for (std::size_t b = 0; b < vs.size(); ++b) {
      if (vs[b].size() != vs[0].size()) throw ParameterError("Tensor::rows: ragged batch");
      for (Eigen::Index i = 0; i < vs[b].size(); ++i)
        t.data[b * vs[0].size() + i] = vs[b](i);
    }
    return t;
  }
  RVec to_rvec(int b = 0) const {
    RVec v(per_sample());
    for (std::size_t i = 0; i < per_sample(); ++i) v(i) = data[b * per_sample() + i];
    return v;
  }
};

/// One trainable parameter block with its gradient and Adam moments.
struct Param {
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<double> m;
  std::vector<double> v;

  explicit Param(std::size_t n = 0) { resize(n); }
  void resize(std::size_t n) {
    value.assign(n, 0.0);
    grad.assign(n, 0.0);
    m.assign(n, 0.0);
    v.assign(n, 0.0);
  }
  std::size_t size() const { return value.size(); }
};

namespace detail {

inline void write_block(std::ostream& os, const std::vector<int>& dims,
                        const std::vector<double>& data) {
  const auto nd = static_cast<std::uint32_t>(dims.size());
  os.write(reinterpret_cast<const char*>(&nd), sizeof(nd));
  for (int d : dims) {
    const auto u = static_cast<std::uint32_t>(d);
    os.write(reinterpret_cast<const char*>(&u), sizeof(u));
  }
  for (double x : data) {
    const float f = static_cast<float>(x);
    os.write(reinterpret_cast<const char*>(&f), sizeof(f));
  }
}

inline void read_block(std::istream& is, std::vector<double>& data) {
  std::uint32_t nd = 0;
  is.read(reinterpret_cast<char*>(&nd), sizeof(nd));
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < nd; ++i) {
    std::uint32_t d = 0;
    is.read(reinterpret_cast<char*>(&d), sizeof(d));
    n *= d;
  }
  if (!is) throw ParameterError("checkpoint stream truncated");
  if (n != data.size()) throw ParameterError("checkpoint block size mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    float f = 0;
    is.read(reinterpret_cast<char*>(&f), sizeof(f));
    data[i] = f;
  }
  if (!is) throw ParameterError("checkpoint stream truncated");
}

}  // namespace detail

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, bool training) = 0;
  virtual Tensor backward(const Tensor& gout) = 0;
  virtual std::vector<Param*> params() { return {}; }
  virtual const char* kind() const = 0;
  virtual void save(std::ostream& os) const {
    const std::uint32_t zero = 0;
    os.write(reinterpret_cast<const char*>(&zero), sizeof(zero));
  }
  virtual void load(std::istream& is) {
    std::uint32_t nblocks = 0;
    is.read(reinterpret_cast<char*>(&nblocks), sizeof(nblocks));
    if (nblocks != 0) throw ParameterError("checkpoint layer mismatch");
  }
};

class Dense : public Layer {
 public:
  Dense(int in, int out, Rng& rng, bool zero_init = false) : in_(in), out_(out) {
    w_.resize(static_cast<std::size_t>(in) * out);
    b_.resize(out);
    if (!zero_init) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto& x : w_.value) x = u(rng);
      for (auto& x : b_.value) x = u(rng);
    }
  }

  Tensor forward(const Tensor& x, bool) override {
    if (static_cast<int>(x.per_sample()) != in_) throw ParameterError("Dense: input size mismatch");
    x_ = x;
    Tensor y({x.batch(), out_});
    for (int b = 0; b < x.batch(); ++b)
      for (int o = 0; o < out_; ++o) {
        double acc = b_.value[o];
        const double* wr = &w_.value[static_cast<std::size_t>(o) * in_];
        const double* xr = &x.data[static_cast<std::size_t>(b) * in_];
        for (int i = 0; i < in_; ++i) acc += wr[i] * xr[i];
        y.data[static_cast<std::size_t>(b) * out_ + o] = acc;
      }
    return y;
  }

  Tensor backward(const Tensor& gout) override {
    Tensor gin({x_.batch(), in_});
    for (int b = 0; b < x_.batch(); ++b) {
      const double* g = &gout.data[static_cast<std::size_t>(b) * out_];
      const double* xr = &x_.data[static_cast<std::size_t>(b) * in_];
      double* gi = &gin.data[static_cast<std::size_t>(b) * in_];
      for (int o = 0; o < out_; ++o) {
        b_.grad[o] += g[o];
        double* gw = &w_.grad[static_cast<std::size_t>(o) * in_];
        const double* wr = &w_.value[static_cast<std::size_t>(o) * in_];
        for (int i = 0; i < in_; ++i) {
          gw[i] += g[o] * xr[i];
          gi[i] += g[o] * wr[i];
        }
      }
    }
    return gin;
  }

  std::vector<Param*> params() override { return {&w_, &b_}; }
  const char* kind() const override { return "dense"; }
  void save(std::ostream& os) const override {
    const std::uint32_t nblocks = 2;
    os.write(reinterpret_cast<const char*>(&nblocks), sizeof(nblocks));
    detail::write_block(os, {out_, in_}, w_.value);
    detail::write_block(os, {out_}, b_.value);
  }
  void load(std::istream& is) override {
    std::uint32_t nblocks = 0;
    is.read(reinterpret_cast<char*>(&nblocks), sizeof(nblocks));
    if (nblocks != 2) throw ParameterError("checkpoint layer mismatch (dense)");
    detail::read_block(is, w_.value);
    detail::read_block(is, b_.value);
  }

 private:
  int in_, out_;
  Param w_, b_;
  Tensor x_;
};

class ReLU : public Layer {
 public:
  Tensor forward(const Tensor& x, bool) override {
    y_ = x;
    for (auto& v : y_.data) v = std::max(v, 0.0);
    return y_;
  }
  Tensor backward(const Tensor& gout) override {
    Tensor gin = gout;
    for (std::size_t i = 0; i < gin.data.size(); ++i)
      if (y_.data[i] <= 0.0) gin.data[i] = 0.0;
    return gin;
  }
  const char* kind() const override { return "relu"; }

 private:
  Tensor y_;
};

class Sigmoid : public Layer {
 public:
  Tensor forward(const Tensor& x, bool) override {
    y_ = x;
    for (auto& v : y_.data) v = 1.0 / (1.0 + std::exp(-v));
    return y_;
  }
  Tensor backward(const Tensor& gout) override {
    Tensor gin = gout;
    for (std::size_t i = 0; i < gin.data.size(); ++i)
      gin.data[i] *= y_.data[i] * (1.0 - y_.data[i]);
    return gin;
  }
  const char* kind() const override { return "sigmoid"; }

 private:
  Tensor y_;
};

/// Batch normalization over the batch dimension with running statistics
/// (momentum 0.1); inference mode normalizes by the running estimates.
class BatchNorm : public Layer {
 public:
  explicit BatchNorm(int features, double momentum = 0.1, double eps = 1e-5)
      : features_(features), momentum_(momentum), eps_(eps) {
    gamma_.resize(features);
    beta_.resize(features);
    std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0);
    running_mean_.assign(features, 0.0);
    running_var_.assign(features, 1.0);
  }

  Tensor forward(const Tensor& x, bool training) override {
    if (static_cast<int>(x.per_sample()) != features_)
      throw ParameterError("BatchNorm: feature size mismatch");
    const int bsz = x.batch();
    x_ = x;
    xhat_ = Tensor(x.dims);
    inv_std_.assign(features_, 0.0);
    Tensor y(x.dims);
    for (int j = 0; j < features_; ++j) {
      double mean, var;
      if (training) {
        mean = 0.0;
        for (int b = 0; b < bsz; ++b) mean += x.data[static_cast<std::size_t>(b) * features_ + j];
        mean /= bsz;
        var = 0.0;
        for (int b = 0; b < bsz; ++b) {
          const double d = x.data[static_cast<std::size_t>(b) * features_ + j] - mean;
          var += d * d;
        }
        var /= bsz;
        running_mean_[j] = (1.0 - momentum_) * running_mean_[j] + momentum_ * mean;
        const double unbiased = bsz > 1 ? var * bsz / (bsz - 1.0) : var;
        running_var_[j] = (1.0 - momentum_) * running_var_[j] + momentum_ * unbiased;
      } else {
        mean = running_mean_[j];
        var = running_var_[j];
      }
      const double inv = 1.0 / std::sqrt(var + eps_);
      inv_std_[j] = inv;
      mean_cache_ = training;
      for (int b = 0; b < bsz; ++b) {
        const std::size_t idx = static_cast<std::size_t>(b) * features_ + j;
        xhat_.data[idx] = (x.data[idx] - mean) * inv;
        y.data[idx] = gamma_.value[j] * xhat_.data[idx] + beta_.value[j];
      }
    }
    return y;
  }

  Tensor backward(const Tensor& gout) override {
    const int bsz = x_.batch();
    Tensor gin(x_.dims);
    for (int j = 0; j < features_; ++j) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (int b = 0; b < bsz; ++b) {
        const std::size_t idx = static_cast<std::size_t>(b) * features_ + j;
        const double gh = gout.data[idx] * gamma_.value[j];
        sum_g += gh;
        sum_gx += gh * xhat_.data[idx];
        gamma_.grad[j] += gout.data[idx] * xhat_.data[idx];
        beta_.grad[j] += gout.data[idx];
      }
      for (int b = 0; b < bsz; ++b) {
        const std::size_t idx = static_cast<std::size_t>(b) * features_ + j;
        const double gh = gout.data[idx] * gamma_.value[j];
        if (mean_cache_) {
          gin.data[idx] = inv_std_[j] * (gh - sum_g / bsz - xhat_.data[idx] * sum_gx / bsz);
        } else {
          gin.data[idx] = inv_std_[j] * gh;  // running stats are constants
        }
      }
    }
    return gin;
  }

  std::vector<Param*> params() override { return {&gamma_, &beta_}; }
  const char* kind() const override { return "batchnorm"; }
  void save(std::ostream& os) const override {
    const std::uint32_t nblocks = 4;
    os.write(reinterpret_cast<const char*>(&nblocks), sizeof(nblocks));
    detail::write_block(os, {features_}, gamma_.value);
    detail::write_block(os, {features_}, beta_.value);
    detail::write_block(os, {features_}, running_mean_);
    detail::write_block(os, {features_}, running_var_);
  }
  void load(std::istream& is) override {
    std::uint32_t nblocks = 0;
    is.read(reinterpret_cast<char*>(&nblocks), sizeof(nblocks));
    if (nblocks != 4) throw ParameterError("checkpoint layer mismatch (batchnorm)");
    detail::read_block(is, gamma_.value);
    detail::read_block(is, beta_.value);
    detail::read_block(is, running_mean_);
    detail::read_block(is, running_var_);
  }

 private:
  int features_;
  double momentum_, eps_;
  Param gamma_, beta_;
  std::vector<double> running_mean_, running_var_;
  Tensor x_, xhat_;
  std::vector<double> inv_std_;
  bool mean_cache_ = true;
};

/// Valid (unpadded) 2-D convolution, input [B, C, H, W].
class Conv2d : public Layer {
 public:
  Conv2d(int in_ch, int out_ch, int kernel, int stride, Rng& rng)
      : ic_(in_ch), oc_(out_ch), k_(kernel), s_(stride) {
    w_.resize(static_cast<std::size_t>(oc_) * ic_ * k_ * k_);
    b_.resize(oc_);
    const double bound = 1.0 / std::sqrt(static_cast<double>(ic_) * k_ * k_);
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& x : w_.value) x = u(rng);
    for (auto& x : b_.value) x = u(rng);
  }

  Tensor forward(const Tensor& x, bool) override {
    if (x.dims.size() != 4 || x.dims[1] != ic_)
      throw ParameterError("Conv2d: expected [B, C, H, W] input");
    x_ = x;
    const int h = x.dims[2], w = x.dims[3];
    ho_ = (h - k_) / s_ + 1;
    wo_ = (w - k_) / s_ + 1;
    if (ho_ < 1 || wo_ < 1) throw ParameterError("Conv2d: input smaller than kernel");
    Tensor y({x.batch(), oc_, ho_, wo_});
    for (int b = 0; b < x.batch(); ++b)
      for (int o = 0; o < oc_; ++o)
        for (int i = 0; i < ho_; ++i)
          for (int j = 0; j < wo_; ++j) {
            double acc = b_.value[o];
            for (int c = 0; c < ic_; ++c)
              for (int ki = 0; ki < k_; ++ki)
                for (int kj = 0; kj < k_; ++kj)
                  acc += wv(o, c, ki, kj) * xv(x, b, c, i * s_ + ki, j * s_ + kj);
            y.data[((static_cast<std::size_t>(b) * oc_ + o) * ho_ + i) * wo_ + j] = acc;
          }
    return y;
  }

  Tensor backward(const Tensor& gout) override {
    Tensor gin(x_.dims);
    for (int b = 0; b < x_.batch(); ++b)
      for (int o = 0; o < oc_; ++o)
        for (int i = 0; i < ho_; ++i)
          for (int j = 0; j < wo_; ++j) {
            const double g =
                gout.data[((static_cast<std::size_t>(b) * oc_ + o) * ho_ + i) * wo_ + j];
            b_.grad[o] += g;
            for (int c = 0; c < ic_; ++c)
              for (int ki = 0; ki < k_; ++ki)
                for (int kj = 0; kj < k_; ++kj) {
                  gw(o, c, ki, kj) += g * xv(x_, b, c, i * s_ + ki, j * s_ + kj);
                  gx(gin, b, c, i * s_ + ki, j * s_ + kj) += g * wv(o, c, ki, kj);
                }
          }
    return gin;
  }

  std::vector<Param*> params() override { return {&w_, &b_}; }
  const char* kind() const override { return "conv2d"; }
  void save(std::ostream& os) const override {
    const std::uint32_t nblocks = 2;
    os.write(reinterpret_cast<const char*>(&nblocks), sizeof(nblocks));
    detail::write_block(os, {oc_, ic_, k_, k_}, w_.value);
    detail::write_block(os, {oc_}, b_.value);
  }
  void load(std::istream& is) override {
    std::uint32_t nblocks = 0;
    is.read(reinterpret_cast<char*>(&nblocks), sizeof(nblocks));
    if (nblocks != 2) throw ParameterError("checkpoint layer mismatch (conv2d)");
    detail::read_block(is, w_.value);
    detail::read_block(is, b_.value);
  }

 private:
  double& wv(int o, int c, int ki, int kj) {
    return w_.value[((static_cast<std::size_t>(o) * ic_ + c) * k_ + ki) * k_ + kj];
  }
  double& gw(int o, int c, int ki, int kj) {
    return w_.grad[((static_cast<std::size_t>(o) * ic_ + c) * k_ + ki) * k_ + kj];
  }
  static double xv(const Tensor& t, int b, int c, int i, int j) {
    return t.data[((static_cast<std::size_t>(b) * t.dims[1] + c) * t.dims[2] + i) * t.dims[3] + j];
  }
  static double& gx(Tensor& t, int b, int c, int i, int j) {
    return t.data[((static_cast<std::size_t>(b) * t.dims[1] + c) * t.dims[2] + i) * t.dims[3] + j];
  }

  int ic_, oc_, k_, s_;
  int ho_ = 0, wo_ = 0;
  Param w_, b_;
  Tensor x_;
};

class Flatten : public Layer {
 public:
  Tensor forward(const Tensor& x, bool) override {
    dims_ = x.dims;
    Tensor y = x;
    y.dims = {x.batch(), static_cast<int>(x.per_sample())};
    return y;
  }
  Tensor backward(const Tensor& gout) override {
    Tensor gin = gout;
    gin.dims = dims_;
    return gin;
  }
  const char* kind() const override { return "flatten"; }

 private:
  std::vector<int> dims_;
};

class Network;
std::unique_ptr<Layer> make_residual(Network body);

/// Sequential container with per-parameter Adam state.
class Network {
 public:
  Network() = default;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  Network& add(std::unique_ptr<Layer> l) {
    layers_.push_back(std::move(l));
    return *this;
  }

  Tensor forward(const Tensor& x, bool training = true) {
    Tensor t = x;
    for (auto& l : layers_) t = l->forward(t, training);
    forward_done_ = true;
    return t;
  }

  Tensor backward(const Tensor& gout) {
    if (!forward_done_) throw StateError("Network::backward called before forward");
    Tensor g = gout;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    for (auto& l : layers_)
      for (Param* p : l->params()) out.push_back(p);
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    for (Param* p : params()) n += p->size();
    return n;
  }

  void zero_grad() {
    for (Param* p : params()) std::fill(p->grad.begin(), p->grad.end(), 0.0);
  }

  /// Bias-corrected Adam applied in place to all parameters.
  void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    ++adam_t_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(adam_t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(adam_t_));
    for (Param* p : params())
      for (std::size_t i = 0; i < p->size(); ++i) {
        p->m[i] = beta1 * p->m[i] + (1.0 - beta1) * p->grad[i];
        p->v[i] = beta2 * p->v[i] + (1.0 - beta2) * p->grad[i] * p->grad[i];
        p->value[i] -= lr * (p->m[i] / c1) / (std::sqrt(p->v[i] / c2) + eps);
      }
  }

  std::size_t layer_count() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_[i]; }

  void save(std::ostream& os) const {
    os.write("SOMNN001", 8);
    const auto n = static_cast<std::uint32_t>(layers_.size());
    os.write(reinterpret_cast<const char*>(&n), sizeof(n));
    for (const auto& l : layers_) l->save(os);
  }

  void load(std::istream& is) {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, "SOMNN001", 8) != 0)
      throw ParameterError("bad checkpoint magic");
    std::uint32_t n = 0;
    is.read(reinterpret_cast<char*>(&n), sizeof(n));
    if (n != layers_.size()) throw ParameterError("checkpoint layer count mismatch");
    for (auto& l : layers_) l->load(is);
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ParameterError("cannot open " + path);
    save(f);
  }
  void load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParameterError("cannot open " + path);
    load(f);
  }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
  bool forward_done_ = false;
  long long adam_t_ = 0;
};

/// y = x + body(x); with a zero-initialized final dense layer in the body the
/// block is the identity at initialization.
class Residual : public Layer {
 public:
  explicit Residual(Network body) : body_(std::move(body)) {}
  Tensor forward(const Tensor& x, bool training) override {
    Tensor y = body_.forward(x, training);
    if (y.numel() != x.numel()) throw ParameterError("Residual: body must preserve size");
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += x.data[i];
    return y;
  }
  Tensor backward(const Tensor& gout) override {
    Tensor gin = body_.backward(gout);
    for (std::size_t i = 0; i < gin.data.size(); ++i) gin.data[i] += gout.data[i];
    return gin;
  }
  std::vector<Param*> params() override { return body_.params(); }
  const char* kind() const override { return "residual"; }
  void save(std::ostream& os) const override {
    const std::uint32_t nblocks = 0xffffffffu;  // marker: nested network follows
    os.write(reinterpret_cast<const char*>(&nblocks), sizeof(nblocks));
    body_.save(os);
  }
  void load(std::istream& is) override {
    std::uint32_t nblocks = 0;
    is.read(reinterpret_cast<char*>(&nblocks), sizeof(nblocks));
    if (nblocks != 0xffffffffu) throw ParameterError("checkpoint layer mismatch (residual)");
    body_.load(is);
  }

 private:
  Network body_;
};

inline std::unique_ptr<Layer> make_residual(Network body) {
  return std::make_unique<Residual>(std::move(body));
}

inline std::unique_ptr<Layer> dense(int in, int out, Rng& rng) {
  return std::make_unique<Dense>(in, out, rng);
}
inline std::unique_ptr<Layer> dense_zero(int in, int out, Rng& rng) {
  return std::make_unique<Dense>(in, out, rng, true);
}
inline std::unique_ptr<Layer> relu() { return std::make_unique<ReLU>(); }
inline std::unique_ptr<Layer> sigmoid() { return std::make_unique<Sigmoid>(); }
inline std::unique_ptr<Layer> batchnorm(int features) {
  return std::make_unique<BatchNorm>(features);
}
inline std::unique_ptr<Layer> conv2d(int in_ch, int out_ch, int kernel, int stride, Rng& rng) {
  return std::make_unique<Conv2d>(in_ch, out_ch, kernel, stride, rng);
}
inline std::unique_ptr<Layer> flatten() { return std::make_unique<Flatten>(); }

/// Plain MLP: dims[0] -> ... -> dims.back(), ReLU between layers.
inline Network mlp(const std::vector<int>& dims, Rng& rng) {
  if (dims.size() < 2) throw ParameterError("mlp needs at least input and output dims");
  Network net;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    net.add(dense(dims[i], dims[i + 1], rng));
    if (i + 2 < dims.size()) net.add(relu());
  }
  return net;
}

/// Central finite-difference gradient check over a random subsample of
/// parameters. Gradients must already be accumulated; `loss` must re-run the
/// same deterministic forward pass. Returns the maximum relative error.
inline double grad_check(const std::function<double()>& loss, std::span<Param* const> params,
                         double epsilon = 1e-4, int max_samples = 200,
                         std::uint64_t seed = 1234) {
  std::vector<std::pair<Param*, std::size_t>> coords;
  for (Param* p : params)
    for (std::size_t i = 0; i < p->size(); ++i) coords.emplace_back(p, i);
  if (coords.empty()) throw ParameterError("grad_check: no parameters");
  Rng rng = make_rng(seed, 0x60adc);
  std::shuffle(coords.begin(), coords.end(), rng);
  const std::size_t count = std::min<std::size_t>(coords.size(), max_samples);
  double max_rel = 0.0;
  for (std::size_t c = 0; c < count; ++c) {
    auto [p, i] = coords[c];
    const double x0 = p->value[i];
    p->value[i] = x0 + epsilon;
    const double lp = loss();
    p->value[i] = x0 - epsilon;
    const double lm = loss();
    p->value[i] = x0;
    const double fd = (lp - lm) / (2.0 * epsilon);
    const double an = p->grad[i];
    const double rel = std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-6);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

/// Sum of per-sample mean binary cross entropies; predictions clipped to
/// [clip, 1-clip] before the logarithms. Also fills the gradient w.r.t. the
/// (unclipped) predictions.
inline double bce_loss(const Tensor& pred, const Tensor& label, Tensor& grad,
                       double clip = 1e-7) {
  if (pred.numel() != label.numel()) throw ParameterError("bce_loss: size mismatch");
  grad = Tensor(pred.dims);
  const std::size_t n_per = pred.per_sample();
  double total = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double p = std::clamp(pred.data[i], clip, 1.0 - clip);
    const double y = label.data[i];
    total -= (y * std::log(p) + (1.0 - y) * std::log(1.0 - p)) / n_per;
    const bool clipped = pred.data[i] < clip || pred.data[i] > 1.0 - clip;
    grad.data[i] = clipped ? 0.0 : (-(y / p) + (1.0 - y) / (1.0 - p)) / n_per;
  }
  return total;
}

}  // namespace hmvmm::nnkit
