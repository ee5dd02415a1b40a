#include "eres/gate.hpp"

#include <cmath>

namespace eres {

std::string to_string(GateRealization r) {
  return r == GateRealization::kExact ? "exact" : "circuit";
}

GateRealization parse_gate_realization(const std::string& s) {
  if (s == "exact") return GateRealization::kExact;
  if (s == "circuit" || s == "relu_circuit") return GateRealization::kReluCircuit;
  throw ConfigError("gate realization must be 'exact' or 'circuit', got '" + s + "'");
}

void GateConfig::validate() const {
  if (!(epsilon > 0.0)) {
    throw ConfigError("epsilon must be positive, got " + std::to_string(epsilon));
  }
  if (!(big_L >= 1e6)) {
    throw ConfigError("big_L must be at least 1e6, got " + std::to_string(big_L));
  }
}

namespace {

template <typename T>
std::size_t per_sample(const Tensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("sparsify: residual has no batch dimension");
  return x.size() / x.dim(0);
}

template <typename T>
double sample_max_abs(const T* p, std::size_t n) {
  double m = 0.0;
  for (std::size_t j = 0; j < n; ++j) m = std::max(m, std::abs(static_cast<double>(p[j])));
  return m;
}

// Gated-off samples are written as -0.0: x + (-0.0) == x bit-for-bit for every
// x including -0.0, so the block output is a strict identity.
template <typename T>
void write_gated(const Tensor<T>& residual, std::size_t i, std::size_t len, double t, Tensor<T>& s) {
  const T* src = residual.ptr() + i * len;
  T* dst = s.ptr() + i * len;
  if (t == 0.0) {
    std::fill(dst, dst + len, -T{0});
  } else if (t == 1.0) {
    std::copy(src, src + len, dst);
  } else {
    const T tt = static_cast<T>(t);
    for (std::size_t j = 0; j < len; ++j) dst[j] = tt * src[j];
  }
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> gate_indicator(const Tensor<T>& residual, const GateConfig& cfg) {
  const std::size_t n = residual.dim(0);
  const std::size_t len = per_sample(residual);
  std::vector<std::uint8_t> t(n);
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = sample_max_abs(residual.ptr() + i * len, len) <= cfg.epsilon ? 0 : 1;
  }
  return t;
}

template <typename T>
GateOutput<T> sparsify_forward(const Tensor<T>& residual, const GateConfig& cfg) {
  const std::size_t n = residual.dim(0);
  const std::size_t len = per_sample(residual);
  GateOutput<T> out;
  out.s = Tensor<T>(residual.shape());
  out.t.resize(n);
  out.max_abs.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.max_abs[i] = sample_max_abs(residual.ptr() + i * len, len);
    out.t[i] = out.max_abs[i] <= cfg.epsilon ? 0.0 : 1.0;
    write_gated(residual, i, len, out.t[i], out.s);
  }
  return out;
}

template <typename T>
Tensor<T> sparsify_backward(const Tensor<T>& upstream, const GateOutput<T>& out) {
  const std::size_t len = per_sample(upstream);
  Tensor<T> grad(upstream.shape());
  for (std::size_t i = 0; i < out.t.size(); ++i) {
    const double t = out.t[i];
    if (t == 0.0) continue;
    const T tt = static_cast<T>(t);
    for (std::size_t j = 0; j < len; ++j) grad[i * len + j] = tt * upstream[i * len + j];
  }
  return grad;
}

template <typename T>
GateOutput<T> relu_circuit_forward(const Tensor<T>& residual, const GateConfig& cfg) {
  const std::size_t n = residual.dim(0);
  const std::size_t len = per_sample(residual);
  const double eps = cfg.epsilon;
  const double L = cfg.big_L;
  GateOutput<T> out;
  out.s = Tensor<T>(residual.shape());
  out.t.resize(n);
  out.max_abs.resize(n);
  out.circuit_sum.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* f = residual.ptr() + i * len;
    double r = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      const double v = f[j];
      r += affine_relu(v, 1.0, -eps) + affine_relu(v, -1.0, -eps);
    }
    const double u = affine_relu(r, -L, 1.0);
    const double t = affine_relu(u, -1.0, 1.0);
    out.circuit_sum[i] = r;
    out.max_abs[i] = sample_max_abs(f, len);
    out.t[i] = t;
    write_gated(residual, i, len, t, out.s);
  }
  return out;
}

template <typename T>
Tensor<T> SparsifyOp<T>::forward(const TensorRefs<T>& in) {
  GateOutput<T> out = cfg_.realization == GateRealization::kExact
                          ? sparsify_forward(*in[0], cfg_)
                          : relu_circuit_forward(*in[0], cfg_);
  t_ = std::move(out.t);
  max_abs_ = std::move(out.max_abs);
  return std::move(out.s);
}

template <typename T>
void SparsifyOp<T>::backward(const TensorRefs<T>& in, const Tensor<T>&, const Tensor<T>& grad_out,
                             const GradRefs<T>& grads) {
  if (!grads[0]) return;
  const std::size_t len = per_sample(*in[0]);
  for (std::size_t i = 0; i < t_.size(); ++i) {
    if (t_[i] == 0.0) continue;
    const T tt = static_cast<T>(t_[i]);
    for (std::size_t j = 0; j < len; ++j) (*grads[0])[i * len + j] += tt * grad_out[i * len + j];
  }
}

#define ERES_INSTANTIATE_GATE(T)                                                         \
  template std::vector<std::uint8_t> gate_indicator(const Tensor<T>&, const GateConfig&); \
  template GateOutput<T> sparsify_forward(const Tensor<T>&, const GateConfig&);          \
  template Tensor<T> sparsify_backward(const Tensor<T>&, const GateOutput<T>&);          \
  template GateOutput<T> relu_circuit_forward(const Tensor<T>&, const GateConfig&);      \
  template class SparsifyOp<T>;

ERES_INSTANTIATE_GATE(float)
ERES_INSTANTIATE_GATE(double)

}  // namespace eres
