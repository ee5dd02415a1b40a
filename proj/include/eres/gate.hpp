#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eres/graph.hpp"

namespace eres {

enum class GateRealization { kExact, kReluCircuit };

std::string to_string(GateRealization r);
GateRealization parse_gate_realization(const std::string& s);

/// Threshold configuration of the sparsity-promoting gate.
struct GateConfig {
  double epsilon = 2.5;
  /// Slope of the third ReLU in the circuit realization; unused by kExact.
  double big_L = 1e9;
  GateRealization realization = GateRealization::kExact;

  /// Throws ConfigError unless epsilon > 0 and big_L >= 1e6.
  void validate() const;
};

/// Gated residual plus the per-sample indicator.
///
/// For every sample i, t[i] == 0 means s[i] is all zeros, t[i] == 1 means
/// s[i] is a bit-exact copy of the residual. The circuit realization may also
/// yield 0 < t < 1 when 0 < circuit_sum[i] < 1/L.
template <typename T>
struct GateOutput {
  Tensor<T> s;
  std::vector<double> t;
  /// max_j |residual[i]_j|, the statistic the exact gate thresholds.
  std::vector<double> max_abs;
  /// sum_j relu(F_j - eps) + relu(-F_j - eps); filled by the circuit only.
  std::vector<double> circuit_sum;
};

/// relu(w * x + b).
inline double affine_relu(double x, double w, double b) {
  const double v = w * x + b;
  return v > 0.0 ? v : 0.0;
}

/// t[i] = 0 iff every element of sample i satisfies |F| <= epsilon.
template <typename T>
std::vector<std::uint8_t> gate_indicator(const Tensor<T>& residual, const GateConfig& cfg);

/// Exact piecewise gate: s[i] = t[i] * residual[i].
template <typename T>
GateOutput<T> sparsify_forward(const Tensor<T>& residual, const GateConfig& cfg);

/// grad[i] = t[i] * upstream[i]; the indicator is a constant for backward.
template <typename T>
Tensor<T> sparsify_backward(const Tensor<T>& upstream, const GateOutput<T>& out);

/// Four-ReLU realization evaluated in double precision:
///   r = sum_j relu(F_j - eps) + relu(-F_j - eps)
///   u = relu(1 - L * r)      (1 when every |F_j| <= eps)
///   t = relu(1 - u)
///   s = t * F
template <typename T>
GateOutput<T> relu_circuit_forward(const Tensor<T>& residual, const GateConfig& cfg);

/// Graph op applying the configured realization to a residual [N, ...].
template <typename T>
class SparsifyOp final : public Op<T> {
 public:
  explicit SparsifyOp(GateConfig cfg) : cfg_(cfg) {}
  std::string name() const override { return "sparsify"; }
  Tensor<T> forward(const TensorRefs<T>& in) override;
  void backward(const TensorRefs<T>& in, const Tensor<T>& out, const Tensor<T>& grad_out,
                const GradRefs<T>& grads) override;

  const GateConfig& config() const { return cfg_; }
  /// Indicator and statistics of the most recent forward().
  const std::vector<double>& indicator() const { return t_; }
  const std::vector<double>& max_abs() const { return max_abs_; }

 private:
  GateConfig cfg_;
  std::vector<double> t_;
  std::vector<double> max_abs_;
};

template <typename T>
NodeId sparsify(Graph<T>& g, NodeId residual, const GateConfig& cfg) {
  return g.template emplace<SparsifyOp<T>>({residual}, cfg);
}

}  // namespace eres
