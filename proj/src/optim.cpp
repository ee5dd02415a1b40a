#include "eres/optim.hpp"

#include <cmath>

namespace eres {

template <typename T>
void sgd_update(Tensor<T>& w, std::span<const T> grad, Tensor<T>& velocity, double lr,
                double momentum, double weight_decay) {
  if (velocity.shape() != w.shape()) velocity = Tensor<T>(w.shape());
  auto wd = w.data();
  auto vd = velocity.data();
  for (std::size_t i = 0; i < wd.size(); ++i) {
    const double g = static_cast<double>(grad[i]) + weight_decay * static_cast<double>(wd[i]);
    vd[i] = static_cast<T>(momentum * static_cast<double>(vd[i]) - lr * g);
    wd[i] = wd[i] + vd[i];
  }
}

template <typename T>
void sgd_step(const std::vector<NamedTensor<T>>& params, SgdState<T>& state) {
  for (const auto& p : params) {
    for (T g : p.tensor->grad()) {
      if (!std::isfinite(g)) {
        throw NumericFault("non-finite gradient in parameter '" + p.name + "'; step aborted");
      }
    }
  }
  for (const auto& p : params) {
    if (p.kind == TensorKind::kBuffer) continue;
    Tensor<T>& v = state.velocity[p.name];
    const double decay = decays(state, p.kind) ? state.weight_decay : 0.0;
    sgd_update<T>(*p.tensor, p.tensor->grad(), v, state.lr, state.momentum, decay);
  }
}

template <typename T>
double l2_penalty(const std::vector<NamedTensor<T>>& params, const SgdState<T>& state) {
  double acc = 0.0;
  for (const auto& p : params) {
    if (!decays(state, p.kind)) continue;
    for (T w : p.tensor->data()) acc += static_cast<double>(w) * w;
  }
  return 0.5 * state.weight_decay * acc;
}

void LrPolicy::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("base learning rate must be positive");
  auto increasing = [](const std::vector<int>& m) {
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m[i] <= 0 || (i > 0 && m[i] <= m[i - 1])) return false;
    }
    return true;
  };
  if (!increasing(standard_milestones) || !increasing(adaptive_milestones)) {
    throw ConfigError("learning-rate milestones must be positive and strictly increasing");
  }
}

double lr_for_epoch(const LrPolicy& policy, int epoch) {
  const bool adaptive = policy.phase == LrPolicy::Phase::kAdaptive;
  const int clock = adaptive ? policy.epochs_since_reset(epoch) : epoch;
  const auto& milestones = adaptive ? policy.adaptive_milestones : policy.standard_milestones;
  int passed = 0;
  for (int m : milestones) passed += clock >= m ? 1 : 0;
  return policy.base_lr / std::pow(10.0, passed);
}

LrPolicy on_block_discarded(LrPolicy policy, int next_epoch) {
  policy.phase = LrPolicy::Phase::kAdaptive;
  policy.reset_epoch = next_epoch;
  return policy;
}

#define ERES_INSTANTIATE_OPTIM(T)                                                           \
  template void sgd_update(Tensor<T>&, std::span<const T>, Tensor<T>&, double, double, double); \
  template void sgd_step(const std::vector<NamedTensor<T>>&, SgdState<T>&);                 \
  template double l2_penalty(const std::vector<NamedTensor<T>>&, const SgdState<T>&);

ERES_INSTANTIATE_OPTIM(float)
ERES_INSTANTIATE_OPTIM(double)

}  // namespace eres
