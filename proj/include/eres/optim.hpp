#pragma once

#include <map>
#include <string>
#include <vector>

#include "eres/model.hpp"

namespace eres {

/// Heavy-ball SGD with coupled L2 decay:
///   v <- momentum * v - lr * (g + weight_decay * w)
///   w <- w + v
template <typename T>
struct SgdState {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0002;
  /// Apply weight decay to BN gamma/beta as well.
  bool decay_bn = true;
  /// Per-parameter velocity keyed by parameter name, zero-initialized lazily.
  std::map<std::string, Tensor<T>> velocity;
};

template <typename T>
bool decays(const SgdState<T>& state, TensorKind kind) {
  switch (kind) {
    case TensorKind::kWeight:
    case TensorKind::kBias:
      return true;
    case TensorKind::kBnAffine:
      return state.decay_bn;
    case TensorKind::kBuffer:
      return false;
  }
  return false;
}

/// One update of a single tensor.
template <typename T>
void sgd_update(Tensor<T>& w, std::span<const T> grad, Tensor<T>& velocity, double lr,
                double momentum, double weight_decay);

/// Updates every parameter from its grad buffer. If any gradient is
/// non-finite, throws NumericFault before touching any parameter.
template <typename T>
void sgd_step(const std::vector<NamedTensor<T>>& params, SgdState<T>& state);

/// (weight_decay / 2) * sum of squares over the decayed parameters.
template <typename T>
double l2_penalty(const std::vector<NamedTensor<T>>& params, const SgdState<T>& state);

/// Step-wise learning-rate policy. In the standard phase the rate is divided
/// by 10 at each standard milestone (absolute epochs). After a block is
/// discarded the policy switches to the adaptive phase: the rate restarts at
/// base_lr and is divided by 10 at each adaptive milestone, counted from the
/// reset epoch.
struct LrPolicy {
  enum class Phase { kStandard, kAdaptive };

  double base_lr = 0.1;
  std::vector<int> standard_milestones{82, 123};
  std::vector<int> adaptive_milestones{41, 61};
  Phase phase = Phase::kStandard;
  int reset_epoch = -1;

  void validate() const;
  int epochs_since_reset(int epoch) const { return epoch - reset_epoch; }
};

double lr_for_epoch(const LrPolicy& policy, int epoch);

/// Restarts the adaptive clock at `next_epoch`. Calling it again for the same
/// epoch leaves the policy unchanged.
LrPolicy on_block_discarded(LrPolicy policy, int next_epoch);

}  // namespace eres
