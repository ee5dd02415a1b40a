#pragma once

#include <functional>
#include <iosfwd>
#include <vector>

#include "eres/data.hpp"
#include "eres/model.hpp"
#include "eres/optim.hpp"

namespace eres {

/// When a gated block counts as collapsed.
struct CollapsePolicy {
  /// Fraction of training samples with a shut gate needed for an epoch to count.
  double threshold = 1.0;
  /// Consecutive qualifying epochs before the block is marked Collapsed.
  int confirm_epochs = 2;
  /// Max-abs parameter value below which a collapsed block may be pruned.
  double zero_tolerance = 1e-4;

  void validate() const;
};

struct GateRecord {
  std::size_t block = 0;
  int epoch = 0;
  double gate_off_fraction = 0.0;
  double max_abs_response = 0.0;
};

/// Distribution of a block's convolution weights and bias.
struct WeightStats {
  std::size_t block = 0;
  int epoch = 0;
  double min = 0.0;
  double p7 = 0.0;
  double p50 = 0.0;
  double p93 = 0.0;
  double max = 0.0;

  double max_abs() const;
};

/// Linear-interpolated percentile (q in [0,1]) of sorted values.
double percentile(const std::vector<double>& sorted, double q);

template <typename T>
WeightStats weight_stats(const ResidualBlock<T>& block, int epoch);

/// Largest |value| over a block's conv weights and conv bias.
template <typename T>
double block_max_abs(const ResidualBlock<T>& block);

/// Positions of Active gated blocks whose last `confirm_epochs` entries of
/// gate_off_history all reach the threshold.
std::vector<std::size_t> detect_collapse(const std::vector<BlockSpec>& blocks,
                                         const CollapsePolicy& policy);

/// (collapsed + pruned gated blocks) / prunable blocks.
template <typename T>
double discard_ratio(const Model<T>& model);

struct TrainConfig {
  int epochs = 40;
  std::size_t batch_size = 128;
  std::uint64_t seed = 1;
  AugmentConfig augment;
  CollapsePolicy collapse;
  LrPolicy lr;
  double momentum = 0.9;
  double weight_decay = 0.0002;
  bool decay_bn = true;
  std::size_t eval_batch = 500;

  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_error = 0.0;  // NaN when no validation set is given
  double lr = 0.0;
  double discard_ratio = 0.0;
  std::vector<GateRecord> gates;
  std::vector<WeightStats> weights;  // one per block, in network order
  std::vector<std::size_t> newly_collapsed;
};

/// Mini-batch SGD driver. Each call to run_epoch trains on one shuffled pass
/// over the training set, updates gate statistics and block states, and
/// evaluates on the validation set.
template <typename T>
class Trainer {
 public:
  Trainer(Model<T>& model, TrainConfig cfg);

  EpochLog run_epoch(const Dataset& train, const Dataset* val);

  int next_epoch() const { return next_epoch_; }
  const TrainConfig& config() const { return cfg_; }
  LrPolicy& lr_policy() { return cfg_.lr; }
  SgdState<T>& sgd() { return sgd_; }

  /// Restores the position of an interrupted run.
  void resume(int next_epoch, const LrPolicy& lr, std::map<std::string, Tensor<T>> velocity);

 private:
  Model<T>* model_;
  TrainConfig cfg_;
  SgdState<T> sgd_;
  int next_epoch_ = 0;
};

/// Runs epochs up to cfg.epochs, calling `on_epoch` after each.
template <typename T>
std::vector<EpochLog> train(Trainer<T>& trainer, const Dataset& train, const Dataset* val,
                            const std::function<void(const EpochLog&)>& on_epoch = {});

/// Top-1 error in eval mode.
template <typename T>
double evaluate(Model<T>& model, const Dataset& data, std::size_t batch = 500,
                bool skip_collapsed = false);

/// Cross-entropy of the classifier plus the weighted side loss for one batch.
template <typename T>
NodeId task_loss(Graph<T>& g, const ForwardNodes<T>& nodes, const std::vector<int>& labels,
                 double side_coefficient);

inline constexpr const char* kMetricsHeader =
    "epoch,block,gate_off_fraction,max_abs_response,wmin,wp7,wp50,wp93,wmax,train_loss,val_error,lr,"
    "discard_ratio";

/// One row per block followed by a summary row whose block column is "all".
void write_metrics(std::ostream& out, const EpochLog& log, const std::vector<BlockSpec>& blocks);

}  // namespace eres
