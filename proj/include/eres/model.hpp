#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "eres/gate.hpp"
#include "eres/layers.hpp"

namespace eres {

enum class BlockState { kActive, kCollapsed, kPruned };

std::string to_string(BlockState s);
BlockState parse_block_state(const std::string& s);

/// Lifecycle of a residual block. Transitions only go forward:
/// Active -> Collapsed -> Pruned.
struct BlockStatus {
  BlockState state = BlockState::kActive;
  int collapsed_epoch = -1;
  std::vector<double> gate_off_history;

  void mark_collapsed(int epoch);
  void mark_pruned();
  bool removable() const { return state != BlockState::kActive; }
};

struct BlockSpec {
  std::size_t index = 0;   // position in the current network
  std::size_t origin = 0;  // position in the network as originally built
  int group = 1;           // 1..3
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  bool gated = true;
  BlockStatus status;

  /// First block of groups 2 and 3: changes resolution and width.
  bool transition() const { return stride != 1 || in_channels != out_channels; }
};

/// Declarative description of the three-group CIFAR topology.
struct NetworkSpec {
  std::array<std::size_t, 3> blocks_per_group{3, 3, 3};
  std::array<std::size_t, 3> widths{16, 32, 64};
  std::size_t in_channels = 3;
  std::size_t image_size = 32;
  std::size_t classes = 10;
  GateConfig gate;
  bool side_supervision = true;
  double side_coefficient = 0.1;
  double init_std = 0.01;
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;

  void validate() const;
  std::size_t total_blocks() const;
  /// Weighted layers: stem conv + two convs per block + classifier.
  std::size_t layer_count() const { return 2 * total_blocks() + 2; }
  /// Block list in network order; transition blocks are ungated.
  std::vector<BlockSpec> layout() const;
};

template <typename T>
struct ResidualBlock {
  BlockSpec spec;
  BatchNormState<T> bn1;
  Conv2dParams<T> conv1;
  BatchNormState<T> bn2;
  Conv2dParams<T> conv2;  // carries a bias so that zero parameters give F(x) == 0
};

enum class TensorKind { kWeight, kBias, kBnAffine, kBuffer };

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor;
  TensorKind kind;
  int block;  // position of the owning residual block, -1 otherwise
};

struct ForwardOptions {
  BnMode mode = BnMode::kTrain;
  /// Skip blocks in Collapsed state instead of executing them.
  bool skip_collapsed = false;
  bool with_side = true;
  /// Replaces the spec's gate configuration for this pass.
  std::optional<GateConfig> gate;
};

template <typename T>
struct GateProbe {
  std::size_t block;
  const SparsifyOp<T>* op;
};

template <typename T>
struct ForwardNodes {
  NodeId logits = 0;
  std::optional<NodeId> side_logits;
  std::vector<GateProbe<T>> gates;
};

/// Output node of one residual block and its gate (null for ungated blocks).
template <typename T>
struct BlockNodes {
  NodeId out;
  const SparsifyOp<T>* gate = nullptr;
};

/// H = x + S(F(x)) for gated blocks; H = shortcut(x) + F(x) otherwise, where
/// F = conv2(relu(bn2(conv1(relu(bn1(x)))))).
template <typename T>
BlockNodes<T> block_forward(Graph<T>& g, NodeId x, ResidualBlock<T>& block, BnMode mode,
                            const GateConfig& gate);

/// Pre-activation ε-ResNet: stem conv, three groups of residual blocks, final
/// BN-ReLU, global average pooling and a linear classifier. An optional side
/// head (pool + linear) taps the output of block ceil(N/2) during training.
template <typename T>
class Model {
 public:
  static Model build(const NetworkSpec& spec, std::uint64_t seed);
  /// Zero-initialized model with an explicit block list, used when restoring
  /// checkpoints of (possibly pruned) networks.
  static Model assemble(const NetworkSpec& spec, std::vector<BlockSpec> blocks,
                        std::vector<BlockSpec> pruned, std::size_t side_tap);

  const NetworkSpec& spec() const { return spec_; }
  NetworkSpec& spec() { return spec_; }
  std::vector<ResidualBlock<T>>& blocks() { return blocks_; }
  const std::vector<ResidualBlock<T>>& blocks() const { return blocks_; }
  /// Specs of blocks removed by pruning, in original order.
  const std::vector<BlockSpec>& pruned() const { return pruned_; }

  ForwardNodes<T> forward(Graph<T>& g, NodeId images, const ForwardOptions& opts);
  /// Eval-mode logits of a batch, without side head.
  Tensor<T> predict(const Tensor<T>& images, bool skip_collapsed = false);

  /// Every tensor (parameters and BN buffers) in a fixed order, named
  /// group{g}.block{b}.{layer}.{param}. The stem is group0, the classifier
  /// group4 and the side head group5.
  std::vector<NamedTensor<T>> named_tensors();
  std::vector<NamedTensor<T>> parameters();

  /// Inference parameters (side head excluded).
  std::size_t parameter_count() const;
  std::size_t side_parameter_count() const;
  static std::size_t block_parameter_count(const BlockSpec& b);
  std::size_t layer_count() const { return 2 * blocks_.size() + 2; }
  std::size_t prunable_count() const;

  /// Number of blocks in front of the side tap.
  std::size_t side_tap() const { return side_tap_; }

  /// Copy with the blocks at `positions` removed (recorded as Pruned).
  /// Remaining blocks are renumbered; the side tap follows the same feature
  /// map, which identity blocks leave unchanged.
  Model without_blocks(const std::vector<std::size_t>& positions) const;

  void zero_grad();
  void set_requires_grad(bool on);

 private:
  NetworkSpec spec_;
  Conv2dParams<T> stem_;
  std::vector<ResidualBlock<T>> blocks_;
  std::vector<BlockSpec> pruned_;
  BatchNormState<T> final_bn_;
  LinearParams<T> fc_;
  std::optional<LinearParams<T>> side_fc_;
  std::size_t side_tap_ = 0;
};

/// Name prefix of a block, e.g. "group2.block0".
std::string block_prefix(const BlockSpec& b, std::size_t index_in_group);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace eres
