#pragma once

#include <optional>
#include <vector>

#include "eres/graph.hpp"

namespace eres {

// ---------------------------------------------------------------------------
// Parameter bundles
// ---------------------------------------------------------------------------

/// 2-D convolution (cross-correlation) with symmetric zero padding.
/// weight is [outC, inC, kH, kW]; bias, when present, is [outC].
template <typename T>
struct Conv2dParams {
  Tensor<T> weight;
  std::optional<Tensor<T>> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

enum class BnMode { kTrain, kEval };

/// Per-channel batch normalization parameters and running statistics.
template <typename T>
struct BatchNormState {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
  double eps = 1e-5;

  static BatchNormState make(std::size_t channels, double momentum = 0.9, double eps = 1e-5);
};

/// Fully connected layer, weight [out, in], bias [out].
template <typename T>
struct LinearParams {
  Tensor<T> weight;
  Tensor<T> bias;
};

// ---------------------------------------------------------------------------
// Kernels (no graph involvement; shared by ops and tests)
// ---------------------------------------------------------------------------

std::size_t conv_out_dim(std::size_t in, std::size_t kernel, std::size_t stride,
                         std::size_t pad);

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                         std::size_t stride, std::size_t pad);

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

/// Inputs: x [N,C,H,W], weight, optional bias.
template <typename T>
class Conv2dOp final : public Op<T> {
 public:
  Conv2dOp(std::size_t stride, std::size_t pad) : stride_(stride), pad_(pad) {}
  std::string name() const override { return "conv2d"; }
  Tensor<T> forward(const TensorRefs<T>& in) override;
  void backward(const TensorRefs<T>& in, const Tensor<T>& out, const Tensor<T>& grad_out,
                const GradRefs<T>& grads) override;

 private:
  std::size_t stride_;
  std::size_t pad_;
};

/// Inputs: x [N,C,...], gamma [C], beta [C]. Train mode normalizes with batch
/// statistics and updates the running buffers of the referenced state.
template <typename T>
class BatchNormOp final : public Op<T> {
 public:
  BatchNormOp(BatchNormState<T>& state, BnMode mode) : state_(&state), mode_(mode) {}
  std::string name() const override { return "batch_norm"; }
  Tensor<T> forward(const TensorRefs<T>& in) override;
  void backward(const TensorRefs<T>& in, const Tensor<T>& out, const Tensor<T>& grad_out,
                const GradRefs<T>& grads) override;

 private:
  BatchNormState<T>* state_;
  BnMode mode_;
  std::vector<T> xhat_;
  std::vector<double> inv_std_;
};

/// max(0, x); the subgradient at 0 is 0.
template <typename T>
class ReluOp final : public Op<T> {
 public:
  std::string name() const override { return "relu"; }
  Tensor<T> forward(const TensorRefs<T>& in) override;
  void backward(const TensorRefs<T>& in, const Tensor<T>& out, const Tensor<T>& grad_out,
                const GradRefs<T>& grads) override;
};

/// Inputs: x [N,in], weight [out,in], bias [out].
template <typename T>
class LinearOp final : public Op<T> {
 public:
  std::string name() const override { return "linear"; }
  Tensor<T> forward(const TensorRefs<T>& in) override;
  void backward(const TensorRefs<T>& in, const Tensor<T>& out, const Tensor<T>& grad_out,
                const GradRefs<T>& grads) override;
};

/// [N,C,H,W] -> [N,C], mean over H*W.
template <typename T>
class GlobalAvgPoolOp final : public Op<T> {
 public:
  std::string name() const override { return "global_avg_pool"; }
  Tensor<T> forward(const TensorRefs<T>& in) override;
  void backward(const TensorRefs<T>& in, const Tensor<T>& out, const Tensor<T>& grad_out,
                const GradRefs<T>& grads) override;
};

/// Mean over the batch of -log softmax(logits)[label]. Output shape [1].
template <typename T>
class SoftmaxCrossEntropyOp final : public Op<T> {
 public:
  explicit SoftmaxCrossEntropyOp(std::vector<int> labels) : labels_(std::move(labels)) {}
  std::string name() const override { return "softmax_cross_entropy"; }
  Tensor<T> forward(const TensorRefs<T>& in) override;
  void backward(const TensorRefs<T>& in, const Tensor<T>& out, const Tensor<T>& grad_out,
                const GradRefs<T>& grads) override;

 private:
  std::vector<int> labels_;
  std::vector<double> probs_;
};

/// Parameter-free shortcut for dimension-changing residual blocks: spatial
/// subsampling by `stride` followed by zero channels appended up to
/// `out_channels`.
template <typename T>
class ShortcutOp final : public Op<T> {
 public:
  ShortcutOp(std::size_t out_channels, std::size_t stride)
      : out_channels_(out_channels), stride_(stride) {}
  std::string name() const override { return "shortcut"; }
  Tensor<T> forward(const TensorRefs<T>& in) override;
  void backward(const TensorRefs<T>& in, const Tensor<T>& out, const Tensor<T>& grad_out,
                const GradRefs<T>& grads) override;

 private:
  std::size_t out_channels_;
  std::size_t stride_;
};

// ---------------------------------------------------------------------------
// Graph builders. Parameters are attached as leaves; they must outlive `g`.
// ---------------------------------------------------------------------------

template <typename T>
NodeId conv2d(Graph<T>& g, NodeId x, Conv2dParams<T>& p);
template <typename T>
NodeId batch_norm(Graph<T>& g, NodeId x, BatchNormState<T>& s, BnMode mode);
template <typename T>
NodeId relu(Graph<T>& g, NodeId x) { return g.template emplace<ReluOp<T>>({x}); }
template <typename T>
NodeId linear(Graph<T>& g, NodeId x, LinearParams<T>& p);
template <typename T>
NodeId global_avg_pool(Graph<T>& g, NodeId x) {
  return g.template emplace<GlobalAvgPoolOp<T>>({x});
}
template <typename T>
NodeId softmax_cross_entropy(Graph<T>& g, NodeId logits, std::vector<int> labels) {
  return g.template emplace<SoftmaxCrossEntropyOp<T>>({logits}, std::move(labels));
}
template <typename T>
NodeId shortcut(Graph<T>& g, NodeId x, std::size_t out_channels, std::size_t stride) {
  return g.template emplace<ShortcutOp<T>>({x}, out_channels, stride);
}

}  // namespace eres
