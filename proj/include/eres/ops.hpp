#pragma once

#include "eres/graph.hpp"

namespace eres {

template <typename T>
class IdentityOp final : public Op<T> {
 public:
  std::string name() const override { return "identity"; }
  Tensor<T> forward(const TensorRefs<T>& in) override;
  void backward(const TensorRefs<T>& in, const Tensor<T>& out, const Tensor<T>& grad_out,
                const GradRefs<T>& grads) override;
};

/// Elementwise a + b (identical shapes).
template <typename T>
class AddOp final : public Op<T> {
 public:
  std::string name() const override { return "add"; }
  Tensor<T> forward(const TensorRefs<T>& in) override;
  void backward(const TensorRefs<T>& in, const Tensor<T>& out, const Tensor<T>& grad_out,
                const GradRefs<T>& grads) override;
};

/// Elementwise a * b (identical shapes).
template <typename T>
class MulOp final : public Op<T> {
 public:
  std::string name() const override { return "mul"; }
  Tensor<T> forward(const TensorRefs<T>& in) override;
  void backward(const TensorRefs<T>& in, const Tensor<T>& out, const Tensor<T>& grad_out,
                const GradRefs<T>& grads) override;
};

template <typename T>
class ScaleOp final : public Op<T> {
 public:
  explicit ScaleOp(T factor) : factor_(factor) {}
  std::string name() const override { return "scale"; }
  Tensor<T> forward(const TensorRefs<T>& in) override;
  void backward(const TensorRefs<T>& in, const Tensor<T>& out, const Tensor<T>& grad_out,
                const GradRefs<T>& grads) override;

 private:
  T factor_;
};

/// Sum of all elements, shape [1].
template <typename T>
class SumOp final : public Op<T> {
 public:
  std::string name() const override { return "sum"; }
  Tensor<T> forward(const TensorRefs<T>& in) override;
  void backward(const TensorRefs<T>& in, const Tensor<T>& out, const Tensor<T>& grad_out,
                const GradRefs<T>& grads) override;
};

template <typename T>
NodeId identity(Graph<T>& g, NodeId x) { return g.template emplace<IdentityOp<T>>({x}); }
template <typename T>
NodeId add(Graph<T>& g, NodeId a, NodeId b) { return g.template emplace<AddOp<T>>({a, b}); }
template <typename T>
NodeId mul(Graph<T>& g, NodeId a, NodeId b) { return g.template emplace<MulOp<T>>({a, b}); }
template <typename T>
NodeId scale(Graph<T>& g, NodeId x, T factor) {
  return g.template emplace<ScaleOp<T>>({x}, factor);
}
template <typename T>
NodeId sum(Graph<T>& g, NodeId x) { return g.template emplace<SumOp<T>>({x}); }

void require_same_shape(const std::string& op, const Shape& a, const Shape& b);

}  // namespace eres
