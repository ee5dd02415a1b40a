#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "eres/tensor.hpp"

namespace eres {

using NodeId = std::size_t;

template <typename T>
using TensorRefs = std::vector<const Tensor<T>*>;

template <typename T>
using GradRefs = std::vector<Tensor<T>*>;

/// A differentiable operation. Instances live inside one Graph and may keep
/// whatever forward state their backward rule needs.
template <typename T>
class Op {
 public:
  virtual ~Op() = default;
  virtual std::string name() const = 0;
  virtual Tensor<T> forward(const TensorRefs<T>& in) = 0;
  /// Accumulates dL/d(in[i]) into grads[i]. grads[i] is null when input i
  /// needs no gradient. Inputs are always visited in index order.
  virtual void backward(const TensorRefs<T>& in, const Tensor<T>& out,
                        const Tensor<T>& grad_out, const GradRefs<T>& grads) = 0;
};

/// Define-by-run computation graph. Nodes are appended in topological order;
/// forward() evaluates them in that order and backward() walks them in
/// reverse, each node exactly once.
template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  /// Named placeholder bound at forward() time.
  NodeId input(std::string name, bool requires_grad = false);
  /// External tensor (typically a parameter). If it requires grad, backward()
  /// accumulates into its grad buffer. The tensor must outlive the graph.
  NodeId leaf(Tensor<T>& tensor, std::string name = {});
  NodeId constant(Tensor<T> value);
  NodeId apply(std::unique_ptr<Op<T>> op, std::vector<NodeId> inputs);

  template <class OpT, class... Args>
  NodeId emplace(std::vector<NodeId> inputs, Args&&... args) {
    return apply(std::make_unique<OpT>(std::forward<Args>(args)...), std::move(inputs));
  }

  void mark_output(std::string name, NodeId id);

  void forward(const std::map<std::string, Tensor<T>>& inputs = {});
  void backward(NodeId loss);

  bool forward_done() const { return forward_done_; }
  const Tensor<T>& value(NodeId id) const;
  const Tensor<T>& output(const std::string& name) const;
  /// Gradient of the last backward() w.r.t. an input placeholder.
  const Tensor<T>& grad(NodeId id) const;
  /// Node id of a named input placeholder or named leaf.
  NodeId find(const std::string& name) const;
  /// Mutable access to the tensor behind a leaf node.
  Tensor<T>& leaf_tensor(NodeId id);
  Op<T>& op(NodeId id);
  std::size_t size() const { return nodes_.size(); }

 private:
  enum class Kind { kInput, kLeaf, kConstant, kOp };

  struct Node {
    Kind kind;
    std::string name;
    std::vector<NodeId> inputs;
    std::unique_ptr<Op<T>> op;
    Tensor<T> value;
    Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool needs_grad = false;
    bool input_requires_grad = false;
  };

  const Tensor<T>& node_value(const Node& n) const {
    return n.external ? *n.external : n.value;
  }
  const Node& at(NodeId id) const;

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> names_;
  std::map<std::string, NodeId> outputs_;
  bool forward_done_ = false;
};

/// Result of comparing autodiff gradients against central differences.
struct GradCheckReport {
  bool pass = false;
  std::string leaf;
  std::size_t checked = 0;
  double worst_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Magnitudes below this are compared absolutely rather than relatively.
inline constexpr double kGradCheckFloor = 1e-3;

/// Perturbs every element of `leaf` (an input or leaf name) by +-h, re-runs
/// forward, and compares (f(x+h)-f(x-h))/2h against backward(). The relative
/// error per element is |a-n| / max(|a|, |n|, kGradCheckFloor). 64-bit only.
GradCheckReport finite_diff_check(Graph<double>& graph, NodeId loss, const std::string& leaf,
                                  const std::map<std::string, Tensor<double>>& inputs,
                                  double tolerance, double h = 1e-5);

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace eres
