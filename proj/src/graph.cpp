#include "eres/graph.hpp"

#include <algorithm>
#include <cmath>

namespace eres {

template <typename T>
const typename Graph<T>::Node& Graph<T>::at(NodeId id) const {
  if (id >= nodes_.size()) {
    throw StateError("node id " + std::to_string(id) + " out of range");
  }
  return nodes_[id];
}

template <typename T>
NodeId Graph<T>::input(std::string name, bool requires_grad) {
  if (names_.count(name)) throw StateError("duplicate graph name '" + name + "'");
  Node n{};
  n.kind = Kind::kInput;
  n.name = name;
  n.needs_grad = requires_grad;
  n.input_requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  names_[std::move(name)] = nodes_.size() - 1;
  forward_done_ = false;
  return nodes_.size() - 1;
}

template <typename T>
NodeId Graph<T>::leaf(Tensor<T>& tensor, std::string name) {
  Node n{};
  n.kind = Kind::kLeaf;
  n.external = &tensor;
  n.needs_grad = tensor.requires_grad();
  n.name = name;
  nodes_.push_back(std::move(n));
  if (!name.empty()) {
    if (names_.count(name)) throw StateError("duplicate graph name '" + name + "'");
    names_[std::move(name)] = nodes_.size() - 1;
  }
  forward_done_ = false;
  return nodes_.size() - 1;
}

template <typename T>
NodeId Graph<T>::constant(Tensor<T> value) {
  Node n{};
  n.kind = Kind::kConstant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  forward_done_ = false;
  return nodes_.size() - 1;
}

template <typename T>
NodeId Graph<T>::apply(std::unique_ptr<Op<T>> op, std::vector<NodeId> inputs) {
  const NodeId id = nodes_.size();
  bool needs = false;
  for (NodeId in : inputs) {
    if (in >= id) throw StateError("op '" + op->name() + "' references a later node");
    needs = needs || nodes_[in].needs_grad;
  }
  Node n{};
  n.kind = Kind::kOp;
  n.name = op->name();
  n.inputs = std::move(inputs);
  n.op = std::move(op);
  n.needs_grad = needs;
  nodes_.push_back(std::move(n));
  forward_done_ = false;
  return id;
}

template <typename T>
void Graph<T>::mark_output(std::string name, NodeId id) {
  at(id);
  outputs_[std::move(name)] = id;
}

template <typename T>
void Graph<T>::forward(const std::map<std::string, Tensor<T>>& inputs) {
  forward_done_ = false;
  TensorRefs<T> refs;
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    Node& n = nodes_[id];
    switch (n.kind) {
      case Kind::kInput: {
        auto it = inputs.find(n.name);
        if (it == inputs.end()) throw StateError("graph input '" + n.name + "' is not bound");
        n.value = it->second;
        n.value.set_requires_grad(false);
        break;
      }
      case Kind::kLeaf:
      case Kind::kConstant:
        break;
      case Kind::kOp: {
        refs.clear();
        for (NodeId in : n.inputs) refs.push_back(&node_value(nodes_[in]));
        n.value = n.op->forward(refs);
        if (!n.value.all_finite()) {
          throw NumericFault("non-finite value produced by op '" + n.name + "' (node " +
                             std::to_string(id) + ")");
        }
        break;
      }
    }
  }
  forward_done_ = true;
}

template <typename T>
void Graph<T>::backward(NodeId loss) {
  if (!forward_done_) throw StateError("backward() called before forward()");
  const Node& ln = at(loss);
  if (node_value(ln).size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " +
                     shape_str(node_value(ln).shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor<T>();
  if (!ln.needs_grad) return;
  nodes_[loss].grad = Tensor<T>(node_value(ln).shape(), T{1});

  TensorRefs<T> refs;
  GradRefs<T> grads;
  for (NodeId id = loss + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.kind != Kind::kOp || n.grad.empty()) continue;
    refs.clear();
    grads.clear();
    for (NodeId in : n.inputs) {
      Node& src = nodes_[in];
      refs.push_back(&node_value(src));
      if (!src.needs_grad) {
        grads.push_back(nullptr);
        continue;
      }
      if (src.grad.empty()) src.grad = Tensor<T>(node_value(src).shape(), T{0});
      grads.push_back(&src.grad);
    }
    n.op->backward(refs, n.value, n.grad, grads);
    // Intermediate gradients are no longer needed once propagated.
    n.grad = Tensor<T>();
  }

  for (Node& n : nodes_) {
    if (n.kind != Kind::kLeaf || n.grad.empty()) continue;
    auto dst = n.external->grad();
    auto src = n.grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    n.grad = Tensor<T>();
  }
}

template <typename T>
const Tensor<T>& Graph<T>::value(NodeId id) const {
  if (!forward_done_) throw StateError("value() read before forward()");
  return node_value(at(id));
}

template <typename T>
const Tensor<T>& Graph<T>::output(const std::string& name) const {
  auto it = outputs_.find(name);
  if (it == outputs_.end()) throw StateError("no graph output named '" + name + "'");
  return value(it->second);
}

template <typename T>
const Tensor<T>& Graph<T>::grad(NodeId id) const {
  const Node& n = at(id);
  if (n.kind != Kind::kInput || !n.input_requires_grad) {
    throw StateError("gradient is only retained for inputs declared with requires_grad");
  }
  if (n.grad.empty()) throw StateError("no gradient recorded; run backward() first");
  return n.grad;
}

template <typename T>
NodeId Graph<T>::find(const std::string& name) const {
  auto it = names_.find(name);
  if (it == names_.end()) throw StateError("no graph node named '" + name + "'");
  return it->second;
}

template <typename T>
Tensor<T>& Graph<T>::leaf_tensor(NodeId id) {
  const Node& n = at(id);
  if (n.kind != Kind::kLeaf) throw StateError("node " + std::to_string(id) + " is not a leaf");
  return *n.external;
}

template <typename T>
Op<T>& Graph<T>::op(NodeId id) {
  const Node& n = at(id);
  if (n.kind != Kind::kOp) throw StateError("node " + std::to_string(id) + " is not an op");
  return *n.op;
}

template class Graph<float>;
template class Graph<double>;

GradCheckReport finite_diff_check(Graph<double>& graph, NodeId loss, const std::string& leaf,
                                  const std::map<std::string, Tensor<double>>& inputs,
                                  double tolerance, double h) {
  GradCheckReport report;
  report.leaf = leaf;
  const NodeId id = graph.find(leaf);

  auto local_inputs = inputs;
  Tensor<double>* target = nullptr;
  std::vector<double> analytic;
  if (local_inputs.count(leaf)) {
    target = &local_inputs.at(leaf);
    graph.forward(local_inputs);
    graph.backward(loss);
    auto g = graph.grad(id).data();
    analytic.assign(g.begin(), g.end());
  } else {
    target = &graph.leaf_tensor(id);
    if (!target->requires_grad()) {
      throw StateError("leaf '" + leaf + "' does not require grad");
    }
    target->zero_grad();
    graph.forward(local_inputs);
    graph.backward(loss);
    auto g = target->grad();
    analytic.assign(g.begin(), g.end());
  }

  auto eval = [&] {
    graph.forward(local_inputs);
    return graph.value(loss).item();
  };

  for (std::size_t j = 0; j < target->size(); ++j) {
    const double saved = (*target)[j];
    (*target)[j] = saved + h;
    const double fp = eval();
    (*target)[j] = saved - h;
    const double fm = eval();
    (*target)[j] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[j];
    const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
    const double rel = std::abs(a - numeric) / denom;
    if (j == 0 || rel > report.worst_rel_error) {
      report.worst_rel_error = rel;
      report.worst_index = j;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
    ++report.checked;
  }
  report.pass = report.worst_rel_error <= tolerance;
  return report;
}

}  // namespace eres
