#include "eres/ops.hpp"

namespace eres {

void require_same_shape(const std::string& op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw ShapeError(op + ": operand shapes differ, " + shape_str(a) + " vs " + shape_str(b));
  }
}

template <typename T>
Tensor<T> IdentityOp<T>::forward(const TensorRefs<T>& in) {
  Tensor<T> out(in[0]->shape(), std::vector<T>(in[0]->data().begin(), in[0]->data().end()));
  return out;
}

template <typename T>
void IdentityOp<T>::backward(const TensorRefs<T>&, const Tensor<T>&, const Tensor<T>& grad_out,
                             const GradRefs<T>& grads) {
  if (!grads[0]) return;
  auto g = grads[0]->data();
  auto go = grad_out.data();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
}

template <typename T>
Tensor<T> AddOp<T>::forward(const TensorRefs<T>& in) {
  require_same_shape(name(), in[0]->shape(), in[1]->shape());
  Tensor<T> out(in[0]->shape());
  auto a = in[0]->data();
  auto b = in[1]->data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
  return out;
}

template <typename T>
void AddOp<T>::backward(const TensorRefs<T>&, const Tensor<T>&, const Tensor<T>& grad_out,
                        const GradRefs<T>& grads) {
  auto go = grad_out.data();
  for (Tensor<T>* g : grads) {
    if (!g) continue;
    auto d = g->data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i];
  }
}

template <typename T>
Tensor<T> MulOp<T>::forward(const TensorRefs<T>& in) {
  require_same_shape(name(), in[0]->shape(), in[1]->shape());
  Tensor<T> out(in[0]->shape());
  auto a = in[0]->data();
  auto b = in[1]->data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
  return out;
}

template <typename T>
void MulOp<T>::backward(const TensorRefs<T>& in, const Tensor<T>&, const Tensor<T>& grad_out,
                        const GradRefs<T>& grads) {
  auto go = grad_out.data();
  for (std::size_t k = 0; k < 2; ++k) {
    if (!grads[k]) continue;
    auto other = in[1 - k]->data();
    auto d = grads[k]->data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] * other[i];
  }
}

template <typename T>
Tensor<T> ScaleOp<T>::forward(const TensorRefs<T>& in) {
  Tensor<T> out(in[0]->shape());
  auto a = in[0]->data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = factor_ * a[i];
  return out;
}

template <typename T>
void ScaleOp<T>::backward(const TensorRefs<T>&, const Tensor<T>&, const Tensor<T>& grad_out,
                          const GradRefs<T>& grads) {
  if (!grads[0]) return;
  auto go = grad_out.data();
  auto d = grads[0]->data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor_ * go[i];
}

template <typename T>
Tensor<T> SumOp<T>::forward(const TensorRefs<T>& in) {
  double acc = 0.0;
  for (T v : in[0]->data()) acc += v;
  return Tensor<T>::scalar(static_cast<T>(acc));
}

template <typename T>
void SumOp<T>::backward(const TensorRefs<T>&, const Tensor<T>&, const Tensor<T>& grad_out,
                        const GradRefs<T>& grads) {
  if (!grads[0]) return;
  const T go = grad_out[0];
  for (T& d : grads[0]->data()) d += go;
}

template class IdentityOp<float>;
template class IdentityOp<double>;
template class AddOp<float>;
template class AddOp<double>;
template class MulOp<float>;
template class MulOp<double>;
template class ScaleOp<float>;
template class ScaleOp<double>;
template class SumOp<float>;
template class SumOp<double>;

}  // namespace eres
