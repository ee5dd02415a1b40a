#include "eres/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "eres/ops.hpp"

namespace eres {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeom {
  std::size_t n, c, h, w;     // input
  std::size_t o, k;           // filters, kernel size
  std::size_t ho, wo;         // output spatial
  std::size_t stride, pad;
  std::size_t rows() const { return c * k * k; }
  std::size_t cols() const { return ho * wo; }
};

template <typename T>
ConvGeom conv_geometry(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                       std::size_t stride, std::size_t pad) {
  if (x.rank() != 4) throw ShapeError("conv2d: input must be NCHW, got " + shape_str(x.shape()));
  if (w.rank() != 4) {
    throw ShapeError("conv2d: weight must be [outC,inC,kH,kW], got " + shape_str(w.shape()));
  }
  if (w.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) +
                     " channels but weight expects " + std::to_string(w.dim(1)) + " (input " +
                     shape_str(x.shape()) + ", weight " + shape_str(w.shape()) + ")");
  }
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d: only square kernels are supported");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (bias && (bias->rank() != 1 || bias->dim(0) != w.dim(0))) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias->shape()) + " does not match " +
                     std::to_string(w.dim(0)) + " output channels");
  }
  const std::size_t k = w.dim(2);
  if (x.dim(2) + 2 * pad < k || x.dim(3) + 2 * pad < k) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                     shape_str(x.shape()));
  }
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), k, 0, 0, stride, pad};
  g.ho = conv_out_dim(g.h, k, stride, pad);
  g.wo = conv_out_dim(g.w, k, stride, pad);
  return g;
}

// col is [C*k*k, Ho*Wo] row-major.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.c; ++c) {
    const T* plane = x + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = col + ((c * g.k + ki) * g.k + kj) * g.cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - pad;
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.wo, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - pad;
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* x) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.c; ++c) {
    T* plane = x + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((c * g.k + ki) * g.k + kj) * g.cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * g.w;
          const T* src = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - pad;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

void require_rank(const std::string& op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw ShapeError(op + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

}  // namespace

std::size_t conv_out_dim(std::size_t in, std::size_t kernel, std::size_t stride,
                         std::size_t pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                         std::size_t stride, std::size_t pad) {
  const ConvGeom g = conv_geometry(x, w, bias, stride, pad);
  Tensor<T> out(Shape{g.n, g.o, g.ho, g.wo});
  std::vector<T> col(g.rows() * g.cols());
  ConstMatMap<T> wm(w.ptr(), g.o, g.rows());
  MatMap<T> cm(col.data(), g.rows(), g.cols());
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(x.ptr() + n * g.c * g.h * g.w, g, col.data());
    MatMap<T> om(out.ptr() + n * g.o * g.cols(), g.o, g.cols());
    om.noalias() = wm * cm;
    if (bias) {
      for (std::size_t o = 0; o < g.o; ++o) om.row(o).array() += (*bias)[o];
    }
  }
  return out;
}

template <typename T>
Tensor<T> Conv2dOp<T>::forward(const TensorRefs<T>& in) {
  return conv2d_forward(*in[0], *in[1], in.size() > 2 ? in[2] : nullptr, stride_, pad_);
}

template <typename T>
void Conv2dOp<T>::backward(const TensorRefs<T>& in, const Tensor<T>&, const Tensor<T>& grad_out,
                           const GradRefs<T>& grads) {
  const Tensor<T>& x = *in[0];
  const Tensor<T>& w = *in[1];
  const bool has_bias = in.size() > 2;
  const ConvGeom g = conv_geometry(x, w, has_bias ? in[2] : nullptr, stride_, pad_);
  Tensor<T>* gx = grads[0];
  Tensor<T>* gw = grads[1];
  Tensor<T>* gb = has_bias ? grads[2] : nullptr;

  std::vector<T> col(g.rows() * g.cols());
  MatMap<T> cm(col.data(), g.rows(), g.cols());
  ConstMatMap<T> wm(w.ptr(), g.o, g.rows());

  // Input-index order: x, then weight, then bias; samples in order.
  if (gx) {
    for (std::size_t n = 0; n < g.n; ++n) {
      ConstMatMap<T> gom(grad_out.ptr() + n * g.o * g.cols(), g.o, g.cols());
      cm.noalias() = wm.transpose() * gom;
      col2im_add(col.data(), g, gx->ptr() + n * g.c * g.h * g.w);
    }
  }
  if (gw) {
    MatMap<T> gwm(gw->ptr(), g.o, g.rows());
    for (std::size_t n = 0; n < g.n; ++n) {
      im2col(x.ptr() + n * g.c * g.h * g.w, g, col.data());
      ConstMatMap<T> gom(grad_out.ptr() + n * g.o * g.cols(), g.o, g.cols());
      gwm.noalias() += gom * cm.transpose();
    }
  }
  if (gb) {
    for (std::size_t n = 0; n < g.n; ++n) {
      const T* go = grad_out.ptr() + n * g.o * g.cols();
      for (std::size_t o = 0; o < g.o; ++o) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.cols(); ++i) acc += go[o * g.cols() + i];
        (*gb)[o] += static_cast<T>(acc);
      }
    }
  }
}

// --------------------------------------------------------------------------

template <typename T>
BatchNormState<T> BatchNormState<T>::make(std::size_t channels, double momentum, double eps) {
  BatchNormState s;
  s.gamma = Tensor<T>(Shape{channels}, T{1});
  s.beta = Tensor<T>(Shape{channels}, T{0});
  s.running_mean = Tensor<T>(Shape{channels}, T{0});
  s.running_var = Tensor<T>(Shape{channels}, T{1});
  s.momentum = momentum;
  s.eps = eps;
  return s;
}

template <typename T>
Tensor<T> BatchNormOp<T>::forward(const TensorRefs<T>& in) {
  const Tensor<T>& x = *in[0];
  const Tensor<T>& gamma = *in[1];
  const Tensor<T>& beta = *in[2];
  if (x.rank() < 2) throw ShapeError("batch_norm: input must be [N,C,...], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0);
  const std::size_t c = x.dim(1);
  const std::size_t s = x.size() / (n * c);
  if (gamma.size() != c || beta.size() != c || state_->running_mean.size() != c) {
    throw ShapeError("batch_norm: " + std::to_string(c) + " channels in input " +
                     shape_str(x.shape()) + " but parameters hold " + std::to_string(gamma.size()));
  }
  if (mode_ == BnMode::kTrain && n < 2) {
    throw ShapeError("batch_norm: batch size " + std::to_string(n) +
                     " in train mode; at least 2 samples are required");
  }
  const double m = static_cast<double>(n * s);
  Tensor<T> out(x.shape());
  xhat_.assign(x.size(), T{0});
  inv_std_.assign(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0;
    double var = 0.0;
    if (mode_ == BnMode::kTrain) {
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.ptr() + (i * c + ch) * s;
        for (std::size_t j = 0; j < s; ++j) mean += p[j];
      }
      mean /= m;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.ptr() + (i * c + ch) * s;
        for (std::size_t j = 0; j < s; ++j) {
          const double d = p[j] - mean;
          var += d * d;
        }
      }
      var /= m;
      const double mom = state_->momentum;
      state_->running_mean[ch] =
          static_cast<T>(mom * state_->running_mean[ch] + (1.0 - mom) * mean);
      state_->running_var[ch] =
          static_cast<T>(mom * state_->running_var[ch] + (1.0 - mom) * var * m / (m - 1.0));
    } else {
      mean = state_->running_mean[ch];
      var = state_->running_var[ch];
    }
    const double inv_std = 1.0 / std::sqrt(var + state_->eps);
    inv_std_[ch] = inv_std;
    const T g = gamma[ch];
    const T b = beta[ch];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t base = (i * c + ch) * s;
      for (std::size_t j = 0; j < s; ++j) {
        const T xh = static_cast<T>((x[base + j] - mean) * inv_std);
        xhat_[base + j] = xh;
        out[base + j] = g * xh + b;
      }
    }
  }
  return out;
}

template <typename T>
void BatchNormOp<T>::backward(const TensorRefs<T>& in, const Tensor<T>&,
                              const Tensor<T>& grad_out, const GradRefs<T>& grads) {
  const Tensor<T>& x = *in[0];
  const Tensor<T>& gamma = *in[1];
  const std::size_t n = x.dim(0);
  const std::size_t c = x.dim(1);
  const std::size_t s = x.size() / (n * c);
  const double m = static_cast<double>(n * s);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t base = (i * c + ch) * s;
      for (std::size_t j = 0; j < s; ++j) {
        sum_dy += grad_out[base + j];
        sum_dy_xhat += static_cast<double>(grad_out[base + j]) * xhat_[base + j];
      }
    }
    if (Tensor<T>* gx = grads[0]) {
      const double scale = gamma[ch] * inv_std_[ch];
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t base = (i * c + ch) * s;
        for (std::size_t j = 0; j < s; ++j) {
          double d;
          if (mode_ == BnMode::kTrain) {
            d = scale * (grad_out[base + j] - sum_dy / m - xhat_[base + j] * sum_dy_xhat / m);
          } else {
            d = scale * grad_out[base + j];
          }
          (*gx)[base + j] += static_cast<T>(d);
        }
      }
    }
    if (grads[1]) (*grads[1])[ch] += static_cast<T>(sum_dy_xhat);
    if (grads[2]) (*grads[2])[ch] += static_cast<T>(sum_dy);
  }
}

// --------------------------------------------------------------------------

template <typename T>
Tensor<T> ReluOp<T>::forward(const TensorRefs<T>& in) {
  Tensor<T> out(in[0]->shape());
  auto a = in[0]->data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] > T{0} ? a[i] : T{0};
  return out;
}

template <typename T>
void ReluOp<T>::backward(const TensorRefs<T>& in, const Tensor<T>&, const Tensor<T>& grad_out,
                         const GradRefs<T>& grads) {
  if (!grads[0]) return;
  auto a = in[0]->data();
  auto go = grad_out.data();
  auto d = grads[0]->data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (a[i] > T{0}) d[i] += go[i];
  }
}

// --------------------------------------------------------------------------

template <typename T>
Tensor<T> LinearOp<T>::forward(const TensorRefs<T>& in) {
  const Tensor<T>& x = *in[0];
  const Tensor<T>& w = *in[1];
  const Tensor<T>& b = *in[2];
  require_rank(name(), x.shape(), 2);
  require_rank(name(), w.shape(), 2);
  if (w.dim(1) != x.dim(1) || b.size() != w.dim(0)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(w.shape()) + " and bias " + shape_str(b.shape()));
  }
  const std::size_t n = x.dim(0);
  const std::size_t out_dim = w.dim(0);
  Tensor<T> out(Shape{n, out_dim});
  ConstMatMap<T> xm(x.ptr(), n, x.dim(1));
  ConstMatMap<T> wm(w.ptr(), out_dim, w.dim(1));
  MatMap<T> om(out.ptr(), n, out_dim);
  om.noalias() = xm * wm.transpose();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < out_dim; ++o) om(i, o) += b[o];
  }
  return out;
}

template <typename T>
void LinearOp<T>::backward(const TensorRefs<T>& in, const Tensor<T>&, const Tensor<T>& grad_out,
                           const GradRefs<T>& grads) {
  const Tensor<T>& x = *in[0];
  const Tensor<T>& w = *in[1];
  const std::size_t n = x.dim(0);
  const std::size_t out_dim = w.dim(0);
  ConstMatMap<T> xm(x.ptr(), n, x.dim(1));
  ConstMatMap<T> wm(w.ptr(), out_dim, w.dim(1));
  ConstMatMap<T> gom(grad_out.ptr(), n, out_dim);
  if (grads[0]) {
    MatMap<T> gx(grads[0]->ptr(), n, x.dim(1));
    gx.noalias() += gom * wm;
  }
  if (grads[1]) {
    MatMap<T> gw(grads[1]->ptr(), out_dim, w.dim(1));
    gw.noalias() += gom.transpose() * xm;
  }
  if (grads[2]) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += gom(i, o);
      (*grads[2])[o] += static_cast<T>(acc);
    }
  }
}

// --------------------------------------------------------------------------

template <typename T>
Tensor<T> GlobalAvgPoolOp<T>::forward(const TensorRefs<T>& in) {
  const Tensor<T>& x = *in[0];
  require_rank(name(), x.shape(), 4);
  const std::size_t n = x.dim(0), c = x.dim(1), s = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    const T* p = x.ptr() + i * s;
    for (std::size_t j = 0; j < s; ++j) acc += p[j];
    out[i] = static_cast<T>(acc / static_cast<double>(s));
  }
  return out;
}

template <typename T>
void GlobalAvgPoolOp<T>::backward(const TensorRefs<T>& in, const Tensor<T>&,
                                  const Tensor<T>& grad_out, const GradRefs<T>& grads) {
  if (!grads[0]) return;
  const Tensor<T>& x = *in[0];
  const std::size_t nc = x.dim(0) * x.dim(1), s = x.dim(2) * x.dim(3);
  const T inv = T{1} / static_cast<T>(s);
  for (std::size_t i = 0; i < nc; ++i) {
    const T g = grad_out[i] * inv;
    T* d = grads[0]->ptr() + i * s;
    for (std::size_t j = 0; j < s; ++j) d[j] += g;
  }
}

// --------------------------------------------------------------------------

template <typename T>
Tensor<T> SoftmaxCrossEntropyOp<T>::forward(const TensorRefs<T>& in) {
  const Tensor<T>& z = *in[0];
  require_rank(name(), z.shape(), 2);
  const std::size_t n = z.dim(0), k = z.dim(1);
  if (labels_.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels_.size()) +
                     " labels for a batch of " + std::to_string(n));
  }
  probs_.assign(n * k, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels_[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(label) +
                       " out of range for " + std::to_string(k) + " classes (sample " +
                       std::to_string(i) + ")");
    }
    const T* row = z.ptr() + i * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double se = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double e = std::exp(row[j] - mx);
      probs_[i * k + j] = e;
      se += e;
    }
    for (std::size_t j = 0; j < k; ++j) probs_[i * k + j] /= se;
    total += std::log(se) + mx - row[label];
  }
  return Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n)));
}

template <typename T>
void SoftmaxCrossEntropyOp<T>::backward(const TensorRefs<T>& in, const Tensor<T>&,
                                        const Tensor<T>& grad_out, const GradRefs<T>& grads) {
  if (!grads[0]) return;
  const std::size_t n = in[0]->dim(0), k = in[0]->dim(1);
  const double scale = static_cast<double>(grad_out[0]) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double d = probs_[i * k + j];
      if (static_cast<int>(j) == labels_[i]) d -= 1.0;
      (*grads[0])[i * k + j] += static_cast<T>(d * scale);
    }
  }
}

// --------------------------------------------------------------------------

template <typename T>
Tensor<T> ShortcutOp<T>::forward(const TensorRefs<T>& in) {
  const Tensor<T>& x = *in[0];
  require_rank(name(), x.shape(), 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_channels_ < c) {
    throw ShapeError("shortcut: cannot map " + std::to_string(c) + " channels to " +
                     std::to_string(out_channels_));
  }
  const std::size_t ho = (h + stride_ - 1) / stride_;
  const std::size_t wo = (w + stride_ - 1) / stride_;
  Tensor<T> out(Shape{n, out_channels_, ho, wo});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = x.ptr() + (i * c + ch) * h * w;
      T* dst = out.ptr() + (i * out_channels_ + ch) * ho * wo;
      for (std::size_t y = 0; y < ho; ++y) {
        for (std::size_t xx = 0; xx < wo; ++xx) dst[y * wo + xx] = src[y * stride_ * w + xx * stride_];
      }
    }
  }
  return out;
}

template <typename T>
void ShortcutOp<T>::backward(const TensorRefs<T>& in, const Tensor<T>& out,
                             const Tensor<T>& grad_out, const GradRefs<T>& grads) {
  if (!grads[0]) return;
  const Tensor<T>& x = *in[0];
  const std::size_t n = x.dim(0), c = x.dim(1), w = x.dim(3);
  const std::size_t ho = out.dim(2), wo = out.dim(3);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = grad_out.ptr() + (i * out_channels_ + ch) * ho * wo;
      T* dst = grads[0]->ptr() + (i * c + ch) * x.dim(2) * w;
      for (std::size_t y = 0; y < ho; ++y) {
        for (std::size_t xx = 0; xx < wo; ++xx) dst[y * stride_ * w + xx * stride_] += src[y * wo + xx];
      }
    }
  }
}

// --------------------------------------------------------------------------

template <typename T>
NodeId conv2d(Graph<T>& g, NodeId x, Conv2dParams<T>& p) {
  std::vector<NodeId> ins{x, g.leaf(p.weight)};
  if (p.bias) ins.push_back(g.leaf(*p.bias));
  return g.template emplace<Conv2dOp<T>>(std::move(ins), p.stride, p.padding);
}

template <typename T>
NodeId batch_norm(Graph<T>& g, NodeId x, BatchNormState<T>& s, BnMode mode) {
  return g.template emplace<BatchNormOp<T>>({x, g.leaf(s.gamma), g.leaf(s.beta)}, s, mode);
}

template <typename T>
NodeId linear(Graph<T>& g, NodeId x, LinearParams<T>& p) {
  return g.template emplace<LinearOp<T>>({x, g.leaf(p.weight), g.leaf(p.bias)});
}

#define ERES_INSTANTIATE_LAYERS(T)                                                         \
  template struct BatchNormState<T>;                                                       \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, \
                                    std::size_t, std::size_t);                             \
  template class Conv2dOp<T>;                                                              \
  template class BatchNormOp<T>;                                                           \
  template class ReluOp<T>;                                                                \
  template class LinearOp<T>;                                                              \
  template class GlobalAvgPoolOp<T>;                                                       \
  template class SoftmaxCrossEntropyOp<T>;                                                 \
  template class ShortcutOp<T>;                                                            \
  template NodeId conv2d(Graph<T>&, NodeId, Conv2dParams<T>&);                             \
  template NodeId batch_norm(Graph<T>&, NodeId, BatchNormState<T>&, BnMode);               \
  template NodeId linear(Graph<T>&, NodeId, LinearParams<T>&);

ERES_INSTANTIATE_LAYERS(float)
ERES_INSTANTIATE_LAYERS(double)

}  // namespace eres
