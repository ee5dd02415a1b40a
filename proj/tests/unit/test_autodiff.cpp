#include <gtest/gtest.h>

#include <cmath>

#include "eres/graph.hpp"
#include "eres/ops.hpp"
#include "support.hpp"

using namespace eres;
using eres::test::random_tensor;

TEST(Tensor, RejectsZeroDimsAndSizeMismatch) {
  EXPECT_THROW(Tensor<float>(Shape{2, 0, 3}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), ShapeError);
  Tensor<float> t(Shape{2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t[5], 1.5f);
}

TEST(Tensor, ReshapeKeepsDataAndChecksCount) {
  Tensor<double> t(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  t.reshape(Shape{3, 2});
  EXPECT_EQ(t.dim(0), 3u);
  EXPECT_EQ(t[4], 5.0);
  EXPECT_THROW(t.reshape(Shape{4}), ShapeError);
}

TEST(Tensor, BitEqualDistinguishesSignedZero) {
  Tensor<float> a(Shape{1}, 0.0f);
  Tensor<float> b(Shape{1}, -0.0f);
  EXPECT_TRUE(a[0] == b[0]);
  EXPECT_FALSE(bit_equal(a, b));
  EXPECT_TRUE(bit_equal(a, a));
}

TEST(Graph, ForwardAndBackwardOfProduct) {
  Graph<double> g;
  const NodeId a = g.input("a", true);
  const NodeId b = g.input("b", true);
  const NodeId loss = sum(g, mul(g, a, b));
  Tensor<double> av(Shape{3}, std::vector<double>{1, 2, 3});
  Tensor<double> bv(Shape{3}, std::vector<double>{4, 5, 6});
  g.forward({{"a", av}, {"b", bv}});
  EXPECT_DOUBLE_EQ(g.value(loss).item(), 32.0);
  g.backward(loss);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(g.grad(a)[i], bv[i]);
    EXPECT_DOUBLE_EQ(g.grad(b)[i], av[i]);
  }
}

TEST(Graph, SharedNodeAccumulatesGradient) {
  // loss = sum(x*x + 3x) -> dloss/dx = 2x + 3
  Graph<double> g;
  const NodeId x = g.input("x", true);
  const NodeId loss = sum(g, add(g, mul(g, x, x), scale(g, x, 3.0)));
  Tensor<double> xv(Shape{2}, std::vector<double>{0.5, -2.0});
  g.forward({{"x", xv}});
  g.backward(loss);
  EXPECT_DOUBLE_EQ(g.grad(x)[0], 4.0);
  EXPECT_DOUBLE_EQ(g.grad(x)[1], -1.0);
}

TEST(Graph, LeafGradientsAccumulateIntoTensor) {
  Tensor<double> w(Shape{2}, std::vector<double>{1.0, 2.0});
  w.set_requires_grad(true);
  for (int pass = 0; pass < 2; ++pass) {
    Graph<double> g;
    const NodeId loss = sum(g, scale(g, g.leaf(w, "w"), 2.0));
    g.forward({});
    g.backward(loss);
  }
  EXPECT_DOUBLE_EQ(w.grad()[0], 4.0);
  w.zero_grad();
  EXPECT_DOUBLE_EQ(w.grad()[1], 0.0);
}

TEST(Graph, BackwardBeforeForwardIsStateError) {
  Graph<double> g;
  const NodeId x = g.input("x", true);
  const NodeId loss = sum(g, x);
  EXPECT_THROW(g.backward(loss), StateError);
}

TEST(Graph, MissingInputBindingIsReported) {
  Graph<double> g;
  const NodeId x = g.input("x");
  sum(g, x);
  EXPECT_THROW(g.forward({}), Error);
}

TEST(Graph, NonFiniteForwardRaisesNumericFault) {
  Graph<double> g;
  const NodeId x = g.input("x");
  const NodeId y = mul(g, x, x);
  sum(g, y);
  Tensor<double> xv(Shape{1}, 1e200);
  EXPECT_THROW(g.forward({{"x", xv}}), NumericFault);
}

TEST(Graph, ShapeMismatchNamesTheOp) {
  Graph<double> g;
  const NodeId a = g.input("a");
  const NodeId b = g.input("b");
  add(g, a, b);
  try {
    g.forward({{"a", Tensor<double>(Shape{2})}, {"b", Tensor<double>(Shape{3})}});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos) << e.what();
  }
}

TEST(Graph, ScalarLossHasUnitGradient) {
  Graph<double> g;
  const NodeId x = g.input("x", true);
  const NodeId loss = sum(g, x);
  g.forward({{"x", Tensor<double>(Shape{4}, 3.0)}});
  g.backward(loss);
  for (double v : g.grad(x).data()) EXPECT_EQ(v, 1.0);
}

TEST(FiniteDiff, AgreesOnSmoothComposition) {
  std::mt19937_64 rng(3);
  for (const Shape& shape : {Shape{5}, Shape{2, 3}, Shape{2, 2, 3}}) {
    Graph<double> g;
    Tensor<double> w = random_tensor(shape, rng);
    w.set_requires_grad(true);
    const NodeId x = g.input("x", true);
    const NodeId wl = g.leaf(w, "w");
    const NodeId loss = eres::test::weighted_sum(g, mul(g, add(g, x, wl), mul(g, x, wl)), shape, rng);
    std::map<std::string, Tensor<double>> in{{"x", random_tensor(shape, rng)}};
    EXPECT_TRUE(finite_diff_check(g, loss, "x", in, 1e-6).pass);
    EXPECT_TRUE(finite_diff_check(g, loss, "w", in, 1e-6).pass);
  }
}

TEST(FiniteDiff, DetectsWrongGradient) {
  // An op with a deliberately wrong backward must be flagged.
  struct BadSquare final : Op<double> {
    std::string name() const override { return "bad_square"; }
    Tensor<double> forward(const TensorRefs<double>& in) override {
      Tensor<double> out(in[0]->shape());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*in[0])[i] * (*in[0])[i];
      return out;
    }
    void backward(const TensorRefs<double>& in, const Tensor<double>&, const Tensor<double>& go,
                  const GradRefs<double>& grads) override {
      for (std::size_t i = 0; i < go.size(); ++i) (*grads[0])[i] += 3.0 * (*in[0])[i] * go[i];
    }
  };
  Graph<double> g;
  const NodeId x = g.input("x", true);
  const NodeId loss = sum(g, g.emplace<BadSquare>({x}));
  std::mt19937_64 rng(1);
  const auto report = finite_diff_check(g, loss, "x", {{"x", random_tensor(Shape{4}, rng, 0.5, 1.0)}}, 1e-6);
  EXPECT_FALSE(report.pass);
  EXPECT_GT(report.worst_rel_error, 0.1);
}
