#include <gtest/gtest.h>

#include <cmath>

#include "eres/optim.hpp"

using namespace eres;

namespace {

Tensor<double> vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor<double>(Shape{n}, std::move(v));
}

}  // namespace

TEST(Sgd, SingleUpdateMatchesHandComputation) {
  // v = 0.9 * 0.5 - 0.1 * (2 + 0.01 * 3) = 0.247;  w = 3.247
  auto w = vec({3.0});
  auto v = vec({0.5});
  const std::vector<double> g{2.0};
  sgd_update<double>(w, g, v, 0.1, 0.9, 0.01);
  EXPECT_NEAR(v[0], 0.247, 1e-15);
  EXPECT_NEAR(w[0], 3.247, 1e-15);
}

TEST(Sgd, ThreeStepTrajectoryOnQuadratic) {
  // f(w) = w^2 / 2 so g = w; lr 0.1, momentum 0.9, no decay.
  // step1: v=-0.1, w=0.9; step2: v=-0.18, w=0.72; step3: v=-0.234, w=0.486
  auto w = vec({1.0});
  Tensor<double> v(Shape{1});
  const double expect[] = {0.9, 0.72, 0.486};
  for (double e : expect) {
    const std::vector<double> g{w[0]};
    sgd_update<double>(w, g, v, 0.1, 0.9, 0.0);
    EXPECT_NEAR(w[0], e, 1e-14);
  }
}

TEST(Sgd, PureDecayShrinksGeometricallyWithoutMomentum) {
  auto w = vec({2.0, -4.0});
  Tensor<double> v(Shape{2});
  const std::vector<double> zero{0.0, 0.0};
  for (int k = 0; k < 10; ++k) sgd_update<double>(w, zero, v, 0.1, 0.0, 0.5);
  EXPECT_NEAR(w[0], 2.0 * std::pow(0.95, 10), 1e-14);
  EXPECT_NEAR(w[1], -4.0 * std::pow(0.95, 10), 1e-14);
}

TEST(Sgd, StepSkipsBuffersAndRespectsDecayBn) {
  Tensor<double> weight = vec({1.0});
  Tensor<double> gamma = vec({1.0});
  Tensor<double> buffer = vec({1.0});
  for (auto* t : {&weight, &gamma, &buffer}) t->set_requires_grad(true);
  const std::vector<NamedTensor<double>> params{{"w", &weight, TensorKind::kWeight, -1},
                                                {"gamma", &gamma, TensorKind::kBnAffine, -1},
                                                {"mean", &buffer, TensorKind::kBuffer, -1}};
  SgdState<double> s;
  s.lr = 0.1;
  s.momentum = 0.0;
  s.weight_decay = 0.1;
  s.decay_bn = false;
  sgd_step(params, s);
  EXPECT_NEAR(weight[0], 0.99, 1e-15);
  EXPECT_EQ(gamma[0], 1.0);
  EXPECT_EQ(buffer[0], 1.0);
  s.decay_bn = true;
  sgd_step(params, s);
  EXPECT_NEAR(gamma[0], 0.99, 1e-15);
  EXPECT_EQ(s.velocity.count("mean"), 0u);
}

TEST(Sgd, NonFiniteGradientAbortsWholeStep) {
  Tensor<double> a = vec({1.0});
  Tensor<double> b = vec({1.0});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  a.grad()[0] = 1.0;
  b.grad()[0] = std::nan("");
  const std::vector<NamedTensor<double>> params{{"a", &a, TensorKind::kWeight, -1},
                                                {"b", &b, TensorKind::kWeight, -1}};
  SgdState<double> s;
  try {
    sgd_step(params, s);
    FAIL() << "expected NumericFault";
  } catch (const NumericFault& e) {
    EXPECT_NE(std::string(e.what()).find("b"), std::string::npos);
  }
  EXPECT_EQ(a[0], 1.0);
  EXPECT_EQ(b[0], 1.0);
}

TEST(Sgd, L2PenaltyOverDecayedParameters) {
  Tensor<double> w = vec({1.0, 2.0});
  Tensor<double> gamma = vec({3.0});
  Tensor<double> buf = vec({100.0});
  const std::vector<NamedTensor<double>> params{{"w", &w, TensorKind::kWeight, -1},
                                                {"g", &gamma, TensorKind::kBnAffine, -1},
                                                {"m", &buf, TensorKind::kBuffer, -1}};
  SgdState<double> s;
  s.weight_decay = 0.2;
  EXPECT_NEAR(l2_penalty(params, s), 0.1 * 14.0, 1e-15);
  s.decay_bn = false;
  EXPECT_NEAR(l2_penalty(params, s), 0.1 * 5.0, 1e-15);
}

TEST(LrPolicy, StandardScheduleBoundaries) {
  LrPolicy p;
  EXPECT_DOUBLE_EQ(lr_for_epoch(p, 0), 0.1);
  EXPECT_DOUBLE_EQ(lr_for_epoch(p, 81), 0.1);
  EXPECT_NEAR(lr_for_epoch(p, 82), 0.01, 1e-18);
  EXPECT_NEAR(lr_for_epoch(p, 122), 0.01, 1e-18);
  EXPECT_NEAR(lr_for_epoch(p, 123), 0.001, 1e-18);
  EXPECT_NEAR(lr_for_epoch(p, 999), 0.001, 1e-18);
}

TEST(LrPolicy, AdaptiveScheduleCountsFromReset) {
  const LrPolicy p = on_block_discarded(LrPolicy{}, 100);
  EXPECT_EQ(p.phase, LrPolicy::Phase::kAdaptive);
  EXPECT_EQ(p.reset_epoch, 100);
  EXPECT_DOUBLE_EQ(lr_for_epoch(p, 100), 0.1);
  EXPECT_DOUBLE_EQ(lr_for_epoch(p, 140), 0.1);
  EXPECT_NEAR(lr_for_epoch(p, 141), 0.01, 1e-18);
  EXPECT_NEAR(lr_for_epoch(p, 161), 0.001, 1e-18);
  // A second discard restarts the clock.
  const LrPolicy q = on_block_discarded(p, 150);
  EXPECT_DOUBLE_EQ(lr_for_epoch(q, 160), 0.1);
  EXPECT_NEAR(lr_for_epoch(q, 191), 0.01, 1e-18);
}

TEST(LrPolicy, DiscardIsIdempotentWithinAnEpoch) {
  const LrPolicy p = on_block_discarded(LrPolicy{}, 30);
  const LrPolicy q = on_block_discarded(p, 30);
  EXPECT_EQ(q.reset_epoch, p.reset_epoch);
  EXPECT_EQ(q.phase, p.phase);
}

TEST(LrPolicy, Validation) {
  LrPolicy p;
  p.base_lr = 0.0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = LrPolicy{};
  p.standard_milestones = {50, 20};
  EXPECT_THROW(p.validate(), ConfigError);
  p = LrPolicy{};
  p.adaptive_milestones = {};
  EXPECT_NO_THROW(p.validate());
}
