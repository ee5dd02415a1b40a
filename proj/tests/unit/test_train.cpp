#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "eres/train.hpp"

using namespace eres;

namespace {

NetworkSpec tiny_spec(double eps) {
  NetworkSpec s;
  s.blocks_per_group = {2, 2, 2};
  s.widths = {4, 8, 8};
  s.image_size = 8;
  s.classes = 2;
  s.gate.epsilon = eps;
  return s;
}

Dataset tiny_data(std::size_t n, std::uint64_t seed, std::size_t classes = 2) {
  SyntheticSpec spec;
  spec.classes = classes;
  spec.image_size = 8;
  Dataset d = synthetic_dataset(spec, n, seed);
  normalize(d, channel_stats(d));
  return d;
}

TrainConfig quick_config(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.augment.crop = 8;
  c.lr.standard_milestones = {};
  c.lr.adaptive_milestones = {};
  return c;
}

std::size_t count_fields(const std::string& line) {
  return static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
}

}  // namespace

TEST(Percentile, LinearInterpolation) {
  const std::vector<double> v{1, 2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(percentile(v, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(percentile(v, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(percentile(v, 1.0), 5.0);
  EXPECT_NEAR(percentile(v, 0.07), 1.28, 1e-12);
  EXPECT_NEAR(percentile(v, 0.93), 4.72, 1e-12);
  EXPECT_DOUBLE_EQ(percentile({7.0}, 0.93), 7.0);
}

TEST(WeightStats, CoversConvWeightsAndBias) {
  auto m = Model<double>::build(tiny_spec(1.0), 1);
  auto& b = m.blocks()[1];
  b.conv1.weight.fill(0.0);
  b.conv2.weight.fill(0.0);
  b.conv2.bias->fill(0.0);
  (*b.conv2.bias)[2] = -3.0;
  b.conv1.weight[5] = 2.0;
  b.bn1.gamma.fill(100.0);  // not part of the statistic
  const WeightStats s = weight_stats(b, 4);
  EXPECT_EQ(s.min, -3.0);
  EXPECT_EQ(s.max, 2.0);
  EXPECT_EQ(s.p50, 0.0);
  EXPECT_EQ(s.max_abs(), 3.0);
  EXPECT_EQ(block_max_abs(b), 3.0);
  EXPECT_EQ(s.epoch, 4);
}

TEST(Collapse, NeedsConsecutiveQualifyingEpochs) {
  std::vector<BlockSpec> blocks(4);
  for (std::size_t i = 0; i < 4; ++i) blocks[i].index = i;
  blocks[0].status.gate_off_history = {1.0, 1.0};
  blocks[1].status.gate_off_history = {1.0, 0.99};
  blocks[2].status.gate_off_history = {1.0};
  blocks[3].status.gate_off_history = {1.0, 1.0};
  blocks[3].gated = false;
  CollapsePolicy p;
  EXPECT_EQ(detect_collapse(blocks, p), (std::vector<std::size_t>{0}));
  p.threshold = 0.99;
  EXPECT_EQ(detect_collapse(blocks, p), (std::vector<std::size_t>{0, 1}));
  p.confirm_epochs = 1;
  EXPECT_EQ(detect_collapse(blocks, p), (std::vector<std::size_t>{0, 1, 2}));
  blocks[0].status.mark_collapsed(1);
  EXPECT_EQ(detect_collapse(blocks, p), (std::vector<std::size_t>{1, 2}));
}

TEST(Collapse, PolicyValidation) {
  CollapsePolicy p;
  p.threshold = 0.0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = CollapsePolicy{};
  p.confirm_epochs = 0;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(DiscardRatio, CountsCollapsedAndPrunedGatedBlocks) {
  auto m = Model<float>::build(tiny_spec(1.0), 1);
  EXPECT_EQ(m.prunable_count(), 4u);
  EXPECT_EQ(discard_ratio(m), 0.0);
  m.blocks()[1].spec.status.mark_collapsed(0);
  EXPECT_DOUBLE_EQ(discard_ratio(m), 0.25);
  m.blocks()[3].spec.status.mark_collapsed(0);
  const auto r = m.without_blocks({3});
  EXPECT_DOUBLE_EQ(discard_ratio(r), 0.5);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.weight_decay = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Trainer, SameSeedIsBitReproducible) {
  const Dataset d = tiny_data(40, 1);
  auto a = Model<float>::build(tiny_spec(0.5), 9);
  auto b = Model<float>::build(tiny_spec(0.5), 9);
  Trainer<float> ta(a, quick_config(2));
  Trainer<float> tb(b, quick_config(2));
  const auto la = train(ta, d, nullptr);
  const auto lb = train(tb, d, nullptr);
  ASSERT_EQ(la.size(), 2u);
  EXPECT_EQ(la.back().train_loss, lb.back().train_loss);
  const auto pa = a.named_tensors();
  const auto pb = b.named_tensors();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(bit_equal(*pa[i].tensor, *pb[i].tensor)) << pa[i].name;
}

TEST(Trainer, LearnsSeparableData) {
  const Dataset train_set = tiny_data(256, 2);
  const Dataset val = tiny_data(128, 3);
  auto m = Model<float>::build(tiny_spec(1e-3), 4);
  TrainConfig c = quick_config(6);
  c.augment.enabled = false;
  Trainer<float> t(m, c);
  const auto logs = train(t, train_set, &val);
  EXPECT_LT(logs.back().train_loss, logs.front().train_loss);
  EXPECT_LT(logs.back().val_error, 0.25);
}

TEST(Trainer, HugeEpsilonCollapsesEveryGatedBlockAndResetsLr) {
  const Dataset d = tiny_data(33, 5);  // 33 % 16 == 1: the lone sample is dropped
  auto m = Model<double>::build(tiny_spec(1e6), 1);
  TrainConfig c = quick_config(3);
  c.lr.adaptive_milestones = {1};
  Trainer<double> t(m, c);
  const EpochLog e0 = t.run_epoch(d, nullptr);
  EXPECT_TRUE(e0.newly_collapsed.empty());
  EXPECT_TRUE(std::isnan(e0.val_error));
  for (const auto& g : e0.gates) EXPECT_EQ(g.gate_off_fraction, 1.0);
  const EpochLog e1 = t.run_epoch(d, nullptr);
  EXPECT_EQ(e1.newly_collapsed, (std::vector<std::size_t>{0, 1, 3, 5}));
  EXPECT_DOUBLE_EQ(e1.discard_ratio, 1.0);
  for (std::size_t i : e1.newly_collapsed) {
    EXPECT_EQ(m.blocks()[i].spec.status.state, BlockState::kCollapsed);
    EXPECT_EQ(m.blocks()[i].spec.status.collapsed_epoch, 1);
  }
  EXPECT_EQ(t.lr_policy().phase, LrPolicy::Phase::kAdaptive);
  EXPECT_EQ(t.lr_policy().reset_epoch, 2);
  const EpochLog e2 = t.run_epoch(d, nullptr);
  EXPECT_DOUBLE_EQ(e2.lr, 0.1);
  EXPECT_TRUE(e2.newly_collapsed.empty());
}

TEST(Trainer, ClosedGateParametersFollowPureDecay) {
  // With every gate shut the task gradient of gated-block parameters is zero,
  // so SGD reduces to w_k = c_k * w_0 with c_k = (M^k)[0][0],
  // M = [[1 - lr*wd, momentum], [-lr*wd, momentum]].
  const Dataset d = tiny_data(16, 6);
  auto m = Model<double>::build(tiny_spec(1e6), 3);
  const auto w0 = m.blocks()[1].conv1.weight;
  TrainConfig c = quick_config(5);
  c.augment.enabled = false;
  Trainer<double> t(m, c);
  train(t, d, nullptr);
  const double a = 0.1 * 0.0002;
  double mw = 1.0, mv = 0.0;  // first column of M^k
  for (int k = 0; k < 5; ++k) {
    const double nw = (1.0 - a) * mw + 0.9 * mv;
    const double nv = -a * mw + 0.9 * mv;
    mw = nw;
    mv = nv;
  }
  const auto& w = m.blocks()[1].conv1.weight;
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(w[i], mw * w0[i], 1e-15);
  for (double g : m.blocks()[1].bn1.gamma.data()) EXPECT_NEAR(g, mw, 1e-15);
}

TEST(Metrics, RowsHaveFixedColumnsAndSummary) {
  const Dataset d = tiny_data(32, 7);
  auto m = Model<float>::build(tiny_spec(1.0), 1);
  Trainer<float> t(m, quick_config(1));
  const EpochLog log = t.run_epoch(d, nullptr);
  std::vector<BlockSpec> specs;
  for (const auto& b : m.blocks()) specs.push_back(b.spec);
  std::ostringstream out;
  write_metrics(out, log, specs);
  std::istringstream in(out.str());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), specs.size() + 1);
  EXPECT_EQ(count_fields(kMetricsHeader), 13u);
  for (const auto& l : lines) EXPECT_EQ(count_fields(l), 13u) << l;
  EXPECT_EQ(lines[2].rfind("0,2,,,", 0), 0u);  // transition block has no gate
  EXPECT_EQ(lines.back().rfind("0,all,", 0), 0u);
  EXPECT_EQ(lines.back().back(), '0');  // discard ratio
  EXPECT_NE(lines.back().find(",,0.1,"), std::string::npos);  // empty val_error
}

TEST(Evaluate, CountsWrongPredictions) {
  auto m = Model<double>::build(tiny_spec(1.0), 1);
  const Dataset d = tiny_data(20, 8);
  const double e = evaluate(m, d, 7);
  EXPECT_GE(e, 0.0);
  EXPECT_LE(e, 1.0);
  EXPECT_DOUBLE_EQ(e * 20.0, std::round(e * 20.0));
  EXPECT_EQ(evaluate(m, d, 7), evaluate(m, d, 500));
}
