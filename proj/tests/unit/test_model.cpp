#include <gtest/gtest.h>

#include <cmath>
#include <regex>
#include <set>

#include "eres/model.hpp"
#include "eres/ops.hpp"
#include "eres/train.hpp"
#include "support.hpp"

using namespace eres;
using eres::test::random_tensor;

namespace {

NetworkSpec small_spec(std::size_t n = 1, double eps = 2.5) {
  NetworkSpec s;
  s.blocks_per_group = {n, n, n};
  s.widths = {4, 8, 16};
  s.image_size = 8;
  s.gate.epsilon = eps;
  return s;
}

// Inference parameters of the three-group topology, counted layer by layer.
std::size_t closed_form_params(std::size_t n, std::size_t w1, std::size_t w2, std::size_t w3,
                               std::size_t in = 3, std::size_t classes = 10) {
  auto conv = [](std::size_t i, std::size_t o) { return 3 * 3 * i * o; };
  auto bn = [](std::size_t c) { return 2 * c; };
  auto block = [&](std::size_t i, std::size_t o) { return bn(i) + conv(i, o) + bn(o) + conv(o, o) + o; };
  std::size_t total = conv(in, w1);
  total += n * block(w1, w1);
  total += block(w1, w2) + (n - 1) * block(w2, w2);
  total += block(w2, w3) + (n - 1) * block(w3, w3);
  total += bn(w3) + classes * w3 + classes;
  return total;
}

// Pre-activation block without any gate.
NodeId plain_block(Graph<double>& g, NodeId x, ResidualBlock<double>& b, BnMode mode) {
  NodeId h = relu(g, batch_norm(g, x, b.bn1, mode));
  h = conv2d(g, h, b.conv1);
  h = relu(g, batch_norm(g, h, b.bn2, mode));
  const NodeId f = conv2d(g, h, b.conv2);
  const NodeId skip = b.spec.transition() ? shortcut(g, x, b.spec.out_channels, b.spec.stride) : x;
  return add(g, skip, f);
}

void randomize(Model<double>& m, std::mt19937_64& rng) {
  for (auto& t : m.named_tensors()) {
    if (t.name.find("running_var") != std::string::npos) {
      for (double& v : t.tensor->data()) v = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
    } else {
      for (double& v : t.tensor->data()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
    }
  }
}

}  // namespace

TEST(NetworkSpec, LayerCounts) {
  NetworkSpec s;
  s.blocks_per_group = {18, 18, 18};
  EXPECT_EQ(s.layer_count(), 110u);
  s.blocks_per_group = {3, 3, 3};
  EXPECT_EQ(s.layer_count(), 20u);
}

TEST(NetworkSpec, LayoutMarksTransitionsUngated) {
  NetworkSpec s;
  const auto layout = s.layout();
  ASSERT_EQ(layout.size(), 9u);
  std::size_t gated = 0;
  for (const auto& b : layout) {
    const bool first_of_group = b.index == 3 || b.index == 6;
    EXPECT_EQ(b.gated, !first_of_group);
    EXPECT_EQ(b.stride, first_of_group ? 2u : 1u);
    gated += b.gated ? 1 : 0;
  }
  EXPECT_EQ(gated, 7u);
  EXPECT_EQ(layout[3].in_channels, 16u);
  EXPECT_EQ(layout[3].out_channels, 32u);
}

TEST(NetworkSpec, RejectsInvalid) {
  NetworkSpec s;
  s.blocks_per_group = {0, 0, 0};
  EXPECT_THROW(s.validate(), ConfigError);
  s = NetworkSpec{};
  s.gate.epsilon = 0.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = NetworkSpec{};
  s.classes = 1;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Model, ParameterCountMatchesClosedForm) {
  const std::size_t hand[] = {75402, 270058, 464714};
  const std::size_t ns[] = {1, 3, 5};
  for (int i = 0; i < 3; ++i) {
    NetworkSpec s;
    s.blocks_per_group = {ns[i], ns[i], ns[i]};
    const auto m = Model<float>::build(s, 1);
    EXPECT_EQ(m.parameter_count(), closed_form_params(ns[i], 16, 32, 64));
    EXPECT_EQ(m.parameter_count(), hand[i]);
    EXPECT_EQ(m.layer_count(), 6 * ns[i] + 2);
  }
}

TEST(Model, SideHeadTapsMiddleBlock) {
  NetworkSpec s;
  auto m = Model<float>::build(s, 1);
  EXPECT_EQ(m.side_tap(), 5u);  // ceil(9 / 2)
  EXPECT_EQ(m.side_parameter_count(), 32u * 10u + 10u);
  s.blocks_per_group = {2, 2, 2};
  EXPECT_EQ(Model<float>::build(s, 1).side_tap(), 3u);
}

TEST(Model, SameSeedSameParameters) {
  auto a = Model<float>::build(small_spec(), 42);
  auto b = Model<float>::build(small_spec(), 42);
  auto c = Model<float>::build(small_spec(), 43);
  const auto ta = a.named_tensors();
  const auto tb = b.named_tensors();
  const auto tc = c.named_tensors();
  bool any_diff = false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    EXPECT_TRUE(bit_equal(*ta[i].tensor, *tb[i].tensor)) << ta[i].name;
    any_diff = any_diff || !bit_equal(*ta[i].tensor, *tc[i].tensor);
  }
  EXPECT_TRUE(any_diff);
}

TEST(Model, InitializationStatistics) {
  NetworkSpec s;
  auto m = Model<double>::build(s, 7);
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& t : m.named_tensors()) {
    if (t.kind == TensorKind::kBias) {
      for (double v : t.tensor->data()) EXPECT_EQ(v, 0.0) << t.name;
    }
    if (t.name.ends_with(".gamma")) {
      for (double v : t.tensor->data()) EXPECT_EQ(v, 1.0);
    }
    if (t.kind == TensorKind::kWeight) {
      for (double v : t.tensor->data()) {
        sum += v;
        sq += v * v;
        ++n;
      }
    }
  }
  EXPECT_NEAR(sum / static_cast<double>(n), 0.0, 1e-4);
  EXPECT_NEAR(std::sqrt(sq / static_cast<double>(n)), 0.01, 2e-4);
}

TEST(Model, TensorNamesAreUniqueAndStructured) {
  auto m = Model<float>::build(small_spec(2), 1);
  const std::regex pattern(R"(group[0-5]\.block[0-9]+\.[a-z0-9_]+\.[a-z_]+)");
  std::set<std::string> seen;
  for (const auto& t : m.named_tensors()) {
    EXPECT_TRUE(std::regex_match(t.name, pattern)) << t.name;
    EXPECT_TRUE(seen.insert(t.name).second) << "duplicate " << t.name;
  }
  EXPECT_TRUE(seen.count("group2.block0.conv1.weight"));
  EXPECT_TRUE(seen.count("group3.block1.conv2.bias"));
}

TEST(BlockForward, ZeroParameterGatedBlockIsStrictIdentity) {
  std::mt19937_64 rng(1);
  auto m = Model<double>::build(small_spec(2), 1);
  ResidualBlock<double>& b = m.blocks()[1];
  ASSERT_TRUE(b.spec.gated);
  b.conv1.weight.fill(0.0);
  b.conv2.weight.fill(0.0);
  b.conv2.bias->fill(0.0);
  for (BnMode mode : {BnMode::kTrain, BnMode::kEval}) {
    for (int trial = 0; trial < 10; ++trial) {
      auto x = random_tensor(Shape{3, 4, 8, 8}, rng, -5.0, 5.0);
      x[0] = -0.0;
      Graph<double> g;
      const NodeId xi = g.input("x");
      const auto out = block_forward(g, xi, b, mode, m.spec().gate);
      g.forward({{"x", x}});
      EXPECT_TRUE(bit_equal(g.value(out.out), x));
    }
  }
}

TEST(BlockForward, TransitionBlockHalvesResolutionDoublesWidth) {
  NetworkSpec s;
  auto m = Model<float>::build(s, 1);
  ResidualBlock<float>& b = m.blocks()[3];
  ASSERT_FALSE(b.spec.gated);
  Graph<float> g;
  const NodeId xi = g.input("x");
  const auto out = block_forward(g, xi, b, BnMode::kTrain, s.gate);
  EXPECT_EQ(out.gate, nullptr);
  std::mt19937_64 rng(2);
  g.forward({{"x", random_tensor<float>(Shape{2, 16, 32, 32}, rng)}});
  EXPECT_EQ(g.value(out.out).shape(), (Shape{2, 32, 16, 16}));
}

TEST(BlockForward, OpenGateMatchesPlainPreActivationBlock) {
  std::mt19937_64 rng(3);
  auto m = Model<double>::build(small_spec(2, 1e-12), 1);
  randomize(m, rng);
  ResidualBlock<double>& b = m.blocks()[1];
  const auto x = random_tensor(Shape{4, 4, 8, 8}, rng);
  for (BnMode mode : {BnMode::kTrain, BnMode::kEval}) {
    auto b1 = b;
    auto b2 = b;
    Graph<double> g1, g2;
    const auto gated = block_forward(g1, g1.input("x"), b1, mode, m.spec().gate);
    const NodeId plain = plain_block(g2, g2.input("x"), b2, mode);
    g1.forward({{"x", x}});
    g2.forward({{"x", x}});
    EXPECT_TRUE(bit_equal(g1.value(gated.out), g2.value(plain)));
  }
}

TEST(BlockForward, ClosedGateGivesZeroParameterGradient) {
  std::mt19937_64 rng(4);
  auto m = Model<double>::build(small_spec(2, 1e6), 1);
  Graph<double> g;
  const NodeId x = g.input("x");
  ForwardOptions opts;
  const auto nodes = m.forward(g, x, opts);
  const NodeId loss = task_loss(g, nodes, {0, 1, 2}, 0.1);
  g.forward({{"x", random_tensor(Shape{3, 3, 8, 8}, rng)}});
  m.zero_grad();
  g.backward(loss);
  for (const auto& p : m.parameters()) {
    if (p.block < 0 || !m.blocks()[static_cast<std::size_t>(p.block)].spec.gated) continue;
    for (double v : p.tensor->grad()) ASSERT_EQ(v, 0.0) << p.name;
  }
}

TEST(Model, InfiniteEpsilonEqualsNetworkWithoutGatedBlocks) {
  std::mt19937_64 rng(5);
  auto m = Model<double>::build(small_spec(2, INFINITY), 1);
  randomize(m, rng);
  std::vector<std::size_t> gated;
  for (const auto& b : m.blocks()) {
    if (b.spec.gated) gated.push_back(b.spec.index);
  }
  auto bare = m.without_blocks(gated);
  EXPECT_EQ(bare.blocks().size(), 2u);
  const auto x = random_tensor(Shape{5, 3, 8, 8}, rng);
  EXPECT_TRUE(bit_equal(m.predict(x), bare.predict(x)));
}

TEST(Model, SkippingGatedOffBlocksLeavesLogitsUnchanged) {
  std::mt19937_64 rng(6);
  auto m = Model<double>::build(small_spec(2, 50.0), 1);
  for (auto& b : m.blocks()) {
    if (b.spec.gated) b.spec.status.mark_collapsed(0);
  }
  const auto x = random_tensor(Shape{4, 3, 8, 8}, rng);
  EXPECT_TRUE(bit_equal(m.predict(x, false), m.predict(x, true)));
}

TEST(Model, WithoutBlocksRenumbersAndRemapsSideTap) {
  auto m = Model<float>::build(small_spec(3), 1);
  ASSERT_EQ(m.side_tap(), 5u);
  auto r = m.without_blocks({1, 2});
  EXPECT_EQ(r.blocks().size(), 7u);
  EXPECT_EQ(r.side_tap(), 3u);
  for (std::size_t i = 0; i < r.blocks().size(); ++i) EXPECT_EQ(r.blocks()[i].spec.index, i);
  EXPECT_EQ(r.blocks()[1].spec.origin, 3u);
  ASSERT_EQ(r.pruned().size(), 2u);
  EXPECT_EQ(r.pruned()[0].status.state, BlockState::kPruned);
  EXPECT_EQ(r.parameter_count(),
            m.parameter_count() - 2 * Model<float>::block_parameter_count(m.blocks()[1].spec));
  EXPECT_THROW(m.without_blocks({3}), StateError);
  EXPECT_THROW(m.without_blocks({42}), StateError);
}

TEST(BlockStatus, TransitionsOnlyForward) {
  BlockStatus s;
  EXPECT_THROW(s.mark_collapsed(-1), StateError);
  s = BlockStatus{};
  s.mark_collapsed(3);
  EXPECT_EQ(s.collapsed_epoch, 3);
  EXPECT_THROW(s.mark_collapsed(4), StateError);
  s.mark_pruned();
  EXPECT_THROW(s.mark_pruned(), StateError);
  EXPECT_THROW(s.mark_collapsed(5), StateError);
  EXPECT_EQ(parse_block_state("collapsed"), BlockState::kCollapsed);
}

TEST(SideHead, UniformFeaturesGiveLogK) {
  std::mt19937_64 rng(7);
  auto m = Model<double>::build(small_spec(), 1);
  for (auto& t : m.named_tensors()) {
    if (t.name.starts_with("group5")) t.tensor->fill(0.0);
  }
  Graph<double> g;
  const NodeId x = g.input("x");
  const auto nodes = m.forward(g, x, ForwardOptions{});
  ASSERT_TRUE(nodes.side_logits.has_value());
  const NodeId side = softmax_cross_entropy(g, *nodes.side_logits, {1, 2});
  g.forward({{"x", random_tensor(Shape{2, 3, 8, 8}, rng)}});
  EXPECT_NEAR(g.value(side).item(), std::log(10.0), 1e-12);
}

TEST(SideHead, DisabledMeansNoSideTerm) {
  auto s = small_spec();
  s.side_supervision = false;
  auto m = Model<double>::build(s, 1);
  EXPECT_EQ(m.side_parameter_count(), 0u);
  Graph<double> g;
  const auto nodes = m.forward(g, g.input("x"), ForwardOptions{});
  EXPECT_FALSE(nodes.side_logits.has_value());
}

TEST(SideHead, CoefficientEntersLinearly) {
  std::mt19937_64 rng(8);
  auto m = Model<double>::build(small_spec(), 1);
  const auto x = random_tensor(Shape{3, 3, 8, 8}, rng);
  const std::vector<int> labels{0, 5, 9};
  auto loss_with = [&](double coef, double* side_ce) {
    auto copy = m;
    Graph<double> g;
    const auto nodes = copy.forward(g, g.input("x"), ForwardOptions{});
    const NodeId loss = task_loss(g, nodes, labels, coef);
    const NodeId side = softmax_cross_entropy(g, *nodes.side_logits, labels);
    g.forward({{"x", x}});
    if (side_ce) *side_ce = g.value(side).item();
    return g.value(loss).item();
  };
  double side = 0.0;
  const double with = loss_with(0.1, &side);
  const double without = loss_with(0.0, nullptr);
  EXPECT_NEAR(with - without, 0.1 * side, 1e-12);
}

TEST(Model, ForwardOutputsAreNamed) {
  auto m = Model<float>::build(small_spec(), 1);
  Graph<float> g;
  const NodeId x = g.input("images");
  m.forward(g, x, ForwardOptions{});
  std::mt19937_64 rng(9);
  g.forward({{"images", random_tensor<float>(Shape{2, 3, 8, 8}, rng)}});
  EXPECT_EQ(g.output("logits").shape(), (Shape{2, 10}));
  EXPECT_EQ(g.output("side_logits").shape(), (Shape{2, 10}));
}
