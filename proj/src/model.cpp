#include "eres/model.hpp"

#include <algorithm>
#include <random>

#include "eres/ops.hpp"

namespace eres {

std::string to_string(BlockState s) {
  switch (s) {
    case BlockState::kActive:
      return "active";
    case BlockState::kCollapsed:
      return "collapsed";
    case BlockState::kPruned:
      return "pruned";
  }
  return "?";
}

BlockState parse_block_state(const std::string& s) {
  if (s == "active") return BlockState::kActive;
  if (s == "collapsed") return BlockState::kCollapsed;
  if (s == "pruned") return BlockState::kPruned;
  throw ConfigError("unknown block state '" + s + "'");
}

void BlockStatus::mark_collapsed(int epoch) {
  if (state != BlockState::kActive) {
    throw StateError("block can only collapse from the active state (is " + to_string(state) + ")");
  }
  if (epoch < 0) throw StateError("collapse epoch must be non-negative");
  state = BlockState::kCollapsed;
  collapsed_epoch = epoch;
}

void BlockStatus::mark_pruned() {
  if (state == BlockState::kPruned) throw StateError("block is already pruned");
  state = BlockState::kPruned;
}

void NetworkSpec::validate() const {
  for (std::size_t g = 0; g < 3; ++g) {
    if (widths[g] == 0) throw ConfigError("group widths must be positive");
    if (g > 0 && widths[g] < widths[g - 1]) throw ConfigError("group widths must not shrink");
  }
  if (blocks_per_group[0] + blocks_per_group[1] + blocks_per_group[2] == 0) {
    throw ConfigError("network needs at least one residual block");
  }
  if (in_channels == 0 || image_size < 4 || classes < 2) {
    throw ConfigError("invalid input geometry or class count");
  }
  if (!(init_std >= 0.0)) throw ConfigError("init_std must be non-negative");
  if (!(bn_momentum > 0.0 && bn_momentum < 1.0)) throw ConfigError("bn_momentum must lie in (0,1)");
  if (!(bn_eps > 0.0)) throw ConfigError("bn_eps must be positive");
  if (!(side_coefficient >= 0.0)) throw ConfigError("side_coefficient must be non-negative");
  gate.validate();
}

std::size_t NetworkSpec::total_blocks() const {
  return blocks_per_group[0] + blocks_per_group[1] + blocks_per_group[2];
}

std::vector<BlockSpec> NetworkSpec::layout() const {
  std::vector<BlockSpec> out;
  std::size_t channels = widths[0];
  for (int g = 1; g <= 3; ++g) {
    for (std::size_t b = 0; b < blocks_per_group[g - 1]; ++b) {
      BlockSpec s;
      s.index = s.origin = out.size();
      s.group = g;
      s.in_channels = channels;
      s.out_channels = widths[g - 1];
      s.stride = (g > 1 && b == 0) ? 2 : 1;
      s.gated = !s.transition();
      channels = s.out_channels;
      out.push_back(s);
    }
  }
  return out;
}

std::string block_prefix(const BlockSpec& b, std::size_t index_in_group) {
  return "group" + std::to_string(b.group) + ".block" + std::to_string(index_in_group);
}

namespace {

template <typename T>
ResidualBlock<T> make_block(const BlockSpec& s, const NetworkSpec& spec) {
  ResidualBlock<T> b;
  b.spec = s;
  b.bn1 = BatchNormState<T>::make(s.in_channels, spec.bn_momentum, spec.bn_eps);
  b.conv1.weight = Tensor<T>(Shape{s.out_channels, s.in_channels, 3, 3});
  b.conv1.stride = s.stride;
  b.conv1.padding = 1;
  b.bn2 = BatchNormState<T>::make(s.out_channels, spec.bn_momentum, spec.bn_eps);
  b.conv2.weight = Tensor<T>(Shape{s.out_channels, s.out_channels, 3, 3});
  b.conv2.bias = Tensor<T>(Shape{s.out_channels});
  b.conv2.stride = 1;
  b.conv2.padding = 1;
  return b;
}

template <typename T>
void gaussian_fill(Tensor<T>& t, std::mt19937_64& rng, double std) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (T& v : t.data()) v = static_cast<T>(std * dist(rng));
}

std::size_t bn_params(std::size_t c) { return 2 * c; }

}  // namespace

template <typename T>
Model<T> Model<T>::assemble(const NetworkSpec& spec, std::vector<BlockSpec> blocks,
                            std::vector<BlockSpec> pruned, std::size_t side_tap) {
  spec.validate();
  Model m;
  m.spec_ = spec;
  m.stem_.weight = Tensor<T>(Shape{spec.widths[0], spec.in_channels, 3, 3});
  m.stem_.stride = 1;
  m.stem_.padding = 1;
  std::size_t channels = spec.widths[0];
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].index = i;
    if (blocks[i].in_channels != channels) {
      throw ConfigError("block " + std::to_string(i) + " expects " +
                        std::to_string(blocks[i].in_channels) + " input channels, previous stage has " +
                        std::to_string(channels));
    }
    channels = blocks[i].out_channels;
    m.blocks_.push_back(make_block<T>(blocks[i], spec));
  }
  if (side_tap > blocks.size()) throw ConfigError("side tap lies beyond the last block");
  m.pruned_ = std::move(pruned);
  m.final_bn_ = BatchNormState<T>::make(channels, spec.bn_momentum, spec.bn_eps);
  m.fc_.weight = Tensor<T>(Shape{spec.classes, channels});
  m.fc_.bias = Tensor<T>(Shape{spec.classes});
  m.side_tap_ = side_tap;
  if (spec.side_supervision) {
    const std::size_t tap_channels =
        side_tap == 0 ? spec.widths[0] : m.blocks_[side_tap - 1].spec.out_channels;
    m.side_fc_ = LinearParams<T>{Tensor<T>(Shape{spec.classes, tap_channels}),
                                 Tensor<T>(Shape{spec.classes})};
  }
  m.set_requires_grad(true);
  return m;
}

template <typename T>
Model<T> Model<T>::build(const NetworkSpec& spec, std::uint64_t seed) {
  const std::size_t n = spec.total_blocks();
  Model m = assemble(spec, spec.layout(), {}, (n + 1) / 2);
  std::mt19937_64 rng(seed);
  gaussian_fill(m.stem_.weight, rng, spec.init_std);
  for (auto& b : m.blocks_) {
    gaussian_fill(b.conv1.weight, rng, spec.init_std);
    gaussian_fill(b.conv2.weight, rng, spec.init_std);
  }
  gaussian_fill(m.fc_.weight, rng, spec.init_std);
  if (m.side_fc_) gaussian_fill(m.side_fc_->weight, rng, spec.init_std);
  return m;
}

template <typename T>
BlockNodes<T> block_forward(Graph<T>& g, NodeId x, ResidualBlock<T>& block, BnMode mode,
                            const GateConfig& gate) {
  NodeId h = relu(g, batch_norm(g, x, block.bn1, mode));
  h = conv2d(g, h, block.conv1);
  h = relu(g, batch_norm(g, h, block.bn2, mode));
  const NodeId residual = conv2d(g, h, block.conv2);
  const BlockSpec& s = block.spec;
  if (s.gated) {
    const NodeId gated = sparsify(g, residual, gate);
    auto* op = static_cast<const SparsifyOp<T>*>(&g.op(gated));
    return {add(g, x, gated), op};
  }
  const NodeId skip = s.transition() ? shortcut(g, x, s.out_channels, s.stride) : x;
  return {add(g, skip, residual), nullptr};
}

template <typename T>
ForwardNodes<T> Model<T>::forward(Graph<T>& g, NodeId images, const ForwardOptions& opts) {
  const GateConfig gate = opts.gate.value_or(spec_.gate);
  ForwardNodes<T> out;
  NodeId h = conv2d(g, images, stem_);
  std::optional<NodeId> tap;
  if (side_tap_ == 0) tap = h;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    ResidualBlock<T>& b = blocks_[i];
    const bool skip = opts.skip_collapsed && b.spec.gated &&
                      b.spec.status.state == BlockState::kCollapsed;
    if (!skip) {
      BlockNodes<T> bn = block_forward(g, h, b, opts.mode, gate);
      h = bn.out;
      if (bn.gate) out.gates.push_back({i, bn.gate});
    }
    if (i + 1 == side_tap_) tap = h;
  }
  h = relu(g, batch_norm(g, h, final_bn_, opts.mode));
  out.logits = linear(g, global_avg_pool(g, h), fc_);
  g.mark_output("logits", out.logits);
  if (opts.with_side && side_fc_ && tap) {
    out.side_logits = linear(g, global_avg_pool(g, *tap), *side_fc_);
    g.mark_output("side_logits", *out.side_logits);
  }
  return out;
}

template <typename T>
Tensor<T> Model<T>::predict(const Tensor<T>& images, bool skip_collapsed) {
  Graph<T> g;
  const NodeId x = g.input("images");
  ForwardOptions opts;
  opts.mode = BnMode::kEval;
  opts.with_side = false;
  opts.skip_collapsed = skip_collapsed;
  const ForwardNodes<T> nodes = forward(g, x, opts);
  g.forward({{"images", images}});
  return g.value(nodes.logits);
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::named_tensors() {
  std::vector<NamedTensor<T>> out;
  auto add_bn = [&](const std::string& p, BatchNormState<T>& bn, int block) {
    out.push_back({p + ".gamma", &bn.gamma, TensorKind::kBnAffine, block});
    out.push_back({p + ".beta", &bn.beta, TensorKind::kBnAffine, block});
    out.push_back({p + ".running_mean", &bn.running_mean, TensorKind::kBuffer, block});
    out.push_back({p + ".running_var", &bn.running_var, TensorKind::kBuffer, block});
  };
  out.push_back({"group0.block0.conv.weight", &stem_.weight, TensorKind::kWeight, -1});
  std::array<std::size_t, 4> in_group{};
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    ResidualBlock<T>& b = blocks_[i];
    const std::string p = block_prefix(b.spec, in_group[b.spec.group]++);
    const int idx = static_cast<int>(i);
    add_bn(p + ".bn1", b.bn1, idx);
    out.push_back({p + ".conv1.weight", &b.conv1.weight, TensorKind::kWeight, idx});
    add_bn(p + ".bn2", b.bn2, idx);
    out.push_back({p + ".conv2.weight", &b.conv2.weight, TensorKind::kWeight, idx});
    out.push_back({p + ".conv2.bias", &*b.conv2.bias, TensorKind::kBias, idx});
  }
  add_bn("group4.block0.bn", final_bn_, -1);
  out.push_back({"group4.block0.fc.weight", &fc_.weight, TensorKind::kWeight, -1});
  out.push_back({"group4.block0.fc.bias", &fc_.bias, TensorKind::kBias, -1});
  if (side_fc_) {
    out.push_back({"group5.block0.fc.weight", &side_fc_->weight, TensorKind::kWeight, -1});
    out.push_back({"group5.block0.fc.bias", &side_fc_->bias, TensorKind::kBias, -1});
  }
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::parameters() {
  auto all = named_tensors();
  std::erase_if(all, [](const NamedTensor<T>& t) { return t.kind == TensorKind::kBuffer; });
  return all;
}

template <typename T>
std::size_t Model<T>::block_parameter_count(const BlockSpec& b) {
  return bn_params(b.in_channels) + 9 * b.in_channels * b.out_channels +
         bn_params(b.out_channels) + 9 * b.out_channels * b.out_channels + b.out_channels;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = stem_.weight.size();
  for (const auto& b : blocks_) n += block_parameter_count(b.spec);
  n += final_bn_.gamma.size() + final_bn_.beta.size();
  n += fc_.weight.size() + fc_.bias.size();
  return n;
}

template <typename T>
std::size_t Model<T>::side_parameter_count() const {
  return side_fc_ ? side_fc_->weight.size() + side_fc_->bias.size() : 0;
}

template <typename T>
std::size_t Model<T>::prunable_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks_) n += b.spec.gated ? 1 : 0;
  for (const auto& b : pruned_) n += b.gated ? 1 : 0;
  return n;
}

template <typename T>
Model<T> Model<T>::without_blocks(const std::vector<std::size_t>& positions) const {
  Model m = *this;
  std::vector<bool> drop(blocks_.size(), false);
  for (std::size_t p : positions) {
    if (p >= blocks_.size()) throw StateError("no block at position " + std::to_string(p));
    if (!blocks_[p].spec.gated) {
      throw StateError("block " + std::to_string(p) + " is a transition block and cannot be removed");
    }
    drop[p] = true;
  }
  m.blocks_.clear();
  std::size_t tap = 0;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (drop[i]) {
      BlockSpec s = blocks_[i].spec;
      s.status.mark_pruned();
      m.pruned_.push_back(s);
    } else {
      m.blocks_.push_back(blocks_[i]);
      m.blocks_.back().spec.index = m.blocks_.size() - 1;
      if (i < side_tap_) ++tap;
    }
  }
  std::sort(m.pruned_.begin(), m.pruned_.end(),
            [](const BlockSpec& a, const BlockSpec& b) { return a.origin < b.origin; });
  m.side_tap_ = tap;
  return m;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : parameters()) p.tensor->zero_grad();
}

template <typename T>
void Model<T>::set_requires_grad(bool on) {
  for (auto& p : parameters()) p.tensor->set_requires_grad(on);
}

#define ERES_INSTANTIATE_MODEL(T) \
  template class Model<T>;        \
  template BlockNodes<T> block_forward(Graph<T>&, NodeId, ResidualBlock<T>&, BnMode, const GateConfig&);

ERES_INSTANTIATE_MODEL(float)
ERES_INSTANTIATE_MODEL(double)

}  // namespace eres
