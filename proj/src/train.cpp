#include "eres/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

#include "eres/ops.hpp"

namespace eres {

void CollapsePolicy::validate() const {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("collapse threshold must lie in (0,1]");
  if (confirm_epochs < 1) throw ConfigError("collapse confirm_epochs must be at least 1");
  if (!(zero_tolerance >= 0.0)) throw ConfigError("zero_tolerance must be non-negative");
}

double WeightStats::max_abs() const { return std::max(std::abs(min), std::abs(max)); }

double percentile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t i = static_cast<std::size_t>(std::floor(pos));
  if (i + 1 >= sorted.size()) return sorted.back();
  const double frac = pos - static_cast<double>(i);
  return sorted[i] + frac * (sorted[i + 1] - sorted[i]);
}

namespace {

template <typename T>
void append_values(std::vector<double>& out, const Tensor<T>& t) {
  for (T v : t.data()) out.push_back(static_cast<double>(v));
}

}  // namespace

template <typename T>
WeightStats weight_stats(const ResidualBlock<T>& block, int epoch) {
  std::vector<double> v;
  v.reserve(block.conv1.weight.size() + block.conv2.weight.size() + block.spec.out_channels);
  append_values(v, block.conv1.weight);
  append_values(v, block.conv2.weight);
  if (block.conv2.bias) append_values(v, *block.conv2.bias);
  std::sort(v.begin(), v.end());
  WeightStats s;
  s.block = block.spec.index;
  s.epoch = epoch;
  s.min = v.front();
  s.p7 = percentile(v, 0.07);
  s.p50 = percentile(v, 0.50);
  s.p93 = percentile(v, 0.93);
  s.max = v.back();
  return s;
}

template <typename T>
double block_max_abs(const ResidualBlock<T>& block) {
  double m = 0.0;
  auto scan = [&](const Tensor<T>& t) {
    for (T v : t.data()) m = std::max(m, std::abs(static_cast<double>(v)));
  };
  scan(block.conv1.weight);
  scan(block.conv2.weight);
  if (block.conv2.bias) scan(*block.conv2.bias);
  return m;
}

std::vector<std::size_t> detect_collapse(const std::vector<BlockSpec>& blocks,
                                         const CollapsePolicy& policy) {
  std::vector<std::size_t> out;
  const auto need = static_cast<std::size_t>(policy.confirm_epochs);
  for (const auto& b : blocks) {
    if (!b.gated || b.status.state != BlockState::kActive) continue;
    const auto& h = b.status.gate_off_history;
    if (h.size() < need) continue;
    if (std::all_of(h.end() - static_cast<std::ptrdiff_t>(need), h.end(),
                    [&](double f) { return f >= policy.threshold; })) {
      out.push_back(b.index);
    }
  }
  return out;
}

template <typename T>
double discard_ratio(const Model<T>& model) {
  const std::size_t prunable = model.prunable_count();
  if (prunable == 0) return 0.0;
  std::size_t gone = 0;
  for (const auto& b : model.blocks()) {
    gone += b.spec.gated && b.spec.status.state != BlockState::kActive ? 1 : 0;
  }
  for (const auto& b : model.pruned()) gone += b.gated ? 1 : 0;
  return static_cast<double>(gone) / static_cast<double>(prunable);
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2 (batch normalization)");
  if (eval_batch == 0) throw ConfigError("eval_batch must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  collapse.validate();
  lr.validate();
}

template <typename T>
NodeId task_loss(Graph<T>& g, const ForwardNodes<T>& nodes, const std::vector<int>& labels,
                 double side_coefficient) {
  NodeId loss = softmax_cross_entropy(g, nodes.logits, labels);
  if (nodes.side_logits && side_coefficient > 0.0) {
    const NodeId side = softmax_cross_entropy(g, *nodes.side_logits, labels);
    loss = add(g, loss, scale(g, side, static_cast<T>(side_coefficient)));
  }
  return loss;
}

template <typename T>
Trainer<T>::Trainer(Model<T>& model, TrainConfig cfg) : model_(&model), cfg_(std::move(cfg)) {
  cfg_.validate();
  sgd_.momentum = cfg_.momentum;
  sgd_.weight_decay = cfg_.weight_decay;
  sgd_.decay_bn = cfg_.decay_bn;
}

template <typename T>
void Trainer<T>::resume(int next_epoch, const LrPolicy& lr, std::map<std::string, Tensor<T>> velocity) {
  next_epoch_ = next_epoch;
  cfg_.lr = lr;
  sgd_.velocity = std::move(velocity);
}

template <typename T>
EpochLog Trainer<T>::run_epoch(const Dataset& train, const Dataset* val) {
  Model<T>& model = *model_;
  const int epoch = next_epoch_;
  if (train.size() < 2) throw ConfigError("training set needs at least 2 samples");

  EpochLog log;
  log.epoch = epoch;
  log.lr = lr_for_epoch(cfg_.lr, epoch);
  sgd_.lr = log.lr;

  const auto& blocks = model.blocks();
  std::vector<std::size_t> off(blocks.size(), 0);
  std::vector<std::size_t> seen(blocks.size(), 0);
  std::vector<double> response(blocks.size(), 0.0);

  // A trailing batch of one sample cannot be batch-normalized; it is left out
  // of this epoch (the next shuffle places it elsewhere).
  std::vector<std::size_t> order = epoch_order(train.size(), cfg_.seed, epoch);
  if (order.size() % cfg_.batch_size == 1) order.pop_back();

  const auto params = model.parameters();
  ForwardOptions opts;
  opts.mode = BnMode::kTrain;
  opts.with_side = model.spec().side_supervision;

  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  std::size_t batch_index = 0;
  for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size, ++batch_index) {
    const std::size_t len = std::min(cfg_.batch_size, order.size() - start);
    const std::span<const std::size_t> idx(order.data() + start, len);
    std::mt19937_64 rng = batch_rng(cfg_.seed, epoch, batch_index);
    ImageBatch<T> batch = make_batch<T>(train, idx, &cfg_.augment, &rng);

    Graph<T> g;
    const NodeId x = g.input("images");
    const ForwardNodes<T> nodes = model.forward(g, x, opts);
    const NodeId loss = task_loss(g, nodes, batch.labels, model.spec().side_coefficient);
    g.forward({{"images", std::move(batch.images)}});

    const double objective = static_cast<double>(g.value(loss).item()) + l2_penalty(params, sgd_);
    loss_sum += objective * static_cast<double>(len);
    loss_count += len;

    for (const auto& probe : nodes.gates) {
      const auto& t = probe.op->indicator();
      const auto& m = probe.op->max_abs();
      for (std::size_t i = 0; i < t.size(); ++i) {
        off[probe.block] += t[i] == 0.0 ? 1 : 0;
        response[probe.block] = std::max(response[probe.block], m[i]);
      }
      seen[probe.block] += t.size();
    }

    model.zero_grad();
    g.backward(loss);
    sgd_step(params, sgd_);
  }
  log.train_loss = loss_sum / static_cast<double>(loss_count);

  for (auto& b : model.blocks()) {
    if (!b.spec.gated) continue;
    const std::size_t i = b.spec.index;
    GateRecord r;
    r.block = i;
    r.epoch = epoch;
    r.gate_off_fraction = seen[i] ? static_cast<double>(off[i]) / static_cast<double>(seen[i]) : 1.0;
    r.max_abs_response = response[i];
    b.spec.status.gate_off_history.push_back(r.gate_off_fraction);
    log.gates.push_back(r);
  }

  std::vector<BlockSpec> specs;
  for (const auto& b : model.blocks()) specs.push_back(b.spec);
  log.newly_collapsed = detect_collapse(specs, cfg_.collapse);
  for (std::size_t i : log.newly_collapsed) model.blocks()[i].spec.status.mark_collapsed(epoch);
  if (!log.newly_collapsed.empty()) cfg_.lr = on_block_discarded(cfg_.lr, epoch + 1);

  log.val_error = val && val->size() > 0 ? evaluate(model, *val, cfg_.eval_batch)
                                         : std::numeric_limits<double>::quiet_NaN();
  for (const auto& b : model.blocks()) log.weights.push_back(weight_stats(b, epoch));
  log.discard_ratio = discard_ratio(model);
  next_epoch_ = epoch + 1;
  return log;
}

template <typename T>
std::vector<EpochLog> train(Trainer<T>& trainer, const Dataset& train, const Dataset* val,
                            const std::function<void(const EpochLog&)>& on_epoch) {
  std::vector<EpochLog> logs;
  while (trainer.next_epoch() < trainer.config().epochs) {
    logs.push_back(trainer.run_epoch(train, val));
    if (on_epoch) on_epoch(logs.back());
  }
  return logs;
}

template <typename T>
double evaluate(Model<T>& model, const Dataset& data, std::size_t batch, bool skip_collapsed) {
  if (data.size() == 0) throw ConfigError("cannot evaluate on an empty dataset");
  std::size_t wrong = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t len = std::min(batch, data.size() - start);
    idx.resize(len);
    for (std::size_t i = 0; i < len; ++i) idx[i] = start + i;
    ImageBatch<T> b = make_batch<T>(data, idx, nullptr, nullptr);
    const Tensor<T> logits = model.predict(b.images, skip_collapsed);
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < len; ++i) {
      const T* row = logits.ptr() + i * k;
      const auto best = static_cast<int>(std::max_element(row, row + k) - row);
      wrong += best == b.labels[i] ? 0 : 1;
    }
  }
  return static_cast<double>(wrong) / static_cast<double>(data.size());
}

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void write_metrics(std::ostream& out, const EpochLog& log, const std::vector<BlockSpec>& blocks) {
  for (const auto& b : blocks) {
    out << log.epoch << ',' << b.index << ',';
    auto gate = std::find_if(log.gates.begin(), log.gates.end(),
                             [&](const GateRecord& r) { return r.block == b.index; });
    if (gate != log.gates.end()) {
      out << num(gate->gate_off_fraction) << ',' << num(gate->max_abs_response) << ',';
    } else {
      out << ",,";
    }
    auto w = std::find_if(log.weights.begin(), log.weights.end(),
                          [&](const WeightStats& s) { return s.block == b.index; });
    if (w != log.weights.end()) {
      out << num(w->min) << ',' << num(w->p7) << ',' << num(w->p50) << ',' << num(w->p93) << ','
          << num(w->max);
    } else {
      out << ",,,,";
    }
    out << ",,,,\n";
  }
  out << log.epoch << ",all,,,,,,,," << num(log.train_loss) << ',' << num(log.val_error) << ','
      << num(log.lr) << ',' << num(log.discard_ratio) << '\n';
}

#define ERES_INSTANTIATE_TRAIN(T)                                                                \
  template WeightStats weight_stats(const ResidualBlock<T>&, int);                               \
  template double block_max_abs(const ResidualBlock<T>&);                                        \
  template double discard_ratio(const Model<T>&);                                                \
  template NodeId task_loss(Graph<T>&, const ForwardNodes<T>&, const std::vector<int>&, double); \
  template class Trainer<T>;                                                                     \
  template std::vector<EpochLog> train(Trainer<T>&, const Dataset&, const Dataset*,              \
                                       const std::function<void(const EpochLog&)>&);             \
  template double evaluate(Model<T>&, const Dataset&, std::size_t, bool);

ERES_INSTANTIATE_TRAIN(float)
ERES_INSTANTIATE_TRAIN(double)

}  // namespace eres
