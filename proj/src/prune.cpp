#include "eres/prune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "eres/train.hpp"

namespace eres {

std::string CompressionReport::table() const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "layers      %zu -> %zu (%zu discarded)\n"
                "ratio       %.4f\n"
                "parameters  %zu -> %zu\n"
                "bytes       %zu -> %zu (%zu per parameter)\n",
                layers_total, layers_retained, layers_discarded, compression_ratio, params_full,
                params_reduced, bytes_full, bytes_reduced, bytes_per_param);
  return buf;
}

std::string CompressionReport::csv_header() {
  return "layers_total,layers_discarded,layers_retained,compression_ratio,params_full,params_reduced,"
         "bytes_full,bytes_reduced";
}

std::string CompressionReport::csv_row() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%.9g,%zu,%zu,%zu,%zu", layers_total, layers_discarded,
                layers_retained, compression_ratio, params_full, params_reduced, bytes_full,
                bytes_reduced);
  return buf;
}

template <typename T>
CompressionReport compression_report(const Model<T>& model) {
  CompressionReport r;
  r.layers_retained = model.layer_count();
  r.layers_discarded = 2 * model.pruned().size();
  r.layers_total = r.layers_retained + r.layers_discarded;
  r.compression_ratio = static_cast<double>(r.layers_total) / static_cast<double>(r.layers_retained);
  r.params_reduced = model.parameter_count();
  r.params_full = r.params_reduced;
  for (const auto& b : model.pruned()) r.params_full += Model<T>::block_parameter_count(b);
  r.bytes_per_param = sizeof(T);
  r.bytes_full = r.bytes_per_param * r.params_full;
  r.bytes_reduced = r.bytes_per_param * r.params_reduced;
  return r;
}

namespace {

template <typename T>
void hard_zero(ResidualBlock<T>& b) {
  b.conv1.weight.fill(T{0});
  b.conv2.weight.fill(T{0});
  if (b.conv2.bias) b.conv2.bias->fill(T{0});
}

}  // namespace

template <typename T>
PruneResult<T> prune(const Model<T>& model, const PruneOptions& opts) {
  const auto& blocks = model.blocks();
  std::vector<std::size_t> candidates = opts.blocks;
  if (candidates.empty()) {
    for (const auto& b : blocks) {
      if (b.spec.gated && b.spec.status.state == BlockState::kCollapsed) candidates.push_back(b.spec.index);
    }
  }
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  std::vector<std::size_t> removed;
  std::vector<std::size_t> deferred;
  for (std::size_t p : candidates) {
    if (p >= blocks.size()) throw StateError("no block at position " + std::to_string(p));
    const ResidualBlock<T>& b = blocks[p];
    if (!b.spec.gated) {
      throw StateError("block " + std::to_string(p) + " is a transition block and is never pruned");
    }
    if (b.spec.status.state == BlockState::kActive && !opts.force) {
      throw StateError("block " + std::to_string(p) + " is active; pruning it requires force");
    }
    if (b.spec.status.state == BlockState::kCollapsed && !opts.force &&
        block_max_abs(b) >= opts.zero_tolerance) {
      deferred.push_back(p);
      continue;
    }
    removed.push_back(p);
  }

  Model<T> zeroed = model;
  for (std::size_t p : removed) hard_zero(zeroed.blocks()[p]);
  Model<T> reduced = zeroed.without_blocks(removed);
  CompressionReport report = compression_report(reduced);
  return PruneResult<T>{std::move(reduced), std::move(zeroed), report, removed, deferred};
}

template <typename T>
EquivalenceReport verify_equivalence(Model<T>& full, Model<T>& reduced, const Dataset& data,
                                     double tolerance, std::size_t batch) {
  EquivalenceReport r;
  r.tolerance = tolerance;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t len = std::min(batch, data.size() - start);
    idx.resize(len);
    for (std::size_t i = 0; i < len; ++i) idx[i] = start + i;
    ImageBatch<T> b = make_batch<T>(data, idx, nullptr, nullptr);
    const Tensor<T> a = full.predict(b.images);
    const Tensor<T> c = reduced.predict(b.images);
    if (a.shape() != c.shape()) {
      throw ShapeError("models disagree on logit shape: " + shape_str(a.shape()) + " vs " +
                       shape_str(c.shape()));
    }
    const std::size_t k = a.dim(1);
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const double d = std::abs(static_cast<double>(a[i * k + j]) - static_cast<double>(c[i * k + j]));
        if (d > r.max_abs_diff || std::isnan(d)) {
          r.max_abs_diff = d;
          r.worst_sample = start + i;
        }
      }
    }
  }
  r.pass = r.max_abs_diff <= tolerance;
  return r;
}

#define ERES_INSTANTIATE_PRUNE(T)                                         \
  template CompressionReport compression_report(const Model<T>&);         \
  template PruneResult<T> prune(const Model<T>&, const PruneOptions&);    \
  template EquivalenceReport verify_equivalence(Model<T>&, Model<T>&, const Dataset&, double, std::size_t);

ERES_INSTANTIATE_PRUNE(float)
ERES_INSTANTIATE_PRUNE(double)

}  // namespace eres
