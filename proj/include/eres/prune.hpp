#pragma once

#include <string>
#include <vector>

#include "eres/data.hpp"
#include "eres/model.hpp"

namespace eres {

struct CompressionReport {
  std::size_t layers_total = 0;
  std::size_t layers_discarded = 0;
  std::size_t layers_retained = 0;
  double compression_ratio = 1.0;
  std::size_t params_full = 0;
  std::size_t params_reduced = 0;
  std::size_t bytes_per_param = 4;
  std::size_t bytes_full = 0;
  std::size_t bytes_reduced = 0;

  std::string table() const;
  static std::string csv_header();
  std::string csv_row() const;
};

/// Accounting of a (possibly pruned) model against the network it was built
/// from: removed blocks are taken from model.pruned().
template <typename T>
CompressionReport compression_report(const Model<T>& model);

struct PruneOptions {
  double zero_tolerance = 1e-4;
  /// Prune listed Active blocks and collapsed blocks above the tolerance.
  bool force = false;
  /// Positions to prune; empty selects every Collapsed block.
  std::vector<std::size_t> blocks;
};

template <typename T>
struct PruneResult {
  Model<T> reduced;
  /// Input model with the removed blocks' conv parameters set to zero.
  Model<T> zeroed;
  CompressionReport report;
  std::vector<std::size_t> removed;   // positions in the input model
  std::vector<std::size_t> deferred;  // collapsed but above tolerance
};

/// Hard-zeroes and removes eligible blocks. Throws StateError when an Active
/// block is requested without force, or when a block is ungated.
template <typename T>
PruneResult<T> prune(const Model<T>& model, const PruneOptions& opts);

struct EquivalenceReport {
  double max_abs_diff = 0.0;
  std::size_t worst_sample = 0;
  double tolerance = 1e-5;
  bool pass = true;
};

/// Compares eval-mode logits of two models over a dataset.
template <typename T>
EquivalenceReport verify_equivalence(Model<T>& full, Model<T>& reduced, const Dataset& data,
                                     double tolerance = 1e-5, std::size_t batch = 500);

}  // namespace eres
