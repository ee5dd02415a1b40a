#pragma once

#include <filesystem>
#include <iosfwd>

#include "eres/checkpoint.hpp"
#include "eres/config.hpp"
#include "eres/prune.hpp"
#include "eres/train.hpp"

namespace eres {

/// Exclusive lock on a run directory, held while the object lives.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path file_;
};

/// Training and validation sets named by cfg.data, normalized with
/// statistics of the training set.
CifarSplit load_run_data(const RunConfig& cfg);

inline constexpr const char* kCheckpointFile = "checkpoint.eres";
inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kResolvedConfigFile = "config.resolved";

struct RunSummary {
  int epochs = 0;
  double val_error = 0.0;
  double discard_ratio = 0.0;
  double train_loss = 0.0;
};

/// Trains cfg in cfg.out: writes config.resolved, appends to metrics.csv and
/// replaces checkpoint.eres after every epoch. With `resume`, continues from
/// the checkpoint in the directory.
template <typename T>
RunSummary run_training(const RunConfig& cfg, const CifarSplit& data, bool resume,
                        std::ostream* progress = nullptr);

}  // namespace eres
