#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "eres/model.hpp"
#include "eres/train.hpp"

namespace eres {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

struct DataConfig {
  /// CIFAR-10 binary directory, or "synthetic:<separable|xor|random>".
  std::string source = "data/cifar-10-batches-bin";
  std::size_t train_subset = 0;  // 0 = all
  std::size_t val_subset = 0;
  std::size_t synthetic_train = 512;
  std::size_t synthetic_val = 256;

  bool synthetic() const { return source.rfind("synthetic:", 0) == 0; }
  SyntheticKind synthetic_kind() const;
};

/// Every tunable of a run. Text form is one `key = value` per line; '#'
/// starts a comment. Unknown keys are rejected.
struct RunConfig {
  NetworkSpec net;
  TrainConfig train;
  DataConfig data;
  std::string out = "runs/default";
  std::string dtype = "f32";
  double equivalence_tolerance = 1e-5;

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  KeyValues to_kv() const;
  std::string to_text() const;
  /// Applies every pair to `base`; keys outside keys() are rejected unless
  /// they start with one of `ignored_prefixes`.
  static RunConfig from_kv(const KeyValues& kv, RunConfig base,
                           const std::vector<std::string>& ignored_prefixes = {});
  static KeyValues parse_text(const std::string& text);
  static RunConfig load(const std::filesystem::path& file, RunConfig base);

  /// Copies derived fields (augmentation crop) and validates everything.
  void resolve();
};

const std::vector<std::string>& preset_names();
RunConfig preset(const std::string& name);

std::string format_real(double v);

}  // namespace eres
