#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "eres/tensor.hpp"

namespace eres {

/// Images [N,C,S,S] stored in 32-bit floats; converted per batch.
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;
  std::size_t classes = 10;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t image_size() const { return images.dim(2); }
  /// First `n` samples (or all, if n is 0 or exceeds the size).
  Dataset head(std::size_t n) const;
};

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
};

// ---------------------------------------------------------------------------
// CIFAR-10 binary format
// ---------------------------------------------------------------------------

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarBatchRecords = 10000;

/// Decodes a buffer of 3073-byte records. Pixels stay in [0,255].
Dataset decode_cifar10(std::span<const std::uint8_t> bytes, const std::string& source = "buffer");
Dataset read_cifar10_batch(const std::filesystem::path& file);
void write_cifar10_batch(const std::filesystem::path& file, const Dataset& raw);

struct CifarSplit {
  Dataset train;
  Dataset test;
  ChannelStats stats;
};

/// Reads data_batch_1..5.bin and test_batch.bin (10,000 records each),
/// optionally keeps the first `train_limit` / `test_limit` samples, and
/// normalizes both splits with statistics of the kept training samples.
CifarSplit load_cifar10(const std::filesystem::path& dir, std::size_t train_limit = 0,
                        std::size_t test_limit = 0);

ChannelStats channel_stats(const Dataset& d);
void normalize(Dataset& d, const ChannelStats& s);
void denormalize(Dataset& d, const ChannelStats& s);

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
  bool enabled = true;
  std::size_t pad = 4;
  std::size_t crop = 32;
  double hflip_prob = 0.5;

  void validate(std::size_t image_size) const;
};

struct AugmentDraw {
  std::size_t dy = 0;
  std::size_t dx = 0;
  bool flip = false;
};

AugmentDraw draw_augment(const AugmentConfig& cfg, std::size_t image_size, std::mt19937_64& rng);

/// Zero-pads one [C,S,S] image by cfg.pad, crops a cfg.crop square at
/// (dy, dx) and optionally mirrors it horizontally.
void augment_image(const float* src, float* dst, std::size_t channels, std::size_t image_size,
                   const AugmentConfig& cfg, const AugmentDraw& draw);

/// Augments every image of a [N,C,S,S] batch with independent draws.
Tensor<float> augment(const Tensor<float>& batch, const AugmentConfig& cfg, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

enum class SyntheticKind { kSeparable, kXor, kRandom };

std::string to_string(SyntheticKind k);
SyntheticKind parse_synthetic_kind(const std::string& s);

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::kSeparable;
  std::size_t classes = 10;  // forced to 2 for xor
  std::size_t channels = 3;
  std::size_t image_size = 32;
};

/// separable: each class has a distinct per-channel mean (points on a circle
/// in channel space, separated by more than twice the bounded noise) plus a
/// class-specific zero-mean texture; the nearest class mean of the pooled
/// pixels recovers the label exactly.
/// xor: label = sign(mean of channel 0) xor sign(mean of channel 1).
/// random: noise images with uniformly random labels.
Dataset synthetic_dataset(const SyntheticSpec& spec, std::size_t n, std::uint64_t seed);

/// Per-class channel means used by the separable generator.
std::vector<std::vector<double>> synthetic_class_means(std::size_t classes, std::size_t channels);

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Sample order of one epoch; a pure function of (n, seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

/// RNG seeded from (seed, epoch, batch) so that batches can be produced in
/// any order.
std::mt19937_64 batch_rng(std::uint64_t seed, int epoch, std::size_t batch);

template <typename T>
struct ImageBatch {
  Tensor<T> images;
  std::vector<int> labels;
};

/// Gathers `indices` and applies augmentation when `augment_cfg` is enabled.
template <typename T>
ImageBatch<T> make_batch(const Dataset& d, std::span<const std::size_t> indices,
                         const AugmentConfig* augment_cfg, std::mt19937_64* rng);

}  // namespace eres
