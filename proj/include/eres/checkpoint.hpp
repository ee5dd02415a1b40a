#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "eres/config.hpp"
#include "eres/data.hpp"
#include "eres/model.hpp"
#include "eres/optim.hpp"

namespace eres {

// Layout (little endian):
//   "ERES" u32 version u32 tensor_count
//   per tensor: u16 name_len, name, u8 dtype (0=f32, 1=f64), u8 rank,
//               rank x u32 dims, raw data
//   u32 metadata_len, metadata text ("key = value" lines)

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

struct StoredTensor {
  std::string name;
  DType dtype = DType::kF32;
  Shape dims;
  std::vector<double> values;  // widened; f32 values round-trip exactly
};

struct Checkpoint {
  std::vector<StoredTensor> tensors;
  KeyValues meta;

  const StoredTensor* find(const std::string& name) const;
  /// Throws ParseError when the key is missing.
  const std::string& value(const std::string& key) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Writes to a temporary file in the same directory, then renames it.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Training position stored next to the parameters.
struct RunState {
  int next_epoch = 0;
  LrPolicy lr;
  ChannelStats norm;
};

template <typename T>
Checkpoint make_checkpoint(Model<T>& model, const RunConfig& cfg, const RunState& state,
                           const std::map<std::string, Tensor<T>>* velocity = nullptr);

template <typename T>
struct Restored {
  Model<T> model;
  RunConfig config;
  RunState state;
  std::map<std::string, Tensor<T>> velocity;
};

template <typename T>
Restored<T> restore_checkpoint(const Checkpoint& c);

template <typename T>
void save_checkpoint(Model<T>& model, const RunConfig& cfg, const RunState& state,
                     const std::filesystem::path& path,
                     const std::map<std::string, Tensor<T>>* velocity = nullptr) {
  write_checkpoint(path, make_checkpoint(model, cfg, state, velocity));
}

template <typename T>
Restored<T> load_checkpoint(const std::filesystem::path& path) {
  return restore_checkpoint<T>(read_checkpoint(path));
}

}  // namespace eres
