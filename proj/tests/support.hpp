#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "eres/ops.hpp"
#include "eres/tensor.hpp"

namespace eres::test {

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(shape);
  for (T& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

/// sum(out * R) with a fixed random R, so every output element gets its own
/// upstream gradient.
inline NodeId weighted_sum(Graph<double>& g, NodeId out, const Shape& shape, std::mt19937_64& rng) {
  return sum(g, mul(g, out, g.constant(random_tensor(shape, rng))));
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("eres_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace eres::test
