#include "eres/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

namespace eres {

Dataset Dataset::head(std::size_t n) const {
  if (n == 0 || n >= size()) return *this;
  Shape shape = images.shape();
  const std::size_t per = images.size() / shape[0];
  shape[0] = n;
  Dataset out;
  out.images = Tensor<float>(shape, std::vector<float>(images.ptr(), images.ptr() + n * per));
  out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
  out.classes = classes;
  return out;
}

// ---------------------------------------------------------------------------
// CIFAR-10
// ---------------------------------------------------------------------------

Dataset decode_cifar10(std::span<const std::uint8_t> bytes, const std::string& source) {
  const std::size_t records = bytes.size() / kCifarRecord;
  if (bytes.size() % kCifarRecord != 0) {
    throw ParseError(source + ": truncated record " + std::to_string(records) + " (file size " +
                         std::to_string(bytes.size()) + " is not a multiple of " +
                         std::to_string(kCifarRecord) + ")",
                     records * kCifarRecord);
  }
  if (records == 0) throw ParseError(source + ": no records", 0);
  constexpr std::size_t pixels = kCifarRecord - 1;
  Dataset d;
  d.images = Tensor<float>(Shape{records, 3, kCifarSide, kCifarSide});
  d.labels.resize(records);
  for (std::size_t r = 0; r < records; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] >= 10) {
      throw ParseError(source + ": record " + std::to_string(r) + " has label " +
                           std::to_string(rec[0]) + " outside [0,10)",
                       r * kCifarRecord);
    }
    d.labels[r] = rec[0];
    float* dst = d.images.ptr() + r * pixels;
    for (std::size_t j = 0; j < pixels; ++j) dst[j] = static_cast<float>(rec[1 + j]);
  }
  return d;
}

Dataset read_cifar10_batch(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_cifar10(bytes, file.string());
}

void write_cifar10_batch(const std::filesystem::path& file, const Dataset& raw) {
  if (raw.channels() != 3 || raw.image_size() != kCifarSide) {
    throw ShapeError("CIFAR-10 records hold 3x32x32 images, got " + shape_str(raw.images.shape()));
  }
  std::vector<std::uint8_t> bytes(raw.size() * kCifarRecord);
  constexpr std::size_t pixels = kCifarRecord - 1;
  for (std::size_t r = 0; r < raw.size(); ++r) {
    std::uint8_t* rec = bytes.data() + r * kCifarRecord;
    rec[0] = static_cast<std::uint8_t>(raw.labels[r]);
    const float* src = raw.images.ptr() + r * pixels;
    for (std::size_t j = 0; j < pixels; ++j) {
      rec[1 + j] = static_cast<std::uint8_t>(std::clamp(std::lround(src[j]), 0L, 255L));
    }
  }
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + file.string());
}

namespace {

Dataset concat(std::vector<Dataset> parts) {
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  Shape shape = parts.front().images.shape();
  shape[0] = n;
  std::vector<float> pixels;
  pixels.reserve(shape_size(shape));
  Dataset out;
  for (auto& p : parts) {
    pixels.insert(pixels.end(), p.images.data().begin(), p.images.data().end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  out.images = Tensor<float>(shape, std::move(pixels));
  return out;
}

Dataset read_official(const std::filesystem::path& file) {
  Dataset d = read_cifar10_batch(file);
  if (d.size() != kCifarBatchRecords) {
    throw ParseError(file.string() + ": expected " + std::to_string(kCifarBatchRecords) +
                         " records, found " + std::to_string(d.size()),
                     d.size() * kCifarRecord);
  }
  return d;
}

}  // namespace

CifarSplit load_cifar10(const std::filesystem::path& dir, std::size_t train_limit,
                        std::size_t test_limit) {
  std::vector<Dataset> parts;
  std::size_t have = 0;
  for (int i = 1; i <= 5; ++i) {
    if (train_limit != 0 && have >= train_limit) break;
    parts.push_back(read_official(dir / ("data_batch_" + std::to_string(i) + ".bin")));
    have += parts.back().size();
  }
  CifarSplit split;
  split.train = concat(std::move(parts)).head(train_limit);
  split.test = read_official(dir / "test_batch.bin").head(test_limit);
  split.stats = channel_stats(split.train);
  normalize(split.train, split.stats);
  normalize(split.test, split.stats);
  return split;
}

ChannelStats channel_stats(const Dataset& d) {
  const std::size_t n = d.size();
  const std::size_t c = d.channels();
  const std::size_t hw = d.image_size() * d.image_size();
  ChannelStats s{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const float* p = d.images.ptr() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        sum += p[j];
        sq += static_cast<double>(p[j]) * p[j];
      }
    }
    const double count = static_cast<double>(n * hw);
    s.mean[ch] = sum / count;
    const double var = std::max(sq / count - s.mean[ch] * s.mean[ch], 0.0);
    s.std[ch] = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  return s;
}

namespace {

template <typename F>
void per_channel(Dataset& d, const ChannelStats& s, F&& f) {
  const std::size_t c = d.channels();
  if (s.mean.size() != c || s.std.size() != c) {
    throw ShapeError("channel statistics cover " + std::to_string(s.mean.size()) +
                     " channels, dataset has " + std::to_string(c));
  }
  const std::size_t hw = d.image_size() * d.image_size();
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      float* p = d.images.ptr() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) p[j] = static_cast<float>(f(p[j], s.mean[ch], s.std[ch]));
    }
  }
}

}  // namespace

void normalize(Dataset& d, const ChannelStats& s) {
  per_channel(d, s, [](double v, double m, double sd) { return (v - m) / sd; });
}

void denormalize(Dataset& d, const ChannelStats& s) {
  per_channel(d, s, [](double v, double m, double sd) { return v * sd + m; });
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

void AugmentConfig::validate(std::size_t image_size) const {
  if (crop == 0 || crop > image_size + 2 * pad) {
    throw ConfigError("crop " + std::to_string(crop) + " must lie in [1, image_size + 2*pad = " +
                      std::to_string(image_size + 2 * pad) + "]");
  }
  if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) throw ConfigError("hflip_prob must lie in [0,1]");
}

AugmentDraw draw_augment(const AugmentConfig& cfg, std::size_t image_size, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> offset(0, image_size + 2 * cfg.pad - cfg.crop);
  std::bernoulli_distribution flip(cfg.hflip_prob);
  AugmentDraw d;
  d.dy = offset(rng);
  d.dx = offset(rng);
  d.flip = flip(rng);
  return d;
}

void augment_image(const float* src, float* dst, std::size_t channels, std::size_t image_size,
                   const AugmentConfig& cfg, const AugmentDraw& draw) {
  const std::size_t s = image_size;
  const std::size_t k = cfg.crop;
  for (std::size_t c = 0; c < channels; ++c) {
    const float* plane = src + c * s * s;
    float* out = dst + c * k * k;
    for (std::size_t y = 0; y < k; ++y) {
      // Position in the padded image, shifted back to source coordinates.
      const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + draw.dy) - static_cast<std::ptrdiff_t>(cfg.pad);
      for (std::size_t x = 0; x < k; ++x) {
        const std::size_t xx = draw.flip ? k - 1 - x : x;
        const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + draw.dx) - static_cast<std::ptrdiff_t>(cfg.pad);
        const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(s) &&
                            sx < static_cast<std::ptrdiff_t>(s);
        out[y * k + x] = inside ? plane[sy * static_cast<std::ptrdiff_t>(s) + sx] : 0.0f;
      }
    }
  }
}

Tensor<float> augment(const Tensor<float>& batch, const AugmentConfig& cfg, std::mt19937_64& rng) {
  const std::size_t n = batch.dim(0);
  const std::size_t c = batch.dim(1);
  const std::size_t s = batch.dim(2);
  cfg.validate(s);
  Tensor<float> out(Shape{n, c, cfg.crop, cfg.crop});
  for (std::size_t i = 0; i < n; ++i) {
    const AugmentDraw d = draw_augment(cfg, s, rng);
    augment_image(batch.ptr() + i * c * s * s, out.ptr() + i * c * cfg.crop * cfg.crop, c, s, cfg, d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

std::string to_string(SyntheticKind k) {
  switch (k) {
    case SyntheticKind::kSeparable:
      return "separable";
    case SyntheticKind::kXor:
      return "xor";
    case SyntheticKind::kRandom:
      return "random";
  }
  return "?";
}

SyntheticKind parse_synthetic_kind(const std::string& s) {
  if (s == "separable") return SyntheticKind::kSeparable;
  if (s == "xor") return SyntheticKind::kXor;
  if (s == "random") return SyntheticKind::kRandom;
  throw ConfigError("synthetic kind must be separable, xor or random, got '" + s + "'");
}

std::vector<std::vector<double>> synthetic_class_means(std::size_t classes, std::size_t channels) {
  std::vector<std::vector<double>> means(classes, std::vector<double>(channels, 0.0));
  for (std::size_t k = 0; k < classes; ++k) {
    if (channels == 1) {
      means[k][0] = -1.0 + 2.0 * static_cast<double>(k) / static_cast<double>(classes - 1);
    } else {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(classes);
      means[k][0] = std::cos(a);
      means[k][1] = std::sin(a);
    }
  }
  return means;
}

namespace {

// Smallest pairwise distance between the class means above.
double min_mean_distance(std::size_t classes, std::size_t channels) {
  if (channels == 1) return 2.0 / static_cast<double>(classes - 1);
  return 2.0 * std::sin(std::numbers::pi / static_cast<double>(classes));
}

}  // namespace

Dataset synthetic_dataset(const SyntheticSpec& spec, std::size_t n, std::uint64_t seed) {
  if (n < 2) throw ConfigError("synthetic dataset needs at least 2 samples");
  if (spec.channels == 0 || spec.image_size == 0) throw ConfigError("synthetic images must be non-empty");
  const std::size_t classes = spec.kind == SyntheticKind::kXor ? 2 : spec.classes;
  if (classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (spec.kind == SyntheticKind::kXor && spec.channels < 2) {
    throw ConfigError("xor dataset needs at least 2 channels");
  }
  const std::size_t c = spec.channels;
  const std::size_t s = spec.image_size;
  const std::size_t hw = s * s;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Dataset d;
  d.classes = classes;
  d.images = Tensor<float>(Shape{n, c, s, s});
  d.labels.resize(n);

  switch (spec.kind) {
    case SyntheticKind::kSeparable: {
      for (std::size_t i = 0; i < n; ++i) d.labels[i] = static_cast<int>(i % classes);
      std::shuffle(d.labels.begin(), d.labels.end(), rng);
      const auto means = synthetic_class_means(classes, c);
      // Pooled noise per channel is bounded by `noise`, so its norm stays
      // below half the smallest distance between class means.
      const double noise = 0.4 * min_mean_distance(classes, c) / std::sqrt(static_cast<double>(c));
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = static_cast<std::size_t>(d.labels[i]);
        const double fy = static_cast<double>(1 + k % 2);
        const double fx = static_cast<double>(1 + (k / 2) % 3);
        for (std::size_t ch = 0; ch < c; ++ch) {
          float* p = d.images.ptr() + (i * c + ch) * hw;
          const double phase = 0.7 * static_cast<double>(ch);
          for (std::size_t y = 0; y < s; ++y) {
            for (std::size_t x = 0; x < s; ++x) {
              const double arg = 2.0 * std::numbers::pi *
                                     (fy * static_cast<double>(y) + fx * static_cast<double>(x)) /
                                     static_cast<double>(s) + phase;
              p[y * s + x] = static_cast<float>(means[k][ch] + 0.5 * std::sin(arg) + noise * unit(rng));
            }
          }
        }
      }
      break;
    }
    case SyntheticKind::kXor: {
      for (std::size_t i = 0; i < n; ++i) {
        const bool a = (i & 1) != 0;
        const bool b = (i & 2) != 0;
        d.labels[i] = a != b ? 1 : 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double offset = ch == 0 ? (a ? 0.5 : -0.5) : ch == 1 ? (b ? 0.5 : -0.5) : 0.0;
          float* p = d.images.ptr() + (i * c + ch) * hw;
          for (std::size_t j = 0; j < hw; ++j) p[j] = static_cast<float>(offset + 0.2 * unit(rng));
        }
      }
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      Dataset shuffled = d;
      const std::size_t per = c * hw;
      for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(d.images.ptr() + perm[i] * per, per, shuffled.images.ptr() + i * per);
        shuffled.labels[i] = d.labels[perm[i]];
      }
      return shuffled;
    }
    case SyntheticKind::kRandom: {
      std::uniform_int_distribution<int> label(0, static_cast<int>(classes) - 1);
      for (std::size_t i = 0; i < n; ++i) d.labels[i] = label(rng);
      for (float& v : d.images.data()) v = static_cast<float>(unit(rng));
      break;
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kShuffleTag = 0x5348u;
constexpr std::uint32_t kBatchTag = 0x4241u;

std::mt19937_64 seeded(std::initializer_list<std::uint32_t> words) {
  std::seed_seq seq(words);
  return std::mt19937_64(seq);
}

std::uint32_t lo(std::uint64_t v) { return static_cast<std::uint32_t>(v); }
std::uint32_t hi(std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); }

}  // namespace

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto rng = seeded({kShuffleTag, lo(seed), hi(seed), static_cast<std::uint32_t>(epoch)});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::mt19937_64 batch_rng(std::uint64_t seed, int epoch, std::size_t batch) {
  return seeded({kBatchTag, lo(seed), hi(seed), static_cast<std::uint32_t>(epoch), lo(batch), hi(batch)});
}

template <typename T>
ImageBatch<T> make_batch(const Dataset& d, std::span<const std::size_t> indices,
                         const AugmentConfig* augment_cfg, std::mt19937_64* rng) {
  if (indices.empty()) throw ShapeError("batch must hold at least one sample");
  const std::size_t c = d.channels();
  const std::size_t s = d.image_size();
  const std::size_t per = c * s * s;
  const bool aug = augment_cfg && augment_cfg->enabled;
  if (aug) {
    augment_cfg->validate(s);
    if (!rng) throw StateError("augmentation needs an RNG");
  }
  const std::size_t k = aug ? augment_cfg->crop : s;
  ImageBatch<T> b;
  b.images = Tensor<T>(Shape{indices.size(), c, k, k});
  b.labels.resize(indices.size());
  std::vector<float> scratch(c * k * k);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    if (src >= d.size()) throw ShapeError("sample index " + std::to_string(src) + " out of range");
    b.labels[i] = d.labels[src];
    const float* img = d.images.ptr() + src * per;
    if (aug) {
      augment_image(img, scratch.data(), c, s, *augment_cfg, draw_augment(*augment_cfg, s, *rng));
      img = scratch.data();
    }
    std::copy_n(img, c * k * k, b.images.ptr() + i * c * k * k);
  }
  return b;
}

template ImageBatch<float> make_batch(const Dataset&, std::span<const std::size_t>, const AugmentConfig*,
                                      std::mt19937_64*);
template ImageBatch<double> make_batch(const Dataset&, std::span<const std::size_t>, const AugmentConfig*,
                                       std::mt19937_64*);

}  // namespace eres
