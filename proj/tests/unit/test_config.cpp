#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "eres/config.hpp"
#include "support.hpp"

using namespace eres;

TEST(Config, DefaultsRoundTripThroughText) {
  RunConfig a = preset("cifar10-eps20");
  a.net.gate.epsilon = 1.25;
  a.train.lr.adaptive_milestones = {3, 7};
  const RunConfig b = RunConfig::from_kv(RunConfig::parse_text(a.to_text()), RunConfig{});
  EXPECT_EQ(a.to_kv(), b.to_kv());
  EXPECT_EQ(b.net.blocks_per_group, (std::array<std::size_t, 3>{3, 3, 3}));
  EXPECT_EQ(b.net.gate.epsilon, 1.25);
}

TEST(Config, EveryKeyIsReadableAndWritable) {
  RunConfig c;
  for (const auto& k : RunConfig::keys()) {
    const std::string v = c.get(k);
    EXPECT_NO_THROW(c.set(k, v)) << k;
    EXPECT_EQ(c.get(k), v) << k;
  }
}

TEST(Config, ParsesCommentsListsAndSpecials) {
  const auto kv = RunConfig::parse_text(
      "# comment\n"
      "blocks_per_group = 5   # trailing\n"
      "\n"
      "epsilon = inf\n"
      "lr_milestones = 10, 20\n"
      "adaptive_milestones =\n"
      "augment = false\n");
  const RunConfig c = RunConfig::from_kv(kv, RunConfig{});
  EXPECT_EQ(c.net.blocks_per_group, (std::array<std::size_t, 3>{5, 5, 5}));
  EXPECT_TRUE(std::isinf(c.net.gate.epsilon));
  EXPECT_EQ(c.train.lr.standard_milestones, (std::vector<int>{10, 20}));
  EXPECT_TRUE(c.train.lr.adaptive_milestones.empty());
  EXPECT_FALSE(c.train.augment.enabled);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  RunConfig c;
  EXPECT_THROW(c.set("learning_rate", "0.1"), ConfigError);
  EXPECT_THROW(c.set("epochs", "ten"), ConfigError);
  EXPECT_THROW(c.set("epochs", "-3"), ConfigError);
  EXPECT_THROW(c.set("augment", "maybe"), ConfigError);
  EXPECT_THROW(c.set("dtype", "f16"), ConfigError);
  EXPECT_THROW(c.set("blocks_per_group", "1,2"), ConfigError);
  EXPECT_THROW(c.set("gate_realization", "soft"), ConfigError);
  EXPECT_THROW(RunConfig::parse_text("epochs 3\n"), ConfigError);
  EXPECT_NO_THROW(RunConfig::from_kv({{"state.epoch", "3"}}, RunConfig{}, {"state."}));
  EXPECT_THROW(RunConfig::from_kv({{"state.epoch", "3"}}, RunConfig{}), ConfigError);
}

TEST(Config, ResolveValidatesAndTiesCropToImageSize) {
  RunConfig c;
  c.net.image_size = 16;
  c.resolve();
  EXPECT_EQ(c.train.augment.crop, 16u);
  c.net.gate.epsilon = -1.0;
  EXPECT_THROW(c.resolve(), ConfigError);
  c = RunConfig{};
  c.data.source = "synthetic:spiral";
  EXPECT_THROW(c.resolve(), ConfigError);
  c.data.source = "synthetic:xor";
  EXPECT_NO_THROW(c.resolve());
  c.train.batch_size = 1;
  EXPECT_THROW(c.resolve(), ConfigError);
}

TEST(Config, LoadFileLayersOverBase) {
  const auto dir = eres::test::scratch_dir("config_load");
  std::ofstream(dir / "run.cfg") << "epochs = 3\nseed = 11\n";
  const RunConfig c = RunConfig::load(dir / "run.cfg", preset("cifar10-eps110"));
  EXPECT_EQ(c.train.epochs, 3);
  EXPECT_EQ(c.train.seed, 11u);
  EXPECT_EQ(c.net.blocks_per_group[0], 18u);
  EXPECT_THROW(RunConfig::load(dir / "absent.cfg", RunConfig{}), IoError);
}

TEST(Presets, ValuesAndTopology) {
  EXPECT_EQ(preset_names().size(), 2u);
  const RunConfig big = preset("cifar10-eps110");
  EXPECT_EQ(big.net.layer_count(), 110u);
  EXPECT_EQ(big.net.gate.epsilon, 2.5);
  EXPECT_EQ(big.train.batch_size, 128u);
  EXPECT_EQ(big.train.lr.standard_milestones, (std::vector<int>{82, 123}));
  EXPECT_EQ(big.train.lr.adaptive_milestones, (std::vector<int>{41, 61}));
  EXPECT_EQ(big.train.weight_decay, 0.0002);
  EXPECT_EQ(big.train.momentum, 0.9);
  EXPECT_EQ(big.out, "runs/cifar10-eps110");
  const RunConfig small = preset("cifar10-eps20");
  EXPECT_EQ(small.net.layer_count(), 20u);
  EXPECT_EQ(small.train.epochs, 40);
  EXPECT_THROW(preset("imagenet"), ConfigError);
}

TEST(Config, FormatRealIsExact) {
  for (double v : {0.1, 1.0 / 3.0, 2.5e-7, 123456789.125}) EXPECT_EQ(std::stod(format_real(v)), v);
}
