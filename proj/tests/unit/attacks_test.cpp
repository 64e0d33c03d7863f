#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "segkey/attacks.hpp"
#include "segkey/checkpoint.hpp"
#include "segkey/error.hpp"

namespace segkey {
namespace {

Model tiny_model() {
  ModelConfig cfg;
  cfg.base_channels = 4;
  cfg.tap_channels = tap_channels_for(4);
  cfg.init_seed = 3;
  return Model(cfg);
}

DatasetSplit tiny_split() {
  ToyDatasetParams p;
  p.train = 20;
  p.val = 4;
  p.dev = 4;
  p.size = 16;
  p.seed = 8;
  return make_toy_split(p);
}

const EncryptionSpec kTap6{EncryptionMethod::kCpTap, 6, 1};

TEST(KeyLength, FollowsSpec) {
  const Model m = tiny_model();
  EXPECT_EQ(key_length_for(m, kTap6), 16u);
  EXPECT_EQ(key_length_for(m, {EncryptionMethod::kCpTap, 1, 1}), 4u);
  EXPECT_EQ(key_length_for(m, {EncryptionMethod::kShfInput, 0, 4}), 48u);
}

TEST(RandomKeyAttack, DeterministicAndReadOnly) {
  const Model m = tiny_model();
  const std::string before = serialize_checkpoint(m);
  const auto dev = tiny_split().dev;
  const AttackReport a = random_key_attack(m, kTap6, dev, 5, 17);
  const AttackReport b = random_key_attack(m, kTap6, dev, 5, 17);
  EXPECT_EQ(a.trial_miou, b.trial_miou);
  EXPECT_EQ(a.key_seeds, b.key_seeds);
  EXPECT_EQ(a.trials, 5u);
  EXPECT_EQ(a.trial_miou.size(), 5u);
  EXPECT_EQ(a.kind, "random-key");
  EXPECT_EQ(serialize_checkpoint(m), before);
  EXPECT_NE(random_key_attack(m, kTap6, dev, 5, 18).key_seeds, a.key_seeds);
}

TEST(RandomKeyAttack, ForcedCorrectKeyMatchesCorrectEvaluation) {
  const Model m = tiny_model();
  const auto dev = tiny_split().dev;
  const PermutationKey key = generate_permutation(16, 99);
  const std::vector<PermutationKey> keys{key};
  const AttackReport r = evaluate_keys(m, kTap6, keys, dev);
  const EvalReport e = evaluate(m, dev, EvalMode::correct_key({kTap6, key}));
  ASSERT_EQ(r.trial_miou.size(), 1u);
  EXPECT_EQ(r.trial_miou[0], e.iou.mean);
}

TEST(RandomKeyAttack, ExcludedKeyIsNeverDrawn) {
  const Model m = tiny_model();
  const auto dev = tiny_split().dev;
  ModelConfig small = m.config();
  small.base_channels = 1;
  small.tap_channels = tap_channels_for(1);
  const Model tiny_tap(small);
  // Tap 1 has a single channel at base 1: no wrong key exists.
  const PermutationKey one = identity_key(1);
  EXPECT_THROW(random_key_attack(tiny_tap, {EncryptionMethod::kCpTap, 1, 1}, dev, 1, 0, &one),
               ShapeError);
  // Tap 2 has two channels: the only wrong key is the swap.
  const PermutationKey identity = identity_key(2);
  const AttackReport r =
      random_key_attack(tiny_tap, {EncryptionMethod::kCpTap, 2, 1}, dev, 6, 4, &identity);
  const std::vector<PermutationKey> swap{PermutationKey{KeyMethod::kCp, {2, 1}, {}}};
  const double swapped =
      evaluate_keys(tiny_tap, {EncryptionMethod::kCpTap, 2, 1}, swap, dev).trial_miou[0];
  for (double v : r.trial_miou) EXPECT_EQ(v, swapped);
}

TEST(RandomKeyAttack, StatsAndReportFormats) {
  const AttackReport r = random_key_attack(tiny_model(), kTap6, tiny_split().dev, 7, 1);
  EXPECT_LE(r.stats.q1, r.stats.median);
  EXPECT_LE(r.stats.median, r.stats.q3);
  const auto j = nlohmann::json::parse(r.to_json());
  EXPECT_EQ(j.at("trials"), 7);
  EXPECT_EQ(j.at("seed"), 1);
  EXPECT_EQ(r.trials_csv().rfind("trial,miou\n", 0), 0u);
  EXPECT_THROW(random_key_attack(tiny_model(), kTap6, tiny_split().dev, 0, 1), ShapeError);
}

TEST(FineTuneAttack, ZeroFractionIsNoEncEvaluation) {
  const Model m = tiny_model();
  const DatasetSplit split = tiny_split();
  const AttackReport r = fine_tune_attack(m, split, 0.0, default_finetune_config());
  ASSERT_EQ(r.trial_miou.size(), 1u);
  EXPECT_EQ(r.trial_miou[0], evaluate(m, split.dev, EvalMode::no_enc()).iou.mean);
  EXPECT_EQ(r.attacker_samples, 0u);
}

TEST(FineTuneAttack, DeterministicAndLeavesOriginalUntouched) {
  const Model m = tiny_model();
  const std::string before = serialize_checkpoint(m);
  const DatasetSplit split = tiny_split();
  TrainConfig cfg = default_finetune_config();
  cfg.epochs = 1;
  cfg.batch_size = 4;
  const AttackReport a = fine_tune_attack(m, split, 0.25, cfg);
  const AttackReport b = fine_tune_attack(m, split, 0.25, cfg);
  EXPECT_EQ(a.trial_miou, b.trial_miou);
  EXPECT_EQ(a.attacker_samples, 5u);
  EXPECT_EQ(a.fraction, 0.25);
  EXPECT_EQ(serialize_checkpoint(m), before);
}

TEST(FineTuneAttack, Errors) {
  const Model m = tiny_model();
  const DatasetSplit split = tiny_split();
  EXPECT_THROW(fine_tune_attack(m, split, 0.01, default_finetune_config()), ShapeError);
  EXPECT_THROW(fine_tune_attack(m, split, 1.5, default_finetune_config()), ShapeError);
  EXPECT_EQ(default_finetune_config().epochs, 5u);
}

}  // namespace
}  // namespace segkey
