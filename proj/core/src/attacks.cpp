#include "segkey/attacks.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "segkey/error.hpp"

namespace segkey {

std::size_t key_length_for(const Model& model, const EncryptionSpec& spec) {
  if (spec.method == EncryptionMethod::kCpTap) {
    if (spec.tap < 1 || spec.tap > kNumTaps) {
      throw ShapeError("tap must be in 1..6, got " + std::to_string(spec.tap));
    }
    return model.config().tap_channels[spec.tap - 1];
  }
  return model.config().in_channels * spec.block_size * spec.block_size;
}

namespace {

KeyMethod key_method_for(const EncryptionSpec& spec) {
  return spec.method == EncryptionMethod::kCpTap ? KeyMethod::kCp : KeyMethod::kShf;
}

void finish(AttackReport& report) {
  report.trials = report.trial_miou.size();
  report.stats = box_stats(report.trial_miou);
}

}  // namespace

AttackReport evaluate_keys(const Model& model, const EncryptionSpec& spec,
                           std::span<const PermutationKey> keys,
                           std::span<const SegSample> dataset) {
  if (keys.empty()) throw ShapeError("attack needs at least one trial");
  AttackReport report;
  report.kind = "random-key";
  for (const PermutationKey& key : keys) {
    const EvalReport r =
        evaluate(model, dataset, EvalMode::wrong_key(Encryption{spec, key}));
    report.trial_miou.push_back(r.iou.mean);
  }
  finish(report);
  return report;
}

AttackReport random_key_attack(const Model& model, const EncryptionSpec& spec,
                               std::span<const SegSample> dataset,
                               std::size_t trials, std::uint64_t seed,
                               const PermutationKey* exclude) {
  if (trials == 0) throw ShapeError("random_key_attack: trials must be >= 1");
  const std::size_t length = key_length_for(model, spec);
  if (exclude && length == 1) {
    throw ShapeError("random_key_attack: no wrong key exists for length 1");
  }
  std::mt19937_64 rng(seed);
  std::vector<PermutationKey> keys;
  std::vector<std::uint64_t> seeds;
  while (keys.size() < trials) {
    const std::uint64_t key_seed = rng();
    PermutationKey key = generate_permutation(length, key_seed, key_method_for(spec));
    if (exclude && key.perm == exclude->perm) continue;
    keys.push_back(std::move(key));
    seeds.push_back(key_seed);
  }
  AttackReport report = evaluate_keys(model, spec, keys, dataset);
  report.seed = seed;
  report.key_seeds = std::move(seeds);
  return report;
}

TrainConfig default_finetune_config() {
  TrainConfig c;
  c.epochs = 5;
  return c;
}

AttackReport fine_tune_attack(const Model& protected_model,
                              const DatasetSplit& split, double fraction,
                              const TrainConfig& config) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw ShapeError("fine_tune_attack: fraction must be in [0,1]");
  }
  if (split.dev.empty()) throw ShapeError("fine_tune_attack: empty dev split");
  AttackReport report;
  report.kind = "finetune";
  report.fraction = fraction;
  report.seed = config.seed;

  if (fraction == 0.0) {
    report.trial_miou.push_back(
        evaluate(protected_model, split.dev, EvalMode::no_enc()).iou.mean);
    finish(report);
    return report;
  }

  const auto count = static_cast<std::size_t>(
      std::floor(fraction * static_cast<double>(split.train.size())));
  if (count == 0) {
    throw ShapeError("fine_tune_attack: fraction " + std::to_string(fraction) +
                     " of " + std::to_string(split.train.size()) +
                     " training samples yields no data");
  }
  std::vector<std::size_t> order(split.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.seed ^ 0xA77AC4ull);
  std::shuffle(order.begin(), order.end(), rng);

  DatasetSplit attacker;
  for (std::size_t i = 0; i < count; ++i) attacker.train.push_back(split.train[order[i]]);
  attacker.val = attacker.train;
  report.attacker_samples = count;

  // A fresh trainer run starts with zero momentum.
  const TrainResult tuned = train(protected_model, attacker, config, nullptr);
  report.trial_miou.push_back(
      evaluate(tuned.model, split.dev, EvalMode::no_enc()).iou.mean);
  finish(report);
  return report;
}

std::string AttackReport::to_json() const {
  nlohmann::json j;
  j["kind"] = kind;
  j["trials"] = trials;
  j["seed"] = seed;
  if (fraction) {
    j["fraction"] = *fraction;
    j["attacker_samples"] = attacker_samples;
  }
  j["trial_miou"] = trial_miou;
  if (!key_seeds.empty()) j["key_seeds"] = key_seeds;
  j["box"] = {{"q1", stats.q1},
              {"median", stats.median},
              {"q3", stats.q3},
              {"whisker_lo", stats.whisker_lo},
              {"whisker_hi", stats.whisker_hi},
              {"outliers", stats.outliers}};
  return j.dump(2) + "\n";
}

std::string AttackReport::trials_csv() const {
  std::ostringstream os;
  os << std::setprecision(10) << "trial,miou\n";
  for (std::size_t i = 0; i < trial_miou.size(); ++i) {
    os << i + 1 << ',' << trial_miou[i] << '\n';
  }
  return os.str();
}

}  // namespace segkey
