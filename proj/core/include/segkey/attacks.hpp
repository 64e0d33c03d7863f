#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "segkey/dataio.hpp"
#include "segkey/keying.hpp"
#include "segkey/metrics.hpp"
#include "segkey/segnet.hpp"
#include "segkey/trainer.hpp"

namespace segkey {

struct AttackReport {
  std::string kind;  // "random-key" or "finetune"
  std::vector<double> trial_miou;
  BoxStats stats;
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  std::optional<double> fraction;      // finetune only
  std::size_t attacker_samples = 0;    // finetune only: |D'|
  std::vector<std::uint64_t> key_seeds;  // random-key only

  std::string to_json() const;
  std::string trials_csv() const;  // trial,miou
};

// Length of a key for `spec` on `model` (tap width for CP, 3*M*M for SHF).
std::size_t key_length_for(const Model& model, const EncryptionSpec& spec);

// Evaluates `model` under each key in `keys` with the given spec.
AttackReport evaluate_keys(const Model& model, const EncryptionSpec& spec,
                           std::span<const PermutationKey> keys,
                           std::span<const SegSample> dataset);

// Attacker knows the tap and method but not the key. Draws `trials` random
// keys (re-drawing any equal to `exclude`), evaluates each one, and
// summarises the mIoU values. The model is only read.
AttackReport random_key_attack(const Model& model, const EncryptionSpec& spec,
                               std::span<const SegSample> dataset,
                               std::size_t trials, std::uint64_t seed,
                               const PermutationKey* exclude = nullptr);

// Retrains a copy of the protected model on floor(fraction * |train|)
// samples drawn from split.train, with no encryption, then evaluates it on
// split.dev without a key. fraction == 0 skips retraining. The attacker's
// subset doubles as its validation set.
AttackReport fine_tune_attack(const Model& protected_model,
                              const DatasetSplit& split, double fraction,
                              const TrainConfig& config);

// Attacker schedule: the trainer defaults with 5 epochs.
TrainConfig default_finetune_config();

}  // namespace segkey
