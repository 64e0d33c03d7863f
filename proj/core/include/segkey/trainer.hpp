#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "segkey/dataio.hpp"
#include "segkey/metrics.hpp"
#include "segkey/segnet.hpp"
#include "segkey/transforms.hpp"

namespace segkey {

struct TrainConfig {
  std::size_t epochs = 15;
  std::size_t batch_size = 16;
  double base_lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lr_power = 0.9;
  // 0 means ceil(|train| / batch_size).
  std::size_t iters_per_epoch = 0;
  std::uint64_t seed = 0;
  bool augment = true;
  double crop_scale_lo = 0.5;
  double crop_scale_hi = 1.0;
  double flip_p = 0.5;
};

// Full-length schedule: 30 epochs x 42 iterations, batch 32.
TrainConfig reference_train_config();
void validate_train_config(const TrainConfig& config);
std::string train_config_to_json(const TrainConfig& config);
// Missing fields keep their defaults.
TrainConfig train_config_from_json(const std::string& text);

// base_lr * (1 - n / total)^power.
double poly_lr(std::size_t n, std::size_t total_iters, double base_lr,
               double power);

struct SgdState {
  std::vector<Tensor> velocity;
};

// v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v.
void sgd_step(std::span<Tensor> params, std::span<const Tensor> grads,
              SgdState& state, double lr, double momentum,
              double weight_decay);

struct IterationRecord {
  std::size_t iteration;
  double lr;
  double loss;
};

struct EpochRecord {
  std::size_t epoch;  // 1-based
  double train_loss;
  double val_loss;
};

struct TrainHistory {
  std::vector<IterationRecord> iterations;
  std::vector<EpochRecord> epochs;
  std::size_t selected_epoch = 0;  // 1-based epoch with minimum val loss

  std::string iterations_csv() const;
  std::string epochs_csv() const;
};

struct TrainResult {
  Model model;  // weights from the selected epoch
  TrainHistory history;
};

// SGD over shuffled, augmented mini-batches. When `enc` is set every forward
// (training and validation) is encrypted with the same key. Returns the
// weights with the lowest validation loss. Deterministic per config.seed.
TrainResult train(const Model& initial, const DatasetSplit& split,
                  const TrainConfig& config, const Encryption* enc = nullptr);

// Mean pixel cross-entropy over `samples` in eval mode.
double dataset_loss(const Model& model, std::span<const SegSample> samples,
                    const Encryption* enc, std::size_t batch_size = 16);

enum class KeyCondition { kCorrect, kNoEnc, kWrongKey };

std::string to_string(KeyCondition condition);
KeyCondition parse_key_condition(const std::string& text);

struct EvalMode {
  KeyCondition condition = KeyCondition::kNoEnc;
  std::optional<Encryption> enc;

  static EvalMode correct_key(Encryption enc);
  static EvalMode no_enc();
  static EvalMode wrong_key(Encryption enc);
};

struct EvalReport {
  KeyCondition condition = KeyCondition::kNoEnc;
  std::optional<EncryptionSpec> spec;
  std::size_t samples = 0;
  ConfusionCounts counts;
  IouResult iou;
  std::vector<double> per_image_miou;

  std::string to_json() const;
  std::string to_csv() const;  // class,TP,FP,FN,IoU
};

// Runs the model under `mode` and accumulates confusion counts. With
// threads > 1 the dataset is sharded and the counts merged.
EvalReport evaluate(const Model& model, std::span<const SegSample> samples,
                    const EvalMode& mode, std::size_t threads = 1);

}  // namespace segkey
