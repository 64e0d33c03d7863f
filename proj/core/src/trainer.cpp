#include "segkey/trainer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <thread>

#include "segkey/error.hpp"

namespace segkey {

TrainConfig reference_train_config() {
  TrainConfig c;
  c.epochs = 30;
  c.batch_size = 32;
  c.iters_per_epoch = 42;
  return c;
}

void validate_train_config(const TrainConfig& c) {
  if (!(c.base_lr > 0.0)) throw ShapeError("train config: base_lr must be > 0");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) {
    throw ShapeError("train config: momentum must be in [0,1)");
  }
  if (!(c.lr_power > 0.0)) throw ShapeError("train config: lr_power must be > 0");
  if (c.epochs == 0 || c.batch_size == 0) {
    throw ShapeError("train config: epochs and batch_size must be positive");
  }
  if (c.weight_decay < 0.0) throw ShapeError("train config: weight_decay < 0");
}

std::string train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["base_lr"] = c.base_lr;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["lr_power"] = c.lr_power;
  j["iters_per_epoch"] = c.iters_per_epoch;
  j["seed"] = c.seed;
  j["augment"] = c.augment;
  j["crop_scale"] = {c.crop_scale_lo, c.crop_scale_hi};
  j["flip_p"] = c.flip_p;
  return j.dump(2) + "\n";
}

TrainConfig train_config_from_json(const std::string& text) {
  TrainConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.base_lr = j.value("base_lr", c.base_lr);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lr_power = j.value("lr_power", c.lr_power);
    c.iters_per_epoch = j.value("iters_per_epoch", c.iters_per_epoch);
    c.seed = j.value("seed", c.seed);
    c.augment = j.value("augment", c.augment);
    if (j.contains("crop_scale")) {
      const auto range = j["crop_scale"].get<std::vector<double>>();
      if (range.size() != 2) throw FormatError("crop_scale must be [lo, hi]");
      c.crop_scale_lo = range[0];
      c.crop_scale_hi = range[1];
    }
    c.flip_p = j.value("flip_p", c.flip_p);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad train config: ") + e.what());
  }
  try {
    validate_train_config(c);
  } catch (const ShapeError& e) {
    throw FormatError(e.what());
  }
  return c;
}

double poly_lr(std::size_t n, std::size_t total_iters, double base_lr,
               double power) {
  if (total_iters == 0 || n > total_iters) {
    throw ShapeError("poly_lr: iteration " + std::to_string(n) +
                     " outside schedule of " + std::to_string(total_iters));
  }
  const double frac = static_cast<double>(n) / static_cast<double>(total_iters);
  return base_lr * std::pow(1.0 - frac, power);
}

void sgd_step(std::span<Tensor> params, std::span<const Tensor> grads,
              SgdState& state, double lr, double momentum,
              double weight_decay) {
  if (params.size() != grads.size()) {
    throw ShapeError("sgd_step: parameter and gradient counts differ");
  }
  if (state.velocity.empty()) {
    for (const Tensor& p : params) state.velocity.emplace_back(p.shape());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    const Tensor& g = grads[i];
    Tensor& v = state.velocity[i];
    if (g.size() != p.size() || v.size() != p.size()) {
      throw ShapeError("sgd_step: shape mismatch for parameter " + std::to_string(i));
    }
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = momentum * v[k] + (g[k] + weight_decay * p[k]);
      p[k] -= lr * v[k];
    }
  }
}

std::string TrainHistory::iterations_csv() const {
  std::ostringstream os;
  os << std::setprecision(17) << "iteration,lr,loss\n";
  for (const auto& r : iterations) os << r.iteration << ',' << r.lr << ',' << r.loss << '\n';
  return os.str();
}

std::string TrainHistory::epochs_csv() const {
  std::ostringstream os;
  os << std::setprecision(17) << "epoch,train_loss,val_loss,selected\n";
  for (const auto& r : epochs) {
    os << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ','
       << (r.epoch == selected_epoch ? 1 : 0) << '\n';
  }
  return os.str();
}

namespace {

struct Batch {
  Tensor images;
  std::vector<LabelMap> labels;
};

Batch make_batch(std::span<const SegSample> samples) {
  std::vector<Tensor> images;
  Batch b;
  for (const SegSample& s : samples) {
    images.push_back(s.image);
    b.labels.push_back(s.label);
  }
  b.images = stack(images);
  return b;
}

}  // namespace

double dataset_loss(const Model& model, std::span<const SegSample> samples,
                    const Encryption* enc, std::size_t batch_size) {
  if (samples.empty()) throw ShapeError("dataset_loss: no samples");
  double total = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const auto chunk = samples.subspan(start, std::min(batch_size, samples.size() - start));
    Batch b = make_batch(chunk);
    GradTape tape(false);
    Var logits = tape.leaf(infer(model, b.images, enc), false);
    const double loss = tape.value(ops::softmax_cross_entropy(tape, logits, b.labels))[0];
    total += loss * static_cast<double>(chunk.size());
  }
  // Equal-sized samples, so the sample-weighted mean is the pixel mean.
  return total / static_cast<double>(samples.size());
}

TrainResult train(const Model& initial, const DatasetSplit& split,
                  const TrainConfig& config, const Encryption* enc) {
  validate_train_config(config);
  if (split.train.empty()) throw ShapeError("train: empty training split");
  if (split.val.empty()) throw ShapeError("train: empty validation split");
  const std::size_t size = split.train.front().image.dim(1);
  if (enc) {
    check_encryption(initial, *enc,
                     Shape{1, initial.config().in_channels, size,
                           split.train.front().image.dim(2)});
  }

  const std::size_t n = split.train.size();
  const std::size_t per_epoch = config.iters_per_epoch
                                    ? config.iters_per_epoch
                                    : (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total_iters = config.epochs * per_epoch;

  Model model = initial;
  TrainResult result{initial, {}};
  double best_val = std::numeric_limits<double>::infinity();
  SgdState sgd;
  Rng rng(config.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;  // forces a shuffle on first use
  std::size_t iteration = 0;

  ForwardOptions options;
  options.enc = enc;
  options.mode = ops::BnMode::kTrain;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t it = 0; it < per_epoch; ++it, ++iteration) {
      std::vector<SegSample> batch;
      for (std::size_t k = 0; k < config.batch_size && k < n; ++k) {
        if (cursor == n) {
          std::shuffle(order.begin(), order.end(), rng);
          cursor = 0;
        }
        const SegSample& src = split.train[order[cursor++]];
        if (config.augment) {
          SegSample aug = random_resized_crop(src, config.crop_scale_lo,
                                              config.crop_scale_hi,
                                              src.image.dim(1), rng);
          batch.push_back(hflip(aug, config.flip_p, rng));
        } else {
          batch.push_back(src);
        }
        if (config.iters_per_epoch == 0 && cursor == n) break;
      }
      Batch b = make_batch(batch);

      GradTape tape;
      ForwardResult fwd = forward(model, tape, b.images, options);
      Var loss = ops::softmax_cross_entropy(tape, fwd.logits, b.labels);
      const double loss_value = tape.value(loss)[0];
      if (!std::isfinite(loss_value)) {
        throw NumericError("training loss is not finite at iteration " +
                           std::to_string(iteration));
      }
      tape.backward(loss);

      auto& params = model.parameters();
      std::vector<Tensor> values, grads;
      values.reserve(params.size());
      grads.reserve(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        values.push_back(std::move(params[i].value));
        grads.push_back(tape.grad(fwd.params[i]));
      }
      const double lr = poly_lr(iteration, total_iters, config.base_lr, config.lr_power);
      sgd_step(values, grads, sgd, lr, config.momentum, config.weight_decay);
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (!values[i].all_finite()) {
          throw NumericError("non-finite parameter " + params[i].name +
                             " at iteration " + std::to_string(iteration));
        }
        params[i].value = std::move(values[i]);
      }
      result.history.iterations.push_back({iteration, lr, loss_value});
      epoch_loss += loss_value;
    }

    const double val = dataset_loss(model, split.val, enc, config.batch_size);
    if (!std::isfinite(val)) {
      throw NumericError("validation loss is not finite after epoch " +
                         std::to_string(epoch));
    }
    result.history.epochs.push_back(
        {epoch, epoch_loss / static_cast<double>(per_epoch), val});
    if (val < best_val) {
      best_val = val;
      result.model = model;
      result.history.selected_epoch = epoch;
    }
  }
  return result;
}

std::string to_string(KeyCondition condition) {
  switch (condition) {
    case KeyCondition::kCorrect: return "correct";
    case KeyCondition::kNoEnc: return "no-enc";
    case KeyCondition::kWrongKey: return "wrong-key";
  }
  return "unknown";
}

KeyCondition parse_key_condition(const std::string& text) {
  if (text == "correct") return KeyCondition::kCorrect;
  if (text == "no-enc") return KeyCondition::kNoEnc;
  if (text == "wrong-key") return KeyCondition::kWrongKey;
  throw FormatError("unknown key condition '" + text + "'");
}

EvalMode EvalMode::correct_key(Encryption enc) {
  return EvalMode{KeyCondition::kCorrect, std::move(enc)};
}
EvalMode EvalMode::no_enc() { return EvalMode{KeyCondition::kNoEnc, std::nullopt}; }
EvalMode EvalMode::wrong_key(Encryption enc) {
  return EvalMode{KeyCondition::kWrongKey, std::move(enc)};
}

namespace {

struct Shard {
  ConfusionCounts counts;
  std::vector<double> per_image;
};

Shard evaluate_range(const Model& model, std::span<const SegSample> samples,
                     const Encryption* enc) {
  const std::size_t classes = model.config().num_classes;
  Shard shard{ConfusionCounts(classes), {}};
  constexpr std::size_t kChunk = 16;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const auto chunk = samples.subspan(start, std::min(kChunk, samples.size() - start));
    Batch b = make_batch(chunk);
    const Tensor logits = infer(model, b.images, enc);
    if (!logits.all_finite()) throw NumericError("non-finite logits in evaluation");
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const LabelMap pred = argmax_labels(logits, i);
      const ConfusionCounts c = confusion(pred, chunk[i].label, classes);
      shard.per_image.push_back(mean_iou(c).mean);
      shard.counts.merge(c);
    }
  }
  return shard;
}

}  // namespace

EvalReport evaluate(const Model& model, std::span<const SegSample> samples,
                    const EvalMode& mode, std::size_t threads) {
  if (samples.empty()) throw ShapeError("no samples");
  if (mode.condition != KeyCondition::kNoEnc && !mode.enc) {
    throw ShapeError("evaluate: " + to_string(mode.condition) + " mode needs a key");
  }
  const Encryption* enc = mode.condition == KeyCondition::kNoEnc ? nullptr : &*mode.enc;
  if (enc) {
    const auto& img = samples.front().image;
    check_encryption(model, *enc, Shape{1, img.dim(0), img.dim(1), img.dim(2)});
  }

  threads = std::clamp<std::size_t>(threads, 1, samples.size());
  std::vector<Shard> shards(threads);
  const std::size_t per = (samples.size() + threads - 1) / threads;
  if (threads == 1) {
    shards[0] = evaluate_range(model, samples, enc);
  } else {
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t begin = std::min(t * per, samples.size());
      const std::size_t end = std::min(begin + per, samples.size());
      workers.emplace_back([&, t, begin, end] {
        try {
          shards[t] = evaluate_range(model, samples.subspan(begin, end - begin), enc);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& w : workers) w.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  EvalReport report;
  report.condition = mode.condition;
  if (mode.enc) report.spec = mode.enc->spec;
  report.samples = samples.size();
  report.counts = ConfusionCounts(model.config().num_classes);
  for (const Shard& s : shards) {
    if (s.counts.num_classes() == 0) continue;
    report.counts.merge(s.counts);
    report.per_image_miou.insert(report.per_image_miou.end(), s.per_image.begin(),
                                 s.per_image.end());
  }
  report.iou = mean_iou(report.counts);
  return report;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["mode"] = to_string(condition);
  if (spec) {
    j["method"] = to_string(spec->method);
    if (spec->method == EncryptionMethod::kCpTap) {
      j["tap"] = spec->tap;
    } else {
      j["block_size"] = spec->block_size;
    }
  } else {
    j["method"] = nullptr;
  }
  j["samples"] = samples;
  j["mean_iou"] = iou.mean;
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t k = 0; k < counts.num_classes(); ++k) {
    classes.push_back({{"class", k},
                       {"tp", counts.tp[k]},
                       {"fp", counts.fp[k]},
                       {"fn", counts.fn[k]},
                       {"iou", iou.per_class[k] ? nlohmann::json(*iou.per_class[k])
                                                : nlohmann::json(nullptr)}});
  }
  j["classes"] = classes;
  j["per_image_miou"] = per_image_miou;
  return j.dump(2) + "\n";
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(10) << "class,TP,FP,FN,IoU\n";
  for (std::size_t k = 0; k < counts.num_classes(); ++k) {
    os << k << ',' << counts.tp[k] << ',' << counts.fp[k] << ',' << counts.fn[k] << ',';
    if (iou.per_class[k]) os << *iou.per_class[k];
    os << '\n';
  }
  os << "mean,,,," << iou.mean << '\n';
  return os.str();
}

}  // namespace segkey
