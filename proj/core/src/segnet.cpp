#include "segkey/segnet.hpp"

#include <cmath>
#include <random>

#include "segkey/error.hpp"

namespace segkey {

std::string to_string(Variant v) {
  return v == Variant::kResidual ? "residual" : "plain";
}

Variant parse_variant(const std::string& text) {
  if (text == "residual") return Variant::kResidual;
  if (text == "plain") return Variant::kPlain;
  throw FormatError("unknown model variant '" + text + "'");
}

std::array<std::size_t, kNumTaps> tap_channels_for(std::size_t b) {
  return {b, 2 * b, 2 * b, 2 * b, 4 * b, 4 * b};
}

void validate_config(const ModelConfig& config) {
  if (config.base_channels == 0 || config.in_channels == 0) {
    throw ShapeError("model config: channel counts must be positive");
  }
  if (config.num_classes < 2) {
    throw ShapeError("model config: need at least 2 classes");
  }
  if (config.tap_channels != tap_channels_for(config.base_channels)) {
    throw ShapeError("model config: tap_channels inconsistent with base_channels " +
                     std::to_string(config.base_channels));
  }
}

std::size_t Model::add_param(std::string name, Tensor value) {
  params_.push_back({std::move(name), std::move(value)});
  return params_.size() - 1;
}

Model::ConvBn Model::make_conv_bn(const std::string& name, std::size_t in_c,
                                  std::size_t out_c, std::size_t stride) {
  ConvBn layer{};
  layer.weight = add_param(name + ".weight", Tensor({out_c, in_c, 3, 3}));
  layer.gamma = add_param(name + ".bn.gamma", Tensor({out_c}, 1.0));
  layer.beta = add_param(name + ".bn.beta", Tensor({out_c}, 0.0));
  bn_.push_back({name + ".bn", ops::BatchNormState(out_c)});
  layer.bn = bn_.size() - 1;
  layer.stride = stride;
  layer.pad = 1;
  return layer;
}

Model::Model(const ModelConfig& config) : config_(config) {
  validate_config(config);
  const auto& t = config.tap_channels;
  stem_ = make_conv_bn("stem", config.in_channels, t[0], 2);
  down_ = make_conv_bn("down", t[0], t[1], 2);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string name = "block" + std::to_string(i + 1);
    blocks_[i].first = make_conv_bn(name + ".conv1", t[1], t[1], 1);
    blocks_[i].second = make_conv_bn(name + ".conv2", t[1], t[1], 1);
  }
  neck_ = make_conv_bn("neck", t[3], t[4], 1);
  head_ = make_conv_bn("head", t[4], t[5], 1);
  cls_weight_ = add_param("classifier.weight",
                          Tensor({config.num_classes, t[5], 1, 1}));
  cls_bias_ = add_param("classifier.bias", Tensor({config.num_classes}, 0.0));

  // He-normal init for conv weights, in declaration order.
  std::mt19937_64 rng(config.init_seed);
  for (Parameter& p : params_) {
    if (p.value.rank() != 4) continue;
    const double fan_in =
        static_cast<double>(p.value.dim(1) * p.value.dim(2) * p.value.dim(3));
    const double gain = p.name == "classifier.weight" ? 1.0 : 2.0;
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / fan_in));
    for (double& v : p.value.data()) v = dist(rng);
  }
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.value.size();
  return n;
}

Parameter& Model::parameter(const std::string& name) {
  for (Parameter& p : params_) {
    if (p.name == name) return p;
  }
  throw ShapeError("no parameter named " + name);
}

bool operator==(const Model& a, const Model& b) {
  if (!(a.config_ == b.config_) || a.params_.size() != b.params_.size() ||
      a.bn_.size() != b.bn_.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.params_.size(); ++i) {
    if (a.params_[i].name != b.params_[i].name ||
        !(a.params_[i].value == b.params_[i].value)) {
      return false;
    }
  }
  for (std::size_t i = 0; i < a.bn_.size(); ++i) {
    if (!(a.bn_[i].state.running_mean == b.bn_[i].state.running_mean) ||
        !(a.bn_[i].state.running_var == b.bn_[i].state.running_var)) {
      return false;
    }
  }
  return true;
}

Model build_model(const ModelConfig& config) { return Model(config); }

void check_encryption(const Model& model, const Encryption& enc,
                      const Shape& input_shape) {
  if (input_shape.size() != 4) {
    throw ShapeError("forward: expected (n,c,h,w) batch, got " +
                     shape_string(input_shape));
  }
  if (enc.spec.method == EncryptionMethod::kShfInput) {
    validate_encryption(enc.spec, enc.key, input_shape);
    return;
  }
  if (enc.spec.tap < 1 || enc.spec.tap > kNumTaps) {
    throw ShapeError("tap must be in 1..6, got " + std::to_string(enc.spec.tap));
  }
  const std::size_t c = model.config().tap_channels[enc.spec.tap - 1];
  validate_encryption(enc.spec, enc.key, Shape{1, c, 1, 1});
}

class ForwardPass {
 public:
  ForwardPass(const Model& model, std::vector<ops::BatchNormState>& bn,
              GradTape& tape, const ForwardOptions& options)
      : model_(model), bn_(bn), tape_(tape), options_(options) {
    for (const Parameter& p : model.params_) {
      params_.push_back(tape.leaf(p.value, true));
    }
  }

  Var run(const Tensor& batch) {
    const Encryption* enc = options_.enc;
    if (enc) check_encryption(model_, *enc, batch.shape());
    if (batch.dim(1) != model_.config_.in_channels) {
      throw ShapeError("forward: input " + shape_string(batch.shape()) +
                       " does not have " +
                       std::to_string(model_.config_.in_channels) + " channels");
    }
    const bool shf = enc && enc->spec.method == EncryptionMethod::kShfInput;
    Var x = tape_.leaf(shf ? shf_apply(batch, enc->key, enc->spec.block_size,
                                       Direction::kEncrypt)
                           : batch,
                       false);

    x = conv_bn_relu(x, model_.stem_);
    x = tap(1, x);
    x = conv_bn_relu(x, model_.down_);
    for (std::size_t i = 0; i < model_.blocks_.size(); ++i) {
      const auto& block = model_.blocks_[i];
      Var branch = conv_bn_relu(x, block.first);
      branch = conv_bn(branch, block.second);
      branch = tap(static_cast<int>(i) + 2, branch);
      x = model_.config_.variant == Variant::kResidual
              ? ops::relu(tape_, ops::add(tape_, x, branch))
              : ops::relu(tape_, branch);
    }
    x = conv_bn_relu(x, model_.neck_);
    x = tap(5, x);
    x = conv_bn_relu(x, model_.head_);
    x = tap(6, x);
    x = ops::conv2d(tape_, x, params_[model_.cls_weight_],
                    params_[model_.cls_bias_], 1, 0);
    return ops::bilinear_upsample(tape_, x, batch.dim(2), batch.dim(3));
  }

  std::vector<Var>& params() { return params_; }

 private:
  Var conv_bn(Var x, const Model::ConvBn& layer) {
    if (!no_bias_.valid() ||
        tape_.value(no_bias_).size() != model_.params_[layer.gamma].value.size()) {
      no_bias_ = tape_.leaf(Tensor({model_.params_[layer.gamma].value.size()}), false);
    }
    Var y = ops::conv2d(tape_, x, params_[layer.weight], no_bias_, layer.stride,
                        layer.pad);
    return ops::batch_norm(tape_, y, params_[layer.gamma], params_[layer.beta],
                           bn_[layer.bn], options_.mode);
  }

  Var conv_bn_relu(Var x, const Model::ConvBn& layer) {
    return ops::relu(tape_, conv_bn(x, layer));
  }

  Var tap(int index, Var x) {
    const Encryption* enc = options_.enc;
    if (enc && enc->spec.method == EncryptionMethod::kCpTap && enc->spec.tap == index) {
      x = tap_forward(tape_, x, enc->key);
    }
    if (!options_.tap_hook) return x;
    Tensor value = tape_.value(x);
    options_.tap_hook(index, value);
    return tape_.record(std::move(value), {x},
                        [x](GradTape& t, const Tensor& dy) { t.accumulate(x, dy); });
  }

  const Model& model_;
  std::vector<ops::BatchNormState>& bn_;
  GradTape& tape_;
  const ForwardOptions& options_;
  std::vector<Var> params_;
  Var no_bias_;
};

namespace {

std::vector<ops::BatchNormState> bn_states(const Model& model) {
  std::vector<ops::BatchNormState> states;
  for (const auto& b : model.batch_norms()) states.push_back(b.state);
  return states;
}

}  // namespace

ForwardResult forward(Model& model, GradTape& tape, const Tensor& batch,
                      const ForwardOptions& options) {
  std::vector<ops::BatchNormState> states = bn_states(model);
  ForwardPass pass(model, states, tape, options);
  ForwardResult result{pass.run(batch), pass.params()};
  if (options.mode == ops::BnMode::kTrain) {
    for (std::size_t i = 0; i < states.size(); ++i) {
      model.batch_norms()[i].state = states[i];
    }
  }
  return result;
}

Tensor infer(const Model& model, const Tensor& batch, const Encryption* enc,
             const std::function<void(int, Tensor&)>& tap_hook) {
  std::vector<ops::BatchNormState> states = bn_states(model);
  GradTape tape(false);
  ForwardOptions options{enc, ops::BnMode::kEval, tap_hook};
  ForwardPass pass(model, states, tape, options);
  return tape.value(pass.run(batch));
}

}  // namespace segkey
