#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "segkey/autograd.hpp"
#include "segkey/ops.hpp"
#include "segkey/tensor.hpp"
#include "segkey/transforms.hpp"

namespace segkey {

inline constexpr int kNumTaps = 6;

enum class Variant { kPlain, kResidual };

std::string to_string(Variant v);
Variant parse_variant(const std::string& text);

struct ModelConfig {
  Variant variant = Variant::kResidual;
  std::size_t in_channels = 3;
  std::size_t base_channels = 16;
  std::size_t num_classes = 4;
  std::array<std::size_t, kNumTaps> tap_channels{16, 32, 32, 32, 64, 64};
  std::uint64_t init_seed = 0;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Widths implied by base channel count b: [b, 2b, 2b, 2b, 4b, 4b].
std::array<std::size_t, kNumTaps> tap_channels_for(std::size_t base_channels);
void validate_config(const ModelConfig& config);

struct Parameter {
  std::string name;
  Tensor value;
};

struct BatchNormBuffer {
  std::string name;
  ops::BatchNormState state;
};

// Toy encoder/decoder:
//
//   stem conv (stride 2) -> tap1 -> down conv (stride 2)
//   -> block1 [branch -> tap2] -> block2 [branch -> tap3]
//   -> block3 [branch -> tap4] -> neck conv -> tap5 -> head conv -> tap6
//   -> 1x1 classifier -> bilinear upsample to input size
//
// In the residual variant each block computes relu(x + branch(x)); taps 2-4
// sit on the branch output, between the block's input fork and the skip add.
// The plain variant drops the skip (relu(branch(x))).
class Model {
 public:
  Model() = default;
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<BatchNormBuffer>& batch_norms() { return bn_; }
  const std::vector<BatchNormBuffer>& batch_norms() const { return bn_; }

  std::size_t parameter_count() const;
  Parameter& parameter(const std::string& name);

  friend bool operator==(const Model& a, const Model& b);

 private:
  friend class ForwardPass;

  struct ConvBn {
    std::size_t weight, gamma, beta, bn;
    std::size_t stride, pad;
  };
  struct Block {
    ConvBn first, second;
  };

  std::size_t add_param(std::string name, Tensor value);
  ConvBn make_conv_bn(const std::string& name, std::size_t in_c,
                      std::size_t out_c, std::size_t stride);

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::vector<BatchNormBuffer> bn_;
  ConvBn stem_{}, down_{}, neck_{}, head_{};
  std::array<Block, 3> blocks_{};
  std::size_t cls_weight_ = 0, cls_bias_ = 0;
};

Model build_model(const ModelConfig& config);

struct ForwardOptions {
  const Encryption* enc = nullptr;
  ops::BnMode mode = ops::BnMode::kEval;
  // Called with each tap activation (after any CP encryption at that tap).
  // The hook may rewrite the tensor; rewrites pass gradients straight
  // through, so use hooks for inspection and ablation only.
  std::function<void(int tap, Tensor& activation)> tap_hook;
};

struct ForwardResult {
  Var logits;
  std::vector<Var> params;  // leaf per Model::parameters() entry
};

// Throws ShapeError before any compute if `enc` does not fit the model or
// the input shape.
void check_encryption(const Model& model, const Encryption& enc,
                      const Shape& input_shape);

// Records the forward pass on `tape`. Train mode updates the model's
// batch-norm running statistics.
ForwardResult forward(Model& model, GradTape& tape, const Tensor& batch,
                      const ForwardOptions& options);

// Eval-mode logits without gradient tracking.
Tensor infer(const Model& model, const Tensor& batch,
             const Encryption* enc = nullptr,
             const std::function<void(int, Tensor&)>& tap_hook = {});

}  // namespace segkey
