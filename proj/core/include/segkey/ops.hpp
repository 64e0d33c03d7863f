#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>

#include "segkey/autograd.hpp"
#include "segkey/labels.hpp"
#include "segkey/tensor.hpp"

namespace segkey::ops {

// 2-D convolution. x: (n, in_c, h, w); weight: (out_c, in_c, k, k);
// bias: (out_c). Output spatial size is (h + 2 * padding - k) / stride + 1.
Var conv2d(GradTape& tape, Var x, Var weight, Var bias, std::size_t stride,
           std::size_t padding);

Var relu(GradTape& tape, Var x);
Var add(GradTape& tape, Var a, Var b);

enum class BnMode { kTrain, kEval };

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean({channels}, 0.0), running_var({channels}, 1.0) {}
};

// Per-channel normalisation over (batch, row, column). Train mode uses the
// biased batch variance and updates `state` with momentum; eval mode reads
// the running statistics.
Var batch_norm(GradTape& tape, Var x, Var gamma, Var beta,
               BatchNormState& state, BnMode mode);

// Half-pixel-centre bilinear resize of a rank-4 tensor.
Var bilinear_upsample(GradTape& tape, Var x, std::size_t out_h,
                      std::size_t out_w);

// Mean over non-ignored pixels of -log softmax(logits)[label].
// logits: (n, classes, h, w); labels: n maps of h x w.
Var softmax_cross_entropy(GradTape& tape, Var logits,
                          std::span<const LabelMap> labels,
                          std::optional<std::uint8_t> ignore_label = {});

// out[:, j] = x[:, source[j]] over axis 1 (0-based indices).
Var channel_gather(GradTape& tape, Var x, std::span<const std::size_t> source);

// Scalar sum(x * weights); used to build scalar test compositions.
Var weighted_sum(GradTape& tape, Var x, const Tensor& weights);

}  // namespace segkey::ops
