#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "segkey/gradcheck.hpp"
#include "segkey/keying.hpp"
#include "segkey/ops.hpp"
#include "segkey/segnet.hpp"
#include "segkey/transforms.hpp"
#include "test_util.hpp"

namespace segkey {
namespace {

using testing::random_tensor;

constexpr double kEps = 1e-3;
constexpr double kTol = 1e-3;

// Random readout so every output coordinate feeds the scalar differently.
Var readout(GradTape& tape, Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ops::weighted_sum(tape, y, random_tensor(tape.value(y).shape(), rng));
}

Tensor away_from_zero(Shape shape, std::mt19937_64& rng) {
  Tensor t = random_tensor(std::move(shape), rng);
  for (double& v : t.data()) v = (v < 0 ? -0.1 : 0.1) + v;
  return t;
}

TEST(GradCheck, Conv2d) {
  std::mt19937_64 rng(11);
  for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 1}, {1, 0}}) {
    const auto r = finite_difference_check(
        [&](GradTape& t, std::span<const Var> in) {
          return readout(t, ops::conv2d(t, in[0], in[1], in[2], stride, pad), 1);
        },
        {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng),
         random_tensor({3}, rng)},
        kEps);
    EXPECT_LT(r.max_relative_error, kTol) << "stride " << stride << " pad " << pad;
    EXPECT_GT(r.coordinates, 0u);
  }
}

TEST(GradCheck, Relu) {
  std::mt19937_64 rng(12);
  const auto r = finite_difference_check(
      [](GradTape& t, std::span<const Var> in) { return readout(t, ops::relu(t, in[0]), 2); },
      {away_from_zero({2, 3, 4, 4}, rng)}, kEps);
  EXPECT_LT(r.max_relative_error, kTol);
}

TEST(GradCheck, Add) {
  std::mt19937_64 rng(13);
  const auto r = finite_difference_check(
      [](GradTape& t, std::span<const Var> in) { return readout(t, ops::add(t, in[0], in[1]), 3); },
      {random_tensor({1, 2, 3, 3}, rng), random_tensor({1, 2, 3, 3}, rng)}, kEps);
  EXPECT_LT(r.max_relative_error, kTol);
}

TEST(GradCheck, BatchNormTrainMode) {
  std::mt19937_64 rng(14);
  ops::BatchNormState state(3);
  const auto r = finite_difference_check(
      [&](GradTape& t, std::span<const Var> in) {
        return readout(t, ops::batch_norm(t, in[0], in[1], in[2], state, ops::BnMode::kTrain), 4);
      },
      {random_tensor({2, 3, 3, 3}, rng), random_tensor({3}, rng, 0.5, 1.5),
       random_tensor({3}, rng)},
      kEps);
  EXPECT_LT(r.max_relative_error, kTol);
}

TEST(GradCheck, BatchNormEvalMode) {
  std::mt19937_64 rng(15);
  ops::BatchNormState state(2);
  state.running_mean = Tensor({2}, {0.3, -0.2});
  state.running_var = Tensor({2}, {1.5, 0.7});
  const auto r = finite_difference_check(
      [&](GradTape& t, std::span<const Var> in) {
        return readout(t, ops::batch_norm(t, in[0], in[1], in[2], state, ops::BnMode::kEval), 5);
      },
      {random_tensor({2, 2, 3, 3}, rng), random_tensor({2}, rng), random_tensor({2}, rng)},
      kEps);
  EXPECT_LT(r.max_relative_error, kTol);
}

TEST(GradCheck, BilinearUpsample) {
  std::mt19937_64 rng(16);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{7, 9}, {12, 4}, {3, 6}}) {
    const auto r = finite_difference_check(
        [&](GradTape& t, std::span<const Var> in) {
          return readout(t, ops::bilinear_upsample(t, in[0], h, w), 6);
        },
        {random_tensor({2, 2, 3, 4}, rng)}, kEps);
    EXPECT_LT(r.max_relative_error, kTol) << h << "x" << w;
  }
}

TEST(GradCheck, SoftmaxCrossEntropy) {
  std::mt19937_64 rng(17);
  std::vector<LabelMap> labels(2, LabelMap(3, 3));
  for (auto& l : labels)
    for (auto& v : l.data) v = static_cast<std::uint8_t>(rng() % 4);
  labels[1].data[4] = 255;
  const auto r = finite_difference_check(
      [&](GradTape& t, std::span<const Var> in) {
        return ops::softmax_cross_entropy(t, in[0], labels, 255);
      },
      {random_tensor({2, 4, 3, 3}, rng, -3, 3)}, kEps);
  EXPECT_LT(r.max_relative_error, kTol);
}

TEST(GradCheck, ChannelGather) {
  std::mt19937_64 rng(18);
  const std::vector<std::size_t> source{2, 0, 3, 1};
  const auto r = finite_difference_check(
      [&](GradTape& t, std::span<const Var> in) {
        return readout(t, ops::channel_gather(t, in[0], source), 7);
      },
      {random_tensor({2, 4, 2, 3}, rng)}, kEps);
  EXPECT_LT(r.max_relative_error, kTol);
}

TEST(GradCheck, TapForward) {
  std::mt19937_64 rng(19);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const PermutationKey key = generate_permutation(6, seed);
    const auto r = finite_difference_check(
        [&](GradTape& t, std::span<const Var> in) {
          return readout(t, tap_forward(t, in[0], key), 8 + seed);
        },
        {random_tensor({2, 6, 3, 3}, rng)}, kEps);
    EXPECT_LT(r.max_relative_error, 1e-6) << "seed " << seed;
  }
}

TEST(TapForward, GradientIsInversePermutationOfUpstream) {
  const PermutationKey key{KeyMethod::kCp, {3, 1, 2}, {}};
  GradTape tape;
  Var x = tape.leaf(Tensor({1, 3, 1, 1}, {10, 20, 30}));
  Var y = tap_forward(tape, x, key);
  EXPECT_EQ(tape.value(y), Tensor({1, 3, 1, 1}, {30, 10, 20}));
  tape.backward(ops::weighted_sum(tape, y, Tensor({1, 3, 1, 1}, {1, 2, 3})));
  // d/dx(k_j) = upstream(j)
  EXPECT_EQ(tape.grad(x), Tensor({1, 3, 1, 1}, {2, 3, 1}));
}

TEST(GradCheck, WholeModelWithEncryptedTap) {
  ModelConfig cfg;
  cfg.base_channels = 2;
  cfg.tap_channels = tap_channels_for(2);
  cfg.num_classes = 3;
  cfg.init_seed = 4;
  const Model model(cfg);
  const Encryption enc{{EncryptionMethod::kCpTap, 6, 1}, generate_permutation(8, 2)};
  std::mt19937_64 rng(20);
  const Tensor batch = random_tensor({2, 3, 8, 8}, rng, 0, 1);
  std::vector<LabelMap> labels(2, LabelMap(8, 8));
  for (auto& l : labels)
    for (auto& v : l.data) v = static_cast<std::uint8_t>(rng() % 3);

  auto loss_of = [&](const Model& m, std::vector<Tensor>* grads) {
    Model copy = m;
    GradTape tape(grads != nullptr);
    ForwardOptions opts;
    opts.enc = &enc;
    opts.mode = ops::BnMode::kTrain;
    ForwardResult fr = forward(copy, tape, batch, opts);
    Var loss = ops::softmax_cross_entropy(tape, fr.logits, labels);
    if (grads) {
      tape.backward(loss);
      for (Var p : fr.params) grads->push_back(tape.grad(p));
    }
    return tape.value(loss)[0];
  };

  std::vector<Tensor> grads;
  loss_of(model, &grads);
  double worst = 0;
  for (std::size_t p = 0; p < model.parameters().size(); ++p) {
    const std::size_t n = model.parameters()[p].value.size();
    for (std::size_t i : {std::size_t{0}, n / 2, n - 1}) {
      Model plus = model, minus = model;
      plus.parameters()[p].value[i] += kEps;
      minus.parameters()[p].value[i] -= kEps;
      const double numeric = (loss_of(plus, nullptr) - loss_of(minus, nullptr)) / (2 * kEps);
      const double analytic = grads[p][i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
  }
  EXPECT_LT(worst, kTol);
}

}  // namespace
}  // namespace segkey
