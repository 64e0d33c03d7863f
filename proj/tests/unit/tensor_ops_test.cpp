#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "segkey/error.hpp"
#include "segkey/ops.hpp"
#include "segkey/serialize.hpp"
#include "test_util.hpp"

namespace segkey {
namespace {

using testing::random_tensor;

Tensor run_conv(const Tensor& x, const Tensor& w, const Tensor& b,
                std::size_t stride, std::size_t pad) {
  GradTape tape(false);
  return tape.value(ops::conv2d(tape, tape.leaf(x), tape.leaf(w), tape.leaf(b),
                                stride, pad));
}

// Direct nested-loop convolution, independent of the im2col path.
Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& b,
                  std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t co = w.dim(0), k = w.dim(2);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1;
  const std::size_t ow = (wd + 2 * pad - k) / stride + 1;
  Tensor out({n, co, oh, ow});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double acc = b[o];
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = long(y * stride + ky) - long(pad);
                const long ix = long(xx * stride + kx) - long(pad);
                if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(wd)) continue;
                acc += x.at(s, c, iy, ix) * w.at(o, c, ky, kx);
              }
          out.at(s, o, y, xx) = acc;
        }
  return out;
}

TEST(Conv2d, IdentityKernel) {
  const Tensor out = run_conv(Tensor({1, 1, 1, 1}, {5.0}), Tensor({1, 1, 1, 1}, {1.0}),
                              Tensor({1}, {0.0}), 1, 0);
  EXPECT_EQ(out, Tensor({1, 1, 1, 1}, {5.0}));
}

TEST(Conv2d, ZeroInputGivesZeroOutput) {
  std::mt19937_64 rng(1);
  const Tensor out = run_conv(Tensor({2, 3, 5, 5}), random_tensor({4, 3, 3, 3}, rng),
                              Tensor({4}), 1, 1);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, HandSummedWindows) {
  const Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Tensor out = run_conv(x, Tensor({1, 1, 2, 2}, 1.0), Tensor({1}), 1, 0);
  EXPECT_EQ(out, Tensor({1, 1, 2, 2}, {12, 16, 24, 28}));
}

TEST(Conv2d, MatchesDirectLoopOracle) {
  std::mt19937_64 rng(7);
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      const Tensor x = random_tensor({2, 3, 7, 6}, rng);
      const Tensor w = random_tensor({4, 3, 3, 3}, rng);
      const Tensor b = random_tensor({4}, rng);
      EXPECT_LT(max_abs_diff(run_conv(x, w, b, stride, pad),
                             naive_conv(x, w, b, stride, pad)),
                1e-12);
    }
  }
}

TEST(Conv2d, OutputSizeFormula) {
  const Tensor out = run_conv(Tensor({1, 2, 9, 8}), Tensor({3, 2, 3, 3}), Tensor({3}), 2, 1);
  EXPECT_EQ(out.shape(), (Shape{1, 3, 5, 4}));
}

TEST(Conv2d, LinearInInput) {
  std::mt19937_64 rng(3);
  const Tensor w = random_tensor({3, 2, 3, 3}, rng);
  const Tensor zero_b({3});
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = random_tensor({1, 2, 6, 6}, rng);
    const Tensor y = random_tensor({1, 2, 6, 6}, rng);
    const double a = 1.7, c = -0.3;
    Tensor mix(x.shape());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + c * y[i];
    const Tensor lhs = run_conv(mix, w, zero_b, 1, 1);
    const Tensor cx = run_conv(x, w, zero_b, 1, 1);
    const Tensor cy = run_conv(y, w, zero_b, 1, 1);
    for (std::size_t i = 0; i < lhs.size(); ++i) {
      const double rhs = a * cx[i] + c * cy[i];
      EXPECT_LE(std::abs(lhs[i] - rhs), 1e-9 * std::max(1.0, std::abs(rhs)));
    }
  }
}

TEST(Conv2d, RejectsChannelMismatchWithDimensions) {
  GradTape tape;
  Var x = tape.leaf(Tensor({1, 2, 4, 4}));
  Var w = tape.leaf(Tensor({3, 5, 3, 3}));
  Var b = tape.leaf(Tensor({3}));
  try {
    ops::conv2d(tape, x, w, b, 1, 1);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("(1x2x4x4)"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("(3x5x3x3)"), std::string::npos);
  }
}

TEST(Relu, ForwardAndSubgradient) {
  GradTape tape;
  Var x = tape.leaf(Tensor({3}, {-1.0, 0.0, 2.0}));
  Var y = ops::relu(tape, x);
  EXPECT_EQ(tape.value(y), Tensor({3}, {0.0, 0.0, 2.0}));
  tape.backward(ops::weighted_sum(tape, y, Tensor({3}, 1.0)));
  EXPECT_EQ(tape.grad(x), Tensor({3}, {0.0, 0.0, 1.0}));
}

TEST(Relu, GradientExample) {
  GradTape tape;
  Var x = tape.leaf(Tensor({2}, {-1.0, 2.0}));
  tape.backward(ops::weighted_sum(tape, ops::relu(tape, x), Tensor({2}, {1.0, 1.0})));
  EXPECT_EQ(tape.grad(x), Tensor({2}, {0.0, 1.0}));
}

TEST(Relu, AllNegativeIsZero) {
  GradTape tape(false);
  Var y = ops::relu(tape, tape.leaf(Tensor({4}, -3.0)));
  EXPECT_EQ(tape.value(y), Tensor({4}, 0.0));
}

Tensor run_bn(const Tensor& x, double gamma, double beta, ops::BnMode mode,
              ops::BatchNormState& state) {
  GradTape tape(false);
  const std::size_t c = x.dim(1);
  return tape.value(ops::batch_norm(tape, tape.leaf(x), tape.leaf(Tensor({c}, gamma)),
                                    tape.leaf(Tensor({c}, beta)), state, mode));
}

TEST(BatchNorm, ConstantChannelGivesBeta) {
  ops::BatchNormState state(1);
  const Tensor out = run_bn(Tensor({2, 1, 2, 2}, 3.5), 2.0, 0.25, ops::BnMode::kTrain, state);
  for (double v : out.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(BatchNorm, TwoValueChannelNormalisesToUnit) {
  ops::BatchNormState state(1);
  const Tensor out = run_bn(Tensor({2, 1, 1, 1}, {1.0, 3.0}), 1.0, 0.0,
                            ops::BnMode::kTrain, state);
  // mean 2, population variance 1
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(out[0], -expect, 1e-15);
  EXPECT_NEAR(out[1], expect, 1e-15);
  EXPECT_NEAR(state.running_mean[0], 0.1 * 2.0, 1e-15);
  // Running variance tracks the unbiased estimate (2 here).
  EXPECT_NEAR(state.running_var[0], 0.9 * 1.0 + 0.1 * 2.0, 1e-15);
}

TEST(BatchNorm, StandardisedChannelUnchanged) {
  ops::BatchNormState state(1);
  const Tensor x({1, 1, 2, 2}, {-1.0, 1.0, -1.0, 1.0});
  const Tensor out = run_bn(x, 1.0, 0.0, ops::BnMode::kTrain, state);
  EXPECT_LT(max_abs_diff(out, x), 1e-5);
}

TEST(BatchNorm, EvalUsesRunningStats) {
  ops::BatchNormState state(1);
  state.running_mean[0] = 1.0;
  state.running_var[0] = 4.0;
  const Tensor out = run_bn(Tensor({1, 1, 1, 1}, {5.0}), 1.0, 0.0, ops::BnMode::kEval, state);
  EXPECT_NEAR(out[0], 4.0 / std::sqrt(4.0 + 1e-5), 1e-15);
  EXPECT_EQ(state.running_mean[0], 1.0);
}

Tensor run_upsample(const Tensor& x, std::size_t h, std::size_t w) {
  GradTape tape(false);
  return tape.value(ops::bilinear_upsample(tape, tape.leaf(x), h, w));
}

TEST(BilinearUpsample, SameSizeIsIdentity) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({2, 3, 4, 5}, rng);
  EXPECT_EQ(run_upsample(x, 4, 5), x);
}

TEST(BilinearUpsample, ConstantsPreservedExactly) {
  const Tensor out = run_upsample(Tensor({1, 2, 3, 5}, 0.375), 17, 16);
  for (double v : out.data()) EXPECT_EQ(v, 0.375);
}

TEST(BilinearUpsample, HalfPixelRow) {
  const Tensor out = run_upsample(Tensor({1, 1, 2, 2}, {0, 1, 0, 1}), 2, 4);
  EXPECT_EQ(out, Tensor({1, 1, 2, 4}, {0, 0.25, 0.75, 1, 0, 0.25, 0.75, 1}));
}

double run_ce(const Tensor& logits, const std::vector<LabelMap>& labels) {
  GradTape tape(false);
  return tape.value(ops::softmax_cross_entropy(tape, tape.leaf(logits), labels))[0];
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogClasses) {
  const Tensor logits({2, 4, 3, 3}, 0.7);
  std::vector<LabelMap> labels(2, LabelMap(3, 3, 2));
  EXPECT_NEAR(run_ce(logits, labels), std::log(4.0), 1e-12);
}

TEST(SoftmaxCrossEntropy, SinglePixel) {
  const Tensor logits({1, 2, 1, 1}, {1.0, 0.0});
  std::vector<LabelMap> labels{LabelMap(1, 1, 0)};
  EXPECT_NEAR(run_ce(logits, labels), 0.31326168751822283, 1e-15);
}

TEST(SoftmaxCrossEntropy, ConfidentTrueClassApproachesZero) {
  const Tensor logits({1, 3, 1, 1}, {200.0, 0.0, -5.0});
  std::vector<LabelMap> labels{LabelMap(1, 1, 0)};
  const double loss = run_ce(logits, labels);
  EXPECT_GE(loss, 0.0);
  EXPECT_LT(loss, 1e-80);
}

TEST(SoftmaxCrossEntropy, NonNegativeOnRandomInputs) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor logits = random_tensor({1, 3, 2, 2}, rng, -5, 5);
    LabelMap l(2, 2);
    for (auto& v : l.data) v = static_cast<std::uint8_t>(rng() % 3);
    EXPECT_GE(run_ce(logits, {l}), 0.0);
  }
}

TEST(SoftmaxCrossEntropy, AllIgnoredIsAnError) {
  GradTape tape;
  std::vector<LabelMap> labels{LabelMap(2, 2, 255)};
  Var logits = tape.leaf(Tensor({1, 3, 2, 2}));
  EXPECT_THROW(ops::softmax_cross_entropy(tape, logits, labels, 255), ShapeError);
}

TEST(SoftmaxCrossEntropy, IgnoredPixelsReceiveNoGradient) {
  GradTape tape;
  LabelMap l(1, 2, 1);
  l.data[1] = 255;
  Var logits = tape.leaf(Tensor({1, 2, 1, 2}, {0.3, -0.2, 0.1, 0.4}));
  tape.backward(ops::softmax_cross_entropy(tape, logits, std::vector{l}, 255));
  const Tensor g = tape.grad(logits);
  EXPECT_EQ(g[1], 0.0);
  EXPECT_EQ(g[3], 0.0);
  EXPECT_NE(g[0], 0.0);
}

TEST(GradTape, BackwardVisitsOpsInReverseOrder) {
  GradTape tape;
  Var a = tape.leaf(Tensor({2}, {1.0, -2.0}));
  Var b = ops::relu(tape, a);           // id 1
  Var c = ops::add(tape, b, a);          // id 2
  Var d = ops::relu(tape, c);            // id 3
  Var loss = ops::weighted_sum(tape, d, Tensor({2}, 1.0));  // id 4
  tape.backward(loss);
  EXPECT_EQ(tape.last_backward_order(),
            (std::vector<std::size_t>{loss.id, d.id, c.id, b.id}));
}

TEST(GradTape, DisabledTapeRecordsNoGradients) {
  GradTape tape(false);
  Var a = tape.leaf(Tensor({1}, {2.0}));
  Var loss = ops::weighted_sum(tape, a, Tensor({1}, 3.0));
  EXPECT_FALSE(tape.requires_grad(loss));
  tape.backward(loss);
  EXPECT_EQ(tape.grad(a), Tensor({1}, 0.0));
}

TEST(TensorSerialization, LayoutIsMagicRankDimsPayload) {
  const Tensor t({2, 1}, {1.0, -2.5});
  std::ostringstream out(std::ios::binary);
  write_tensor(out, t);
  const std::string bytes = out.str();
  ASSERT_EQ(bytes.size(), 4u + 4u + 8u + 16u);
  EXPECT_EQ(bytes.substr(0, 4), "SGT1");
  EXPECT_EQ(bytes[4], 2);
  EXPECT_EQ(bytes[8], 2);
  EXPECT_EQ(bytes[12], 1);
  // 1.0 = 0x3FF0000000000000, little-endian.
  EXPECT_EQ(static_cast<unsigned char>(bytes[16 + 7]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(bytes[16 + 6]), 0xF0);
  std::istringstream in(bytes, std::ios::binary);
  EXPECT_EQ(read_tensor(in), t);
}

TEST(TensorSerialization, RejectsBadMagicAndTruncation) {
  std::istringstream bad("XGT1\0\0\0\0", std::ios::binary);
  EXPECT_THROW(read_tensor(bad), FormatError);
  std::ostringstream out(std::ios::binary);
  write_tensor(out, Tensor({3}, 1.0));
  std::istringstream cut(out.str().substr(0, 20), std::ios::binary);
  EXPECT_THROW(read_tensor(cut), FormatError);
}

}  // namespace
}  // namespace segkey
