#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "segkey/error.hpp"
#include "segkey/metrics.hpp"

namespace segkey {
namespace {

struct OracleIou {
  std::vector<double> per_class;  // -1 when unsupported
  double mean;
};

// Pixel loop over explicit class pairs; shares no code with confusion().
OracleIou brute_force_iou(const std::vector<std::pair<LabelMap, LabelMap>>& pairs,
                          std::size_t classes) {
  OracleIou out{std::vector<double>(classes, -1.0), 0.0};
  int used = 0;
  double sum = 0.0;
  for (std::size_t k = 0; k < classes; ++k) {
    long inter = 0, uni = 0;
    for (const auto& [pred, gt] : pairs) {
      for (std::size_t y = 0; y < gt.height; ++y) {
        for (std::size_t x = 0; x < gt.width; ++x) {
          const bool p = pred.at(y, x) == k, g = gt.at(y, x) == k;
          inter += p && g;
          uni += p || g;
        }
      }
    }
    if (uni == 0) continue;
    out.per_class[k] = static_cast<double>(inter) / static_cast<double>(uni);
    sum += out.per_class[k];
    ++used;
  }
  out.mean = sum / used;
  return out;
}

LabelMap random_map(std::size_t h, std::size_t w, std::size_t classes, std::mt19937_64& rng) {
  LabelMap m(h, w);
  for (auto& v : m.data) v = static_cast<std::uint8_t>(rng() % classes);
  return m;
}

TEST(Confusion, PerfectPrediction) {
  std::mt19937_64 rng(1);
  const LabelMap gt = random_map(5, 4, 3, rng);
  const ConfusionCounts c = confusion(gt, gt, 3);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(c.fp[k], 0u);
    EXPECT_EQ(c.fn[k], 0u);
  }
  EXPECT_EQ(mean_iou(c).mean, 1.0);
}

TEST(Confusion, DisjointPrediction) {
  const ConfusionCounts c = confusion(LabelMap(2, 5, 0), LabelMap(2, 5, 1), 2);
  EXPECT_EQ(c.fp[0], 10u);
  EXPECT_EQ(c.fn[1], 10u);
  EXPECT_EQ(c.tp[0] + c.tp[1], 0u);
  EXPECT_EQ(mean_iou(c).mean, 0.0);
}

TEST(Confusion, ThreeByThreeExample) {
  LabelMap pred(3, 3, 0), gt(3, 3, 0);
  for (std::size_t y = 0; y < 3; ++y) {
    pred.at(y, 0) = pred.at(y, 1) = 1;
  }
  for (std::size_t x = 0; x < 3; ++x) {
    gt.at(0, x) = gt.at(1, x) = 1;
  }
  const ConfusionCounts c = confusion(pred, gt, 2);
  EXPECT_EQ(c.tp[1], 4u);
  EXPECT_EQ(c.fp[1], 2u);
  EXPECT_EQ(c.fn[1], 2u);
  EXPECT_EQ(c.tp[0], 1u);
  EXPECT_EQ(c.fp[0], 2u);
  EXPECT_EQ(c.fn[0], 2u);
  EXPECT_EQ(c.pixels(), 9u);
}

TEST(Confusion, IgnoreLabelSkipsPixels) {
  LabelMap gt(1, 3, 1);
  gt.data[2] = 255;
  const ConfusionCounts c = confusion(LabelMap(1, 3, 0), gt, 2, 255);
  EXPECT_EQ(c.pixels(), 2u);
  EXPECT_EQ(c.fp[0], 2u);
}

TEST(Confusion, Errors) {
  EXPECT_THROW(confusion(LabelMap(2, 2), LabelMap(2, 3), 2), ShapeError);
  EXPECT_THROW(confusion(LabelMap(2, 2, 5), LabelMap(2, 2), 2), ShapeError);
  ConfusionCounts a(2);
  EXPECT_THROW(a.merge(ConfusionCounts(3)), ShapeError);
}

TEST(MeanIou, FormulaExample) {
  ConfusionCounts c(1);
  c.tp[0] = 2;
  c.fp[0] = 2;
  c.fn[0] = 2;
  EXPECT_DOUBLE_EQ(mean_iou(c).mean, 2.0 / 6.0);
}

TEST(MeanIou, EmptyClassesExcluded) {
  ConfusionCounts c(3);
  c.tp[0] = 3;
  c.fn[2] = 1;
  const IouResult r = mean_iou(c);
  EXPECT_FALSE(r.per_class[1].has_value());
  EXPECT_EQ(r.mean, 0.5);
  EXPECT_THROW(mean_iou(ConfusionCounts(3)), ShapeError);
}

TEST(MeanIou, MatchesBruteForceOracle) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t classes = 2 + rng() % 4;
    const std::size_t h = 1 + rng() % 6, w = 1 + rng() % 6;
    std::vector<std::pair<LabelMap, LabelMap>> pairs;
    ConfusionCounts total(classes);
    for (int s = 0; s < 3; ++s) {
      pairs.emplace_back(random_map(h, w, classes, rng), random_map(h, w, classes, rng));
      total.merge(confusion(pairs.back().first, pairs.back().second, classes));
    }
    const OracleIou oracle = brute_force_iou(pairs, classes);
    const IouResult r = mean_iou(total);
    EXPECT_EQ(r.mean, oracle.mean);
    for (std::size_t k = 0; k < classes; ++k) {
      EXPECT_EQ(r.per_class[k].value_or(-1.0), oracle.per_class[k]);
    }
  }
}

TEST(MeanIou, OrderInvariantAndBounded) {
  std::mt19937_64 rng(5);
  std::vector<ConfusionCounts> parts;
  for (int i = 0; i < 8; ++i)
    parts.push_back(confusion(random_map(4, 4, 3, rng), random_map(4, 4, 3, rng), 3));
  ConfusionCounts forward(3), backward(3);
  for (const auto& p : parts) forward.merge(p);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) backward.merge(*it);
  EXPECT_EQ(forward, backward);
  const IouResult r = mean_iou(forward);
  for (const auto& v : r.per_class) {
    ASSERT_TRUE(v.has_value());
    EXPECT_GE(*v, 0.0);
    EXPECT_LE(*v, 1.0);
  }
  EXPECT_EQ(forward.pixels(), 8u * 16u);
}

TEST(Argmax, TiesGoToLowestClass) {
  Tensor logits({1, 3, 1, 2}, {0.5, 0.1, 0.5, 0.9, 0.2, 0.9});
  const LabelMap m = argmax_labels(logits, 0);
  EXPECT_EQ(m.data, (std::vector<std::uint8_t>{0, 1}));
}

TEST(BoxStats, SingleValue) {
  const std::vector<double> v{0.4};
  const BoxStats b = box_stats(v);
  EXPECT_EQ(b.q1, 0.4);
  EXPECT_EQ(b.median, 0.4);
  EXPECT_EQ(b.q3, 0.4);
  EXPECT_EQ(b.whisker_lo, 0.4);
  EXPECT_EQ(b.whisker_hi, 0.4);
  EXPECT_TRUE(b.outliers.empty());
}

TEST(BoxStats, FiveValues) {
  const std::vector<double> v{5, 3, 1, 4, 2};
  const BoxStats b = box_stats(v);
  EXPECT_EQ(b.q1, 2.0);
  EXPECT_EQ(b.median, 3.0);
  EXPECT_EQ(b.q3, 4.0);
  EXPECT_EQ(b.whisker_lo, 1.0);
  EXPECT_EQ(b.whisker_hi, 5.0);
  EXPECT_TRUE(b.outliers.empty());
}

TEST(BoxStats, OutlierFlagged) {
  const std::vector<double> v{1, 1, 1, 1, 100};
  const BoxStats b = box_stats(v);
  EXPECT_EQ(b.outliers, std::vector<double>{100});
  EXPECT_EQ(b.whisker_hi, 1.0);
}

TEST(BoxStats, InterpolatedQuartiles) {
  const std::vector<double> v{1, 2, 3, 4};
  const BoxStats b = box_stats(v);
  EXPECT_DOUBLE_EQ(b.q1, 1.75);
  EXPECT_DOUBLE_EQ(b.median, 2.5);
  EXPECT_DOUBLE_EQ(b.q3, 3.25);
}

TEST(BoxStats, InvariantsOnRandomLists) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> d(0.3, 0.2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + rng() % 30);
    for (double& x : v) x = d(rng);
    if (trial % 5 == 0) v.push_back(5.0);
    const BoxStats b = box_stats(v);
    const double iqr = b.q3 - b.q1;
    EXPECT_LE(b.q1, b.median);
    EXPECT_LE(b.median, b.q3);
    EXPECT_GE(b.whisker_lo, b.q1 - 1.5 * iqr);
    EXPECT_LE(b.whisker_hi, b.q3 + 1.5 * iqr);
    EXPECT_LE(b.whisker_lo, b.whisker_hi);
    std::size_t inside = 0;
    for (double x : v) inside += x >= b.q1 - 1.5 * iqr && x <= b.q3 + 1.5 * iqr;
    EXPECT_EQ(inside + b.outliers.size(), v.size());
  }
}

TEST(BoxStats, EmptyRejected) {
  EXPECT_THROW(box_stats(std::vector<double>{}), ShapeError);
}

}  // namespace
}  // namespace segkey
