#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "segkey/labels.hpp"
#include "segkey/tensor.hpp"

namespace segkey {

struct ConfusionCounts {
  std::vector<std::uint64_t> tp, fp, fn;

  ConfusionCounts() = default;
  explicit ConfusionCounts(std::size_t num_classes)
      : tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0) {}

  std::size_t num_classes() const { return tp.size(); }
  // Evaluated pixels: every pixel contributes exactly one TP or FN.
  std::uint64_t pixels() const;
  void merge(const ConfusionCounts& other);

  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

// Per class k: TP = |pred=k & gt=k|, FP = |pred=k & gt!=k|,
// FN = |pred!=k & gt=k|. Pixels whose ground truth equals `ignore_label`
// are skipped.
ConfusionCounts confusion(const LabelMap& pred, const LabelMap& gt,
                          std::size_t num_classes,
                          std::optional<std::uint8_t> ignore_label = {});

struct IouResult {
  // nullopt for classes with TP + FP + FN = 0; those are left out of the mean.
  std::vector<std::optional<double>> per_class;
  double mean = 0.0;
};

IouResult mean_iou(const ConfusionCounts& counts);

// Predicted class map for sample `index` of (n, classes, h, w) logits; ties
// go to the lowest class id.
LabelMap argmax_labels(const Tensor& logits, std::size_t index);

struct BoxStats {
  double q1 = 0, median = 0, q3 = 0;
  double whisker_lo = 0, whisker_hi = 0;
  std::vector<double> outliers;
};

// Linear-interpolation quantile (type 7) of ascending-sorted values.
double quantile(std::span<const double> sorted, double p);

// Quartiles by linear interpolation; whiskers are the extreme data values
// inside [Q1 - 1.5 IQR, Q3 + 1.5 IQR]; values outside are outliers.
BoxStats box_stats(std::span<const double> values);

}  // namespace segkey
