#include "segkey/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "segkey/error.hpp"

namespace segkey {

std::uint64_t ConfusionCounts::pixels() const {
  std::uint64_t n = 0;
  for (std::size_t k = 0; k < tp.size(); ++k) n += tp[k] + fn[k];
  return n;
}

void ConfusionCounts::merge(const ConfusionCounts& other) {
  if (other.num_classes() != num_classes()) {
    throw ShapeError("confusion merge: class counts differ");
  }
  for (std::size_t k = 0; k < tp.size(); ++k) {
    tp[k] += other.tp[k];
    fp[k] += other.fp[k];
    fn[k] += other.fn[k];
  }
}

ConfusionCounts confusion(const LabelMap& pred, const LabelMap& gt,
                          std::size_t num_classes,
                          std::optional<std::uint8_t> ignore_label) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw ShapeError("confusion: prediction " + std::to_string(pred.height) + "x" +
                     std::to_string(pred.width) + " vs ground truth " +
                     std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
  ConfusionCounts c(num_classes);
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    const std::uint8_t g = gt.data[i];
    if (ignore_label && g == *ignore_label) continue;
    const std::uint8_t p = pred.data[i];
    if (g >= num_classes || p >= num_classes) {
      throw ShapeError("confusion: label value outside " +
                       std::to_string(num_classes) + " classes");
    }
    if (p == g) {
      ++c.tp[g];
    } else {
      ++c.fp[p];
      ++c.fn[g];
    }
  }
  return c;
}

IouResult mean_iou(const ConfusionCounts& counts) {
  IouResult r;
  r.per_class.resize(counts.num_classes());
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < counts.num_classes(); ++k) {
    const std::uint64_t denom = counts.tp[k] + counts.fp[k] + counts.fn[k];
    if (denom == 0) continue;
    const double iou = static_cast<double>(counts.tp[k]) / static_cast<double>(denom);
    r.per_class[k] = iou;
    sum += iou;
    ++used;
  }
  if (used == 0) throw ShapeError("no support");
  r.mean = sum / static_cast<double>(used);
  return r;
}

LabelMap argmax_labels(const Tensor& logits, std::size_t index) {
  const std::size_t k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  LabelMap out(h, w);
  const double* base = logits.raw() + index * k * h * w;
  for (std::size_t p = 0; p < h * w; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (base[c * h * w + p] > base[best * h * w + p]) best = c;
    }
    out.data[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

double quantile(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw ShapeError("quantile of empty list");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

BoxStats box_stats(std::span<const double> values) {
  if (values.empty()) throw ShapeError("box_stats: empty list");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  BoxStats s;
  s.q1 = quantile(v, 0.25);
  s.median = quantile(v, 0.5);
  s.q3 = quantile(v, 0.75);
  const double iqr = s.q3 - s.q1;
  const double lo_fence = s.q1 - 1.5 * iqr;
  const double hi_fence = s.q3 + 1.5 * iqr;
  s.whisker_lo = s.q1;
  s.whisker_hi = s.q3;
  bool any = false;
  for (double x : v) {
    if (x < lo_fence || x > hi_fence) {
      s.outliers.push_back(x);
      continue;
    }
    if (!any) {
      s.whisker_lo = s.whisker_hi = x;
      any = true;
    }
    s.whisker_lo = std::min(s.whisker_lo, x);
    s.whisker_hi = std::max(s.whisker_hi, x);
  }
  return s;
}

}  // namespace segkey
