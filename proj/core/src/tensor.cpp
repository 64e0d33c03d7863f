#include "segkey/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "segkey/error.hpp"

namespace segkey {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string(shape_));
  }
}

double& Tensor::at(std::size_t n, std::size_t c, std::size_t y,
                   std::size_t x) {
  return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
}

double Tensor::at(std::size_t n, std::size_t c, std::size_t y,
                  std::size_t x) const {
  return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " +
                     shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

Tensor take_sample(const Tensor& batch, std::size_t index) {
  if (batch.rank() != 4 || index >= batch.dim(0)) {
    throw ShapeError("take_sample: bad index or rank for " +
                     shape_string(batch.shape()));
  }
  Shape shape(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = shape_numel(shape);
  std::vector<double> data(batch.raw() + index * n,
                           batch.raw() + (index + 1) * n);
  return Tensor(std::move(shape), std::move(data));
}

Tensor stack(std::span<const Tensor> samples) {
  if (samples.empty()) throw ShapeError("stack: no samples");
  const Shape& inner = samples.front().shape();
  Shape shape{samples.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor out(shape);
  const std::size_t n = shape_numel(inner);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].shape() != inner) {
      throw ShapeError("stack: sample " + std::to_string(i) + " has shape " +
                       shape_string(samples[i].shape()) + ", expected " +
                       shape_string(inner));
    }
    std::copy(samples[i].raw(), samples[i].raw() + n, out.raw() + i * n);
  }
  return out;
}

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: shapes " + shape_string(a.shape()) +
                     " and " + shape_string(b.shape()) + " differ");
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

}  // namespace segkey
