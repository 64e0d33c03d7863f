#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace segkey {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array of doubles. Layout is (batch, channel, row, column)
// for rank-4 tensors and (channel, row, column) for rank-3 ones.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Rank-4 element access.
  double& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x);
  double at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const;

  Tensor reshaped(Shape shape) const;
  void fill(double value);
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Copies sample `index` of a rank-4 tensor out as a rank-3 tensor.
Tensor take_sample(const Tensor& batch, std::size_t index);
// Stacks equally shaped rank-3 tensors into a rank-4 batch.
Tensor stack(std::span<const Tensor> samples);

double l2_norm(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace segkey
