#pragma once

#include <functional>
#include <span>
#include <vector>

#include "segkey/autograd.hpp"

namespace segkey {

// Builds a scalar on `tape` from leaves holding the supplied inputs.
using ScalarFunction = std::function<Var(GradTape&, std::span<const Var>)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t coordinates = 0;
};

// Compares the tape gradient of `fn` with central differences
// (f(x + eps) - f(x - eps)) / (2 eps), one coordinate at a time. Relative
// error per coordinate is |a - n| / max(|a|, |n|, floor).
GradCheckResult finite_difference_check(const ScalarFunction& fn,
                                        const std::vector<Tensor>& inputs,
                                        double eps, double floor = 1e-6);

}  // namespace segkey
