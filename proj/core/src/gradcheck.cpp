#include "segkey/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "segkey/error.hpp"

namespace segkey {
namespace {

double evaluate(const ScalarFunction& fn, const std::vector<Tensor>& inputs) {
  GradTape tape(false);
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, false));
  const Tensor& out = tape.value(fn(tape, leaves));
  if (out.size() != 1) throw ShapeError("finite_difference_check: non-scalar");
  return out[0];
}

}  // namespace

GradCheckResult finite_difference_check(const ScalarFunction& fn,
                                        const std::vector<Tensor>& inputs,
                                        double eps, double floor) {
  if (!(eps > 0.0)) throw ShapeError("finite_difference_check: eps must be > 0");

  GradTape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, true));
  tape.backward(fn(tape, leaves));

  GradCheckResult result;
  std::vector<Tensor> probe = inputs;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    const Tensor analytic = tape.grad(leaves[a]);
    for (std::size_t i = 0; i < inputs[a].size(); ++i) {
      const double x0 = inputs[a][i];
      probe[a][i] = x0 + eps;
      const double up = evaluate(fn, probe);
      probe[a][i] = x0 - eps;
      const double down = evaluate(fn, probe);
      probe[a][i] = x0;
      const double numeric = (up - down) / (2.0 * eps);
      const double diff = std::abs(analytic[i] - numeric);
      const double scale =
          std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      result.max_absolute_error = std::max(result.max_absolute_error, diff);
      result.max_relative_error = std::max(result.max_relative_error, diff / scale);
      ++result.coordinates;
    }
  }
  return result;
}

}  // namespace segkey
