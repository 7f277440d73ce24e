#pragma once

#include <functional>
#include <span>
#include <vector>

#include "qada/tensor.hpp"

namespace qada {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the autodiff gradient of f at point against central differences.
/// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
/// Throws NumericError if f returns a non-finite value.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, std::span<const double> point,
                         double epsilon);

/// Same comparison over every element of a set of leaf tensors that f reads
/// through captured handles (model parameters). Values are perturbed in
/// place and restored.
GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double epsilon);

}  // namespace qada
