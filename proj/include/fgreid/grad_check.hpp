#pragma once

#include <functional>
#include <vector>

#include "fgreid/autograd.hpp"

namespace fgreid::inline FGREID_PRECISION {

struct GradCheckResult {
  double max_relative_error = 0;
  double max_absolute_error = 0;
  std::size_t checked = 0;
};

/// Relative error floor: below this magnitude the comparison is absolute.
inline constexpr double kGradCheckFloor = 1e-3;

/// Compares the analytic gradient of a scalar-valued `loss` with respect to
/// every element of `inputs` against central differences of width 2*step.
/// Inputs are perturbed in place and restored.
GradCheckResult grad_check(const std::function<Var()>& loss, std::vector<Var> inputs, double step);

/// True when central differences at `step` and `step / 10` agree to within
/// `tolerance` (relative, same floor) for every input element. A disagreement
/// means a kink lies within `step` of the point, where no gradient check is
/// meaningful. Uses only loss values, never the analytic gradient.
bool differences_agree(const std::function<Var()>& loss, std::vector<Var> inputs, double step, double tolerance);

/// Single-input form. Non-scalar outputs are contracted with a fixed,
/// index-dependent cotangent so that every output element is exercised.
GradCheckResult grad_check(const std::function<Var(const Var&)>& op, const Tensor& input, double step);

}  // namespace fgreid::inline FGREID_PRECISION
