#include "fgreid/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fgreid/ops.hpp"

namespace fgreid::inline FGREID_PRECISION {

namespace {

double evaluate(const std::function<Var()>& loss) {
  NoGradGuard guard;
  const Var out = loss();
  if (out.value().size() != 1) throw ShapeError("grad_check needs a scalar loss, got " + to_string(out.shape()));
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw std::domain_error("grad_check: loss is not finite");
  return v;
}

Tensor cotangent(const Shape& shape) {
  Tensor w(shape);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<Real>(0.5 + 0.75 * std::sin(1.7 * static_cast<double>(i) + 0.3));
  return w;
}

}  // namespace

GradCheckResult grad_check(const std::function<Var()>& loss, std::vector<Var> inputs, double step) {
  if (!(step > 0)) throw std::invalid_argument("grad_check step must be > 0");
  for (Var& in : inputs) {
    if (!in.requires_grad()) throw std::invalid_argument("grad_check inputs must require gradients");
    if (!in.value().all_finite()) throw std::domain_error("grad_check: input is not finite");
    in.zero_grad();
  }
  {
    const Var out = loss();
    if (out.value().size() != 1) throw ShapeError("grad_check needs a scalar loss, got " + to_string(out.shape()));
    if (!out.value().all_finite()) throw std::domain_error("grad_check: loss is not finite");
    backward(out);
  }

  GradCheckResult result;
  for (Var& in : inputs) {
    const Tensor analytic = in.grad();
    if (!analytic.all_finite()) throw std::domain_error("grad_check: analytic gradient is not finite");
    Tensor& value = in.mutable_value();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const Real original = value[i];
      value[i] = static_cast<Real>(original + step);
      const double plus = evaluate(loss);
      value[i] = static_cast<Real>(original - step);
      const double minus = evaluate(loss);
      value[i] = original;
      const double numeric = (plus - minus) / (2 * step);
      const double a = analytic[i];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      result.max_absolute_error = std::max(result.max_absolute_error, abs_err);
      result.max_relative_error = std::max(result.max_relative_error, abs_err / denom);
      ++result.checked;
    }
    in.zero_grad();
  }
  return result;
}

bool differences_agree(const std::function<Var()>& loss, std::vector<Var> inputs, double step, double tolerance) {
  if (!(step > 0)) throw std::invalid_argument("differences_agree step must be > 0");
  for (Var& in : inputs) {
    Tensor& value = in.mutable_value();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const Real original = value[i];
      double estimate[2];
      for (int k = 0; k < 2; ++k) {
        const double h = k == 0 ? step : step / 10;
        value[i] = static_cast<Real>(original + h);
        const double plus = evaluate(loss);
        value[i] = static_cast<Real>(original - h);
        const double minus = evaluate(loss);
        estimate[k] = (plus - minus) / (2 * h);
      }
      value[i] = original;
      const double denom = std::max({std::abs(estimate[0]), std::abs(estimate[1]), kGradCheckFloor});
      if (std::abs(estimate[0] - estimate[1]) / denom > tolerance) return false;
    }
  }
  return true;
}

GradCheckResult grad_check(const std::function<Var(const Var&)>& op, const Tensor& input, double step) {
  Var x = Var::parameter(input);
  auto loss = [&op, &x]() {
    Var out = op(x);
    if (out.value().size() == 1) return reshape(out, Shape{});
    return sum(mul(out, constant(cotangent(out.shape()))));
  };
  return grad_check(loss, {x}, step);
}

}  // namespace fgreid::inline FGREID_PRECISION
