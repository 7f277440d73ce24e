#include "qada/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "qada/errors.hpp"

namespace qada {

namespace {

double finite_value(const Tensor& t) {
  const double v = t.item();
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: function value is not finite");
  return v;
}

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

}  // namespace

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, std::span<const double> point,
                         double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("finite_diff_check: epsilon must be positive");
  const Shape shape{point.size()};
  std::vector<double> base(point.begin(), point.end());

  Tensor x = Tensor::from(shape, base, true);
  Tensor y = f(x);
  finite_value(y);
  y.backward();
  std::vector<double> analytic(x.grad().begin(), x.grad().end());

  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> plus = base, minus = base;
    plus[i] += epsilon;
    minus[i] -= epsilon;
    const double fp = finite_value(f(Tensor::from(shape, plus)));
    const double fm = finite_value(f(Tensor::from(shape, minus)));
    worst = std::max(worst, rel_error(analytic[i], (fp - fm) / (2.0 * epsilon)));
  }
  return worst;
}

GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("finite_diff_check: epsilon must be positive");
  for (auto& leaf : leaves) leaf.zero_grad();
  Tensor y = f();
  finite_value(y);
  y.backward();

  GradCheckResult result;
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    std::vector<double> analytic(leaves[t].grad().begin(), leaves[t].grad().end());
    auto values = leaves[t].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + epsilon;
      const double fp = finite_value(f());
      values[i] = saved - epsilon;
      const double fm = finite_value(f());
      values[i] = saved;
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double err = rel_error(analytic[i], numeric);
      if (err > result.max_rel_error) {
        result = {err, t, i, analytic[i], numeric};
      }
    }
  }
  return result;
}

}  // namespace qada
