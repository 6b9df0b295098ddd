#include "cassle/gradcheck.hpp"

#include <cmath>

namespace cassle {

Array finite_difference_gradient(const ScalarFn& f, const Array& x, Scalar h) {
  if (h <= 0.0) throw config_error("finite difference step must be positive");
  Array grad(x.size());
  Array probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const Scalar up = f(probe);
    probe[i] = x[i] - h;
    const Scalar down = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down))
      throw domain_error("finite_difference_gradient: non-finite evaluation");
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

bool allclose(const Array& a, const Array& b, Scalar rtol, Scalar atol) {
  if (a.size() != b.size()) return false;
  for (Index i = 0; i < a.size(); ++i) {
    const Scalar tol = atol + rtol * std::max(std::abs(a[i]), std::abs(b[i]));
    if (std::abs(a[i] - b[i]) > tol) return false;
  }
  return true;
}

Scalar max_abs_diff(const Array& a, const Array& b) {
  if (a.size() == 0) return 0.0;
  return (a - b).abs().maxCoeff();
}

GradCheckResult check_gradients(const std::string& name, const LossBuilder& build,
                                std::vector<Array> base_values, Scalar h, Scalar rtol,
                                Scalar atol) {
  GradCheckResult result;
  result.name = name;
  result.passed = true;

  Graph g;
  BuiltLoss built = build(g, base_values);
  if (built.wrt.size() != base_values.size())
    throw contract_error("gradcheck builder returned wrong number of leaves");
  GradientMap gm = g.backward(built.loss);

  for (size_t k = 0; k < base_values.size(); ++k) {
    const Array analytic = gm.get(built.wrt[k]);
    std::vector<Array> probe = base_values;
    const Array fd = finite_difference_gradient(
        [&](const Array& x) {
          probe[k] = x;
          Graph fg;
          return build(fg, probe).loss.scalar();
        },
        base_values[k], h);
    result.worst_abs_diff = std::max(result.worst_abs_diff, max_abs_diff(analytic, fd));
    if (!allclose(analytic, fd, rtol, atol)) result.passed = false;
    ++result.inputs_checked;
  }
  return result;
}

}  // namespace cassle
