#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cassle/tensor.hpp"

namespace cassle {

// Scalar function of a flat value vector, re-evaluated per perturbation.
using ScalarFn = std::function<Scalar(const Array&)>;

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
Array finite_difference_gradient(const ScalarFn& f, const Array& x, Scalar h = 1e-5);

// |a - b| <= atol + rtol * max(|a|, |b|), elementwise.
bool allclose(const Array& a, const Array& b, Scalar rtol, Scalar atol);
Scalar max_abs_diff(const Array& a, const Array& b);

struct GradCheckResult {
  std::string name;
  bool passed = false;
  Scalar worst_abs_diff = 0.0;
  int inputs_checked = 0;
};

// A scalar loss under test: `loss` built on some graph, `wrt` the leaves the
// check differentiates against (in the same order as the value vector the
// builder receives).
struct BuiltLoss {
  Tensor loss;
  std::vector<Tensor> wrt;
};

// Rebuilds the loss from scratch for given input values; called once for the
// analytic gradients and 2 * numel times for the central differences.
using LossBuilder = std::function<BuiltLoss(Graph&, const std::vector<Array>&)>;

GradCheckResult check_gradients(const std::string& name, const LossBuilder& build,
                                std::vector<Array> base_values, Scalar h = 1e-5,
                                Scalar rtol = 1e-4, Scalar atol = 1e-7);

}  // namespace cassle
