#pragma once

#include <vector>

#include "cassle/gradcheck.hpp"

namespace cassle {

// Finite-difference verification of every tensor primitive, repeated over
// `seeds_per_op` random instances each (batch <= 8, dim <= 8).
std::vector<GradCheckResult> run_primitive_gradchecks(int seeds_per_op = 20,
                                                      uint64_t master_seed = 1234);

// Same treatment for every scalar loss in the repo: the four SSL losses, the
// four distillation losses, the EWC penalty and the linear-probe loss.
std::vector<GradCheckResult> run_loss_gradchecks(int seeds_per_loss = 20,
                                                 uint64_t master_seed = 99);

bool all_passed(const std::vector<GradCheckResult>& results);

}  // namespace cassle
