#pragma once

#include <functional>
#include <string>
#include <vector>

#include "stmgt/tensor.hpp"

namespace stmgt::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;  // worst over inputs
  std::string worst_input;
};

/// Compares reverse-mode gradients of L = sum(R * f()) with central
/// differences, where R is a fixed random weighting of f's output. Each
/// entry of `inputs` must require grad; they are perturbed in place and
/// restored. Per input the error is ||g_a - g_n|| / max(||g_a|| + ||g_n||, 1e-12).
GradCheckResult gradcheck(const std::function<Tensor()>& f, std::vector<std::pair<std::string, Tensor>> inputs,
                          double step = 1e-6, std::uint64_t seed = 1);

/// Random tensor with entries uniform in [lo, hi).
Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                     bool requires_grad = true);

}  // namespace stmgt::testing
