#pragma once

#include <cstdint>
#include <vector>

#include "stmgt/tensor.hpp"

namespace stmgt {

struct AdamOptions {
  double learning_rate = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment buffers for a fixed, ordered parameter list.
class AdamState {
 public:
  AdamState() = default;
  AdamState(const std::vector<Tensor>& params, AdamOptions options);

  std::uint64_t step_count() const { return step_count_; }
  const AdamOptions& options() const { return options_; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }
  const std::vector<std::vector<double>>& first_moment() const { return m_; }
  const std::vector<std::vector<double>>& second_moment() const { return v_; }

  friend void adam_step(std::vector<Tensor>& params, AdamState& state);

 private:
  AdamOptions options_;
  std::uint64_t step_count_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

/// One bias-corrected Adam update over `params` using their accumulated
/// grads, then zeroes the grads. A parameter that never received a gradient
/// raises ContractError.
void adam_step(std::vector<Tensor>& params, AdamState& state);

}  // namespace stmgt
