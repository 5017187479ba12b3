#include "stmgt/adam.hpp"

#include <cmath>

#include "stmgt/error.hpp"

namespace stmgt {

AdamState::AdamState(const std::vector<Tensor>& params, AdamOptions options) : options_(options) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& p : params) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void adam_step(std::vector<Tensor>& params, AdamState& state) {
  if (params.size() != state.m_.size())
    throw ContractError("adam_step: state tracks " + std::to_string(state.m_.size()) +
                        " parameters, got " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != state.m_[i].size())
      throw DimensionError("adam_step: parameter " + std::to_string(i) + " has shape " +
                           shape_str(params[i].shape()) + " but state was built for " +
                           std::to_string(state.m_[i].size()) + " values");
    if (!params[i].has_grad())
      throw ContractError("adam_step: parameter " + std::to_string(i) + " has no gradient");
  }

  const auto& o = state.options_;
  const auto t = static_cast<double>(++state.step_count_);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].mutable_values();
    auto grad = params[i].grad();
    auto& m = state.m_[i];
    auto& v = state.v_[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad[j];
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * g;
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * g * g;
      values[j] -= o.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + o.epsilon);
    }
    params[i].zero_grad();
  }
}

}  // namespace stmgt
