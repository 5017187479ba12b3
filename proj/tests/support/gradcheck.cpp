#include "gradcheck.hpp"

#include <cmath>
#include <random>

#include "stmgt/ops.hpp"
#include "stmgt/random.hpp"

namespace stmgt::testing {

Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo, double hi, bool requires_grad) {
  std::mt19937_64 rng(seed);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = lo + (hi - lo) * uniform01(rng);
  return Tensor(shape, std::move(v), requires_grad);
}

GradCheckResult gradcheck(const std::function<Tensor()>& f, std::vector<std::pair<std::string, Tensor>> inputs,
                          double step, std::uint64_t seed) {
  const Tensor probe = [&] {
    NoGradGuard guard;
    return f();
  }();
  const Tensor weights = random_tensor(probe.shape(), seed, -1.0, 1.0, false);
  auto objective = [&] {
    NoGradGuard guard;
    const auto out = f();
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * weights[i];
    return s;
  };

  for (auto& [_, t] : inputs) t.zero_grad();
  sum(mul(f(), weights)).backward();

  GradCheckResult result;
  for (auto& [name, t] : inputs) {
    std::vector<double> analytic(t.size(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    double diff = 0.0, norm_a = 0.0, norm_n = 0.0;
    auto values = t.mutable_values();
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = objective();
      values[i] = saved - step;
      const double down = objective();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      diff += (numeric - analytic[i]) * (numeric - analytic[i]);
      norm_a += analytic[i] * analytic[i];
      norm_n += numeric * numeric;
    }
    const double rel = std::sqrt(diff) / std::max(std::sqrt(norm_a) + std::sqrt(norm_n), 1e-12);
    if (rel >= result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_input = name;
    }
    t.zero_grad();
  }
  return result;
}

}  // namespace stmgt::testing
