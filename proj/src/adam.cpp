#include "watt/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace watt {

void AdamState::reset() {
  step_count_ = 0;
  first_.clear();
  second_.clear();
}

void adam_step(std::span<NamedParameter> params, AdamState& state) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw std::logic_error("adam_step: parameter '" + p.name + "' has no gradient");
  }
  if (state.first_.empty()) {
    for (const auto& p : params) {
      state.first_.emplace_back(p.tensor.numel(), 0.0);
      state.second_.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.first_.size() != params.size()) {
    throw std::logic_error("adam_step: state tracks " + std::to_string(state.first_.size()) + " parameters, got " +
                           std::to_string(params.size()));
  }

  const auto& o = state.options_;
  const std::int64_t t = ++state.step_count_;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_[i];
    auto& v = state.second_[i];
    auto& p = params[i].tensor;
    if (m.size() != p.numel()) throw std::logic_error("adam_step: moment buffer size changed for '" + params[i].name + "'");
    auto values = p.mutable_data();
    auto grad = p.mutable_grad();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad[j];
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * g;
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      values[j] -= o.lr * mhat / (std::sqrt(vhat) + o.eps);
      grad[j] = 0.0;
    }
  }
}

}  // namespace watt
