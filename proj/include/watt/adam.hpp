#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "watt/tensor.hpp"

namespace watt {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moment buffers for one parameter list. The list passed to adam_step must keep
// the same order and shapes for the lifetime of the state.
class AdamState {
 public:
  explicit AdamState(AdamOptions options = {}) : options_(options) {}

  const AdamOptions& options() const { return options_; }
  std::int64_t step_count() const { return step_count_; }
  const std::vector<std::vector<double>>& first_moment() const { return first_; }
  const std::vector<std::vector<double>>& second_moment() const { return second_; }

  void reset();

 private:
  friend void adam_step(std::span<NamedParameter> params, AdamState& state);

  AdamOptions options_;
  std::int64_t step_count_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

// Bias-corrected Adam update in place, then zeroes the gradients. Throws if a
// parameter has no gradient.
void adam_step(std::span<NamedParameter> params, AdamState& state);

}  // namespace watt
