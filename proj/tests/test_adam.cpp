#include <gtest/gtest.h>

#include <cmath>

#include "watt/adam.hpp"

using namespace watt;

namespace {

NamedParameter scalar_param(const std::string& name, double value) {
  return {name, Tensor::from({1}, {value}, true)};
}

void set_grad(NamedParameter& p, double g) {
  auto grad = p.tensor.mutable_grad();
  grad[0] = g;
}

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<NamedParameter> params{scalar_param("w", 0.0)};
  AdamState state(AdamOptions{.lr = 1e-3});
  set_grad(params[0], 1.0);
  adam_step(params, state);
  // m_hat = 1, v_hat = 1, so the update is lr / (1 + eps).
  EXPECT_NEAR(params[0].tensor.data()[0], -1e-3 / (1.0 + 1e-8), 1e-18);
  EXPECT_EQ(state.step_count(), 1);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::vector<NamedParameter> params{scalar_param("w", 0.25)};
  AdamState state;
  set_grad(params[0], 0.0);
  adam_step(params, state);
  EXPECT_EQ(params[0].tensor.data()[0], 0.25);
  EXPECT_EQ(state.step_count(), 1);
}

TEST(Adam, RepeatedStepsDescendMonotonically) {
  std::vector<NamedParameter> params{scalar_param("w", 1.0)};
  AdamState state;
  double previous = 1.0;
  for (int i = 0; i < 3; ++i) {
    set_grad(params[0], 2.0);
    adam_step(params, state);
    EXPECT_LT(params[0].tensor.data()[0], previous);
    previous = params[0].tensor.data()[0];
  }
}

TEST(Adam, GradientsAreZeroedAfterStep) {
  std::vector<NamedParameter> params{scalar_param("w", 1.0)};
  AdamState state;
  set_grad(params[0], 3.0);
  adam_step(params, state);
  ASSERT_TRUE(params[0].tensor.has_grad());
  EXPECT_EQ(params[0].tensor.grad()[0], 0.0);
}

TEST(Adam, MissingGradientNamesParameter) {
  std::vector<NamedParameter> params{scalar_param("layer.gamma", 1.0)};
  AdamState state;
  try {
    adam_step(params, state);
    FAIL() << "expected an error";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("layer.gamma"), std::string::npos) << e.what();
  }
}

TEST(Adam, MatchesHandComputedSecondStep) {
  std::vector<NamedParameter> params{scalar_param("w", 0.0)};
  AdamState state(AdamOptions{.lr = 0.1});
  set_grad(params[0], 1.0);
  adam_step(params, state);
  set_grad(params[0], -2.0);
  adam_step(params, state);
  const double m = 0.9 * (0.1 * 1.0) + 0.1 * -2.0;
  const double v = 0.999 * (0.001 * 1.0) + 0.001 * 4.0;
  const double m_hat = m / (1.0 - 0.81);
  const double v_hat = v / (1.0 - 0.999 * 0.999);
  const double first = -0.1 * 1.0 / (1.0 + 1e-8);
  EXPECT_NEAR(params[0].tensor.data()[0], first - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8), 1e-15);
}
