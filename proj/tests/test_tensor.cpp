#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "test_util.hpp"
#include "watt/tensor.hpp"

using namespace watt;
using watt::testing::gradient_error;
using watt::testing::random_tensor;

namespace {

// Weighted sum with fixed random weights, so every output element matters.
Tensor probe(const Tensor& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, random_tensor(rng, y.shape(), -1.0, 1.0, false)));
}

}  // namespace

TEST(TensorOps, SoftmaxOfEqualLogitsIsUniform) {
  const Tensor y = softmax(Tensor::from({2}, {0.0, 0.0}), 0);
  EXPECT_DOUBLE_EQ(y.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.data()[1], 0.5);
}

TEST(TensorOps, LayerNormOfConstantRowReturnsBeta) {
  const Tensor y = layer_norm(Tensor::from({1, 3}, {1, 1, 1}), Tensor::full({3}, 1.0), Tensor::zeros({3}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(TensorOps, L2NormalizeThreeFour) {
  const Tensor y = l2_normalize(Tensor::from({2}, {3, 4}), 0);
  EXPECT_NEAR(y.data()[0], 0.6, 1e-15);
  EXPECT_NEAR(y.data()[1], 0.8, 1e-15);
}

TEST(TensorOps, LayerNormUsesPopulationVarianceAndEps) {
  const Tensor y = layer_norm(Tensor::from({1, 2}, {0, 2}), Tensor::full({2}, 1.0), Tensor::zeros({2}));
  const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(y.data()[0], -expected, 1e-15);
  EXPECT_NEAR(y.data()[1], expected, 1e-15);
}

TEST(TensorOps, MatmulSmallExample) {
  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::from({2, 1}, {5, 6});
  const Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.data()[0], 17.0);
  EXPECT_EQ(c.data()[1], 39.0);
}

TEST(TensorOps, ShapeMismatchNamesOpAndShapes) {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 4});
  try {
    add(a, b);
    FAIL() << "expected a shape error";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2, 4]"), std::string::npos) << msg;
  }
  EXPECT_THROW(matmul(a, b), std::invalid_argument);
  EXPECT_THROW(reshape(a, {5}), std::invalid_argument);
}

TEST(TensorOps, SuffixBroadcastOnly) {
  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor row = Tensor::from({2}, {10, 20});
  const Tensor y = add(a, row);
  EXPECT_EQ(y.data()[2], 13.0);
  EXPECT_EQ(y.data()[3], 24.0);
  EXPECT_THROW(add(a, Tensor::zeros({2, 1})), std::invalid_argument);
}

TEST(TensorOps, SoftmaxRowsSumToOneAndStayInRange) {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor(rng, {16, 9}, -300.0, 300.0, false);
  for (int axis : {0, 1}) {
    const Tensor y = softmax(x, axis);
    const Tensor s = sum(y, axis);
    for (double v : s.data()) EXPECT_NEAR(v, 1.0, 1e-12);
    for (double v : y.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(TensorOps, L2NormalizeGivesUnitNorm) {
  std::mt19937_64 rng(2);
  for (double magnitude : {1e-25, 1e-3, 1.0, 1e8}) {
    const Tensor x = scale(random_tensor(rng, {10, 7}, -1.0, 1.0, false), magnitude);
    const Tensor y = l2_normalize(x, -1);
    const Tensor n = sum(mul(y, y), -1);
    for (double v : n.data()) EXPECT_NEAR(v, 1.0, 1e-12);
  }
}

TEST(TensorOps, EvaluationIsDeterministic) {
  std::mt19937_64 rng(3);
  const Tensor a = random_tensor(rng, {4, 5, 6}, -1, 1, false);
  const Tensor b = random_tensor(rng, {6, 3}, -1, 1, false);
  const Tensor y1 = softmax(gelu(matmul(a, b)), -1);
  const Tensor y2 = softmax(gelu(matmul(a, b)), -1);
  ASSERT_EQ(y1.numel(), y2.numel());
  EXPECT_EQ(std::memcmp(y1.data().data(), y2.data().data(), y1.numel() * sizeof(double)), 0);
}

TEST(Backward, SumOfSquares) {
  const Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  sum(mul(x, x)).backward();
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
  EXPECT_EQ(x.grad()[2], 6.0);
}

TEST(Backward, FanOutAccumulatesBothPaths) {
  const Tensor x = Tensor::from({2}, {1.5, -2.0}, true);
  // d/dx [3x + x^2] = 3 + 2x
  sum(add(scale(x, 3.0), mul(x, x))).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0 + 3.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 3.0 - 4.0);
}

TEST(Backward, NonScalarLossIsRejected) {
  const Tensor x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(mul(x, x).backward(), std::logic_error);
}

TEST(Backward, NoGradGuardSkipsGraph) {
  const Tensor x = Tensor::from({2}, {1, 2}, true);
  NoGradGuard guard;
  EXPECT_FALSE(mul(x, x).requires_grad());
}

TEST(Backward, L2NormalizeDotMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor(rng, {5});
  const Tensor c = random_tensor(rng, {5}, -1, 1, false);
  EXPECT_LT(gradient_error([&] { return sum(mul(l2_normalize(x, 0), c)); }, {x}), 1e-4);
}

// Finite-difference checks for every differentiable op.

TEST(GradCheck, ElementwiseBinary) {
  std::mt19937_64 rng(10);
  const Tensor a = random_tensor(rng, {3, 4});
  const Tensor b = random_tensor(rng, {3, 4});
  const Tensor row = random_tensor(rng, {4});
  const Tensor pos = random_tensor(rng, {3, 4}, 0.5, 2.0);
  const Tensor pos_row = random_tensor(rng, {4}, 0.5, 2.0);
  EXPECT_LT(gradient_error([&] { return probe(add(a, b)); }, {a, b}), 1e-4);
  EXPECT_LT(gradient_error([&] { return probe(add(a, row)); }, {a, row}), 1e-4);
  EXPECT_LT(gradient_error([&] { return probe(sub(a, row)); }, {a, row}), 1e-4);
  EXPECT_LT(gradient_error([&] { return probe(mul(a, b)); }, {a, b}), 1e-4);
  EXPECT_LT(gradient_error([&] { return probe(mul(a, row)); }, {a, row}), 1e-4);
  EXPECT_LT(gradient_error([&] { return probe(div(a, pos)); }, {a, pos}), 1e-4);
  EXPECT_LT(gradient_error([&] { return probe(div(a, pos_row)); }, {a, pos_row}), 1e-4);
}

TEST(GradCheck, ElementwiseUnary) {
  std::mt19937_64 rng(11);
  const Tensor a = random_tensor(rng, {3, 5}, -2.0, 2.0);
  const Tensor pos = random_tensor(rng, {3, 5}, 0.2, 3.0);
  const Tensor prob = random_tensor(rng, {3, 5}, 0.05, 1.0);
  EXPECT_LT(gradient_error([&] { return probe(scale(a, -2.5)); }, {a}), 1e-4);
  EXPECT_LT(gradient_error([&] { return probe(exp(a)); }, {a}), 1e-4);
  EXPECT_LT(gradient_error([&] { return probe(log(pos)); }, {pos}), 1e-4);
  EXPECT_LT(gradient_error([&] { return probe(sqrt(pos)); }, {pos}), 1e-4);
  EXPECT_LT(gradient_error([&] { return probe(xlogx(prob)); }, {prob}), 1e-4);
  EXPECT_LT(gradient_error([&] { return probe(gelu(a)); }, {a}), 1e-4);
}

TEST(GradCheck, MatmulAndLayout) {
  std::mt19937_64 rng(12);
  const Tensor a = random_tensor(rng, {2, 3, 4});
  const Tensor w = random_tensor(rng, {4, 5});
  const Tensor b = random_tensor(rng, {2, 4, 3});
  const Tensor c = random_tensor(rng, {2, 2, 4});
  EXPECT_LT(gradient_error([&] { return probe(matmul(a, w)); }, {a, w}), 1e-4);
  EXPECT_LT(gradient_error([&] { return probe(matmul(a, b)); }, {a, b}), 1e-4);
  EXPECT_LT(gradient_error([&] { return probe(transpose(a)); }, {a}), 1e-4);
  EXPECT_LT(gradient_error([&] { return probe(reshape(a, {6, 4})); }, {a}), 1e-4);
  EXPECT_LT(gradient_error([&] { return probe(concat({a, c}, 1)); }, {a, c}), 1e-4);
  EXPECT_LT(gradient_error([&] { return probe(narrow(a, 1, 1, 2)); }, {a}), 1e-4);
  const std::vector<std::size_t> ids{2, 0, 2, 1};
  const Tensor table = random_tensor(rng, {3, 4});
  EXPECT_LT(gradient_error([&] { return probe(gather_rows(table, ids)); }, {table}), 1e-4);
}

TEST(GradCheck, Reductions) {
  std::mt19937_64 rng(13);
  const Tensor a = random_tensor(rng, {3, 4, 2});
  for (int axis : {0, 1, 2, -1}) {
    EXPECT_LT(gradient_error([&] { return probe(sum(a, axis)); }, {a}), 1e-4) << axis;
    EXPECT_LT(gradient_error([&] { return probe(mean(a, axis)); }, {a}), 1e-4) << axis;
  }
  EXPECT_LT(gradient_error([&] { return scale(sum(mul(a, a)), 0.5); }, {a}), 1e-4);
  EXPECT_LT(gradient_error([&] { return mean(mul(a, a)); }, {a}), 1e-4);
}

TEST(GradCheck, Normalizations) {
  std::mt19937_64 rng(14);
  const Tensor a = random_tensor(rng, {3, 6}, -3.0, 3.0);
  const Tensor g = random_tensor(rng, {6}, 0.5, 1.5);
  const Tensor be = random_tensor(rng, {6});
  for (int axis : {0, 1}) {
    EXPECT_LT(gradient_error([&] { return probe(softmax(a, axis)); }, {a}), 1e-4);
    EXPECT_LT(gradient_error([&] { return probe(log_softmax(a, axis)); }, {a}), 1e-4);
    EXPECT_LT(gradient_error([&] { return probe(l2_normalize(a, axis)); }, {a}), 1e-4);
  }
  EXPECT_LT(gradient_error([&] { return probe(layer_norm(a, g, be)); }, {a, g, be}), 1e-4);
  const Tensor x3 = random_tensor(rng, {2, 3, 6}, -2.0, 2.0);
  EXPECT_LT(gradient_error([&] { return probe(layer_norm(x3, g, be)); }, {x3, g, be}), 1e-4);
}

TEST(GradCheck, Composite) {
  std::mt19937_64 rng(15);
  const Tensor x = random_tensor(rng, {4, 8});
  const Tensor w = random_tensor(rng, {8, 8});
  const Tensor g = random_tensor(rng, {8}, 0.5, 1.5);
  const Tensor b = random_tensor(rng, {8});
  auto f = [&] {
    const Tensor h = l2_normalize(gelu(matmul(layer_norm(x, g, b), w)), -1);
    return mean(sum(mul(softmax(scale(matmul(h, transpose(h)), 5.0), -1), log_softmax(matmul(h, transpose(h)), -1)), -1));
  };
  EXPECT_LT(gradient_error(f, {x, w, g, b}), 1e-4);
}
