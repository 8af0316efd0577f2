#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "watt/pretrain.hpp"

using namespace watt;
using watt::testing::random_tensor;

namespace {

Tensor unit_rows(std::mt19937_64& rng, std::size_t b, std::size_t d, bool requires_grad = false) {
  return l2_normalize(random_tensor(rng, {b, d}, -1, 1, requires_grad), -1);
}

double brute_force_contrastive(const Tensor& img, const Tensor& txt, double temp) {
  const std::size_t b = img.shape()[0];
  const std::size_t d = img.shape()[1];
  std::vector<double> s(b * b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += img.data()[i * d + k] * txt.data()[j * d + k];
      s[i * b + j] = dot / temp;
    }
  double i2t = 0.0;
  double t2i = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double row = 0.0;
    double col = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
      row += std::exp(s[i * b + j]);
      col += std::exp(s[j * b + i]);
    }
    i2t += std::log(row) - s[i * b + i];
    t2i += std::log(col) - s[i * b + i];
  }
  return 0.5 * (i2t + t2i) / static_cast<double>(b);
}

PretrainConfig tiny_config() {
  PretrainConfig c;
  c.epochs = 2;
  c.batch_size = 64;
  c.min_clean_accuracy = 0.0;
  return c;
}

}  // namespace

TEST(Contrastive, AlignedOrthogonalRowsGiveNearZero) {
  std::vector<double> v(4 * 16, 0.0);
  for (std::size_t i = 0; i < 4; ++i) v[i * 16 + i] = 1.0;
  const Tensor e = Tensor::from({4, 16}, v);
  const double loss = contrastive_loss(e, e, 0.07).item();
  EXPECT_GE(loss, 0.0);
  EXPECT_LT(loss, 1e-5);
}

TEST(Contrastive, IdenticalEmbeddingsGiveLogB) {
  std::mt19937_64 rng(1);
  const Tensor one = unit_rows(rng, 1, 16);
  const Tensor all = concat({one, one, one, one, one}, 0);
  EXPECT_NEAR(contrastive_loss(all, all, 0.07).item(), std::log(5.0), 1e-12);
}

TEST(Contrastive, MatchesBruteForce) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor img = unit_rows(rng, 4, 16);
    const Tensor txt = unit_rows(rng, 4, 16);
    EXPECT_NEAR(contrastive_loss(img, txt, 0.07).item(), brute_force_contrastive(img, txt, 0.07), 1e-10);
  }
}

TEST(Contrastive, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  Tensor img = random_tensor(rng, {4, 6});
  Tensor txt = random_tensor(rng, {4, 6});
  auto f = [&] { return contrastive_loss(l2_normalize(img, -1), l2_normalize(txt, -1), 0.07); };
  EXPECT_LT(watt::testing::gradient_error(f, {img, txt}), 1e-6);
}

TEST(Contrastive, Errors) {
  std::mt19937_64 rng(4);
  const Tensor one = unit_rows(rng, 1, 16);
  EXPECT_THROW(contrastive_loss(one, one, 0.07), std::invalid_argument);
  EXPECT_THROW(contrastive_loss(unit_rows(rng, 3, 16), unit_rows(rng, 4, 16), 0.07), std::invalid_argument);
}

TEST(PretrainConfigJson, RoundTripAndValidation) {
  PretrainConfig c;
  c.epochs = 7;
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<PretrainConfig>(), c);
  nlohmann::json bad = j;
  bad["warmup"] = 3;
  EXPECT_THROW((void)bad.get<PretrainConfig>(), std::invalid_argument);
  bad = j;
  bad["lr"] = -1.0;
  EXPECT_THROW((void)bad.get<PretrainConfig>(), std::invalid_argument);
  bad = j;
  bad["caption_template"] = "no slot here";
  EXPECT_THROW((void)bad.get<PretrainConfig>(), std::invalid_argument);
}

TEST(Pretrain, SameSeedGivesBitIdenticalCheckpoint) {
  const Dataset ds = generate_dataset(0, {256, 128});
  ClipModel a(ModelConfig{}, 1);
  ClipModel b(ModelConfig{}, 1);
  const PretrainResult ra = pretrain(a, ds, tiny_config(), 9);
  const PretrainResult rb = pretrain(b, ds, tiny_config(), 9);
  EXPECT_TRUE(bitwise_equal(ra.checkpoint.parameters, rb.checkpoint.parameters));
  EXPECT_EQ(ra.step_losses, rb.step_losses);
  EXPECT_EQ(ra.step_losses.size(), 2u * (256 / 64));
  for (double l : ra.step_losses) EXPECT_TRUE(std::isfinite(l));
  EXPECT_EQ(ra.checkpoint.provenance.seed, 9u);
  EXPECT_EQ(ra.checkpoint.provenance.pretrain_epochs, 2u);
  EXPECT_EQ(ra.checkpoint.provenance.final_loss, ra.epoch_losses.back());
  EXPECT_TRUE(ra.metrics().contains("epoch_losses"));

  ClipModel c(ModelConfig{}, 1);
  const PretrainResult rc = pretrain(c, ds, tiny_config(), 10);
  EXPECT_FALSE(bitwise_equal(ra.checkpoint.parameters, rc.checkpoint.parameters));
}

TEST(Pretrain, LeavesModelFrozen) {
  const Dataset ds = generate_dataset(0, {128, 64});
  ClipModel m(ModelConfig{}, 1);
  PretrainConfig c = tiny_config();
  c.epochs = 1;
  pretrain(m, ds, c, 1);
  for (const auto& p : m.named_parameters()) EXPECT_FALSE(p.tensor.requires_grad()) << p.name;
}

TEST(Pretrain, RefusesNonTrainingSplit) {
  Dataset ds = generate_dataset(0, {128, 64});
  ds.train = ds.test;
  ClipModel m(ModelConfig{}, 1);
  try {
    pretrain(m, ds, tiny_config(), 1);
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("'test'"), std::string::npos) << e.what();
  }
}

TEST(Pretrain, BelowThresholdIsAnError) {
  const Dataset ds = generate_dataset(0, {128, 64});
  ClipModel m(ModelConfig{}, 1);
  PretrainConfig c = tiny_config();
  c.epochs = 1;
  c.min_clean_accuracy = 1.01;
  try {
    pretrain(m, ds, c, 1);
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("increase epochs"), std::string::npos) << e.what();
  }
}

TEST(Pretrain, ZeroShotAccuracyMatchesArgmaxCount) {
  const Dataset ds = generate_dataset(0, {64, 64});
  const ClipModel m(ModelConfig{}, 2);
  const double acc = zero_shot_accuracy(m, ds.test, ds.class_names, "a photo of a {}", 10);
  const double full = zero_shot_accuracy(m, ds.test, ds.class_names, "a photo of a {}", 1000);
  EXPECT_EQ(acc, full);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
}
