#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "test_util.hpp"
#include "watt/data.hpp"
#include "watt/io.hpp"
#include "watt/model.hpp"
#include "watt/templates.hpp"

using namespace watt;
using watt::testing::TempDir;

namespace {

Tensor test_images(std::size_t n, std::uint64_t seed = 5) {
  const Dataset ds = generate_dataset(seed, {16, 16});
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i) idx.push_back(i % ds.test.size());
  return ds.test.images(idx);
}

void expect_unit_rows(const Tensor& emb) {
  const std::size_t d = emb.shape()[1];
  for (std::size_t i = 0; i < emb.shape()[0]; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += emb.data()[i * d + j] * emb.data()[i * d + j];
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-12);
  }
}

std::vector<double> row(const Tensor& t, std::size_t i) {
  const std::size_t d = t.shape()[1];
  return {t.data().begin() + i * d, t.data().begin() + (i + 1) * d};
}

}  // namespace

TEST(Model, ImageEmbeddingsAreUnitNorm) {
  const ClipModel model(ModelConfig{}, 1);
  const Tensor emb = model.encode_image(test_images(12));
  ASSERT_EQ(emb.shape(), (Shape{12, 16}));
  expect_unit_rows(emb);
}

TEST(Model, DuplicatedImagesGiveIdenticalRows) {
  const ClipModel model(ModelConfig{}, 1);
  const Dataset ds = generate_dataset(2, {16, 16});
  const std::vector<std::size_t> idx{3, 3, 4};
  const Tensor emb = model.encode_image(ds.test.images(idx));
  EXPECT_EQ(row(emb, 0), row(emb, 1));
}

TEST(Model, NoCouplingAcrossBatch) {
  const ClipModel model(ModelConfig{}, 1);
  const Dataset ds = generate_dataset(2, {32, 32});
  std::vector<std::size_t> all(32);
  for (std::size_t i = 0; i < 32; ++i) all[i] = i;
  const std::vector<std::size_t> one{7};
  const Tensor big = model.encode_image(ds.test.images(all));
  const Tensor single = model.encode_image(ds.test.images(one));
  const auto a = row(big, 7);
  const auto b = row(single, 0);
  for (std::size_t j = 0; j < a.size(); ++j) EXPECT_NEAR(a[j], b[j], 1e-14);
}

TEST(Model, WrongImageShapeIsRejected) {
  const ClipModel model(ModelConfig{}, 1);
  EXPECT_THROW(model.encode_image(Tensor::zeros({2, 8, 8, 1})), std::invalid_argument);
  EXPECT_THROW(model.encode_image(Tensor::zeros({2, 16, 16, 3})), std::invalid_argument);
  EXPECT_THROW(model.encode_image(Tensor::zeros({16, 16, 1})), std::invalid_argument);
}

TEST(Model, TextEmbeddings) {
  const ClipModel model(ModelConfig{}, 1);
  const Tensor emb = model.encode_text({"a photo of a disk", "a photo of a disk", "a photo of a ring"});
  ASSERT_EQ(emb.shape(), (Shape{3, 16}));
  expect_unit_rows(emb);
  EXPECT_EQ(row(emb, 0), row(emb, 1));
  EXPECT_NE(row(emb, 0), row(emb, 2));
  EXPECT_THROW(model.encode_text({}), std::invalid_argument);
}

TEST(Model, TokenizerRejectsUnknownCharacters) {
  try {
    CharTokenizer::encode("a photo of a DOG");
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("'D'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("a photo of a DOG"), std::string::npos) << msg;
  }
  const TemplateSet templates = TemplateSet::defaults();
  for (const auto& t : templates.templates()) {
    EXPECT_NO_THROW(CharTokenizer::encode(format_prompt(t, "diagonal")));
  }
}

TEST(Model, LayerNormSelectionCountsFromConfig) {
  const ClipModel model(ModelConfig{}, 1);
  const ParameterSet ln = ln_parameters(model);
  EXPECT_EQ(ln.size(), 10u);
  EXPECT_EQ(ln.scalar_count(), 320u);
  for (const auto& e : ln.entries()) {
    EXPECT_TRUE(e.name.starts_with("visual.")) << e.name;
    EXPECT_TRUE(e.name.ends_with(".gamma") || e.name.ends_with(".beta")) << e.name;
  }

  ModelConfig bigger;
  bigger.visual_blocks = 3;
  bigger.d_model = 24;
  const ClipModel other(bigger, 1);
  EXPECT_EQ(ln_parameters(other).size(), 2 * bigger.visual_layer_norms());
  EXPECT_EQ(ln_parameters(other).scalar_count(), 2 * bigger.visual_layer_norms() * 24);
}

TEST(Model, ParameterNamesAreUniqueAndOrderStable) {
  const ClipModel a(ModelConfig{}, 3);
  const ClipModel b(ModelConfig{}, 3);
  const ParameterSet pa = a.parameters();
  const ParameterSet pb = b.parameters();
  ASSERT_TRUE(bitwise_equal(pa, pb));
  std::set<std::string> names;
  for (const auto& e : pa.entries()) EXPECT_TRUE(names.insert(e.name).second) << e.name;
  const ParameterSet sel = pa.select(is_visual_ln_name);
  std::size_t next = 0;
  for (const auto& e : sel.entries()) {
    while (next < pa.size() && pa.entries()[next].name != e.name) ++next;
    ASSERT_LT(next, pa.size()) << "selection out of order at " << e.name;
    ++next;
  }
  EXPECT_TRUE(bitwise_equal(sel, ln_parameters(a)));
}

TEST(Model, DifferentSeedsGiveDifferentWeights) {
  const ClipModel a(ModelConfig{}, 3);
  const ClipModel b(ModelConfig{}, 4);
  EXPECT_FALSE(bitwise_equal(a.parameters(), b.parameters()));
}

TEST(Model, CloneIsIndependent) {
  const ClipModel a(ModelConfig{}, 3);
  ClipModel b = a.clone();
  ParameterSet ln = ln_parameters(b);
  for (auto& e : ln.entries()) std::fill(e.values.begin(), e.values.end(), 0.5);
  b.load(ln);
  EXPECT_FALSE(bitwise_equal(ln_parameters(a), ln_parameters(b)));
  EXPECT_TRUE(bitwise_equal(ln_parameters(b), ln));
}

TEST(Model, LoadRejectsUnknownNameOrShape) {
  ClipModel model(ModelConfig{}, 3);
  ParameterSet bad;
  bad.add("visual.nope", {1}, {0.0});
  EXPECT_THROW(model.load(bad), std::invalid_argument);
  ParameterSet wrong;
  wrong.add("visual.ln_final.gamma", {2}, {1.0, 1.0});
  EXPECT_THROW(model.load(wrong), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  TempDir dir("ckpt");
  const ClipModel model(ModelConfig{}, 11);
  Checkpoint ck;
  ck.config = model.config();
  ck.parameters = model.parameters();
  ck.provenance = {11, 30, 2.5, 0.97};
  save_checkpoint(dir / "m.ckpt", ck);
  const Checkpoint back = load_checkpoint(dir / "m.ckpt");
  EXPECT_TRUE(bitwise_equal(ck.parameters, back.parameters));
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.provenance.seed, 11u);
  EXPECT_EQ(back.provenance.pretrain_epochs, 30u);
  EXPECT_EQ(back.provenance.final_loss, 2.5);
  EXPECT_EQ(back.format_version, kCheckpointVersion);
  const ClipModel restored = model_from_checkpoint(back);
  EXPECT_TRUE(bitwise_equal(restored.parameters(), model.parameters()));
  EXPECT_FALSE(std::filesystem::exists(dir / "m.ckpt.tmp"));
}

TEST(Checkpoint, TruncatedFileIsAnError) {
  TempDir dir("ckpt-trunc");
  const ClipModel model(ModelConfig{}, 11);
  Checkpoint ck{kCheckpointVersion, model.config(), model.parameters(), {}};
  save_checkpoint(dir / "m.ckpt", ck);
  const std::string bytes = read_file(dir / "m.ckpt");
  for (std::size_t keep : {std::size_t{0}, std::size_t{5}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    write_file_atomic(dir / "t.ckpt", std::string_view(bytes).substr(0, keep));
    EXPECT_THROW(load_checkpoint(dir / "t.ckpt"), std::runtime_error) << keep;
  }
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), std::runtime_error);
}

TEST(Checkpoint, VersionAndConfigMismatchAreRejected) {
  TempDir dir("ckpt-ver");
  const ClipModel model(ModelConfig{}, 11);
  Checkpoint ck{kCheckpointVersion, model.config(), model.parameters(), {}};
  save_checkpoint(dir / "m.ckpt", ck);

  std::string bytes = read_file(dir / "m.ckpt");
  bytes[8] = static_cast<char>(kCheckpointVersion + 1);
  write_file_atomic(dir / "v.ckpt", bytes);
  EXPECT_THROW(load_checkpoint(dir / "v.ckpt"), std::runtime_error);

  std::string magic = read_file(dir / "m.ckpt");
  magic[0] = 'X';
  write_file_atomic(dir / "x.ckpt", magic);
  EXPECT_THROW(load_checkpoint(dir / "x.ckpt"), std::runtime_error);

  ModelConfig other;
  other.d_model = 24;
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt", other), std::runtime_error);
  EXPECT_NO_THROW(load_checkpoint(dir / "m.ckpt", ModelConfig{}));
}

TEST(ModelConfigJson, RoundTripAndUnknownKeys) {
  ModelConfig c;
  c.d_model = 48;
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>(), c);
  nlohmann::json bad = j;
  bad["depth"] = 3;
  EXPECT_THROW(bad.get<ModelConfig>(), std::invalid_argument);
}
