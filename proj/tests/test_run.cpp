#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <sstream>

#include "test_util.hpp"
#include "watt/config.hpp"
#include "watt/io.hpp"
#include "watt/run.hpp"
#include "watt/templates.hpp"
#include "watt/verify.hpp"

using namespace watt;
using watt::testing::TempDir;

namespace {

std::string config_error_path(const nlohmann::json& doc) {
  try {
    (void)doc.get<RunConfig>();
  } catch (const ConfigError& e) {
    return e.path();
  }
  return "<no error>";
}

RunConfig tiny(const std::filesystem::path& out) {
  RunConfig c;
  c.output_dir = out.string();
  c.data.train_size = 256;
  c.data.test_size = 64;
  c.pretrain.epochs = 2;
  c.pretrain.batch_size = 64;
  c.pretrain.min_clean_accuracy = 0.0;
  c.adapt.batch_size = 32;
  c.adapt.method.mtwa.inner_steps = 1;
  c.adapt.method.mtwa.rounds = 2;
  c.sweep.grid = nlohmann::json::array({8, 32});
  c.sweep.method.mtwa.inner_steps = 1;
  c.sweep.method.mtwa.rounds = 1;
  c.landscape.steps = 2;
  c.landscape.batch_size = 16;
  c.landscape.grid.resolution = 5;
  c.table.seeds = {0};
  c.table.steps = 2;
  c.table.batch_size = 32;
  return c;
}

// One pretrained tiny run shared by the command tests.
class Commands : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("run-cmds");
    config_ = new RunConfig(tiny(dir_->path() / "a"));
    cmd_pretrain(*config_);
  }
  static void TearDownTestSuite() {
    delete config_;
    delete dir_;
  }

  static RunConfig in(const std::string& sub) {
    RunConfig c = *config_;
    c.output_dir = (dir_->path() / sub).string();
    c.checkpoint = resolve_checkpoint(*config_).string();
    return c;
  }

  static TempDir* dir_;
  static RunConfig* config_;
};

TempDir* Commands::dir_ = nullptr;
RunConfig* Commands::config_ = nullptr;

// Runs `command` twice from an empty output directory and compares every file.
template <typename F>
CommandOutput expect_rerun_identical(const RunConfig& config, F command) {
  const auto dir = resolve_output_dir(config);
  std::filesystem::remove_all(dir);
  const CommandOutput first = command(config);
  std::vector<std::string> bytes;
  for (const auto& f : first.files) bytes.push_back(read_file(f));
  std::filesystem::remove_all(dir);
  const CommandOutput second = command(config);
  EXPECT_EQ(first.files, second.files);
  for (std::size_t i = 0; i < first.files.size(); ++i) EXPECT_EQ(read_file(first.files[i]), bytes[i]) << first.files[i];
  return second;
}

}  // namespace

TEST(RunConfigJson, DefaultsRoundTrip) {
  const RunConfig c;
  EXPECT_EQ(nlohmann::json::parse(nlohmann::json(c).dump()).get<RunConfig>(), c);
  EXPECT_EQ(c.sweep.grid, nlohmann::json::parse("[1,2,4,8,16,32,64,128]"));
  EXPECT_EQ(c.adapt.method.kind, MethodKind::watt);
  EXPECT_EQ(c.adapt.method.mtwa.mode, MtwaMode::sequential);
  EXPECT_EQ(c.adapt.method.mtwa.inner_steps, 2u);
  EXPECT_EQ(c.adapt.method.mtwa.rounds, 5u);
}

TEST(RunConfigJson, ModifiedRoundTrip) {
  RunConfig c;
  c.seed = 99;
  c.threads = 3;
  c.deterministic = false;
  c.data.source = "cifar10";
  c.data.cifar_dir = "/data/cifar";
  c.model.d_model = 24;
  c.pretrain.epochs = 4;
  c.adapt.method.kind = MethodKind::single_template;
  c.adapt.method.template_index = 3;
  c.adapt.templates = {"a {}", "the {}", "one {}", "art of {}"};
  c.adapt.corruption = "clean";
  c.sweep.axis = SweepAxis::strategy;
  c.sweep.grid = nlohmann::json::array({"text_avg", "wa(2,5)"});
  c.landscape.grid = {7, 0.5};
  c.table.corruptions = {"clean", "contrast"};
  c.table.head = EvalHead::single_temp;
  EXPECT_EQ(nlohmann::json::parse(nlohmann::json(c).dump()).get<RunConfig>(), c);
}

TEST(RunConfigJson, PartialDocumentsKeepDefaults) {
  const auto c = nlohmann::json::parse(R"({"adapt": {"batch_size": 16}, "sweep": {"seeds": [4]}})").get<RunConfig>();
  RunConfig expected;
  expected.adapt.batch_size = 16;
  expected.sweep.seeds = {4};
  EXPECT_EQ(c, expected);
}

TEST(RunConfigJson, ErrorsNameTheKeyPath) {
  EXPECT_EQ(config_error_path({{"colour", 1}}), "colour");
  EXPECT_EQ(config_error_path({{"adapt", {{"method", {{"mtwa", {{"bogus", 1}}}}}}}}), "adapt.method.mtwa.bogus");
  EXPECT_EQ(config_error_path({{"adapt", {{"severity", 9}}}}), "adapt.severity");
  EXPECT_EQ(config_error_path({{"adapt", {{"corruption", "fog"}}}}), "adapt.corruption");
  EXPECT_EQ(config_error_path({{"landscape", {{"grid", {{"resolution", 1}}}}}}), "landscape.grid.resolution");
  EXPECT_EQ(config_error_path({{"landscape", {{"templates", {"a {}", "b {}"}}}}}), "landscape.templates");
  EXPECT_EQ(config_error_path({{"data", {{"source", "imagenet"}}}}), "data.source");
  EXPECT_EQ(config_error_path({{"model", {{"depth", 3}}}}), "model.depth");
  EXPECT_EQ(config_error_path({{"pretrain", {{"lr", -1.0}}}}), "pretrain");
  EXPECT_EQ(config_error_path({{"sweep", {{"grid", {1, 0}}}}}), "sweep.grid[1]");
  EXPECT_EQ(config_error_path({{"table", {{"seeds", nlohmann::json::array()}}}}), "table.seeds");
  EXPECT_EQ(config_error_path({{"threads", 0}}), "threads");
  EXPECT_EQ(config_error_path({{"seed", "zero"}}), "seed");
}

TEST(Overrides, SetNestedValues) {
  nlohmann::json doc = nlohmann::json::object();
  apply_override(doc, "adapt.method.mtwa.L", "3");
  apply_override(doc, "adapt.method.mtwa.mode", "parallel");
  apply_override(doc, "sweep.grid", "[1, 2]");
  apply_override(doc, "deterministic", "false");
  EXPECT_EQ(doc["adapt"]["method"]["mtwa"]["L"], 3);
  EXPECT_EQ(doc["adapt"]["method"]["mtwa"]["mode"], "parallel");
  EXPECT_EQ(doc["sweep"]["grid"], nlohmann::json::array({1, 2}));
  const RunConfig c = doc.get<RunConfig>();
  EXPECT_EQ(c.adapt.method.mtwa.inner_steps, 3u);
  EXPECT_EQ(c.adapt.method.mtwa.mode, MtwaMode::parallel);
  EXPECT_FALSE(c.deterministic);

  apply_override(doc, "adapt.batch_size", "64");
  EXPECT_EQ(doc["adapt"]["method"]["mtwa"]["L"], 3);
  EXPECT_THROW(apply_override(doc, "a..b", "1"), ConfigError);
  EXPECT_THROW(apply_override(doc, "", "1"), ConfigError);
  EXPECT_THROW(apply_override(doc, "adapt.batch_size.x", "1"), ConfigError);
}

TEST(Paths, OutputDirPrecedence) {
  RunConfig c;
  ::unsetenv(kOutputDirEnv);
  EXPECT_EQ(resolve_output_dir(c), "watt-out");
  ::setenv(kOutputDirEnv, "/tmp/from-env", 1);
  EXPECT_EQ(resolve_output_dir(c), "/tmp/from-env");
  c.output_dir = "explicit";
  EXPECT_EQ(resolve_output_dir(c), "explicit");
  ::unsetenv(kOutputDirEnv);
  EXPECT_EQ(resolve_checkpoint(c), std::filesystem::path("explicit") / "pretrain" / "checkpoint.ckpt");
  c.checkpoint = "m.ckpt";
  EXPECT_EQ(resolve_checkpoint(c), "m.ckpt");
}

TEST(TableCsv, Layout) {
  const std::vector<TableRow> rows = {{"gaussian_noise", {50.0, 60.0}, 58.25, 40.0}};
  EXPECT_EQ(table_csv(rows, 2), "corruption,zero_shot,T0,T1,template_mean,WA\ngaussian_noise,40.00,50.00,60.00,55.00,58.25\n");
}

TEST_F(Commands, PretrainEmbedsConfigInCheckpoint) {
  const Checkpoint ck = load_checkpoint(resolve_checkpoint(*config_));
  EXPECT_EQ(ck.metadata.at("config").get<RunConfig>(), *config_);
  EXPECT_EQ(ck.metadata.at("version"), std::string(library_version()));
  const auto metrics = nlohmann::json::parse(read_file(std::filesystem::path(config_->output_dir) / "pretrain" / "metrics.json"));
  EXPECT_EQ(metrics.at("metrics").at("epoch_losses").size(), 2u);
  EXPECT_EQ(metrics.at("version"), std::string(library_version()));
}

TEST_F(Commands, AdaptIsDeterministicAndLeavesInputsAlone) {
  const std::string before = read_file(resolve_checkpoint(*config_));
  const CommandOutput a = expect_rerun_identical(in("adapt"), [](const RunConfig& c) { return cmd_adapt(c); });
  EXPECT_EQ(read_file(resolve_checkpoint(*config_)), before);

  std::vector<nlohmann::json> rows;
  std::istringstream lines(read_file(a.files[0]));
  for (std::string line; std::getline(lines, line);) rows.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].at("method"), "zero_shot");
  EXPECT_EQ(rows[1].at("method"), "watt-s(L=1,M=2)");
  for (const auto& r : rows) {
    EXPECT_EQ(r.at("version"), std::string(library_version()));
    EXPECT_EQ(r.at("wall_seconds"), 0.0);
    EXPECT_EQ(r.at("config").at("run").at("config").get<RunConfig>(), in("adapt"));
  }
  const Checkpoint adapted = load_checkpoint(a.files[1]);
  const Checkpoint base = load_checkpoint(resolve_checkpoint(*config_));
  EXPECT_TRUE(bitwise_equal(adapted.parameters.select([](const std::string& n) { return !is_visual_ln_name(n); }),
                            base.parameters.select([](const std::string& n) { return !is_visual_ln_name(n); })));
  EXPECT_FALSE(bitwise_equal(adapted.parameters, base.parameters));
}

TEST_F(Commands, SweepWritesOneRowPerJob) {
  const CommandOutput a = expect_rerun_identical(in("sweep"), [](const RunConfig& c) { return cmd_sweep(c); });
  EXPECT_EQ(a.summary.at("rows"), 2);
}

TEST_F(Commands, LandscapeGridAndSidecar) {
  const CommandOutput a = cmd_landscape(in("land1"));
  const std::string csv = read_file(a.files[0]);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(a.summary.at("cells").get<std::size_t>() + 1));
  const auto sidecar = nlohmann::json::parse(read_file(a.files[1]));
  EXPECT_EQ(sidecar.at("templates").size(), 3u);
  EXPECT_EQ(sidecar.at("config").get<RunConfig>(), in("land1"));
  RunConfig threaded = in("land2");
  threaded.threads = 3;
  const CommandOutput b = cmd_landscape(threaded);
  EXPECT_EQ(read_file(b.files[0]), csv);
}

TEST_F(Commands, TableWeightAverageMatchesParallelWatt) {
  std::vector<TableRow> rows;
  const RunConfig c = in("table1");
  cmd_table(c, &rows);
  ASSERT_EQ(rows.size(), 1u);
  ASSERT_EQ(rows[0].template_accuracy.size(), 8u);

  // The WA column is parallel WATT with one round of `steps` per template, and
  // column t is single-template adaptation on T^t.
  const ClipModel pretrained = model_from_checkpoint(load_checkpoint(resolve_checkpoint(c)));
  const Dataset ds = load_dataset(c);
  const ImageSet images = corrupted_test_split(ds, "gaussian_noise", 3, 0);
  EvalConfig eval;
  eval.templates = TemplateSet::defaults().templates();
  eval.class_names = ds.class_names;
  eval.batch_size = c.table.batch_size;
  MethodSpec wa;
  wa.mtwa.mode = MtwaMode::parallel;
  wa.mtwa.inner_steps = c.table.steps;
  wa.mtwa.rounds = 1;
  EXPECT_EQ(rows[0].weight_average, 100.0 * run_method(pretrained, images, eval, wa, 0).accuracy);
  MethodSpec single = wa;
  single.kind = MethodKind::single_template;
  single.template_index = 5;
  EXPECT_EQ(rows[0].template_accuracy[5], 100.0 * run_method(pretrained, images, eval, single, 0).accuracy);
  MethodSpec zero;
  zero.kind = MethodKind::zero_shot;
  EXPECT_EQ(rows[0].zero_shot, 100.0 * run_method(pretrained, images, eval, zero, 0).accuracy);
}

TEST_F(Commands, MissingCheckpointIsDescriptive) {
  RunConfig c = in("missing");
  c.checkpoint = (dir_->path() / "nope.ckpt").string();
  try {
    cmd_adapt(c);
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("nope.ckpt"), std::string::npos) << e.what();
  }
}

TEST(Verify, SuitePasses) {
  for (const auto& c : run_verify_suite()) EXPECT_TRUE(c.passed) << c.name << ": " << c.detail;
}
