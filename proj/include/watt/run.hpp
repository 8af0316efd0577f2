#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "watt/data.hpp"
#include "watt/eval.hpp"
#include "watt/landscape.hpp"
#include "watt/model.hpp"
#include "watt/pretrain.hpp"

namespace watt {

// Environment variable that overrides the configured output directory.
inline constexpr const char* kOutputDirEnv = "WATT_OUTPUT_DIR";

struct DataSection {
  std::string source = "synthetic";  // or "cifar10"
  std::size_t train_size = 4096;
  std::size_t test_size = 1024;
  std::string cifar_dir;

  bool operator==(const DataSection&) const = default;
};

struct AdaptSection {
  MethodSpec method;  // defaults to WATT-S, L=2, M=5
  EvalHead head = EvalHead::text_avg;
  std::vector<std::string> templates;  // empty: the default eight
  std::size_t batch_size = 128;
  std::string corruption = "gaussian_noise";  // or "clean"
  int severity = 3;

  bool operator==(const AdaptSection&) const = default;
};

struct LandscapeSection {
  std::vector<std::string> templates;  // exactly three; empty: T^0, T^1, T^2
  std::string corruption = "gaussian_noise";
  int severity = 3;
  std::size_t steps = 10;
  double lr = 1e-3;
  std::size_t batch_size = 128;
  GridSpec grid;

  bool operator==(const LandscapeSection&) const = default;
};

// Per-template adaptation against the weight average of the same runs.
struct TableSection {
  std::vector<std::string> corruptions = {"gaussian_noise"};  // "clean" allowed
  int severity = 3;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::size_t steps = 10;
  double lr = 1e-3;
  EvalHead head = EvalHead::text_avg;
  std::size_t batch_size = 128;
  std::vector<std::string> templates;  // empty: the default eight

  bool operator==(const TableSection&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  bool deterministic = true;
  std::size_t threads = 1;
  std::string output_dir;  // empty: $WATT_OUTPUT_DIR, else "watt-out"
  std::string checkpoint;  // empty: <output_dir>/pretrain/checkpoint.ckpt
  DataSection data;
  ModelConfig model;
  PretrainConfig pretrain;
  AdaptSection adapt;
  SweepConfig sweep;
  LandscapeSection landscape;
  TableSection table;

  RunConfig();
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

void to_json(nlohmann::json& j, const DataSection& c);
void from_json(const nlohmann::json& j, DataSection& c);
void to_json(nlohmann::json& j, const AdaptSection& c);
void from_json(const nlohmann::json& j, AdaptSection& c);
void to_json(nlohmann::json& j, const GridSpec& c);
void from_json(const nlohmann::json& j, GridSpec& c);
void to_json(nlohmann::json& j, const LandscapeSection& c);
void from_json(const nlohmann::json& j, LandscapeSection& c);
void to_json(nlohmann::json& j, const TableSection& c);
void from_json(const nlohmann::json& j, TableSection& c);
void to_json(nlohmann::json& j, const RunConfig& c);
// Rejects unknown keys and invalid values with a ConfigError naming the key path.
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& file);

// Sets the value at a dotted key path ("adapt.method.mtwa.L") inside a config
// document. `text` is parsed as JSON, falling back to a plain string.
void apply_override(nlohmann::json& doc, const std::string& path, const std::string& text);

std::filesystem::path resolve_output_dir(const RunConfig& config);
std::filesystem::path resolve_checkpoint(const RunConfig& config);

Dataset load_dataset(const RunConfig& config);
ImageSet corrupted_test_split(const Dataset& dataset, const std::string& corruption, int severity, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Commands. Each writes under resolve_output_dir(config)/<command>/ and returns
// the files it wrote.

struct CommandOutput {
  std::vector<std::filesystem::path> files;
  nlohmann::json summary;
};

CommandOutput cmd_pretrain(const RunConfig& config);
CommandOutput cmd_adapt(const RunConfig& config);
CommandOutput cmd_sweep(const RunConfig& config);
CommandOutput cmd_landscape(const RunConfig& config);

struct TableRow {
  std::string corruption;
  std::vector<double> template_accuracy;  // percent, mean over seeds
  double weight_average = 0.0;            // percent, mean over seeds
  double zero_shot = 0.0;                 // percent, mean over seeds
};

CommandOutput cmd_table(const RunConfig& config, std::vector<TableRow>* rows = nullptr);

std::string table_csv(std::span<const TableRow> rows, std::size_t templates);

}  // namespace watt
