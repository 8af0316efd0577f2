#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "watt/adapt.hpp"
#include "watt/data.hpp"
#include "watt/model.hpp"

namespace watt {

enum class EvalHead { single_temp, text_avg };

std::string to_string(EvalHead head);
EvalHead eval_head_from_string(const std::string& name);

struct EvalConfig {
  EvalHead head = EvalHead::text_avg;
  std::vector<std::string> templates;  // T^0 first
  std::vector<std::string> class_names;
  std::size_t batch_size = 128;

  void validate() const;
};

// Per class, the mean of the H unit-norm template embeddings. Not
// re-normalized: predictions use cosine similarity, which ignores row scale.
Tensor ensemble_text_embedding(const ClipModel& model, std::span<const std::string> templates,
                               const std::vector<std::string>& class_names);

// [K, D] class embeddings of the configured head (unnormalized for text_avg).
Tensor head_embeddings(const ClipModel& model, const EvalConfig& config);

// Cosine logits / tau and their row softmax; rows of `class_emb` need not be
// unit-norm.
Tensor head_probabilities(const Tensor& image_emb, const Tensor& class_emb, double tau);

struct ExperimentResult {
  std::string dataset;
  std::string corruption = "clean";
  int severity = 0;
  std::string method;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<std::size_t> per_class_count;
  double wall_seconds = 0.0;
  nlohmann::json config;

  nlohmann::json to_json() const;
  static ExperimentResult from_json(const nlohmann::json& j);
};

// Accuracy and per-class accuracy from predictions.
void score(ExperimentResult& result, std::span<const std::size_t> predictions, std::span<const int> labels,
           std::size_t num_classes);

// Zero-shot evaluation with the configured head.
ExperimentResult evaluate(const ClipModel& model, const ImageSet& images, const EvalConfig& config);

// ---------------------------------------------------------------------------
// Adapted evaluation

enum class MethodKind {
  zero_shot,        // no adaptation
  single_template,  // L*M steps on one template
  text_avg,         // L*M steps against the template-averaged class embeddings
  output_avg,       // one L*M-step branch per template, probabilities averaged
  watt,             // multi-template weight averaging
  entropy,          // L*M steps of entropy minimization on T^0
};

std::string to_string(MethodKind kind);
MethodKind method_kind_from_string(const std::string& name);

struct MethodSpec {
  MethodKind kind = MethodKind::watt;
  MtwaConfig mtwa;
  std::size_t template_index = 0;  // single_template only

  // Stable identifier used in result rows, e.g. "watt-s(L=2,M=5)".
  std::string id() const;
  bool operator==(const MethodSpec&) const = default;
};

void to_json(nlohmann::json& j, const MethodSpec& m);
void from_json(const nlohmann::json& j, MethodSpec& m);

// Adapts `model` on one batch with `method` and returns [B, K] head
// probabilities. `model` must start from the reference parameters; it is left
// adapted.
Tensor adapt_and_predict(ClipModel& model, const UnlabeledBatch& batch, const EvalConfig& eval,
                         const MethodSpec& method, std::uint64_t seed);

// Episodic run over a whole image set: the model is reset to `pretrained`
// before every batch unless `continual`. Batch order and adaptation draws come
// from `seed`.
ExperimentResult run_method(const ClipModel& pretrained, const ImageSet& images, const EvalConfig& eval,
                            const MethodSpec& method, std::uint64_t seed, bool continual = false);

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { batch_size, template_count, schedule, strategy, corruption };

std::string to_string(SweepAxis axis);
SweepAxis sweep_axis_from_string(const std::string& name);

struct SweepConfig {
  SweepAxis axis = SweepAxis::batch_size;
  // batch_size: integers; template_count: integers in 1..8; schedule: [L, M]
  // pairs; strategy: text_avg, output_avg, "wa(L,M)"; corruption: names.
  nlohmann::json grid = nlohmann::json::array();
  std::vector<std::uint64_t> seeds = {0};
  std::vector<std::string> corruptions = {"gaussian_noise"};  // "clean" allowed
  int severity = 3;
  MethodSpec method;
  EvalHead head = EvalHead::text_avg;
  std::size_t batch_size = 128;
  std::vector<std::string> templates;  // empty: the default eight
  bool continual = false;

  void validate() const;
  bool operator==(const SweepConfig&) const = default;
};

void to_json(nlohmann::json& j, const SweepConfig& c);
void from_json(const nlohmann::json& j, SweepConfig& c);

struct SweepJob {
  std::size_t index = 0;
  std::string key;  // unique per (grid point, seed, corruption)
  nlohmann::json grid_value;
  std::uint64_t seed = 0;
  std::string corruption;
};

std::vector<SweepJob> sweep_jobs(const SweepConfig& config);

struct SweepOptions {
  std::size_t threads = 1;
  bool deterministic = true;  // wall_seconds recorded as 0
  std::optional<std::filesystem::path> output_dir;  // results.jsonl, manifest.json, pivot.csv
  std::function<void(const ExperimentResult&)> on_result;
};

// Runs every (grid point x seed x corruption) job; rows already present in
// output_dir/results.jsonl are reused. Results are returned in job order.
std::vector<ExperimentResult> run_sweep(const ClipModel& pretrained, const Dataset& dataset, const SweepConfig& config,
                                        const SweepOptions& options);

// Method x corruption table of mean accuracy (percent) over seeds.
std::string pivot_csv(std::span<const ExperimentResult> rows);

}  // namespace watt
