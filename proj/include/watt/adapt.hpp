#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "watt/adam.hpp"
#include "watt/data.hpp"
#include "watt/model.hpp"
#include "watt/tensor.hpp"

namespace watt {

// ---------------------------------------------------------------------------
// Zero-shot classification

// Class text embeddings for one template, [K, D], computed without gradient.
Tensor class_embeddings(const ClipModel& model, const std::string& tmpl, const std::vector<std::string>& class_names);

// Softmax over classes of cos(image, class) / tau. Differentiable in
// `image_emb`; rows of either input need not be unit-norm.
Tensor class_probabilities(const Tensor& image_emb, const Tensor& class_emb, double tau);

// [B, K] row-stochastic class probabilities for the given class prompts.
Tensor classify(const ClipModel& model, const Tensor& images, const std::vector<std::string>& class_prompts);

// Row-wise argmax; ties go to the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor& scores);

// ---------------------------------------------------------------------------
// Transductive pseudo-labels and losses

struct SimilarityBundle {
  Tensor image_similarity;  // S_v = Z_v Z_v^T, constant
  Tensor text_similarity;   // S_t = Z_t Z_t^T, constant
  Tensor text_embeddings;   // Z_t, instance text embeddings [B, D], constant
  Tensor pseudo_labels;     // Q = softmax((S_v + S_t) / 2 tau), constant
  Tensor probabilities;     // P, row softmax of cos(z_v_i, z_t_j) / tau
  Tensor log_probabilities; // log P, differentiable through the visual encoder
  std::vector<std::size_t> pseudo_classes;
};

// Builds S_v, S_t, Q and P from image embeddings (may carry a graph) and the
// [K, D] class embeddings of one template. Rows of both are normalized first.
// Instance text embedding i is the class embedding of image i's predicted
// class.
SimilarityBundle build_pseudo_labels(const Tensor& image_emb, const Tensor& class_emb, double tau);

// As above, with targets frozen from an earlier call: Q and the instance text
// embeddings are reused and only P is recomputed.
SimilarityBundle rebuild_with_frozen_targets(const Tensor& image_emb, const SimilarityBundle& frozen, double tau);

SimilarityBundle build_pseudo_labels(const ClipModel& model, const UnlabeledBatch& batch, const std::string& tmpl,
                                     const std::vector<std::string>& class_names);

// -(1/B) sum_ij q_ij log p_ij with q treated as a constant.
Tensor tta_loss(const Tensor& pseudo_labels, const Tensor& log_probabilities);
Tensor tta_loss(const SimilarityBundle& bundle);

// Mean Shannon entropy of the rows of a row-stochastic matrix.
Tensor entropy_loss(const Tensor& probabilities);

// ---------------------------------------------------------------------------
// Test-time optimization

enum class LossKind { transductive_ce, entropy_min };
enum class MtwaMode { parallel, sequential };

std::string to_string(LossKind kind);
std::string to_string(MtwaMode mode);
LossKind loss_kind_from_string(const std::string& name);
MtwaMode mtwa_mode_from_string(const std::string& name);

struct MtwaConfig {
  MtwaMode mode = MtwaMode::sequential;
  std::size_t inner_steps = 2;  // L
  std::size_t rounds = 5;       // M
  bool shuffle_templates = true;
  double lr = 1e-3;
  LossKind loss = LossKind::transductive_ce;
  bool refresh_pseudo_labels = true;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const MtwaConfig&) const = default;
};

void to_json(nlohmann::json& j, const MtwaConfig& c);
// Rejects unknown keys, naming the offending key.
void from_json(const nlohmann::json& j, MtwaConfig& c);

// Per-template targets used when pseudo-labels are not refreshed each step.
struct FrozenTargets {
  std::vector<std::optional<SimilarityBundle>> per_template;
};

// One optimization context over the visual LayerNorm parameters of `model`.
// Holds the (frozen-text) class embeddings of every template so they are
// computed once per batch.
class Adapter {
 public:
  Adapter(ClipModel& model, const UnlabeledBatch& batch, std::span<const std::string> templates,
          const std::vector<std::string>& class_names, LossKind loss, bool refresh_pseudo_labels);

  // Class embeddings are supplied directly, one [K, D] matrix per target.
  Adapter(ClipModel& model, const UnlabeledBatch& batch, std::vector<Tensor> class_embeddings, LossKind loss,
          bool refresh_pseudo_labels);

  std::size_t num_targets() const { return class_emb_.size(); }
  const Tensor& class_embedding(std::size_t target) const { return class_emb_.at(target); }

  // Objective value at the current parameters, no update.
  double loss(std::size_t target);

  // `steps` Adam updates on the loss for `target`; returns the loss evaluated
  // before each update.
  std::vector<double> run(std::size_t target, std::size_t steps, AdamState& state);

  ClipModel& model() { return model_; }

 private:
  Tensor objective(std::size_t target);

  ClipModel& model_;
  Tensor images_;
  std::vector<Tensor> class_emb_;
  LossKind loss_;
  bool refresh_;
  FrozenTargets frozen_;
  std::vector<NamedParameter> params_;
};

// L steps of Adam (fresh state) on the visual LayerNorm parameters using one
// template. Leaves the model at the adapted parameters and returns them.
ParameterSet adapt_single_template(ClipModel& model, const UnlabeledBatch& batch, const std::string& tmpl,
                                   const std::vector<std::string>& class_names, std::size_t steps, double lr,
                                   LossKind loss, bool refresh_pseudo_labels = true);

// Per-round record of a multi-template run.
struct MtwaRound {
  std::vector<std::size_t> order;       // template visit order
  std::vector<ParameterSet> snapshots;  // indexed by template
  ParameterSet average;
};

struct MtwaTrace {
  ParameterSet initial;
  std::vector<MtwaRound> rounds;
};

// Each round restarts every template branch from the current average with
// fresh optimizer state, runs L steps per branch, then averages.
ParameterSet watt_parallel(ClipModel& model, const UnlabeledBatch& batch, std::span<const std::string> templates,
                           const std::vector<std::string>& class_names, const MtwaConfig& config,
                           MtwaTrace* trace = nullptr);

// Each round starts from the current average and visits the templates in a
// seeded random order, carrying parameters and optimizer state from one
// template to the next; the per-template snapshots are averaged.
ParameterSet watt_sequential(ClipModel& model, const UnlabeledBatch& batch, std::span<const std::string> templates,
                             const std::vector<std::string>& class_names, const MtwaConfig& config,
                             MtwaTrace* trace = nullptr);

ParameterSet run_watt(ClipModel& model, const UnlabeledBatch& batch, std::span<const std::string> templates,
                      const std::vector<std::string>& class_names, const MtwaConfig& config,
                      MtwaTrace* trace = nullptr);
// Same, with precomputed [K, D] class embeddings, one per template.
ParameterSet run_watt(ClipModel& model, const UnlabeledBatch& batch, std::vector<Tensor> class_embeddings,
                      const MtwaConfig& config, MtwaTrace* trace = nullptr);

// Elementwise mean in list order, as a running mean so that equal inputs
// average to themselves exactly.
ParameterSet average_parameters(std::span<const ParameterSet> sets);

// Mean of the per-branch class probability matrices; restores the model's
// parameters afterwards.
Tensor average_outputs(ClipModel& model, std::span<const ParameterSet> branches, const Tensor& images,
                       const Tensor& class_emb);

}  // namespace watt
