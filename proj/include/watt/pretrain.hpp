#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "watt/data.hpp"
#include "watt/model.hpp"

namespace watt {

struct PretrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  double lr = 3e-4;
  double temperature = 0.07;
  std::string caption_template = "a photo of a {}";
  // Zero-shot accuracy on the clean test split the run must reach.
  double min_clean_accuracy = 0.90;

  void validate() const;
  bool operator==(const PretrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

// Symmetric InfoNCE: mean of the image->text and text->image cross-entropies
// against the diagonal of img_emb txt_emb^T / temperature.
Tensor contrastive_loss(const Tensor& img_emb, const Tensor& txt_emb, double temperature);

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<double> epoch_losses;
  std::vector<double> step_losses;
  double clean_accuracy = 0.0;

  nlohmann::json metrics() const;
};

// Zero-shot accuracy with one template over an image set.
double zero_shot_accuracy(const ClipModel& model, const ImageSet& images, const std::vector<std::string>& class_names,
                          const std::string& tmpl, std::size_t batch_size = 256);

// Trains all parameters of `model` on the clean training split with captions
// built from `caption_template`. Throws if the clean zero-shot accuracy stays
// below the configured threshold.
PretrainResult pretrain(ClipModel& model, const Dataset& dataset, const PretrainConfig& config, std::uint64_t seed);

}  // namespace watt
