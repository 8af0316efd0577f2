#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "watt/adam.hpp"
#include "watt/tensor.hpp"

namespace watt {

struct ModelConfig {
  std::size_t image_size = 16;
  std::size_t channels = 1;
  std::size_t patch_size = 4;
  std::size_t d_model = 32;
  std::size_t visual_blocks = 2;
  std::size_t visual_heads = 2;
  std::size_t mlp_hidden = 64;
  std::size_t text_blocks = 1;
  std::size_t text_heads = 2;
  std::size_t embed_dim = 16;
  double temperature = 0.01;

  std::size_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  // Affine LayerNorms in the visual tower: two per block plus the final one.
  std::size_t visual_layer_norms() const { return 2 * visual_blocks + 1; }

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ParameterBuffer {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

// Ordered, name-unique snapshot of parameter values. This is the unit that
// weight averaging operates on.
class ParameterSet {
 public:
  void add(std::string name, Shape shape, std::vector<double> values);

  const std::vector<ParameterBuffer>& entries() const { return entries_; }
  std::vector<ParameterBuffer>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t scalar_count() const;

  const ParameterBuffer* find(std::string_view name) const;
  ParameterSet select(const std::function<bool(const std::string&)>& keep) const;

  // Same names, order and shapes.
  bool congruent_with(const ParameterSet& other) const;
  std::vector<double> flatten() const;
  ParameterSet with_values(std::span<const double> flat) const;

 private:
  std::vector<ParameterBuffer> entries_;
};

// Compares names, shapes and the bit patterns of every value.
bool bitwise_equal(const ParameterSet& a, const ParameterSet& b);

class CharTokenizer {
 public:
  static const std::string& alphabet();
  static std::size_t vocab_size();
  // Throws std::invalid_argument naming the offending character and prompt.
  static std::vector<std::size_t> encode(std::string_view prompt);
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out] or undefined
  Tensor forward(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta, -1); }
};

// Pre-LN transformer block with per-head projections.
struct TransformerBlock {
  LayerNorm ln_1;
  std::vector<Linear> query;
  std::vector<Linear> key;
  std::vector<Linear> value;
  Linear attn_out;
  LayerNorm ln_2;
  Linear fc_1;
  Linear fc_2;

  Tensor forward(const Tensor& x) const;  // [B, T, d] -> [B, T, d]
  // Output for the first token only, [B, T, d] -> [B, 1, d]. Equal to
  // narrow(forward(x), 1, 0, 1) with less work.
  Tensor forward_first(const Tensor& x) const;
};

class ClipModel {
 public:
  ClipModel(const ModelConfig& config, std::uint64_t init_seed);

  ClipModel(ClipModel&&) noexcept = default;
  ClipModel& operator=(ClipModel&&) noexcept = default;
  ClipModel(const ClipModel&) = delete;
  ClipModel& operator=(const ClipModel&) = delete;

  ClipModel clone() const;

  const ModelConfig& config() const { return config_; }
  double temperature() const { return config_.temperature; }

  // images: [B, H, W, C] with values in [0, 1]. Returns L2-normalized [B, D].
  Tensor encode_image(const Tensor& images) const;
  // Returns L2-normalized [K, D], one row per prompt.
  Tensor encode_text(const std::vector<std::string>& prompts) const;

  std::vector<NamedParameter> named_parameters() const;
  std::vector<NamedParameter> visual_ln_parameters() const;

  ParameterSet parameters() const;
  // Overwrites every named entry of `values`; all names must exist with
  // matching shapes.
  void load(const ParameterSet& values);

  // Sets requires_grad on exactly the parameters accepted by `trainable`.
  void set_trainable(const std::function<bool(const std::string&)>& trainable);

 private:
  Tensor visual_features(const Tensor& images) const;
  Tensor text_features(std::string_view prompt) const;

  ModelConfig config_;

  Linear patch_embed_;
  Tensor class_token_;
  Tensor visual_pos_;
  std::vector<TransformerBlock> visual_blocks_;
  LayerNorm visual_ln_final_;
  Tensor visual_proj_;

  Tensor token_embed_;
  std::vector<TransformerBlock> text_blocks_;
  LayerNorm text_ln_final_;
  Tensor text_proj_;
};

bool is_visual_ln_name(const std::string& name);

// The gamma/beta of every visual LayerNorm, nothing else.
ParameterSet ln_parameters(const ClipModel& model);

struct Provenance {
  std::uint64_t seed = 0;
  std::size_t pretrain_epochs = 0;
  double final_loss = 0.0;
  double clean_accuracy = 0.0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t format_version = kCheckpointVersion;
  ModelConfig config;
  ParameterSet parameters;
  Provenance provenance;
  nlohmann::json metadata = nlohmann::json::object();  // free-form, e.g. the producing run's config
};

// Layout: 8-byte magic "WATTCKPT", u32 version, u64 header length, JSON header,
// u64 value count, little-endian float64 values in header order.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Additionally rejects a checkpoint whose model config differs from `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

ClipModel model_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace watt
