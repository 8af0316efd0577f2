#include "watt/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <random>
#include <stdexcept>
#include <unordered_set>

#include "watt/config.hpp"
#include "watt/io.hpp"
#include "watt/random.hpp"

namespace watt {

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0) {
    throw std::invalid_argument("ModelConfig: image_size must be a positive multiple of patch_size");
  }
  if (channels == 0 || d_model == 0 || embed_dim == 0 || mlp_hidden == 0) {
    throw std::invalid_argument("ModelConfig: dimensions must be positive");
  }
  if (visual_heads == 0 || d_model % visual_heads != 0 || text_heads == 0 || d_model % text_heads != 0) {
    throw std::invalid_argument("ModelConfig: d_model must be divisible by the head counts");
  }
  if (!(temperature > 0.0)) throw std::invalid_argument("ModelConfig: temperature must be > 0");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},       {"channels", c.channels},
                     {"patch_size", c.patch_size},       {"d_model", c.d_model},
                     {"visual_blocks", c.visual_blocks}, {"visual_heads", c.visual_heads},
                     {"mlp_hidden", c.mlp_hidden},       {"text_blocks", c.text_blocks},
                     {"text_heads", c.text_heads},       {"embed_dim", c.embed_dim},
                     {"temperature", c.temperature}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  require_object(j, "model config");
  for (const auto& [key, value] : j.items()) {
    with_key(key, [&, &key = key, &value = value] {
      if (key == "image_size") value.get_to(c.image_size);
      else if (key == "channels") value.get_to(c.channels);
      else if (key == "patch_size") value.get_to(c.patch_size);
      else if (key == "d_model") value.get_to(c.d_model);
      else if (key == "visual_blocks") value.get_to(c.visual_blocks);
      else if (key == "visual_heads") value.get_to(c.visual_heads);
      else if (key == "mlp_hidden") value.get_to(c.mlp_hidden);
      else if (key == "text_blocks") value.get_to(c.text_blocks);
      else if (key == "text_heads") value.get_to(c.text_heads);
      else if (key == "embed_dim") value.get_to(c.embed_dim);
      else if (key == "temperature") value.get_to(c.temperature);
      else unknown_key();
    });
  }
}

// ---------------------------------------------------------------------------
// ParameterSet

void ParameterSet::add(std::string name, Shape shape, std::vector<double> values) {
  if (find(name) != nullptr) throw std::invalid_argument("ParameterSet: duplicate name '" + name + "'");
  if (numel(shape) != values.size()) {
    throw std::invalid_argument("ParameterSet: '" + name + "' has shape " + shape_to_string(shape) + " but " +
                                std::to_string(values.size()) + " values");
  }
  entries_.push_back({std::move(name), std::move(shape), std::move(values)});
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.values.size();
  return n;
}

const ParameterBuffer* ParameterSet::find(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

ParameterSet ParameterSet::select(const std::function<bool(const std::string&)>& keep) const {
  ParameterSet out;
  for (const auto& e : entries_) {
    if (keep(e.name)) out.entries_.push_back(e);
  }
  return out;
}

bool ParameterSet::congruent_with(const ParameterSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name || entries_[i].shape != other.entries_[i].shape) return false;
  }
  return true;
}

std::vector<double> ParameterSet::flatten() const {
  std::vector<double> flat;
  flat.reserve(scalar_count());
  for (const auto& e : entries_) flat.insert(flat.end(), e.values.begin(), e.values.end());
  return flat;
}

ParameterSet ParameterSet::with_values(std::span<const double> flat) const {
  if (flat.size() != scalar_count()) {
    throw std::invalid_argument("ParameterSet::with_values: expected " + std::to_string(scalar_count()) +
                                " values, got " + std::to_string(flat.size()));
  }
  ParameterSet out = *this;
  std::size_t offset = 0;
  for (auto& e : out.entries_) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), e.values.size(), e.values.begin());
    offset += e.values.size();
  }
  return out;
}

bool bitwise_equal(const ParameterSet& a, const ParameterSet& b) {
  if (!a.congruent_with(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.entries()[i].values;
    const auto& y = b.entries()[i].values;
    if (std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Tokenizer

const std::string& CharTokenizer::alphabet() {
  static const std::string chars = " abcdefghijklmnopqrstuvwxyz0123456789{}-'.,_";
  return chars;
}

std::size_t CharTokenizer::vocab_size() { return alphabet().size(); }

std::vector<std::size_t> CharTokenizer::encode(std::string_view prompt) {
  if (prompt.empty()) throw std::invalid_argument("tokenizer: empty prompt");
  std::vector<std::size_t> ids;
  ids.reserve(prompt.size());
  for (char c : prompt) {
    const auto pos = alphabet().find(c);
    if (pos == std::string::npos) {
      throw std::invalid_argument(std::string("tokenizer: character '") + c + "' is not in the vocabulary (prompt \"" +
                                  std::string(prompt) + "\")");
    }
    ids.push_back(pos);
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Layers

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

namespace {

Tensor block_forward(const TransformerBlock& blk, const Tensor& x, bool first_only) {
  const Tensor h = blk.ln_1.forward(x);
  const Tensor hq = first_only ? narrow(h, 1, 0, 1) : h;
  const std::size_t head_dim = blk.query.front().weight.shape()[1];
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Tensor> heads;
  heads.reserve(blk.query.size());
  for (std::size_t i = 0; i < blk.query.size(); ++i) {
    const Tensor q = blk.query[i].forward(hq);
    const Tensor k = blk.key[i].forward(h);
    const Tensor v = blk.value[i].forward(h);
    const Tensor attn = softmax(scale(matmul(q, transpose(k)), inv_sqrt), -1);
    heads.push_back(matmul(attn, v));
  }
  const Tensor mixed = heads.size() == 1 ? heads.front() : concat(heads, -1);
  const Tensor x1 = add(first_only ? narrow(x, 1, 0, 1) : x, blk.attn_out.forward(mixed));
  const Tensor m = blk.fc_2.forward(gelu(blk.fc_1.forward(blk.ln_2.forward(x1))));
  return add(x1, m);
}

}  // namespace

Tensor TransformerBlock::forward(const Tensor& x) const { return block_forward(*this, x, false); }
Tensor TransformerBlock::forward_first(const Tensor& x) const { return block_forward(*this, x, true); }

namespace {

Tensor randn(Rng& rng, Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Linear make_linear(Rng& rng, std::size_t in, std::size_t out, bool with_bias = true) {
  Linear l;
  l.weight = randn(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
  if (with_bias) l.bias = Tensor::zeros({out}, true);
  return l;
}

LayerNorm make_layer_norm(std::size_t d) { return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)}; }

TransformerBlock make_block(Rng& rng, std::size_t d, std::size_t heads, std::size_t hidden) {
  TransformerBlock b;
  const std::size_t hd = d / heads;
  b.ln_1 = make_layer_norm(d);
  for (std::size_t h = 0; h < heads; ++h) {
    b.query.push_back(make_linear(rng, d, hd));
    b.key.push_back(make_linear(rng, d, hd));
    b.value.push_back(make_linear(rng, d, hd));
  }
  b.attn_out = make_linear(rng, d, d);
  b.ln_2 = make_layer_norm(d);
  b.fc_1 = make_linear(rng, d, hidden);
  b.fc_2 = make_linear(rng, hidden, d);
  return b;
}

void collect(std::vector<NamedParameter>& out, const std::string& prefix, const Linear& l) {
  out.push_back({prefix + ".weight", l.weight});
  if (l.bias.defined()) out.push_back({prefix + ".bias", l.bias});
}

void collect(std::vector<NamedParameter>& out, const std::string& prefix, const LayerNorm& ln) {
  out.push_back({prefix + ".gamma", ln.gamma});
  out.push_back({prefix + ".beta", ln.beta});
}

void collect(std::vector<NamedParameter>& out, const std::string& prefix, const TransformerBlock& b) {
  collect(out, prefix + ".ln_1", b.ln_1);
  for (std::size_t h = 0; h < b.query.size(); ++h) {
    const std::string hp = prefix + ".attn.head" + std::to_string(h);
    collect(out, hp + ".query", b.query[h]);
    collect(out, hp + ".key", b.key[h]);
    collect(out, hp + ".value", b.value[h]);
  }
  collect(out, prefix + ".attn.out", b.attn_out);
  collect(out, prefix + ".ln_2", b.ln_2);
  collect(out, prefix + ".mlp.fc_1", b.fc_1);
  collect(out, prefix + ".mlp.fc_2", b.fc_2);
}

}  // namespace

// ---------------------------------------------------------------------------
// ClipModel

ClipModel::ClipModel(const ModelConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(init_seed, "model-init"));
  const std::size_t d = config_.d_model;
  patch_embed_ = make_linear(rng, config_.patch_dim(), d);
  class_token_ = randn(rng, {1, d}, 0.02);
  visual_pos_ = randn(rng, {config_.num_patches() + 1, d}, 0.02);
  for (std::size_t i = 0; i < config_.visual_blocks; ++i) {
    visual_blocks_.push_back(make_block(rng, d, config_.visual_heads, config_.mlp_hidden));
  }
  visual_ln_final_ = make_layer_norm(d);
  visual_proj_ = randn(rng, {d, config_.embed_dim}, 1.0 / std::sqrt(static_cast<double>(d)));

  token_embed_ = randn(rng, {CharTokenizer::vocab_size(), d}, 1.0);
  for (std::size_t i = 0; i < config_.text_blocks; ++i) {
    text_blocks_.push_back(make_block(rng, d, config_.text_heads, config_.mlp_hidden));
  }
  text_ln_final_ = make_layer_norm(d);
  text_proj_ = randn(rng, {d, config_.embed_dim}, 1.0 / std::sqrt(static_cast<double>(d)));
}

ClipModel ClipModel::clone() const {
  ClipModel copy(config_, 0);
  copy.load(parameters());
  auto src = named_parameters();
  auto dst = copy.named_parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i].tensor.set_requires_grad(src[i].tensor.requires_grad());
  return copy;
}

std::vector<NamedParameter> ClipModel::named_parameters() const {
  std::vector<NamedParameter> out;
  collect(out, "visual.patch_embed", patch_embed_);
  out.push_back({"visual.class_token", class_token_});
  out.push_back({"visual.pos_embed", visual_pos_});
  for (std::size_t i = 0; i < visual_blocks_.size(); ++i) {
    collect(out, "visual.blocks." + std::to_string(i), visual_blocks_[i]);
  }
  collect(out, "visual.ln_final", visual_ln_final_);
  out.push_back({"visual.proj", visual_proj_});
  out.push_back({"text.token_embed", token_embed_});
  for (std::size_t i = 0; i < text_blocks_.size(); ++i) {
    collect(out, "text.blocks." + std::to_string(i), text_blocks_[i]);
  }
  collect(out, "text.ln_final", text_ln_final_);
  out.push_back({"text.proj", text_proj_});
  return out;
}

std::vector<NamedParameter> ClipModel::visual_ln_parameters() const {
  std::vector<NamedParameter> out;
  for (auto& p : named_parameters()) {
    if (is_visual_ln_name(p.name)) out.push_back(std::move(p));
  }
  return out;
}

ParameterSet ClipModel::parameters() const {
  ParameterSet set;
  for (const auto& p : named_parameters()) {
    set.add(p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()});
  }
  return set;
}

void ClipModel::load(const ParameterSet& values) {
  auto params = named_parameters();
  for (const auto& e : values.entries()) {
    auto it = std::find_if(params.begin(), params.end(), [&](const NamedParameter& p) { return p.name == e.name; });
    if (it == params.end()) throw std::invalid_argument("ClipModel::load: unknown parameter '" + e.name + "'");
    if (it->tensor.shape() != e.shape) {
      throw std::invalid_argument("ClipModel::load: shape mismatch for '" + e.name + "': model " +
                                  shape_to_string(it->tensor.shape()) + ", given " + shape_to_string(e.shape));
    }
    auto dst = it->tensor.mutable_data();
    std::copy(e.values.begin(), e.values.end(), dst.begin());
  }
}

void ClipModel::set_trainable(const std::function<bool(const std::string&)>& trainable) {
  for (auto& p : named_parameters()) {
    const bool on = trainable(p.name);
    p.tensor.set_requires_grad(on);
    if (!on) p.tensor.clear_grad();
  }
}

Tensor ClipModel::visual_features(const Tensor& images) const {
  const auto& c = config_;
  if (images.dim() != 4 || images.shape()[1] != c.image_size || images.shape()[2] != c.image_size ||
      images.shape()[3] != c.channels) {
    throw std::invalid_argument("encode_image: expected images of shape [B, " + std::to_string(c.image_size) + ", " +
                                std::to_string(c.image_size) + ", " + std::to_string(c.channels) + "], got " +
                                shape_to_string(images.shape()));
  }
  const std::size_t batch = images.shape()[0];
  if (batch == 0) throw std::invalid_argument("encode_image: empty batch");

  // Images are inputs, never differentiated, so patch extraction happens on raw values.
  const std::size_t grid = c.image_size / c.patch_size;
  const std::size_t pd = c.patch_dim();
  const auto px = images.data();
  std::vector<double> patches(batch * c.num_patches() * pd);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gy = 0; gy < grid; ++gy)
      for (std::size_t gx = 0; gx < grid; ++gx) {
        double* dst = patches.data() + ((b * c.num_patches()) + gy * grid + gx) * pd;
        for (std::size_t y = 0; y < c.patch_size; ++y)
          for (std::size_t x = 0; x < c.patch_size; ++x)
            for (std::size_t ch = 0; ch < c.channels; ++ch) {
              const std::size_t row = gy * c.patch_size + y;
              const std::size_t col = gx * c.patch_size + x;
              *dst++ = px[((b * c.image_size + row) * c.image_size + col) * c.channels + ch];
            }
      }
  const Tensor tokens = patch_embed_.forward(Tensor::from({batch, c.num_patches(), pd}, std::move(patches)));
  const Tensor cls = add(Tensor::zeros({batch, 1, c.d_model}), class_token_);
  Tensor x = add(concat({cls, tokens}, 1), visual_pos_);
  // Only the class token is read after the last block.
  for (std::size_t i = 0; i + 1 < visual_blocks_.size(); ++i) x = visual_blocks_[i].forward(x);
  x = visual_blocks_.back().forward_first(x);
  const Tensor cls_out = reshape(x, {batch, c.d_model});
  return matmul(visual_ln_final_.forward(cls_out), visual_proj_);
}

Tensor ClipModel::encode_image(const Tensor& images) const { return l2_normalize(visual_features(images), -1); }

Tensor ClipModel::text_features(std::string_view prompt) const {
  const auto ids = CharTokenizer::encode(prompt);
  Tensor x = reshape(gather_rows(token_embed_, ids), {1, ids.size(), config_.d_model});
  for (const auto& block : text_blocks_) x = block.forward(x);
  return matmul(mean(text_ln_final_.forward(x), 1), text_proj_);
}

Tensor ClipModel::encode_text(const std::vector<std::string>& prompts) const {
  if (prompts.empty()) throw std::invalid_argument("encode_text: empty prompt list");
  std::vector<Tensor> rows;
  rows.reserve(prompts.size());
  for (const auto& p : prompts) rows.push_back(text_features(p));
  const Tensor feats = rows.size() == 1 ? rows.front() : concat(rows, 0);
  return l2_normalize(feats, -1);
}

bool is_visual_ln_name(const std::string& name) {
  return name.starts_with("visual.") && name.find(".ln_") != std::string::npos &&
         (name.ends_with(".gamma") || name.ends_with(".beta"));
}

ParameterSet ln_parameters(const ClipModel& model) { return model.parameters().select(is_visual_ln_name); }

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'W', 'A', 'T', 'T', 'C', 'K', 'P', 'T'};

template <typename T>
T to_little(T value) {
  if constexpr (std::endian::native == std::endian::big) {
    T swapped = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) swapped = (swapped << 8) | ((value >> (8 * i)) & 0xff);
    return swapped;
  }
  return value;
}

template <typename T>
void put_le(std::string& out, T value) {
  value = to_little(value);
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get_le(std::string_view bytes, std::size_t& offset, const std::string& path) {
  if (offset + sizeof(T) > bytes.size()) throw std::runtime_error("checkpoint '" + path + "' is truncated");
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  offset += sizeof(T);
  return to_little(value);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  nlohmann::json header;
  header["format_version"] = checkpoint.format_version;
  header["model_config"] = checkpoint.config;
  header["provenance"] = {{"seed", checkpoint.provenance.seed},
                          {"pretrain_epochs", checkpoint.provenance.pretrain_epochs},
                          {"final_loss", checkpoint.provenance.final_loss},
                          {"clean_accuracy", checkpoint.provenance.clean_accuracy}};
  header["metadata"] = checkpoint.metadata;
  auto& params = header["parameters"] = nlohmann::json::array();
  for (const auto& e : checkpoint.parameters.entries()) params.push_back({{"name", e.name}, {"shape", e.shape}});
  const std::string header_text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, checkpoint.format_version);
  put_le<std::uint64_t>(out, header_text.size());
  out += header_text;
  put_le<std::uint64_t>(out, checkpoint.parameters.scalar_count());
  for (const auto& e : checkpoint.parameters.entries()) {
    for (double v : e.values) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string p = path.string();
  const std::string bytes = read_file(path);
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint '" + p + "' has no WATTCKPT magic header");
  }
  std::size_t offset = sizeof(kMagic);
  const auto version = get_le<std::uint32_t>(bytes, offset, p);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint '" + p + "' has format version " + std::to_string(version) + ", expected " +
                             std::to_string(kCheckpointVersion));
  }
  const auto header_len = get_le<std::uint64_t>(bytes, offset, p);
  if (header_len > bytes.size() - offset) throw std::runtime_error("checkpoint '" + p + "' is truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(offset, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint '" + p + "' has a corrupt header: " + e.what());
  }
  offset += header_len;

  Checkpoint ck;
  try {
    ck.format_version = header.at("format_version").get<std::uint32_t>();
    ck.config = header.at("model_config").get<ModelConfig>();
    const auto& prov = header.at("provenance");
    ck.provenance.seed = prov.at("seed").get<std::uint64_t>();
    ck.provenance.pretrain_epochs = prov.at("pretrain_epochs").get<std::size_t>();
    ck.provenance.final_loss = prov.at("final_loss").get<double>();
    ck.provenance.clean_accuracy = prov.at("clean_accuracy").get<double>();
    if (header.contains("metadata")) ck.metadata = header.at("metadata");
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint '" + p + "' has a malformed header: " + e.what());
  }

  const auto count = get_le<std::uint64_t>(bytes, offset, p);
  if (count > (bytes.size() - offset) / sizeof(double)) throw std::runtime_error("checkpoint '" + p + "' is truncated");
  std::size_t consumed = 0;
  for (const auto& entry : header.at("parameters")) {
    Shape shape = entry.at("shape").get<Shape>();
    const std::size_t n = numel(shape);
    if (consumed + n > count) throw std::runtime_error("checkpoint '" + p + "' parameter table exceeds payload");
    std::vector<double> values(n);
    for (auto& v : values) v = std::bit_cast<double>(get_le<std::uint64_t>(bytes, offset, p));
    consumed += n;
    ck.parameters.add(entry.at("name").get<std::string>(), std::move(shape), std::move(values));
  }
  if (consumed != count || offset != bytes.size()) {
    throw std::runtime_error("checkpoint '" + p + "' payload size does not match its parameter table");
  }
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  Checkpoint ck = load_checkpoint(path);
  if (!(ck.config == expected)) {
    throw std::runtime_error("checkpoint '" + path.string() + "' was saved with model config " +
                             nlohmann::json(ck.config).dump() + ", expected " + nlohmann::json(expected).dump());
  }
  return ck;
}

ClipModel model_from_checkpoint(const Checkpoint& checkpoint) {
  ClipModel model(checkpoint.config, checkpoint.provenance.seed);
  model.load(checkpoint.parameters);
  return model;
}

}  // namespace watt
