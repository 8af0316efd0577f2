#include "watt/pretrain.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "watt/adam.hpp"
#include "watt/adapt.hpp"
#include "watt/config.hpp"
#include "watt/random.hpp"
#include "watt/templates.hpp"

namespace watt {

void PretrainConfig::validate() const {
  if (epochs == 0 || batch_size < 2) throw std::invalid_argument("PretrainConfig: epochs >= 1 and batch_size >= 2 required");
  if (!(lr > 0.0) || !(temperature > 0.0)) throw std::invalid_argument("PretrainConfig: lr and temperature must be > 0");
  format_prompt(caption_template, "x");
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"temperature", c.temperature},
                     {"caption_template", c.caption_template},
                     {"min_clean_accuracy", c.min_clean_accuracy}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  require_object(j, "PretrainConfig");
  for (const auto& [key, value] : j.items()) {
    with_key(key, [&, &key = key, &value = value] {
      if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "lr") c.lr = value.get<double>();
      else if (key == "temperature") c.temperature = value.get<double>();
      else if (key == "caption_template") c.caption_template = value.get<std::string>();
      else if (key == "min_clean_accuracy") c.min_clean_accuracy = value.get<double>();
      else unknown_key();
    });
  }
  c.validate();
}

Tensor contrastive_loss(const Tensor& img_emb, const Tensor& txt_emb, double temperature) {
  if (img_emb.dim() != 2 || img_emb.shape() != txt_emb.shape()) {
    throw std::invalid_argument("contrastive_loss: incompatible shapes " + shape_to_string(img_emb.shape()) + " and " +
                                shape_to_string(txt_emb.shape()));
  }
  const std::size_t batch = img_emb.shape()[0];
  if (batch < 2) throw std::invalid_argument("contrastive_loss: batch size must be >= 2");
  std::vector<double> eye(batch * batch, 0.0);
  for (std::size_t i = 0; i < batch; ++i) eye[i * batch + i] = 1.0;
  const Tensor diag = Tensor::from({batch, batch}, std::move(eye));
  const Tensor logits = scale(matmul(img_emb, transpose(txt_emb)), 1.0 / temperature);
  const Tensor image_to_text = sum(mul(log_softmax(logits, 1), diag));
  const Tensor text_to_image = sum(mul(log_softmax(logits, 0), diag));
  return scale(add(image_to_text, text_to_image), -0.5 / static_cast<double>(batch));
}

nlohmann::json PretrainResult::metrics() const {
  return {{"epoch_losses", epoch_losses},
          {"clean_accuracy", clean_accuracy},
          {"final_loss", checkpoint.provenance.final_loss},
          {"seed", checkpoint.provenance.seed}};
}

double zero_shot_accuracy(const ClipModel& model, const ImageSet& images, const std::vector<std::string>& class_names,
                          const std::string& tmpl, std::size_t batch_size) {
  NoGradGuard no_grad;
  const Tensor class_emb = class_embeddings(model, tmpl, class_names);
  std::size_t correct = 0;
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(images.size(), start + batch_size); ++i) idx.push_back(i);
    const Tensor emb = model.encode_image(images.images(idx));
    const auto pred = argmax_rows(matmul(emb, transpose(class_emb)));
    for (std::size_t k = 0; k < idx.size(); ++k) correct += pred[k] == static_cast<std::size_t>(images.labels[idx[k]]);
  }
  return images.size() == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(images.size());
}

PretrainResult pretrain(ClipModel& model, const Dataset& dataset, const PretrainConfig& config, std::uint64_t seed) {
  config.validate();
  if (dataset.train.split != "train") {
    throw std::invalid_argument("pretrain: expected the clean training split, got split '" + dataset.train.split + "'");
  }
  model.set_trainable([](const std::string&) { return true; });
  auto params = model.named_parameters();
  AdamState state(AdamOptions{.lr = config.lr});
  const auto captions = class_prompts(config.caption_template, dataset.class_names);

  PretrainResult result;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto batches = batch_indices(dataset.train.size(), config.batch_size, derive_seed(seed, "pretrain-epoch", epoch),
                                       /*drop_last=*/true);
    double total = 0.0;
    for (const auto& idx : batches) {
      const Tensor img = model.encode_image(dataset.train.images(idx));
      const Tensor class_txt = model.encode_text(captions);
      std::vector<std::size_t> labels;
      labels.reserve(idx.size());
      for (auto i : idx) labels.push_back(static_cast<std::size_t>(dataset.train.labels[i]));
      const Tensor loss = contrastive_loss(img, gather_rows(class_txt, labels), config.temperature);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw std::runtime_error("pretrain: non-finite loss at epoch " + std::to_string(epoch));
      }
      loss.backward();
      adam_step(params, state);
      result.step_losses.push_back(value);
      total += value;
    }
    result.epoch_losses.push_back(batches.empty() ? 0.0 : total / static_cast<double>(batches.size()));
  }
  model.set_trainable([](const std::string&) { return false; });

  result.clean_accuracy = zero_shot_accuracy(model, dataset.test, dataset.class_names, config.caption_template);
  if (result.clean_accuracy < config.min_clean_accuracy) {
    std::ostringstream msg;
    msg << "pretrain: clean zero-shot accuracy " << result.clean_accuracy << " is below the required "
        << config.min_clean_accuracy << " after " << config.epochs
        << " epochs; increase epochs or lr, or use a different seed";
    throw std::runtime_error(msg.str());
  }

  result.checkpoint.config = model.config();
  result.checkpoint.parameters = model.parameters();
  result.checkpoint.provenance = {seed, config.epochs, result.epoch_losses.back(), result.clean_accuracy};
  return result;
}

}  // namespace watt
