#include "watt/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "watt/config.hpp"
#include "watt/random.hpp"
#include "watt/templates.hpp"

namespace watt {

// ---------------------------------------------------------------------------
// Zero-shot classification

Tensor class_embeddings(const ClipModel& model, const std::string& tmpl, const std::vector<std::string>& class_names) {
  NoGradGuard no_grad;
  return model.encode_text(class_prompts(tmpl, class_names));
}

Tensor class_probabilities(const Tensor& image_emb, const Tensor& class_emb, double tau) {
  if (class_emb.dim() != 2 || class_emb.shape()[0] < 2) {
    throw std::invalid_argument("classify: need at least two classes, got class embeddings " +
                                shape_to_string(class_emb.shape()));
  }
  return softmax(scale(matmul(l2_normalize(image_emb, -1), transpose(l2_normalize(class_emb, -1))), 1.0 / tau), -1);
}

Tensor classify(const ClipModel& model, const Tensor& images, const std::vector<std::string>& class_prompts) {
  if (class_prompts.size() < 2) throw std::invalid_argument("classify: need at least two class prompts");
  NoGradGuard no_grad;
  return class_probabilities(model.encode_image(images), model.encode_text(class_prompts), model.temperature());
}

std::vector<std::size_t> argmax_rows(const Tensor& scores) {
  if (scores.dim() != 2) throw std::invalid_argument("argmax_rows: expected a matrix, got " + shape_to_string(scores.shape()));
  const std::size_t rows = scores.shape()[0];
  const std::size_t cols = scores.shape()[1];
  const auto v = scores.data();
  std::vector<std::size_t> out(rows, 0);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 1; j < cols; ++j) {
      if (v[i * cols + j] > v[i * cols + out[i]]) out[i] = j;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pseudo-labels

namespace {

Tensor gram(const Tensor& rows) {
  NoGradGuard no_grad;
  const Tensor r = rows.detach();
  return matmul(r, transpose(r));
}

Tensor pair_logits(const Tensor& image_emb, const Tensor& text_rows, double tau) {
  return scale(matmul(image_emb, transpose(text_rows)), 1.0 / tau);
}

SimilarityBundle finish_bundle(SimilarityBundle b, const Tensor& image_emb, const Tensor& text_rows, double tau) {
  const Tensor logits = pair_logits(image_emb, text_rows, tau);
  b.log_probabilities = log_softmax(logits, -1);
  {
    NoGradGuard no_grad;
    b.probabilities = softmax(logits.detach(), -1);
  }
  return b;
}

}  // namespace

SimilarityBundle build_pseudo_labels(const Tensor& image_emb, const Tensor& class_emb, double tau) {
  if (image_emb.dim() != 2 || class_emb.dim() != 2 || image_emb.shape()[1] != class_emb.shape()[1]) {
    throw std::invalid_argument("build_pseudo_labels: incompatible embeddings " + shape_to_string(image_emb.shape()) +
                                " and " + shape_to_string(class_emb.shape()));
  }
  SimilarityBundle b;
  Tensor text_rows;
  const Tensor zv_live = l2_normalize(image_emb, -1);
  {
    NoGradGuard no_grad;
    const Tensor zv = zv_live.detach();
    const Tensor zt = l2_normalize(class_emb.detach(), -1);
    b.pseudo_classes = argmax_rows(matmul(zv, transpose(zt)));
    text_rows = gather_rows(zt, b.pseudo_classes);
    b.text_embeddings = text_rows;
    b.image_similarity = gram(zv);
    b.text_similarity = gram(text_rows);
    b.pseudo_labels = softmax(scale(add(b.image_similarity, b.text_similarity), 0.5 / tau), -1);
  }
  return finish_bundle(std::move(b), zv_live, text_rows, tau);
}

SimilarityBundle rebuild_with_frozen_targets(const Tensor& image_emb, const SimilarityBundle& frozen, double tau) {
  SimilarityBundle b;
  b.pseudo_classes = frozen.pseudo_classes;
  b.text_embeddings = frozen.text_embeddings;
  b.text_similarity = frozen.text_similarity;
  b.pseudo_labels = frozen.pseudo_labels;
  const Tensor zv_live = l2_normalize(image_emb, -1);
  b.image_similarity = gram(zv_live);
  return finish_bundle(std::move(b), zv_live, frozen.text_embeddings, tau);
}

SimilarityBundle build_pseudo_labels(const ClipModel& model, const UnlabeledBatch& batch, const std::string& tmpl,
                                     const std::vector<std::string>& class_names) {
  const Tensor class_emb = class_embeddings(model, tmpl, class_names);
  return build_pseudo_labels(model.encode_image(batch.images), class_emb, model.temperature());
}

Tensor tta_loss(const Tensor& pseudo_labels, const Tensor& log_probabilities) {
  if (pseudo_labels.shape() != log_probabilities.shape() || pseudo_labels.dim() != 2) {
    throw std::invalid_argument("tta_loss: incompatible shapes " + shape_to_string(pseudo_labels.shape()) + " and " +
                                shape_to_string(log_probabilities.shape()));
  }
  const double batch = static_cast<double>(pseudo_labels.shape()[0]);
  return scale(sum(mul(log_probabilities, pseudo_labels.detach())), -1.0 / batch);
}

Tensor tta_loss(const SimilarityBundle& bundle) { return tta_loss(bundle.pseudo_labels, bundle.log_probabilities); }

Tensor entropy_loss(const Tensor& probabilities) {
  if (probabilities.dim() != 2) {
    throw std::invalid_argument("entropy_loss: expected [B, K], got " + shape_to_string(probabilities.shape()));
  }
  return scale(mean(sum(xlogx(probabilities), -1)), -1.0);
}

// ---------------------------------------------------------------------------
// Configuration

std::string to_string(LossKind kind) { return kind == LossKind::transductive_ce ? "transductive_ce" : "entropy_min"; }
std::string to_string(MtwaMode mode) { return mode == MtwaMode::parallel ? "parallel" : "sequential"; }

LossKind loss_kind_from_string(const std::string& name) {
  if (name == "transductive_ce") return LossKind::transductive_ce;
  if (name == "entropy_min") return LossKind::entropy_min;
  throw std::invalid_argument("unknown loss '" + name + "' (expected transductive_ce or entropy_min)");
}

MtwaMode mtwa_mode_from_string(const std::string& name) {
  if (name == "parallel") return MtwaMode::parallel;
  if (name == "sequential") return MtwaMode::sequential;
  throw std::invalid_argument("unknown mode '" + name + "' (expected parallel or sequential)");
}

void MtwaConfig::validate() const {
  if (inner_steps < 1) throw std::invalid_argument("MtwaConfig: L must be >= 1");
  if (rounds < 1) throw std::invalid_argument("MtwaConfig: M must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("MtwaConfig: lr must be a finite value >= 0");
}

void to_json(nlohmann::json& j, const MtwaConfig& c) {
  j = nlohmann::json{{"mode", to_string(c.mode)},
                     {"L", c.inner_steps},
                     {"M", c.rounds},
                     {"lr", c.lr},
                     {"loss", to_string(c.loss)},
                     {"shuffle_templates", c.shuffle_templates},
                     {"refresh_pseudo_labels", c.refresh_pseudo_labels},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, MtwaConfig& c) {
  require_object(j, "MtwaConfig");
  for (const auto& [key, value] : j.items()) {
    with_key(key, [&, &key = key, &value = value] {
      if (key == "mode") c.mode = mtwa_mode_from_string(value.get<std::string>());
      else if (key == "L") c.inner_steps = value.get<std::size_t>();
      else if (key == "M") c.rounds = value.get<std::size_t>();
      else if (key == "lr") c.lr = value.get<double>();
      else if (key == "loss") c.loss = loss_kind_from_string(value.get<std::string>());
      else if (key == "shuffle_templates") c.shuffle_templates = value.get<bool>();
      else if (key == "refresh_pseudo_labels") c.refresh_pseudo_labels = value.get<bool>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else unknown_key();
    });
  }
  c.validate();
}

// ---------------------------------------------------------------------------
// Adapter

Adapter::Adapter(ClipModel& model, const UnlabeledBatch& batch, std::span<const std::string> templates,
                 const std::vector<std::string>& class_names, LossKind loss, bool refresh_pseudo_labels)
    : Adapter(model, batch,
              [&] {
                std::vector<Tensor> emb;
                for (const auto& t : templates) emb.push_back(class_embeddings(model, t, class_names));
                return emb;
              }(),
              loss, refresh_pseudo_labels) {}

Adapter::Adapter(ClipModel& model, const UnlabeledBatch& batch, std::vector<Tensor> class_embeddings, LossKind loss,
                 bool refresh_pseudo_labels)
    : model_(model), images_(batch.images), class_emb_(std::move(class_embeddings)), loss_(loss),
      refresh_(refresh_pseudo_labels) {
  if (class_emb_.empty()) throw std::invalid_argument("Adapter: at least one template is required");
  model_.set_trainable(is_visual_ln_name);
  params_ = model_.visual_ln_parameters();
  frozen_.per_template.resize(class_emb_.size());
  if (!refresh_ && loss_ == LossKind::transductive_ce) {
    NoGradGuard no_grad;
    const Tensor zv = model_.encode_image(images_);
    for (std::size_t t = 0; t < class_emb_.size(); ++t) {
      frozen_.per_template[t] = build_pseudo_labels(zv, class_emb_[t], model_.temperature());
    }
  }
}

Tensor Adapter::objective(std::size_t target) {
  const Tensor& emb = class_emb_.at(target);
  const Tensor zv = model_.encode_image(images_);
  const double tau = model_.temperature();
  if (loss_ == LossKind::entropy_min) return entropy_loss(class_probabilities(zv, emb, tau));
  if (refresh_) return tta_loss(build_pseudo_labels(zv, emb, tau));
  return tta_loss(rebuild_with_frozen_targets(zv, *frozen_.per_template[target], tau));
}

double Adapter::loss(std::size_t target) {
  NoGradGuard no_grad;
  return objective(target).item();
}

std::vector<double> Adapter::run(std::size_t target, std::size_t steps, AdamState& state) {
  if (steps < 1) throw std::invalid_argument("adaptation requires at least one step");
  std::vector<double> losses;
  losses.reserve(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    const Tensor loss = objective(target);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      std::ostringstream msg;
      msg << "adaptation produced a non-finite loss (" << value << ") for template " << target << " at step " << s
          << " of " << steps << ", Adam step " << state.step_count() << ", lr " << state.options().lr;
      throw std::runtime_error(msg.str());
    }
    loss.backward();
    adam_step(params_, state);
    losses.push_back(value);
  }
  return losses;
}

ParameterSet adapt_single_template(ClipModel& model, const UnlabeledBatch& batch, const std::string& tmpl,
                                   const std::vector<std::string>& class_names, std::size_t steps, double lr,
                                   LossKind loss, bool refresh_pseudo_labels) {
  if (steps < 1) throw std::invalid_argument("adapt_single_template: L must be >= 1");
  const std::vector<std::string> one{tmpl};
  Adapter adapter(model, batch, one, class_names, loss, refresh_pseudo_labels);
  AdamState state(AdamOptions{.lr = lr});
  adapter.run(0, steps, state);
  return ln_parameters(model);
}

// ---------------------------------------------------------------------------
// Multi-template weight averaging

namespace {

void check_templates(std::span<const std::string> templates) {
  if (templates.empty()) throw std::invalid_argument("multi-template averaging needs at least one template (H = 0)");
}

std::vector<std::size_t> visit_order(std::size_t n, bool shuffle, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) {
    for (std::size_t i = n; i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
  }
  return order;
}

}  // namespace

namespace {

ParameterSet parallel_rounds(ClipModel& model, Adapter& adapter, const MtwaConfig& config, MtwaTrace* trace) {
  ParameterSet average = ln_parameters(model);
  if (trace) trace->initial = average;
  for (std::size_t m = 0; m < config.rounds; ++m) {
    MtwaRound round;
    for (std::size_t h = 0; h < adapter.num_targets(); ++h) {
      model.load(average);
      AdamState state(AdamOptions{.lr = config.lr});
      adapter.run(h, config.inner_steps, state);
      round.order.push_back(h);
      round.snapshots.push_back(ln_parameters(model));
    }
    average = average_parameters(round.snapshots);
    if (trace) {
      round.average = average;
      trace->rounds.push_back(std::move(round));
    }
  }
  model.load(average);
  return average;
}

ParameterSet sequential_rounds(ClipModel& model, Adapter& adapter, const MtwaConfig& config, MtwaTrace* trace) {
  Rng rng = make_rng(config.seed, "sequential-order");
  ParameterSet average = ln_parameters(model);
  if (trace) trace->initial = average;
  for (std::size_t m = 0; m < config.rounds; ++m) {
    MtwaRound round;
    round.order = visit_order(adapter.num_targets(), config.shuffle_templates, rng);
    round.snapshots.resize(adapter.num_targets());
    model.load(average);
    AdamState state(AdamOptions{.lr = config.lr});
    for (std::size_t h : round.order) {
      adapter.run(h, config.inner_steps, state);
      round.snapshots[h] = ln_parameters(model);
    }
    average = average_parameters(round.snapshots);
    if (trace) {
      round.average = average;
      trace->rounds.push_back(std::move(round));
    }
  }
  model.load(average);
  return average;
}

}  // namespace

ParameterSet watt_parallel(ClipModel& model, const UnlabeledBatch& batch, std::span<const std::string> templates,
                           const std::vector<std::string>& class_names, const MtwaConfig& config, MtwaTrace* trace) {
  check_templates(templates);
  config.validate();
  Adapter adapter(model, batch, templates, class_names, config.loss, config.refresh_pseudo_labels);
  return parallel_rounds(model, adapter, config, trace);
}

ParameterSet watt_sequential(ClipModel& model, const UnlabeledBatch& batch, std::span<const std::string> templates,
                             const std::vector<std::string>& class_names, const MtwaConfig& config, MtwaTrace* trace) {
  check_templates(templates);
  config.validate();
  Adapter adapter(model, batch, templates, class_names, config.loss, config.refresh_pseudo_labels);
  return sequential_rounds(model, adapter, config, trace);
}

ParameterSet run_watt(ClipModel& model, const UnlabeledBatch& batch, std::span<const std::string> templates,
                      const std::vector<std::string>& class_names, const MtwaConfig& config, MtwaTrace* trace) {
  return config.mode == MtwaMode::parallel ? watt_parallel(model, batch, templates, class_names, config, trace)
                                           : watt_sequential(model, batch, templates, class_names, config, trace);
}

ParameterSet run_watt(ClipModel& model, const UnlabeledBatch& batch, std::vector<Tensor> class_embeddings,
                      const MtwaConfig& config, MtwaTrace* trace) {
  if (class_embeddings.empty()) throw std::invalid_argument("multi-template averaging needs at least one template (H = 0)");
  config.validate();
  Adapter adapter(model, batch, std::move(class_embeddings), config.loss, config.refresh_pseudo_labels);
  return config.mode == MtwaMode::parallel ? parallel_rounds(model, adapter, config, trace)
                                           : sequential_rounds(model, adapter, config, trace);
}

ParameterSet average_parameters(std::span<const ParameterSet> sets) {
  if (sets.empty()) throw std::invalid_argument("average_parameters: empty list");
  ParameterSet avg = sets.front();
  for (std::size_t k = 1; k < sets.size(); ++k) {
    if (!sets[k].congruent_with(avg)) {
      throw std::invalid_argument("average_parameters: set " + std::to_string(k) +
                                  " does not match the names and shapes of set 0");
    }
    const double inv = 1.0 / static_cast<double>(k + 1);
    for (std::size_t e = 0; e < avg.size(); ++e) {
      auto& acc = avg.entries()[e].values;
      const auto& x = sets[k].entries()[e].values;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += (x[i] - acc[i]) * inv;
    }
  }
  return avg;
}

Tensor average_outputs(ClipModel& model, std::span<const ParameterSet> branches, const Tensor& images,
                       const Tensor& class_emb) {
  if (branches.empty()) throw std::invalid_argument("average_outputs: no branches");
  const ParameterSet saved = ln_parameters(model);
  NoGradGuard no_grad;
  std::vector<double> acc;
  Shape shape;
  for (std::size_t k = 0; k < branches.size(); ++k) {
    model.load(branches[k]);
    const Tensor probs = class_probabilities(model.encode_image(images), class_emb, model.temperature());
    if (k == 0) {
      acc.assign(probs.data().begin(), probs.data().end());
      shape = probs.shape();
      continue;
    }
    const double inv = 1.0 / static_cast<double>(k + 1);
    const auto v = probs.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += (v[i] - acc[i]) * inv;
  }
  model.load(saved);
  return Tensor::from(std::move(shape), std::move(acc));
}

}  // namespace watt
