#include "watt/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "watt/config.hpp"
#include "watt/io.hpp"
#include "watt/random.hpp"
#include "watt/templates.hpp"

namespace watt {

std::string to_string(EvalHead head) { return head == EvalHead::single_temp ? "single_temp" : "text_avg"; }

EvalHead eval_head_from_string(const std::string& name) {
  if (name == "single_temp") return EvalHead::single_temp;
  if (name == "text_avg") return EvalHead::text_avg;
  throw std::invalid_argument("unknown head '" + name + "' (expected single_temp or text_avg)");
}

void EvalConfig::validate() const {
  if (templates.empty()) throw std::invalid_argument("EvalConfig: at least one template is required");
  if (class_names.size() < 2) throw std::invalid_argument("EvalConfig: at least two classes are required");
  if (batch_size == 0) throw std::invalid_argument("EvalConfig: batch_size must be >= 1");
}

namespace {

Tensor running_mean(std::span<const Tensor> mats) {
  std::vector<double> acc(mats.front().data().begin(), mats.front().data().end());
  for (std::size_t h = 1; h < mats.size(); ++h) {
    const double inv = 1.0 / static_cast<double>(h + 1);
    const auto v = mats[h].data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += (v[i] - acc[i]) * inv;
  }
  return Tensor::from(mats.front().shape(), std::move(acc));
}

}  // namespace

Tensor ensemble_text_embedding(const ClipModel& model, std::span<const std::string> templates,
                               const std::vector<std::string>& class_names) {
  if (templates.empty()) throw std::invalid_argument("ensemble_text_embedding: H must be >= 1");
  std::vector<Tensor> per_template;
  for (const auto& t : templates) per_template.push_back(class_embeddings(model, t, class_names));
  return running_mean(per_template);
}

Tensor head_embeddings(const ClipModel& model, const EvalConfig& config) {
  config.validate();
  if (config.head == EvalHead::single_temp) return class_embeddings(model, config.templates.front(), config.class_names);
  return ensemble_text_embedding(model, config.templates, config.class_names);
}

Tensor head_probabilities(const Tensor& image_emb, const Tensor& class_emb, double tau) {
  return class_probabilities(image_emb, class_emb, tau);
}

// ---------------------------------------------------------------------------
// Results

nlohmann::json ExperimentResult::to_json() const {
  return {{"dataset", dataset},
          {"corruption", corruption},
          {"severity", severity},
          {"method", method},
          {"seed", seed},
          {"accuracy", accuracy},
          {"per_class_accuracy", per_class_accuracy},
          {"per_class_count", per_class_count},
          {"wall_seconds", wall_seconds},
          {"config", config},
          {"version", std::string(library_version())}};
}

ExperimentResult ExperimentResult::from_json(const nlohmann::json& j) {
  ExperimentResult r;
  j.at("dataset").get_to(r.dataset);
  j.at("corruption").get_to(r.corruption);
  j.at("severity").get_to(r.severity);
  j.at("method").get_to(r.method);
  j.at("seed").get_to(r.seed);
  j.at("accuracy").get_to(r.accuracy);
  j.at("per_class_accuracy").get_to(r.per_class_accuracy);
  j.at("per_class_count").get_to(r.per_class_count);
  j.at("wall_seconds").get_to(r.wall_seconds);
  r.config = j.at("config");
  return r;
}

void score(ExperimentResult& result, std::span<const std::size_t> predictions, std::span<const int> labels,
           std::size_t num_classes) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("score: predictions and labels differ in length");
  std::vector<std::size_t> hits(num_classes, 0);
  result.per_class_count.assign(num_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (y >= num_classes) throw std::invalid_argument("score: label " + std::to_string(y) + " out of range");
    ++result.per_class_count[y];
    if (predictions[i] == y) {
      ++hits[y];
      ++correct;
    }
  }
  result.per_class_accuracy.assign(num_classes, 0.0);
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (result.per_class_count[k] > 0) {
      result.per_class_accuracy[k] = static_cast<double>(hits[k]) / static_cast<double>(result.per_class_count[k]);
    }
  }
  result.accuracy = labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
}

namespace {

std::string corruption_tag(const ImageSet& images) {
  const auto slash = images.split.find('/');
  return slash == std::string::npos ? "clean" : images.split.substr(slash + 1);
}

}  // namespace

ExperimentResult evaluate(const ClipModel& model, const ImageSet& images, const EvalConfig& config) {
  MethodSpec zero;
  zero.kind = MethodKind::zero_shot;
  return run_method(model, images, config, zero, 0);
}

// ---------------------------------------------------------------------------
// Methods

std::string to_string(MethodKind kind) {
  switch (kind) {
    case MethodKind::zero_shot: return "zero_shot";
    case MethodKind::single_template: return "single_template";
    case MethodKind::text_avg: return "text_avg";
    case MethodKind::output_avg: return "output_avg";
    case MethodKind::watt: return "watt";
    case MethodKind::entropy: return "entropy";
  }
  return "unknown";
}

MethodKind method_kind_from_string(const std::string& name) {
  for (auto k : {MethodKind::zero_shot, MethodKind::single_template, MethodKind::text_avg, MethodKind::output_avg,
                 MethodKind::watt, MethodKind::entropy}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown method '" + name +
                              "' (expected zero_shot, single_template, text_avg, output_avg, watt or entropy)");
}

std::string MethodSpec::id() const {
  const std::size_t steps = mtwa.inner_steps * mtwa.rounds;
  std::ostringstream out;
  switch (kind) {
    case MethodKind::zero_shot: out << "zero_shot"; break;
    case MethodKind::single_template: out << "single_template(t=" << template_index << ",steps=" << steps << ")"; break;
    case MethodKind::text_avg: out << "text_avg(steps=" << steps << ")"; break;
    case MethodKind::output_avg: out << "output_avg(steps=" << steps << ")"; break;
    case MethodKind::entropy: out << "entropy(steps=" << steps << ")"; break;
    case MethodKind::watt:
      out << (mtwa.mode == MtwaMode::parallel ? "watt-p" : "watt-s") << "(L=" << mtwa.inner_steps
          << ",M=" << mtwa.rounds << ")";
      break;
  }
  return out.str();
}

void to_json(nlohmann::json& j, const MethodSpec& m) {
  j = nlohmann::json{{"kind", to_string(m.kind)}, {"mtwa", m.mtwa}, {"template_index", m.template_index}};
}

void from_json(const nlohmann::json& j, MethodSpec& m) {
  require_object(j, "method");
  for (const auto& [key, value] : j.items()) {
    with_key(key, [&, &key = key, &value = value] {
      if (key == "kind") m.kind = method_kind_from_string(value.get<std::string>());
      else if (key == "mtwa") from_json(value, m.mtwa);
      else if (key == "template_index") value.get_to(m.template_index);
      else unknown_key();
    });
  }
}

namespace {

// Text-side quantities are fixed during adaptation, so they are encoded once
// per run and shared by every batch.
struct TextCache {
  std::vector<Tensor> per_template;  // unit-norm rows
  Tensor ensemble;                   // mean of per_template, not re-normalized
  Tensor head;
};

TextCache encode_text_side(const ClipModel& model, const EvalConfig& eval) {
  eval.validate();
  TextCache cache;
  for (const auto& t : eval.templates) cache.per_template.push_back(class_embeddings(model, t, eval.class_names));
  cache.ensemble = running_mean(cache.per_template);
  cache.head = eval.head == EvalHead::single_temp ? cache.per_template.front() : cache.ensemble;
  return cache;
}

Tensor unit_rows(const Tensor& emb) {
  NoGradGuard no_grad;
  return l2_normalize(emb, -1);
}

Tensor predict(ClipModel& model, const UnlabeledBatch& batch, const Tensor& head) {
  NoGradGuard no_grad;
  return head_probabilities(model.encode_image(batch.images), head, model.temperature());
}

Tensor adapt_and_predict_cached(ClipModel& model, const UnlabeledBatch& batch, const TextCache& text,
                                const MethodSpec& method, std::uint64_t seed) {
  const MtwaConfig& cfg = method.mtwa;
  cfg.validate();
  const std::size_t steps = cfg.inner_steps * cfg.rounds;
  switch (method.kind) {
    case MethodKind::zero_shot:
      break;
    case MethodKind::single_template:
    case MethodKind::entropy: {
      const std::size_t t = method.kind == MethodKind::entropy ? 0 : method.template_index;
      if (t >= text.per_template.size()) {
        throw std::invalid_argument("single_template: template index " + std::to_string(t) + " out of range (H = " +
                                    std::to_string(text.per_template.size()) + ")");
      }
      const LossKind loss = method.kind == MethodKind::entropy ? LossKind::entropy_min : cfg.loss;
      Adapter adapter(model, batch, {text.per_template[t]}, loss, cfg.refresh_pseudo_labels);
      AdamState state(AdamOptions{.lr = cfg.lr});
      adapter.run(0, steps, state);
      break;
    }
    case MethodKind::text_avg: {
      Adapter adapter(model, batch, {unit_rows(text.ensemble)}, cfg.loss, cfg.refresh_pseudo_labels);
      AdamState state(AdamOptions{.lr = cfg.lr});
      adapter.run(0, steps, state);
      break;
    }
    case MethodKind::output_avg: {
      const ParameterSet start = ln_parameters(model);
      std::vector<ParameterSet> branches;
      for (std::size_t h = 0; h < text.per_template.size(); ++h) {
        model.load(start);
        Adapter adapter(model, batch, {text.per_template[h]}, cfg.loss, cfg.refresh_pseudo_labels);
        AdamState state(AdamOptions{.lr = cfg.lr});
        adapter.run(0, steps, state);
        branches.push_back(ln_parameters(model));
      }
      model.load(start);
      return average_outputs(model, branches, batch.images, unit_rows(text.head));
    }
    case MethodKind::watt: {
      MtwaConfig run = cfg;
      run.seed = seed;
      run_watt(model, batch, text.per_template, run);
      break;
    }
  }
  return predict(model, batch, text.head);
}

}  // namespace

Tensor adapt_and_predict(ClipModel& model, const UnlabeledBatch& batch, const EvalConfig& eval,
                         const MethodSpec& method, std::uint64_t seed) {
  return adapt_and_predict_cached(model, batch, encode_text_side(model, eval), method, seed);
}

ExperimentResult run_method(const ClipModel& pretrained, const ImageSet& images, const EvalConfig& eval,
                            const MethodSpec& method, std::uint64_t seed, bool continual) {
  const auto t0 = std::chrono::steady_clock::now();
  ClipModel model = pretrained.clone();
  const TextCache text = encode_text_side(model, eval);
  const ParameterSet reference = ln_parameters(model);

  std::vector<std::size_t> predictions;
  std::vector<int> labels;
  predictions.reserve(images.size());
  labels.reserve(images.size());
  const auto batches = batch_iter(images, eval.batch_size, derive_seed(seed, "batches"), /*drop_last=*/false);
  for (std::size_t b = 0; b < batches.size(); ++b) {
    if (!continual) model.load(reference);
    const Tensor probs = adapt_and_predict_cached(model, batches[b].inputs, text, method, derive_seed(seed, "adapt", b));
    const auto pred = argmax_rows(probs);
    predictions.insert(predictions.end(), pred.begin(), pred.end());
    labels.insert(labels.end(), batches[b].labels.begin(), batches[b].labels.end());
  }

  ExperimentResult result;
  result.corruption = corruption_tag(images);
  result.method = method.id();
  result.seed = seed;
  score(result, predictions, labels, eval.class_names.size());
  result.config = {{"method", method},
                   {"head", to_string(eval.head)},
                   {"templates", eval.templates},
                   {"batch_size", eval.batch_size},
                   {"continual", continual}};
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---------------------------------------------------------------------------
// Sweeps

std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::batch_size: return "batch_size";
    case SweepAxis::template_count: return "template_count";
    case SweepAxis::schedule: return "schedule";
    case SweepAxis::strategy: return "strategy";
    case SweepAxis::corruption: return "corruption";
  }
  return "unknown";
}

SweepAxis sweep_axis_from_string(const std::string& name) {
  for (auto a : {SweepAxis::batch_size, SweepAxis::template_count, SweepAxis::schedule, SweepAxis::strategy,
                 SweepAxis::corruption}) {
    if (to_string(a) == name) return a;
  }
  throw std::invalid_argument("unknown sweep axis '" + name +
                              "' (expected batch_size, template_count, schedule, strategy or corruption)");
}

namespace {

std::vector<std::string> sweep_templates(const SweepConfig& c) {
  return c.templates.empty() ? TemplateSet::defaults().templates() : c.templates;
}

bool parse_wa(const std::string& text, std::size_t& L, std::size_t& M) {
  unsigned long l = 0;
  unsigned long m = 0;
  char tail = 0;
  if (std::sscanf(text.c_str(), "wa(%lu,%lu%c", &l, &m, &tail) != 3 || tail != ')') return false;
  L = l;
  M = m;
  return true;
}

// Applies one strategy name to a copy of the base method.
MethodSpec strategy_method(const MethodSpec& base, const std::string& name) {
  MethodSpec m = base;
  std::size_t L = 0;
  std::size_t M = 0;
  if (parse_wa(name, L, M)) {
    m.kind = MethodKind::watt;
    m.mtwa.inner_steps = L;
    m.mtwa.rounds = M;
  } else {
    m.kind = method_kind_from_string(name);
  }
  m.mtwa.validate();
  return m;
}

bool positive_integer(const nlohmann::json& v) { return v.is_number_integer() && v.get<long long>() >= 1; }

void check_grid_value(const SweepConfig& c, const nlohmann::json& v) {
  const std::size_t H = sweep_templates(c).size();
  switch (c.axis) {
    case SweepAxis::batch_size:
      if (!positive_integer(v)) throw std::invalid_argument("batch sizes must be integers >= 1");
      break;
    case SweepAxis::template_count:
      if (!positive_integer(v) || v.get<std::size_t>() > H) {
        throw std::invalid_argument("template counts must lie in 1.." + std::to_string(H));
      }
      break;
    case SweepAxis::schedule:
      if (!v.is_array() || v.size() != 2 || !positive_integer(v[0]) || !positive_integer(v[1])) {
        throw std::invalid_argument("schedule entries must be [L, M] with L, M >= 1");
      }
      break;
    case SweepAxis::strategy:
      if (!v.is_string()) throw std::invalid_argument("strategy entries must be strings");
      strategy_method(c.method, v.get<std::string>());
      break;
    case SweepAxis::corruption:
      if (!v.is_string()) throw std::invalid_argument("corruption entries must be strings");
      if (v.get<std::string>() != "clean") corruption_from_string(v.get<std::string>());
      break;
  }
}

std::string grid_label(const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

}  // namespace

void SweepConfig::validate() const {
  if (!grid.is_array() || grid.empty()) throw ConfigError("grid", "must be a non-empty array");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    with_key("grid[" + std::to_string(i) + "]", [&] { check_grid_value(*this, grid[i]); });
  }
  if (seeds.empty()) throw ConfigError("seeds", "at least one seed is required");
  if (axis != SweepAxis::corruption) {
    if (corruptions.empty()) throw ConfigError("corruptions", "at least one corruption is required");
    for (const auto& name : corruptions) {
      with_key("corruptions", [&] {
        if (name != "clean") corruption_from_string(name);
      });
    }
  }
  if (severity < 1 || severity > 5) throw ConfigError("severity", "must lie in 1..5");
  if (batch_size == 0) throw ConfigError("batch_size", "must be >= 1");
  with_key("method", [&] { method.mtwa.validate(); });
  with_key("templates", [&] { TemplateSet{sweep_templates(*this)}; });
}

void to_json(nlohmann::json& j, const SweepConfig& c) {
  j = nlohmann::json{{"axis", to_string(c.axis)},       {"grid", c.grid},
                     {"seeds", c.seeds},                {"corruptions", c.corruptions},
                     {"severity", c.severity},          {"method", c.method},
                     {"head", to_string(c.head)},       {"batch_size", c.batch_size},
                     {"templates", c.templates},        {"continual", c.continual}};
}

void from_json(const nlohmann::json& j, SweepConfig& c) {
  require_object(j, "sweep config");
  for (const auto& [key, value] : j.items()) {
    with_key(key, [&, &key = key, &value = value] {
      if (key == "axis") c.axis = sweep_axis_from_string(value.get<std::string>());
      else if (key == "grid") c.grid = value;
      else if (key == "seeds") value.get_to(c.seeds);
      else if (key == "corruptions") value.get_to(c.corruptions);
      else if (key == "severity") value.get_to(c.severity);
      else if (key == "method") from_json(value, c.method);
      else if (key == "head") c.head = eval_head_from_string(value.get<std::string>());
      else if (key == "batch_size") value.get_to(c.batch_size);
      else if (key == "templates") value.get_to(c.templates);
      else if (key == "continual") value.get_to(c.continual);
      else unknown_key();
    });
  }
  c.validate();
}

std::vector<SweepJob> sweep_jobs(const SweepConfig& config) {
  config.validate();
  std::vector<SweepJob> jobs;
  for (const auto& value : config.grid) {
    for (auto seed : config.seeds) {
      const std::vector<std::string> corruptions =
          config.axis == SweepAxis::corruption ? std::vector<std::string>{value.get<std::string>()} : config.corruptions;
      for (const auto& corruption : corruptions) {
        SweepJob job;
        job.index = jobs.size();
        job.grid_value = value;
        job.seed = seed;
        job.corruption = corruption;
        job.key = to_string(config.axis) + "=" + grid_label(value) + "|seed=" + std::to_string(seed) +
                  "|corruption=" + corruption;
        jobs.push_back(std::move(job));
      }
    }
  }
  return jobs;
}

namespace {

ExperimentResult run_job(const ClipModel& pretrained, const Dataset& dataset, const SweepConfig& config,
                         const SweepJob& job) {
  EvalConfig eval;
  eval.head = config.head;
  eval.templates = sweep_templates(config);
  eval.class_names = dataset.class_names;
  eval.batch_size = config.batch_size;
  MethodSpec method = config.method;
  std::string suffix;

  switch (config.axis) {
    case SweepAxis::batch_size:
      eval.batch_size = job.grid_value.get<std::size_t>();
      suffix = "/bs=" + std::to_string(eval.batch_size);
      break;
    case SweepAxis::template_count: {
      const std::size_t count = job.grid_value.get<std::size_t>();
      std::vector<std::size_t> idx(eval.templates.size());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      Rng rng = make_rng(job.seed, "template-subset/" + std::to_string(count));
      for (std::size_t i = idx.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(idx[i - 1], idx[pick(rng)]);
      }
      idx.resize(count);
      std::sort(idx.begin(), idx.end());
      std::vector<std::string> subset;
      for (auto i : idx) subset.push_back(eval.templates[i]);
      eval.templates = std::move(subset);
      suffix = "/T=" + std::to_string(count);
      break;
    }
    case SweepAxis::schedule:
      method.mtwa.inner_steps = job.grid_value[0].get<std::size_t>();
      method.mtwa.rounds = job.grid_value[1].get<std::size_t>();
      break;
    case SweepAxis::strategy:
      method = strategy_method(config.method, job.grid_value.get<std::string>());
      break;
    case SweepAxis::corruption:
      break;
  }

  ImageSet images = dataset.test;
  int severity = 0;
  if (job.corruption != "clean") {
    severity = config.severity;
    images = apply_corruption(dataset.test, {corruption_from_string(job.corruption), severity},
                              derive_seed(job.seed, "corruption/" + job.corruption));
  }
  ExperimentResult r = run_method(pretrained, images, eval, method, job.seed, config.continual);
  r.dataset = dataset.source;
  r.corruption = job.corruption;
  r.severity = severity;
  r.method += suffix;
  r.config["axis"] = to_string(config.axis);
  r.config["grid_value"] = job.grid_value;
  r.config["job_key"] = job.key;
  return r;
}

std::map<std::string, ExperimentResult> load_existing(const std::filesystem::path& file) {
  std::map<std::string, ExperimentResult> rows;
  std::ifstream in(file);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      auto r = ExperimentResult::from_json(nlohmann::json::parse(line));
      rows.emplace(r.config.at("job_key").get<std::string>(), std::move(r));
    } catch (const std::exception&) {
      // A line cut short by an interrupted run; the job is simply rerun.
    }
  }
  return rows;
}

}  // namespace

std::vector<ExperimentResult> run_sweep(const ClipModel& pretrained, const Dataset& dataset, const SweepConfig& config,
                                        const SweepOptions& options) {
  const auto jobs = sweep_jobs(config);
  std::vector<std::optional<ExperimentResult>> results(jobs.size());

  std::filesystem::path results_file;
  std::filesystem::path manifest_file;
  if (options.output_dir) {
    std::filesystem::create_directories(*options.output_dir);
    results_file = *options.output_dir / "results.jsonl";
    manifest_file = *options.output_dir / "manifest.json";
    auto existing = load_existing(results_file);
    for (const auto& job : jobs) {
      auto it = existing.find(job.key);
      if (it != existing.end()) results[job.index] = std::move(it->second);
    }
  }

  std::mutex mutex;
  auto write_manifest = [&](const char* status) {
    if (!options.output_dir) return;
    nlohmann::json done = nlohmann::json::array();
    nlohmann::json pending = nlohmann::json::array();
    for (const auto& job : jobs) (results[job.index] ? done : pending).push_back(job.key);
    const nlohmann::json manifest = {{"version", WATT_VERSION}, {"status", status},  {"config", config},
                                     {"total_jobs", jobs.size()}, {"completed", done}, {"pending", pending}};
    write_file_atomic(manifest_file, manifest.dump(2) + "\n");
  };
  {
    // Rows carried over from an earlier run are normalized into job order.
    std::string text;
    for (const auto& r : results) {
      if (r) text += r->to_json().dump() + "\n";
    }
    if (options.output_dir) write_file_atomic(results_file, text);
    write_manifest("running");
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      {
        std::lock_guard lock(mutex);
        if (failure) return;
      }
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      if (results[i]) continue;
      try {
        ExperimentResult r = run_job(pretrained, dataset, config, jobs[i]);
        if (options.deterministic) r.wall_seconds = 0.0;
        std::lock_guard lock(mutex);
        if (options.output_dir) {
          std::ofstream out(results_file, std::ios::app);
          out << r.to_json().dump() << "\n";
        }
        results[i] = std::move(r);
        write_manifest("running");
        if (options.on_result) options.on_result(*results[i]);
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };

  const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, jobs.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) {
    write_manifest("interrupted");
    std::rethrow_exception(failure);
  }

  std::vector<ExperimentResult> out;
  out.reserve(results.size());
  for (auto& r : results) out.push_back(std::move(*r));
  if (options.output_dir) {
    std::string text;
    for (const auto& r : out) text += r.to_json().dump() + "\n";
    write_file_atomic(results_file, text);
    write_file_atomic(*options.output_dir / "pivot.csv", pivot_csv(out));
    write_manifest("complete");
  }
  return out;
}

std::string pivot_csv(std::span<const ExperimentResult> rows) {
  std::vector<std::string> methods;
  std::vector<std::string> columns;
  std::map<std::pair<std::string, std::string>, std::vector<double>> cells;
  for (const auto& r : rows) {
    const std::string col = r.severity > 0 ? r.corruption + "@" + std::to_string(r.severity) : r.corruption;
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    if (std::find(columns.begin(), columns.end(), col) == columns.end()) columns.push_back(col);
    cells[{r.method, col}].push_back(r.accuracy);
  }
  std::ostringstream out;
  out << "method";
  for (const auto& c : columns) out << "," << c;
  out << ",mean\n";
  char buf[32];
  for (const auto& m : methods) {
    out << '"' << m << '"';
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& c : columns) {
      auto it = cells.find({m, c});
      if (it == cells.end()) {
        out << ",";
        continue;
      }
      const double mean = std::accumulate(it->second.begin(), it->second.end(), 0.0) / it->second.size();
      std::snprintf(buf, sizeof buf, "%.2f", 100.0 * mean);
      out << "," << buf;
      total += mean;
      ++n;
    }
    std::snprintf(buf, sizeof buf, "%.2f", n ? 100.0 * total / n : 0.0);
    out << "," << buf << "\n";
  }
  return out.str();
}

}  // namespace watt
