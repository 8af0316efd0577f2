#include "watt/run.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "watt/config.hpp"
#include "watt/io.hpp"
#include "watt/random.hpp"
#include "watt/templates.hpp"

namespace watt {

namespace {

std::vector<std::string> default_templates() { return TemplateSet::defaults().templates(); }

std::vector<std::string> or_defaults(const std::vector<std::string>& templates) {
  return templates.empty() ? default_templates() : templates;
}

std::vector<std::string> landscape_templates(const LandscapeSection& c) {
  if (!c.templates.empty()) return c.templates;
  const auto all = default_templates();
  return {all[0], all[1], all[2]};
}

void check_corruption(const std::string& name, bool allow_clean) {
  if (allow_clean && name == "clean") return;
  corruption_from_string(name);
}

void check_severity(int severity) {
  if (severity < 1 || severity > 5) throw ConfigError("severity", "must lie in 1..5");
}

nlohmann::json snapshot(const RunConfig& config) {
  return {{"version", std::string(library_version())}, {"config", config}};
}

std::string jsonl(std::span<const ExperimentResult> rows) {
  std::string out;
  for (const auto& r : rows) out += r.to_json().dump() + "\n";
  return out;
}

std::filesystem::path command_dir(const RunConfig& config, const char* name) {
  const auto dir = resolve_output_dir(config) / name;
  std::filesystem::create_directories(dir);
  return dir;
}

ClipModel load_model(const RunConfig& config) {
  const auto path = resolve_checkpoint(config);
  if (!std::filesystem::exists(path)) {
    throw std::runtime_error("checkpoint '" + path.string() + "' does not exist (run `watt pretrain` first)");
  }
  return model_from_checkpoint(load_checkpoint(path, config.model));
}

// Runs fn(i) for i in [0, n) on up to `threads` workers; the first exception is rethrown.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

RunConfig::RunConfig() { sweep.grid = nlohmann::json::array({1, 2, 4, 8, 16, 32, 64, 128}); }

void RunConfig::validate() const {
  if (threads == 0) throw ConfigError("threads", "must be >= 1");
  with_key("data", [&] {
    if (data.source != "synthetic" && data.source != "cifar10") {
      throw ConfigError("source", "expected synthetic or cifar10, got '" + data.source + "'");
    }
    if (data.source == "cifar10" && data.cifar_dir.empty()) throw ConfigError("cifar_dir", "required for cifar10");
    if (data.source == "synthetic" && data.test_size == 0) throw ConfigError("test_size", "must be >= 1");
  });
  with_key("model", [&] { model.validate(); });
  with_key("pretrain", [&] { pretrain.validate(); });
  with_key("adapt", [&] {
    with_key("method", [&] { adapt.method.mtwa.validate(); });
    const auto templates = or_defaults(adapt.templates);
    with_key("templates", [&] { TemplateSet{templates}; });
    if (adapt.method.kind == MethodKind::single_template && adapt.method.template_index >= templates.size()) {
      throw ConfigError("method.template_index", "out of range for " + std::to_string(templates.size()) + " templates");
    }
    if (adapt.batch_size == 0) throw ConfigError("batch_size", "must be >= 1");
    with_key("corruption", [&] { check_corruption(adapt.corruption, true); });
    check_severity(adapt.severity);
  });
  with_key("sweep", [&] { sweep.validate(); });
  with_key("landscape", [&] {
    const auto templates = landscape_templates(landscape);
    if (templates.size() != 3) throw ConfigError("templates", "exactly three templates are required");
    with_key("templates", [&] { TemplateSet{templates}; });
    with_key("corruption", [&] { check_corruption(landscape.corruption, true); });
    check_severity(landscape.severity);
    if (landscape.steps == 0) throw ConfigError("steps", "must be >= 1");
    if (!(landscape.lr > 0.0)) throw ConfigError("lr", "must be > 0");
    if (landscape.batch_size < 2) throw ConfigError("batch_size", "must be >= 2");
    if (landscape.grid.resolution < 2) throw ConfigError("grid.resolution", "must be >= 2");
    if (!(landscape.grid.margin >= 0.0)) throw ConfigError("grid.margin", "must be >= 0");
  });
  with_key("table", [&] {
    if (table.corruptions.empty()) throw ConfigError("corruptions", "at least one corruption is required");
    with_key("corruptions", [&] {
      for (const auto& name : table.corruptions) check_corruption(name, true);
    });
    check_severity(table.severity);
    if (table.seeds.empty()) throw ConfigError("seeds", "at least one seed is required");
    if (table.steps == 0) throw ConfigError("steps", "must be >= 1");
    if (!(table.lr >= 0.0)) throw ConfigError("lr", "must be >= 0");
    if (table.batch_size == 0) throw ConfigError("batch_size", "must be >= 1");
    with_key("templates", [&] { TemplateSet{or_defaults(table.templates)}; });
  });
}

void to_json(nlohmann::json& j, const DataSection& c) {
  j = {{"source", c.source}, {"train_size", c.train_size}, {"test_size", c.test_size}, {"cifar_dir", c.cifar_dir}};
}

void from_json(const nlohmann::json& j, DataSection& c) {
  require_object(j, "data");
  for (const auto& [key, value] : j.items()) {
    with_key(key, [&, &key = key, &value = value] {
      if (key == "source") value.get_to(c.source);
      else if (key == "train_size") value.get_to(c.train_size);
      else if (key == "test_size") value.get_to(c.test_size);
      else if (key == "cifar_dir") value.get_to(c.cifar_dir);
      else unknown_key();
    });
  }
}

void to_json(nlohmann::json& j, const AdaptSection& c) {
  j = {{"method", c.method},         {"head", to_string(c.head)},         {"templates", c.templates},
       {"batch_size", c.batch_size}, {"corruption", c.corruption},        {"severity", c.severity}};
}

void from_json(const nlohmann::json& j, AdaptSection& c) {
  require_object(j, "adapt");
  for (const auto& [key, value] : j.items()) {
    with_key(key, [&, &key = key, &value = value] {
      if (key == "method") from_json(value, c.method);
      else if (key == "head") c.head = eval_head_from_string(value.get<std::string>());
      else if (key == "templates") value.get_to(c.templates);
      else if (key == "batch_size") value.get_to(c.batch_size);
      else if (key == "corruption") value.get_to(c.corruption);
      else if (key == "severity") value.get_to(c.severity);
      else unknown_key();
    });
  }
}

void to_json(nlohmann::json& j, const GridSpec& c) { j = {{"resolution", c.resolution}, {"margin", c.margin}}; }

void from_json(const nlohmann::json& j, GridSpec& c) {
  require_object(j, "grid");
  for (const auto& [key, value] : j.items()) {
    with_key(key, [&, &key = key, &value = value] {
      if (key == "resolution") value.get_to(c.resolution);
      else if (key == "margin") value.get_to(c.margin);
      else unknown_key();
    });
  }
}

void to_json(nlohmann::json& j, const LandscapeSection& c) {
  j = {{"templates", c.templates}, {"corruption", c.corruption}, {"severity", c.severity},     {"steps", c.steps},
       {"lr", c.lr},               {"batch_size", c.batch_size}, {"grid", c.grid}};
}

void from_json(const nlohmann::json& j, LandscapeSection& c) {
  require_object(j, "landscape");
  for (const auto& [key, value] : j.items()) {
    with_key(key, [&, &key = key, &value = value] {
      if (key == "templates") value.get_to(c.templates);
      else if (key == "corruption") value.get_to(c.corruption);
      else if (key == "severity") value.get_to(c.severity);
      else if (key == "steps") value.get_to(c.steps);
      else if (key == "lr") value.get_to(c.lr);
      else if (key == "batch_size") value.get_to(c.batch_size);
      else if (key == "grid") from_json(value, c.grid);
      else unknown_key();
    });
  }
}

void to_json(nlohmann::json& j, const TableSection& c) {
  j = {{"corruptions", c.corruptions}, {"severity", c.severity},     {"seeds", c.seeds},
       {"steps", c.steps},             {"lr", c.lr},                 {"head", to_string(c.head)},
       {"batch_size", c.batch_size},   {"templates", c.templates}};
}

void from_json(const nlohmann::json& j, TableSection& c) {
  require_object(j, "table");
  for (const auto& [key, value] : j.items()) {
    with_key(key, [&, &key = key, &value = value] {
      if (key == "corruptions") value.get_to(c.corruptions);
      else if (key == "severity") value.get_to(c.severity);
      else if (key == "seeds") value.get_to(c.seeds);
      else if (key == "steps") value.get_to(c.steps);
      else if (key == "lr") value.get_to(c.lr);
      else if (key == "head") c.head = eval_head_from_string(value.get<std::string>());
      else if (key == "batch_size") value.get_to(c.batch_size);
      else if (key == "templates") value.get_to(c.templates);
      else unknown_key();
    });
  }
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"seed", c.seed},         {"deterministic", c.deterministic}, {"threads", c.threads},
       {"output_dir", c.output_dir}, {"checkpoint", c.checkpoint},   {"data", c.data},
       {"model", c.model},       {"pretrain", c.pretrain},           {"adapt", c.adapt},
       {"sweep", c.sweep},       {"landscape", c.landscape},         {"table", c.table}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  require_object(j, "config");
  for (const auto& [key, value] : j.items()) {
    with_key(key, [&, &key = key, &value = value] {
      if (key == "seed") value.get_to(c.seed);
      else if (key == "deterministic") value.get_to(c.deterministic);
      else if (key == "threads") value.get_to(c.threads);
      else if (key == "output_dir") value.get_to(c.output_dir);
      else if (key == "checkpoint") value.get_to(c.checkpoint);
      else if (key == "data") from_json(value, c.data);
      else if (key == "model") {
        nlohmann::json merged = c.model;
        require_object(value, "model");
        merged.update(value);
        merged.get_to(c.model);
      } else if (key == "pretrain") {
        nlohmann::json merged = c.pretrain;
        require_object(value, "pretrain");
        merged.update(value);
        merged.get_to(c.pretrain);
      } else if (key == "adapt") from_json(value, c.adapt);
      else if (key == "sweep") {
        nlohmann::json merged = c.sweep;
        require_object(value, "sweep");
        merged.update(value);
        merged.get_to(c.sweep);
      } else if (key == "landscape") from_json(value, c.landscape);
      else if (key == "table") from_json(value, c.table);
      else unknown_key();
    });
  }
  c.validate();
}

RunConfig load_run_config(const std::filesystem::path& file) {
  if (!std::filesystem::exists(file)) throw std::runtime_error("config file '" + file.string() + "' does not exist");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file(file));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("", "config file '" + file.string() + "' is not valid JSON: " + e.what());
  }
  return doc.get<RunConfig>();
}

void apply_override(nlohmann::json& doc, const std::string& path, const std::string& text) {
  if (path.empty()) throw ConfigError("", "empty key in override");
  if (!doc.is_object()) throw ConfigError("", "config must be a JSON object");
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError(path, "malformed key path");
    if (dot == std::string::npos) {
      nlohmann::json value;
      try {
        value = nlohmann::json::parse(text);
      } catch (const nlohmann::json::parse_error&) {
        value = text;
      }
      (*node)[part] = std::move(value);
      return;
    }
    nlohmann::json& child = (*node)[part];
    if (child.is_null()) child = nlohmann::json::object();
    if (!child.is_object()) throw ConfigError(path.substr(0, dot), "is not an object");
    node = &child;
    start = dot + 1;
  }
}

std::filesystem::path resolve_output_dir(const RunConfig& config) {
  if (!config.output_dir.empty()) return config.output_dir;
  if (const char* env = std::getenv(kOutputDirEnv); env != nullptr && *env != '\0') return env;
  return "watt-out";
}

std::filesystem::path resolve_checkpoint(const RunConfig& config) {
  if (!config.checkpoint.empty()) return config.checkpoint;
  return resolve_output_dir(config) / "pretrain" / "checkpoint.ckpt";
}

Dataset load_dataset(const RunConfig& config) {
  if (config.data.source == "cifar10") return load_cifar10(config.data.cifar_dir);
  return generate_dataset(derive_seed(config.seed, "data"), {config.data.train_size, config.data.test_size});
}

ImageSet corrupted_test_split(const Dataset& dataset, const std::string& corruption, int severity, std::uint64_t seed) {
  if (corruption == "clean") return dataset.test;
  return apply_corruption(dataset.test, {corruption_from_string(corruption), severity},
                          derive_seed(seed, "corruption/" + corruption));
}

// ---------------------------------------------------------------------------
// Commands

CommandOutput cmd_pretrain(const RunConfig& config) {
  config.validate();
  const Dataset dataset = load_dataset(config);
  ClipModel model(config.model, derive_seed(config.seed, "init"));
  PretrainResult result = pretrain(model, dataset, config.pretrain, derive_seed(config.seed, "pretrain"));
  result.checkpoint.metadata = snapshot(config);

  const auto dir = command_dir(config, "pretrain");
  const auto ckpt = resolve_checkpoint(config);
  if (ckpt.has_parent_path()) std::filesystem::create_directories(ckpt.parent_path());
  save_checkpoint(ckpt, result.checkpoint);

  nlohmann::json metrics = snapshot(config);
  metrics["metrics"] = result.metrics();
  metrics["dataset"] = dataset_manifest(dataset);
  const auto metrics_file = dir / "metrics.json";
  write_file_atomic(metrics_file, metrics.dump(2) + "\n");
  return {{ckpt, metrics_file}, {{"clean_accuracy", result.clean_accuracy}, {"final_loss", result.epoch_losses.back()}}};
}

CommandOutput cmd_adapt(const RunConfig& config) {
  config.validate();
  const ClipModel pretrained = load_model(config);
  const Dataset dataset = load_dataset(config);
  const AdaptSection& a = config.adapt;
  const ImageSet images = corrupted_test_split(dataset, a.corruption, a.severity, config.seed);

  EvalConfig eval;
  eval.head = a.head;
  eval.templates = or_defaults(a.templates);
  eval.class_names = dataset.class_names;
  eval.batch_size = a.batch_size;

  std::vector<ExperimentResult> rows;
  for (const MethodSpec& method : {MethodSpec{MethodKind::zero_shot, a.method.mtwa, 0}, a.method}) {
    ExperimentResult r = run_method(pretrained, images, eval, method, config.seed);
    r.dataset = dataset.source;
    r.corruption = a.corruption;
    r.severity = a.corruption == "clean" ? 0 : a.severity;
    if (config.deterministic) r.wall_seconds = 0.0;
    r.config["run"] = snapshot(config);
    rows.push_back(std::move(r));
  }

  // The adapted checkpoint holds the parameters after adapting on the first
  // batch of the episodic run.
  ClipModel model = pretrained.clone();
  const auto batches = batch_iter(images, eval.batch_size, derive_seed(config.seed, "batches"), false);
  adapt_and_predict(model, batches.front().inputs, eval, a.method, derive_seed(config.seed, "adapt", 0));
  Checkpoint adapted;
  adapted.config = model.config();
  adapted.parameters = model.parameters();
  adapted.provenance = load_checkpoint(resolve_checkpoint(config)).provenance;
  adapted.metadata = snapshot(config);
  adapted.metadata["adapted_on"] = {{"batch", 0}, {"indices", batches.front().indices}};

  const auto dir = command_dir(config, "adapt");
  write_file_atomic(dir / "results.jsonl", jsonl(rows));
  save_checkpoint(dir / "adapted.ckpt", adapted);
  return {{dir / "results.jsonl", dir / "adapted.ckpt"},
          {{"zero_shot", rows[0].accuracy}, {"adapted", rows[1].accuracy}, {"method", rows[1].method}}};
}

CommandOutput cmd_sweep(const RunConfig& config) {
  config.validate();
  const ClipModel pretrained = load_model(config);
  const Dataset dataset = load_dataset(config);
  const auto dir = command_dir(config, "sweep");
  write_file_atomic(dir / "run.json", snapshot(config).dump(2) + "\n");
  SweepOptions options;
  options.threads = config.threads;
  options.deterministic = config.deterministic;
  options.output_dir = dir;
  const auto rows = run_sweep(pretrained, dataset, config.sweep, options);
  return {{dir / "run.json", dir / "results.jsonl", dir / "manifest.json", dir / "pivot.csv"},
          {{"rows", rows.size()}}};
}

CommandOutput cmd_landscape(const RunConfig& config) {
  config.validate();
  const ClipModel pretrained = load_model(config);
  const Dataset dataset = load_dataset(config);
  const LandscapeSection& l = config.landscape;
  const ImageSet images = corrupted_test_split(dataset, l.corruption, l.severity, config.seed);
  const auto order = batch_indices(images.size(), l.batch_size, derive_seed(config.seed, "landscape"), false);
  const Batch batch = make_batch(images, order.front());

  const auto templates = landscape_templates(l);
  std::vector<ParameterSet> w;
  for (const auto& t : templates) {
    ClipModel model = pretrained.clone();
    w.push_back(adapt_single_template(model, batch.inputs, t, dataset.class_names, l.steps, l.lr,
                                      LossKind::transductive_ce));
  }
  const Tensor class_emb = ensemble_text_embedding(pretrained, templates, dataset.class_names);
  const LandscapePlane plane = build_plane(w[0], w[1], w[2]);
  const LandscapeGrid grid = evaluate_grid(pretrained, plane, l.grid, batch, class_emb, config.threads);

  nlohmann::json sidecar = grid.sidecar();
  sidecar.update(snapshot(config));
  sidecar["templates"] = templates;
  sidecar["batch_indices"] = batch.indices;

  const auto dir = command_dir(config, "landscape");
  write_file_atomic(dir / "grid.csv", grid.csv());
  write_file_atomic(dir / "grid.json", sidecar.dump(2) + "\n");
  return {{dir / "grid.csv", dir / "grid.json"}, {{"cells", grid.cells.size()}}};
}

// ---------------------------------------------------------------------------
// Template table

std::string table_csv(std::span<const TableRow> rows, std::size_t templates) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2) << "corruption,zero_shot";
  for (std::size_t t = 0; t < templates; ++t) out << ",T" << t;
  out << ",template_mean,WA\n";
  for (const auto& r : rows) {
    double mean = 0.0;
    for (double a : r.template_accuracy) mean += a;
    mean /= static_cast<double>(r.template_accuracy.size());
    out << r.corruption << ',' << r.zero_shot;
    for (double a : r.template_accuracy) out << ',' << a;
    out << ',' << mean << ',' << r.weight_average << '\n';
  }
  return out.str();
}

CommandOutput cmd_table(const RunConfig& config, std::vector<TableRow>* rows_out) {
  config.validate();
  const ClipModel pretrained = load_model(config);
  const Dataset dataset = load_dataset(config);
  const TableSection& c = config.table;
  const auto templates = or_defaults(c.templates);
  const std::size_t H = templates.size();

  EvalConfig eval;
  eval.head = c.head;
  eval.templates = templates;
  eval.class_names = dataset.class_names;
  eval.batch_size = c.batch_size;
  const Tensor head = head_embeddings(pretrained, eval);
  std::vector<Tensor> per_template;
  for (const auto& t : templates) per_template.push_back(class_embeddings(pretrained, t, dataset.class_names));

  MtwaConfig mtwa;
  mtwa.mode = MtwaMode::parallel;
  mtwa.inner_steps = c.steps;
  mtwa.rounds = 1;
  mtwa.lr = c.lr;
  std::vector<MethodSpec> methods;
  for (std::size_t t = 0; t < H; ++t) methods.push_back({MethodKind::single_template, mtwa, t});
  methods.push_back({MethodKind::watt, mtwa, 0});
  methods.push_back({MethodKind::zero_shot, mtwa, 0});

  struct Job {
    std::string corruption;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& name : c.corruptions)
    for (auto seed : c.seeds) jobs.push_back({name, seed});

  // Per job: H single-template branches per batch, their weight average, and the
  // unadapted model, all on the same batches.
  std::vector<std::vector<ExperimentResult>> results(jobs.size());
  parallel_for(jobs.size(), config.threads, [&](std::size_t j) {
    const Job& job = jobs[j];
    const ImageSet images = corrupted_test_split(dataset, job.corruption, c.severity, job.seed);
    ClipModel model = pretrained.clone();
    const ParameterSet reference = ln_parameters(model);
    std::vector<std::vector<std::size_t>> preds(methods.size());
    std::vector<int> labels;
    auto predict_into = [&](std::size_t m, const Batch& batch) {
      NoGradGuard no_grad;
      const auto p = argmax_rows(head_probabilities(model.encode_image(batch.inputs.images), head, model.temperature()));
      preds[m].insert(preds[m].end(), p.begin(), p.end());
    };
    for (const Batch& batch : batch_iter(images, c.batch_size, derive_seed(job.seed, "batches"), false)) {
      labels.insert(labels.end(), batch.labels.begin(), batch.labels.end());
      std::vector<ParameterSet> branches;
      for (std::size_t t = 0; t < H; ++t) {
        model.load(reference);
        Adapter adapter(model, batch.inputs, {per_template[t]}, LossKind::transductive_ce, true);
        AdamState state(AdamOptions{.lr = c.lr});
        adapter.run(0, c.steps, state);
        branches.push_back(ln_parameters(model));
        predict_into(t, batch);
      }
      model.load(average_parameters(branches));
      predict_into(H, batch);
      model.load(reference);
      predict_into(H + 1, batch);
    }
    for (std::size_t m = 0; m < methods.size(); ++m) {
      ExperimentResult r;
      r.dataset = dataset.source;
      r.corruption = job.corruption;
      r.severity = job.corruption == "clean" ? 0 : c.severity;
      r.method = methods[m].id();
      r.seed = job.seed;
      score(r, preds[m], labels, dataset.num_classes());
      r.config = {{"method", methods[m]},
                  {"head", to_string(c.head)},
                  {"templates", templates},
                  {"batch_size", c.batch_size}};
      results[j].push_back(std::move(r));
    }
  });

  std::vector<ExperimentResult> flat;
  std::vector<TableRow> rows;
  for (const auto& name : c.corruptions) {
    TableRow row;
    row.corruption = name;
    row.template_accuracy.assign(H, 0.0);
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      if (jobs[j].corruption != name) continue;
      for (std::size_t t = 0; t < H; ++t) row.template_accuracy[t] += 100.0 * results[j][t].accuracy;
      row.weight_average += 100.0 * results[j][H].accuracy;
      row.zero_shot += 100.0 * results[j][H + 1].accuracy;
    }
    const double n = static_cast<double>(c.seeds.size());
    for (auto& a : row.template_accuracy) a /= n;
    row.weight_average /= n;
    row.zero_shot /= n;
    rows.push_back(std::move(row));
  }
  for (auto& job_rows : results)
    for (auto& r : job_rows) flat.push_back(std::move(r));

  const auto dir = command_dir(config, "table");
  write_file_atomic(dir / "results.jsonl", jsonl(flat));
  write_file_atomic(dir / "table.csv", table_csv(rows, H));
  write_file_atomic(dir / "run.json", snapshot(config).dump(2) + "\n");
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& r : rows) {
    summary.push_back({{"corruption", r.corruption},
                       {"templates", r.template_accuracy},
                       {"weight_average", r.weight_average},
                       {"zero_shot", r.zero_shot}});
  }
  if (rows_out != nullptr) *rows_out = std::move(rows);
  return {{dir / "results.jsonl", dir / "table.csv", dir / "run.json"}, summary};
}

}  // namespace watt
