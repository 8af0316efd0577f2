#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "watt/config.hpp"
#include "watt/io.hpp"
#include "watt/run.hpp"
#include "watt/verify.hpp"

namespace {

enum Exit { kOk = 0, kUsage = 1, kRuntime = 2, kVerify = 3 };

struct Options {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<bool> deterministic;
  std::string output_dir;
  std::string checkpoint;
};

watt::RunConfig build_config(const Options& o) {
  nlohmann::json doc = nlohmann::json::object();
  if (!o.config_file.empty()) {
    if (!std::filesystem::exists(o.config_file)) {
      throw watt::ConfigError("--config", "file '" + o.config_file + "' does not exist");
    }
    try {
      doc = nlohmann::json::parse(watt::read_file(o.config_file));
    } catch (const nlohmann::json::parse_error& e) {
      throw watt::ConfigError("--config", "'" + o.config_file + "' is not valid JSON: " + e.what());
    }
  }
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw watt::ConfigError("--set", "expected KEY=VALUE, got '" + kv + "'");
    watt::apply_override(doc, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) doc["seed"] = *o.seed;
  if (o.threads) doc["threads"] = *o.threads;
  if (o.deterministic) doc["deterministic"] = *o.deterministic;
  if (!o.output_dir.empty()) doc["output_dir"] = o.output_dir;
  if (!o.checkpoint.empty()) doc["checkpoint"] = o.checkpoint;
  return doc.get<watt::RunConfig>();
}

void report(const watt::CommandOutput& out) {
  for (const auto& f : out.files) std::cout << "wrote " << f.string() << '\n';
  std::cout << out.summary.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  watt::configure_allocator();
  CLI::App app{"Weight-average test-time adaptation of a small CLIP-style model"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(watt::library_version()));

  Options o;
  app.add_option("-c,--config", o.config_file, "JSON run configuration");
  app.add_option("--set", o.overrides, "Override a config value, e.g. --set adapt.method.mtwa.L=2 (repeatable)");
  app.add_option("--seed", o.seed, "Root seed");
  app.add_option("--threads", o.threads, "Worker threads for sweeps, tables and landscapes");
  app.add_flag("--deterministic,!--no-deterministic", o.deterministic, "Record zero wall-clock time in results");
  app.add_option("-o,--output-dir", o.output_dir, std::string("Output directory (default: $") + watt::kOutputDirEnv +
                                                      ", then ./watt-out)");
  app.add_option("--checkpoint", o.checkpoint, "Pretrained checkpoint (default: <output-dir>/pretrain/checkpoint.ckpt)");

  struct Command {
    const char* name;
    const char* help;
  };
  const std::vector<Command> commands = {
      {"pretrain", "Contrastive pretraining on the clean training split; writes a checkpoint"},
      {"adapt", "Episodic adaptation on one corrupted split; writes result rows and an adapted checkpoint"},
      {"sweep", "Grid sweep (batch size, template count, schedule, strategy or corruption)"},
      {"landscape", "Loss and error surface over the plane of three template-adapted models"},
      {"table", "Per-template adaptation against their weight average"},
      {"verify", "Run the built-in invariant and oracle suite"},
      {"config", "Print the resolved configuration"},
  };
  for (const auto& c : commands) app.add_subcommand(c.name, c.help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  watt::RunConfig config;
  try {
    config = build_config(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (command == "config") {
      std::cout << nlohmann::json(config).dump(2) << '\n';
    } else if (command == "pretrain") {
      report(watt::cmd_pretrain(config));
    } else if (command == "adapt") {
      report(watt::cmd_adapt(config));
    } else if (command == "sweep") {
      report(watt::cmd_sweep(config));
    } else if (command == "landscape") {
      report(watt::cmd_landscape(config));
    } else if (command == "table") {
      report(watt::cmd_table(config));
    } else if (command == "verify") {
      std::vector<watt::VerifyCheck> checks;
      const auto out = watt::cmd_verify(config, &checks);
      bool ok = true;
      for (const auto& c : checks) {
        std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
        ok = ok && c.passed;
      }
      report(out);
      return ok ? kOk : kVerify;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kOk;
}
