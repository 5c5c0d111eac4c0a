// Command-line front end. Every experiment command reads one JSON config
// (overridable with --set key=value), executes against the library, and
// leaves its artifacts plus a manifest.json in a run directory named
// <out_dir>-<run hash>. `inspect` summarizes any produced file.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "trajmask/common.hpp"
#include "trajmask/runexp.hpp"

namespace {

struct CommandArgs {
  CLI::App* sub = nullptr;
  std::string config;
  std::string manifest;
  std::vector<std::string> sets;
  uint64_t seed = 0;
  bool stochastic = false;
};

/// One line per error on stderr, `code: message`, so scripts can parse
/// failures without scraping free-form text.
int fail_line(const std::string& line) {
  std::cerr << line << "\n";
  return 1;
}

std::string single_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ';';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"trajmask: masked trajectory-model workbench"};
  app.require_subcommand(1);

  struct Desc {
    const char* name;
    const char* help;
    bool stochastic;
  };
  static const Desc kCommands[] = {
      {"gen-data", "Generate an expert dataset", true},
      {"train", "Train a model from scratch", true},
      {"finetune", "Continue training from a base checkpoint", true},
      {"eval-loss", "Masked validation loss of checkpoints across tasks", true},
      {"heatmap", "Cross-task loss grid over checkpoints", true},
      {"eval-reward", "Closed-loop return of a checkpoint", true},
      {"rollout", "Dump conditioned episodes to disk", true},
      {"backwards", "Infer steps preceding an observed suffix", true},
      {"marginals", "Future state distributions at a window position", false},
      {"compare-dist", "Trajectory-distribution match against the data", true},
  };

  std::vector<CommandArgs> commands(std::size(kCommands));
  for (size_t i = 0; i < std::size(kCommands); ++i) {
    CommandArgs& c = commands[i];
    c.stochastic = kCommands[i].stochastic;
    c.sub = app.add_subcommand(kCommands[i].name, kCommands[i].help);
    c.sub->add_option("--config", c.config, "JSON config file");
    c.sub->add_option("--from-manifest", c.manifest,
                      "Re-run from a manifest's resolved config (and seed)");
    c.sub->add_option("--set", c.sets, "Override a config field, e.g. --set model.k=5")
        ->type_size(1);
    if (c.stochastic) c.sub->add_option("--seed", c.seed, "Run seed (required)");
  }

  std::string inspect_path;
  CLI::App* inspect = app.add_subcommand("inspect", "Summarize a dataset, checkpoint, or manifest");
  inspect->add_option("path", inspect_path, "File to summarize")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail_line("cli-error: " + single_line(e.what()));
  }

  try {
    if (inspect->parsed()) {
      std::cout << trajmask::inspect_file(inspect_path);
      return 0;
    }
    for (size_t i = 0; i < commands.size(); ++i) {
      CommandArgs& c = commands[i];
      if (!c.sub->parsed()) continue;
      const std::string name = kCommands[i].name;

      nlohmann::json cfg;
      std::optional<uint64_t> seed;
      if (c.stochastic && c.sub->count("--seed") > 0) seed = c.seed;
      if (!c.manifest.empty()) {
        trajmask::require(c.config.empty(), "config-error",
                          "give either --config or --from-manifest, not both");
        trajmask::Manifest m = trajmask::load_manifest(c.manifest);
        trajmask::require(m.command == name, "config-error",
                          "manifest " + c.manifest + " was written by '" + m.command +
                              "', not '" + name + "'");
        cfg = m.config;
        if (!seed.has_value()) seed = m.seed;
      } else {
        trajmask::require(!c.config.empty(), "config-error",
                          name + " needs --config or --from-manifest");
        cfg = trajmask::load_config_file(c.config);
      }
      for (const std::string& assignment : c.sets) trajmask::apply_override(cfg, assignment);

      trajmask::RunOutcome out = trajmask::run_command(name, cfg, seed);
      for (const std::string& note : out.notes) std::cout << note << "\n";
      for (const auto& [artifact, path] : out.artifacts) std::cout << "wrote: " << path << "\n";
      std::cout << "manifest: " << out.manifest_path << "\n";
      return 0;
    }
    return fail_line("cli-error: no command selected");
  } catch (const trajmask::Error& e) {
    return fail_line(single_line(e.what()));
  } catch (const std::exception& e) {
    return fail_line("internal-error: " + single_line(e.what()));
  }
}
