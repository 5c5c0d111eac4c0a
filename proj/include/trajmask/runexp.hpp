#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace trajmask {

/// Recorded in every run manifest next to the file-format versions.
inline constexpr const char* kWorkbenchVersion = "0.1.0";

/// Reads and parses a JSON config. Missing file throws missing-file; parse
/// failures throw config-error with the parser's line/column message.
nlohmann::json load_config_file(const std::string& path);

/// Applies one `section.key=value` override. The value is parsed as JSON
/// when possible and kept as a string otherwise, so `model.k=5` assigns a
/// number and `data.path=runs/d.traj` a string. Dots select nested keys and
/// intermediate objects are created as needed; the schema check afterwards
/// catches paths that do not exist.
void apply_override(nlohmann::json& cfg, const std::string& assignment);

/// Strict schema check over the whole config: unknown keys anywhere throw
/// unknown-key naming the offending path, ill-typed values config-error.
void validate_config(const nlohmann::json& cfg);

/// Hash of (command, resolved config, seed). It suffixes the run directory,
/// so distinct configurations land in distinct directories and rerunning an
/// identical run lands in the same one.
uint64_t run_hash(const std::string& command, const nlohmann::json& cfg,
                  std::optional<uint64_t> seed);

/// A run's reproduction record: the resolved config plus everything needed
/// to re-execute it and check the outputs. `artifacts` maps file names
/// (relative to the manifest's directory) to content hashes; names listed in
/// `volatile_artifacts` carry timing columns and are exempt from bitwise
/// reproduction.
struct Manifest {
  std::string command;
  nlohmann::json config;
  std::optional<uint64_t> seed;
  std::string hash;
  std::map<std::string, std::string> artifacts;
  std::vector<std::string> volatile_artifacts;
  std::map<std::string, std::string> versions;
};

Manifest load_manifest(const std::string& path);

/// What a finished run leaves behind: the directory, the manifest path,
/// artifact name -> path, and human-readable summary lines.
struct RunOutcome {
  std::string dir;
  std::string manifest_path;
  std::map<std::string, std::string> artifacts;
  std::vector<std::string> notes;
};

/// Executes one workbench command against a resolved config: validates the
/// schema, derives the run directory `<out_dir>-<run hash>`, writes the
/// command's artifacts there and a manifest.json describing them. Stochastic
/// commands require a seed; `marginals` (a deterministic forward pass)
/// rejects one. Rerunning the same (command, config, seed) recreates the
/// same directory with bitwise-identical artifacts, modulo the manifest's
/// volatile list.
RunOutcome run_command(const std::string& command, nlohmann::json cfg,
                       std::optional<uint64_t> seed);

/// Human-readable summary of a dataset, checkpoint, or manifest file.
std::string inspect_file(const std::string& path);

}  // namespace trajmask
