#pragma once

// Manifest-driven commands behind the flownav executable. Every command
// resolves its settings as flag > manifest > default, writes into
// <out>/<run_id>/ and copies the manifest there verbatim.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "flownav/manifest.hpp"
#include "flownav/model.hpp"
#include "flownav/tasks.hpp"
#include "flownav/trainer.hpp"

namespace flownav::cli {

struct CommonOptions {
  std::filesystem::path manifest;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::optional<std::string> run_id;
  std::size_t jobs = 1;
  std::vector<std::string> overrides;  // "key=value", applied over the manifest
};

// Every key a run manifest may contain.
const std::vector<std::string>& manifest_keys();

// Everything a command needs, resolved from a manifest plus overrides.
struct RunSetup {
  KeyValueFile manifest;
  std::filesystem::path manifest_path;
  std::filesystem::path run_dir;
  tasks::TaskSpec task;
  Tokenizer tokenizer = tasks::bundled_tokenizer();
  model::ModelConfig model_config;
  trainer::TrainConfig train;
  trainer::PretrainConfig pretrain;
  std::optional<std::filesystem::path> checkpoint;
  std::vector<std::uint64_t> seeds;
  std::vector<std::size_t> positions;
  std::size_t probe_prompts = 20;
};

// Parses and validates; creates nothing on disk. `command` names the run id.
RunSetup resolve(const CommonOptions& opts, const std::string& command);

// Output root: --out, else $FLOWNAV_OUT, else ./runs.
std::filesystem::path output_root(const CommonOptions& opts);

// Pretrained backbone from the manifest's checkpoint, or pretrained in-process.
model::Model load_backbone(const RunSetup& setup);

std::filesystem::path cmd_pretrain(const CommonOptions& opts, std::ostream& log);
std::filesystem::path cmd_train(const CommonOptions& opts, std::ostream& log);
// Re-evaluates a trained checkpoint on the test split its metadata names.
double cmd_eval(const CommonOptions& opts, const std::filesystem::path& checkpoint, std::ostream& log);
std::filesystem::path cmd_sweep(const CommonOptions& opts, const std::optional<std::vector<std::size_t>>& positions,
                                std::ostream& log);
std::filesystem::path cmd_ablate(const CommonOptions& opts, std::ostream& log);
std::filesystem::path cmd_probe(const CommonOptions& opts, const std::filesystem::path& checkpoint, std::ostream& log);
// Aggregates every result.json below run_dir into leaderboard.csv,
// summary.csv (mean ± stdev per method, task, k) and per-epoch series files.
std::filesystem::path cmd_report(const std::filesystem::path& run_dir, std::ostream& log);

// 0 success, 2 configuration, 3 data, 4 numeric, 1 anything else.
int exit_code_for(const std::exception& e);

}  // namespace flownav::cli
