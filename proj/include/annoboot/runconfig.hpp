#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "annoboot/bootstrap.hpp"
#include "annoboot/evalkit.hpp"
#include "annoboot/oracle.hpp"
#include "annoboot/synthdata.hpp"

namespace annoboot::cli {

/// Invalid or incomplete configuration (exit code 2).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Filesystem or format failure (exit code 3).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  synth::SceneConfig scene;
  int scenes = 256;
  int resolution = 32;
  /// Dataset directory written by gen-data; empty means generate in memory from `scene`.
  std::string dir;
};

struct EvalSettings {
  std::uint64_t seed = 0;
  int held_out_batches = 2;
  int probe_scenes = 50;
  eval::ProbeDataConfig probe;
  eval::ProbeConfig fit;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  bootstrap::TrainConfig train;
  /// Training views restricted to the oracle lattice (windows of these cell sizes).
  std::vector<int> lattice_sizes;
  long checkpoint_every = 0;  // 0: only the final step
  long eval_every = 0;        // 0: no evaluation during training
  EvalSettings eval;
  oracle::OracleConfig oracle;
  std::vector<double> sweep_gammas{0.0, 0.25, 0.5, 0.75, 0.9};
  std::vector<std::pair<double, double>> overlap_bands{{0.0, 0.1}, {0.1, 0.3}, {0.3, 0.6}, {0.6, 1.0}};
};

/// Strict parse: required fields are `variant`, `seed` and `data`; unknown fields are
/// rejected. Errors name the offending field path.
RunConfig parse_run_config(const nlohmann::json& j);

/// Fully resolved configuration (every default spelled out); parses back to the same config.
nlohmann::json to_json(const RunConfig& cfg);

RunConfig load_run_config(const std::filesystem::path& path);

/// Scenes for the configured data source (dataset directory or in-memory generation).
std::vector<synth::Scene> load_scenes(const RunConfig& cfg);

/// In-memory corpus: scene i is drawn from derive_seed(seed, i, stream).
std::vector<synth::Scene> generate_scenes(std::uint64_t seed, const synth::SceneConfig& scene, int count,
                                          std::uint64_t stream);

/// Held-out probe scenes (disjoint seed stream from the training corpus).
std::vector<synth::Scene> probe_scenes(const RunConfig& cfg);

/// Lattice windows for the data grid, or empty when the lattice is disabled.
std::vector<geometry::BBox> lattice(const RunConfig& cfg);

}  // namespace annoboot::cli
