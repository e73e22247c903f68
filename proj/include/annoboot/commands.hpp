#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "annoboot/evalkit.hpp"
#include "annoboot/runconfig.hpp"

namespace annoboot::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kIoError = 3, kNumericError = 4 };

/// Runs `fn`, mapping exceptions to exit codes and printing one diagnostic line to `err`.
int guarded(const std::function<void()>& fn, std::ostream& err);

/// Code version string recorded in run directories.
std::string code_version();

/// Worker count from ANNOBOOT_WORKERS (default 1).
int worker_count();

struct TrainOptions {
  bool resume = false;
  bool force = false;
  /// Stop (with a checkpoint) once this step is reached, as if interrupted.
  std::optional<long> stop_at;
};

/// One evaluation during training, as recorded for sweeps.
struct EvalPoint {
  long step = 0;
  double reward_loss = 0.0;  // mean over steps since the previous evaluation
  double value_loss = 0.0;
  eval::EvalReport report;
};

struct TrainResult {
  long final_step = 0;
  std::vector<EvalPoint> evals;
};

void gen_data(const RunConfig& cfg, const std::filesystem::path& out, bool force);

TrainResult train(const RunConfig& cfg, const std::filesystem::path& run_dir, const TrainOptions& opts);

/// Writes checkpoints/step_<k>/eval_report.json and returns the report.
eval::EvalReport evaluate_checkpoint(const std::filesystem::path& run_dir, long checkpoint);

oracle::OracleReport run_oracle_command(const RunConfig& cfg, const std::optional<std::filesystem::path>& out);

enum class SweepKind { Gamma, Overlap };
SweepKind parse_sweep_kind(const std::string& kind);

/// Trains every setting into out/<setting>/ and writes out/sweep.csv with columns
/// kind,setting,step,metric,value.
void sweep(SweepKind kind, const RunConfig& cfg, const std::filesystem::path& out, bool force, bool parallel);

std::filesystem::path checkpoint_dir(const std::filesystem::path& run_dir, long step);

}  // namespace annoboot::cli
