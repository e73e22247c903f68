#include <CLI11.hpp>

#include <iostream>

#include "annoboot/commands.hpp"

namespace cli = annoboot::cli;

int main(int argc, char** argv) {
  CLI::App app{"annotation bootstrapping on synthetic glyph scenes"};
  app.require_subcommand(1);

  std::string config, out, run, kind;
  bool force = false, resume = false, parallel = false;
  long checkpoint = 0, stop_at = -1;

  auto* gen = app.add_subcommand("gen-data", "generate a scene dataset");
  gen->add_option("--config", config, "run config JSON")->required();
  gen->add_option("--out", out, "dataset directory")->required();
  gen->add_flag("--force", force, "overwrite an existing output");

  auto* train = app.add_subcommand("train", "train online and EMA networks");
  train->add_option("--config", config, "run config JSON")->required();
  train->add_option("--out", out, "run directory")->required();
  train->add_flag("--resume", resume, "continue from the latest checkpoint in --out");
  train->add_flag("--force", force, "overwrite an existing run");
  train->add_option("--stop-at", stop_at, "stop after this step (checkpointed), as if interrupted");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--run", run, "run directory")->required();
  ev->add_option("--checkpoint", checkpoint, "checkpoint step")->required();

  auto* orc = app.add_subcommand("oracle", "value iteration, contraction and TD certification");
  orc->add_option("--config", config, "run config JSON")->required();
  orc->add_option("--out", out, "report path (stdout only when omitted)");

  auto* sw = app.add_subcommand("sweep", "gamma or overlap sweep");
  sw->add_option("--kind", kind, "gamma|overlap")->required();
  sw->add_option("--config", config, "run config JSON")->required();
  sw->add_option("--out", out, "sweep directory")->required();
  sw->add_flag("--force", force, "overwrite an existing sweep");
  sw->add_flag("--parallel", parallel, "run settings concurrently (ANNOBOOT_WORKERS at a time)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::kConfigError;
  }

  return cli::guarded(
      [&] {
        if (*gen) {
          cli::gen_data(cli::load_run_config(config), out, force);
        } else if (*train) {
          cli::TrainOptions opts;
          opts.resume = resume;
          opts.force = force;
          if (stop_at >= 0) opts.stop_at = stop_at;
          const auto res = cli::train(cli::load_run_config(config), out, opts);
          std::cout << "trained to step " << res.final_step << '\n';
        } else if (*ev) {
          std::cout << cli::evaluate_checkpoint(run, checkpoint).to_json() << '\n';
        } else if (*orc) {
          const auto cfg = cli::load_run_config(config);
          std::cout << cli::run_oracle_command(cfg, out.empty() ? std::nullopt : std::optional<std::filesystem::path>(out))
                           .to_json()
                    << '\n';
        } else if (*sw) {
          const auto k = cli::parse_sweep_kind(kind);
          cli::sweep(k, cli::load_run_config(config), out, force, parallel);
          std::cout << "wrote " << (std::filesystem::path(out) / "sweep.csv").string() << '\n';
        }
      },
      std::cerr);
}
