#include "annoboot/commands.hpp"

#include <cstdlib>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include "annoboot/blob.hpp"
#include "annoboot/rng.hpp"

#ifndef ANNOBOOT_VERSION
#define ANNOBOOT_VERSION "unknown"
#endif

namespace annoboot::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kOverlapProbeStream = 0x0FE1;

void prepare_out(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !(fs::is_directory(dir) && fs::is_empty(dir))) {
    if (!force) throw ConfigError("output " + dir.string() + " already exists; pass --force to overwrite");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void write_run_files(const RunConfig& cfg, const fs::path& dir, const std::string& command) {
  write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
  const json run = {{"command", command},
                    {"seed", cfg.seed},
                    {"code_version", code_version()},
                    {"workers", worker_count()}};
  write_text(dir / "run.json", run.dump(2) + "\n");
}

std::optional<long> latest_checkpoint(const fs::path& run_dir) {
  const auto dir = run_dir / "checkpoints";
  if (!fs::exists(dir)) return std::nullopt;
  std::optional<long> best;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("step_", 0) != 0 || !fs::exists(e.path() / "checkpoint.json")) continue;
    try {
      const long s = std::stol(name.substr(5));
      if (!best || s > *best) best = s;
    } catch (const std::exception&) {
    }
  }
  return best;
}

/// Keeps metrics lines for steps before `step`.
void truncate_metrics(const fs::path& path, long step) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      if (json::parse(line).at("step").get<long>() < step) keep.push_back(line);
    } catch (const json::exception&) {
      break;
    }
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

void load_into(bootstrap::Trainer& trainer, const fs::path& dir) {
  try {
    trainer.load_checkpoint(dir);
  } catch (const std::exception& e) {
    throw IoError("corrupt checkpoint " + dir.string() + ": " + e.what());
  }
}

/// Oracle tables for the lattice the model was trained on (CLIP-style runs only).
struct OracleBundle {
  oracle::DiscreteMdp mdp;
  oracle::ObservationQ obs_q;
};

std::unique_ptr<OracleBundle> oracle_bundle(const RunConfig& cfg, const std::vector<synth::Scene>& scenes) {
  if (cfg.lattice_sizes.empty() || cfg.train.model.variant != models::Variant::Clip) return nullptr;
  auto b = std::make_unique<OracleBundle>();
  b->mdp = oracle::build_lattice_mdp(scenes, lattice(cfg));
  const auto qstar = oracle::value_iteration(b->mdp, cfg.train.gamma, 1e-10).q;
  b->obs_q = oracle::observation_q(b->mdp, qstar, oracle::render_observations(b->mdp, cfg.data.resolution));
  return b;
}

eval::EvalConfig eval_config(const RunConfig& cfg, const OracleBundle* bundle) {
  eval::EvalConfig ec;
  ec.seed = cfg.eval.seed;
  ec.probe_scenes = probe_scenes(cfg);
  ec.probe = cfg.eval.probe;
  ec.probe_fit = cfg.eval.fit;
  ec.held_out_batches = cfg.eval.held_out_batches;
  if (bundle) {
    ec.mdp = &bundle->mdp;
    ec.obs_q = &bundle->obs_q;
  }
  return ec;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

std::string band_label(double lo, double hi) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << "iou_" << lo << "_" << hi;
  return os.str();
}

std::vector<std::vector<std::string>> eval_rows(const std::string& kind, const std::string& setting,
                                                const TrainResult& res) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& p : res.evals) {
    const auto step = std::to_string(p.step);
    auto add = [&](const std::string& metric, double v) { rows.push_back({kind, setting, step, metric, fmt(v)}); };
    add("reward_loss", p.reward_loss);
    add("value_loss", p.value_loss);
    for (const auto& probe : p.report.probes) add("probe_" + probe.task, probe.accuracy);
    for (const auto& b : p.report.buckets) {
      if (b.accuracy()) add("bucket_accuracy_" + fmt(b.lo) + "_" + fmt(b.hi), *b.accuracy());
    }
    if (p.report.grad_cosine.value) add("grad_cosine", *p.report.grad_cosine.value);
    if (p.report.oracle_gap) add("oracle_gap_mean", p.report.oracle_gap->mean_abs);
  }
  return rows;
}

}  // namespace

int guarded(const std::function<void()>& fn, std::ostream& err) {
  try {
    fn();
    return kOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIoError;
  } catch (const bootstrap::NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumericError;
  } catch (const ad::NonFiniteError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumericError;
  } catch (const blob::BlobError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIoError;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

std::string code_version() { return ANNOBOOT_VERSION; }

int worker_count() {
  if (const char* v = std::getenv("ANNOBOOT_WORKERS")) {
    try {
      const int n = std::stoi(v);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
  }
  return 1;
}

fs::path checkpoint_dir(const fs::path& run_dir, long step) {
  std::ostringstream os;
  os << "step_" << std::setw(7) << std::setfill('0') << step;
  return run_dir / "checkpoints" / os.str();
}

void gen_data(const RunConfig& cfg, const fs::path& out, bool force) {
  prepare_out(out, force);
  synth::Dataset d;
  d.grid = cfg.data.scene.grid;
  d.vocab = cfg.data.scene.vocab;
  d.resolution = cfg.data.resolution;
  d.cell_px = cfg.data.scene.cell_px;
  RunConfig generated = cfg;
  generated.data.dir.clear();
  d.scenes = load_scenes(generated);
  try {
    synth::write_dataset(out, d);
  } catch (const blob::BlobError& e) {
    throw IoError(e.what());
  }
  write_run_files(cfg, out, "gen-data");
}

TrainResult train(const RunConfig& cfg, const fs::path& run_dir, const TrainOptions& opts) {
  std::optional<long> resume_from;
  if (opts.resume && fs::exists(run_dir / "config.json")) {
    const auto saved = load_run_config(run_dir / "config.json");
    if (to_json(saved) != to_json(cfg)) throw ConfigError("config differs from the one saved in " + run_dir.string());
    resume_from = latest_checkpoint(run_dir);
  } else {
    prepare_out(run_dir, opts.force);
    write_run_files(cfg, run_dir, "train");
  }

  const auto scenes = load_scenes(cfg);
  bootstrap::Trainer trainer(cfg.train, scenes);
  if (resume_from) load_into(trainer, checkpoint_dir(run_dir, *resume_from));
  const auto metrics_path = run_dir / "metrics.jsonl";
  truncate_metrics(metrics_path, trainer.current_step());
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw IoError("cannot write " + metrics_path.string());

  const auto bundle = cfg.eval_every > 0 ? oracle_bundle(cfg, scenes) : nullptr;
  const auto ec = cfg.eval_every > 0 ? eval_config(cfg, bundle.get()) : eval::EvalConfig{};
  TrainResult res;
  double reward_sum = 0.0, value_sum = 0.0;
  long since_eval = 0;
  const long total = cfg.train.steps;
  while (trainer.current_step() < total) {
    if (opts.stop_at && trainer.current_step() >= *opts.stop_at) break;
    const auto m = trainer.step();
    metrics << m.to_json() << '\n' << std::flush;
    reward_sum += m.reward_loss;
    value_sum += m.value_loss;
    ++since_eval;
    const long s = trainer.current_step();
    const bool last = s == total || (opts.stop_at && s == *opts.stop_at);
    if ((cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0) || last) {
      trainer.save_checkpoint(checkpoint_dir(run_dir, s));
    }
    if (cfg.eval_every > 0 && (s % cfg.eval_every == 0 || s == total)) {
      EvalPoint p;
      p.step = s;
      p.reward_loss = reward_sum / static_cast<double>(since_eval);
      p.value_loss = value_sum / static_cast<double>(since_eval);
      p.report = eval::evaluate(trainer, ec);
      fs::create_directories(run_dir / "evals");
      write_text(run_dir / "evals" / ("step_" + std::to_string(s) + ".json"), p.report.to_json() + "\n");
      res.evals.push_back(std::move(p));
      reward_sum = value_sum = 0.0;
      since_eval = 0;
    }
  }
  if (!metrics) throw IoError("failed writing " + metrics_path.string());
  res.final_step = trainer.current_step();
  return res;
}

eval::EvalReport evaluate_checkpoint(const fs::path& run_dir, long checkpoint) {
  const auto cfg = load_run_config(run_dir / "config.json");
  const auto dir = checkpoint_dir(run_dir, checkpoint);
  if (!fs::exists(dir / "checkpoint.json")) {
    throw ConfigError("checkpoint " + std::to_string(checkpoint) + " not found in " + run_dir.string());
  }
  const auto scenes = load_scenes(cfg);
  bootstrap::Trainer trainer(cfg.train, scenes);
  load_into(trainer, dir);
  const auto bundle = oracle_bundle(cfg, scenes);
  const auto report = eval::evaluate(trainer, eval_config(cfg, bundle.get()));
  write_text(dir / "eval_report.json", report.to_json() + "\n");
  return report;
}

oracle::OracleReport run_oracle_command(const RunConfig& cfg, const std::optional<fs::path>& out) {
  const auto rep = oracle::run_oracle(cfg.oracle);
  if (out) {
    if (out->has_parent_path()) fs::create_directories(out->parent_path());
    write_text(*out, rep.to_json() + "\n");
  }
  return rep;
}

SweepKind parse_sweep_kind(const std::string& kind) {
  if (kind == "gamma") return SweepKind::Gamma;
  if (kind == "overlap") return SweepKind::Overlap;
  throw ConfigError("unknown sweep kind '" + kind + "' (expected gamma|overlap)");
}

void sweep(SweepKind kind, const RunConfig& cfg, const fs::path& out, bool force, bool parallel) {
  prepare_out(out, force);
  write_run_files(cfg, out, kind == SweepKind::Gamma ? "sweep gamma" : "sweep overlap");
  RunConfig base = cfg;
  if (base.eval_every == 0) base.eval_every = base.train.steps;

  struct Setting {
    std::string label;
    RunConfig cfg;
    bool satisfiable = true;
  };
  std::vector<Setting> settings;
  const std::string kind_name = kind == SweepKind::Gamma ? "gamma" : "overlap";
  if (kind == SweepKind::Gamma) {
    for (double g : base.sweep_gammas) {
      Setting s{"gamma_" + fmt(g), base};
      s.cfg.train.gamma = g;
      try {
        bootstrap::validate(s.cfg.train);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("sweep gamma ") + fmt(g) + ": " + e.what());
      }
      settings.push_back(std::move(s));
    }
  } else {
    if (!base.lattice_sizes.empty()) throw ConfigError("overlap sweep samples free crops; remove train.lattice_sizes");
    for (const auto& [lo, hi] : base.overlap_bands) {
      Setting s{band_label(lo, hi), base};
      s.cfg.train.pair_iou_band = std::make_pair(lo, hi);
      s.cfg.train.views = 2;
      Rng rng(derive_seed(cfg.seed, 0, kOverlapProbeStream));
      s.satisfiable = bootstrap::sample_pair_in_band(rng, s.cfg.train.bootstrap_crop, lo, hi,
                                                     s.cfg.train.max_rejections)
                          .has_value();
      settings.push_back(std::move(s));
    }
  }

  auto run_one = [&](const Setting& s) {
    std::vector<std::vector<std::string>> rows;
    if (!s.satisfiable) {
      rows.push_back({kind_name, s.label, "0", "status", "unsatisfiable"});
      return rows;
    }
    TrainResult res;
    try {
      res = train(s.cfg, out / s.label, TrainOptions{});
    } catch (const bootstrap::TrainConfigError& e) {
      if (kind != SweepKind::Overlap) throw;
      rows.push_back({kind_name, s.label, "0", "status", "unsatisfiable"});
      return rows;
    }
    rows = eval_rows(kind_name, s.label, res);
    if (kind == SweepKind::Overlap) {
      bootstrap::Trainer replay(s.cfg.train, load_scenes(s.cfg));
      double sum = 0.0;
      std::size_t count = 0;
      for (long step = 0; step < s.cfg.train.steps; ++step) {
        const auto tb = replay.transitions_at(step);
        for (std::size_t b = 0; b < static_cast<std::size_t>(tb.images); ++b) {
          sum += geometry::iou(tb.crops[2 * b].box, tb.crops[2 * b + 1].box);
          ++count;
        }
      }
      rows.push_back({kind_name, s.label, std::to_string(res.final_step), "realized_mean_iou",
                      fmt(sum / static_cast<double>(count))});
    }
    return rows;
  };

  std::vector<std::vector<std::vector<std::string>>> per_setting(settings.size());
  if (parallel) {
    const auto workers = static_cast<std::size_t>(worker_count());
    for (std::size_t start = 0; start < settings.size(); start += workers) {
      std::vector<std::future<std::vector<std::vector<std::string>>>> jobs;
      for (std::size_t i = start; i < std::min(settings.size(), start + workers); ++i) {
        jobs.push_back(std::async(std::launch::async, run_one, std::cref(settings[i])));
      }
      for (std::size_t i = 0; i < jobs.size(); ++i) per_setting[start + i] = jobs[i].get();
    }
  } else {
    for (std::size_t i = 0; i < settings.size(); ++i) per_setting[i] = run_one(settings[i]);
  }
  std::vector<std::vector<std::string>> rows;
  for (auto& r : per_setting) rows.insert(rows.end(), r.begin(), r.end());
  eval::write_csv(out / "sweep.csv", {"kind", "setting", "step", "metric", "value"}, rows);
}

}  // namespace annoboot::cli
