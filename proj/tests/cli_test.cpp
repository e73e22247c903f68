#include "annoboot/commands.hpp"

#include <gtest/gtest.h>

#include <unistd.h>

#include <fstream>
#include <set>
#include <sstream>

using namespace annoboot;
using namespace annoboot::cli;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json tiny_json() {
  return json::parse(R"({
    "variant": "clip", "seed": 1,
    "data": {"grid": 2, "vocab": 3, "density": 0.7, "scenes": 16, "resolution": 16},
    "model": {"patch": 8, "width": 16, "depth": 1, "heads": 2, "mlp_ratio": 2, "decoder_depth": 1, "embed_dim": 8},
    "train": {"views": 3, "batch_images": 2, "reward_batch": 4, "steps": 8, "warmup": 2,
              "checkpoint_every": 4, "eval_every": 4},
    "eval": {"probe_scenes": 10, "held_out_batches": 1},
    "oracle": {"grid": 2, "scenes": 2},
    "sweep": {"gammas": [0.0, 0.5]}
  })");
}

class TempDir {
 public:
  TempDir() {
    static int n = 0;
    path_ = fs::temp_directory_path() / ("annoboot_cli_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
    fs::remove_all(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

int run(const std::function<void()>& fn, std::string* msg = nullptr) {
  std::ostringstream err;
  const int code = guarded(fn, err);
  if (msg) *msg = err.str();
  return code;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(RunConfig, ResolvedJsonRoundTrips) {
  const auto cfg = parse_run_config(tiny_json());
  const auto j = to_json(cfg);
  EXPECT_EQ(to_json(parse_run_config(j)), j);
  EXPECT_EQ(cfg.train.model.vocab_size, 4);
  EXPECT_EQ(cfg.train.model.backbone.resolution, 16);
  EXPECT_EQ(cfg.train.tau_kind, ad::TauSchedule::Constant);
  auto dino = tiny_json();
  dino["variant"] = "dino";
  EXPECT_EQ(parse_run_config(dino).train.tau_kind, ad::TauSchedule::Cosine);
}

TEST(RunConfig, MissingFieldIsNamed) {
  auto j = tiny_json();
  j.erase("seed");
  std::string msg;
  EXPECT_EQ(run([&] { parse_run_config(j); }, &msg), kConfigError);
  EXPECT_NE(msg.find("'seed'"), std::string::npos);
}

TEST(RunConfig, UnknownFieldsAndAblationsRejected) {
  auto j = tiny_json();
  j["train"]["stpes"] = 3;
  std::string msg;
  EXPECT_EQ(run([&] { parse_run_config(j); }, &msg), kConfigError);
  EXPECT_NE(msg.find("train.stpes"), std::string::npos);
  j = tiny_json();
  j["train"]["ablations"] = {"no_action_tokens", "no_magic"};
  EXPECT_EQ(run([&] { parse_run_config(j); }), kConfigError);
  j = tiny_json();
  j["train"]["ablations"] = {"no_action_tokens", "no_propagation"};
  const auto cfg = parse_run_config(j);
  EXPECT_TRUE(cfg.train.ablations.no_action_tokens && cfg.train.ablations.no_propagation);
}

TEST(RunConfig, WrongTypeAndBadValues) {
  auto j = tiny_json();
  j["train"]["gamma"] = "half";
  EXPECT_EQ(run([&] { parse_run_config(j); }), kConfigError);
  j = tiny_json();
  j["train"]["gamma"] = 1.0;
  EXPECT_EQ(run([&] { parse_run_config(j); }), kConfigError);
  j = tiny_json();
  j["variant"] = "byol";
  EXPECT_EQ(run([&] { parse_run_config(j); }), kConfigError);
}

TEST(RunConfig, LatticeSizesFixTheWindows) {
  auto j = tiny_json();
  j["train"]["lattice_sizes"] = {1, 2};
  EXPECT_EQ(parse_run_config(j).train.fixed_windows.size(), 10u);
}

TEST(Commands, GenDataThenTrainFromDirectory) {
  TempDir tmp;
  auto cfg = parse_run_config(tiny_json());
  ASSERT_EQ(run([&] { gen_data(cfg, tmp.path() / "data", false); }), kOk);
  EXPECT_TRUE(fs::exists(tmp.path() / "data" / "manifest.json"));
  EXPECT_EQ(run([&] { gen_data(cfg, tmp.path() / "data", false); }), kConfigError);
  EXPECT_EQ(run([&] { gen_data(cfg, tmp.path() / "data", true); }), kOk);

  cfg.data.dir = (tmp.path() / "data").string();
  EXPECT_EQ(load_scenes(cfg), load_scenes(parse_run_config(tiny_json())));
  cfg.data.scene.vocab = 5;
  EXPECT_EQ(run([&] { load_scenes(cfg); }), kConfigError);
  cfg.data.dir = (tmp.path() / "nowhere").string();
  EXPECT_EQ(run([&] { load_scenes(cfg); }), kIoError);
}

TEST(Commands, TrainWritesReproducibilityRecord) {
  TempDir tmp;
  const auto cfg = parse_run_config(tiny_json());
  TrainResult res;
  ASSERT_EQ(run([&] { res = train(cfg, tmp.path(), {}); }), kOk);
  EXPECT_EQ(res.final_step, 8);
  EXPECT_EQ(res.evals.size(), 2u);
  const auto meta = json::parse(slurp(tmp.path() / "run.json"));
  for (const char* k : {"seed", "code_version", "workers"}) EXPECT_TRUE(meta.contains(k)) << k;
  EXPECT_EQ(json::parse(slurp(tmp.path() / "config.json")), to_json(cfg));
  std::ifstream metrics(tmp.path() / "metrics.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(metrics, line)) EXPECT_EQ(json::parse(line)["step"], n++);
  EXPECT_EQ(n, 8);
  EXPECT_TRUE(fs::exists(checkpoint_dir(tmp.path(), 4) / "checkpoint.bin"));
}

TEST(Commands, ResumeIsBitIdentical) {
  TempDir a, b;
  const auto cfg = parse_run_config(tiny_json());
  ASSERT_EQ(run([&] { train(cfg, a.path(), {}); }), kOk);
  TrainOptions stop;
  stop.stop_at = 5;
  ASSERT_EQ(run([&] { train(cfg, b.path(), stop); }), kOk);
  TrainOptions resume;
  resume.resume = true;
  ASSERT_EQ(run([&] { train(cfg, b.path(), resume); }), kOk);
  EXPECT_EQ(slurp(checkpoint_dir(a.path(), 8) / "checkpoint.bin"), slurp(checkpoint_dir(b.path(), 8) / "checkpoint.bin"));

  auto other = cfg;
  other.train.lr = 5e-4;
  EXPECT_EQ(run([&] { train(other, b.path(), resume); }), kConfigError);
}

TEST(Commands, EvalCheckpointErrorsAndDeterminism) {
  TempDir tmp;
  const auto cfg = parse_run_config(tiny_json());
  ASSERT_EQ(run([&] { train(cfg, tmp.path(), {}); }), kOk);
  std::string first, second;
  ASSERT_EQ(run([&] { first = evaluate_checkpoint(tmp.path(), 8).to_json(); }), kOk);
  ASSERT_EQ(run([&] { second = evaluate_checkpoint(tmp.path(), 8).to_json(); }), kOk);
  EXPECT_EQ(first, second);
  const auto j = json::parse(slurp(checkpoint_dir(tmp.path(), 8) / "eval_report.json"));
  for (const char* k : {"probes", "buckets", "grad_cosine", "oracle_gap", "step"}) EXPECT_TRUE(j.contains(k)) << k;

  EXPECT_EQ(run([&] { evaluate_checkpoint(tmp.path(), 3); }), kConfigError);
  std::ofstream(checkpoint_dir(tmp.path(), 4) / "checkpoint.bin", std::ios::trunc) << "garbage";
  EXPECT_EQ(run([&] { evaluate_checkpoint(tmp.path(), 4); }), kIoError);
}

TEST(Commands, OracleReportAndGammaOne) {
  TempDir tmp;
  auto cfg = parse_run_config(tiny_json());
  oracle::OracleReport rep;
  ASSERT_EQ(run([&] { rep = run_oracle_command(cfg, tmp.path() / "oracle.json"); }), kOk);
  EXPECT_LE(rep.residual, 1e-10);
  EXPECT_LE(rep.contraction_max_ratio, cfg.oracle.gamma + 1e-9);
  const auto j = json::parse(slurp(tmp.path() / "oracle.json"));
  for (const char* k : {"residual", "iterations", "contraction_max_ratio", "td_distance"}) EXPECT_TRUE(j.contains(k));
  auto bad = tiny_json();
  bad["oracle"]["gamma"] = 1.0;
  EXPECT_EQ(run([&] { parse_run_config(bad); }), kConfigError);
}

TEST(Commands, GammaSweepEmitsEverySetting) {
  TempDir tmp;
  const auto cfg = parse_run_config(tiny_json());
  ASSERT_EQ(run([&] { sweep(SweepKind::Gamma, cfg, tmp.path(), false, false); }), kOk);
  std::ifstream in(tmp.path() / "sweep.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "kind,setting,step,metric,value");
  std::set<std::string> settings;
  while (std::getline(in, line)) settings.insert(line.substr(6, line.find(',', 6) - 6));
  EXPECT_EQ(settings, (std::set<std::string>{"gamma_0", "gamma_0.5"}));
}

TEST(Commands, OverlapSweepMarksUnsatisfiableBands) {
  TempDir tmp;
  auto j = tiny_json();
  j["train"]["max_rejections"] = 50;
  j["train"]["bootstrap_crop"] = {{"scale_min", 0.05}, {"scale_max", 0.06}};
  j["sweep"]["overlap_bands"] = {{0.0, 0.1}, {0.9, 1.0}};
  const auto cfg = parse_run_config(j);
  ASSERT_EQ(run([&] { sweep(SweepKind::Overlap, cfg, tmp.path(), false, true); }), kOk);
  const auto csv = slurp(tmp.path() / "sweep.csv");
  EXPECT_NE(csv.find("overlap,iou_0.90_1.00,0,status,unsatisfiable"), std::string::npos);
  EXPECT_NE(csv.find("overlap,iou_0.00_0.10,8,realized_mean_iou,"), std::string::npos);
}

TEST(Commands, NonFiniteLossExitsNumeric) {
  TempDir tmp;
  auto cfg = parse_run_config(tiny_json());
  cfg.train.lr = 1e30;
  cfg.train.clip_norm = 0.0;
  cfg.train.steps = 40;
  EXPECT_EQ(run([&] { train(cfg, tmp.path(), {}); }), kNumericError);
}
