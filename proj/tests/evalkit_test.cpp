#include "annoboot/evalkit.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

using namespace annoboot;
using namespace annoboot::eval;

namespace {

std::vector<synth::Scene> scenes(int n, int grid = 2, int vocab = 3) {
  std::vector<synth::Scene> out;
  for (int i = 0; i < n; ++i) out.push_back(synth::generate_scene(90 + i, synth::SceneConfig{grid, vocab, 0.7, 8}, i));
  return out;
}

bootstrap::TrainConfig tiny_config(models::Variant v = models::Variant::Clip) {
  bootstrap::TrainConfig cfg;
  cfg.model.variant = v;
  cfg.model.backbone = models::BackboneConfig{8, 16, 1, 2, 16, 2};
  cfg.model.decoder_depth = 1;
  cfg.model.embed_dim = 8;
  cfg.model.vocab_size = 4;
  cfg.model.prototypes = 6;
  cfg.views = 3;
  cfg.batch_images = 2;
  cfg.reward_batch = 4;
  cfg.warmup = 2;
  cfg.steps = 20;
  cfg.seed = 13;
  return cfg;
}

struct Fixture {
  std::vector<double> x;
  std::vector<int> y;
  std::vector<bool> test;
  std::size_t dim = 0;
};

Fixture read_fixture() {
  std::ifstream in(std::string(ANNOBOOT_TEST_DATA) + "/probe_fixture.csv");
  Fixture f;
  std::string line;
  std::getline(in, line);
  f.dim = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) - 1;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    for (std::size_t j = 0; j < f.dim; ++j) {
      std::getline(ss, cell, ',');
      f.x.push_back(std::stod(cell));
    }
    std::getline(ss, cell, ',');
    f.y.push_back(std::stoi(cell));
    std::getline(ss, cell, ',');
    f.test.push_back(cell == "1");
  }
  return f;
}

}  // namespace

TEST(LinearProbe, OneHotFeaturesAreSeparable) {
  std::vector<double> x;
  std::vector<int> y;
  std::vector<bool> test;
  for (int i = 0; i < 60; ++i) {
    const int c = i % 3;
    for (int j = 0; j < 3; ++j) x.push_back(j == c ? 1.0 : 0.0);
    y.push_back(c);
    test.push_back(i % 4 == 0);
  }
  const auto rep = linear_probe("onehot", x, 3, y, test);
  EXPECT_DOUBLE_EQ(rep.accuracy, 1.0);
  EXPECT_EQ(rep.samples, 15u);
  EXPECT_LE(rep.grad_norm, 1e-6);
}

TEST(LinearProbe, IndependentLabelsAtChance) {
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    std::vector<double> x;
    std::vector<int> y;
    std::vector<bool> test;
    for (int i = 0; i < 2000; ++i) {
      for (int j = 0; j < 4; ++j) x.push_back(rng.normal());
      y.push_back(i % 2);
      test.push_back(i % 2 == 0 ? i % 4 == 0 : i % 4 == 1);
    }
    total += linear_probe("chance", x, 4, y, test).accuracy;
  }
  EXPECT_NEAR(total / 5.0, 0.5, 0.05);
}

TEST(LinearProbe, MatchesReferenceFit) {
  const auto f = read_fixture();
  std::ifstream in(std::string(ANNOBOOT_TEST_DATA) + "/probe_fixture_expected.json");
  const auto expected = nlohmann::json::parse(in);
  ProbeConfig cfg;
  cfg.l2 = expected["l2"].get<double>();
  const auto rep = linear_probe("fixture", f.x, f.dim, f.y, f.test, cfg);
  EXPECT_NEAR(rep.accuracy, expected["accuracy"].get<double>(), 0.005);
  EXPECT_LE(rep.grad_norm, 1e-6);

  std::vector<double> tx;
  std::vector<int> ty;
  for (std::size_t i = 0; i < f.y.size(); ++i) {
    if (f.test[i]) continue;
    tx.insert(tx.end(), f.x.begin() + static_cast<std::ptrdiff_t>(i * f.dim), f.x.begin() + static_cast<std::ptrdiff_t>((i + 1) * f.dim));
    ty.push_back(f.y[i]);
  }
  const auto fit = fit_logistic(tx, f.dim, ty, cfg);
  EXPECT_NEAR(fit.loss, expected["train_loss"].get<double>(), 1e-8);
  const auto preds = expected["predictions"].get<std::vector<int>>();
  std::size_t agree = 0;
  for (std::size_t i = 0; i < f.y.size(); ++i) {
    if (fit.predict(std::span<const double>(f.x).subspan(i * f.dim, f.dim)) == preds[i]) ++agree;
  }
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(preds.size()), 0.995);
}

TEST(LinearProbe, RejectsSingleClass) {
  const std::vector<double> x{0.0, 1.0, 2.0};
  const std::vector<int> y{1, 1, 1};
  EXPECT_THROW(linear_probe("one", x, 1, y, std::vector<bool>{false, false, true}), EvalError);
}

TEST(ProbeData, OffsetLabelsReadTheRightCell) {
  const auto sc = scenes(6, 3, 4);
  ProbeDataConfig cfg;
  cfg.offset_dy = 1;
  cfg.offset_dx = 0;
  const auto data = probe_data(ProbeTask::GlyphAtOffset, sc, 16, 0, cfg);
  ASSERT_EQ(data.views.size(), 6u * 4u);
  for (std::size_t i = 0; i < data.views.size(); ++i) {
    const auto& s = sc[i / 4];
    const int r = static_cast<int>(i % 4) / 2, c = static_cast<int>(i % 4) % 2;
    const int glyph = s.at(r + 1, c);
    EXPECT_EQ(data.labels[i], glyph == synth::kEmpty ? s.background_index() : glyph);
    EXPECT_EQ(data.is_test[i], i / 4 == 0 || i / 4 == 5);
  }
}

TEST(ProbeData, OffsetValueFeaturesFollowTheAction) {
  const auto sc = scenes(2, 3, 4);
  const auto data = probe_data(ProbeTask::GlyphAtOffset, sc, 16, 0);
  const models::QModel model(tiny_config().model, 7);
  ProbeDataConfig right, below;
  below.offset_dy = 1;
  below.offset_dx = 0;
  const auto a = offset_value_features(model, data.views, right);
  EXPECT_EQ(a.size(), data.views.size() * 8u);
  EXPECT_NE(a, offset_value_features(model, data.views, below));
  EXPECT_EQ(offset_value_features(model, data.views, right, true),
            offset_value_features(model, data.views, below, true));
}

TEST(ProbeData, DominantLabelIsDistributionArgmax) {
  const auto sc = scenes(3);
  const auto data = probe_data(ProbeTask::DominantGlyph, sc, 16, 4);
  ASSERT_EQ(data.views.size(), 12u);
  for (std::size_t i = 0; i < data.views.size(); ++i) {
    const auto p = synth::true_annotation_dist(sc[i / 4], data.views[i].box);
    EXPECT_EQ(data.labels[i], static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
  }
}

TEST(GradCosine, ScalingAndNegation) {
  models::QModel model(tiny_config().model, 3);
  const auto sc = scenes(2);
  std::vector<synth::View> views;
  for (const auto& s : sc) views.push_back(synth::render_view(s, {0, 0, 1, 1}, 16));
  const auto px = models::stack_views(views);
  auto base = [&] { return ad::sum_all(ad::mul(model.encode(px).features, model.encode(px).features)); };
  const auto names = model.backbone_parameter_names();
  auto& params = model.params();
  EXPECT_NEAR(*grad_cosine(params, names, base, [&] { return ad::scale(base(), 2.0f); }).value, 1.0, 1e-6);
  EXPECT_NEAR(*grad_cosine(params, names, base, [&] { return ad::scale(base(), -1.0f); }).value, -1.0, 1e-6);
  const auto other = [&] { return ad::mean_all(model.encode(px).embedding); };
  const auto c1 = grad_cosine(params, names, base, other);
  const auto c2 = grad_cosine(params, names, [&] { return ad::scale(base(), 7.0f); }, other);
  ASSERT_TRUE(c1.value && c2.value);
  EXPECT_NEAR(*c1.value, *c2.value, 1e-6);
}

TEST(GradCosine, ZeroGradientReportsNull) {
  models::QModel model(tiny_config().model, 3);
  const auto names = model.backbone_parameter_names();
  const auto res = grad_cosine(model.params(), names, [&] { return model.reward_temperature(); },
                               [&] { return model.reward_temperature(); });
  EXPECT_FALSE(res.value);
  EXPECT_NE(res.diagnostic.find("zero gradient"), std::string::npos);
}

TEST(Buckets, CountsEveryPairAndNullsEmptyBuckets) {
  bootstrap::Trainer trainer(tiny_config(), scenes(4));
  const auto tb = trainer.transitions_at(0);
  const auto ab = trainer.annotations_at(0);
  const auto buckets = bucketed_bootstrap_accuracy(trainer.online(), trainer.ema(), tb, ab, 0.5);
  std::size_t total = 0;
  for (const auto& b : buckets) {
    total += b.count;
    if (b.accuracy()) {
      EXPECT_GE(*b.accuracy(), 0.0);
      EXPECT_LE(*b.accuracy(), 1.0);
    }
  }
  EXPECT_EQ(total, 2u * 3u * 3u);
  EXPECT_GE(buckets.back().count, 6u);  // identity pairs have IoU 1

  EvalReport rep;
  rep.buckets = default_buckets();
  const auto j = nlohmann::json::parse(rep.to_json());
  EXPECT_TRUE(j["buckets"][0]["accuracy"].is_null());
}

TEST(Buckets, RejectsGappedPartition) {
  bootstrap::Trainer trainer(tiny_config(), scenes(4));
  const auto tb = trainer.transitions_at(0);
  const auto ab = trainer.annotations_at(0);
  std::vector<Bucket> bad{{0.0, 0.5}, {0.6, 1.0}};
  EXPECT_THROW(bucketed_bootstrap_accuracy(trainer.online(), trainer.online(), tb, ab, 0.0, bad), EvalError);
}

TEST(OracleGap, ConstantHalfMatchesConstantTable) {
  auto cfg = tiny_config().model;
  models::QModel model(cfg, 5);
  model.params().get("log_t_ab").mutable_value()[0] = -60.0f;
  model.params().get("b_ab").mutable_value()[0] = 0.0f;
  const auto sc = scenes(2);
  const std::vector<int> sizes{1, 2};
  const auto mdp = oracle::build_lattice_mdp(sc, oracle::lattice_windows(2, sizes));
  const auto obs = oracle::render_observations(mdp, 16);
  auto oq = oracle::observation_q(mdp, oracle::QTable::like(mdp), obs);
  std::fill(oq.q.q.begin(), oq.q.q.end(), 0.5);
  const auto gap = oracle_value_gap(model, mdp, oq, 16);
  EXPECT_GT(gap.count, 0u);
  EXPECT_LE(gap.max_abs, 1e-6);
}

TEST(OracleGap, UntrainedIsBoundedAndMismatchesThrow) {
  auto cfg = tiny_config().model;
  models::QModel model(cfg, 5);
  const auto sc = scenes(2);
  const std::vector<int> sizes{1, 2};
  const auto mdp = oracle::build_lattice_mdp(sc, oracle::lattice_windows(2, sizes));
  const auto qstar = oracle::value_iteration(mdp, 0.5, 1e-10).q;
  const auto oq = oracle::observation_q(mdp, qstar, oracle::render_observations(mdp, 16));
  const auto gap = oracle_value_gap(model, mdp, oq, 16);
  EXPECT_LE(gap.max_abs, 1.0);
  EXPECT_LE(gap.mean_abs, gap.max_abs);
  EXPECT_THROW(oracle_value_gap(model, mdp, oq, 32), EvalError);
  cfg.vocab_size = 7;
  EXPECT_THROW(oracle_value_gap(models::QModel(cfg, 5), mdp, oq, 16), EvalError);
}

TEST(Evaluate, ReportIsCompleteAndDeterministic) {
  bootstrap::Trainer trainer(tiny_config(), scenes(10));
  trainer.step();
  EvalConfig cfg;
  cfg.seed = 3;
  const auto a = evaluate(trainer, cfg).to_json();
  const auto b = evaluate(trainer, cfg).to_json();
  EXPECT_EQ(a, b);
  const auto j = nlohmann::json::parse(a);
  EXPECT_EQ(j["probes"].size(), 3u);
  EXPECT_EQ(j["probes"][2]["task"], "glyph_at_offset_value");
  EXPECT_EQ(j["buckets"].size(), 4u);
  EXPECT_TRUE(j.contains("grad_cosine"));
  EXPECT_TRUE(j["oracle_gap"].is_null());
  EXPECT_EQ(j["step"], 1);
}

TEST(Csv, QuotesFieldsWithCommas) {
  const auto path = std::filesystem::temp_directory_path() / "annoboot_csv_test.csv";
  write_csv(path, {"name", "value"}, {{"a,b", "1"}, {"say \"hi\"", "2"}});
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str(), "name,value\n\"a,b\",1\n\"say \"\"hi\"\"\",2\n");
  EXPECT_THROW(write_csv(path, {"a"}, {{"1", "2"}}), EvalError);
  std::filesystem::remove(path);
}
