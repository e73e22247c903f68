#include "annoboot/bootstrap.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace annoboot;
using namespace annoboot::bootstrap;

namespace {

// Independently evaluated in NumPy.
const std::vector<double> kMixHand = {0.7903985389889412, 0.5155292893150024, 0.28877033439907274,
                                      0.6872212584058295};
constexpr double kBceHand = 1.0956034658253118;

std::vector<synth::Scene> scenes(int n, int grid = 2, int vocab = 3) {
  std::vector<synth::Scene> out;
  for (int i = 0; i < n; ++i) out.push_back(synth::generate_scene(50 + i, synth::SceneConfig{grid, vocab, 0.7, 8}, i));
  return out;
}

TrainConfig tiny_config(models::Variant v = models::Variant::Clip) {
  TrainConfig cfg;
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
  cfg.seed = 11;
  return cfg;
}

std::vector<float> flat_params(const models::QModel& m) {
  std::vector<float> out;
  for (const auto& e : m.params().entries()) out.insert(out.end(), e.var.value().vec().begin(), e.var.value().vec().end());
  return out;
}

}  // namespace

TEST(BuildTransitions, CountsIdentityAndReplay) {
  const auto imgs = scenes(3);
  Rng a(5), b(5);
  const auto tb = build_transitions(a, imgs, 2, geometry::CropConfig{0.05, 0.5}, 16);
  EXPECT_EQ(tb.crops.size(), 6u);
  ASSERT_EQ(tb.actions.size(), 12u);
  for (int img = 0; img < 3; ++img) {
    int identity = 0;
    for (int p = 0; p < 4; ++p) identity += tb.actions[static_cast<std::size_t>(img * 4 + p)] == geometry::identity_tokens();
    EXPECT_GE(identity, 2);
    EXPECT_EQ(tb.actions[static_cast<std::size_t>(img * 4 + 0)], (geometry::ActionTokens{28, 28, 36, 36}));
    EXPECT_EQ(tb.actions[static_cast<std::size_t>(img * 4 + 3)], (geometry::ActionTokens{28, 28, 36, 36}));
  }
  const auto again = build_transitions(b, imgs, 2, geometry::CropConfig{0.05, 0.5}, 16);
  EXPECT_EQ(again.actions, tb.actions);
  for (std::size_t i = 0; i < tb.crops.size(); ++i) EXPECT_EQ(again.crops[i].pixels, tb.crops[i].pixels);
  const auto q = tb.queries();
  EXPECT_EQ(q.source, (std::vector<std::int64_t>{0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5}));
  Rng c(1);
  EXPECT_THROW(build_transitions(c, imgs, 1, geometry::CropConfig{0.05, 0.5}, 16), TrainConfigError);
}

TEST(BuildTransitions, ActionsDecodeToTargetBoxes) {
  const auto imgs = scenes(1);
  Rng rng(8);
  const auto tb = build_transitions(rng, imgs, 4, geometry::CropConfig{0.05, 0.5}, 16);
  for (std::size_t j = 0; j < 4; ++j) {
    for (std::size_t k = 0; k < 4; ++k) {
      const auto back = geometry::apply_action(tb.crops[j].box, geometry::continuize(tb.actions[j * 4 + k]));
      // Quantization: half a bin in the source frame.
      EXPECT_NEAR(back.y_min, tb.crops[k].box.y_min, 0.0625 * tb.crops[j].box.height() + 1e-12);
      EXPECT_NEAR(back.x_max, tb.crops[k].box.x_max, 0.0625 * tb.crops[j].box.width() + 1e-12);
    }
  }
}

TEST(MixTargets, Examples) {
  Tensor<double> r({1, 2, 2}, {0.7, 0.3, 0.2, 0.8});
  Tensor<double> q({1, 2, 2, 2}, {0, 1, 2, -1, -0.5, 0.3, -0.5, 0.1});
  const auto t = mix_targets(r, q, 0.5);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(t[i], kMixHand[i], 1e-15);
  EXPECT_EQ(mix_targets(r, q, 0.0).vec(), r.vec());
  const auto one = mix_targets(Tensor<double>({1, 1, 1}, 1.0), Tensor<double>({1, 1, 2, 1}, {800.0, -3.0}), 0.5);
  EXPECT_EQ(one[0], 1.0);
  EXPECT_THROW(mix_targets(r, Tensor<double>({1, 2, 2, 3}), 0.5), ad::ShapeError);
}

TEST(ValueLoss, HandCaseAndMinimum) {
  Var<double> x(Tensor<double>({1, 2, 2, 1}, {0.5, -1, 2, 0}));
  EXPECT_NEAR(value_loss(x, Tensor<double>({1, 2, 1}, {0.25, 0.9})).value().item(), kBceHand, 1e-15);

  Tensor<double> t({1, 2, 2}, {0.1, 0.6, 0.35, 0.95});
  const auto full = expand_targets(t);
  Tensor<double> logits(full.shape());
  double entropy = 0.0;
  for (std::size_t i = 0; i < full.size(); ++i) {
    const double p = full[i];
    logits[i] = std::log(p / (1 - p));
    entropy += -(p * std::log(p) + (1 - p) * std::log(1 - p));
  }
  Var<double> at_min(logits, true);
  auto l = value_loss(at_min, t);
  EXPECT_NEAR(l.value().item(), entropy / static_cast<double>(full.size()), 1e-12);
  ad::backward(l);
  for (double g : at_min.grad().vec()) EXPECT_NEAR(g, 0.0, 1e-12);

  double prev = 0.0;
  for (double v : {-1.0, -10.0, -100.0}) {
    const double lv = value_loss(Var<double>(Tensor<double>({1, 1, 1, 1}, v)), Tensor<double>({1, 1, 1}, 1.0))
                          .value()
                          .item();
    EXPECT_GT(lv, prev);
    prev = lv;
  }
  EXPECT_GT(prev, 99.0);
}

TEST(ComputeTargets, GammaZeroIsRewardSoftmaxAndBounded) {
  auto cfg = tiny_config();
  Trainer t(cfg, scenes(4));
  const auto tb = t.transitions_at(0);
  const auto ab = t.annotations_at(0);
  const auto target = compute_targets(t.ema(), tb, ab, 0.0);
  ad::NoGradGuard guard;
  const auto enc = t.ema().encode(tb.pixels());
  const auto ann = value_annotations(t.ema(), std::nullopt);
  const auto probs = rewards::reward_probs(t.ema(), enc, ann.embedding);
  EXPECT_EQ(target.vec(), probs.vec());
  for (double g : {0.25, 0.5, 0.9}) {
    for (float v : compute_targets(t.ema(), tb, ab, g).vec()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Trainer, StopGradientIsExact) {
  for (auto v : {models::Variant::Clip, models::Variant::SimClr, models::Variant::Dino}) {
    Trainer t(tiny_config(v), scenes(4));
    t.step();
    EXPECT_EQ(t.ema_gradient_magnitude(1), 0.0) << models::to_string(v);
  }
}

TEST(Trainer, DeterministicReplay) {
  Trainer a(tiny_config(), scenes(4)), b(tiny_config(), scenes(4));
  for (int i = 0; i < 3; ++i) {
    const auto ma = a.step();
    const auto mb = b.step();
    EXPECT_EQ(ma.value_loss, mb.value_loss);
    EXPECT_EQ(ma.reward_loss, mb.reward_loss);
  }
  EXPECT_EQ(flat_params(a.online()), flat_params(b.online()));
  EXPECT_EQ(flat_params(a.ema()), flat_params(b.ema()));
}

TEST(Trainer, ResumeMatchesUninterrupted) {
  for (auto v : {models::Variant::Clip, models::Variant::Dino}) {
    auto cfg = tiny_config(v);
    cfg.tau_kind = ad::TauSchedule::Cosine;
    const auto dir = std::filesystem::temp_directory_path() / "annoboot_resume_test";
    std::filesystem::remove_all(dir);
    Trainer full(cfg, scenes(4));
    for (int i = 0; i < 4; ++i) full.step();

    Trainer first(cfg, scenes(4));
    for (int i = 0; i < 2; ++i) first.step();
    first.save_checkpoint(dir);
    Trainer resumed(cfg, scenes(4));
    resumed.load_checkpoint(dir);
    EXPECT_EQ(resumed.current_step(), 2);
    for (int i = 0; i < 2; ++i) resumed.step();
    EXPECT_EQ(flat_params(resumed.online()), flat_params(full.online())) << models::to_string(v);
    EXPECT_EQ(flat_params(resumed.ema()), flat_params(full.ema())) << models::to_string(v);
    std::filesystem::remove_all(dir);
  }
}

TEST(Trainer, ZeroTauFreezesEma) {
  auto cfg = tiny_config();
  cfg.tau_base = 0.0;
  Trainer t(cfg, scenes(4));
  const auto before = flat_params(t.ema());
  const auto targets0 = compute_targets(t.ema(), t.transitions_at(0), t.annotations_at(0), 0.5);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(t.step().tau, 0.0);
  EXPECT_EQ(flat_params(t.ema()), before);
  EXPECT_NE(flat_params(t.online()), before);
  EXPECT_EQ(compute_targets(t.ema(), t.transitions_at(0), t.annotations_at(0), 0.5).vec(), targets0.vec());
}

TEST(Trainer, AblationSwitches) {
  auto cfg = tiny_config();
  cfg.ablations.no_annotation_loss = true;
  cfg.ablations.no_propagation = true;
  Trainer t(cfg, scenes(4));
  const auto m = t.step();
  EXPECT_EQ(m.reward_loss, 0.0);
  EXPECT_EQ(m.gamma, 0.0);
  // Without a reward term the annotation table only sees value gradients via psi_AB,
  // and the reward head is untouched.
  EXPECT_FALSE(t.online().params().get("ann.reward.w").has_grad());

  auto masked = tiny_config();
  masked.ablations.no_action_tokens = true;
  Trainer u(masked, scenes(4));
  u.step();
  EXPECT_FALSE(u.online().params().get("act.tok0").has_grad());
  EXPECT_TRUE(u.online().params().get("act.mask").has_grad());

  auto online_targets = tiny_config();
  online_targets.ablations.no_target_network = true;
  Trainer w(online_targets, scenes(4));
  EXPECT_TRUE(std::isfinite(w.step().value_loss));
}

TEST(Trainer, NonFiniteLossAbortsWithDiagnostics) {
  Trainer t(tiny_config(), scenes(4));
  t.online().params().get("b_ab").mutable_value()[0] = std::nanf("");
  try {
    t.step();
    FAIL();
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("value_loss"), std::string::npos) << msg;
  }
}

TEST(Trainer, ConfigValidation) {
  auto cfg = tiny_config();
  cfg.gamma = 1.0;
  EXPECT_THROW(Trainer(cfg, scenes(2)), TrainConfigError);
  cfg = tiny_config();
  cfg.model.vocab_size = 7;
  EXPECT_THROW(Trainer(cfg, scenes(2)), TrainConfigError);
  EXPECT_THROW(Trainer(tiny_config(), {}), TrainConfigError);
}

TEST(Trainer, ValueLossDecreasesWithFrozenRandomRewardHead) {
  auto cfg = tiny_config();
  cfg.ablations.no_annotation_loss = true;
  cfg.gamma = 0.0;
  cfg.lr = 3e-3;
  cfg.steps = 60;
  Trainer t(cfg, scenes(4));
  double early = 0.0, late = 0.0;
  for (int i = 0; i < 60; ++i) {
    const double v = t.step().value_loss;
    if (i < 10) early += v;
    if (i >= 50) late += v;
  }
  EXPECT_LT(late, early);
}
