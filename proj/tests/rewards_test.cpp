#include "annoboot/rewards.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace annoboot;
using namespace annoboot::rewards;
using ad::Tensor;
using ad::Var;

namespace {

// Reference values below were evaluated independently in NumPy (log-sum-exp form).
constexpr double kClipHand3 = 0.564112142949462;
constexpr double kSimclrHand2 = 2.0301902771367115;
constexpr double kDinoHand2 = 1.2514132779827523;

models::ModelConfig tiny(models::Variant v) {
  models::ModelConfig cfg;
  cfg.variant = v;
  cfg.backbone = models::BackboneConfig{8, 16, 1, 2, 16, 2};
  cfg.decoder_depth = 1;
  cfg.embed_dim = 8;
  cfg.vocab_size = 4;
  cfg.prototypes = 5;
  return cfg;
}

Tensor<float> random_pixels(std::size_t batch, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t({batch, 16, 16, 3});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform());
  return t;
}

}  // namespace

TEST(ClipLoss, UniformLogits) {
  EXPECT_NEAR(clip_loss_from_logits(Var<double>(Tensor<double>({2, 2}, 0.7))).value().item(), 2 * std::log(2.0),
              1e-12);
  for (std::size_t b : {3u, 16u, 64u}) {
    const double l = clip_loss_from_logits(Var<double>(Tensor<double>({b, b}, -1.25))).value().item();
    EXPECT_NEAR(l / 2.0, std::log(static_cast<double>(b)), 1e-9);
  }
}

TEST(ClipLoss, HandComputedThreeByThree) {
  Var<double> x(Tensor<double>({3, 3}, {2, 0, 1, 0.5, 1.5, -1, 0, 0, 3}));
  EXPECT_NEAR(clip_loss_from_logits(x).value().item(), kClipHand3, 1e-12);
}

TEST(ClipLoss, SharpOrthogonalPairsVanish) {
  Tensor<double> eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  Var<double> logits(Tensor<double>({4, 4}, std::vector<double>(eye.vec())));
  for (auto& v : logits.mutable_value().vec()) v *= 200.0;
  EXPECT_LT(clip_loss_from_logits(logits).value().item(), 1e-12);
}

TEST(ClipLoss, RowShiftInvariantAndBatchEquivariant) {
  Tensor<double> t({3, 3}, {2, 0, 1, 0.5, 1.5, -1, 0, 0, 3});
  // Symmetric permutation of rows and columns.
  Tensor<double> p({3, 3});
  const int perm[3] = {2, 0, 1};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) p[static_cast<std::size_t>(i * 3 + j)] = t[static_cast<std::size_t>(perm[i] * 3 + perm[j])];
  EXPECT_NEAR(clip_loss_from_logits(Var<double>(p)).value().item(), kClipHand3, 1e-12);
  auto shifted = t;
  for (auto& v : shifted.vec()) v += 5.0;
  EXPECT_NEAR(clip_loss_from_logits(Var<double>(shifted)).value().item(), kClipHand3, 1e-12);
  EXPECT_THROW(clip_loss_from_logits(Var<double>(Tensor<double>({1, 1}))), RewardBatchError);
  EXPECT_THROW(clip_loss_from_logits(Var<double>(Tensor<double>({2, 3}))), ad::ShapeError);
}

TEST(SimclrLoss, IdenticalEmbeddings) {
  for (std::size_t b : {2u, 5u}) {
    Var<double> z(Tensor<double>({b, 3}, 1.0 / std::sqrt(3.0)));
    const double l = simclr_loss_from_embeddings(z, z, Var<double>(Tensor<double>({1}, 10.0))).value().item();
    EXPECT_NEAR(l, std::log(2.0 * static_cast<double>(b) - 1.0), 1e-12);
  }
}

TEST(SimclrLoss, HandComputedPair) {
  Var<double> z1(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  Var<double> z2(Tensor<double>({2, 2}, {0.6, 0.8, 0.8, -0.6}));
  const double l = simclr_loss_from_embeddings(z1, z2, Var<double>(Tensor<double>({1}, 2.0))).value().item();
  EXPECT_NEAR(l, kSimclrHand2, 1e-12);
}

TEST(SimclrLoss, AlignedOrthogonalVanishes) {
  Tensor<double> eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye[i * 4] = 1.0;
  const double l =
      simclr_loss_from_embeddings(Var<double>(eye), Var<double>(eye), Var<double>(Tensor<double>({1}, 100.0)))
          .value()
          .item();
  EXPECT_LT(l, 1e-12);
}

TEST(DinoLoss, UniformTeacherAndStudent) {
  Var<double> s(Tensor<double>({3, 4}, 0.2));
  EXPECT_NEAR(dino_loss_from_logits(s, Tensor<double>({3, 4}, 0.25)).value().item(), std::log(4.0), 1e-12);
  EXPECT_THROW(dino_loss_from_logits(Var<double>(Tensor<double>({3, 1})), Tensor<double>({3, 1}, 1.0)),
               RewardBatchError);
}

TEST(DinoLoss, HandComputedTwoPrototypes) {
  Var<double> s(Tensor<double>({1, 2}, {1.0, -0.5}));
  EXPECT_NEAR(dino_loss_from_logits(s, Tensor<double>({1, 2}, {0.3, 0.7})).value().item(), kDinoHand2, 1e-12);
}

TEST(DinoState, SharpTeacherIsOneHot) {
  DinoState st(3);
  st.teacher_temp = 1e-4;
  const auto p = st.teacher_probs(Tensor<float>({1, 3}, {0.1f, 0.5f, 0.2f}));
  EXPECT_NEAR(p[1], 1.0f, 1e-6f);
  EXPECT_NEAR(p[0] + p[2], 0.0f, 1e-6f);
}

TEST(DinoState, CenterConvergesGeometrically) {
  DinoState st(2);
  const Tensor<float> out({2, 2}, {1.0f, -1.0f, 0.0f, 3.0f});  // row mean (0.5, 1.0)
  for (int step = 1; step <= 50; ++step) {
    st.update_center(out);
    const double expect = std::pow(0.9, step);
    EXPECT_NEAR(0.5 - st.center[0], 0.5 * expect, 1e-5);
    EXPECT_NEAR(1.0 - st.center[1], 1.0 * expect, 1e-5);
  }
}

TEST(RewardProbs, Examples) {
  const models::QModel m(tiny(models::Variant::Clip), 2);
  const auto enc = m.encode(random_pixels(3, 1));
  const std::vector<std::int64_t> one{2};
  const auto p1 = reward_probs(m, enc, m.embed_annotation_ids(one));
  for (float v : p1.vec()) EXPECT_FLOAT_EQ(v, 1.0f);
  const std::vector<std::int64_t> same{1, 1, 1, 1, 1};
  const auto p5 = reward_probs(m, enc, m.embed_annotation_ids(same));
  for (float v : p5.vec()) EXPECT_FLOAT_EQ(v, 0.2f);
  // t = 10, cosines +1 vs -1: the aligned entry dominates by e^20.
  Var<float> logits(Tensor<float>({1, 2}, {10.0f, -10.0f}));
  const auto p = ad::softmax(logits, -1).value();
  EXPECT_NEAR(p[0], 1.0 / (1.0 + std::exp(-20.0)), 1e-7);
}

TEST(RewardLosses, ModelLevelShapesAndGradients) {
  models::QModel clip(tiny(models::Variant::Clip), 3);
  const auto enc = clip.encode(random_pixels(4, 2));
  const std::vector<std::int64_t> ids{0, 1, 2, 3};
  auto l = clip_reward_loss(clip, enc, ids);
  ad::backward(l);
  EXPECT_TRUE(std::isfinite(l.value().item()));
  EXPECT_TRUE(clip.params().get("patch.w").has_grad());
  EXPECT_THROW(clip_reward_loss(clip, clip.encode(random_pixels(1, 2)), std::vector<std::int64_t>{0}),
               RewardBatchError);

  models::QModel sim(tiny(models::Variant::SimClr), 3);
  const auto sl = simclr_reward_loss(sim, sim.encode(random_pixels(3, 4)), sim.encode(random_pixels(3, 5)));
  EXPECT_TRUE(std::isfinite(sl.value().item()));

  models::QModel student(tiny(models::Variant::Dino), 3);
  const models::QModel teacher = student.clone();
  DinoState st(5);
  auto dl = dino_reward_loss(student, teacher, st, random_pixels(3, 6), random_pixels(3, 7));
  EXPECT_TRUE(std::isfinite(dl.value().item()));
  ad::backward(dl);
  EXPECT_TRUE(student.params().get("protos").has_grad());
  for (const auto& e : teacher.params().entries()) EXPECT_FALSE(e.var.has_grad()) << e.name;
  float mag = 0.0f;
  for (float c : st.center.vec()) mag += std::fabs(c);
  EXPECT_GT(mag, 0.0f);
}

TEST(Retrieval, Accuracy) {
  EXPECT_DOUBLE_EQ(retrieval_accuracy(Tensor<float>({2, 2}, {1, 0, 0, 1})), 1.0);
  EXPECT_DOUBLE_EQ(retrieval_accuracy(Tensor<float>({2, 2}, {0, 1, 0, 1})), 0.5);
}
