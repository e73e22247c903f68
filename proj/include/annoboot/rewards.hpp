#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>

#include "annoboot/models.hpp"

namespace annoboot::rewards {

using ad::Tensor;
using ad::Var;
using models::AnnotationEmbedding;
using models::QModel;
using models::ViewEncoding;

class RewardBatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Symmetric InfoNCE on a square B x B logit matrix paired along the diagonal:
/// mean row CE + mean column CE.
template <typename T>
Var<T> clip_loss_from_logits(const Var<T>& logits);

/// Two-view InfoNCE (NT-Xent). z1, z2: [B, e] L2-normalized; t: [1] temperature.
/// Each of the 2B anchors scores its partner against the other 2B - 2 views.
template <typename T>
Var<T> simclr_loss_from_embeddings(const Var<T>& z1, const Var<T>& z2, const Var<T>& t);

/// Mean over rows of H(teacher, softmax(student_logits)).
template <typename T>
Var<T> dino_loss_from_logits(const Var<T>& student_logits, const Tensor<T>& teacher_probs);

/// Teacher-side state for the DINO objective. Prototypes live in the model.
struct DinoState {
  Tensor<float> center;  // [K]
  double teacher_temp = 0.04;
  double momentum = 0.9;

  explicit DinoState(std::size_t prototypes = 0) : center({prototypes}) {}

  /// softmax((cos - center) / teacher_temp) per row; cos: [B, K].
  Tensor<float> teacher_probs(const Tensor<float>& cos) const;
  /// center <- m * center + (1 - m) * mean over rows of cos.
  void update_center(const Tensor<float>& cos);
};

/// CLIP-style reward loss: view i is paired with annotation id i.
Var<float> clip_reward_loss(const QModel& model, const ViewEncoding& views, std::span<const std::int64_t> ids);

/// SimCLR-style reward loss between two augmented views of each image.
Var<float> simclr_reward_loss(const QModel& model, const ViewEncoding& a, const ViewEncoding& b);

/// DINO-style reward loss: the student on each view matches the teacher on the other.
/// Updates the center from the teacher outputs.
Var<float> dino_reward_loss(const QModel& student, const QModel& teacher, DinoState& state,
                            const Tensor<float>& view_a, const Tensor<float>& view_b);

/// Row softmax of reward logits over the annotation batch, computed without gradient.
Tensor<float> reward_probs(const QModel& model, const ViewEncoding& views, const AnnotationEmbedding& ann);

/// Fraction of rows whose argmax is the diagonal entry.
double retrieval_accuracy(const Tensor<float>& logits);

}  // namespace annoboot::rewards
