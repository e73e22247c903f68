#include "annoboot/rewards.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace annoboot::rewards {

namespace {

std::vector<std::int64_t> diagonal_labels(std::size_t n) {
  std::vector<std::int64_t> labels(n);
  std::iota(labels.begin(), labels.end(), std::int64_t{0});
  return labels;
}

void require_pairs(std::size_t n, const char* what) {
  if (n < 2) throw RewardBatchError(std::string(what) + ": need at least 2 items in the batch, got " + std::to_string(n));
}

}  // namespace

template <typename T>
Var<T> clip_loss_from_logits(const Var<T>& logits) {
  const auto& s = logits.shape();
  if (s.size() != 2 || s[0] != s[1]) throw ad::ShapeError("clip loss expects square logits, got " + ad::to_string(s));
  require_pairs(s[0], "clip loss");
  const auto labels = diagonal_labels(s[0]);
  return ad::add(ad::softmax_cross_entropy(logits, std::span<const std::int64_t>(labels)),
                 ad::softmax_cross_entropy(ad::permute(logits, {1, 0}), std::span<const std::int64_t>(labels)));
}

template <typename T>
Var<T> simclr_loss_from_embeddings(const Var<T>& z1, const Var<T>& z2, const Var<T>& t) {
  if (z1.shape() != z2.shape() || z1.shape().size() != 2) {
    throw ad::ShapeError("simclr loss: view embeddings " + ad::to_string(z1.shape()) + " vs " +
                         ad::to_string(z2.shape()));
  }
  const std::size_t b = z1.shape()[0];
  require_pairs(b, "simclr loss");
  auto z = ad::concat<T>({z1, z2}, 0);
  auto logits = ad::mul(ad::matmul(z, z, false, true), t);
  Tensor<T> self_mask({2 * b, 2 * b});
  for (std::size_t i = 0; i < 2 * b; ++i) self_mask[i * 2 * b + i] = -std::numeric_limits<T>::infinity();
  logits = ad::add(logits, ad::constant(std::move(self_mask)));
  std::vector<std::int64_t> labels(2 * b);
  for (std::size_t i = 0; i < b; ++i) {
    labels[i] = static_cast<std::int64_t>(i + b);
    labels[i + b] = static_cast<std::int64_t>(i);
  }
  return ad::softmax_cross_entropy(logits, std::span<const std::int64_t>(labels));
}

template <typename T>
Var<T> dino_loss_from_logits(const Var<T>& student_logits, const Tensor<T>& teacher_probs) {
  if (student_logits.shape().size() != 2 || student_logits.shape()[1] < 2) {
    throw RewardBatchError("dino loss needs at least 2 prototypes, got logits " +
                           ad::to_string(student_logits.shape()));
  }
  return ad::softmax_cross_entropy(student_logits, teacher_probs);
}

template Var<float> clip_loss_from_logits(const Var<float>&);
template Var<double> clip_loss_from_logits(const Var<double>&);
template Var<float> simclr_loss_from_embeddings(const Var<float>&, const Var<float>&, const Var<float>&);
template Var<double> simclr_loss_from_embeddings(const Var<double>&, const Var<double>&, const Var<double>&);
template Var<float> dino_loss_from_logits(const Var<float>&, const Tensor<float>&);
template Var<double> dino_loss_from_logits(const Var<double>&, const Tensor<double>&);

Tensor<float> DinoState::teacher_probs(const Tensor<float>& cos) const {
  const std::size_t k = center.size();
  if (cos.rank() != 2 || cos.dim(1) != k) {
    throw ad::ShapeError("teacher outputs " + ad::to_string(cos.shape()) + " vs center [" + std::to_string(k) + "]");
  }
  Tensor<float> out(cos.shape());
  for (std::size_t r = 0; r < cos.dim(0); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> z(k);
    for (std::size_t j = 0; j < k; ++j) {
      z[j] = (static_cast<double>(cos[r * k + j]) - center[j]) / teacher_temp;
      mx = std::max(mx, z[j]);
    }
    double total = 0.0;
    for (double& v : z) total += (v = std::exp(v - mx));
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = static_cast<float>(z[j] / total);
  }
  return out;
}

void DinoState::update_center(const Tensor<float>& cos) {
  const std::size_t k = center.size();
  if (cos.rank() != 2 || cos.dim(1) != k || cos.dim(0) == 0) {
    throw ad::ShapeError("teacher outputs " + ad::to_string(cos.shape()) + " vs center [" + std::to_string(k) + "]");
  }
  const std::size_t rows = cos.dim(0);
  for (std::size_t j = 0; j < k; ++j) {
    double mean = 0.0;
    for (std::size_t r = 0; r < rows; ++r) mean += cos[r * k + j];
    mean /= static_cast<double>(rows);
    center[j] = static_cast<float>(momentum * center[j] + (1.0 - momentum) * mean);
  }
}

Var<float> clip_reward_loss(const QModel& model, const ViewEncoding& views, std::span<const std::int64_t> ids) {
  require_pairs(ids.size(), "clip reward loss");
  return clip_loss_from_logits(model.reward_logits(views, model.embed_annotation_ids(ids)));
}

Var<float> simclr_reward_loss(const QModel& model, const ViewEncoding& a, const ViewEncoding& b) {
  return simclr_loss_from_embeddings(a.embedding, b.embedding, model.reward_temperature());
}

Var<float> dino_reward_loss(const QModel& student, const QModel& teacher, DinoState& state,
                            const Tensor<float>& view_a, const Tensor<float>& view_b) {
  Tensor<float> cos_a, cos_b;
  {
    ad::NoGradGuard guard;
    const auto protos = teacher.embed_prototypes().reward;
    cos_a = ad::matmul(teacher.encode(view_a).embedding, protos, false, true).value();
    cos_b = ad::matmul(teacher.encode(view_b).embedding, protos, false, true).value();
  }
  const auto t_a = state.teacher_probs(cos_a);
  const auto t_b = state.teacher_probs(cos_b);
  const auto protos = student.embed_prototypes();
  auto s_a = student.reward_logits(student.encode(view_a), protos);
  auto s_b = student.reward_logits(student.encode(view_b), protos);
  auto loss = ad::scale(ad::add(dino_loss_from_logits(s_a, t_b), dino_loss_from_logits(s_b, t_a)), 0.5f);

  Tensor<float> both({cos_a.dim(0) + cos_b.dim(0), cos_a.dim(1)});
  std::copy(cos_a.vec().begin(), cos_a.vec().end(), both.data());
  std::copy(cos_b.vec().begin(), cos_b.vec().end(), both.data() + cos_a.size());
  state.update_center(both);
  return loss;
}

Tensor<float> reward_probs(const QModel& model, const ViewEncoding& views, const AnnotationEmbedding& ann) {
  ad::NoGradGuard guard;
  return ad::softmax(model.reward_logits(views, ann), -1).value();
}

double retrieval_accuracy(const Tensor<float>& logits) {
  if (logits.rank() != 2 || logits.dim(0) == 0) throw ad::ShapeError("retrieval accuracy needs [B, L] logits");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = logits.data() + r * cols;
    const auto best = static_cast<std::size_t>(std::max_element(row, row + cols) - row);
    hits += best == r;
  }
  return static_cast<double>(hits) / static_cast<double>(rows);
}

}  // namespace annoboot::rewards
