#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "annoboot/geometry.hpp"
#include "annoboot/models.hpp"
#include "annoboot/optim.hpp"
#include "annoboot/rewards.hpp"
#include "annoboot/synthdata.hpp"

namespace annoboot::bootstrap {

using ad::Tensor;
using ad::Var;
using geometry::BBox;
using models::QModel;

struct Ablations {
  bool no_action_tokens = false;
  bool no_propagation = false;
  bool no_target_network = false;
  bool no_annotation_loss = false;
};

struct TrainConfig {
  models::ModelConfig model;
  double gamma = 0.5;
  int views = 4;           // N crops per unlabeled image
  int batch_images = 16;   // B
  int reward_batch = 64;   // B_a
  geometry::CropConfig bootstrap_crop{0.05, 0.5};
  geometry::CropConfig reward_crop{0.25, 1.0};
  /// When non-empty, every unlabeled image uses exactly these windows (N = size)
  /// and reward views are drawn uniformly from them.
  std::vector<BBox> fixed_windows;
  /// When set, each image gets one crop pair (N = 2) drawn from bootstrap_crop and
  /// kept only if its IoU lies in [lo, hi) (hi inclusive at 1).
  std::optional<std::pair<double, double>> pair_iou_band;
  long max_rejections = 1'000'000;
  ad::TauSchedule tau_kind = ad::TauSchedule::Constant;
  double tau_base = ad::kTauBase;
  double lr = 1e-3;
  long warmup = 100;
  double weight_decay = 0.05;
  double clip_norm = 1.0;
  long steps = 1000;
  std::uint64_t seed = 0;
  Ablations ablations;
};

class TrainConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

void validate(const TrainConfig& cfg);

/// B images x N views with all N^2 relative actions; actions[(b*N + j)*N + k] maps view j to view k.
struct TransitionBatch {
  int images = 0;
  int views = 0;
  std::vector<synth::View> crops;  // B*N, image-major
  std::vector<geometry::ActionTokens> actions;

  Tensor<float> pixels() const { return models::stack_views(crops); }
  /// Every (b, j, k) query decoding from view (b, j).
  models::ActionQueries queries() const;
};

/// N crops per image from sample_crop, rendered at `resolution`.
TransitionBatch build_transitions(Rng& rng, std::span<const synth::Scene> images, int n,
                                  const geometry::CropConfig& crop, int resolution);

/// Independent crop pairs from `crop`, redrawn until IoU lands in the band; nullopt
/// after `max_tries` draws.
std::optional<std::pair<BBox, BBox>> sample_pair_in_band(Rng& rng, const geometry::CropConfig& crop, double lo,
                                                         double hi, long max_tries);

/// Fixed crops: every image uses `windows` in order.
TransitionBatch build_transitions(std::span<const synth::Scene> images, std::span<const BBox> windows,
                                  int resolution);

/// Reward-side batch. CLIP: one view per image plus an annotation id drawn from
/// the view's true annotation distribution. SimCLR/DINO: two views per image.
struct AnnotationBatch {
  std::vector<synth::View> first;
  std::vector<synth::View> second;
  std::vector<std::int64_t> ids;
};

AnnotationBatch build_annotations(Rng& rng, models::Variant variant, std::span<const synth::Scene> images,
                                  const geometry::CropConfig& crop, std::span<const BBox> windows, int resolution);

/// target[b, j, l] = (1 - gamma) * reward_probs[b, j, l] + gamma * sigmoid(max_k value_logits[b, j, k, l]).
/// reward_probs: [B, N, L]; value_logits: [B, N, N, L]. Ties in the max go to the lowest k.
template <typename T>
Tensor<T> mix_targets(const Tensor<T>& reward_probs, const Tensor<T>& value_logits, double gamma);

/// Broadcasts targets [B, N, L] to the value grid [B, N, N, L]: entry (b, i, j, l) = target[b, j, l].
template <typename T>
Tensor<T> expand_targets(const Tensor<T>& targets);

/// Mean BCE between online value logits [B, N, N, L] (any shape with that element order)
/// and expanded targets.
template <typename T>
Var<T> value_loss(const Var<T>& value_logits, const Tensor<T>& targets);

/// Annotation embeddings a model uses for value targets and the value loss.
struct AnnotationContext {
  models::AnnotationEmbedding embedding;
  std::size_t count = 0;
};

/// CLIP: the full vocabulary; SimCLR: encodings of the annotation views; DINO: prototypes.
AnnotationContext value_annotations(const QModel& model, const std::optional<models::ViewEncoding>& annotation_views);

/// Value targets from `target_model` (EMA or online), detached from any graph. [B, N, L].
Tensor<float> compute_targets(const QModel& target_model, const TransitionBatch& batch,
                              const AnnotationBatch& annotations, double gamma, bool mask_actions = false);

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepMetrics {
  long step = 0;
  double reward_loss = 0.0;
  double value_loss = 0.0;
  double tau = 0.0;
  double gamma = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
  double grad_norm = 0.0;
  double max_abs_logit = 0.0;

  std::string to_json() const;
};

/// Online model, EMA target, optimizer and DINO state, advanced one step at a time.
/// Each step's data is a pure function of (seed, step), so a restored state replays exactly.
class Trainer {
 public:
  Trainer(TrainConfig cfg, std::vector<synth::Scene> scenes);

  StepMetrics step();
  long current_step() const { return step_; }

  const TrainConfig& config() const { return cfg_; }
  const QModel& online() const { return online_; }
  const QModel& ema() const { return ema_; }
  QModel& online() { return online_; }
  QModel& ema() { return ema_; }
  const std::vector<synth::Scene>& scenes() const { return scenes_; }

  /// Batches exactly as the trainer would draw them at `step`.
  TransitionBatch transitions_at(long step) const;
  AnnotationBatch annotations_at(long step) const;

  /// Gradient of the full step loss with respect to the EMA parameters (which are
  /// temporarily made differentiable). Returns the largest absolute entry.
  double ema_gradient_magnitude(long step);

  /// Reward loss (null node when disabled) and value loss on a given batch; no state advances.
  std::pair<Var<float>, Var<float>> evaluate_losses(const TransitionBatch& tb, const AnnotationBatch& ab);

  void save_checkpoint(const std::filesystem::path& dir) const;
  void load_checkpoint(const std::filesystem::path& dir);

 private:
  struct Losses {
    Var<float> reward;
    Var<float> value;
    double max_abs_logit = 0.0;
  };
  Losses losses_at(const TransitionBatch& tb, const AnnotationBatch& ab);
  std::vector<synth::Scene> pick_scenes(long step, int count, std::uint64_t stream) const;

  TrainConfig cfg_;
  std::vector<synth::Scene> scenes_;
  QModel online_;
  QModel ema_;
  ad::AdamWState<float> adam_;
  rewards::DinoState dino_;
  long step_ = 0;
};

}  // namespace annoboot::bootstrap
