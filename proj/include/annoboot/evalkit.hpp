#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "annoboot/bootstrap.hpp"
#include "annoboot/models.hpp"
#include "annoboot/oracle.hpp"
#include "annoboot/synthdata.hpp"

namespace annoboot::eval {

using models::QModel;

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ProbeConfig {
  double l2 = 1e-2;        // penalty on weights (not biases), mean-loss scale
  int max_iter = 5000;
  double grad_tol = 1e-6;  // stop once the full gradient norm falls below this
};

/// Multinomial logistic regression on standardized features.
struct LogisticFit {
  std::size_t dim = 0;
  std::size_t classes = 0;
  std::vector<double> mean, scale;  // standardization from the training rows
  std::vector<double> w;            // [classes, dim]
  std::vector<double> b;            // [classes]
  int iterations = 0;
  double grad_norm = 0.0;
  double loss = 0.0;

  int predict(std::span<const double> x) const;
};

/// Full-batch accelerated gradient descent on mean cross-entropy + l2/2 |W|^2.
/// Throws EvalError when fewer than two classes are present.
LogisticFit fit_logistic(std::span<const double> features, std::size_t dim, std::span<const int> labels,
                         const ProbeConfig& cfg);

struct ProbeReport {
  std::string task;
  double accuracy = 0.0;
  std::size_t samples = 0;  // held-out rows
  std::string config_hash;
  int iterations = 0;
  double grad_norm = 0.0;
};

/// Fits on rows with is_test == false, scores the rest.
ProbeReport linear_probe(const std::string& task, std::span<const double> features, std::size_t dim,
                         std::span<const int> labels, const std::vector<bool>& is_test, const ProbeConfig& cfg = {});

enum class ProbeTask { DominantGlyph, GlyphAtOffset };

const char* to_string(ProbeTask t);

/// Labelled views for a probe task.
///  DominantGlyph: `per_scene` random crops, label = most likely annotation in the crop.
///  GlyphAtOffset: every cell-aligned 2x2-cell window, label = content of the cell at
///  (dy, dx) inside it (background index when empty).
struct ProbeData {
  std::vector<synth::View> views;
  std::vector<int> labels;
  std::vector<bool> is_test;
};

struct ProbeDataConfig {
  int per_scene = 4;
  geometry::CropConfig crop{0.25, 1.0};
  int offset_dy = 0;
  int offset_dx = 1;
  int test_every = 5;  // scene i is held out when i % test_every == 0
};

ProbeData probe_data(ProbeTask task, std::span<const synth::Scene> scenes, int resolution, std::uint64_t seed,
                     const ProbeDataConfig& cfg = {});

/// Mean-pooled backbone features, [M, d] row-major in double.
std::vector<double> view_features(const QModel& model, std::span<const synth::View> views, std::size_t batch = 64);

/// Action-conditioned value embeddings phi_AB(x, a) of GlyphAtOffset views, where `a` moves
/// each 2x2-cell window onto its probed cell. [M, e] row-major in double.
std::vector<double> offset_value_features(const QModel& model, std::span<const synth::View> views,
                                          const ProbeDataConfig& cfg, bool mask_actions = false,
                                          std::size_t batch = 64);

/// Accuracy agreement per IoU bucket [lo, hi); the last bucket includes hi.
struct Bucket {
  double lo = 0.0;
  double hi = 1.0;
  std::size_t count = 0;
  std::size_t agree = 0;
  double iou_sum = 0.0;

  std::optional<double> accuracy() const {
    if (count == 0) return std::nullopt;
    return static_cast<double>(agree) / static_cast<double>(count);
  }
};

std::vector<Bucket> default_buckets();

/// For each (view i, action i->j): argmax of the online value logits versus argmax of the
/// target for view j, grouped by IoU(box_i, box_j).
std::vector<Bucket> bucketed_bootstrap_accuracy(const QModel& online, const QModel& target,
                                                const bootstrap::TransitionBatch& batch,
                                                const bootstrap::AnnotationBatch& annotations, double gamma,
                                                std::vector<Bucket> buckets = default_buckets(),
                                                bool mask_actions = false);

struct CosineResult {
  std::optional<double> value;
  std::string diagnostic;
};

/// Cosine between the gradients of two losses over the named parameters. Each callback
/// builds its own graph; gradients of `params` are cleared before and after.
CosineResult grad_cosine(ad::ParamStore<float>& params, std::span<const std::string> names,
                         const std::function<ad::Var<float>()>& loss_a, const std::function<ad::Var<float>()>& loss_b);

struct GapReport {
  double max_abs = 0.0;
  double mean_abs = 0.0;
  std::size_t count = 0;  // (observation, action, annotation) entries compared
};

/// |sigmoid(value logits) - Qbar| over every observation and every action valid from all
/// of its states. The model must be CLIP-style over the oracle's annotation vocabulary.
GapReport oracle_value_gap(const QModel& model, const oracle::DiscreteMdp& mdp, const oracle::ObservationQ& obs_q,
                           int resolution);

struct EvalConfig {
  std::uint64_t seed = 0;
  std::vector<synth::Scene> probe_scenes;
  ProbeDataConfig probe;
  ProbeConfig probe_fit;
  int held_out_batches = 2;
  /// Optional oracle comparison.
  const oracle::DiscreteMdp* mdp = nullptr;
  const oracle::ObservationQ* obs_q = nullptr;
};

struct EvalReport {
  long step = 0;
  std::vector<ProbeReport> probes;
  std::vector<Bucket> buckets;
  CosineResult grad_cosine;
  std::optional<GapReport> oracle_gap;

  std::string to_json() const;
};

/// Every diagnostic for the trainer's current online/EMA pair. Held-out batches are drawn
/// from the trainer's scenes with steps offset far beyond the training horizon.
EvalReport evaluate(bootstrap::Trainer& trainer, const EvalConfig& cfg);

/// Writes a CSV table; fields containing commas or quotes are quoted.
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

}  // namespace annoboot::eval
