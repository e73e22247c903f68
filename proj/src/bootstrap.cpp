#include "annoboot/bootstrap.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace annoboot::bootstrap {

using geometry::ActionTokens;

void validate(const TrainConfig& cfg) {
  models::validate(cfg.model);
  if (!(cfg.gamma >= 0.0 && cfg.gamma < 1.0)) throw TrainConfigError("gamma must lie in [0, 1)");
  if (cfg.fixed_windows.empty() && cfg.views < 2) throw TrainConfigError("views (N) must be >= 2");
  if (!cfg.fixed_windows.empty() && cfg.fixed_windows.size() < 2) throw TrainConfigError("need >= 2 fixed windows");
  if (cfg.batch_images < 1) throw TrainConfigError("batch_images must be >= 1");
  if (cfg.reward_batch < 2) throw TrainConfigError("reward_batch must be >= 2");
  if (cfg.steps < 1) throw TrainConfigError("steps must be >= 1");
  if (cfg.warmup < 0) throw TrainConfigError("warmup must be >= 0");
  if (!(cfg.lr > 0.0) || !(cfg.weight_decay >= 0.0)) throw TrainConfigError("lr > 0 and weight_decay >= 0 required");
  if (!(cfg.tau_base >= 0.0 && cfg.tau_base <= 1.0)) throw TrainConfigError("tau_base must lie in [0, 1]");
  if (cfg.pair_iou_band) {
    const auto [lo, hi] = *cfg.pair_iou_band;
    if (!(lo >= 0.0 && lo < hi && hi <= 1.0)) throw TrainConfigError("pair_iou_band must satisfy 0 <= lo < hi <= 1");
    if (!cfg.fixed_windows.empty()) throw TrainConfigError("pair_iou_band cannot be combined with fixed_windows");
    if (cfg.max_rejections < 1) throw TrainConfigError("max_rejections must be >= 1");
  }
  try {
    geometry::validate(cfg.bootstrap_crop);
    geometry::validate(cfg.reward_crop);
  } catch (const geometry::GeometryError& e) {
    throw TrainConfigError(e.what());
  }
}

models::ActionQueries TransitionBatch::queries() const {
  models::ActionQueries q;
  const auto n = static_cast<std::size_t>(views);
  q.source.reserve(actions.size());
  for (std::size_t idx = 0; idx < actions.size(); ++idx) q.source.push_back(static_cast<std::int64_t>(idx / n));
  q.actions = actions;
  return q;
}

namespace {

void fill_actions(TransitionBatch& tb) {
  const auto n = static_cast<std::size_t>(tb.views);
  tb.actions.clear();
  tb.actions.reserve(tb.crops.size() * n);
  for (std::size_t b = 0; b < static_cast<std::size_t>(tb.images); ++b) {
    for (std::size_t j = 0; j < n; ++j) {
      const BBox& src = tb.crops[b * n + j].box;
      for (std::size_t k = 0; k < n; ++k) {
        tb.actions.push_back(j == k ? geometry::identity_tokens()
                                    : geometry::discretize_action(geometry::relative_bbox(src, tb.crops[b * n + k].box)));
      }
    }
  }
}

std::int64_t sample_categorical(Rng& rng, const std::vector<double>& p) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return static_cast<std::int64_t>(i);
  }
  // Rounding left u above the running total: take the last entry with mass.
  for (std::size_t i = p.size(); i-- > 0;) {
    if (p[i] > 0.0) return static_cast<std::int64_t>(i);
  }
  return 0;
}

BBox draw_window(Rng& rng, const geometry::CropConfig& crop, std::span<const BBox> windows) {
  if (windows.empty()) return geometry::sample_crop(rng, crop);
  return windows[rng.below(windows.size())];
}

}  // namespace

TransitionBatch build_transitions(Rng& rng, std::span<const synth::Scene> images, int n,
                                  const geometry::CropConfig& crop, int resolution) {
  if (n < 2) throw TrainConfigError("build_transitions: N must be >= 2");
  TransitionBatch tb;
  tb.images = static_cast<int>(images.size());
  tb.views = n;
  for (const auto& scene : images) {
    for (int j = 0; j < n; ++j) tb.crops.push_back(synth::render_view(scene, geometry::sample_crop(rng, crop), resolution));
  }
  fill_actions(tb);
  return tb;
}

TransitionBatch build_transitions(std::span<const synth::Scene> images, std::span<const BBox> windows,
                                  int resolution) {
  if (windows.size() < 2) throw TrainConfigError("build_transitions: need >= 2 windows");
  TransitionBatch tb;
  tb.images = static_cast<int>(images.size());
  tb.views = static_cast<int>(windows.size());
  for (const auto& scene : images) {
    for (const auto& w : windows) tb.crops.push_back(synth::render_view(scene, w, resolution));
  }
  fill_actions(tb);
  return tb;
}

std::optional<std::pair<BBox, BBox>> sample_pair_in_band(Rng& rng, const geometry::CropConfig& crop, double lo,
                                                         double hi, long max_tries) {
  for (long t = 0; t < max_tries; ++t) {
    const BBox a = geometry::sample_crop(rng, crop);
    const BBox b = geometry::sample_crop(rng, crop);
    const double v = geometry::iou(a, b);
    if (v >= lo && (v < hi || (hi >= 1.0 && v <= hi))) return std::make_pair(a, b);
  }
  return std::nullopt;
}

AnnotationBatch build_annotations(Rng& rng, models::Variant variant, std::span<const synth::Scene> images,
                                  const geometry::CropConfig& crop, std::span<const BBox> windows, int resolution) {
  AnnotationBatch ab;
  for (const auto& scene : images) {
    const BBox box = draw_window(rng, crop, windows);
    ab.first.push_back(synth::render_view(scene, box, resolution));
    if (variant == models::Variant::Clip) {
      ab.ids.push_back(sample_categorical(rng, synth::true_annotation_dist(scene, box)));
    } else {
      ab.second.push_back(synth::render_view(scene, draw_window(rng, crop, windows), resolution));
    }
  }
  return ab;
}

template <typename T>
Tensor<T> mix_targets(const Tensor<T>& reward_probs, const Tensor<T>& value_logits, double gamma) {
  const auto& r = reward_probs.shape();
  const auto& q = value_logits.shape();
  if (r.size() != 3 || q.size() != 4 || q[0] != r[0] || q[1] != r[1] || q[2] < 1 || q[3] != r[2]) {
    throw ad::ShapeError("mix_targets: reward probs " + ad::to_string(r) + " vs value logits " + ad::to_string(q));
  }
  const std::size_t rows = r[0] * r[1], n = q[2], l = r[2];
  Tensor<T> out(r);
  for (std::size_t row = 0; row < rows; ++row) {
    for (std::size_t c = 0; c < l; ++c) {
      T best = value_logits[(row * n) * l + c];
      for (std::size_t k = 1; k < n; ++k) best = std::max(best, value_logits[(row * n + k) * l + c]);
      const double sig = best >= T(0) ? 1.0 / (1.0 + std::exp(-static_cast<double>(best)))
                                      : std::exp(static_cast<double>(best)) / (1.0 + std::exp(static_cast<double>(best)));
      out[row * l + c] = static_cast<T>((1.0 - gamma) * static_cast<double>(reward_probs[row * l + c]) + gamma * sig);
    }
  }
  return out;
}

template <typename T>
Tensor<T> expand_targets(const Tensor<T>& targets) {
  if (targets.rank() != 3) throw ad::ShapeError("expand_targets: expected [B, N, L], got " + ad::to_string(targets.shape()));
  const std::size_t b = targets.dim(0), n = targets.dim(1), l = targets.dim(2);
  Tensor<T> out({b, n, n, l});
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const T* src = targets.data() + (bi * n + j) * l;
        std::copy(src, src + l, out.data() + ((bi * n + i) * n + j) * l);
      }
    }
  }
  return out;
}

template <typename T>
Var<T> value_loss(const Var<T>& value_logits, const Tensor<T>& targets) {
  const Tensor<T> full = expand_targets(targets);
  if (full.size() != value_logits.size()) {
    throw ad::ShapeError("value_loss: logits " + ad::to_string(value_logits.shape()) + " vs expanded targets " +
                         ad::to_string(full.shape()));
  }
  return ad::bce_with_logits(value_logits, full.reshaped(value_logits.shape()));
}

template Tensor<float> mix_targets(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> mix_targets(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> expand_targets(const Tensor<float>&);
template Tensor<double> expand_targets(const Tensor<double>&);
template Var<float> value_loss(const Var<float>&, const Tensor<float>&);
template Var<double> value_loss(const Var<double>&, const Tensor<double>&);

AnnotationContext value_annotations(const QModel& model, const std::optional<models::ViewEncoding>& annotation_views) {
  const auto& cfg = model.config();
  AnnotationContext ctx;
  switch (cfg.variant) {
    case models::Variant::Clip: {
      std::vector<std::int64_t> ids(static_cast<std::size_t>(cfg.vocab_size));
      for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(i);
      ctx.embedding = model.embed_annotation_ids(ids);
      break;
    }
    case models::Variant::SimClr:
      if (!annotation_views) throw TrainConfigError("simclr value annotations need encoded annotation views");
      ctx.embedding = model.embed_annotation_views(*annotation_views);
      break;
    case models::Variant::Dino:
      ctx.embedding = model.embed_prototypes();
      break;
  }
  ctx.count = ctx.embedding.value.shape()[0];
  return ctx;
}

Tensor<float> compute_targets(const QModel& target_model, const TransitionBatch& batch,
                              const AnnotationBatch& annotations, double gamma, bool mask_actions) {
  ad::NoGradGuard guard;
  const auto enc = target_model.encode(batch.pixels());
  std::optional<models::ViewEncoding> ann_views;
  if (target_model.config().variant == models::Variant::SimClr) {
    ann_views = target_model.encode(models::stack_views(annotations.second));
  }
  const auto ann = value_annotations(target_model, ann_views);
  const auto b = static_cast<std::size_t>(batch.images), n = static_cast<std::size_t>(batch.views);
  const auto probs = rewards::reward_probs(target_model, enc, ann.embedding).reshaped({b, n, ann.count});
  const auto q = target_model.value_logits(enc, batch.queries(), ann.embedding, mask_actions)
                     .value()
                     .reshaped({b, n, n, ann.count});
  return mix_targets(probs, q, gamma);
}

std::string StepMetrics::to_json() const {
  nlohmann::json j = {{"step", step}, {"reward_loss", reward_loss}, {"value_loss", value_loss},
                      {"tau", tau},   {"gamma", gamma},             {"lr", lr},
                      {"wall_ms", wall_ms}, {"grad_norm", grad_norm}, {"max_abs_logit", max_abs_logit}};
  return j.dump();
}

Trainer::Trainer(TrainConfig cfg, std::vector<synth::Scene> scenes)
    : cfg_(std::move(cfg)),
      scenes_(std::move(scenes)),
      online_(cfg_.model, derive_seed(cfg_.seed, 0, 0xC0FFEE)),
      ema_(online_.clone()),
      dino_(static_cast<std::size_t>(cfg_.model.prototypes)) {
  validate(cfg_);
  if (scenes_.empty()) throw TrainConfigError("no training scenes");
  if (cfg_.model.variant == models::Variant::Clip && cfg_.model.vocab_size != scenes_.front().annotations()) {
    throw TrainConfigError("vocab_size " + std::to_string(cfg_.model.vocab_size) + " must equal scene annotations " +
                           std::to_string(scenes_.front().annotations()));
  }
  ema_.params().set_requires_grad(false);
}

std::vector<synth::Scene> Trainer::pick_scenes(long step, int count, std::uint64_t stream) const {
  Rng rng(derive_seed(cfg_.seed, static_cast<std::uint64_t>(step), stream));
  std::vector<synth::Scene> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(scenes_[rng.below(scenes_.size())]);
  return out;
}

TransitionBatch Trainer::transitions_at(long step) const {
  const auto images = pick_scenes(step, cfg_.batch_images, 1);
  const int r = cfg_.model.backbone.resolution;
  if (!cfg_.fixed_windows.empty()) return build_transitions(images, cfg_.fixed_windows, r);
  Rng rng(derive_seed(cfg_.seed, static_cast<std::uint64_t>(step), 2));
  if (cfg_.pair_iou_band) {
    const auto [lo, hi] = *cfg_.pair_iou_band;
    TransitionBatch tb;
    tb.images = static_cast<int>(images.size());
    tb.views = 2;
    for (const auto& scene : images) {
      const auto pair = sample_pair_in_band(rng, cfg_.bootstrap_crop, lo, hi, cfg_.max_rejections);
      if (!pair) {
        throw TrainConfigError("no crop pair with IoU in [" + std::to_string(lo) + ", " + std::to_string(hi) +
                               ") after " + std::to_string(cfg_.max_rejections) + " draws");
      }
      tb.crops.push_back(synth::render_view(scene, pair->first, r));
      tb.crops.push_back(synth::render_view(scene, pair->second, r));
    }
    fill_actions(tb);
    return tb;
  }
  return build_transitions(rng, images, cfg_.views, cfg_.bootstrap_crop, r);
}

AnnotationBatch Trainer::annotations_at(long step) const {
  const auto images = pick_scenes(step, cfg_.reward_batch, 3);
  Rng rng(derive_seed(cfg_.seed, static_cast<std::uint64_t>(step), 4));
  return build_annotations(rng, cfg_.model.variant, images, cfg_.reward_crop, cfg_.fixed_windows,
                           cfg_.model.backbone.resolution);
}

namespace {

double max_abs(const Tensor<float>& t) {
  double m = 0.0;
  for (float v : t.vec()) m = std::max(m, static_cast<double>(std::fabs(v)));
  return m;
}

}  // namespace

Trainer::Losses Trainer::losses_at(const TransitionBatch& tb, const AnnotationBatch& ab) {
  const auto& ab_cfg = cfg_.ablations;
  const auto variant = cfg_.model.variant;
  Losses out;

  std::optional<models::ViewEncoding> ann_views;
  const bool need_reward = !ab_cfg.no_annotation_loss;
  if (variant == models::Variant::Clip) {
    if (need_reward) {
      const auto enc_r = online_.encode(models::stack_views(ab.first));
      auto logits = online_.reward_logits(enc_r, online_.embed_annotation_ids(ab.ids));
      out.max_abs_logit = max_abs(logits.value());
      out.reward = rewards::clip_loss_from_logits(logits);
    }
  } else if (variant == models::Variant::SimClr) {
    ann_views = online_.encode(models::stack_views(ab.second));
    if (need_reward) out.reward = rewards::simclr_reward_loss(online_, online_.encode(models::stack_views(ab.first)), *ann_views);
  } else if (need_reward) {
    out.reward = rewards::dino_reward_loss(online_, ema_, dino_, models::stack_views(ab.first),
                                           models::stack_views(ab.second));
  }

  const double gamma = ab_cfg.no_propagation ? 0.0 : cfg_.gamma;
  const QModel& target_model = ab_cfg.no_target_network ? online_ : ema_;
  const Tensor<float> targets = compute_targets(target_model, tb, ab, gamma, ab_cfg.no_action_tokens);

  const auto enc = online_.encode(tb.pixels());
  const auto ann = value_annotations(online_, ann_views);
  auto logits = online_.value_logits(enc, tb.queries(), ann.embedding, ab_cfg.no_action_tokens);
  out.max_abs_logit = std::max(out.max_abs_logit, max_abs(logits.value()));
  out.value = value_loss(logits, targets);
  return out;
}

StepMetrics Trainer::step() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto tb = transitions_at(step_);
  const auto ab = annotations_at(step_);

  online_.params().zero_grad();
  Losses l = losses_at(tb, ab);
  StepMetrics m;
  m.step = step_;
  m.reward_loss = l.reward.node() ? static_cast<double>(l.reward.value().item()) : 0.0;
  m.value_loss = l.value.value().item();
  m.max_abs_logit = l.max_abs_logit;
  if (!std::isfinite(m.reward_loss) || !std::isfinite(m.value_loss)) {
    std::ostringstream os;
    os << "non-finite loss at step " << step_ << ": reward_loss=" << m.reward_loss << " value_loss=" << m.value_loss
       << " max|logit|=" << m.max_abs_logit;
    throw NumericError(os.str());
  }
  auto total = l.reward.node() ? ad::add(l.reward, l.value) : l.value;
  ad::backward(total);

  m.lr = ad::lr_schedule(cfg_.lr, step_, cfg_.warmup, cfg_.steps);
  ad::AdamWConfig opt{m.lr, cfg_.weight_decay};
  opt.clip_norm = cfg_.clip_norm;
  try {
    m.grad_norm = ad::adamw_step(online_.params(), adam_, opt);
  } catch (const ad::NonFiniteError& e) {
    std::ostringstream os;
    os << "step " << step_ << ": " << e.what() << " (reward_loss=" << m.reward_loss << " value_loss=" << m.value_loss
       << " max|logit|=" << m.max_abs_logit << ")";
    throw NumericError(os.str());
  }
  online_.normalize_prototypes();
  m.tau = ad::tau_schedule(cfg_.tau_kind, std::min(step_, cfg_.steps), cfg_.steps, cfg_.tau_base);
  ad::ema_update(ema_.params(), online_.params(), m.tau);
  m.gamma = cfg_.ablations.no_propagation ? 0.0 : cfg_.gamma;
  ++step_;
  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

double Trainer::ema_gradient_magnitude(long step) {
  const auto tb = transitions_at(step);
  const auto ab = annotations_at(step);
  const rewards::DinoState saved = dino_;
  online_.params().zero_grad();
  ema_.params().zero_grad();
  ema_.params().set_requires_grad(true);
  double worst = 0.0;
  {
    Losses l = losses_at(tb, ab);
    auto total = l.reward.node() ? ad::add(l.reward, l.value) : l.value;
    ad::backward(total);
    for (const auto& e : ema_.params().entries()) {
      worst = std::max(worst, max_abs(e.var.grad()));
    }
  }
  ema_.params().set_requires_grad(false);
  ema_.params().zero_grad();
  online_.params().zero_grad();
  dino_ = saved;
  return worst;
}

std::pair<Var<float>, Var<float>> Trainer::evaluate_losses(const TransitionBatch& tb, const AnnotationBatch& ab) {
  const rewards::DinoState saved = dino_;
  Losses l = losses_at(tb, ab);
  dino_ = saved;
  return {l.reward, l.value};
}

void Trainer::save_checkpoint(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::vector<std::pair<std::string, Tensor<float>>> ts;
  for (const auto& e : online_.params().entries()) ts.emplace_back("online/" + e.name, e.var.value());
  for (const auto& e : ema_.params().entries()) ts.emplace_back("ema/" + e.name, e.var.value());
  const auto& entries = online_.params().entries();
  for (std::size_t i = 0; i < adam_.m.size(); ++i) {
    ts.emplace_back("adam_m/" + entries[i].name, adam_.m[i]);
    ts.emplace_back("adam_v/" + entries[i].name, adam_.v[i]);
  }
  ts.emplace_back("dino/center", dino_.center);
  save_tensors(dir / "checkpoint.bin", dir / "checkpoint.json", ts,
               {{"step", std::to_string(step_)},
                {"adam_step", std::to_string(adam_.step)},
                {"variant", models::to_string(cfg_.model.variant)},
                {"seed", std::to_string(cfg_.seed)}});
}

void Trainer::load_checkpoint(const std::filesystem::path& dir) {
  const auto loaded = ad::load_tensors(dir / "checkpoint.bin", dir / "checkpoint.json");
  auto fetch = [&](const std::string& name, const ad::Shape& shape) -> const Tensor<float>& {
    const auto it = loaded.tensors.find(name);
    if (it == loaded.tensors.end()) throw TrainConfigError("checkpoint is missing tensor " + name);
    if (it->second.shape() != shape) {
      throw ad::ShapeError("checkpoint tensor " + name + " has shape " + ad::to_string(it->second.shape()) +
                           ", model expects " + ad::to_string(shape));
    }
    return it->second;
  };
  if (loaded.meta.at("variant") != models::to_string(cfg_.model.variant)) {
    throw TrainConfigError("checkpoint variant " + loaded.meta.at("variant") + " does not match config");
  }
  for (auto& e : online_.params().entries()) e.var.mutable_value() = fetch("online/" + e.name, e.var.shape());
  for (auto& e : ema_.params().entries()) e.var.mutable_value() = fetch("ema/" + e.name, e.var.shape());
  adam_ = {};
  adam_.step = std::stol(loaded.meta.at("adam_step"));
  if (adam_.step > 0) {
    for (const auto& e : online_.params().entries()) {
      adam_.m.push_back(fetch("adam_m/" + e.name, e.var.shape()));
      adam_.v.push_back(fetch("adam_v/" + e.name, e.var.shape()));
    }
  }
  dino_.center = fetch("dino/center", dino_.center.shape());
  step_ = std::stol(loaded.meta.at("step"));
}

}  // namespace annoboot::bootstrap
