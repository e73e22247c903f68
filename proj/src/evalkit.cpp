#include "annoboot/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <Eigen/Core>
#include <json.hpp>

#include "annoboot/rng.hpp"

namespace annoboot::eval {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

constexpr long kHeldOutStep = 1'000'000'000L;

std::string fnv_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

template <typename T>
std::size_t argmax_row(const T* row, std::size_t n) {
  return static_cast<std::size_t>(std::max_element(row, row + n) - row);
}

/// Mean cross-entropy and gradient for W [K, d], b [K] at standardized rows Z.
double logistic_grad(const Mat& z, const std::vector<int>& y, const Mat& w, const Vec& b, double l2, Mat& gw, Vec& gb) {
  Mat logits = z * w.transpose();
  logits.rowwise() += b.transpose();
  const auto m = static_cast<double>(z.rows());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    logits.row(i).array() -= mx;
    const double lse = std::log(logits.row(i).array().exp().sum());
    loss -= logits(i, y[static_cast<std::size_t>(i)]) - lse;
    logits.row(i) = (logits.row(i).array() - lse).exp().matrix();
    logits(i, y[static_cast<std::size_t>(i)]) -= 1.0;
  }
  gw = logits.transpose() * z / m + l2 * w;
  gb = logits.colwise().sum().transpose() / m;
  return loss / m + 0.5 * l2 * w.squaredNorm();
}

void check_buckets(const std::vector<Bucket>& buckets) {
  if (buckets.empty() || buckets.front().lo != 0.0 || buckets.back().hi != 1.0) {
    throw EvalError("buckets must cover [0, 1]");
  }
  for (std::size_t i = 0; i < buckets.size(); ++i) {
    if (!(buckets[i].lo < buckets[i].hi)) throw EvalError("bucket bounds must increase");
    if (i > 0 && buckets[i].lo != buckets[i - 1].hi) throw EvalError("buckets must be contiguous");
  }
}

std::size_t bucket_of(const std::vector<Bucket>& buckets, double v) {
  for (std::size_t i = 0; i < buckets.size(); ++i) {
    if (v >= buckets[i].lo && v < buckets[i].hi) return i;
  }
  return buckets.size() - 1;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

int LogisticFit::predict(std::span<const double> x) const {
  if (x.size() != dim) throw EvalError("feature row has wrong dimension");
  std::size_t best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < classes; ++k) {
    double v = b[k];
    for (std::size_t j = 0; j < dim; ++j) v += w[k * dim + j] * (x[j] - mean[j]) / scale[j];
    if (v > best_v) {
      best_v = v;
      best = k;
    }
  }
  return static_cast<int>(best);
}

LogisticFit fit_logistic(std::span<const double> features, std::size_t dim, std::span<const int> labels,
                         const ProbeConfig& cfg) {
  if (dim == 0 || features.size() != labels.size() * dim) throw EvalError("features must be [M, d] with one label per row");
  if (cfg.l2 < 0.0 || cfg.max_iter < 1 || !(cfg.grad_tol > 0.0)) throw EvalError("invalid probe config");
  std::set<int> present(labels.begin(), labels.end());
  if (present.size() < 2) throw EvalError("probe needs at least two classes in the training split");
  if (*present.begin() < 0) throw EvalError("labels must be non-negative");

  LogisticFit fit;
  fit.dim = dim;
  fit.classes = static_cast<std::size_t>(*present.rbegin()) + 1;
  const auto m = static_cast<Eigen::Index>(labels.size()), d = static_cast<Eigen::Index>(dim);
  const auto k = static_cast<Eigen::Index>(fit.classes);
  Mat z = Eigen::Map<const Mat>(features.data(), m, d);
  const Vec mean = z.colwise().mean().transpose();
  Vec scale = ((z.rowwise() - mean.transpose()).array().square().colwise().sum() / static_cast<double>(m)).sqrt().matrix().transpose();
  for (Eigen::Index j = 0; j < d; ++j) {
    if (scale(j) < 1e-12) scale(j) = 1.0;
  }
  z = (z.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
  fit.mean.assign(mean.data(), mean.data() + d);
  fit.scale.assign(scale.data(), scale.data() + d);
  const std::vector<int> y(labels.begin(), labels.end());

  // Smoothness of the cross-entropy is at most half the top eigenvalue of the
  // augmented second-moment matrix.
  Mat aug(m, d + 1);
  aug << z, Mat::Ones(m, 1);
  const Mat cov = aug.transpose() * aug / static_cast<double>(m);
  Vec v = Vec::Ones(d + 1).normalized();
  double top = 0.0;
  for (int it = 0; it < 200; ++it) {
    const Vec nv = cov * v;
    top = nv.norm();
    if (top == 0.0) break;
    v = nv / top;
  }
  const double lip = 0.5 * top + cfg.l2;
  const double step = 1.0 / lip;
  const double momentum = cfg.l2 > 0.0 ? (std::sqrt(lip) - std::sqrt(cfg.l2)) / (std::sqrt(lip) + std::sqrt(cfg.l2)) : 0.0;

  Mat w = Mat::Zero(k, d), w_prev = w, gw;
  Vec b = Vec::Zero(k), b_prev = b, gb;
  int it = 0;
  for (; it < cfg.max_iter; ++it) {
    fit.loss = logistic_grad(z, y, w, b, cfg.l2, gw, gb);
    fit.grad_norm = std::sqrt(gw.squaredNorm() + gb.squaredNorm());
    if (fit.grad_norm <= cfg.grad_tol) break;
    const double beta = cfg.l2 > 0.0 ? momentum : static_cast<double>(it) / (it + 3.0);
    const Mat yw = w + beta * (w - w_prev);
    const Vec yb = b + beta * (b - b_prev);
    logistic_grad(z, y, yw, yb, cfg.l2, gw, gb);
    w_prev = w;
    b_prev = b;
    w = yw - step * gw;
    b = yb - step * gb;
  }
  if (it == cfg.max_iter) {
    fit.loss = logistic_grad(z, y, w, b, cfg.l2, gw, gb);
    fit.grad_norm = std::sqrt(gw.squaredNorm() + gb.squaredNorm());
  }
  fit.iterations = it;
  fit.w.assign(w.data(), w.data() + w.size());
  fit.b.assign(b.data(), b.data() + b.size());
  return fit;
}

ProbeReport linear_probe(const std::string& task, std::span<const double> features, std::size_t dim,
                         std::span<const int> labels, const std::vector<bool>& is_test, const ProbeConfig& cfg) {
  if (is_test.size() != labels.size() || features.size() != labels.size() * dim) {
    throw EvalError("probe inputs disagree on row count");
  }
  std::vector<double> train_x;
  std::vector<int> train_y;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (is_test[i]) continue;
    train_x.insert(train_x.end(), features.begin() + static_cast<std::ptrdiff_t>(i * dim),
                   features.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
    train_y.push_back(labels[i]);
  }
  const LogisticFit fit = fit_logistic(train_x, dim, train_y, cfg);
  ProbeReport rep;
  rep.task = task;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!is_test[i]) continue;
    ++rep.samples;
    if (fit.predict(features.subspan(i * dim, dim)) == labels[i]) ++correct;
  }
  if (rep.samples == 0) throw EvalError("probe has no held-out rows");
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(rep.samples);
  std::ostringstream key;
  key << task << ";l2=" << cfg.l2 << ";max_iter=" << cfg.max_iter << ";grad_tol=" << cfg.grad_tol;
  rep.config_hash = fnv_hex(key.str());
  rep.iterations = fit.iterations;
  rep.grad_norm = fit.grad_norm;
  return rep;
}

const char* to_string(ProbeTask t) {
  return t == ProbeTask::DominantGlyph ? "dominant_glyph" : "glyph_at_offset";
}

ProbeData probe_data(ProbeTask task, std::span<const synth::Scene> scenes, int resolution, std::uint64_t seed,
                     const ProbeDataConfig& cfg) {
  if (cfg.test_every < 2) throw EvalError("test_every must be >= 2");
  ProbeData out;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& scene = scenes[i];
    const bool test = i % static_cast<std::size_t>(cfg.test_every) == 0;
    auto add = [&](const geometry::BBox& box, int label) {
      out.views.push_back(synth::render_view(scene, box, resolution));
      out.labels.push_back(label);
      out.is_test.push_back(test);
    };
    if (task == ProbeTask::DominantGlyph) {
      Rng rng(derive_seed(seed, i, 0xD0311));
      for (int c = 0; c < cfg.per_scene; ++c) {
        const auto box = geometry::sample_crop(rng, cfg.crop);
        const auto p = synth::true_annotation_dist(scene, box);
        add(box, static_cast<int>(argmax_row(p.data(), p.size())));
      }
    } else {
      if (scene.grid < 2) throw EvalError("glyph-at-offset probe needs grid >= 2");
      if (cfg.offset_dy < 0 || cfg.offset_dy > 1 || cfg.offset_dx < 0 || cfg.offset_dx > 1) {
        throw EvalError("probe offset must lie inside a 2x2-cell window");
      }
      const double g = scene.grid;
      for (int r = 0; r + 1 < scene.grid; ++r) {
        for (int c = 0; c + 1 < scene.grid; ++c) {
          const int glyph = scene.at(r + cfg.offset_dy, c + cfg.offset_dx);
          add(geometry::BBox{r / g, c / g, (r + 2) / g, (c + 2) / g},
              glyph == synth::kEmpty ? scene.background_index() : glyph);
        }
      }
    }
  }
  return out;
}

std::vector<double> view_features(const QModel& model, std::span<const synth::View> views, std::size_t batch) {
  ad::NoGradGuard guard;
  std::vector<double> out;
  for (std::size_t start = 0; start < views.size(); start += batch) {
    const auto chunk = views.subspan(start, std::min(batch, views.size() - start));
    const auto enc = model.encode(models::stack_views(chunk));
    const auto& f = enc.features.value();
    out.insert(out.end(), f.data(), f.data() + f.size());
  }
  return out;
}

std::vector<double> offset_value_features(const QModel& model, std::span<const synth::View> views,
                                          const ProbeDataConfig& cfg, bool mask_actions, std::size_t batch) {
  ad::NoGradGuard guard;
  std::vector<double> out;
  for (std::size_t start = 0; start < views.size(); start += batch) {
    const auto chunk = views.subspan(start, std::min(batch, views.size() - start));
    models::ActionQueries q;
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const auto& b = chunk[i].box;
      const double h = b.height() / 2, w = b.width() / 2;
      const geometry::BBox cell{b.y_min + cfg.offset_dy * h, b.x_min + cfg.offset_dx * w,
                                b.y_min + (cfg.offset_dy + 1) * h, b.x_min + (cfg.offset_dx + 1) * w};
      q.source.push_back(static_cast<std::int64_t>(i));
      q.actions.push_back(geometry::discretize_action(geometry::relative_bbox(b, cell)));
    }
    const auto enc = model.encode(models::stack_views(chunk));
    const auto& f = model.decode_actions(enc, q, mask_actions).value();
    out.insert(out.end(), f.data(), f.data() + f.size());
  }
  return out;
}

std::vector<Bucket> default_buckets() { return {{0.0, 0.1}, {0.1, 0.3}, {0.3, 0.6}, {0.6, 1.0}}; }

std::vector<Bucket> bucketed_bootstrap_accuracy(const QModel& online, const QModel& target,
                                                const bootstrap::TransitionBatch& batch,
                                                const bootstrap::AnnotationBatch& annotations, double gamma,
                                                std::vector<Bucket> buckets, bool mask_actions) {
  check_buckets(buckets);
  const auto targets = bootstrap::compute_targets(target, batch, annotations, gamma, mask_actions);
  ad::NoGradGuard guard;
  std::optional<models::ViewEncoding> ann_views;
  if (online.config().variant == models::Variant::SimClr) {
    ann_views = online.encode(models::stack_views(annotations.second));
  }
  const auto ctx = bootstrap::value_annotations(online, ann_views);
  const auto logits =
      online.value_logits(online.encode(batch.pixels()), batch.queries(), ctx.embedding, mask_actions).value();
  const auto n = static_cast<std::size_t>(batch.views), l = ctx.count;
  for (std::size_t b = 0; b < static_cast<std::size_t>(batch.images); ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const auto pred = argmax_row(logits.data() + ((b * n + i) * n + j) * l, l);
        const auto want = argmax_row(targets.data() + (b * n + j) * l, l);
        const double v = geometry::iou(batch.crops[b * n + i].box, batch.crops[b * n + j].box);
        auto& bucket = buckets[bucket_of(buckets, v)];
        ++bucket.count;
        bucket.iou_sum += v;
        if (pred == want) ++bucket.agree;
      }
    }
  }
  return buckets;
}

CosineResult grad_cosine(ad::ParamStore<float>& params, std::span<const std::string> names,
                         const std::function<ad::Var<float>()>& loss_a, const std::function<ad::Var<float>()>& loss_b) {
  if (names.empty()) throw EvalError("grad_cosine needs at least one parameter");
  auto flat_grad = [&](const std::function<ad::Var<float>()>& fn, std::vector<double>& out) {
    params.zero_grad();
    const auto loss = fn();
    if (!loss.defined()) return false;
    ad::backward(loss);
    for (const auto& name : names) {
      const auto g = params.get(name).grad();
      out.insert(out.end(), g.data(), g.data() + g.size());
    }
    params.zero_grad();
    return true;
  };
  CosineResult res;
  std::vector<double> ga, gb;
  if (!flat_grad(loss_a, ga) || !flat_grad(loss_b, gb)) {
    res.diagnostic = "loss disabled";
    return res;
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < ga.size(); ++i) {
    dot += ga[i] * gb[i];
    na += ga[i] * ga[i];
    nb += gb[i] * gb[i];
  }
  if (na == 0.0 || nb == 0.0) {
    res.diagnostic = na == 0.0 ? "zero gradient for first loss" : "zero gradient for second loss";
    return res;
  }
  res.value = std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
  return res;
}

GapReport oracle_value_gap(const QModel& model, const oracle::DiscreteMdp& mdp, const oracle::ObservationQ& obs_q,
                           int resolution) {
  const auto& cfg = model.config();
  if (mdp.windows.empty() || mdp.scenes.empty()) throw EvalError("oracle gap needs a lattice MDP");
  if (cfg.variant != models::Variant::Clip || cfg.vocab_size != mdp.annotations) {
    throw EvalError("oracle gap needs a CLIP-style model over the oracle's annotation vocabulary");
  }
  if (resolution != cfg.backbone.resolution) throw EvalError("render resolution differs from the model input");
  if (obs_q.q.actions != mdp.actions || obs_q.q.annotations != mdp.annotations ||
      obs_q.valid.size() != static_cast<std::size_t>(obs_q.observations) * static_cast<std::size_t>(mdp.actions)) {
    throw EvalError("observation table does not match the MDP");
  }

  ad::NoGradGuard guard;
  std::vector<synth::View> views;
  for (int o = 0; o < obs_q.observations; ++o) {
    const int s = obs_q.representative[static_cast<std::size_t>(o)];
    views.push_back(synth::render_view(mdp.scenes[static_cast<std::size_t>(mdp.scene_of(s))],
                                       mdp.windows[static_cast<std::size_t>(mdp.window_of(s))], resolution));
  }
  models::ActionQueries queries;
  std::vector<std::pair<int, int>> pairs;
  for (int o = 0; o < obs_q.observations; ++o) {
    for (int a = 0; a < mdp.actions; ++a) {
      if (!obs_q.valid[static_cast<std::size_t>(o) * static_cast<std::size_t>(mdp.actions) + static_cast<std::size_t>(a)]) continue;
      queries.source.push_back(o);
      queries.actions.push_back(geometry::discretize_action(mdp.moves[static_cast<std::size_t>(a)]));
      pairs.emplace_back(o, a);
    }
  }
  if (pairs.empty()) throw EvalError("no action is valid from every aliased state");
  std::vector<std::int64_t> ids(static_cast<std::size_t>(mdp.annotations));
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(i);

  const auto logits =
      model.value_logits(model.encode(models::stack_views(views)), queries, model.embed_annotation_ids(ids)).value();
  GapReport rep;
  double total = 0.0;
  const auto l_n = static_cast<std::size_t>(mdp.annotations);
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    for (std::size_t l = 0; l < l_n; ++l) {
      const double pred = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[p * l_n + l])));
      const double err = std::fabs(pred - obs_q.q.at(pairs[p].first, pairs[p].second, static_cast<int>(l)));
      rep.max_abs = std::max(rep.max_abs, err);
      total += err;
      ++rep.count;
    }
  }
  rep.mean_abs = total / static_cast<double>(rep.count);
  return rep;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["step"] = step;
  j["probes"] = nlohmann::json::array();
  for (const auto& p : probes) {
    j["probes"].push_back({{"task", p.task},
                           {"accuracy", p.accuracy},
                           {"samples", p.samples},
                           {"config_hash", p.config_hash},
                           {"iterations", p.iterations},
                           {"grad_norm", p.grad_norm}});
  }
  j["buckets"] = nlohmann::json::array();
  for (const auto& b : buckets) {
    const auto acc = b.accuracy();
    j["buckets"].push_back({{"lo", b.lo},
                            {"hi", b.hi},
                            {"count", b.count},
                            {"accuracy", acc ? nlohmann::json(*acc) : nlohmann::json(nullptr)},
                            {"mean_iou", b.count ? nlohmann::json(b.iou_sum / static_cast<double>(b.count))
                                                 : nlohmann::json(nullptr)}});
  }
  j["grad_cosine"] = {{"value", grad_cosine.value ? nlohmann::json(*grad_cosine.value) : nlohmann::json(nullptr)},
                      {"diagnostic", grad_cosine.diagnostic}};
  if (oracle_gap) {
    j["oracle_gap"] = {{"max_abs", oracle_gap->max_abs}, {"mean_abs", oracle_gap->mean_abs}, {"count", oracle_gap->count}};
  } else {
    j["oracle_gap"] = nullptr;
  }
  return j.dump(2);
}

EvalReport evaluate(bootstrap::Trainer& trainer, const EvalConfig& cfg) {
  const auto& tcfg = trainer.config();
  EvalReport rep;
  rep.step = trainer.current_step();

  const auto& scenes = cfg.probe_scenes.empty() ? trainer.scenes() : cfg.probe_scenes;
  const int resolution = tcfg.model.backbone.resolution;
  const auto dim = static_cast<std::size_t>(tcfg.model.backbone.width);
  for (auto task : {ProbeTask::DominantGlyph, ProbeTask::GlyphAtOffset}) {
    if (task == ProbeTask::GlyphAtOffset && scenes.front().grid < 2) continue;
    const auto data = probe_data(task, scenes, resolution, cfg.seed, cfg.probe);
    const auto features = view_features(trainer.online(), data.views);
    rep.probes.push_back(linear_probe(to_string(task), features, dim, data.labels, data.is_test, cfg.probe_fit));
    if (task == ProbeTask::GlyphAtOffset) {
      const auto vf = offset_value_features(trainer.online(), data.views, cfg.probe, tcfg.ablations.no_action_tokens);
      rep.probes.push_back(linear_probe("glyph_at_offset_value", vf, static_cast<std::size_t>(tcfg.model.embed_dim),
                                        data.labels, data.is_test, cfg.probe_fit));
    }
  }

  const auto& abl = tcfg.ablations;
  const double gamma = abl.no_propagation ? 0.0 : tcfg.gamma;
  const QModel& target = abl.no_target_network ? trainer.online() : trainer.ema();
  rep.buckets = default_buckets();
  const long base = kHeldOutStep + static_cast<long>(cfg.seed % 1'000'000) * 1000;
  for (int k = 0; k < cfg.held_out_batches; ++k) {
    const auto tb = trainer.transitions_at(base + k);
    const auto ab = trainer.annotations_at(base + k);
    const auto part = bucketed_bootstrap_accuracy(trainer.online(), target, tb, ab, gamma, default_buckets(),
                                                  abl.no_action_tokens);
    for (std::size_t i = 0; i < part.size(); ++i) {
      rep.buckets[i].count += part[i].count;
      rep.buckets[i].agree += part[i].agree;
      rep.buckets[i].iou_sum += part[i].iou_sum;
    }
  }

  const auto tb = trainer.transitions_at(base);
  const auto ab = trainer.annotations_at(base);
  const auto names = trainer.online().backbone_parameter_names();
  rep.grad_cosine = grad_cosine(
      trainer.online().params(), names, [&] { return trainer.evaluate_losses(tb, ab).first; },
      [&] { return trainer.evaluate_losses(tb, ab).second; });

  if (cfg.mdp && cfg.obs_q) rep.oracle_gap = oracle_value_gap(trainer.online(), *cfg.mdp, *cfg.obs_q, resolution);
  return rep;
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  auto line = [&](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) out << (i ? "," : "") << csv_field(fields[i]);
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) {
    if (r.size() != header.size()) throw EvalError("CSV row width differs from header");
    line(r);
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace annoboot::eval
