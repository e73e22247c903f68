#include "annoboot/runconfig.hpp"

#include <fstream>
#include <set>

#include "annoboot/blob.hpp"
#include "annoboot/rng.hpp"

namespace annoboot::cli {

namespace {

using nlohmann::json;

constexpr std::uint64_t kSceneStream = 0x5CE7E;
constexpr std::uint64_t kProbeStream = 0x9B0BE;

/// Reads one JSON object, tracking which keys were consumed.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + "must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!j_.contains(key)) return fallback;
    return as<T>(key);
  }

  template <typename T>
  T require(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError("missing required field '" + full(key) + "'");
    return as<T>(key);
  }

  Reader sub(const std::string& key) {
    used_.insert(key);
    return Reader(j_.at(key), full(key));
  }

  /// Optional nested object; empty object when absent.
  Reader sub_or_empty(const std::string& key) {
    if (!j_.contains(key)) return Reader(empty(), full(key));
    return sub(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.count(k)) throw ConfigError("unknown field '" + full(k) + "'");
    }
  }

  std::string full(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  static const json& empty() {
    static const json e = json::object();
    return e;
  }
  std::string where(const std::string& key) const { return "field '" + (key.empty() ? path_ : full(key)) + "' "; }

  template <typename T>
  T as(const std::string& key) {
    used_.insert(key);
    const json& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where(key) + "must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where(key) + "must be an integer");
      if (std::is_unsigned_v<T> && v.get<long long>() < 0 && !v.is_number_unsigned()) {
        throw ConfigError(where(key) + "must be non-negative");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where(key) + "must be a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where(key) + "must be a string");
    }
    try {
      return v.get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + "has the wrong type");
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

geometry::CropConfig read_crop(Reader r, geometry::CropConfig c) {
  c.scale_min = r.get("scale_min", c.scale_min);
  c.scale_max = r.get("scale_max", c.scale_max);
  c.ratio_min = r.get("ratio_min", c.ratio_min);
  c.ratio_max = r.get("ratio_max", c.ratio_max);
  r.finish();
  return c;
}

json crop_json(const geometry::CropConfig& c) {
  return {{"scale_min", c.scale_min}, {"scale_max", c.scale_max}, {"ratio_min", c.ratio_min}, {"ratio_max", c.ratio_max}};
}

void set_ablation(bootstrap::Ablations& a, const std::string& name) {
  if (name == "no_action_tokens") a.no_action_tokens = true;
  else if (name == "no_propagation") a.no_propagation = true;
  else if (name == "no_target_network") a.no_target_network = true;
  else if (name == "no_annotation_loss") a.no_annotation_loss = true;
  else throw ConfigError("unknown ablation '" + name +
                         "' (expected no_action_tokens|no_propagation|no_target_network|no_annotation_loss)");
}

json ablation_json(const bootstrap::Ablations& a) {
  json out = json::array();
  if (a.no_action_tokens) out.push_back("no_action_tokens");
  if (a.no_propagation) out.push_back("no_propagation");
  if (a.no_target_network) out.push_back("no_target_network");
  if (a.no_annotation_loss) out.push_back("no_annotation_loss");
  return out;
}

template <typename Fn>
void rethrow_as_config(Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

RunConfig parse_run_config(const json& j) {
  RunConfig cfg;
  Reader top(j, "");
  auto& model = cfg.train.model;
  rethrow_as_config([&] { model.variant = models::parse_variant(top.require<std::string>("variant")); });
  cfg.seed = top.require<std::uint64_t>("seed");
  if (!top.has("data")) throw ConfigError("missing required field 'data'");

  {
    Reader d = top.sub("data");
    auto& s = cfg.data.scene;
    s.grid = d.get("grid", s.grid);
    s.vocab = d.get("vocab", s.vocab);
    s.density = d.get("density", s.density);
    s.cell_px = d.get("cell_px", s.cell_px);
    cfg.data.scenes = d.get("scenes", cfg.data.scenes);
    cfg.data.resolution = d.get("resolution", cfg.data.resolution);
    cfg.data.dir = d.get("dir", cfg.data.dir);
    d.finish();
  }
  {
    Reader m = top.sub_or_empty("model");
    auto& b = model.backbone;
    b.patch = m.get("patch", b.patch);
    b.width = m.get("width", b.width);
    b.depth = m.get("depth", b.depth);
    b.heads = m.get("heads", b.heads);
    b.mlp_ratio = m.get("mlp_ratio", b.mlp_ratio);
    model.decoder_depth = m.get("decoder_depth", model.decoder_depth);
    model.embed_dim = m.get("embed_dim", model.embed_dim);
    model.prototypes = m.get("prototypes", model.prototypes);
    model.dino_student_temp = m.get("dino_student_temp", model.dino_student_temp);
    m.finish();
  }
  model.backbone.resolution = cfg.data.resolution;
  model.vocab_size = cfg.data.scene.vocab + 1;

  {
    Reader t = top.sub_or_empty("train");
    auto& tc = cfg.train;
    tc.gamma = t.get("gamma", tc.gamma);
    tc.views = t.get("views", tc.views);
    tc.batch_images = t.get("batch_images", tc.batch_images);
    tc.reward_batch = t.get("reward_batch", tc.reward_batch);
    if (t.has("bootstrap_crop")) tc.bootstrap_crop = read_crop(t.sub("bootstrap_crop"), tc.bootstrap_crop);
    if (t.has("reward_crop")) tc.reward_crop = read_crop(t.sub("reward_crop"), tc.reward_crop);
    tc.tau_kind = model.variant == models::Variant::Clip ? ad::TauSchedule::Constant : ad::TauSchedule::Cosine;
    if (t.has("tau_schedule")) {
      rethrow_as_config([&] { tc.tau_kind = ad::parse_tau_schedule(t.get<std::string>("tau_schedule", "")); });
    }
    tc.tau_base = t.get("tau_base", tc.tau_base);
    tc.lr = t.get("lr", tc.lr);
    tc.warmup = t.get("warmup", tc.warmup);
    tc.weight_decay = t.get("weight_decay", tc.weight_decay);
    tc.clip_norm = t.get("clip_norm", tc.clip_norm);
    tc.steps = t.get("steps", tc.steps);
    tc.max_rejections = t.get("max_rejections", tc.max_rejections);
    cfg.checkpoint_every = t.get("checkpoint_every", cfg.checkpoint_every);
    cfg.eval_every = t.get("eval_every", cfg.eval_every);
    cfg.lattice_sizes = t.get("lattice_sizes", cfg.lattice_sizes);
    for (const auto& a : t.get("ablations", std::vector<std::string>{})) set_ablation(tc.ablations, a);
    if (t.has("pair_iou_band")) {
      const auto band = t.get("pair_iou_band", std::vector<double>{});
      if (band.size() != 2) throw ConfigError("field 'train.pair_iou_band' must be [lo, hi]");
      tc.pair_iou_band = std::make_pair(band[0], band[1]);
    }
    t.finish();
  }
  cfg.train.seed = cfg.seed;

  {
    Reader e = top.sub_or_empty("eval");
    cfg.eval.seed = e.get("seed", cfg.seed);
    cfg.eval.held_out_batches = e.get("held_out_batches", cfg.eval.held_out_batches);
    cfg.eval.probe_scenes = e.get("probe_scenes", cfg.eval.probe_scenes);
    cfg.eval.probe.per_scene = e.get("per_scene", cfg.eval.probe.per_scene);
    cfg.eval.probe.test_every = e.get("test_every", cfg.eval.probe.test_every);
    const auto offset = e.get("offset", std::vector<int>{cfg.eval.probe.offset_dy, cfg.eval.probe.offset_dx});
    if (offset.size() != 2) throw ConfigError("field 'eval.offset' must be [dy, dx]");
    cfg.eval.probe.offset_dy = offset[0];
    cfg.eval.probe.offset_dx = offset[1];
    cfg.eval.fit.l2 = e.get("l2", cfg.eval.fit.l2);
    cfg.eval.fit.max_iter = e.get("max_iter", cfg.eval.fit.max_iter);
    cfg.eval.fit.grad_tol = e.get("grad_tol", cfg.eval.fit.grad_tol);
    e.finish();
  }
  {
    Reader o = top.sub_or_empty("oracle");
    auto& oc = cfg.oracle;
    oc.grid = o.get("grid", oc.grid);
    oc.vocab = o.get("vocab", oc.vocab);
    oc.scenes = o.get("scenes", oc.scenes);
    oc.density = o.get("density", oc.density);
    oc.sizes = o.get("sizes", oc.sizes);
    oc.gamma = o.get("gamma", oc.gamma);
    oc.tol = o.get("tol", oc.tol);
    oc.contraction_pairs = o.get("contraction_pairs", oc.contraction_pairs);
    oc.td_steps = o.get("td_steps", oc.td_steps);
    oc.seed = o.get("seed", cfg.seed);
    o.finish();
  }
  {
    Reader s = top.sub_or_empty("sweep");
    cfg.sweep_gammas = s.get("gammas", cfg.sweep_gammas);
    if (s.has("overlap_bands")) {
      cfg.overlap_bands.clear();
      for (const auto& b : s.get("overlap_bands", std::vector<std::vector<double>>{})) {
        if (b.size() != 2 || !(b[0] >= 0.0 && b[0] < b[1] && b[1] <= 1.0)) {
          throw ConfigError("field 'sweep.overlap_bands' entries must be [lo, hi] with 0 <= lo < hi <= 1");
        }
        cfg.overlap_bands.emplace_back(b[0], b[1]);
      }
    }
    s.finish();
  }
  top.finish();

  if (cfg.data.scenes < 1) throw ConfigError("field 'data.scenes' must be >= 1");
  if (cfg.checkpoint_every < 0 || cfg.eval_every < 0) throw ConfigError("checkpoint_every and eval_every must be >= 0");
  if (cfg.eval.held_out_batches < 1 || cfg.eval.probe_scenes < 2) {
    throw ConfigError("eval needs held_out_batches >= 1 and probe_scenes >= 2");
  }
  rethrow_as_config([&] {
    synth::validate(cfg.data.scene);
    if (!cfg.lattice_sizes.empty()) cfg.train.fixed_windows = lattice(cfg);
    bootstrap::validate(cfg.train);
    oracle::validate(cfg.oracle);
  });
  return cfg;
}

json to_json(const RunConfig& cfg) {
  const auto& m = cfg.train.model;
  const auto& t = cfg.train;
  json j;
  j["variant"] = models::to_string(m.variant);
  j["seed"] = cfg.seed;
  j["data"] = {{"grid", cfg.data.scene.grid},   {"vocab", cfg.data.scene.vocab},   {"density", cfg.data.scene.density},
               {"cell_px", cfg.data.scene.cell_px}, {"scenes", cfg.data.scenes}, {"resolution", cfg.data.resolution},
               {"dir", cfg.data.dir}};
  j["model"] = {{"patch", m.backbone.patch},         {"width", m.backbone.width},   {"depth", m.backbone.depth},
                {"heads", m.backbone.heads},         {"mlp_ratio", m.backbone.mlp_ratio},
                {"decoder_depth", m.decoder_depth},  {"embed_dim", m.embed_dim},    {"prototypes", m.prototypes},
                {"dino_student_temp", m.dino_student_temp}};
  j["train"] = {{"gamma", t.gamma},
                {"views", t.views},
                {"batch_images", t.batch_images},
                {"reward_batch", t.reward_batch},
                {"bootstrap_crop", crop_json(t.bootstrap_crop)},
                {"reward_crop", crop_json(t.reward_crop)},
                {"tau_schedule", ad::to_string(t.tau_kind)},
                {"tau_base", t.tau_base},
                {"lr", t.lr},
                {"warmup", t.warmup},
                {"weight_decay", t.weight_decay},
                {"clip_norm", t.clip_norm},
                {"steps", t.steps},
                {"max_rejections", t.max_rejections},
                {"checkpoint_every", cfg.checkpoint_every},
                {"eval_every", cfg.eval_every},
                {"lattice_sizes", cfg.lattice_sizes},
                {"ablations", ablation_json(t.ablations)}};
  if (t.pair_iou_band) j["train"]["pair_iou_band"] = {t.pair_iou_band->first, t.pair_iou_band->second};
  j["eval"] = {{"seed", cfg.eval.seed},
               {"held_out_batches", cfg.eval.held_out_batches},
               {"probe_scenes", cfg.eval.probe_scenes},
               {"per_scene", cfg.eval.probe.per_scene},
               {"test_every", cfg.eval.probe.test_every},
               {"offset", {cfg.eval.probe.offset_dy, cfg.eval.probe.offset_dx}},
               {"l2", cfg.eval.fit.l2},
               {"max_iter", cfg.eval.fit.max_iter},
               {"grad_tol", cfg.eval.fit.grad_tol}};
  const auto& o = cfg.oracle;
  j["oracle"] = {{"grid", o.grid},   {"vocab", o.vocab},   {"scenes", o.scenes},
                 {"density", o.density}, {"sizes", o.sizes}, {"gamma", o.gamma},
                 {"tol", o.tol},     {"contraction_pairs", o.contraction_pairs},
                 {"td_steps", o.td_steps}, {"seed", o.seed}};
  json bands = json::array();
  for (const auto& [lo, hi] : cfg.overlap_bands) bands.push_back({lo, hi});
  j["sweep"] = {{"gammas", cfg.sweep_gammas}, {"overlap_bands", bands}};
  return j;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

std::vector<synth::Scene> generate_scenes(std::uint64_t seed, const synth::SceneConfig& scene, int count,
                                          std::uint64_t stream) {
  std::vector<synth::Scene> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(synth::generate_scene(derive_seed(seed, static_cast<std::uint64_t>(i), stream), scene,
                                        static_cast<std::uint64_t>(i)));
  }
  return out;
}

std::vector<synth::Scene> load_scenes(const RunConfig& cfg) {
  if (cfg.data.dir.empty()) return generate_scenes(cfg.seed, cfg.data.scene, cfg.data.scenes, kSceneStream);
  synth::Dataset d;
  try {
    d = synth::read_dataset(cfg.data.dir);
  } catch (const blob::BlobError& e) {
    throw IoError(std::string("dataset: ") + e.what());
  }
  if (d.grid != cfg.data.scene.grid || d.vocab != cfg.data.scene.vocab || d.resolution != cfg.data.resolution) {
    throw ConfigError("dataset " + cfg.data.dir + " (G=" + std::to_string(d.grid) + ", V=" + std::to_string(d.vocab) +
                      ", R=" + std::to_string(d.resolution) + ") does not match the config");
  }
  if (d.scenes.empty()) throw IoError("dataset " + cfg.data.dir + " holds no scenes");
  return d.scenes;
}

std::vector<synth::Scene> probe_scenes(const RunConfig& cfg) {
  return generate_scenes(cfg.eval.seed, cfg.data.scene, cfg.eval.probe_scenes, kProbeStream);
}

std::vector<geometry::BBox> lattice(const RunConfig& cfg) {
  if (cfg.lattice_sizes.empty()) return {};
  return oracle::lattice_windows(cfg.data.scene.grid, cfg.lattice_sizes);
}

}  // namespace annoboot::cli
