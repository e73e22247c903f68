#include "annoboot/oracle.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <map>

#include <json.hpp>

namespace annoboot::oracle {

namespace {

using Key = std::array<long long, 4>;

Key key_of(double a, double b, double c, double d) {
  auto k = [](double v) { return std::llround(v * 1e9); };
  return {k(a), k(b), k(c), k(d)};
}

Key key_of(const BBox& b) { return key_of(b.y_min, b.x_min, b.y_max, b.x_max); }
Key key_of(const RelAction& a) { return key_of(a.y_min, a.x_min, a.y_max, a.x_max); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// V[s][l] = max_a Q[s][a][l].
std::vector<double> state_max(const QTable& q) {
  const auto a_n = static_cast<std::size_t>(q.actions), l_n = static_cast<std::size_t>(q.annotations);
  std::vector<double> v(static_cast<std::size_t>(q.states) * l_n);
  for (std::size_t s = 0; s < static_cast<std::size_t>(q.states); ++s) {
    const double* row = q.q.data() + s * a_n * l_n;
    double* out = v.data() + s * l_n;
    std::copy(row, row + l_n, out);
    for (std::size_t a = 1; a < a_n; ++a) {
      for (std::size_t l = 0; l < l_n; ++l) out[l] = std::max(out[l], row[a * l_n + l]);
    }
  }
  return v;
}

void check_gamma(double gamma) {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw OracleError("gamma must lie in [0, 1), got " + std::to_string(gamma));
}

void check_table(const DiscreteMdp& mdp, const QTable& q) {
  if (q.states != mdp.states || q.actions != mdp.actions || q.annotations != mdp.annotations) {
    throw OracleError("Q table shape does not match the MDP");
  }
}

}  // namespace

std::vector<BBox> lattice_windows(int grid, std::span<const int> sizes) {
  if (grid < 1) throw OracleError("lattice grid must be >= 1");
  std::vector<BBox> out;
  const double g = grid;
  for (int size : sizes) {
    if (size < 1) throw OracleError("window size must be >= 1 cell");
    if (size > grid) continue;
    const int positions = 2 * (grid - size) + 1;
    for (int r = 0; r < positions; ++r) {
      for (int c = 0; c < positions; ++c) {
        const double y = 0.5 * r, x = 0.5 * c;
        out.push_back(BBox{y / g, x / g, (y + size) / g, (x + size) / g});
      }
    }
  }
  if (out.empty()) throw OracleError("no lattice window fits the grid");
  return out;
}

void validate(const DiscreteMdp& mdp) {
  if (mdp.states < 1 || mdp.actions < 1 || mdp.annotations < 1) throw OracleError("MDP needs states, actions and annotations");
  const auto sa = static_cast<std::size_t>(mdp.states) * static_cast<std::size_t>(mdp.actions);
  if (mdp.next.size() != sa) throw OracleError("transition table must have |S||A| entries");
  if (mdp.p.size() != static_cast<std::size_t>(mdp.states) * static_cast<std::size_t>(mdp.annotations)) {
    throw OracleError("annotation table must have |S||L| entries");
  }
  if (!mdp.valid.empty() && mdp.valid.size() != sa) throw OracleError("validity mask must have |S||A| entries");
  for (int s : mdp.next) {
    if (s < 0 || s >= mdp.states) throw OracleError("transition to unknown state " + std::to_string(s));
  }
  for (double v : mdp.p) {
    if (!(v >= 0.0 && v <= 1.0)) throw OracleError("annotation probabilities must lie in [0, 1]");
  }
}

DiscreteMdp build_lattice_mdp(std::span<const synth::Scene> scenes, std::span<const BBox> windows) {
  if (scenes.empty() || windows.empty()) throw OracleError("lattice MDP needs scenes and windows");
  DiscreteMdp mdp;
  mdp.scenes.assign(scenes.begin(), scenes.end());
  mdp.windows.assign(windows.begin(), windows.end());
  mdp.annotations = scenes.front().annotations();
  for (const auto& s : scenes) {
    if (s.annotations() != mdp.annotations) throw OracleError("scenes disagree on the annotation vocabulary");
  }

  std::map<Key, RelAction> moves;
  for (const auto& a : windows) {
    for (const auto& b : windows) {
      const RelAction m = geometry::relative_bbox(a, b);
      moves.emplace(key_of(m), m);
    }
  }
  for (const auto& [k, m] : moves) mdp.moves.push_back(m);

  std::map<Key, int> window_index;
  for (std::size_t i = 0; i < windows.size(); ++i) window_index.emplace(key_of(windows[i]), static_cast<int>(i));

  const int w_n = static_cast<int>(windows.size());
  mdp.states = static_cast<int>(scenes.size()) * w_n;
  mdp.actions = static_cast<int>(mdp.moves.size());
  // Window-level transitions are shared by every scene.
  std::vector<int> window_next(static_cast<std::size_t>(w_n) * mdp.moves.size());
  std::vector<bool> window_valid(window_next.size());
  for (int w = 0; w < w_n; ++w) {
    for (int a = 0; a < mdp.actions; ++a) {
      const BBox target = geometry::apply_action(windows[static_cast<std::size_t>(w)], mdp.moves[static_cast<std::size_t>(a)]);
      const auto it = window_index.find(key_of(target));
      const std::size_t idx = static_cast<std::size_t>(w) * mdp.moves.size() + static_cast<std::size_t>(a);
      window_next[idx] = it == window_index.end() ? w : it->second;
      window_valid[idx] = it != window_index.end();
    }
  }
  for (std::size_t sc = 0; sc < scenes.size(); ++sc) {
    for (int w = 0; w < w_n; ++w) {
      for (int a = 0; a < mdp.actions; ++a) {
        const std::size_t idx = static_cast<std::size_t>(w) * mdp.moves.size() + static_cast<std::size_t>(a);
        mdp.next.push_back(static_cast<int>(sc) * w_n + window_next[idx]);
        mdp.valid.push_back(window_valid[idx]);
      }
      const auto p = synth::true_annotation_dist(scenes[sc], windows[static_cast<std::size_t>(w)]);
      mdp.p.insert(mdp.p.end(), p.begin(), p.end());
    }
  }
  validate(mdp);
  return mdp;
}

double sup_distance(const QTable& a, const QTable& b) {
  if (a.q.size() != b.q.size()) throw OracleError("Q tables differ in shape");
  double d = 0.0;
  for (std::size_t i = 0; i < a.q.size(); ++i) d = std::max(d, std::fabs(a.q[i] - b.q[i]));
  return d;
}

QTable bellman_apply(const DiscreteMdp& mdp, const QTable& q, double gamma) {
  check_table(mdp, q);
  const std::vector<double> v = state_max(q);
  const auto l_n = static_cast<std::size_t>(mdp.annotations);
  QTable out = QTable::like(mdp);
  for (int s = 0; s < mdp.states; ++s) {
    for (int a = 0; a < mdp.actions; ++a) {
      const auto sn = static_cast<std::size_t>(mdp.step(s, a));
      double* dst = &out.at(s, a, 0);
      for (std::size_t l = 0; l < l_n; ++l) dst[l] = (1.0 - gamma) * mdp.p[sn * l_n + l] + gamma * v[sn * l_n + l];
    }
  }
  return out;
}

ValueIterationResult value_iteration(const DiscreteMdp& mdp, double gamma, double tol, const QTable* start) {
  check_gamma(gamma);
  if (!(tol > 0.0)) throw OracleError("tol must be positive");
  validate(mdp);
  ValueIterationResult res;
  res.q = start ? *start : QTable::like(mdp);
  check_table(mdp, res.q);
  for (;;) {
    QTable next = bellman_apply(mdp, res.q, gamma);
    const double change = sup_distance(next, res.q);
    res.q = std::move(next);
    ++res.iterations;
    if (change <= tol) break;
  }
  res.residual = sup_distance(bellman_apply(mdp, res.q, gamma), res.q);
  return res;
}

int iteration_bound(double gamma, double tol) {
  check_gamma(gamma);
  if (gamma == 0.0) return 2;
  return static_cast<int>(std::ceil(std::log(tol * (1.0 - gamma)) / std::log(gamma))) + 1;
}

double contraction_ratio(const DiscreteMdp& mdp, double gamma, int pairs, Rng& rng) {
  double worst = 0.0;
  for (int i = 0; i < pairs; ++i) {
    QTable a = QTable::like(mdp), b = QTable::like(mdp);
    for (auto& v : a.q) v = rng.uniform();
    for (auto& v : b.q) v = rng.uniform();
    const double before = sup_distance(a, b);
    if (before == 0.0) continue;
    worst = std::max(worst, sup_distance(bellman_apply(mdp, a, gamma), bellman_apply(mdp, b, gamma)) / before);
  }
  return worst;
}

std::vector<int> render_observations(const DiscreteMdp& mdp, int resolution) {
  if (mdp.windows.empty()) throw OracleError("observations need a lattice MDP");
  std::map<std::vector<float>, int> seen;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(mdp.states));
  for (int s = 0; s < mdp.states; ++s) {
    const auto view = synth::render_view(mdp.scenes[static_cast<std::size_t>(mdp.scene_of(s))],
                                         mdp.windows[static_cast<std::size_t>(mdp.window_of(s))], resolution);
    const auto [it, fresh] = seen.emplace(view.pixels, static_cast<int>(seen.size()));
    out.push_back(it->second);
  }
  return out;
}

ObservationQ observation_q(const DiscreteMdp& mdp, const QTable& qstar, std::span<const int> obs_of_state) {
  check_table(mdp, qstar);
  if (obs_of_state.size() != static_cast<std::size_t>(mdp.states)) throw OracleError("need one observation per state");
  ObservationQ out;
  out.obs_of_state.assign(obs_of_state.begin(), obs_of_state.end());
  out.observations = 1 + *std::max_element(obs_of_state.begin(), obs_of_state.end());
  out.representative.assign(static_cast<std::size_t>(out.observations), -1);
  out.q = QTable(out.observations, mdp.actions, mdp.annotations);
  out.valid.assign(static_cast<std::size_t>(out.observations) * static_cast<std::size_t>(mdp.actions), true);
  std::vector<int> count(static_cast<std::size_t>(out.observations), 0);
  const std::size_t row = static_cast<std::size_t>(mdp.actions) * static_cast<std::size_t>(mdp.annotations);
  for (int s = 0; s < mdp.states; ++s) {
    const int o = obs_of_state[static_cast<std::size_t>(s)];
    if (o < 0) throw OracleError("negative observation id");
    auto& rep = out.representative[static_cast<std::size_t>(o)];
    if (rep < 0) rep = s;
    ++count[static_cast<std::size_t>(o)];
    const double* src = qstar.q.data() + static_cast<std::size_t>(s) * row;
    double* dst = out.q.q.data() + static_cast<std::size_t>(o) * row;
    for (std::size_t i = 0; i < row; ++i) dst[i] += src[i];
    if (!mdp.valid.empty()) {
      for (int a = 0; a < mdp.actions; ++a) {
        const std::size_t sa = static_cast<std::size_t>(s) * static_cast<std::size_t>(mdp.actions) + static_cast<std::size_t>(a);
        if (!mdp.valid[sa]) out.valid[static_cast<std::size_t>(o) * static_cast<std::size_t>(mdp.actions) + static_cast<std::size_t>(a)] = false;
      }
    }
  }
  for (int o = 0; o < out.observations; ++o) {
    if (count[static_cast<std::size_t>(o)] == 0) throw OracleError("observation ids must be contiguous");
    double* dst = out.q.q.data() + static_cast<std::size_t>(o) * row;
    for (std::size_t i = 0; i < row; ++i) dst[i] /= count[static_cast<std::size_t>(o)];
  }
  return out;
}

QTable td_tabular(const DiscreteMdp& mdp, double gamma, const TdConfig& cfg, Rng& rng, const QTable* start) {
  check_gamma(gamma);
  validate(mdp);
  if (cfg.steps <= 0 || cfg.sync_every <= 0) throw OracleError("td steps and sync period must be positive");
  QTable q = start ? *start : QTable::like(mdp);
  check_table(mdp, q);
  const auto l_n = static_cast<std::size_t>(mdp.annotations);
  std::vector<double> target_v = state_max(q);
  const auto sa = static_cast<std::uint64_t>(mdp.states) * static_cast<std::uint64_t>(mdp.actions);
  for (long t = 0; t < cfg.steps; ++t) {
    if (t > 0 && t % cfg.sync_every == 0) target_v = state_max(q);
    const auto pick = rng.below(sa);
    const int s = static_cast<int>(pick / static_cast<std::uint64_t>(mdp.actions));
    const int a = static_cast<int>(pick % static_cast<std::uint64_t>(mdp.actions));
    const auto sn = static_cast<std::size_t>(mdp.step(s, a));
    const double lr = cfg.lr(t);
    double* row = &q.at(s, a, 0);
    for (std::size_t l = 0; l < l_n; ++l) {
      const double target = (1.0 - gamma) * mdp.p[sn * l_n + l] + gamma * target_v[sn * l_n + l];
      row[l] += lr * (target - row[l]);
    }
  }
  return q;
}

std::string OracleReport::to_json() const {
  nlohmann::json j = {{"states", states},
                      {"actions", actions},
                      {"annotations", annotations},
                      {"residual", residual},
                      {"iterations", iterations},
                      {"contraction_max_ratio", contraction_max_ratio},
                      {"td_distance", td_distance},
                      {"vi_seconds", vi_seconds},
                      {"td_seconds", td_seconds}};
  return j.dump(2);
}

void validate(const OracleConfig& cfg) {
  check_gamma(cfg.gamma);
  if (cfg.grid < 2) throw OracleError("grid must be >= 2");
  if (cfg.vocab < 1 || cfg.scenes < 1) throw OracleError("vocab and scenes must be >= 1");
  if (!(cfg.density > 0.0 && cfg.density <= 1.0)) throw OracleError("density must lie in (0, 1]");
  if (cfg.sizes.empty()) throw OracleError("sizes must not be empty");
  if (!(cfg.tol > 0.0)) throw OracleError("tol must be positive");
  if (cfg.contraction_pairs < 1 || cfg.td_steps < 0) throw OracleError("contraction_pairs >= 1 and td_steps >= 0 required");
}

DiscreteMdp build_from_config(const OracleConfig& cfg) {
  validate(cfg);
  std::vector<synth::Scene> scenes;
  const synth::SceneConfig sc{cfg.grid, cfg.vocab, cfg.density, 8};
  for (int i = 0; i < cfg.scenes; ++i) {
    scenes.push_back(synth::generate_scene(derive_seed(cfg.seed, 0, static_cast<std::uint64_t>(i)), sc,
                                           static_cast<std::uint64_t>(i)));
  }
  const auto windows = lattice_windows(cfg.grid, cfg.sizes);
  return build_lattice_mdp(scenes, windows);
}

OracleReport run_oracle(const OracleConfig& cfg) {
  const DiscreteMdp mdp = build_from_config(cfg);
  OracleReport rep;
  rep.states = mdp.states;
  rep.actions = mdp.actions;
  rep.annotations = mdp.annotations;

  auto t0 = std::chrono::steady_clock::now();
  const auto vi = value_iteration(mdp, cfg.gamma, cfg.tol);
  rep.residual = vi.residual;
  rep.iterations = vi.iterations;
  Rng rng(derive_seed(cfg.seed, 1, 0));
  rep.contraction_max_ratio = contraction_ratio(mdp, cfg.gamma, cfg.contraction_pairs, rng);
  rep.vi_seconds = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  // Each sync round applies one Bellman step once every (s, a) has been visited
  // enough times; rounds are sized to shrink the error below 1e-5.
  const long sa = static_cast<long>(mdp.states) * mdp.actions;
  TdConfig td;
  td.sync_every = 30 * sa;
  const int rounds = cfg.gamma == 0.0 ? 2 : static_cast<int>(std::ceil(std::log(1e-5) / std::log(cfg.gamma))) + 2;
  td.steps = cfg.td_steps > 0 ? cfg.td_steps : rounds * td.sync_every;
  Rng td_rng(derive_seed(cfg.seed, 2, 0));
  rep.td_distance = sup_distance(td_tabular(mdp, cfg.gamma, td, td_rng), vi.q);
  rep.td_seconds = seconds_since(t0);
  return rep;
}

}  // namespace annoboot::oracle
