#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "annoboot/geometry.hpp"
#include "annoboot/rng.hpp"
#include "annoboot/synthdata.hpp"

namespace annoboot::oracle {

using geometry::BBox;
using geometry::RelAction;

class OracleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Square windows of `sizes` cells with corners on the half-cell grid of a G x G canvas.
/// Ordered by size, then row, then column.
std::vector<BBox> lattice_windows(int grid, std::span<const int> sizes);

/// Deterministic finite MDP. State s has next state next[s * A + a] and annotation
/// distribution p[s * L + l]; rewards are (1 - gamma) * p.
struct DiscreteMdp {
  int states = 0;
  int actions = 0;
  int annotations = 0;
  std::vector<int> next;
  std::vector<double> p;
  /// True where the move lands on the lattice (false for self-loops of invalid moves).
  std::vector<bool> valid;

  // Crop-environment provenance (empty for hand-built MDPs).
  std::vector<synth::Scene> scenes;
  std::vector<BBox> windows;
  std::vector<RelAction> moves;

  int step(int s, int a) const { return next[static_cast<std::size_t>(s) * static_cast<std::size_t>(actions) + static_cast<std::size_t>(a)]; }
  double prob(int s, int l) const { return p[static_cast<std::size_t>(s) * static_cast<std::size_t>(annotations) + static_cast<std::size_t>(l)]; }
  int scene_of(int s) const { return s / static_cast<int>(windows.size()); }
  int window_of(int s) const { return s % static_cast<int>(windows.size()); }
};

/// Checks table sizes and ranges; throws OracleError.
void validate(const DiscreteMdp& mdp);

/// States = scenes x windows. Actions = every distinct relative move between two windows
/// (identity included, sorted). A move that leaves the lattice self-loops.
DiscreteMdp build_lattice_mdp(std::span<const synth::Scene> scenes, std::span<const BBox> windows);

/// Q[s][a][l], row-major, 64-bit.
struct QTable {
  int states = 0;
  int actions = 0;
  int annotations = 0;
  std::vector<double> q;

  QTable() = default;
  QTable(int s, int a, int l, double fill = 0.0)
      : states(s), actions(a), annotations(l), q(static_cast<std::size_t>(s) * a * l, fill) {}
  static QTable like(const DiscreteMdp& mdp, double fill = 0.0) {
    return QTable(mdp.states, mdp.actions, mdp.annotations, fill);
  }

  std::size_t index(int s, int a, int l) const {
    return (static_cast<std::size_t>(s) * static_cast<std::size_t>(actions) + static_cast<std::size_t>(a)) *
               static_cast<std::size_t>(annotations) +
           static_cast<std::size_t>(l);
  }
  double& at(int s, int a, int l) { return q[index(s, a, l)]; }
  double at(int s, int a, int l) const { return q[index(s, a, l)]; }
  bool operator==(const QTable&) const = default;
};

double sup_distance(const QTable& a, const QTable& b);

/// Q'[s][a][l] = (1 - gamma) p[s'][l] + gamma * max_a' Q[s'][a'][l], s' = step(s, a).
QTable bellman_apply(const DiscreteMdp& mdp, const QTable& q, double gamma);

struct ValueIterationResult {
  QTable q;
  int iterations = 0;
  /// ||Q - T Q||_inf of the returned table.
  double residual = 0.0;
};

/// Iterates from `start` (zeros by default) until the sup-norm change is <= tol.
ValueIterationResult value_iteration(const DiscreteMdp& mdp, double gamma, double tol,
                                     const QTable* start = nullptr);

/// Upper bound on value-iteration sweeps from Q = 0 with rewards in [0, 1 - gamma].
int iteration_bound(double gamma, double tol);

/// Largest ||T Q1 - T Q2|| / ||Q1 - Q2|| over random tables with entries in [0, 1].
double contraction_ratio(const DiscreteMdp& mdp, double gamma, int pairs, Rng& rng);

/// Groups states by identical rendered pixels.
std::vector<int> render_observations(const DiscreteMdp& mdp, int resolution);

/// Q averaged over aliased states under a uniform prior.
struct ObservationQ {
  int observations = 0;
  std::vector<int> obs_of_state;
  std::vector<int> representative;  // one state per observation
  /// Action usable from every state of the observation (no self-loop fallback).
  std::vector<bool> valid;          // [O * A]
  QTable q;                         // [O][A][L]
};

ObservationQ observation_q(const DiscreteMdp& mdp, const QTable& qstar, std::span<const int> obs_of_state);

struct TdConfig {
  long steps = 1'000'000;
  /// Target table refreshed from the online table every `sync_every` updates.
  long sync_every = 10'000;
  std::function<double(long)> lr = [](long) { return 0.5; };
};

/// Tabular TD with a lagging target table, uniform (s, a) sampling.
QTable td_tabular(const DiscreteMdp& mdp, double gamma, const TdConfig& cfg, Rng& rng, const QTable* start = nullptr);

struct OracleConfig {
  int grid = 3;
  int vocab = 3;
  int scenes = 2;
  double density = 0.7;
  std::vector<int> sizes{1, 2, 4};
  double gamma = 0.5;
  double tol = 1e-10;
  int contraction_pairs = 100;
  long td_steps = 0;  // 0: sized from |S||A|
  std::uint64_t seed = 0;
};

struct OracleReport {
  int states = 0;
  int actions = 0;
  int annotations = 0;
  double residual = 0.0;
  int iterations = 0;
  double contraction_max_ratio = 0.0;
  double td_distance = 0.0;
  double vi_seconds = 0.0;
  double td_seconds = 0.0;

  std::string to_json() const;
};

void validate(const OracleConfig& cfg);
DiscreteMdp build_from_config(const OracleConfig& cfg);
OracleReport run_oracle(const OracleConfig& cfg);

}  // namespace annoboot::oracle
