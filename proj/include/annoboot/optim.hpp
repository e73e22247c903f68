#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "annoboot/autodiff.hpp"
#include "annoboot/rng.hpp"

namespace annoboot::ad {

/// Named trainable tensors in insertion order.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Var<T> var;
    bool decay = true;
  };

  /// Registers a new trainable leaf. Names must be unique.
  Var<T> add(const std::string& name, Tensor<T> init, bool decay = true);

  Var<T> get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return entries_.size(); }
  std::size_t parameter_count() const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  void zero_grad();
  void set_requires_grad(bool on);

  /// Deep copy of values into a new store (new leaves, same names and order).
  ParamStore clone() const;

  /// Copies values from `other`; names, order and shapes must match.
  void assign_from(const ParamStore& other);

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Truncated normal (cut at 2 sigma), zero mean.
template <typename T>
Tensor<T> trunc_normal(Rng& rng, Shape shape, double stddev);

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global-norm clip threshold; <= 0 disables clipping.
  double clip_norm = 0.0;
};

template <typename T>
struct AdamWState {
  long step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

/// Global L2 norm of the accumulated gradients.
template <typename T>
double global_grad_norm(const ParamStore<T>& params);

/// One decoupled-weight-decay Adam step over the accumulated gradients.
/// Returns the pre-clip gradient norm. Throws NonFiniteError naming the first
/// parameter whose gradient is not finite.
template <typename T>
double adamw_step(ParamStore<T>& params, AdamWState<T>& state, const AdamWConfig& cfg);

/// Shadow copy of a parameter store, updated as shadow <- (1 - tau) shadow + tau online.
template <typename T>
struct EmaState {
  ParamStore<T> shadow;
};

template <typename T>
EmaState<T> make_ema(const ParamStore<T>& online);

template <typename T>
void ema_update(EmaState<T>& ema, const ParamStore<T>& online, double tau);

/// Same update on bare stores (used when the shadow is embedded in another object).
template <typename T>
void ema_update(ParamStore<T>& shadow, const ParamStore<T>& online, double tau);

enum class TauSchedule { Cosine, Constant };

TauSchedule parse_tau_schedule(const std::string& kind);
const char* to_string(TauSchedule kind);

inline constexpr double kTauBase = 0.004;

/// cosine: base * 0.5 * (1 + cos(pi * step / total)); constant: base.
double tau_schedule(TauSchedule kind, long step, long total, double base = kTauBase);

/// Linear warmup followed by cosine decay to zero.
double lr_schedule(double peak, long step, long warmup, long total);

/// Checkpoint = ABT1 blob file plus a JSON index name -> byte offset.
/// Values are stored as f32.
void save_tensors(const std::filesystem::path& blob_path, const std::filesystem::path& index_path,
                  const std::vector<std::pair<std::string, Tensor<float>>>& tensors,
                  const std::map<std::string, std::string>& meta = {});

struct LoadedTensors {
  std::map<std::string, Tensor<float>> tensors;
  std::map<std::string, std::string> meta;
};

LoadedTensors load_tensors(const std::filesystem::path& blob_path, const std::filesystem::path& index_path);

}  // namespace annoboot::ad
