#include "annoboot/optim.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "annoboot/blob.hpp"

namespace annoboot::ad {

template <typename T>
Var<T> ParamStore<T>::add(const std::string& name, Tensor<T> init, bool decay) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Var<T> v(std::move(init), true);
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{name, v, decay});
  return v;
}

template <typename T>
Var<T> ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return entries_[it->second].var;
}

template <typename T>
std::size_t ParamStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.var.size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.var.zero_grad();
}

template <typename T>
void ParamStore<T>::set_requires_grad(bool on) {
  for (auto& e : entries_) e.var.set_requires_grad(on);
}

template <typename T>
ParamStore<T> ParamStore<T>::clone() const {
  ParamStore out;
  for (const auto& e : entries_) out.add(e.name, e.var.value(), e.decay);
  return out;
}

template <typename T>
void ParamStore<T>::assign_from(const ParamStore& other) {
  if (other.entries_.size() != entries_.size()) throw ShapeError("assign_from: parameter count differs");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& src = other.entries_[i];
    auto& dst = entries_[i];
    if (src.name != dst.name || src.var.shape() != dst.var.shape()) {
      throw ShapeError("assign_from: parameter " + dst.name + " " + to_string(dst.var.shape()) +
                       " vs " + src.name + " " + to_string(src.var.shape()));
    }
    dst.var.mutable_value() = src.var.value();
  }
}

template <typename T>
Tensor<T> trunc_normal(Rng& rng, Shape shape, double stddev) {
  Tensor<T> out(std::move(shape));
  for (std::size_t i = 0; i < out.size(); ++i) {
    double z = rng.normal();
    while (std::fabs(z) > 2.0) z = rng.normal();
    out[i] = static_cast<T>(z * stddev);
  }
  return out;
}

template <typename T>
double global_grad_norm(const ParamStore<T>& params) {
  double ss = 0.0;
  for (const auto& e : params.entries()) {
    if (!e.var.has_grad()) continue;
    for (T g : e.var.node()->grad.vec()) ss += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(ss);
}

template <typename T>
double adamw_step(ParamStore<T>& params, AdamWState<T>& state, const AdamWConfig& cfg) {
  auto& entries = params.entries();
  if (state.m.empty()) {
    for (const auto& e : entries) {
      state.m.emplace_back(e.var.shape());
      state.v.emplace_back(e.var.shape());
    }
  }
  if (state.m.size() != entries.size()) throw ShapeError("adamw_step: optimizer state does not match parameters");
  for (const auto& e : entries) {
    if (!e.var.has_grad()) continue;
    for (T g : e.var.node()->grad.vec()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NonFiniteError("non-finite gradient in parameter " + e.name);
      }
    }
  }
  const double norm = global_grad_norm(params);
  const double clip = (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) ? cfg.clip_norm / norm : 1.0;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < entries.size(); ++k) {
    auto& e = entries[k];
    Tensor<T>& p = e.var.mutable_value();
    Tensor<T>& m = state.m[k];
    Tensor<T>& v = state.v[k];
    const bool has = e.var.has_grad();
    const T* g = has ? e.var.node()->grad.data() : nullptr;
    const double decay = e.decay ? cfg.lr * cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = has ? static_cast<double>(g[i]) * clip : 0.0;
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
      p[i] = static_cast<T>(static_cast<double>(p[i]) * (1.0 - decay) - cfg.lr * update);
    }
  }
  return norm;
}

template <typename T>
EmaState<T> make_ema(const ParamStore<T>& online) {
  EmaState<T> ema{online.clone()};
  ema.shadow.set_requires_grad(false);
  return ema;
}

template <typename T>
void ema_update(ParamStore<T>& shadow, const ParamStore<T>& online, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("ema_update: tau must lie in [0, 1]");
  auto& dst = shadow.entries();
  const auto& src = online.entries();
  if (dst.size() != src.size()) throw ShapeError("ema_update: parameter count differs");
  const T keep = static_cast<T>(1.0 - tau);
  const T take = static_cast<T>(tau);
  for (std::size_t k = 0; k < dst.size(); ++k) {
    if (dst[k].var.shape() != src[k].var.shape()) {
      throw ShapeError("ema_update: " + dst[k].name + " " + to_string(dst[k].var.shape()) + " vs " +
                       to_string(src[k].var.shape()));
    }
    Tensor<T>& s = dst[k].var.mutable_value();
    const Tensor<T>& o = src[k].var.value();
    if (tau == 0.0) continue;
    if (tau == 1.0) {
      s = o;
      continue;
    }
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = keep * s[i] + take * o[i];
  }
}

template <typename T>
void ema_update(EmaState<T>& ema, const ParamStore<T>& online, double tau) {
  ema_update(ema.shadow, online, tau);
}

TauSchedule parse_tau_schedule(const std::string& kind) {
  if (kind == "cosine") return TauSchedule::Cosine;
  if (kind == "constant") return TauSchedule::Constant;
  throw std::invalid_argument("unknown tau schedule: " + kind);
}

const char* to_string(TauSchedule kind) {
  return kind == TauSchedule::Cosine ? "cosine" : "constant";
}

double tau_schedule(TauSchedule kind, long step, long total, double base) {
  if (total <= 0 || step < 0 || step > total) {
    throw std::invalid_argument("tau_schedule: need 0 <= step <= total and total > 0");
  }
  if (kind == TauSchedule::Constant) return base;
  if (step == total) return 0.0;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

double lr_schedule(double peak, long step, long warmup, long total) {
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(std::max(1L, total - warmup));
  const double t = std::min(1.0, static_cast<double>(step - warmup) / span);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void save_tensors(const std::filesystem::path& blob_path, const std::filesystem::path& index_path,
                  const std::vector<std::pair<std::string, Tensor<float>>>& tensors,
                  const std::map<std::string, std::string>& meta) {
  using nlohmann::json;
  std::vector<std::uint8_t> bytes;
  json index = json::object();
  for (const auto& [name, t] : tensors) {
    std::vector<std::uint32_t> dims(t.shape().begin(), t.shape().end());
    index[name] = bytes.size();
    blob::encode(blob::make_f32(std::move(dims), t.vec()), bytes);
  }
  blob::write_file(blob_path, bytes);
  json doc = {{"blob", blob_path.filename().string()}, {"tensors", index}, {"meta", meta}};
  std::ofstream out(index_path);
  if (!out) throw blob::BlobError(blob::ErrorKind::Io, "cannot write " + index_path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw blob::BlobError(blob::ErrorKind::Io, "short write to " + index_path.string());
}

LoadedTensors load_tensors(const std::filesystem::path& blob_path, const std::filesystem::path& index_path) {
  using nlohmann::json;
  std::ifstream in(index_path);
  if (!in) throw blob::BlobError(blob::ErrorKind::MissingBlob, "cannot open " + index_path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw blob::BlobError(blob::ErrorKind::MalformedManifest, index_path.string() + ": " + e.what());
  }
  const auto bytes = blob::read_file(blob_path);
  LoadedTensors out;
  try {
    for (const auto& [name, off] : doc.at("tensors").items()) {
      const blob::Blob b = blob::decode(bytes, off.get<std::size_t>());
      if (b.dtype != blob::DType::F32) {
        throw blob::BlobError(blob::ErrorKind::ShapeMismatch, name + " is not an f32 tensor");
      }
      out.tensors.emplace(name, Tensor<float>(Shape(b.dims.begin(), b.dims.end()), b.f32));
    }
    if (doc.contains("meta")) {
      for (const auto& [k, v] : doc.at("meta").items()) out.meta.emplace(k, v.get<std::string>());
    }
  } catch (const json::exception& e) {
    throw blob::BlobError(blob::ErrorKind::MalformedManifest, index_path.string() + ": " + e.what());
  }
  return out;
}

template class ParamStore<float>;
template class ParamStore<double>;
template Tensor<float> trunc_normal<float>(Rng&, Shape, double);
template Tensor<double> trunc_normal<double>(Rng&, Shape, double);
template double global_grad_norm<float>(const ParamStore<float>&);
template double global_grad_norm<double>(const ParamStore<double>&);
template double adamw_step<float>(ParamStore<float>&, AdamWState<float>&, const AdamWConfig&);
template double adamw_step<double>(ParamStore<double>&, AdamWState<double>&, const AdamWConfig&);
template EmaState<float> make_ema<float>(const ParamStore<float>&);
template EmaState<double> make_ema<double>(const ParamStore<double>&);
template void ema_update<float>(EmaState<float>&, const ParamStore<float>&, double);
template void ema_update<double>(EmaState<double>&, const ParamStore<double>&, double);
template void ema_update<float>(ParamStore<float>&, const ParamStore<float>&, double);
template void ema_update<double>(ParamStore<double>&, const ParamStore<double>&, double);

}  // namespace annoboot::ad
