#include "annoboot/models.hpp"

#include <cmath>

namespace annoboot::models {

using ad::Shape;

Variant parse_variant(const std::string& name) {
  if (name == "clip") return Variant::Clip;
  if (name == "simclr") return Variant::SimClr;
  if (name == "dino") return Variant::Dino;
  throw ModelConfigError("unknown variant: " + name + " (expected clip|simclr|dino)");
}

const char* to_string(Variant v) {
  switch (v) {
    case Variant::Clip: return "clip";
    case Variant::SimClr: return "simclr";
    case Variant::Dino: return "dino";
  }
  return "?";
}

void validate(const ModelConfig& cfg) {
  const auto& b = cfg.backbone;
  if (b.patch <= 0 || b.resolution <= 0 || b.resolution % b.patch != 0) {
    throw ModelConfigError("resolution must be a positive multiple of patch");
  }
  if (b.width <= 0 || b.heads <= 0 || b.width % b.heads != 0) {
    throw ModelConfigError("width must be a positive multiple of heads");
  }
  if (b.depth < 0 || cfg.decoder_depth < 1 || b.mlp_ratio < 1) {
    throw ModelConfigError("depth >= 0, decoder_depth >= 1 and mlp_ratio >= 1 required");
  }
  if (cfg.embed_dim <= 0) throw ModelConfigError("embed_dim must be positive");
  if (cfg.variant == Variant::Clip && cfg.vocab_size < 2) throw ModelConfigError("vocab_size must be >= 2");
  if (cfg.variant == Variant::Dino && cfg.prototypes < 2) throw ModelConfigError("DINO needs K >= 2 prototypes");
  if (!(cfg.dino_student_temp > 0.0)) throw ModelConfigError("dino_student_temp must be positive");
}

Tensor<float> stack_views(std::span<const synth::View> views) {
  if (views.empty()) throw ad::ShapeError("stack_views: empty batch");
  const auto r = static_cast<std::size_t>(views.front().resolution);
  Tensor<float> out({views.size(), r, r, 3});
  const std::size_t stride = r * r * 3;
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (static_cast<std::size_t>(views[i].resolution) != r) {
      throw ad::ShapeError("stack_views: mixed resolutions in one batch");
    }
    std::copy(views[i].pixels.begin(), views[i].pixels.end(), out.data() + i * stride);
  }
  return out;
}

namespace {

constexpr double kInitStd = 0.02;

struct Registrar {
  ad::ParamStore<float>& ps;
  Rng& rng;

  void weight(const std::string& name, Shape s) { ps.add(name, ad::trunc_normal<float>(rng, std::move(s), kInitStd)); }
  void zeros(const std::string& name, Shape s) { ps.add(name, Tensor<float>(std::move(s)), false); }
  void ones(const std::string& name, Shape s) { ps.add(name, Tensor<float>(std::move(s), 1.0f), false); }
  void linear(const std::string& prefix, std::size_t in, std::size_t out) {
    weight(prefix + ".w", {in, out});
    zeros(prefix + ".b", {out});
  }
  void norm(const std::string& prefix, std::size_t d) {
    ones(prefix + ".g", {d});
    zeros(prefix + ".b", {d});
  }
  void attention(const std::string& prefix, std::size_t d) {
    for (const char* n : {".q", ".k", ".v", ".o"}) linear(prefix + n, d, d);
  }
  void mlp(const std::string& prefix, std::size_t d, std::size_t hidden) {
    linear(prefix + ".fc1", d, hidden);
    linear(prefix + ".fc2", hidden, d);
  }
};

std::string idx(const char* base, int i) { return std::string(base) + std::to_string(i); }

}  // namespace

QModel::QModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  validate(cfg);
  Rng rng(seed);
  Registrar reg{params_, rng};
  const auto& b = cfg.backbone;
  const auto d = static_cast<std::size_t>(b.width);
  const auto e = static_cast<std::size_t>(cfg.embed_dim);
  const auto hidden = d * static_cast<std::size_t>(b.mlp_ratio);
  const auto patch_dim = static_cast<std::size_t>(b.patch * b.patch * 3);

  reg.linear("patch", patch_dim, d);
  reg.weight("pos", {static_cast<std::size_t>(b.tokens()), d});
  for (int i = 0; i < b.depth; ++i) {
    const std::string pre = idx("enc", i);
    reg.norm(pre + ".ln1", d);
    reg.attention(pre + ".attn", d);
    reg.norm(pre + ".ln2", d);
    reg.mlp(pre + ".mlp", d, hidden);
  }
  reg.norm("enc.ln", d);
  reg.linear("img_proj", d, e);

  switch (cfg.variant) {
    case Variant::Clip:
      params_.add("log_t", Tensor<float>({1}, static_cast<float>(std::log(10.0))), false);
      reg.weight("ann.table", {static_cast<std::size_t>(cfg.vocab_size), d});
      reg.linear("ann.reward", d, e);
      reg.linear("ann.value", d, e);
      break;
    case Variant::SimClr:
      params_.add("log_t", Tensor<float>({1}, static_cast<float>(std::log(10.0))), false);
      reg.linear("ann.value", d, e);
      break;
    case Variant::Dino: {
      reg.weight("protos", {static_cast<std::size_t>(cfg.prototypes), e});
      reg.linear("ann.value", e, e);
      break;
    }
  }

  for (int s = 0; s < 4; ++s) reg.weight(idx("act.tok", s), {static_cast<std::size_t>(geometry::kActionBins), d});
  reg.weight("act.mask", {d});
  for (int i = 0; i < cfg.decoder_depth; ++i) {
    const std::string pre = idx("dec", i);
    reg.norm(pre + ".ln1", d);
    reg.attention(pre + ".self", d);
    reg.norm(pre + ".ln2", d);
    reg.norm(pre + ".ln_mem", d);
    reg.attention(pre + ".cross", d);
    reg.norm(pre + ".ln3", d);
    reg.mlp(pre + ".mlp", d, hidden);
  }
  reg.norm("dec.ln", d);
  reg.linear("dec.proj", d, e);
  params_.add("log_t_ab", Tensor<float>({1}, static_cast<float>(std::log(10.0))), false);
  params_.add("b_ab", Tensor<float>({1}, 0.0f), false);
  normalize_prototypes();
}

QModel QModel::clone() const { return QModel(cfg_, params_.clone()); }

Var<float> QModel::linear(const Var<float>& x, const std::string& prefix) const {
  return ad::add(ad::matmul(x, p(prefix + ".w")), p(prefix + ".b"));
}

Var<float> QModel::norm(const Var<float>& x, const std::string& prefix) const {
  return ad::layer_norm(x, p(prefix + ".g"), p(prefix + ".b"));
}

Var<float> QModel::mlp(const Var<float>& x, const std::string& prefix) const {
  return linear(ad::gelu(linear(x, prefix + ".fc1")), prefix + ".fc2");
}

Var<float> QModel::split_heads(const Var<float>& x, int heads) const {
  if (heads == 1) return x;
  const Shape& s = x.shape();  // [B, T, d]
  const std::size_t h = static_cast<std::size_t>(heads);
  auto y = ad::reshape(x, {s[0], s[1], h, s[2] / h});
  y = ad::permute(y, {0, 2, 1, 3});
  return ad::reshape(y, {s[0] * h, s[1], s[2] / h});
}

Var<float> QModel::merge_heads(const Var<float>& x, std::size_t batch, int heads) const {
  if (heads == 1) return x;
  const Shape& s = x.shape();  // [B*H, T, dh]
  const std::size_t h = static_cast<std::size_t>(heads);
  auto y = ad::reshape(x, {batch, h, s[1], s[2]});
  y = ad::permute(y, {0, 2, 1, 3});
  return ad::reshape(y, {batch, s[1], h * s[2]});
}

Var<float> QModel::self_attention(const Var<float>& x, const std::string& prefix, int heads) const {
  const std::size_t batch = x.shape()[0];
  auto q = split_heads(linear(x, prefix + ".q"), heads);
  auto k = split_heads(linear(x, prefix + ".k"), heads);
  auto v = split_heads(linear(x, prefix + ".v"), heads);
  return linear(merge_heads(ad::attention(q, k, v), batch, heads), prefix + ".o");
}

ViewEncoding QModel::encode(const Tensor<float>& pixels) const {
  const auto& b = cfg_.backbone;
  const auto r = static_cast<std::size_t>(b.resolution);
  if (pixels.rank() != 4 || pixels.dim(1) != r || pixels.dim(2) != r || pixels.dim(3) != 3) {
    throw ad::ShapeError("encode: expected [B, " + std::to_string(r) + ", " + std::to_string(r) +
                         ", 3] pixels, got " + ad::to_string(pixels.shape()));
  }
  const std::size_t batch = pixels.dim(0);
  const auto ps = static_cast<std::size_t>(b.patch);
  const std::size_t grid = r / ps;
  const std::size_t tokens = grid * grid;
  const std::size_t patch_dim = ps * ps * 3;
  Tensor<float> patches({batch, tokens, patch_dim});
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t gy = 0; gy < grid; ++gy) {
      for (std::size_t gx = 0; gx < grid; ++gx) {
        float* dst = patches.data() + (n * tokens + gy * grid + gx) * patch_dim;
        for (std::size_t y = 0; y < ps; ++y) {
          const float* src = pixels.data() + ((n * r + gy * ps + y) * r + gx * ps) * 3;
          std::copy(src, src + ps * 3, dst + y * ps * 3);
        }
      }
    }
  }
  auto x = ad::add(linear(ad::constant(std::move(patches)), "patch"), p("pos"));
  for (int i = 0; i < b.depth; ++i) {
    const std::string pre = idx("enc", i);
    x = ad::add(x, self_attention(norm(x, pre + ".ln1"), pre + ".attn", b.heads));
    x = ad::add(x, mlp(norm(x, pre + ".ln2"), pre + ".mlp"));
  }
  ViewEncoding enc;
  enc.tokens = norm(x, "enc.ln");
  enc.features = ad::mean(enc.tokens, 1);
  enc.embedding = ad::l2_normalize(linear(enc.features, "img_proj"));
  return enc;
}

AnnotationEmbedding QModel::embed_annotation_ids(std::span<const std::int64_t> ids) const {
  if (cfg_.variant != Variant::Clip) throw ModelConfigError("annotation ids need the clip variant");
  if (ids.empty()) throw ad::ShapeError("empty annotation batch");
  for (auto id : ids) {
    if (id < 0 || id >= cfg_.vocab_size) {
      throw ad::ShapeError("annotation id " + std::to_string(id) + " outside vocabulary of " +
                           std::to_string(cfg_.vocab_size));
    }
  }
  auto rows = ad::gather_rows(p("ann.table"), ids);
  return {ad::l2_normalize(linear(rows, "ann.reward")), ad::l2_normalize(linear(rows, "ann.value"))};
}

AnnotationEmbedding QModel::embed_annotation_views(const ViewEncoding& enc) const {
  if (cfg_.variant != Variant::SimClr) throw ModelConfigError("annotation views need the simclr variant");
  return {enc.embedding, ad::l2_normalize(linear(enc.features, "ann.value"))};
}

AnnotationEmbedding QModel::embed_prototypes() const {
  if (cfg_.variant != Variant::Dino) throw ModelConfigError("prototypes need the dino variant");
  auto protos = ad::l2_normalize(p("protos"));
  return {protos, ad::l2_normalize(linear(protos, "ann.value"))};
}

Var<float> QModel::reward_temperature() const {
  if (cfg_.variant == Variant::Dino) {
    return ad::constant(Tensor<float>({1}, static_cast<float>(1.0 / cfg_.dino_student_temp)));
  }
  return ad::exp(p("log_t"));
}

Var<float> QModel::reward_logits(const ViewEncoding& views, const AnnotationEmbedding& ann) const {
  if (ann.reward.shape().empty() || ann.reward.shape()[0] == 0) throw ad::ShapeError("empty annotation batch");
  return ad::mul(ad::matmul(views.embedding, ann.reward, false, true), reward_temperature());
}

Var<float> QModel::decode_actions(const ViewEncoding& views, const ActionQueries& queries,
                                  bool mask_actions) const {
  const std::size_t pairs = queries.source.size();
  if (pairs == 0 || queries.actions.size() != pairs) {
    throw ad::ShapeError("decode_actions: need one action per source index");
  }
  const auto d = static_cast<std::size_t>(cfg_.backbone.width);
  const int heads = cfg_.backbone.heads;
  Var<float> x;
  if (mask_actions) {
    x = ad::add(ad::constant(Tensor<float>({pairs, 4, d})), p("act.mask"));
  } else {
    std::vector<Var<float>> slots;
    std::vector<std::int64_t> tok(pairs);
    for (int s = 0; s < 4; ++s) {
      for (std::size_t i = 0; i < pairs; ++i) {
        const auto t = queries.actions[i][static_cast<std::size_t>(s)];
        if (t < 0 || t >= geometry::kActionBins) {
          throw ad::ShapeError("action token " + std::to_string(t) + " outside vocabulary of " +
                               std::to_string(geometry::kActionBins));
        }
        tok[i] = t;
      }
      slots.push_back(ad::reshape(ad::gather_rows(p(idx("act.tok", s)), tok), {pairs, 1, d}));
    }
    x = ad::concat(slots, 1);
  }
  for (int i = 0; i < cfg_.decoder_depth; ++i) {
    const std::string pre = idx("dec", i);
    x = ad::add(x, self_attention(norm(x, pre + ".ln1"), pre + ".self", heads));
    // Keys/values are projected once per view, then shared by every pair that reads it.
    auto mem = norm(views.tokens, pre + ".ln_mem");
    auto k = ad::gather_rows(linear(mem, pre + ".cross.k"), queries.source);
    auto v = ad::gather_rows(linear(mem, pre + ".cross.v"), queries.source);
    auto q = linear(norm(x, pre + ".ln2"), pre + ".cross.q");
    auto att = ad::attention(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads));
    x = ad::add(x, linear(merge_heads(att, pairs, heads), pre + ".cross.o"));
    x = ad::add(x, mlp(norm(x, pre + ".ln3"), pre + ".mlp"));
  }
  auto pooled = ad::mean(norm(x, "dec.ln"), 1);
  return ad::l2_normalize(linear(pooled, "dec.proj"));
}

Var<float> QModel::value_logits(const ViewEncoding& views, const ActionQueries& queries,
                                const AnnotationEmbedding& ann, bool mask_actions) const {
  auto phi = decode_actions(views, queries, mask_actions);
  auto sim = ad::matmul(phi, ann.value, false, true);
  return ad::add(ad::mul(sim, ad::exp(p("log_t_ab"))), p("b_ab"));
}

void QModel::normalize_prototypes() {
  if (cfg_.variant != Variant::Dino) return;
  Tensor<float>& protos = params_.get("protos").mutable_value();
  const std::size_t e = protos.dim(1);
  for (std::size_t k = 0; k < protos.dim(0); ++k) {
    double ss = 0.0;
    for (std::size_t j = 0; j < e; ++j) ss += static_cast<double>(protos[k * e + j]) * protos[k * e + j];
    const double n = std::max(std::sqrt(ss), 1e-12);
    for (std::size_t j = 0; j < e; ++j) protos[k * e + j] = static_cast<float>(protos[k * e + j] / n);
  }
}

std::vector<std::string> QModel::backbone_parameter_names() const {
  std::vector<std::string> out;
  for (const auto& e : params_.entries()) {
    if (e.name.rfind("patch.", 0) == 0 || e.name == "pos" || e.name.rfind("enc", 0) == 0) out.push_back(e.name);
  }
  return out;
}

}  // namespace annoboot::models
