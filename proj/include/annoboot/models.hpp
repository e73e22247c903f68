#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "annoboot/autodiff.hpp"
#include "annoboot/geometry.hpp"
#include "annoboot/optim.hpp"
#include "annoboot/synthdata.hpp"

namespace annoboot::models {

using ad::Tensor;
using ad::Var;
using Param = Var<float>;

enum class Variant { Clip, SimClr, Dino };

Variant parse_variant(const std::string& name);
const char* to_string(Variant v);

struct BackboneConfig {
  int patch = 8;
  int width = 64;
  int depth = 4;
  int heads = 4;
  int resolution = 32;
  int mlp_ratio = 4;

  int tokens() const { return (resolution / patch) * (resolution / patch); }
};

struct ModelConfig {
  Variant variant = Variant::Clip;
  BackboneConfig backbone;
  int decoder_depth = 2;
  int embed_dim = 64;
  /// CLIP: annotation vocabulary size (glyphs + background).
  int vocab_size = 9;
  /// DINO: prototype count K.
  int prototypes = 32;
  /// DINO student temperature; the student's reward logits are cos / temp.
  double dino_student_temp = 0.1;
};

class ModelConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

void validate(const ModelConfig& cfg);

/// Backbone output for a batch of views.
struct ViewEncoding {
  Var<float> tokens;    // [B, T, d]
  Var<float> features;  // [B, d], mean-pooled tokens
  Var<float> embedding; // [B, e], projected and L2-normalized
};

/// Annotation embeddings for the reward (psi) and value (psi_AB) heads, both L2-normalized.
struct AnnotationEmbedding {
  Var<float> reward;  // [L, e]
  Var<float> value;   // [L, e]
};

/// B x R x R x 3 pixel tensor from rendered views.
Tensor<float> stack_views(std::span<const synth::View> views);

/// Value-decoder queries: each pair decodes `actions[p]` from source view `source[p]`.
struct ActionQueries {
  std::vector<std::int64_t> source;
  std::vector<geometry::ActionTokens> actions;
};

class QModel {
 public:
  QModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ad::ParamStore<float>& params() { return params_; }
  const ad::ParamStore<float>& params() const { return params_; }

  /// Deep copy with independent parameters (used for the EMA target network).
  QModel clone() const;

  /// pixels: [B, R, R, 3].
  ViewEncoding encode(const Tensor<float>& pixels) const;

  /// CLIP: vocabulary ids. Throws for other variants.
  AnnotationEmbedding embed_annotation_ids(std::span<const std::int64_t> ids) const;
  /// SimCLR: annotation views encoded by the shared backbone.
  AnnotationEmbedding embed_annotation_views(const ViewEncoding& enc) const;
  /// DINO: every prototype is an annotation.
  AnnotationEmbedding embed_prototypes() const;

  /// Positive reward temperature t (exp of the stored log-scale value; fixed 1/temp for DINO).
  Var<float> reward_temperature() const;

  /// [B, L] = t * phi(x)^T psi(l).
  Var<float> reward_logits(const ViewEncoding& views, const AnnotationEmbedding& ann) const;

  /// Action-conditioned image embedding phi_AB(x, a), [P, e], L2-normalized.
  Var<float> decode_actions(const ViewEncoding& views, const ActionQueries& queries,
                            bool mask_actions = false) const;

  /// [P, L] = t_AB * phi_AB(x, a)^T psi_AB(l) + b_AB.
  Var<float> value_logits(const ViewEncoding& views, const ActionQueries& queries,
                          const AnnotationEmbedding& ann, bool mask_actions = false) const;

  /// Re-normalizes prototype rows (DINO only; no-op otherwise).
  void normalize_prototypes();

  /// Parameters belonging to the view backbone (patch embed, blocks, final norm).
  std::vector<std::string> backbone_parameter_names() const;

 private:
  QModel(const ModelConfig& cfg, ad::ParamStore<float> params) : cfg_(cfg), params_(std::move(params)) {}

  Param p(const std::string& name) const { return params_.get(name); }
  Var<float> linear(const Var<float>& x, const std::string& prefix) const;
  Var<float> norm(const Var<float>& x, const std::string& prefix) const;
  Var<float> mlp(const Var<float>& x, const std::string& prefix) const;
  Var<float> self_attention(const Var<float>& x, const std::string& prefix, int heads) const;
  Var<float> split_heads(const Var<float>& x, int heads) const;
  Var<float> merge_heads(const Var<float>& x, std::size_t batch, int heads) const;

  ModelConfig cfg_;
  ad::ParamStore<float> params_;
};

}  // namespace annoboot::models
