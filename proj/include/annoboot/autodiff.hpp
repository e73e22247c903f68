#pragma once

// Tape-free reverse-mode differentiation over dense tensors. Every op returns a
// fresh Var whose node remembers its parents and a backward closure; calling
// backward() on a scalar walks the graph in reverse topological order.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "annoboot/tensor.hpp"

namespace annoboot::ad {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Tensor<T>&)> backward;
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const& { return node_->value; }
  // A temporary Var may hold the last reference to its node.
  Tensor<T> value() && { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  /// Accumulated gradient; zeros when nothing flowed in.
  Tensor<T> grad() const {
    return node_->grad.empty() && !node_->value.empty() ? Tensor<T>(shape()) : node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// While alive, ops record no graph (pure forward evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Seeds d(root)/d(root) = 1 (root must be scalar) and propagates.
template <typename T>
void backward(const Var<T>& root);

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

template <typename T> Var<T> stop_gradient(const Var<T>& x);

template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T> Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& axes);

// Binary ops broadcast `b` by tiling: b's shape must be a suffix of a's shape,
// or b must hold a single element. add/mul swap operands when a is the smaller.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& x, T s);
template <typename T> Var<T> add_scalar(const Var<T>& x, T s);

template <typename T> Var<T> exp(const Var<T>& x);
template <typename T> Var<T> log(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> gelu(const Var<T>& x);

/// a: [..., m, k] (or [M, k] against a 2-D b), b: [..., k, n]. Transpose flags
/// apply to the last two axes. A 2-D b is shared across all leading dims of a.
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false);

template <typename T> Var<T> softmax(const Var<T>& x, int axis = -1);
template <typename T> Var<T> log_softmax(const Var<T>& x, int axis = -1);

/// Normalizes the last axis, then applies gain and bias (both shape [d]).
template <typename T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5));

/// x / max(||x||, eps) along the last axis.
template <typename T> Var<T> l2_normalize(const Var<T>& x, T eps = T(1e-12));

template <typename T> Var<T> sum(const Var<T>& x, int axis);
template <typename T> Var<T> mean(const Var<T>& x, int axis);
template <typename T> Var<T> sum_all(const Var<T>& x);
template <typename T> Var<T> mean_all(const Var<T>& x);

template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, int axis);

/// Rows of x (slices along axis 0) picked by index; backward scatter-adds.
template <typename T> Var<T> gather_rows(const Var<T>& x, std::span<const std::int64_t> indices);

/// softmax(q k^T / sqrt(d)) v over [batch, tokens, d] inputs.
template <typename T> Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v);

/// Mean over rows of -sum_c target[r, c] * log_softmax(logits)[r, c]. Logits [M, C].
template <typename T> Var<T> softmax_cross_entropy(const Var<T>& logits, const Tensor<T>& targets);

/// Integer-label convenience form of softmax_cross_entropy.
template <typename T> Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::int64_t> labels);

/// Mean of softplus(x) - t * x over all elements; targets share the logits' shape.
template <typename T> Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& targets);

}  // namespace annoboot::ad
