#include "annoboot/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include <Eigen/Core>

namespace annoboot::ad {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<NodePtr<T>> parents,
                 std::function<void(const Tensor<T>&)> fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(fn);
  }
  return Var<T>(std::move(node));
}

template <typename T>
void accumulate(Node<T>& node, const Tensor<T>& g) {
  if (!node.requires_grad) return;
  if (node.grad.empty()) {
    node.grad = g;
    return;
  }
  T* dst = node.grad.data();
  const T* src = g.data();
  for (std::size_t i = 0, n = g.size(); i < n; ++i) dst[i] += src[i];
}

template <typename T>
void accumulate(Node<T>& node, Tensor<T>&& g) {
  if (!node.requires_grad) return;
  if (node.grad.empty()) {
    node.grad = std::move(g);
    return;
  }
  accumulate(node, static_cast<const Tensor<T>&>(g));
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C (rows x cols) += op(X) * op(Y), where X is stored rx x cx and Y ry x cy.
template <typename T>
void gemm_acc(T* c, const T* x, std::size_t rx, std::size_t cx, bool tx, const T* y,
              std::size_t ry, std::size_t cy, bool ty) {
  using CMap = Eigen::Map<const RowMat<T>>;
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  CMap X(x, ei(rx), ei(cx));
  CMap Y(y, ei(ry), ei(cy));
  const std::size_t m = tx ? cx : rx;
  const std::size_t n = ty ? ry : cy;
  Eigen::Map<RowMat<T>> C(c, ei(m), ei(n));
  if (!tx && !ty) C.noalias() += X * Y;
  else if (!tx && ty) C.noalias() += X * Y.transpose();
  else if (tx && !ty) C.noalias() += X.transpose() * Y;
  else C.noalias() += X.transpose() * Y.transpose();
}

// b must tile a: b's shape a suffix of a's shape, or a single element.
void check_tiles(const Shape& a, const Shape& b, const char* op) {
  if (numel(b) == 1) return;
  bool ok = b.size() <= a.size();
  for (std::size_t i = 0; ok && i < b.size(); ++i) ok = a[a.size() - b.size() + i] == b[i];
  if (!ok) {
    throw ShapeError(std::string(op) + ": shape " + to_string(b) + " does not broadcast onto " +
                     to_string(a));
  }
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
void backward(const Var<T>& root) {
  if (root.size() != 1) {
    throw ShapeError("backward() needs a scalar root, got " + to_string(root.shape()));
  }
  if (!root.requires_grad()) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  accumulate(*root.node(), Tensor<T>(root.shape(), T(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(node->grad);
  }
  // Interior nodes are not needed after the pass; release their buffers.
  for (Node<T>* node : order) {
    if (node->backward) {
      node->grad = Tensor<T>();
    }
  }
}

template <typename T>
Var<T> stop_gradient(const Var<T>& x) {
  return Var<T>(x.value(), false);
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  const Shape in_shape = x.shape();
  auto px = x.node();
  return make_node<T>(x.value().reshaped(std::move(shape)), {px}, [px, in_shape](const Tensor<T>& g) {
    accumulate(*px, g.reshaped(in_shape));
  });
}

namespace {

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  Shape out_shape(r);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[axes[i]];
    src_stride[i] = in_strides[axes[i]];
  }
  Tensor<T> out(out_shape);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  const T* xs = x.data();
  T* os = out.data();
  const std::size_t n = out.size();
  const std::size_t last = r ? out_shape[r - 1] : 1;
  const std::size_t last_stride = r ? src_stride[r - 1] : 0;
  for (std::size_t o = 0; o < n; o += last) {
    for (std::size_t j = 0; j < last; ++j) os[o + j] = xs[src + j * last_stride];
    // advance the multi-index, skipping the innermost axis handled above
    for (std::size_t d = r - 1; d-- > 0;) {
      src += src_stride[d];
      if (++idx[d] < out_shape[d]) break;
      src -= src_stride[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.shape().size();
  std::vector<bool> used(r, false);
  if (axes.size() != r) throw ShapeError("permute: axes size does not match rank of " + to_string(x.shape()));
  for (auto a : axes) {
    if (a >= r || used[a]) throw ShapeError("permute: invalid axes for " + to_string(x.shape()));
    used[a] = true;
  }
  std::vector<std::size_t> inverse(r);
  for (std::size_t i = 0; i < r; ++i) inverse[axes[i]] = i;
  auto px = x.node();
  return make_node<T>(permute_tensor(x.value(), axes), {px}, [px, inverse](const Tensor<T>& g) {
    accumulate(*px, permute_tensor(g, inverse));
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.size() < b.size()) return add(b, a);
  check_tiles(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const std::size_t nb = b.size();
  const T* bs = b.value().data();
  T* os = out.data();
  for (std::size_t i = 0, n = out.size(); i < n; i += nb) {
    for (std::size_t j = 0; j < nb; ++j) os[i + j] += bs[j];
  }
  auto pa = a.node();
  auto pb = b.node();
  return make_node<T>(std::move(out), {pa, pb}, [pa, pb, nb](const Tensor<T>& g) {
    accumulate(*pa, g);
    if (!pb->requires_grad) return;
    if (g.size() == nb) {
      accumulate(*pb, g.reshaped(pb->value.shape()));
      return;
    }
    Tensor<T> gb(pb->value.shape());
    for (std::size_t i = 0, n = g.size(); i < n; i += nb) {
      for (std::size_t j = 0; j < nb; ++j) gb[j] += g[i + j];
    }
    accumulate(*pb, std::move(gb));
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return add(a, scale(b, T(-1)));
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (a.size() < b.size()) return mul(b, a);
  check_tiles(a.shape(), b.shape(), "mul");
  const std::size_t nb = b.size();
  Tensor<T> out = a.value();
  const T* bs = b.value().data();
  T* os = out.data();
  for (std::size_t i = 0, n = out.size(); i < n; i += nb) {
    for (std::size_t j = 0; j < nb; ++j) os[i + j] *= bs[j];
  }
  auto pa = a.node();
  auto pb = b.node();
  return make_node<T>(std::move(out), {pa, pb}, [pa, pb, nb](const Tensor<T>& g) {
    const std::size_t n = g.size();
    if (pa->requires_grad) {
      Tensor<T> ga(pa->value.shape());
      for (std::size_t i = 0; i < n; i += nb) {
        for (std::size_t j = 0; j < nb; ++j) ga[i + j] = g[i + j] * pb->value[j];
      }
      accumulate(*pa, std::move(ga));
    }
    if (pb->requires_grad) {
      Tensor<T> gb(pb->value.shape());
      for (std::size_t i = 0; i < n; i += nb) {
        for (std::size_t j = 0; j < nb; ++j) gb[j] += g[i + j] * pa->value[i + j];
      }
      accumulate(*pb, std::move(gb));
    }
  });
}

namespace {

// Elementwise unary op: f computes y from x, df computes dy/dx from (x, y).
template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& x, F f, DF df) {
  Tensor<T> out(x.shape());
  const T* xs = x.value().data();
  for (std::size_t i = 0, n = out.size(); i < n; ++i) out[i] = f(xs[i]);
  auto px = x.node();
  if (!g_grad_enabled || !px->requires_grad) return make_node<T>(std::move(out), {px}, nullptr);
  auto result = make_node<T>(std::move(out), {px}, nullptr);
  std::weak_ptr<Node<T>> self = result.node();
  result.node()->backward = [px, self, df](const Tensor<T>& g) {
    auto me = self.lock();
    Tensor<T> gx(px->value.shape());
    for (std::size_t i = 0, n = g.size(); i < n; ++i) gx[i] = g[i] * df(px->value[i], me->value[i]);
    accumulate(*px, std::move(gx));
  };
  return result;
}

}  // namespace

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  return unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T s) {
  return unary(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  return unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary(
      x,
      [](T v) {
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary(x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  return unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * kInvSqrt2)); },
      [](T v, T) {
        return T(0.5) * (T(1) + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool ta, bool tb) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&](const char* why) {
    return ShapeError(std::string("matmul: ") + why + " for " + to_string(sa) + " x " + to_string(sb) +
                      (ta ? " (a^T)" : "") + (tb ? " (b^T)" : ""));
  };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch("operands need rank >= 2");
  const bool shared = sb.size() == 2;
  std::size_t batch = 1, ra, ca;
  if (shared) {
    if (ta && sa.size() != 2) throw mismatch("transposed a against a 2-D b must be 2-D");
    ca = sa.back();
    ra = a.size() / ca;
  } else {
    if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
      throw mismatch("batch dims differ");
    }
    ra = sa[sa.size() - 2];
    ca = sa.back();
    batch = a.size() / (ra * ca);
  }
  const std::size_t rb = sb[sb.size() - 2];
  const std::size_t cb = sb.back();
  const std::size_t m = ta ? ca : ra;
  const std::size_t k = ta ? ra : ca;
  const std::size_t kb = tb ? cb : rb;
  const std::size_t n = tb ? rb : cb;
  if (k != kb) throw mismatch("inner dims differ");
  Shape out_shape;
  if (shared && !ta) {
    out_shape.assign(sa.begin(), sa.end() - 1);
  } else {
    out_shape.assign(sa.begin(), sa.end() - 2);
    out_shape.push_back(m);
  }
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  const std::size_t stride_a = ra * ca, stride_b = shared ? 0 : rb * cb, stride_c = m * n;
  for (std::size_t i = 0; i < batch; ++i) {
    gemm_acc(out.data() + i * stride_c, a.value().data() + i * stride_a, ra, ca, ta,
             b.value().data() + i * stride_b, rb, cb, tb);
  }
  auto pa = a.node();
  auto pb = b.node();
  return make_node<T>(std::move(out), {pa, pb}, [=](const Tensor<T>& g) {
    const T* av = pa->value.data();
    const T* bv = pb->value.data();
    if (pa->requires_grad) {
      Tensor<T> ga(pa->value.shape());
      for (std::size_t i = 0; i < batch; ++i) {
        T* dst = ga.data() + i * stride_a;
        const T* gi = g.data() + i * stride_c;
        const T* bi = bv + i * stride_b;
        if (!ta) gemm_acc(dst, gi, m, n, false, bi, rb, cb, !tb);
        else gemm_acc(dst, bi, rb, cb, tb, gi, m, n, true);
      }
      accumulate(*pa, std::move(ga));
    }
    if (pb->requires_grad) {
      Tensor<T> gb(pb->value.shape());
      for (std::size_t i = 0; i < batch; ++i) {
        T* dst = gb.data() + i * stride_b;
        const T* gi = g.data() + i * stride_c;
        const T* ai = av + i * stride_a;
        if (!tb) gemm_acc(dst, ai, ra, ca, !ta, gi, m, n, false);
        else gemm_acc(dst, gi, m, n, true, ai, ra, ca, ta);
      }
      accumulate(*pb, std::move(gb));
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.shape().size());
  const AxisSplit s = split_axis(x.shape(), ax);
  Tensor<T> out(x.shape());
  const T* xs = x.value().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, xs[base + e * s.inner]);
      T total = 0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const T v = std::exp(xs[base + e * s.inner] - mx);
        out[base + e * s.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= total;
    }
  }
  auto px = x.node();
  auto result = make_node<T>(std::move(out), {px}, nullptr);
  if (result.requires_grad()) {
    std::weak_ptr<Node<T>> self = result.node();
    result.node()->backward = [px, self, s](const Tensor<T>& g) {
      const Tensor<T>& y = self.lock()->value;
      Tensor<T> gx(y.shape());
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.extent * s.inner + in;
          T dot = 0;
          for (std::size_t e = 0; e < s.extent; ++e) dot += g[base + e * s.inner] * y[base + e * s.inner];
          for (std::size_t e = 0; e < s.extent; ++e) {
            const std::size_t i = base + e * s.inner;
            gx[i] = y[i] * (g[i] - dot);
          }
        }
      }
      accumulate(*px, std::move(gx));
    };
  }
  return result;
}

template <typename T>
Var<T> log_softmax(const Var<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.shape().size());
  const AxisSplit s = split_axis(x.shape(), ax);
  Tensor<T> out(x.shape());
  const T* xs = x.value().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, xs[base + e * s.inner]);
      T total = 0;
      for (std::size_t e = 0; e < s.extent; ++e) total += std::exp(xs[base + e * s.inner] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] = xs[base + e * s.inner] - lse;
    }
  }
  auto px = x.node();
  auto result = make_node<T>(std::move(out), {px}, nullptr);
  if (result.requires_grad()) {
    std::weak_ptr<Node<T>> self = result.node();
    result.node()->backward = [px, self, s](const Tensor<T>& g) {
      const Tensor<T>& y = self.lock()->value;
      Tensor<T> gx(y.shape());
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.extent * s.inner + in;
          T gs = 0;
          for (std::size_t e = 0; e < s.extent; ++e) gs += g[base + e * s.inner];
          for (std::size_t e = 0; e < s.extent; ++e) {
            const std::size_t i = base + e * s.inner;
            gx[i] = g[i] - std::exp(y[i]) * gs;
          }
        }
      }
      accumulate(*px, std::move(gx));
    };
  }
  return result;
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  if (x.shape().empty()) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d) {
    throw ShapeError("layer_norm: gain " + to_string(gain.shape()) + " / bias " + to_string(bias.shape()) +
                     " do not match last axis of " + to_string(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(rows);
  const T* xs = x.value().data();
  const T* gs = gain.value().data();
  const T* bs = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xs + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gs[j] + bs[j];
    }
  }
  auto px = x.node();
  auto pg = gain.node();
  auto pb = bias.node();
  return make_node<T>(std::move(out), {px, pg, pb},
                      [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), d, rows](const Tensor<T>& g) {
    const T* gain_v = pg->value.data();
    if (px->requires_grad) {
      Tensor<T> gx(px->value.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        T m1 = 0, m2 = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const T dh = g[r * d + j] * gain_v[j];
          m1 += dh;
          m2 += dh * xhat[r * d + j];
        }
        m1 /= T(d);
        m2 /= T(d);
        for (std::size_t j = 0; j < d; ++j) {
          const T dh = g[r * d + j] * gain_v[j];
          gx[r * d + j] = inv_std[r] * (dh - m1 - xhat[r * d + j] * m2);
        }
      }
      accumulate(*px, std::move(gx));
    }
    if (pg->requires_grad || pb->requires_grad) {
      Tensor<T> gg(pg->value.shape()), gb(pb->value.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
          gg[j] += g[r * d + j] * xhat[r * d + j];
          gb[j] += g[r * d + j];
        }
      }
      accumulate(*pg, std::move(gg));
      accumulate(*pb, std::move(gb));
    }
  });
}

template <typename T>
Var<T> l2_normalize(const Var<T>& x, T eps) {
  if (x.shape().empty()) throw ShapeError("l2_normalize: scalar input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  Tensor<T> out(x.shape());
  std::vector<T> norms(rows);
  const T* xs = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += xs[r * d + j] * xs[r * d + j];
    const T n = std::max(std::sqrt(ss), eps);
    norms[r] = n;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xs[r * d + j] / n;
  }
  auto px = x.node();
  auto result = make_node<T>(std::move(out), {px}, nullptr);
  if (result.requires_grad()) {
    std::weak_ptr<Node<T>> self = result.node();
    result.node()->backward = [px, self, norms = std::move(norms), d, rows, eps](const Tensor<T>& g) {
      const Tensor<T>& y = self.lock()->value;
      Tensor<T> gx(y.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        const T n = norms[r];
        if (n <= eps) {
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] = g[r * d + j] / eps;
          continue;
        }
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += y[r * d + j] * g[r * d + j];
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] = (g[r * d + j] - y[r * d + j] * dot) / n;
      }
      accumulate(*px, std::move(gx));
    };
  }
  return result;
}

template <typename T>
Var<T> sum(const Var<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.shape().size());
  const AxisSplit s = split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  Tensor<T> out(out_shape);
  const T* xs = x.value().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t e = 0; e < s.extent; ++e) {
      const T* src = xs + (o * s.extent + e) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (std::size_t in = 0; in < s.inner; ++in) dst[in] += src[in];
    }
  }
  auto px = x.node();
  return make_node<T>(std::move(out), {px}, [px, s](const Tensor<T>& g) {
    Tensor<T> gx(px->value.shape());
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t e = 0; e < s.extent; ++e) {
        T* dst = gx.data() + (o * s.extent + e) * s.inner;
        const T* src = g.data() + o * s.inner;
        for (std::size_t in = 0; in < s.inner; ++in) dst[in] = src[in];
      }
    }
    accumulate(*px, std::move(gx));
  });
}

template <typename T>
Var<T> mean(const Var<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.shape().size());
  return scale(sum(x, axis), T(1) / T(x.shape()[ax]));
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  T total = 0;
  for (T v : x.value().vec()) total += v;
  auto px = x.node();
  return make_node<T>(Tensor<T>::scalar(total), {px}, [px](const Tensor<T>& g) {
    accumulate(*px, Tensor<T>(px->value.shape(), g[0]));
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  return scale(sum_all(x), T(1) / T(x.size()));
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = xs.front().shape();
  const std::size_t ax = normalize_axis(axis, first.size());
  Shape out_shape = first;
  out_shape[ax] = 0;
  std::vector<std::size_t> extents;
  for (const auto& x : xs) {
    const Shape& sh = x.shape();
    bool ok = sh.size() == first.size();
    for (std::size_t i = 0; ok && i < sh.size(); ++i) ok = i == ax || sh[i] == first[i];
    if (!ok) throw ShapeError("concat: " + to_string(sh) + " incompatible with " + to_string(first));
    out_shape[ax] += sh[ax];
    extents.push_back(sh[ax]);
  }
  const AxisSplit s = split_axis(out_shape, ax);
  Tensor<T> out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const std::size_t chunk = extents[k] * s.inner;
    const T* src = xs[k].value().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy(src + o * chunk, src + (o + 1) * chunk, out.data() + o * s.extent * s.inner + offset);
    }
    offset += chunk;
  }
  std::vector<NodePtr<T>> parents;
  for (const auto& x : xs) parents.push_back(x.node());
  auto ps = parents;
  return make_node<T>(std::move(out), std::move(parents), [ps, extents, s](const Tensor<T>& g) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < ps.size(); ++k) {
      const std::size_t chunk = extents[k] * s.inner;
      if (ps[k]->requires_grad) {
        Tensor<T> gk(ps[k]->value.shape());
        for (std::size_t o = 0; o < s.outer; ++o) {
          const T* src = g.data() + o * s.extent * s.inner + offset;
          std::copy(src, src + chunk, gk.data() + o * chunk);
        }
        accumulate(*ps[k], std::move(gk));
      }
      offset += chunk;
    }
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::int64_t> indices) {
  if (x.shape().empty()) throw ShapeError("gather_rows: scalar input");
  const std::size_t rows = x.shape()[0];
  const std::size_t width = rows ? x.size() / rows : 0;
  Shape out_shape = x.shape();
  out_shape[0] = indices.size();
  Tensor<T> out(out_shape);
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " out of range for " +
                       to_string(x.shape()));
    }
    const T* src = x.value().data() + static_cast<std::size_t>(idx[i]) * width;
    std::copy(src, src + width, out.data() + i * width);
  }
  auto px = x.node();
  return make_node<T>(std::move(out), {px}, [px, idx = std::move(idx), width](const Tensor<T>& g) {
    Tensor<T> gx(px->value.shape());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      T* dst = gx.data() + static_cast<std::size_t>(idx[i]) * width;
      const T* src = g.data() + i * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
    }
    accumulate(*px, std::move(gx));
  });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v) {
  const T inv = T(1) / std::sqrt(static_cast<T>(q.shape().back()));
  return matmul(softmax(scale(matmul(q, k, false, true), inv), -1), v);
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const Tensor<T>& targets) {
  if (logits.shape().size() != 2 || targets.shape() != logits.shape()) {
    throw ShapeError("softmax_cross_entropy: logits " + to_string(logits.shape()) + " vs targets " +
                     to_string(targets.shape()));
  }
  const std::size_t m = logits.shape()[0];
  const std::size_t c = logits.shape()[1];
  Tensor<T> probs(logits.shape());
  const T* xs = logits.value().data();
  T loss = 0;
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = xs + r * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, row[j]);
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) {
      probs[r * c + j] = std::exp(row[j] - lse);
      const T t = targets[r * c + j];
      if (t != T(0)) loss -= t * (row[j] - lse);
    }
  }
  loss /= T(m);
  auto px = logits.node();
  return make_node<T>(Tensor<T>::scalar(loss), {px}, [px, probs = std::move(probs), targets, m, c](const Tensor<T>& g) {
    Tensor<T> gx(px->value.shape());
    const T scale_g = g[0] / T(m);
    for (std::size_t r = 0; r < m; ++r) {
      T mass = 0;
      for (std::size_t j = 0; j < c; ++j) mass += targets[r * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        gx[r * c + j] = scale_g * (probs[r * c + j] * mass - targets[r * c + j]);
      }
    }
    accumulate(*px, std::move(gx));
  });
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::int64_t> labels) {
  if (logits.shape().size() != 2 || labels.size() != logits.shape()[0]) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     to_string(logits.shape()));
  }
  const std::size_t c = logits.shape()[1];
  Tensor<T> targets(logits.shape());
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(labels[r]) + " out of range");
    }
    targets[r * c + static_cast<std::size_t>(labels[r])] = T(1);
  }
  return softmax_cross_entropy(logits, targets);
}

template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& targets) {
  if (targets.shape() != logits.shape()) {
    throw ShapeError("bce_with_logits: logits " + to_string(logits.shape()) + " vs targets " +
                     to_string(targets.shape()));
  }
  const std::size_t n = logits.size();
  const T* xs = logits.value().data();
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T x = xs[i];
    loss += std::max(x, T(0)) - x * targets[i] + std::log1p(std::exp(-std::fabs(x)));
  }
  loss /= T(n);
  auto px = logits.node();
  return make_node<T>(Tensor<T>::scalar(loss), {px}, [px, targets, n](const Tensor<T>& g) {
    Tensor<T> gx(px->value.shape());
    const T s = g[0] / T(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T x = px->value[i];
      const T sig = x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
      gx[i] = s * (sig - targets[i]);
    }
    accumulate(*px, std::move(gx));
  });
}

#define ANNOBOOT_INSTANTIATE(T)                                                                  \
  template void backward<T>(const Var<T>&);                                                      \
  template Var<T> stop_gradient<T>(const Var<T>&);                                               \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                              \
  template Var<T> permute<T>(const Var<T>&, const std::vector<std::size_t>&);                    \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                          \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                          \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                          \
  template Var<T> scale<T>(const Var<T>&, T);                                                    \
  template Var<T> add_scalar<T>(const Var<T>&, T);                                               \
  template Var<T> exp<T>(const Var<T>&);                                                         \
  template Var<T> log<T>(const Var<T>&);                                                         \
  template Var<T> sigmoid<T>(const Var<T>&);                                                     \
  template Var<T> relu<T>(const Var<T>&);                                                        \
  template Var<T> gelu<T>(const Var<T>&);                                                        \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&, bool, bool);                           \
  template Var<T> softmax<T>(const Var<T>&, int);                                                \
  template Var<T> log_softmax<T>(const Var<T>&, int);                                            \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                 \
  template Var<T> l2_normalize<T>(const Var<T>&, T);                                             \
  template Var<T> sum<T>(const Var<T>&, int);                                                    \
  template Var<T> mean<T>(const Var<T>&, int);                                                   \
  template Var<T> sum_all<T>(const Var<T>&);                                                     \
  template Var<T> mean_all<T>(const Var<T>&);                                                    \
  template Var<T> concat<T>(const std::vector<Var<T>>&, int);                                    \
  template Var<T> gather_rows<T>(const Var<T>&, std::span<const std::int64_t>);                  \
  template Var<T> attention<T>(const Var<T>&, const Var<T>&, const Var<T>&);                     \
  template Var<T> softmax_cross_entropy<T>(const Var<T>&, const Tensor<T>&);                     \
  template Var<T> softmax_cross_entropy<T>(const Var<T>&, std::span<const std::int64_t>);        \
  template Var<T> bce_with_logits<T>(const Var<T>&, const Tensor<T>&);

ANNOBOOT_INSTANTIATE(float)
ANNOBOOT_INSTANTIATE(double)

#undef ANNOBOOT_INSTANTIATE

}  // namespace annoboot::ad
