#pragma once

// Central finite-difference certification of the autodiff ops. Shared by the
// unit tests and the acceptance binary.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "annoboot/autodiff.hpp"
#include "annoboot/rng.hpp"

namespace gradcheck {

using annoboot::Rng;
using annoboot::ad::Shape;
using annoboot::ad::Tensor;
using annoboot::ad::Var;

using Fn = std::function<Var<double>(const std::vector<Var<double>>&)>;

struct OpCase {
  std::string name;
  std::vector<Shape> input_shapes;
  Fn fn;
  /// Keep random inputs away from non-differentiable points (e.g. relu's kink)
  /// or outside a domain (log needs positive input).
  std::function<double(double)> shape_input = [](double v) { return v; };
};

inline Tensor<double> random_tensor(Rng& rng, const Shape& s, const std::function<double(double)>& f) {
  Tensor<double> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = f(rng.normal());
  return t;
}

/// Projects the op output on a fixed random direction so every output element
/// contributes to the scalar being differentiated.
inline double project(const Tensor<double>& out, const Tensor<double>& dir) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * dir[i];
  return s;
}

/// Worst relative error |analytic - numeric| / max(|analytic|, |numeric|, floor)
/// over every input element of `points` random draws.
inline double max_relative_error(const OpCase& op, int points, std::uint64_t seed, double h = 1e-5,
                                 double floor = 1e-3) {
  Rng rng(seed);
  double worst = 0.0;
  for (int p = 0; p < points; ++p) {
    std::vector<Tensor<double>> values;
    for (const auto& s : op.input_shapes) values.push_back(random_tensor(rng, s, op.shape_input));
    std::vector<Var<double>> inputs;
    for (const auto& v : values) inputs.emplace_back(v, true);
    Var<double> out = op.fn(inputs);
    Tensor<double> dir(out.shape());
    for (std::size_t i = 0; i < dir.size(); ++i) dir[i] = rng.normal();
    auto loss = annoboot::ad::sum_all(annoboot::ad::mul(out, Var<double>(dir)));
    annoboot::ad::backward(loss);
    auto eval = [&](const std::vector<Tensor<double>>& vs) {
      std::vector<Var<double>> in;
      for (const auto& v : vs) in.emplace_back(v, false);
      return project(op.fn(in).value(), dir);
    };
    for (std::size_t k = 0; k < values.size(); ++k) {
      const Tensor<double> analytic = inputs[k].grad();
      for (std::size_t i = 0; i < values[k].size(); ++i) {
        auto plus = values;
        auto minus = values;
        plus[k][i] += h;
        minus[k][i] -= h;
        const double numeric = (eval(plus) - eval(minus)) / (2.0 * h);
        const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), floor});
        worst = std::max(worst, std::fabs(analytic[i] - numeric) / denom);
      }
    }
  }
  return worst;
}

inline std::vector<OpCase> all_op_cases() {
  namespace ad = annoboot::ad;
  std::vector<OpCase> cases;
  auto away_from_zero = [](double v) { return v >= 0 ? v + 0.05 : v - 0.05; };
  cases.push_back({"matmul", {{3, 4}, {4, 5}}, [](auto& x) { return ad::matmul(x[0], x[1]); }});
  cases.push_back({"matmul_bt", {{3, 4}, {5, 4}}, [](auto& x) { return ad::matmul(x[0], x[1], false, true); }});
  cases.push_back({"matmul_at", {{4, 3}, {4, 5}}, [](auto& x) { return ad::matmul(x[0], x[1], true, false); }});
  cases.push_back({"matmul_batched", {{2, 3, 4}, {2, 4, 2}}, [](auto& x) { return ad::matmul(x[0], x[1]); }});
  cases.push_back({"matmul_shared_weight", {{2, 3, 4}, {4, 2}}, [](auto& x) { return ad::matmul(x[0], x[1]); }});
  cases.push_back({"add_broadcast", {{2, 3, 4}, {4}}, [](auto& x) { return ad::add(x[0], x[1]); }});
  cases.push_back({"sub", {{3, 4}, {3, 4}}, [](auto& x) { return ad::sub(x[0], x[1]); }});
  cases.push_back({"mul", {{3, 4}, {3, 4}}, [](auto& x) { return ad::mul(x[0], x[1]); }});
  cases.push_back({"mul_scalar_var", {{3, 4}, {1}}, [](auto& x) { return ad::mul(x[0], x[1]); }});
  cases.push_back({"scale", {{3, 4}}, [](auto& x) { return ad::scale(x[0], 2.5); }});
  cases.push_back({"exp", {{3, 4}}, [](auto& x) { return ad::exp(x[0]); }});
  cases.push_back({"log", {{3, 4}}, [](auto& x) { return ad::log(x[0]); },
                   [](double v) { return 0.2 + std::fabs(v); }});
  cases.push_back({"sigmoid", {{3, 4}}, [](auto& x) { return ad::sigmoid(x[0]); }});
  cases.push_back({"relu", {{3, 4}}, [](auto& x) { return ad::relu(x[0]); }, away_from_zero});
  cases.push_back({"gelu", {{3, 4}}, [](auto& x) { return ad::gelu(x[0]); }});
  cases.push_back({"softmax_last", {{3, 5}}, [](auto& x) { return ad::softmax(x[0], -1); }});
  cases.push_back({"softmax_axis0", {{4, 3, 2}}, [](auto& x) { return ad::softmax(x[0], 0); }});
  cases.push_back({"log_softmax", {{3, 5}}, [](auto& x) { return ad::log_softmax(x[0], 1); }});
  cases.push_back({"layer_norm", {{3, 6}, {6}, {6}}, [](auto& x) { return ad::layer_norm(x[0], x[1], x[2]); }});
  cases.push_back({"l2_normalize", {{3, 5}}, [](auto& x) { return ad::l2_normalize(x[0]); }});
  cases.push_back({"mean_axis", {{2, 3, 4}}, [](auto& x) { return ad::mean(x[0], 1); }});
  cases.push_back({"sum_axis", {{2, 3, 4}}, [](auto& x) { return ad::sum(x[0], -1); }});
  cases.push_back({"concat", {{2, 3}, {2, 2}}, [](auto& x) { return ad::concat<double>({x[0], x[1]}, 1); }});
  cases.push_back({"gather_rows", {{4, 3}}, [](auto& x) {
                     static const std::vector<std::int64_t> idx{2, 0, 2, 3, 1};
                     return ad::gather_rows(x[0], idx);
                   }});
  cases.push_back({"reshape_permute", {{2, 3, 4}}, [](auto& x) {
                     return ad::permute(ad::reshape(x[0], {3, 2, 4}), {2, 0, 1});
                   }});
  cases.push_back({"attention", {{2, 3, 4}, {2, 5, 4}, {2, 5, 4}},
                   [](auto& x) { return ad::attention(x[0], x[1], x[2]); }});
  cases.push_back({"softmax_cross_entropy", {{3, 4}}, [](auto& x) {
                     Tensor<double> t({3, 4}, {0.1, 0.2, 0.3, 0.4, 1, 0, 0, 0, 0.25, 0.25, 0.25, 0.25});
                     return ad::softmax_cross_entropy(x[0], t);
                   }});
  cases.push_back({"bce_with_logits", {{3, 4}}, [](auto& x) {
                     Tensor<double> t({3, 4});
                     for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i % 5) / 4.0;
                     return ad::bce_with_logits(x[0], t);
                   }});
  return cases;
}

}  // namespace gradcheck
