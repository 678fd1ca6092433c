#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <utility>
#include <random>
#include <vector>

#include "ednil/targets.hpp"
#include "ednil/tensor.hpp"

namespace ednil::testing {

inline Matrix random_matrix(Index rows, Index cols, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// Largest relative error between the tape gradient and central differences
// over all leaves. Each leaf's error is ||analytic - numeric|| / max(norms,
// 1e-8), so a leaf with an all-zero gradient on both sides counts as exact.
inline double gradient_error(const std::function<ad::Tensor(const std::vector<ad::Tensor>&)>& f,
                             std::vector<ad::Tensor> leaves, double h = 1e-5) {
  for (auto& l : leaves) l.zero_grad();
  ad::backward(f(leaves));
  double worst = 0.0;
  for (auto& leaf : leaves) {
    const Matrix analytic = leaf.grad();
    Matrix numeric(analytic.rows(), analytic.cols());
    for (Index k = 0; k < leaf.size(); ++k) {
      double& v = leaf.mutable_value().data()[k];
      const double saved = v;
      v = saved + h;
      const double up = f(leaves).item();
      v = saved - h;
      const double down = f(leaves).item();
      v = saved;
      numeric.data()[k] = (up - down) / (2.0 * h);
    }
    const double scale = std::max({analytic.norm(), numeric.norm(), 1e-8});
    worst = std::max(worst, (analytic - numeric).norm() / scale);
  }
  return worst;
}

// Weighted sum with fixed random coefficients, so every output entry
// reaches the scalar root with a distinct weight.
inline ad::Tensor contract(const ad::Tensor& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul(t, ad::Tensor::constant(random_matrix(t.rows(), t.cols(), rng))));
}


struct GradCase {
  const char* op;
  std::function<ad::Tensor(const std::vector<ad::Tensor>&)> f;
  std::vector<ad::Tensor> leaves;
};

inline constexpr int kGradCaseKinds = 23;

// One random instance of a differentiable op, reduced to a scalar. Inputs
// stay away from the kinks of relu and the domain edge of log.
inline GradCase random_grad_case(int which, std::mt19937_64& rng) {
  using ad::Tensor;
  std::uniform_int_distribution<Index> dim(1, 4);
  const Index m = dim(rng);
  const Index n = dim(rng);
  const Index k = dim(rng);
  const std::uint64_t cs = rng();
  const auto param = [&](Index r, Index c, double lo = -1.0, double hi = 1.0) {
    return Tensor::parameter(random_matrix(r, c, rng, lo, hi));
  };
  const auto away_from_zero = [&](Index r, Index c) {
    Matrix v = random_matrix(r, c, rng, 0.2, 1.0);
    std::bernoulli_distribution flip(0.5);
    for (Index i = 0; i < v.size(); ++i) {
      if (flip(rng)) v.data()[i] = -v.data()[i];
    }
    return Tensor::parameter(v);
  };
  const auto unary = [&](const char* name, Tensor (*op)(const Tensor&), Tensor x) {
    return GradCase{name, [op, cs](const auto& l) { return contract(op(l[0]), cs); }, {x}};
  };
  std::vector<int> labels(static_cast<std::size_t>(m));
  std::uniform_int_distribution<int> cls(0, static_cast<int>(n) - 1);
  for (auto& y : labels) y = cls(rng);

  switch (which % kGradCaseKinds) {
    case 0:
      return {"matmul", [cs](const auto& l) { return contract(ad::matmul(l[0], l[1]), cs); },
              {param(m, k), param(k, n)}};
    case 1:
      return unary("transpose", ad::transpose, param(m, n));
    case 2:
      return {"add", [cs](const auto& l) { return contract(ad::add(l[0], l[1]), cs); },
              {param(m, n), param(1, n)}};
    case 3:
      return {"sub", [cs](const auto& l) { return contract(ad::sub(l[0], l[1]), cs); },
              {param(m, 1), param(m, n)}};
    case 4:
      return {"mul", [cs](const auto& l) { return contract(ad::mul(l[0], l[1]), cs); },
              {param(m, n), param(m, 1)}};
    case 5:
      return {"div", [cs](const auto& l) { return contract(ad::div(l[0], l[1]), cs); },
              {param(m, n), param(1, n, 0.5, 2.0)}};
    case 6:
      return unary("neg", ad::neg, param(m, n));
    case 7:
      return {"scale", [cs](const auto& l) { return contract(ad::scale(l[0], -2.5), cs); },
              {param(m, n)}};
    case 8:
      return {"add_scalar",
              [cs](const auto& l) { return contract(ad::add_scalar(l[0], 0.75), cs); },
              {param(m, n)}};
    case 9:
      return unary("relu", ad::relu, away_from_zero(m, n));
    case 10:
      return unary("exp", ad::exp, param(m, n));
    case 11:
      return unary("log", ad::log, param(m, n, 0.3, 2.0));
    case 12:
      return unary("square", ad::square, param(m, n));
    case 13:
      return {"xlogy", [cs](const auto& l) { return contract(ad::xlogy(l[0], l[1]), cs); },
              {param(m, n, 0.1, 1.0), param(m, n, 0.3, 2.0)}};
    case 14:
      return {"sum", [](const auto& l) { return ad::scale(ad::sum(ad::square(l[0])), 0.5); },
              {param(m, n)}};
    case 15:
      return {"mean", [](const auto& l) { return ad::mean(ad::square(l[0])); }, {param(m, n)}};
    case 16:
      return unary("sum_rows", ad::sum_rows, param(m, n));
    case 17:
      return unary("sum_cols", ad::sum_cols, param(m, n));
    case 18:
      return unary("softmax_rows", ad::softmax_rows, param(m, n + 1, -2.0, 2.0));
    case 19:
      return unary("log_softmax_rows", ad::log_softmax_rows, param(m, n + 1, -2.0, 2.0));
    case 20:
      return {"cross_entropy",
              [cs, labels](const auto& l) { return contract(ad::cross_entropy(l[0], labels), cs); },
              {param(m, n, -2.0, 2.0)}};
    case 21:
      return {"mse", [cs](const auto& l) { return contract(ad::mse(l[0], l[1]), cs); },
              {param(m, 1), param(m, 1)}};
    default: {
      std::vector<Index> rows;
      std::uniform_int_distribution<Index> pick(0, m - 1);
      for (int i = 0; i < 5; ++i) rows.push_back(pick(rng));
      std::vector<int> cols(static_cast<std::size_t>(m));
      std::uniform_int_distribution<int> col(0, static_cast<int>(n + k) - 1);
      for (auto& c : cols) c = col(rng);
      return {"select_rows/concat_cols/pick_cols",
              [cs, rows, cols](const auto& l) {
                const std::vector<Tensor> parts{l[0], l[1]};
                const Tensor joined = ad::concat_cols(parts);
                return ad::add(contract(ad::select_rows(joined, rows), cs),
                               contract(ad::pick_cols(joined, cols), cs + 1));
              },
              {param(m, n), param(m, k)}};
    }
  }
}

// Plug-in estimates in nats straight from counts, written independently of
// the library's estimators.
inline double plugin_entropy(std::span<const int> y) {
  std::map<int, double> counts;
  for (int v : y) counts[v] += 1.0;
  const double n = static_cast<double>(y.size());
  double h = 0.0;
  for (const auto& [v, c] : counts) h -= (c / n) * std::log(c / n);
  return h;
}

inline double plugin_mutual_information(std::span<const int> y, std::span<const int> e) {
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> py;
  std::map<int, double> pe;
  const double n = static_cast<double>(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    joint[{y[i], e[i]}] += 1.0 / n;
    py[y[i]] += 1.0 / n;
    pe[e[i]] += 1.0 / n;
  }
  double mi = 0.0;
  for (const auto& [key, p] : joint) mi += p * std::log(p / (py[key.first] * pe[key.second]));
  return mi;
}

// I(Y; E | Z) = sum_z P(z) I(Y; E | Z = z), by explicit grouping.
inline double plugin_conditional_mi(std::span<const int> y, std::span<const int> e,
                                    std::span<const int> z) {
  std::map<int, std::pair<std::vector<int>, std::vector<int>>> groups;
  for (std::size_t i = 0; i < z.size(); ++i) {
    groups[z[i]].first.push_back(y[i]);
    groups[z[i]].second.push_back(e[i]);
  }
  double cmi = 0.0;
  for (const auto& [v, g] : groups) {
    cmi += static_cast<double>(g.first.size()) / static_cast<double>(z.size()) *
           plugin_mutual_information(g.first, g.second);
  }
  return cmi;
}

// Losses whose posterior at any temperature >= 0.05 is exactly one-hot.
inline Matrix one_hot_losses(std::span<const int> envs, int k) {
  Matrix l = Matrix::Constant(static_cast<Index>(envs.size()), k, 1e4);
  for (std::size_t i = 0; i < envs.size(); ++i) l(static_cast<Index>(i), envs[i]) = 0.0;
  return l;
}

// (dR/dw at w = 1)^2 by central differences in w, where
// R(w) = mean per-sample loss of w * z. No closed form involved.
inline double finite_difference_penalty(const Matrix& z, const Targets& y, double h = 1e-5) {
  const auto risk = [&](double w) {
    return ad::mean(per_sample_loss(ad::Tensor::constant(z * w), y)).item();
  };
  const double g = (risk(1.0 + h) - risk(1.0 - h)) / (2.0 * h);
  return g * g;
}

}  // namespace ednil::testing
