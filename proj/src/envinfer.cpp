#include "ednil/envinfer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ednil/errors.hpp"
#include "ednil/log.hpp"
#include "ednil/optim.hpp"

namespace ednil {

namespace {

bool in_range(double v, double lo, double hi) { return v >= lo && v <= hi; }

// Soft or hard N x K assignment matrix used by the environment statistics.
ad::Tensor statistics_matrix(const EnvPosterior& p, bool hard) {
  if (!hard) return p.probs;
  Matrix onehot = Matrix::Zero(p.num_rows(), p.num_envs());
  for (Index i = 0; i < p.num_rows(); ++i) onehot(i, p.assignment[static_cast<std::size_t>(i)]) = 1;
  return ad::Tensor::constant(std::move(onehot));
}

// Column sums guarded against exact zeros (empty hard environments).
ad::Tensor env_mass(const ad::Tensor& probs) {
  return ad::sum_cols(probs) + std::numeric_limits<double>::min();
}

}  // namespace

void EIConfig::validate() const {
  if (num_envs < 2 || num_envs > 5) throw ConfigError("ei.num_envs must be in [2, 5]");
  if (!in_range(temperature, 0.05, 0.5)) throw ConfigError("ei.temperature must be in [0.05, 0.5]");
  if (!(beta == 0.0 || in_range(beta, 0.2, 10.0))) {
    throw ConfigError("ei.beta must be 0 or in [0.2, 10]");
  }
  if (!(gamma == 0.0 || in_range(gamma, 0.2, 10.0))) {
    throw ConfigError("ei.gamma must be 0 or in [0.2, 10]");
  }
  if (!in_range(w_thres, 1.2, 5.0)) throw ConfigError("ei.w_thres must be in [1.2, 5]");
  if (pretrain_steps < 0 || steps_per_round < 0) throw ConfigError("ei step counts must be >= 0");
  if (!(learning_rate > 0.0)) throw ConfigError("ei.learning_rate must be positive");
}

std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()), 0);
  for (Index i = 0; i < m.rows(); ++i) {
    int best = 0;
    for (Index e = 1; e < m.cols(); ++e) {
      if (m(i, e) > m(i, best)) best = static_cast<int>(e);
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

EnvPosterior EnvPosterior::from_losses(const ad::Tensor& losses, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("posterior temperature must be positive");
  if (losses.cols() < 1) throw DimensionError("posterior needs at least one environment");
  const ad::Tensor logits = losses * (-1.0 / temperature);
  EnvPosterior p;
  p.log_probs = ad::log_softmax_rows(logits);
  p.probs = ad::softmax_rows(logits);
  p.assignment = argmax_rows(p.probs.value());
  p.env_sizes.assign(static_cast<std::size_t>(losses.cols()), 0);
  for (int a : p.assignment) ++p.env_sizes[static_cast<std::size_t>(a)];
  return p;
}

std::vector<std::vector<Index>> EnvPosterior::partition() const {
  std::vector<std::vector<Index>> parts(static_cast<std::size_t>(num_envs()));
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    parts[static_cast<std::size_t>(assignment[i])].push_back(static_cast<Index>(i));
  }
  return parts;
}

ad::Tensor head_losses(const EIModel& model, const ad::Tensor& x, const Targets& y) {
  const auto outputs = ei_forward(model, x);
  std::vector<ad::Tensor> columns;
  columns.reserve(outputs.size());
  for (const auto& out : outputs) columns.push_back(per_sample_loss(out, y));
  return ad::concat_cols(columns);
}

EnvPosterior posterior(const EIModel& model, const ad::Tensor& x, const Targets& y) {
  return EnvPosterior::from_losses(head_losses(model, x, y), model.temperature);
}

std::vector<double> diversification_weights(const EnvPosterior& p, double w_thres) {
  const double n = static_cast<double>(p.num_rows());
  const double k = static_cast<double>(p.num_envs());
  std::vector<double> weights(p.assignment.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double size = static_cast<double>(p.env_sizes[static_cast<std::size_t>(p.assignment[i])]);
    weights[i] = std::min(w_thres, n / (k * size));
  }
  return weights;
}

ad::Tensor loss_ed(const EnvPosterior& p, double w_thres) {
  if (p.num_rows() == 0) throw InputError("loss_ed on an empty dataset");
  const auto weights = diversification_weights(p, w_thres);
  Matrix w(p.num_rows(), 1);
  for (std::size_t i = 0; i < weights.size(); ++i) w(static_cast<Index>(i), 0) = weights[i];
  const ad::Tensor chosen = ad::pick_cols(p.log_probs, p.assignment);
  return -ad::mean(chosen * ad::Tensor::constant(std::move(w)));
}

ad::Tensor loss_li(const EnvPosterior& p, std::span<const int> labels, int num_classes,
                   bool hard) {
  const Index n = p.num_rows();
  if (static_cast<Index>(labels.size()) != n) {
    throw DimensionError("loss_li: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  if (n == 0) throw InputError("loss_li on an empty dataset");
  Matrix onehot_t = Matrix::Zero(num_classes, n);
  std::vector<bool> seen(static_cast<std::size_t>(num_classes), false);
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= num_classes) throw InputError("loss_li: label out of range");
    onehot_t(y, i) = 1.0;
    seen[static_cast<std::size_t>(y)] = true;
  }
  if (std::count(seen.begin(), seen.end(), true) < 2) {
    log_warning("loss_li: targets contain a single class; label independence term is 0");
  }
  const ad::Tensor probs = statistics_matrix(p, hard);
  // Soft joint counts of (y, e) and conditional P(y | e).
  const ad::Tensor joint = ad::matmul(ad::Tensor::constant(std::move(onehot_t)), probs);
  const ad::Tensor conditional = joint / env_mass(probs);
  return ad::sum(ad::xlogy(joint, conditional)) * (1.0 / static_cast<double>(n));
}

ad::Tensor loss_ip(const EnvPosterior& p, const Matrix& frozen_losses, bool hard) {
  const Index n = p.num_rows();
  if (frozen_losses.rows() != n || frozen_losses.cols() != 1) {
    throw DimensionError("loss_ip: frozen losses must be " + std::to_string(n) + "x1");
  }
  if (n == 0) throw InputError("loss_ip on an empty dataset");
  const ad::Tensor probs = statistics_matrix(p, hard);
  const ad::Tensor mass = env_mass(probs);
  const ad::Tensor env_prob = mass * (1.0 / static_cast<double>(n));
  const ad::Tensor losses_t = ad::Tensor::constant(frozen_losses.transpose());
  const ad::Tensor env_mean = ad::matmul(losses_t, probs) / mass;
  const ad::Tensor overall = ad::sum(env_prob * env_mean);
  return ad::sum(env_prob * ad::square(env_mean - overall));
}

ad::Tensor loss_ei(const ad::Tensor& ed, const ad::Tensor& li, const ad::Tensor& ip, double beta,
                   double gamma) {
  ad::Tensor total = ed;
  if (beta != 0.0) total = total + li * beta;
  if (gamma != 0.0) {
    if (!ip.defined()) {
      throw ConfigError("invariance preserving loss needs a frozen predictor (set gamma = 0)");
    }
    total = total + ip * gamma;
  }
  return total;
}

std::vector<double> pretrain_erm(EIModel& model, const Matrix& x, const Targets& y, int steps,
                                 double learning_rate) {
  if (steps < 0) throw InputError("pretrain steps must be >= 0");
  std::vector<double> trace;
  if (steps == 0) return trace;
  auto params = model.trunk.parameters();
  const auto head_params = model.heads.front().parameters();
  params.insert(params.end(), head_params.begin(), head_params.end());
  ad::Optimizer opt({ad::OptimizerKind::kAdam, learning_rate}, params);
  const ad::Tensor input = ad::Tensor::constant(x);
  for (int s = 0; s < steps; ++s) {
    const ad::Tensor out = model.heads.front().forward(model.trunk.forward(input));
    const ad::Tensor loss = ad::mean(per_sample_loss(out, y));
    if (!std::isfinite(loss.item())) throw DivergenceError("ERM pre-training diverged");
    ad::backward(loss);
    opt.step();
    trace.push_back(loss.item());
  }
  return trace;
}

std::vector<double> quantile_edges(std::span<const double> values, int bins) {
  if (bins < 1) throw InputError("need at least one bin");
  if (values.empty()) throw InputError("quantile_edges on empty data");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> edges;
  for (int b = 1; b < bins; ++b) {
    const auto pos = static_cast<std::size_t>(
        std::floor(static_cast<double>(b) * static_cast<double>(sorted.size()) / bins));
    edges.push_back(sorted[std::min(pos, sorted.size() - 1)]);
  }
  return edges;
}

std::vector<int> discretize(std::span<const double> values, std::span<const double> edges) {
  std::vector<int> out;
  out.reserve(values.size());
  for (double v : values) {
    out.push_back(static_cast<int>(std::upper_bound(edges.begin(), edges.end(), v) - edges.begin()));
  }
  return out;
}

}  // namespace ednil
