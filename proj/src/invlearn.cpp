#include "ednil/invlearn.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "ednil/datagen.hpp"
#include "ednil/errors.hpp"
#include "ednil/log.hpp"
#include "ednil/optim.hpp"

namespace ednil {

void ILConfig::validate() const {
  if (!(lambda > 0.0)) throw ConfigError("il.lambda must be positive");
  if (!(anneal_fraction >= 0.0 && anneal_fraction <= 1.0)) {
    throw ConfigError("il.anneal_fraction must be in [0, 1]");
  }
  if (steps_per_round < 0) throw ConfigError("il.steps_per_round must be >= 0");
  if (!(learning_rate > 0.0)) throw ConfigError("il.learning_rate must be positive");
  if (!(min_env_fraction >= 0.0 && min_env_fraction < 0.5)) {
    throw ConfigError("il.min_env_fraction must be in [0, 0.5)");
  }
}

ad::Tensor irm_penalty(const ad::Tensor& scaled_pred, const Targets& y) {
  if (scaled_pred.rows() != y.size()) {
    throw DimensionError("irm_penalty: " + std::to_string(scaled_pred.rows()) +
                         " predictions for " + std::to_string(y.size()) + " targets");
  }
  if (y.size() == 0) {
    log_warning("irm_penalty: empty environment contributes 0");
    return ad::Tensor::scalar(0.0);
  }
  ad::Tensor grad_w;
  if (y.is_classification()) {
    // d/dw CE(w z, y) = sum_k (softmax(w z)_k - 1{y = k}) z_k
    Matrix onehot = Matrix::Zero(scaled_pred.rows(), scaled_pred.cols());
    for (Index i = 0; i < onehot.rows(); ++i) onehot(i, y.labels[static_cast<std::size_t>(i)]) = 1;
    const ad::Tensor residual = ad::softmax_rows(scaled_pred) - ad::Tensor::constant(onehot);
    grad_w = ad::mean(ad::sum_rows(residual * scaled_pred));
  } else {
    if (scaled_pred.cols() != 1) throw DimensionError("irm_penalty: mse expects one output");
    // d/dw (w z - y)^2 = 2 (w z - y) z
    const ad::Tensor residual = scaled_pred - ad::Tensor::constant(y.value_column());
    grad_w = ad::mean(residual * scaled_pred) * 2.0;
  }
  return ad::square(grad_w);
}

ad::Tensor irm_penalty(const ILModel& model, const ad::Tensor& x, const Targets& y) {
  return irm_penalty(il_forward(model, x), y);
}

EnvWeights normalize_confidence(std::vector<double> confidence) {
  const double total = std::accumulate(confidence.begin(), confidence.end(), 0.0);
  if (!(total > 0.0)) throw InputError("confidence weights: every environment is empty");
  EnvWeights out;
  out.weights.reserve(confidence.size());
  for (double c : confidence) out.weights.push_back(c / total);
  out.confidence = std::move(confidence);
  return out;
}

EnvWeights drop_small_environments(const EnvWeights& weights, std::span<const Index> env_sizes,
                                   double min_fraction) {
  if (env_sizes.size() != weights.confidence.size()) {
    throw DimensionError("drop_small_environments: " + std::to_string(env_sizes.size()) +
                         " sizes for " + std::to_string(weights.confidence.size()) + " environments");
  }
  const double total = std::accumulate(env_sizes.begin(), env_sizes.end(), 0.0);
  std::vector<double> confidence = weights.confidence;
  for (std::size_t e = 0; e < confidence.size(); ++e) {
    if (static_cast<double>(env_sizes[e]) < min_fraction * total) confidence[e] = 0.0;
  }
  return normalize_confidence(std::move(confidence));
}

EnvWeights confidence_weights(const EnvPosterior& p) {
  const Matrix& probs = p.probs.value();
  std::vector<double> confidence(static_cast<std::size_t>(p.num_envs()), 0.0);
  for (Index i = 0; i < p.num_rows(); ++i) {
    const int e = p.assignment[static_cast<std::size_t>(i)];
    confidence[static_cast<std::size_t>(e)] += probs(i, e);
  }
  for (std::size_t e = 0; e < confidence.size(); ++e) {
    if (p.env_sizes[e] > 0) confidence[e] /= static_cast<double>(p.env_sizes[e]);
  }
  return normalize_confidence(std::move(confidence));
}

ILLoss loss_il(const ILModel& model, const ad::Tensor& x, const Targets& y,
               const std::vector<std::vector<Index>>& partition, std::span<const double> weights,
               double lambda_t) {
  if (partition.size() != weights.size()) {
    throw DimensionError("loss_il: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(partition.size()) + " environments");
  }
  if (lambda_t < 0.0) throw InputError("loss_il: penalty strength must be >= 0");
  const ad::Tensor pred = il_forward(model, x);
  ILLoss out;
  out.risks.assign(partition.size(), 0.0);
  out.penalties.assign(partition.size(), 0.0);
  for (std::size_t e = 0; e < partition.size(); ++e) {
    if (partition[e].empty()) continue;
    const ad::Tensor env_pred = ad::select_rows(pred, partition[e]);
    const Targets env_y = y.subset(partition[e]);
    const ad::Tensor risk = ad::mean(per_sample_loss(env_pred, env_y));
    const ad::Tensor penalty = irm_penalty(env_pred, env_y);
    out.risks[e] = risk.item();
    out.penalties[e] = penalty.item();
    const ad::Tensor term = (risk + penalty * lambda_t) * weights[e];
    out.total = out.total.defined() ? out.total + term : term;
  }
  if (!out.total.defined()) throw InputError("loss_il: every environment is empty");
  return out;
}

double anneal_lambda(long step, long total_steps, double anneal_fraction, double lambda) {
  return static_cast<double>(step) < anneal_fraction * static_cast<double>(total_steps) ? 1.0
                                                                                       : lambda;
}

std::vector<double> train_erm(ILModel& model, const Matrix& x, const Targets& y, int steps,
                              double learning_rate) {
  std::vector<double> trace;
  if (steps <= 0) return trace;
  ad::Optimizer opt({ad::OptimizerKind::kAdam, learning_rate}, model.parameters());
  const ad::Tensor input = ad::Tensor::constant(x);
  ad::Tensor w = model.multiplier();
  for (int s = 0; s < steps; ++s) {
    const ad::Tensor loss = ad::mean(per_sample_loss(il_forward(model, input), y));
    if (!std::isfinite(loss.item())) throw DivergenceError("ERM training diverged");
    ad::backward(loss);
    opt.step();
    w.zero_grad();
    trace.push_back(loss.item());
  }
  return trace;
}

std::vector<int> build_oracle_envs(const LabeledDataset& data) {
  if (!data.oracle || data.oracle->kind == OracleKind::kNone) {
    throw ConfigError("oracle environments need oracle metadata on dataset '" + data.name + "'");
  }
  const OracleInfo& oracle = *data.oracle;
  const auto n = static_cast<std::size_t>(data.size());
  std::vector<int> envs(n, 0);
  int num_envs = 0;
  switch (oracle.kind) {
    case OracleKind::kColor:
      num_envs = 2;
      for (std::size_t i = 0; i < n; ++i) envs[i] = data.targets.labels[i] == oracle.color[i] ? 0 : 1;
      break;
    case OracleKind::kSubgroup:
      // Y = 1 rows go to SG index; Y = 0 rows to the environment whose
      // positive subgroup is the opposite race and sex.
      num_envs = 4;
      for (std::size_t i = 0; i < n; ++i) {
        const int sg = oracle.subgroup[i];
        envs[i] = data.targets.labels[i] == 1 ? sg : 3 - sg;
      }
      break;
    case OracleKind::kRegression:
      envs = oracle.env_id;
      num_envs = static_cast<int>(oracle.env_param.size());
      break;
    case OracleKind::kNone:
      break;
  }
  std::vector<Index> sizes(static_cast<std::size_t>(num_envs), 0);
  for (int e : envs) ++sizes[static_cast<std::size_t>(e)];
  for (int e = 0; e < num_envs; ++e) {
    if (sizes[static_cast<std::size_t>(e)] == 0) {
      log_warning("oracle environment " + std::to_string(e) + " of '" + data.name + "' is empty");
    }
  }
  return envs;
}

}  // namespace ednil
