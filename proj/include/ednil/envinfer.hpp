#pragma once

#include <optional>
#include <span>
#include <vector>

#include "ednil/nets.hpp"
#include "ednil/targets.hpp"
#include "ednil/tensor.hpp"

namespace ednil {

struct EIConfig {
  int num_envs = 2;
  double temperature = 0.1;
  double beta = 1.0;
  double gamma = 1.0;
  double w_thres = 1.5;
  int pretrain_steps = 200;
  // 0 means derived from the training plan.
  int steps_per_round = 0;
  double learning_rate = 1e-3;
  // Use hard assignments instead of the soft posterior for the label
  // independence and invariance preserving statistics.
  bool hard_statistics = false;

  // Ranges: K in [2, 5], tau in [0.05, 0.5], beta and gamma 0 (ablation) or
  // in [0.2, 10], w_thres in [1.2, 5].
  void validate() const;
};

// Row-stochastic P(e | x_i, y_i) with its hard assignment.
struct EnvPosterior {
  ad::Tensor probs;      // N x K
  ad::Tensor log_probs;  // N x K
  std::vector<int> assignment;
  std::vector<Index> env_sizes;

  // Softmax over environments of -losses / temperature, per row.
  static EnvPosterior from_losses(const ad::Tensor& losses, double temperature);

  Index num_rows() const { return probs.rows(); }
  int num_envs() const { return static_cast<int>(probs.cols()); }
  // Row indices hard-assigned to each environment, ascending.
  std::vector<std::vector<Index>> partition() const;
};

// N x K matrix of l(f^e(Psi(x_i)), y_i).
ad::Tensor head_losses(const EIModel& model, const ad::Tensor& x, const Targets& y);

EnvPosterior posterior(const EIModel& model, const ad::Tensor& x, const Targets& y);

// Index of the largest entry of each row, lowest index on ties.
std::vector<int> argmax_rows(const Matrix& m);

// Environment diversification: -(1/N) sum_i w_i log P(a_i | x_i, y_i) with
// w_i = min(w_thres, N / (K n_{a_i})) held constant.
ad::Tensor loss_ed(const EnvPosterior& p, double w_thres);
// Per-row weights used by loss_ed.
std::vector<double> diversification_weights(const EnvPosterior& p, double w_thres);

// Label independence: sum_e P(e) sum_y P(y|e) log P(y|e) from soft (or hard)
// statistics. labels are discrete (regression targets pre-binned).
ad::Tensor loss_li(const EnvPosterior& p, std::span<const int> labels, int num_classes,
                   bool hard = false);

// Invariance preserving: variance over e ~ P(e) of the per-environment mean
// of frozen predictor losses (n x 1, no gradient).
ad::Tensor loss_ip(const EnvPosterior& p, const Matrix& frozen_losses, bool hard = false);

// L_ED + beta L_LI + gamma L_IP. ip may be undefined only when gamma == 0.
ad::Tensor loss_ei(const ad::Tensor& ed, const ad::Tensor& li, const ad::Tensor& ip, double beta,
                   double gamma);

// ERM on the trunk and head 0 only. Returns the mean loss after each step.
std::vector<double> pretrain_erm(EIModel& model, const Matrix& x, const Targets& y, int steps,
                                 double learning_rate);

// Quantile bin edges for discretizing regression targets (3 inner edges for
// quartiles).
std::vector<double> quantile_edges(std::span<const double> values, int bins);
std::vector<int> discretize(std::span<const double> values, std::span<const double> edges);

}  // namespace ednil
