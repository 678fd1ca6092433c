#pragma once

#include <span>
#include <vector>

#include "ednil/envinfer.hpp"
#include "ednil/nets.hpp"
#include "ednil/targets.hpp"

namespace ednil {

struct LabeledDataset;

struct ILConfig {
  double lambda = 100.0;
  double anneal_fraction = 0.5;
  // 0 means derived from the training plan.
  int steps_per_round = 0;
  double learning_rate = 1e-3;
  // Re-initialize Phi at the start of every joint round.
  bool reset_each_round = false;
  // Inferred environments holding fewer than this share of the rows are
  // treated as empty: their confidence and weight are zero.
  double min_env_fraction = 0.01;

  void validate() const;
};

// Penalty strengths with a documented precedent.
inline constexpr double kLambdaGrid[] = {2.0, 10.0, 100.0, 1000.0};

struct EnvWeights {
  std::vector<double> confidence;  // c_e
  std::vector<double> weights;     // w_e = c_e / sum c
};

// (d R / d w at w = 1)^2 in closed form, given predictions already scaled by
// the dummy multiplier. Differentiable with respect to Phi.
ad::Tensor irm_penalty(const ad::Tensor& scaled_pred, const Targets& y);
ad::Tensor irm_penalty(const ILModel& model, const ad::Tensor& x, const Targets& y);

EnvWeights confidence_weights(const EnvPosterior& p);
EnvWeights normalize_confidence(std::vector<double> confidence);
// Zeroes the confidence of environments below min_fraction of the rows and
// renormalizes.
EnvWeights drop_small_environments(const EnvWeights& weights, std::span<const Index> env_sizes,
                                   double min_fraction);

// sum_e w_e (R^e + lambda_t * penalty_e) over a hard partition of rows.
// Empty environments contribute nothing.
struct ILLoss {
  ad::Tensor total;
  std::vector<double> risks;
  std::vector<double> penalties;
};
ILLoss loss_il(const ILModel& model, const ad::Tensor& x, const Targets& y,
               const std::vector<std::vector<Index>>& partition, std::span<const double> weights,
               double lambda_t);

// 1.0 during warm-up (step < fraction * total_steps), lambda afterwards.
double anneal_lambda(long step, long total_steps, double anneal_fraction, double lambda);

// Pooled ERM; returns the loss after each step.
std::vector<double> train_erm(ILModel& model, const Matrix& x, const Targets& y, int steps,
                              double learning_rate);

// Hand-built environments from oracle metadata:
//   colored digits: 0 when Y == C, 1 otherwise
//   income data:    four environments pairing (race, sex) with Y (see README)
//   regression:     one environment per generating r
std::vector<int> build_oracle_envs(const LabeledDataset& data);

}  // namespace ednil
