#include "ednil/optim.hpp"

#include <cmath>
#include <string>

#include "ednil/errors.hpp"

namespace ednil::ad {

Optimizer::Optimizer(OptimizerConfig config, std::vector<Tensor> params)
    : config_(config), params_(std::move(params)) {
  if (!(config_.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (config_.kind == OptimizerKind::kAdam) {
    if (!(config_.beta1 >= 0.0 && config_.beta1 < 1.0) ||
        !(config_.beta2 >= 0.0 && config_.beta2 < 1.0) || !(config_.epsilon > 0.0)) {
      throw ConfigError("adam needs beta1, beta2 in [0, 1) and epsilon > 0");
    }
  }
  for (const auto& p : params_) {
    if (!p.defined() || !p.requires_grad()) {
      throw UsageError("optimizer parameters must be gradient-tracking tensors");
    }
    first_moment_.push_back(Matrix::Zero(p.rows(), p.cols()));
    second_moment_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void Optimizer::step() {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const auto& g = params_[k].grad();
    if (g.rows() != params_[k].rows() || g.cols() != params_[k].cols()) {
      throw UsageError("parameter " + std::to_string(k) + " has no gradient");
    }
  }
  ++step_count_;
  const double lr = config_.learning_rate;
  if (config_.kind == OptimizerKind::kGradientDescent) {
    for (auto& p : params_) p.mutable_value() -= lr * p.grad();
  } else {
    const double b1 = config_.beta1;
    const double b2 = config_.beta2;
    const double t = static_cast<double>(step_count_);
    const double correction1 = 1.0 - std::pow(b1, t);
    const double correction2 = 1.0 - std::pow(b2, t);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const Matrix& g = params_[k].grad();
      first_moment_[k] = b1 * first_moment_[k] + (1.0 - b1) * g;
      second_moment_[k] = b2 * second_moment_[k] + (1.0 - b2) * g.cwiseProduct(g);
      params_[k].mutable_value().array() -=
          lr * (first_moment_[k].array() / correction1) /
          ((second_moment_[k].array() / correction2).sqrt() + config_.epsilon);
    }
  }
  zero_grad();
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace ednil::ad
