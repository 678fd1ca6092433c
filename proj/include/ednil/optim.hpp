#pragma once

#include <cstdint>
#include <vector>

#include "ednil/tensor.hpp"

namespace ednil::ad {

enum class OptimizerKind { kGradientDescent, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// First-order optimizer over a fixed parameter list. step() applies one
// update from the accumulated gradients and then clears them.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<Tensor> params);

  void step();
  void zero_grad();

  const OptimizerConfig& config() const noexcept { return config_; }
  std::int64_t step_count() const noexcept { return step_count_; }
  const std::vector<Matrix>& first_moments() const noexcept { return first_moment_; }
  const std::vector<Matrix>& second_moments() const noexcept { return second_moment_; }
  const std::vector<Tensor>& parameters() const noexcept { return params_; }

 private:
  OptimizerConfig config_;
  std::vector<Tensor> params_;
  std::vector<Matrix> first_moment_;
  std::vector<Matrix> second_moment_;
  std::int64_t step_count_ = 0;
};

}  // namespace ednil::ad
