#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "ednil/tensor.hpp"

namespace ednil {

enum class LossKind { kCrossEntropy, kMse };

std::string_view to_string(LossKind kind);
LossKind loss_kind_from_string(std::string_view name);

// Supervision for one dataset: class indices for classification, reals for
// regression. Exactly one of labels/values is populated.
struct Targets {
  LossKind kind = LossKind::kCrossEntropy;
  int num_classes = 2;
  std::vector<int> labels;
  std::vector<double> values;

  static Targets classes(std::vector<int> labels, int num_classes);
  static Targets reals(std::vector<double> values);

  Index size() const;
  bool is_classification() const noexcept { return kind == LossKind::kCrossEntropy; }
  Targets subset(std::span<const Index> rows) const;
  // n x 1 column of regression values.
  Matrix value_column() const;
  void validate() const;
};

// Per-sample loss l(pred_i, y_i) as an n x 1 tensor.
ad::Tensor per_sample_loss(const ad::Tensor& pred, const Targets& targets);

}  // namespace ednil
