#include "ednil/targets.hpp"

#include <string>

#include "ednil/errors.hpp"

namespace ednil {

std::string_view to_string(LossKind kind) {
  return kind == LossKind::kCrossEntropy ? "cross-entropy" : "mse";
}

LossKind loss_kind_from_string(std::string_view name) {
  if (name == "cross-entropy") return LossKind::kCrossEntropy;
  if (name == "mse") return LossKind::kMse;
  throw ConfigError("unknown loss kind '" + std::string(name) + "'");
}

Targets Targets::classes(std::vector<int> labels, int num_classes) {
  Targets t;
  t.kind = LossKind::kCrossEntropy;
  t.num_classes = num_classes;
  t.labels = std::move(labels);
  t.validate();
  return t;
}

Targets Targets::reals(std::vector<double> values) {
  Targets t;
  t.kind = LossKind::kMse;
  t.num_classes = 0;
  t.values = std::move(values);
  return t;
}

Index Targets::size() const {
  return static_cast<Index>(is_classification() ? labels.size() : values.size());
}

Targets Targets::subset(std::span<const Index> rows) const {
  Targets out;
  out.kind = kind;
  out.num_classes = num_classes;
  if (is_classification()) {
    out.labels.reserve(rows.size());
    for (Index r : rows) out.labels.push_back(labels.at(static_cast<std::size_t>(r)));
  } else {
    out.values.reserve(rows.size());
    for (Index r : rows) out.values.push_back(values.at(static_cast<std::size_t>(r)));
  }
  return out;
}

Matrix Targets::value_column() const {
  if (is_classification()) throw UsageError("value_column() on classification targets");
  Matrix out(static_cast<Index>(values.size()), 1);
  for (std::size_t i = 0; i < values.size(); ++i) out(static_cast<Index>(i), 0) = values[i];
  return out;
}

void Targets::validate() const {
  if (!is_classification()) return;
  if (num_classes < 1) throw InputError("classification targets need at least one class");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw InputError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                       " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

ad::Tensor per_sample_loss(const ad::Tensor& pred, const Targets& targets) {
  if (pred.rows() != targets.size()) {
    throw DimensionError("loss: " + std::to_string(pred.rows()) + " predictions for " +
                         std::to_string(targets.size()) + " targets");
  }
  if (targets.is_classification()) return ad::cross_entropy(pred, targets.labels);
  if (pred.cols() != 1) {
    throw DimensionError("mse loss expects a single output column, got " +
                         std::to_string(pred.cols()));
  }
  return ad::mse(pred, ad::Tensor::constant(targets.value_column()));
}

}  // namespace ednil
