#include "ednil/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <unordered_set>
#include <utility>

#include "ednil/errors.hpp"

namespace ednil::ad {

namespace detail {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t id = 0;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(const Matrix&, std::span<Matrix* const>)> backward;
};

namespace {

std::uint64_t next_id() {
  // Ids only need to be unique within one thread's graphs.
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

}  // namespace
}  // namespace detail

using detail::Node;

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

Node& checked(const std::shared_ptr<Node>& node) {
  if (!node) throw UsageError("operation on an undefined tensor");
  return *node;
}

std::shared_ptr<Node> make_leaf(Matrix value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->id = detail::next_id();
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad = Matrix::Zero(value.rows(), value.cols());
  node->value = std::move(value);
  return node;
}

}  // namespace

Tensor Tensor::constant(Matrix value) { return Tensor(make_leaf(std::move(value), false)); }

Tensor Tensor::scalar(double value) { return constant(Matrix::Constant(1, 1, value)); }

Tensor Tensor::parameter(Matrix value) { return Tensor(make_leaf(std::move(value), true)); }

const Matrix& Tensor::value() const { return checked(node_).value; }

Matrix& Tensor::mutable_value() {
  auto& node = checked(node_);
  if (!node.leaf) throw UsageError("only leaf tensors can be modified in place");
  return node.value;
}

const Matrix& Tensor::grad() const {
  auto& node = checked(node_);
  if (!node.requires_grad) throw UsageError("tensor does not track gradients");
  return node.grad;
}

Matrix& Tensor::mutable_grad() {
  auto& node = checked(node_);
  if (!node.requires_grad) throw UsageError("tensor does not track gradients");
  return node.grad;
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }
bool Tensor::is_leaf() const { return checked(node_).leaf; }
std::string_view Tensor::op() const { return checked(node_).op; }
std::uint64_t Tensor::id() const { return checked(node_).id; }

double Tensor::item() const {
  const auto& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw UsageError("item() on a " + shape_str(v) + " tensor");
  }
  return v(0, 0);
}

void Tensor::zero_grad() {
  auto& node = checked(node_);
  if (node.requires_grad) node.grad.setZero(node.value.rows(), node.value.cols());
}

Tensor Tensor::detach() const { return constant(value()); }

Tensor make_op(std::string_view op, Matrix value, std::vector<Tensor> inputs,
               std::function<void(const Matrix&, std::span<Matrix* const>)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->id = detail::next_id();
  node->op = op;
  node->leaf = false;
  node->value = std::move(value);
  for (const auto& in : inputs) {
    const auto& in_node = checked(in.node_);
    node->requires_grad = node->requires_grad || in_node.requires_grad;
  }
  if (node->requires_grad) {
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(std::move(in.node_));
    node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

Graph::Graph(const Tensor& root) {
  const auto& root_node = checked(root.node_);
  if (!root_node.requires_grad) return;

  // Iterative post-order DFS; inputs are visited in declaration order so the
  // resulting order depends only on graph structure.
  std::unordered_set<const Node*> visited;
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
  stack.emplace_back(root.node_, 0);
  visited.insert(root.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto child = node->inputs[next++];
      if (child->requires_grad && visited.insert(child.get()).second) {
        stack.emplace_back(std::move(child), 0);
      }
      continue;
    }
    order_.push_back(node);
    stack.pop_back();
  }

  for (const auto& node : order_) {
    if (node->leaf) continue;
    OpRecord record;
    record.op = node->op;
    record.output = node->id;
    for (const auto& in : node->inputs) record.inputs.push_back(in->id);
    records_.push_back(std::move(record));
  }
}

void backward(const Tensor& root) {
  const auto& root_value = root.value();
  if (root_value.rows() != 1 || root_value.cols() != 1) {
    throw UsageError("backward() needs a scalar root, got " + shape_str(root_value));
  }
  Graph graph(root);
  if (graph.order_.empty()) return;

  for (auto& node : graph.order_) {
    if (!node->leaf) node->grad.setZero(node->value.rows(), node->value.cols());
  }
  graph.order_.back()->grad(0, 0) += 1.0;

  std::vector<Matrix*> slots;
  for (auto it = graph.order_.rbegin(); it != graph.order_.rend(); ++it) {
    Node& node = **it;
    if (node.leaf) continue;
    slots.clear();
    for (auto& in : node.inputs) slots.push_back(in->requires_grad ? &in->grad : nullptr);
    node.backward(node.grad, slots);
  }

  // Release intermediate buffers; leaves keep their accumulated gradients.
  for (auto& node : graph.order_) {
    if (!node->leaf) node->grad.resize(0, 0);
  }
}

// ---- broadcasting helpers -------------------------------------------------

namespace {

struct Broadcast {
  Index rows;
  Index cols;
};

Broadcast broadcast_shape(std::string_view op, const Matrix& a, const Matrix& b) {
  auto dim = [&](Index x, Index y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                         shape_str(b));
  };
  return {dim(a.rows(), b.rows()), dim(a.cols(), b.cols())};
}

Matrix expand(const Matrix& m, Broadcast shape) {
  if (m.rows() == shape.rows && m.cols() == shape.cols) return m;
  return m.replicate(shape.rows / m.rows(), shape.cols / m.cols());
}

bool full(const Matrix& m, Broadcast shape) {
  return m.rows() == shape.rows && m.cols() == shape.cols;
}

// f applied elementwise under broadcasting, without materializing the
// smaller operand in the common cases (same shape, scalar, row vector).
template <typename F>
Matrix elementwise(const Matrix& a, const Matrix& b, Broadcast shape, F f) {
  if (full(a, shape) && full(b, shape)) return a.binaryExpr(b, f);
  if (full(a, shape) && b.size() == 1) {
    const double bv = b(0, 0);
    return a.unaryExpr([&](double x) { return f(x, bv); });
  }
  if (full(b, shape) && a.size() == 1) {
    const double av = a(0, 0);
    return b.unaryExpr([&](double y) { return f(av, y); });
  }
  if (full(a, shape) && b.rows() == 1) {
    Matrix out(shape.rows, shape.cols);
    for (Index i = 0; i < shape.rows; ++i) out.row(i) = a.row(i).binaryExpr(b, f);
    return out;
  }
  return expand(a, shape).binaryExpr(expand(b, shape), f);
}

// Sums a broadcast gradient back down to the operand's shape.
void accumulate_reduced(Matrix* slot, const Matrix& g) {
  if (!slot) return;
  if (slot->rows() == g.rows() && slot->cols() == g.cols()) {
    *slot += g;
  } else if (slot->rows() == 1 && slot->cols() == 1) {
    (*slot)(0, 0) += g.sum();
  } else if (slot->rows() == 1) {
    *slot += g.colwise().sum();
  } else {
    *slot += g.rowwise().sum();
  }
}


}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ (" + shape_str(av) + " x " +
                         shape_str(bv) + ")");
  }
  Matrix out = av * bv;
  return make_op("matmul", std::move(out), {a, b},
                 [a, b](const Matrix& g, std::span<Matrix* const> in) {
                   if (in[0]) in[0]->noalias() += g * b.value().transpose();
                   if (in[1]) in[1]->noalias() += a.value().transpose() * g;
                 });
}

Tensor transpose(const Tensor& a) {
  Matrix out = a.value().transpose();
  return make_op("transpose", std::move(out), {a},
                 [](const Matrix& g, std::span<Matrix* const> in) {
                   if (in[0]) *in[0] += g.transpose();
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  auto shape = broadcast_shape("add", a.value(), b.value());
  Matrix out = elementwise(a.value(), b.value(), shape, std::plus<double>());
  return make_op("add", std::move(out), {a, b},
                 [](const Matrix& g, std::span<Matrix* const> in) {
                   accumulate_reduced(in[0], g);
                   accumulate_reduced(in[1], g);
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto shape = broadcast_shape("sub", a.value(), b.value());
  Matrix out = elementwise(a.value(), b.value(), shape, std::minus<double>());
  return make_op("sub", std::move(out), {a, b},
                 [](const Matrix& g, std::span<Matrix* const> in) {
                   accumulate_reduced(in[0], g);
                   if (in[1]) accumulate_reduced(in[1], -g);
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto shape = broadcast_shape("mul", a.value(), b.value());
  Matrix out = elementwise(a.value(), b.value(), shape, std::multiplies<double>());
  return make_op("mul", std::move(out), {a, b},
                 [a, b, shape](const Matrix& g, std::span<Matrix* const> in) {
                   if (in[0]) accumulate_reduced(in[0], elementwise(g, b.value(), shape, std::multiplies<double>()));
                   if (in[1]) accumulate_reduced(in[1], elementwise(g, a.value(), shape, std::multiplies<double>()));
                 });
}

Tensor div(const Tensor& a, const Tensor& b) {
  auto shape = broadcast_shape("div", a.value(), b.value());
  Matrix out = elementwise(a.value(), b.value(), shape, std::divides<double>());
  return make_op("div", out, {a, b},
                 [out, b, shape](const Matrix& g, std::span<Matrix* const> in) {
                   const Matrix ga = elementwise(g, b.value(), shape, std::divides<double>());
                   if (in[0]) accumulate_reduced(in[0], ga);
                   if (in[1]) accumulate_reduced(in[1], -ga.cwiseProduct(out));
                 });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double factor) {
  Matrix out = a.value() * factor;
  return make_op("scale", std::move(out), {a},
                 [factor](const Matrix& g, std::span<Matrix* const> in) {
                   if (in[0]) *in[0] += g * factor;
                 });
}

Tensor add_scalar(const Tensor& a, double offset) {
  Matrix out = a.value().array() + offset;
  return make_op("add_scalar", std::move(out), {a},
                 [](const Matrix& g, std::span<Matrix* const> in) {
                   if (in[0]) *in[0] += g;
                 });
}

Tensor relu(const Tensor& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return make_op("relu", out, {a}, [out](const Matrix& g, std::span<Matrix* const> in) {
    if (in[0]) *in[0] += (out.array() > 0.0).select(g, 0.0);
  });
}

Tensor exp(const Tensor& a) {
  Matrix out = a.value().cwiseMax(-700.0).cwiseMin(700.0).array().exp().matrix();
  return make_op("exp", out, {a}, [out](const Matrix& g, std::span<Matrix* const> in) {
    if (in[0]) *in[0] += g.cwiseProduct(out);
  });
}

Tensor log(const Tensor& a) {
  Matrix clamped = a.value().cwiseMax(std::numeric_limits<double>::min());
  Matrix out = clamped.array().log().matrix();
  return make_op("log", std::move(out), {a},
                 [clamped = std::move(clamped)](const Matrix& g, std::span<Matrix* const> in) {
                   if (in[0]) *in[0] += g.cwiseQuotient(clamped);
                 });
}

Tensor square(const Tensor& a) {
  const Matrix& av = a.value();
  Matrix out = av.cwiseProduct(av);
  return make_op("square", std::move(out), {a},
                 [a](const Matrix& g, std::span<Matrix* const> in) {
                   if (in[0]) *in[0] += 2.0 * g.cwiseProduct(a.value());
                 });
}

Tensor xlogy(const Tensor& x, const Tensor& y) {
  auto shape = broadcast_shape("xlogy", x.value(), y.value());
  Matrix ex = expand(x.value(), shape);
  Matrix ey = expand(y.value(), shape);
  Matrix out(shape.rows, shape.cols);
  Matrix dx(shape.rows, shape.cols);
  Matrix dy(shape.rows, shape.cols);
  for (Index i = 0; i < shape.rows; ++i) {
    for (Index j = 0; j < shape.cols; ++j) {
      const double xv = ex(i, j);
      const double yv = std::max(ey(i, j), std::numeric_limits<double>::min());
      if (xv == 0.0) {
        out(i, j) = 0.0;
        dx(i, j) = 0.0;
        dy(i, j) = 0.0;
      } else {
        out(i, j) = xv * std::log(yv);
        dx(i, j) = std::log(yv);
        dy(i, j) = xv / yv;
      }
    }
  }
  return make_op("xlogy", std::move(out), {x, y},
                 [dx = std::move(dx), dy = std::move(dy)](const Matrix& g,
                                                          std::span<Matrix* const> in) {
                   if (in[0]) accumulate_reduced(in[0], g.cwiseProduct(dx));
                   if (in[1]) accumulate_reduced(in[1], g.cwiseProduct(dy));
                 });
}

Tensor sum(const Tensor& a) {
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  return make_op("sum", std::move(out), {a}, [](const Matrix& g, std::span<Matrix* const> in) {
    if (in[0]) in[0]->array() += g(0, 0);
  });
}

Tensor mean(const Tensor& a) {
  const Index n = a.size();
  if (n == 0) throw InputError("mean of an empty tensor");
  Matrix out = Matrix::Constant(1, 1, a.value().sum() / static_cast<double>(n));
  return make_op("mean", std::move(out), {a},
                 [n](const Matrix& g, std::span<Matrix* const> in) {
                   if (in[0]) in[0]->array() += g(0, 0) / static_cast<double>(n);
                 });
}

Tensor sum_rows(const Tensor& a) {
  Matrix out = a.value().rowwise().sum();
  return make_op("sum_rows", std::move(out), {a},
                 [](const Matrix& g, std::span<Matrix* const> in) {
                   if (in[0]) in[0]->colwise() += g.col(0);
                 });
}

Tensor sum_cols(const Tensor& a) {
  Matrix out = a.value().colwise().sum();
  return make_op("sum_cols", std::move(out), {a},
                 [](const Matrix& g, std::span<Matrix* const> in) {
                   if (in[0]) in[0]->rowwise() += g.row(0);
                 });
}

namespace {

Matrix log_softmax_values(const Matrix& z) {
  Matrix out(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    const double row_max = z.row(i).maxCoeff();
    const double lse = row_max + std::log((z.row(i).array() - row_max).exp().sum());
    out.row(i) = z.row(i).array() - lse;
  }
  return out;
}

}  // namespace

Tensor softmax_rows(const Tensor& z) {
  Matrix out = log_softmax_values(z.value()).array().exp().matrix();
  return make_op("softmax_rows", out, {z}, [out](const Matrix& g, std::span<Matrix* const> in) {
    if (!in[0]) return;
    // dz = p * (g - <g, p>) row by row.
    Matrix dots = g.cwiseProduct(out).rowwise().sum();
    Matrix centered = g;
    centered.colwise() -= dots.col(0);
    *in[0] += out.cwiseProduct(centered);
  });
}

Tensor log_softmax_rows(const Tensor& z) {
  Matrix out = log_softmax_values(z.value());
  Matrix probs = out.array().exp().matrix();
  return make_op("log_softmax_rows", std::move(out), {z},
                 [probs = std::move(probs)](const Matrix& g, std::span<Matrix* const> in) {
                   if (!in[0]) return;
                   Matrix totals = g.rowwise().sum();
                   Matrix dz = g;
                   dz -= probs.cwiseProduct(totals.replicate(1, probs.cols()));
                   *in[0] += dz;
                 });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  const Matrix& z = logits.value();
  if (static_cast<Index>(targets.size()) != z.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(z) + " logits");
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0 || targets[i] >= z.cols()) {
      throw InputError("cross_entropy: class index " + std::to_string(targets[i]) + " at row " +
                       std::to_string(i) + " outside [0, " + std::to_string(z.cols()) + ")");
    }
  }
  Matrix log_probs = log_softmax_values(z);
  Matrix out(z.rows(), 1);
  for (Index i = 0; i < z.rows(); ++i) out(i, 0) = -log_probs(i, targets[i]);
  std::vector<int> labels(targets.begin(), targets.end());
  return make_op("cross_entropy", std::move(out), {logits},
                 [log_probs = std::move(log_probs), labels = std::move(labels)](
                     const Matrix& g, std::span<Matrix* const> in) {
                   if (!in[0]) return;
                   Matrix dz = log_probs.array().exp().matrix();
                   for (Index i = 0; i < dz.rows(); ++i) dz(i, labels[i]) -= 1.0;
                   dz.array().colwise() *= g.col(0).array();
                   *in[0] += dz;
                 });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  const Matrix& p = pred.value();
  const Matrix& t = target.value();
  if (p.rows() != t.rows() || p.cols() != t.cols()) {
    throw DimensionError("mse: prediction " + shape_str(p) + " vs target " + shape_str(t));
  }
  Matrix diff = p - t;
  Matrix out = diff.rowwise().squaredNorm();
  return make_op("mse", std::move(out), {pred, target},
                 [diff = std::move(diff)](const Matrix& g, std::span<Matrix* const> in) {
                   Matrix d = 2.0 * diff;
                   d.array().colwise() *= g.col(0).array();
                   if (in[0]) *in[0] += d;
                   if (in[1]) *in[1] -= d;
                 });
}

Tensor pick_cols(const Tensor& a, std::span<const int> columns) {
  const Matrix& av = a.value();
  if (static_cast<Index>(columns.size()) != av.rows()) {
    throw DimensionError("pick_cols: " + std::to_string(columns.size()) + " indices for " +
                         shape_str(av));
  }
  Matrix out(av.rows(), 1);
  for (Index i = 0; i < av.rows(); ++i) {
    if (columns[i] < 0 || columns[i] >= av.cols()) {
      throw InputError("pick_cols: column " + std::to_string(columns[i]) + " out of range");
    }
    out(i, 0) = av(i, columns[i]);
  }
  std::vector<int> cols(columns.begin(), columns.end());
  return make_op("pick_cols", std::move(out), {a},
                 [cols = std::move(cols)](const Matrix& g, std::span<Matrix* const> in) {
                   if (!in[0]) return;
                   for (Index i = 0; i < g.rows(); ++i) (*in[0])(i, cols[i]) += g(i, 0);
                 });
}

Tensor select_rows(const Tensor& a, std::span<const Index> rows) {
  const Matrix& av = a.value();
  Matrix out(static_cast<Index>(rows.size()), av.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] < 0 || rows[k] >= av.rows()) {
      throw InputError("select_rows: row " + std::to_string(rows[k]) + " out of range for " +
                       shape_str(av));
    }
    out.row(static_cast<Index>(k)) = av.row(rows[k]);
  }
  std::vector<Index> picked(rows.begin(), rows.end());
  return make_op("select_rows", std::move(out), {a},
                 [picked = std::move(picked)](const Matrix& g, std::span<Matrix* const> in) {
                   if (!in[0]) return;
                   for (std::size_t k = 0; k < picked.size(); ++k) {
                     in[0]->row(picked[k]) += g.row(static_cast<Index>(k));
                   }
                 });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw InputError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw DimensionError("concat_cols: row counts differ (" + std::to_string(rows) + " vs " +
                           std::to_string(p.rows()) + ")");
    }
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offsets.push_back(offset);
    offset += p.cols();
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_op("concat_cols", std::move(out), std::move(inputs),
                 [offsets = std::move(offsets)](const Matrix& g, std::span<Matrix* const> in) {
                   for (std::size_t k = 0; k < in.size(); ++k) {
                     if (in[k]) *in[k] += g.middleCols(offsets[k], in[k]->cols());
                   }
                 });
}

}  // namespace ednil::ad
