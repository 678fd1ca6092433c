#pragma once

// Dense 2-D tensors with a reverse-mode tape.
//
// A Tensor is a shared handle to a graph node. Ops build new nodes that keep
// their inputs alive, so the graph of a loss lives exactly as long as the
// loss tensor. Vectors are represented as n x 1 tensors and scalars as 1 x 1.
// All arithmetic is 64-bit and single-threaded; reductions run in a fixed
// order so repeated runs are bitwise identical.

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace ednil {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace ednil

namespace ednil::ad {

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  // Leaf that never receives gradients.
  static Tensor constant(Matrix value);
  static Tensor scalar(double value);
  // Leaf that accumulates gradients; grad starts at zero.
  static Tensor parameter(Matrix value);

  bool defined() const noexcept { return node_ != nullptr; }
  const Matrix& value() const;
  // Leaves only; used by optimizers and checkpoint loading.
  Matrix& mutable_value();
  const Matrix& grad() const;
  Matrix& mutable_grad();
  bool requires_grad() const;
  bool is_leaf() const;
  std::string_view op() const;
  std::uint64_t id() const;

  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Index size() const { return value().size(); }
  std::array<Index, 2> shape() const { return {rows(), cols()}; }
  // Value of a 1 x 1 tensor.
  double item() const;

  void zero_grad();
  // Same values, cut from the graph.
  Tensor detach() const;

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  friend class Graph;
  friend void backward(const Tensor& root);
  friend Tensor make_op(std::string_view op, Matrix value, std::vector<Tensor> inputs,
                        std::function<void(const Matrix& grad_out,
                                           std::span<Matrix* const> grad_in)>
                            backward_fn);

  std::shared_ptr<detail::Node> node_;
};

// Creates an op node. backward_fn receives the output gradient and one slot
// per input; slots are null for inputs that do not require gradients and
// otherwise point at zero-initialized accumulators of the input's shape.
Tensor make_op(std::string_view op, Matrix value, std::vector<Tensor> inputs,
               std::function<void(const Matrix& grad_out, std::span<Matrix* const> grad_in)>
                   backward_fn);

struct OpRecord {
  std::string_view op;
  std::vector<std::uint64_t> inputs;
  std::uint64_t output = 0;
};

// Topologically ordered op records reachable from a root.
class Graph {
 public:
  explicit Graph(const Tensor& root);

  const std::vector<OpRecord>& records() const noexcept { return records_; }

 private:
  friend void backward(const Tensor& root);
  std::vector<std::shared_ptr<detail::Node>> order_;
  std::vector<OpRecord> records_;
};

// Accumulates d(root)/d(leaf) into every gradient-tracking leaf reachable
// from root. Throws UsageError unless root is 1 x 1.
void backward(const Tensor& root);

// ---- ops ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise with broadcasting: each dimension must match or be 1.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

Tensor relu(const Tensor& a);
// Input clamped to [-700, 700] so the result stays finite.
Tensor exp(const Tensor& a);
// Input clamped below at the smallest normal double.
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
// x * log(y), defined as 0 where x == 0.
Tensor xlogy(const Tensor& x, const Tensor& y);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// m x n -> m x 1.
Tensor sum_rows(const Tensor& a);
// m x n -> 1 x n.
Tensor sum_cols(const Tensor& a);

Tensor softmax_rows(const Tensor& z);
Tensor log_softmax_rows(const Tensor& z);

// Per-sample -log softmax(logits)[target], n x 1.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
// Per-sample squared error, n x 1. Shapes must match.
Tensor mse(const Tensor& pred, const Tensor& target);

// Picks a(i, columns[i]) for every row: m x n -> m x 1.
Tensor pick_cols(const Tensor& a, std::span<const int> columns);
Tensor select_rows(const Tensor& a, std::span<const Index> rows);
Tensor concat_cols(std::span<const Tensor> parts);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }

}  // namespace ednil::ad
