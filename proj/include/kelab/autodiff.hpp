#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kelab/numerics.hpp"

namespace kelab {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::array<Index, 2>;

std::string to_string(const Shape& shape);

/// Persistent dense value with an optional gradient accumulator.
///
/// Every tensor in this library is at most two-dimensional: scalars are 1x1,
/// vectors are 1xn rows. The gradient buffer exists iff requires_grad().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);

  Shape shape() const { return {value_.rows(), value_.cols()}; }
  Index size() const { return value_.size(); }

  const Matrix& value() const { return value_; }
  Matrix& value() { return value_; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on);

  /// Throws when the tensor does not track gradients.
  const Matrix& grad() const;
  Matrix& grad();
  void zero_grad();

 private:
  Matrix value_;
  Matrix grad_;
  bool requires_grad_ = false;
};

class Tape;

/// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Shape shape() const;
  bool requires_grad() const;
  double item() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of primitive applications. Nodes are appended in creation
/// order, which is a topological order, so backward() is a single reverse scan.
class Tape {
 public:
  using Pullback = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a persistent tensor. Gradients flow into tensor.grad() on backward.
  Var leaf(Tensor& tensor);
  Var constant(Matrix value);
  /// Constant that aliases external storage; `value` must outlive the tape.
  Var constant_view(const Matrix& value);

  /// Appends an op output. `pullback` is only kept when some input requires grad.
  Var record(Matrix value, std::span<const Var> inputs, Pullback pullback);

  /// Accumulates d(loss)/d(leaf) into every leaf tensor's grad. The tape is
  /// consumed afterwards; a second call throws.
  void backward(const Var& loss);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  const Matrix& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.view != nullptr ? *n.view : n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Upstream gradient of a node during backward.
  const Matrix& adjoint(std::size_t id) const { return nodes_[id].adjoint; }
  /// Adds `delta` to the adjoint of `id` (no-op for nodes without grad).
  void accumulate(std::size_t id, const Matrix& delta);
  template <typename Expr>
  void accumulate_expr(std::size_t id, const Expr& delta) {
    Node& n = nodes_[id];
    if (!n.requires_grad) {
      return;
    }
    if (n.adjoint.size() == 0) {
      n.adjoint = delta;
    } else {
      n.adjoint += delta;
    }
  }

  void check_owned(const Var& v) const;

 private:
  struct Node {
    Matrix value;
    const Matrix* view = nullptr;
    Matrix adjoint;
    bool requires_grad = false;
    Tensor* tensor = nullptr;
    Pullback pullback;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Primitives. Every function records onto the tape owning its inputs; mixing
// tapes throws TapeError. Shape mismatches throw ShapeError naming both shapes.

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// a + row broadcast over every row of a; `row` is 1 x cols(a).
Var add_row(const Var& a, const Var& row);

Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
/// Per-row normalisation with learned gain and bias rows.
Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
/// Rows of `table` selected by `ids` (embedding lookup).
Var gather_rows(const Var& table, std::span<const int> ids);
/// Sets entries above the diagonal to -inf.
Var causal_mask(const Var& scores);
Var gelu(const Var& a);
Var relu(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);
Var sigmoid(const Var& a);
Var log(const Var& a);
Var log_sigmoid(const Var& a);

Var slice_cols(const Var& a, Index start, Index count);
Var hconcat(std::span<const Var> parts);
/// Column vector of a(rows[i], cols[i]).
Var pick(const Var& a, std::span<const Index> rows, std::span<const Index> cols);

}  // namespace kelab
