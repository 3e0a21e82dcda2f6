#include "kelab/autodiff.hpp"

#include <cmath>
#include <limits>
#include <utility>

namespace kelab {

std::string to_string(const Shape& shape) {
  return "[" + std::to_string(shape[0]) + "x" + std::to_string(shape[1]) + "]";
}

// ----------------------------------------------------------------- Tensor

Tensor::Tensor(Matrix value, bool requires_grad) : value_(std::move(value)) {
  set_requires_grad(requires_grad);
}

void Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (on) {
    grad_ = Matrix::Zero(value_.rows(), value_.cols());
  } else {
    grad_.resize(0, 0);
  }
}

const Matrix& Tensor::grad() const {
  if (!requires_grad_) {
    throw TapeError("tensor does not require grad");
  }
  return grad_;
}

Matrix& Tensor::grad() {
  if (!requires_grad_) {
    throw TapeError("tensor does not require grad");
  }
  return grad_;
}

void Tensor::zero_grad() {
  if (requires_grad_) {
    grad_.setZero(value_.rows(), value_.cols());
  }
}

// -------------------------------------------------------------------- Var

const Matrix& Var::value() const {
  if (tape_ == nullptr) {
    throw TapeError("use of a detached Var");
  }
  return tape_->value(id_);
}

Shape Var::shape() const {
  const Matrix& v = value();
  return {v.rows(), v.cols()};
}

bool Var::requires_grad() const {
  return tape_ != nullptr && tape_->requires_grad(id_);
}

double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) {
    throw ShapeError("item() on non-scalar " + to_string(shape()));
  }
  return v(0, 0);
}

// ------------------------------------------------------------------- Tape

Var Tape::leaf(Tensor& tensor) {
  Node n;
  n.view = &tensor.value();
  n.requires_grad = tensor.requires_grad();
  n.tensor = n.requires_grad ? &tensor : nullptr;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant_view(const Matrix& value) {
  Node n;
  n.view = &value;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owned(const Var& v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) {
    throw TapeError("Var belongs to a different or detached tape");
  }
}

Var Tape::record(Matrix value, std::span<const Var> inputs, Pullback pullback) {
  if (consumed_) {
    throw TapeError("recording on a tape that has already run backward");
  }
  bool any = false;
  for (const Var& in : inputs) {
    check_owned(in);
    any = any || nodes_[in.id_].requires_grad;
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = any;
  if (any) {
    n.pullback = std::move(pullback);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::size_t id, const Matrix& delta) { accumulate_expr(id, delta); }

void Tape::backward(const Var& loss) {
  if (loss.tape_ != this) {
    throw TapeError("loss was not recorded on this tape");
  }
  if (consumed_) {
    throw TapeError("backward called twice on the same tape; re-run the forward pass");
  }
  if (value(loss.id_).size() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + to_string(loss.shape()));
  }
  consumed_ = true;
  if (!nodes_[loss.id_].requires_grad) {
    return;
  }
  nodes_[loss.id_].adjoint = Matrix::Ones(1, 1);
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.adjoint.size() == 0) {
      continue;
    }
    if (n.tensor != nullptr) {
      n.tensor->grad() += n.adjoint;
    } else if (n.pullback) {
      n.pullback(*this, i);
    }
    // Free intermediate adjoints once propagated.
    n.adjoint.resize(0, 0);
  }
}

// ------------------------------------------------------------- primitives

namespace {

Tape& common_tape(std::initializer_list<const Var*> vars) {
  Tape* tape = nullptr;
  for (const Var* v : vars) {
    if (v->tape() == nullptr) {
      throw TapeError("use of a detached Var");
    }
    if (tape == nullptr) {
      tape = v->tape();
    } else if (tape != v->tape()) {
      throw TapeError("inputs recorded on different tapes");
    }
  }
  return *tape;
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tape& t = common_tape({&a, &b});
  if (a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t ia = a.id(), ib = b.id();
  const Var in[] = {a, b};
  return t.record(a.value() * b.value(), in, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.adjoint(self);
    if (tp.requires_grad(ia)) {
      tp.accumulate_expr(ia, g * tp.value(ib).transpose());
    }
    if (tp.requires_grad(ib)) {
      tp.accumulate_expr(ib, tp.value(ia).transpose() * g);
    }
  });
}

Var transpose(const Var& a) {
  Tape& t = common_tape({&a});
  const std::size_t ia = a.id();
  const Var in[] = {a};
  return t.record(a.value().transpose(), in, [ia](Tape& tp, std::size_t self) {
    tp.accumulate_expr(ia, tp.adjoint(self).transpose());
  });
}

Var add(const Var& a, const Var& b) {
  Tape& t = common_tape({&a, &b});
  require_same_shape("add", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  const Var in[] = {a, b};
  return t.record(a.value() + b.value(), in, [ia, ib](Tape& tp, std::size_t self) {
    tp.accumulate(ia, tp.adjoint(self));
    tp.accumulate(ib, tp.adjoint(self));
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = common_tape({&a, &b});
  require_same_shape("sub", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  const Var in[] = {a, b};
  return t.record(a.value() - b.value(), in, [ia, ib](Tape& tp, std::size_t self) {
    tp.accumulate(ia, tp.adjoint(self));
    tp.accumulate_expr(ib, -tp.adjoint(self));
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = common_tape({&a, &b});
  require_same_shape("mul", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  const Var in[] = {a, b};
  return t.record(a.value().cwiseProduct(b.value()), in, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.adjoint(self);
    if (tp.requires_grad(ia)) {
      tp.accumulate_expr(ia, g.cwiseProduct(tp.value(ib)));
    }
    if (tp.requires_grad(ib)) {
      tp.accumulate_expr(ib, g.cwiseProduct(tp.value(ia)));
    }
  });
}

Var scale(const Var& a, double s) {
  Tape& t = common_tape({&a});
  const std::size_t ia = a.id();
  const Var in[] = {a};
  return t.record(a.value() * s, in, [ia, s](Tape& tp, std::size_t self) {
    tp.accumulate_expr(ia, tp.adjoint(self) * s);
  });
}

Var add_row(const Var& a, const Var& row) {
  Tape& t = common_tape({&a, &row});
  if (row.shape()[0] != 1 || row.shape()[1] != a.shape()[1]) {
    throw ShapeError("add_row: shape mismatch " + to_string(a.shape()) + " vs " + to_string(row.shape()));
  }
  const std::size_t ia = a.id(), ir = row.id();
  const Var in[] = {a, row};
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return t.record(std::move(out), in, [ia, ir](Tape& tp, std::size_t self) {
    tp.accumulate(ia, tp.adjoint(self));
    if (tp.requires_grad(ir)) {
      tp.accumulate_expr(ir, tp.adjoint(self).colwise().sum());
    }
  });
}

Var softmax_rows(const Var& a) {
  Tape& t = common_tape({&a});
  if (a.shape()[1] == 0) {
    throw ShapeError("softmax over an empty axis " + to_string(a.shape()));
  }
  const std::size_t ia = a.id();
  const Var in[] = {a};
  return t.record(kelab::softmax_rows(a.value()), in, [ia](Tape& tp, std::size_t self) {
    const Matrix& p = tp.value(self);
    const Matrix& g = tp.adjoint(self);
    const Eigen::VectorXd dot = g.cwiseProduct(p).rowwise().sum();
    Matrix dx = g;
    dx.colwise() -= dot;
    tp.accumulate_expr(ia, dx.cwiseProduct(p));
  });
}

Var log_softmax_rows(const Var& a) {
  Tape& t = common_tape({&a});
  if (a.shape()[1] == 0) {
    throw ShapeError("log_softmax over an empty axis " + to_string(a.shape()));
  }
  const std::size_t ia = a.id();
  const Var in[] = {a};
  return t.record(kelab::log_softmax_rows(a.value()), in, [ia](Tape& tp, std::size_t self) {
    const Matrix p = tp.value(self).array().exp().matrix();
    const Matrix& g = tp.adjoint(self);
    const Eigen::VectorXd total = g.rowwise().sum();
    Matrix dx = g;
    for (Index r = 0; r < dx.rows(); ++r) {
      dx.row(r) -= total(r) * p.row(r);
    }
    tp.accumulate(ia, dx);
  });
}

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
  Tape& t = common_tape({&x, &gain, &bias});
  const Index d = x.shape()[1];
  if (gain.shape() != Shape{1, d} || bias.shape() != Shape{1, d}) {
    throw ShapeError("layer_norm: shape mismatch " + to_string(x.shape()) + " vs " +
                     to_string(gain.shape()) + "/" + to_string(bias.shape()));
  }
  if (d == 0) {
    throw ShapeError("layer_norm over an empty axis " + to_string(x.shape()));
  }
  const Matrix& xv = x.value();
  Matrix xhat(xv.rows(), d);
  Eigen::VectorXd inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const auto centered = (xv.row(r).array() - mu).eval();
    const double var = centered.square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = centered * inv_std(r);
  }
  Matrix out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  const Var in[] = {x, gain, bias};
  return t.record(std::move(out), in,
                  [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp,
                                                                                       std::size_t self) {
                    const Matrix& g = tp.adjoint(self);
                    if (tp.requires_grad(ig)) {
                      tp.accumulate_expr(ig, g.cwiseProduct(xhat).colwise().sum());
                    }
                    if (tp.requires_grad(ib)) {
                      tp.accumulate_expr(ib, g.colwise().sum());
                    }
                    if (tp.requires_grad(ix)) {
                      const Matrix dxhat = g.array().rowwise() * tp.value(ig).row(0).array();
                      Matrix dx(dxhat.rows(), dxhat.cols());
                      for (Index r = 0; r < dx.rows(); ++r) {
                        const double m1 = dxhat.row(r).mean();
                        const double m2 = dxhat.row(r).dot(xhat.row(r)) / double(dxhat.cols());
                        dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                      }
                      tp.accumulate(ix, dx);
                    }
                  });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
  Tape& t = common_tape({&table});
  const Index n = table.shape()[0];
  Matrix out(static_cast<Index>(ids.size()), table.shape()[1]);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= n) {
      throw ShapeError("gather_rows: index " + std::to_string(ids[i]) + " out of range for " +
                       to_string(table.shape()));
    }
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  const std::size_t it = table.id();
  std::vector<int> idx(ids.begin(), ids.end());
  const Var in[] = {table};
  return t.record(std::move(out), in, [it, idx = std::move(idx)](Tape& tp, std::size_t self) {
    const Matrix& g = tp.adjoint(self);
    Matrix dt = Matrix::Zero(tp.value(it).rows(), tp.value(it).cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      dt.row(idx[i]) += g.row(static_cast<Index>(i));
    }
    tp.accumulate(it, dt);
  });
}

Var causal_mask(const Var& scores) {
  Tape& t = common_tape({&scores});
  if (scores.shape()[0] != scores.shape()[1]) {
    throw ShapeError("causal_mask: expected square scores, got " + to_string(scores.shape()));
  }
  Matrix out = scores.value();
  const Index n = out.rows();
  for (Index r = 0; r < n; ++r) {
    for (Index c = r + 1; c < n; ++c) {
      out(r, c) = -std::numeric_limits<double>::infinity();
    }
  }
  const std::size_t is = scores.id();
  const Var in[] = {scores};
  return t.record(std::move(out), in, [is](Tape& tp, std::size_t self) {
    Matrix g = tp.adjoint(self);
    g.triangularView<Eigen::StrictlyUpper>().setZero();
    tp.accumulate(is, g);
  });
}

Var gelu(const Var& a) {
  Tape& t = common_tape({&a});
  const auto x = a.value().array();
  const Eigen::ArrayXXd th = (kGeluC * (x + kGeluA * x.cube())).tanh();
  Matrix out = (0.5 * x * (1.0 + th)).matrix();
  const std::size_t ia = a.id();
  const Var in[] = {a};
  return t.record(std::move(out), in, [ia, th](Tape& tp, std::size_t self) {
    const auto x = tp.value(ia).array();
    const auto dydx = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th.square()) * kGeluC * (1.0 + 3.0 * kGeluA * x.square());
    tp.accumulate_expr(ia, (tp.adjoint(self).array() * dydx).matrix());
  });
}

Var relu(const Var& a) {
  Tape& t = common_tape({&a});
  const std::size_t ia = a.id();
  const Var in[] = {a};
  return t.record(a.value().cwiseMax(0.0), in, [ia](Tape& tp, std::size_t self) {
    const Matrix mask = (tp.value(ia).array() > 0.0).cast<double>().matrix();
    tp.accumulate_expr(ia, tp.adjoint(self).cwiseProduct(mask));
  });
}

Var sum(const Var& a) {
  Tape& t = common_tape({&a});
  const std::size_t ia = a.id();
  const Shape s = a.shape();
  const Var in[] = {a};
  return t.record(Matrix::Constant(1, 1, a.value().sum()), in, [ia, s](Tape& tp, std::size_t self) {
    tp.accumulate_expr(ia, Matrix::Constant(s[0], s[1], tp.adjoint(self)(0, 0)));
  });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) {
    throw ShapeError("mean of an empty tensor");
  }
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var sigmoid(const Var& a) {
  Tape& t = common_tape({&a});
  const std::size_t ia = a.id();
  const Var in[] = {a};
  Matrix out = a.value().unaryExpr([](double v) { return kelab::sigmoid(v); });
  return t.record(std::move(out), in, [ia](Tape& tp, std::size_t self) {
    const auto s = tp.value(self).array();
    tp.accumulate_expr(ia, (tp.adjoint(self).array() * s * (1.0 - s)).matrix());
  });
}

Var log(const Var& a) {
  Tape& t = common_tape({&a});
  const std::size_t ia = a.id();
  const Var in[] = {a};
  return t.record(a.value().array().log().matrix(), in, [ia](Tape& tp, std::size_t self) {
    tp.accumulate_expr(ia, (tp.adjoint(self).array() / tp.value(ia).array()).matrix());
  });
}

Var log_sigmoid(const Var& a) {
  Tape& t = common_tape({&a});
  const std::size_t ia = a.id();
  const Var in[] = {a};
  Matrix out = a.value().unaryExpr([](double v) { return kelab::log_sigmoid(v); });
  return t.record(std::move(out), in, [ia](Tape& tp, std::size_t self) {
    const Matrix d = tp.value(ia).unaryExpr([](double v) { return kelab::sigmoid(-v); });
    tp.accumulate_expr(ia, tp.adjoint(self).cwiseProduct(d));
  });
}

Var slice_cols(const Var& a, Index start, Index count) {
  Tape& t = common_tape({&a});
  if (start < 0 || count < 0 || start + count > a.shape()[1]) {
    throw ShapeError("slice_cols: columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + to_string(a.shape()));
  }
  const std::size_t ia = a.id();
  const Shape s = a.shape();
  const Var in[] = {a};
  return t.record(a.value().middleCols(start, count), in, [ia, s, start, count](Tape& tp, std::size_t self) {
    Matrix g = Matrix::Zero(s[0], s[1]);
    g.middleCols(start, count) = tp.adjoint(self);
    tp.accumulate(ia, g);
  });
}

Var hconcat(std::span<const Var> parts) {
  if (parts.empty()) {
    throw ShapeError("hconcat of zero parts");
  }
  Tape& t = common_tape({&parts[0]});
  const Index rows = parts[0].shape()[0];
  Index cols = 0;
  for (const Var& p : parts) {
    common_tape({&parts[0], &p});
    if (p.shape()[0] != rows) {
      throw ShapeError("hconcat: shape mismatch " + to_string(parts[0].shape()) + " vs " + to_string(p.shape()));
    }
    cols += p.shape()[1];
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Index>> layout;  // (id, width)
  Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.shape()[1]) = p.value();
    layout.emplace_back(p.id(), p.shape()[1]);
    at += p.shape()[1];
  }
  return t.record(std::move(out), parts, [layout = std::move(layout)](Tape& tp, std::size_t self) {
    Index at = 0;
    for (const auto& [id, width] : layout) {
      if (tp.requires_grad(id)) {
        tp.accumulate(id, tp.adjoint(self).middleCols(at, width));
      }
      at += width;
    }
  });
}

Var pick(const Var& a, std::span<const Index> rows, std::span<const Index> cols) {
  Tape& t = common_tape({&a});
  if (rows.size() != cols.size()) {
    throw ShapeError("pick: " + std::to_string(rows.size()) + " rows vs " + std::to_string(cols.size()) + " cols");
  }
  const Shape s = a.shape();
  Matrix out(static_cast<Index>(rows.size()), 1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= s[0] || cols[i] < 0 || cols[i] >= s[1]) {
      throw ShapeError("pick: (" + std::to_string(rows[i]) + ", " + std::to_string(cols[i]) +
                       ") out of range for " + to_string(s));
    }
    out(static_cast<Index>(i), 0) = a.value()(rows[i], cols[i]);
  }
  std::vector<Index> r(rows.begin(), rows.end()), c(cols.begin(), cols.end());
  const std::size_t ia = a.id();
  const Var in[] = {a};
  return t.record(std::move(out), in,
                  [ia, s, r = std::move(r), c = std::move(c)](Tape& tp, std::size_t self) {
                    Matrix g = Matrix::Zero(s[0], s[1]);
                    for (std::size_t i = 0; i < r.size(); ++i) {
                      g(r[i], c[i]) += tp.adjoint(self)(static_cast<Index>(i), 0);
                    }
                    tp.accumulate(ia, g);
                  });
}

}  // namespace kelab
