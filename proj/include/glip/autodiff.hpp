// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "glip/common.hpp"

namespace glip::ad {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Handle to a node on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape over dense matrices. Every op appends a node holding its
/// value and a closure that pushes the node's gradient to its inputs. Nodes
/// whose inputs need no gradient are never visited in backward().
template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;

  Var leaf(Mat value, bool requires_grad = false) {
    nodes_.push_back({std::move(value), Mat(), requires_grad, nullptr});
    return {static_cast<int>(nodes_.size()) - 1};
  }

  Var constant(Mat value) { return leaf(std::move(value), false); }

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient of the last backward() root w.r.t. v; zero if untouched.
  const Mat& grad(Var v) {
    ensure_grad(v.id);
    return nodes_[v.id].grad;
  }

  Mat& grad_ref(int id) {
    ensure_grad(id);
    return nodes_[id].grad;
  }

  template <typename Fn>
  Var op(Mat value, std::initializer_list<Var> inputs, Fn&& backprop) {
    bool rg = false;
    for (Var in : inputs) rg = rg || nodes_[in.id].requires_grad;
    nodes_.push_back({std::move(value), Mat(), rg, nullptr});
    if (rg) nodes_.back().backprop = std::forward<Fn>(backprop);
    return {static_cast<int>(nodes_.size()) - 1};
  }

  template <typename Fn>
  Var op_many(Mat value, const std::vector<Var>& inputs, Fn&& backprop) {
    bool rg = false;
    for (Var in : inputs) rg = rg || nodes_[in.id].requires_grad;
    nodes_.push_back({std::move(value), Mat(), rg, nullptr});
    if (rg) nodes_.back().backprop = std::forward<Fn>(backprop);
    return {static_cast<int>(nodes_.size()) - 1};
  }

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates.
  void backward(Var root) {
    if (value(root).size() != 1) {
      throw Error(ErrorCode::ShapeMismatch, "backward root must be scalar");
    }
    for (auto& n : nodes_) n.grad.resize(0, 0);
    grad_ref(root.id).setOnes();
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || !n.backprop || n.grad.size() == 0) continue;
      n.backprop(id);
    }
  }

  int size() const { return static_cast<int>(nodes_.size()); }

  /// True if the gradient buffer of `v` should be written.
  bool wants(Var v) const { return nodes_[v.id].requires_grad; }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad;
    std::function<void(int)> backprop;
  };

  void ensure_grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols())
      n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Ops. Shapes follow the row-per-item convention: an N x d matrix holds N
// feature vectors.

template <typename S>
void check(bool ok, const char* what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}

template <typename S>
Var matmul(Tape<S>& t, Var a, Var b) {
  check<S>(t.value(a).cols() == t.value(b).rows(), "matmul: inner dimensions differ");
  return t.op(t.value(a) * t.value(b), {a, b}, [&t, a, b](int self) {
    const auto& g = t.grad_ref(self);
    if (t.wants(a)) t.grad_ref(a.id).noalias() += g * t.value(b).transpose();
    if (t.wants(b)) t.grad_ref(b.id).noalias() += t.value(a).transpose() * g;
  });
}

/// a * b^T
template <typename S>
Var matmul_nt(Tape<S>& t, Var a, Var b) {
  check<S>(t.value(a).cols() == t.value(b).cols(), "matmul_nt: feature widths differ");
  return t.op(t.value(a) * t.value(b).transpose(), {a, b}, [&t, a, b](int self) {
    const auto& g = t.grad_ref(self);
    if (t.wants(a)) t.grad_ref(a.id).noalias() += g * t.value(b);
    if (t.wants(b)) t.grad_ref(b.id).noalias() += g.transpose() * t.value(a);
  });
}

template <typename S>
Var add(Tape<S>& t, Var a, Var b) {
  check<S>(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(),
           "add: shapes differ");
  return t.op(t.value(a) + t.value(b), {a, b}, [&t, a, b](int self) {
    const auto& g = t.grad_ref(self);
    if (t.wants(a)) t.grad_ref(a.id) += g;
    if (t.wants(b)) t.grad_ref(b.id) += g;
  });
}

/// Adds a 1 x n row to every row of a.
template <typename S>
Var add_row(Tape<S>& t, Var a, Var row) {
  check<S>(t.value(row).rows() == 1 && t.value(row).cols() == t.value(a).cols(),
           "add_row: bias shape");
  Matrix<S> out = t.value(a);
  out.rowwise() += t.value(row).row(0);
  return t.op(std::move(out), {a, row}, [&t, a, row](int self) {
    const auto& g = t.grad_ref(self);
    if (t.wants(a)) t.grad_ref(a.id) += g;
    if (t.wants(row)) t.grad_ref(row.id) += g.colwise().sum();
  });
}

template <typename S>
Var scale(Tape<S>& t, Var a, S factor) {
  return t.op(t.value(a) * factor, {a}, [&t, a, factor](int self) {
    t.grad_ref(a.id) += t.grad_ref(self) * factor;
  });
}

template <typename S>
Var relu(Tape<S>& t, Var a) {
  return t.op(t.value(a).cwiseMax(S(0)), {a}, [&t, a](int self) {
    const auto& g = t.grad_ref(self);
    t.grad_ref(a.id) += (t.value(a).array() > S(0)).select(g, S(0)).matrix();
  });
}

/// Replaces subnormal entries by zero. Subnormal arithmetic is two orders of
/// magnitude slower on common CPUs and the values carry no useful signal.
template <typename Derived>
void flush_subnormals(Eigen::MatrixBase<Derived>& m) {
  using S = typename Derived::Scalar;
  m = m.unaryExpr([](S v) { return std::abs(v) < std::numeric_limits<S>::min() ? S(0) : v; });
}

template <typename S>
Matrix<S> softmax_rows_value(const Matrix<S>& x) {
  Matrix<S> y = x;
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const S m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  flush_subnormals(y);
  return y;
}

template <typename S>
Var softmax_rows(Tape<S>& t, Var a) {
  return t.op(softmax_rows_value<S>(t.value(a)), {a}, [&t, a](int self) {
    const auto& y = t.value(Var{self});
    const auto& g = t.grad_ref(self);
    const Eigen::Matrix<S, Eigen::Dynamic, 1> dot = (g.array() * y.array()).rowwise().sum();
    t.grad_ref(a.id).array() += y.array() * (g.array().colwise() - dot.array());
  });
}

template <typename S>
Var transpose(Tape<S>& t, Var a) {
  return t.op(t.value(a).transpose(), {a}, [&t, a](int self) {
    t.grad_ref(a.id) += t.grad_ref(self).transpose();
  });
}

/// Per-row layer normalization with learned gain and bias (1 x d each).
template <typename S>
Var layer_norm(Tape<S>& t, Var a, Var gain, Var bias, S eps = S(1e-5)) {
  const auto& x = t.value(a);
  const Eigen::Index d = x.cols();
  check<S>(t.value(gain).cols() == d && t.value(bias).cols() == d, "layer_norm: param shape");
  Matrix<S> xhat(x.rows(), d);
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S mean = x.row(r).mean();
    const S var = (x.row(r).array() - mean).square().mean();
    inv_std(r) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mean) * inv_std(r);
  }
  Matrix<S> out = xhat.array().rowwise() * t.value(gain).row(0).array();
  out.rowwise() += t.value(bias).row(0);
  return t.op(std::move(out), {a, gain, bias},
              [&t, a, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](int self) {
                const auto& g = t.grad_ref(self);
                if (t.wants(gain))
                  t.grad_ref(gain.id) += (g.array() * xhat.array()).colwise().sum().matrix();
                if (t.wants(bias)) t.grad_ref(bias.id) += g.colwise().sum();
                if (t.wants(a)) {
                  const Matrix<S> gx = g.array().rowwise() * t.value(gain).row(0).array();
                  const S n = static_cast<S>(gx.cols());
                  auto& ga = t.grad_ref(a.id);
                  for (Eigen::Index r = 0; r < gx.rows(); ++r) {
                    const S mean_g = gx.row(r).mean();
                    const S mean_gx = gx.row(r).dot(xhat.row(r)) / n;
                    ga.row(r).array() += inv_std(r) * (gx.row(r).array() - mean_g -
                                                       xhat.row(r).array() * mean_gx);
                  }
                }
              });
}

/// Rows of `table` selected by `ids`.
template <typename S>
Var gather_rows(Tape<S>& t, Var table, std::vector<int> ids) {
  const auto& tab = t.value(table);
  Matrix<S> out(static_cast<Eigen::Index>(ids.size()), tab.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    check<S>(ids[i] >= 0 && ids[i] < tab.rows(), "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = tab.row(ids[i]);
  }
  return t.op(std::move(out), {table}, [&t, table, ids = std::move(ids)](int self) {
    const auto& g = t.grad_ref(self);
    auto& gt = t.grad_ref(table.id);
    for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

template <typename S>
Var slice_cols(Tape<S>& t, Var a, Eigen::Index start, Eigen::Index count) {
  check<S>(start >= 0 && start + count <= t.value(a).cols(), "slice_cols: out of range");
  return t.op(t.value(a).middleCols(start, count), {a}, [&t, a, start, count](int self) {
    t.grad_ref(a.id).middleCols(start, count) += t.grad_ref(self);
  });
}

template <typename S>
Var slice_rows(Tape<S>& t, Var a, Eigen::Index start, Eigen::Index count) {
  check<S>(start >= 0 && start + count <= t.value(a).rows(), "slice_rows: out of range");
  return t.op(t.value(a).middleRows(start, count), {a}, [&t, a, start, count](int self) {
    t.grad_ref(a.id).middleRows(start, count) += t.grad_ref(self);
  });
}

template <typename S>
Var hconcat(Tape<S>& t, const std::vector<Var>& parts) {
  check<S>(!parts.empty(), "hconcat: no inputs");
  const Eigen::Index rows = t.value(parts[0]).rows();
  Eigen::Index cols = 0;
  for (Var p : parts) {
    check<S>(t.value(p).rows() == rows, "hconcat: row counts differ");
    cols += t.value(p).cols();
  }
  Matrix<S> out(rows, cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    out.middleCols(c, t.value(p).cols()) = t.value(p);
    c += t.value(p).cols();
  }
  return t.op_many(std::move(out), parts, [&t, parts](int self) {
    const auto& g = t.grad_ref(self);
    Eigen::Index c = 0;
    for (Var p : parts) {
      const Eigen::Index w = t.value(p).cols();
      if (t.wants(p)) t.grad_ref(p.id) += g.middleCols(c, w);
      c += w;
    }
  });
}

template <typename S>
Var vconcat(Tape<S>& t, const std::vector<Var>& parts) {
  check<S>(!parts.empty(), "vconcat: no inputs");
  const Eigen::Index cols = t.value(parts[0]).cols();
  Eigen::Index rows = 0;
  for (Var p : parts) {
    check<S>(t.value(p).cols() == cols, "vconcat: column counts differ");
    rows += t.value(p).rows();
  }
  Matrix<S> out(rows, cols);
  Eigen::Index r = 0;
  for (Var p : parts) {
    out.middleRows(r, t.value(p).rows()) = t.value(p);
    r += t.value(p).rows();
  }
  return t.op_many(std::move(out), parts, [&t, parts](int self) {
    const auto& g = t.grad_ref(self);
    Eigen::Index r = 0;
    for (Var p : parts) {
      const Eigen::Index h = t.value(p).rows();
      if (t.wants(p)) t.grad_ref(p.id) += g.middleRows(r, h);
      r += h;
    }
  });
}

/// Scalar node whose value and gradient w.r.t. `a` were computed externally
/// (closed-form losses).
template <typename S>
Var external_loss(Tape<S>& t, Var a, S value, Matrix<S> grad) {
  check<S>(grad.rows() == t.value(a).rows() && grad.cols() == t.value(a).cols(),
           "external_loss: gradient shape");
  Matrix<S> v(1, 1);
  v(0, 0) = value;
  return t.op(std::move(v), {a}, [&t, a, grad = std::move(grad)](int self) {
    t.grad_ref(a.id) += grad * t.grad_ref(self)(0, 0);
  });
}

}  // namespace glip::ad
