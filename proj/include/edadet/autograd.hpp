#pragma once

// Minimal tape-based reverse-mode differentiation over dense row-major
// matrices. Every op computes its value eagerly and, when the graph records,
// registers a closure that pushes the output gradient into its parents.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "edadet/errors.hpp"

namespace edadet::ag {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

class Graph;

class Var {
 public:
  Var() = default;
  Var(Graph* g, int id) : g_(g), id_(id) {}

  const Mat& value() const;
  // Empty (0x0) when no gradient reached this node.
  const Mat& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  Graph* graph() const { return g_; }
  int id() const { return id_; }
  bool valid() const { return g_ != nullptr; }

 private:
  Graph* g_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  // A non-recording graph evaluates values only; no closures are kept.
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  Var constant(Mat v) { return push(std::move(v), false, {}); }

  Var leaf(Mat v) { return push(std::move(v), record_, {}); }

  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }

  // Creates a node whose gradient requirement is inherited from `parents`.
  template <class Backward>
  Var op(Mat value, std::initializer_list<Var> parents, Backward&& backward) {
    return op_from(std::move(value), std::vector<Var>(parents), std::forward<Backward>(backward));
  }

  template <class Backward>
  Var op_from(Mat value, const std::vector<Var>& parents, Backward&& backward) {
    bool rg = false;
    if (record_) {
      for (const auto& p : parents) rg = rg || nodes_[p.id()].requires_grad;
    }
    if (!rg) return push(std::move(value), false, {});
    return push(std::move(value), true, std::function<void(const Mat&)>(std::forward<Backward>(backward)));
  }

  template <class Expr>
  void accumulate(const Var& v, const Expr& g) {
    auto& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  void backward(const Var& loss) {
    require(loss.rows() == 1 && loss.cols() == 1, "backward: loss must be a scalar");
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].grad = Mat::Ones(1, 1);
    for (int i = loss.id(); i >= 0; --i) {
      auto& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
      n.backward(n.grad);
    }
  }

  const Mat& value(int id) const { return nodes_[id].value; }
  const Mat& grad(int id) const { return nodes_[id].grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::function<void(const Mat&)> backward;
  };

  Var push(Mat v, bool rg, std::function<void(const Mat&)> bw) {
    nodes_.push_back(Node{std::move(v), Mat(), rg, std::move(bw)});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::deque<Node> nodes_;
  bool record_;
};

inline const Mat& Var::value() const { return g_->value(id_); }
inline const Mat& Var::grad() const { return g_->grad(id_); }

namespace detail {
inline void same_shape(const Var& a, const Var& b, const char* what) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          std::string(what) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
              std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
              std::to_string(b.cols()));
}
}  // namespace detail

// ---- linear algebra -------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  Graph* g = a.graph();
  return g->op(a.value() * b.value(), {a, b}, [g, a, b](const Mat& go) {
    if (g->requires_grad(a)) g->accumulate(a, go * b.value().transpose());
    if (g->requires_grad(b)) g->accumulate(b, a.value().transpose() * go);
  });
}

// a * b^T
inline Var matmul_bt(const Var& a, const Var& b) {
  require(a.cols() == b.cols(), "matmul_bt: inner dimension mismatch");
  Graph* g = a.graph();
  return g->op(a.value() * b.value().transpose(), {a, b}, [g, a, b](const Mat& go) {
    if (g->requires_grad(a)) g->accumulate(a, go * b.value());
    if (g->requires_grad(b)) g->accumulate(b, go.transpose() * a.value());
  });
}

inline Var transpose(const Var& a) {
  Graph* g = a.graph();
  return g->op(a.value().transpose(), {a}, [g, a](const Mat& go) { g->accumulate(a, go.transpose()); });
}

// ---- elementwise binary ---------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  detail::same_shape(a, b, "add");
  Graph* g = a.graph();
  return g->op(a.value() + b.value(), {a, b}, [g, a, b](const Mat& go) {
    g->accumulate(a, go);
    g->accumulate(b, go);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_shape(a, b, "sub");
  Graph* g = a.graph();
  return g->op(a.value() - b.value(), {a, b}, [g, a, b](const Mat& go) {
    g->accumulate(a, go);
    g->accumulate(b, -go);
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::same_shape(a, b, "mul");
  Graph* g = a.graph();
  return g->op(a.value().cwiseProduct(b.value()), {a, b}, [g, a, b](const Mat& go) {
    if (g->requires_grad(a)) g->accumulate(a, go.cwiseProduct(b.value()));
    if (g->requires_grad(b)) g->accumulate(b, go.cwiseProduct(a.value()));
  });
}

inline Var div(const Var& a, const Var& b) {
  detail::same_shape(a, b, "div");
  Graph* g = a.graph();
  Mat out = a.value().cwiseQuotient(b.value());
  return g->op(out, {a, b}, [g, a, b](const Mat& go) {
    if (g->requires_grad(a)) g->accumulate(a, go.cwiseQuotient(b.value()));
    if (g->requires_grad(b)) {
      g->accumulate(b, -(go.cwiseProduct(a.value()).cwiseQuotient(b.value().cwiseAbs2())));
    }
  });
}

// Ties route the gradient to `a`.
inline Var minimum(const Var& a, const Var& b) {
  detail::same_shape(a, b, "minimum");
  Graph* g = a.graph();
  Mat mask = (a.value().array() <= b.value().array()).cast<double>();
  return g->op(a.value().cwiseMin(b.value()), {a, b}, [g, a, b, mask](const Mat& go) {
    g->accumulate(a, go.cwiseProduct(mask));
    g->accumulate(b, go.cwiseProduct((1.0 - mask.array()).matrix()));
  });
}

inline Var maximum(const Var& a, const Var& b) {
  detail::same_shape(a, b, "maximum");
  Graph* g = a.graph();
  Mat mask = (a.value().array() >= b.value().array()).cast<double>();
  return g->op(a.value().cwiseMax(b.value()), {a, b}, [g, a, b, mask](const Mat& go) {
    g->accumulate(a, go.cwiseProduct(mask));
    g->accumulate(b, go.cwiseProduct((1.0 - mask.array()).matrix()));
  });
}

// a + row, where row is 1 x cols(a), broadcast over rows.
inline Var add_row(const Var& a, const Var& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: row vector shape mismatch");
  Graph* g = a.graph();
  Mat out = a.value().rowwise() + row.value().row(0);
  return g->op(std::move(out), {a, row}, [g, a, row](const Mat& go) {
    g->accumulate(a, go);
    if (g->requires_grad(row)) g->accumulate(row, go.colwise().sum());
  });
}

// a .* col, where col is rows(a) x 1, broadcast over columns.
inline Var mul_col(const Var& a, const Var& col) {
  require(col.cols() == 1 && col.rows() == a.rows(), "mul_col: column vector shape mismatch");
  Graph* g = a.graph();
  Mat out = a.value().array().colwise() * col.value().col(0).array();
  return g->op(std::move(out), {a, col}, [g, a, col](const Mat& go) {
    if (g->requires_grad(a)) {
      Mat ga = go.array().colwise() * col.value().col(0).array();
      g->accumulate(a, ga);
    }
    if (g->requires_grad(col)) g->accumulate(col, go.cwiseProduct(a.value()).rowwise().sum());
  });
}

// ---- elementwise unary ----------------------------------------------------

inline Var scale(const Var& a, double s) {
  Graph* g = a.graph();
  return g->op(a.value() * s, {a}, [g, a, s](const Mat& go) { g->accumulate(a, go * s); });
}

inline Var add_scalar(const Var& a, double s) {
  Graph* g = a.graph();
  Mat out = a.value().array() + s;
  return g->op(std::move(out), {a}, [g, a](const Mat& go) { g->accumulate(a, go); });
}

inline Var relu(const Var& a) {
  Graph* g = a.graph();
  Mat out = a.value().cwiseMax(0.0);
  return g->op(std::move(out), {a}, [g, a](const Mat& go) {
    g->accumulate(a, go.cwiseProduct((a.value().array() > 0.0).cast<double>().matrix()));
  });
}

inline Var sigmoid(const Var& a) {
  Graph* g = a.graph();
  Mat out = a.value().unaryExpr([](double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  });
  Var r = g->op(out, {a}, [g, a, out](const Mat& go) {
    g->accumulate(a, go.cwiseProduct(out.cwiseProduct((1.0 - out.array()).matrix())));
  });
  return r;
}

// log(1 + exp(x)), stable for large |x|.
inline Var softplus(const Var& a) {
  Graph* g = a.graph();
  Mat out = a.value().unaryExpr([](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
  return g->op(std::move(out), {a}, [g, a](const Mat& go) {
    Mat s = a.value().unaryExpr([](double x) {
      return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
    g->accumulate(a, go.cwiseProduct(s));
  });
}

// Natural log with the input clamped at `floor` (gradient is zero below it).
inline Var log(const Var& a, double floor = 1e-300) {
  Graph* g = a.graph();
  Mat clamped = a.value().cwiseMax(floor);
  Mat out = clamped.array().log();
  return g->op(std::move(out), {a}, [g, a, clamped, floor](const Mat& go) {
    Mat d = (a.value().array() > floor).cast<double>() / clamped.array();
    g->accumulate(a, go.cwiseProduct(d));
  });
}

inline Var exp(const Var& a) {
  Graph* g = a.graph();
  Mat out = a.value().array().exp();
  return g->op(out, {a}, [g, a, out](const Mat& go) { g->accumulate(a, go.cwiseProduct(out)); });
}

// x^p for x >= floor; x is clamped at floor before exponentiation.
inline Var pow(const Var& a, double p, double floor = 1e-300) {
  Graph* g = a.graph();
  Mat clamped = a.value().cwiseMax(floor);
  Mat out = clamped.unaryExpr([p](double x) { return std::pow(x, p); });
  return g->op(out, {a}, [g, a, clamped, out, p, floor](const Mat& go) {
    Mat d = p * out.array() / clamped.array() * (a.value().array() > floor).cast<double>();
    g->accumulate(a, go.cwiseProduct(d));
  });
}

inline Var abs(const Var& a) {
  Graph* g = a.graph();
  Mat out = a.value().cwiseAbs();
  return g->op(std::move(out), {a}, [g, a](const Mat& go) {
    Mat s = a.value().unaryExpr([](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
    g->accumulate(a, go.cwiseProduct(s));
  });
}

// ---- reductions -----------------------------------------------------------

inline Var sum(const Var& a) {
  Graph* g = a.graph();
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return g->op(std::move(out), {a}, [g, a](const Mat& go) {
    g->accumulate(a, Mat::Constant(a.rows(), a.cols(), go(0, 0)));
  });
}

inline Var mean(const Var& a) {
  require(a.value().size() > 0, "mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

// Column-wise mean over rows: (n x c) -> (1 x c).
inline Var mean_rows(const Var& a) {
  require(a.rows() > 0, "mean_rows: empty input");
  Graph* g = a.graph();
  Mat out = a.value().colwise().mean();
  const double inv = 1.0 / static_cast<double>(a.rows());
  return g->op(std::move(out), {a}, [g, a, inv](const Mat& go) {
    Mat ga = go.replicate(a.rows(), 1) * inv;
    g->accumulate(a, ga);
  });
}

// Per-row sums: (n x c) -> (n x 1).
inline Var sum_cols(const Var& a) {
  Graph* g = a.graph();
  Mat out = a.value().rowwise().sum();
  return g->op(std::move(out), {a}, [g, a](const Mat& go) {
    Mat ga = go.replicate(1, a.cols());
    g->accumulate(a, ga);
  });
}

// ---- indexing -------------------------------------------------------------

inline Var select(const Var& a, Index r, Index c) {
  require(r >= 0 && r < a.rows() && c >= 0 && c < a.cols(), "select: index out of range");
  Graph* g = a.graph();
  Mat out(1, 1);
  out(0, 0) = a.value()(r, c);
  return g->op(std::move(out), {a}, [g, a, r, c](const Mat& go) {
    Mat ga = Mat::Zero(a.rows(), a.cols());
    ga(r, c) = go(0, 0);
    g->accumulate(a, ga);
  });
}

inline Var gather_rows(const Var& a, const std::vector<int>& idx) {
  Graph* g = a.graph();
  Mat out(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < a.rows(), "gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(idx[i]);
  }
  return g->op(std::move(out), {a}, [g, a, idx](const Mat& go) {
    Mat ga = Mat::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += go.row(static_cast<Index>(i));
    g->accumulate(a, ga);
  });
}

inline Var slice_cols(const Var& a, Index start, Index n) {
  require(start >= 0 && n >= 0 && start + n <= a.cols(), "slice_cols: range out of bounds");
  Graph* g = a.graph();
  Mat out = a.value().middleCols(start, n);
  return g->op(std::move(out), {a}, [g, a, start, n](const Mat& go) {
    Mat ga = Mat::Zero(a.rows(), a.cols());
    ga.middleCols(start, n) = go;
    g->accumulate(a, ga);
  });
}

inline Var slice_rows(const Var& a, Index start, Index n) {
  require(start >= 0 && n >= 0 && start + n <= a.rows(), "slice_rows: range out of bounds");
  Graph* g = a.graph();
  Mat out = a.value().middleRows(start, n);
  return g->op(std::move(out), {a}, [g, a, start, n](const Mat& go) {
    Mat ga = Mat::Zero(a.rows(), a.cols());
    ga.middleRows(start, n) = go;
    g->accumulate(a, ga);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Graph* g = parts.front().graph();
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: row count mismatch");
    cols += p.cols();
  }
  Mat out(rows, cols);
  Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return g->op_from(std::move(out), parts, [g, parts](const Mat& go) {
    Index c0 = 0;
    for (const auto& p : parts) {
      if (g->requires_grad(p)) g->accumulate(p, go.middleCols(c0, p.cols()));
      c0 += p.cols();
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Graph* g = parts.front().graph();
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows: column count mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return g->op_from(std::move(out), parts, [g, parts](const Mat& go) {
    Index r0 = 0;
    for (const auto& p : parts) {
      if (g->requires_grad(p)) g->accumulate(p, go.middleRows(r0, p.rows()));
      r0 += p.rows();
    }
  });
}

// ---- row-wise normalizations ----------------------------------------------

inline Mat softmax_rows_value(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

inline Var softmax_rows(const Var& a) {
  Graph* g = a.graph();
  Mat out = softmax_rows_value(a.value());
  return g->op(out, {a}, [g, a, out](const Mat& go) {
    // dx = y .* (dy - <dy, y>)
    Eigen::VectorXd dots = go.cwiseProduct(out).rowwise().sum();
    Mat ga = out.cwiseProduct((go.colwise() - dots).matrix());
    g->accumulate(a, ga);
  });
}

inline Var log_softmax_rows(const Var& a) {
  Graph* g = a.graph();
  const Mat& x = a.value();
  Mat out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    const double lse = m + std::log((x.row(i).array() - m).exp().sum());
    out.row(i) = x.row(i).array() - lse;
  }
  return g->op(out, {a}, [g, a, out](const Mat& go) {
    Mat p = out.array().exp();
    Eigen::VectorXd s = go.rowwise().sum();
    Mat ga = go - (p.array().colwise() * s.array()).matrix();
    g->accumulate(a, ga);
  });
}

// Scales every row to unit L2 norm; rows with norm below eps are divided by eps.
inline Var l2_normalize_rows(const Var& a, double eps = 1e-12) {
  Graph* g = a.graph();
  Eigen::VectorXd norms = a.value().rowwise().norm().cwiseMax(eps);
  Mat out = a.value().array().colwise() / norms.array();
  return g->op(out, {a}, [g, a, out, norms](const Mat& go) {
    // dx = (dy - y <dy, y>) / ||x||
    Eigen::VectorXd dots = go.cwiseProduct(out).rowwise().sum();
    Mat ga = go - (out.array().colwise() * dots.array()).matrix();
    ga = ga.array().colwise() / norms.array();
    g->accumulate(a, ga);
  });
}

// Row-wise layer normalization with affine (1 x n) gamma and beta.
inline Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  require(gamma.rows() == 1 && gamma.cols() == x.cols(), "layer_norm_rows: gamma shape");
  require(beta.rows() == 1 && beta.cols() == x.cols(), "layer_norm_rows: beta shape");
  Graph* g = x.graph();
  const Index n = x.cols();
  Eigen::VectorXd mu = x.value().rowwise().mean();
  Mat xc = x.value().colwise() - mu;
  Eigen::VectorXd inv_std = ((xc.cwiseAbs2().rowwise().sum() / static_cast<double>(n)).array() + eps).rsqrt();
  Mat xhat = xc.array().colwise() * inv_std.array();
  Mat out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return g->op(std::move(out), {x, gamma, beta}, [g, x, gamma, beta, xhat, inv_std, n](const Mat& go) {
    if (g->requires_grad(gamma)) g->accumulate(gamma, go.cwiseProduct(xhat).colwise().sum());
    if (g->requires_grad(beta)) g->accumulate(beta, go.colwise().sum());
    if (g->requires_grad(x)) {
      Mat dxhat = go.array().rowwise() * gamma.value().row(0).array();
      Eigen::VectorXd m1 = dxhat.rowwise().mean();
      Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
      Mat dx = dxhat.colwise() - m1;
      dx -= (xhat.array().colwise() * m2.array()).matrix();
      dx = dx.array().colwise() * inv_std.array();
      g->accumulate(x, dx);
    }
    (void)n;
  });
}

// Per column, the mean of its k largest entries: (n x c) -> (1 x c).
// Ties are resolved by lower row index so the selection is deterministic.
inline std::vector<std::vector<Index>> topk_rows_per_col(const Mat& a, Index k) {
  std::vector<std::vector<Index>> sel(static_cast<std::size_t>(a.cols()));
  std::vector<Index> order(static_cast<std::size_t>(a.rows()));
  for (Index c = 0; c < a.cols(); ++c) {
    std::iota(order.begin(), order.end(), Index{0});
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index i, Index j) {
      const double vi = a(i, c), vj = a(j, c);
      return vi > vj || (vi == vj && i < j);
    });
    sel[static_cast<std::size_t>(c)].assign(order.begin(), order.begin() + k);
  }
  return sel;
}

inline Var topk_mean_cols(const Var& a, Index k) {
  require(k >= 1 && k <= a.rows(), "topk_mean_cols: k out of range");
  Graph* g = a.graph();
  auto sel = topk_rows_per_col(a.value(), k);
  Mat out(1, a.cols());
  for (Index c = 0; c < a.cols(); ++c) {
    double s = 0.0;
    for (Index r : sel[static_cast<std::size_t>(c)]) s += a.value()(r, c);
    out(0, c) = s / static_cast<double>(k);
  }
  return g->op(std::move(out), {a}, [g, a, sel, k](const Mat& go) {
    Mat ga = Mat::Zero(a.rows(), a.cols());
    for (Index c = 0; c < a.cols(); ++c) {
      for (Index r : sel[static_cast<std::size_t>(c)]) ga(r, c) = go(0, c) / static_cast<double>(k);
    }
    g->accumulate(a, ga);
  });
}

}  // namespace edadet::ag
