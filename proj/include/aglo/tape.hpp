#pragma once

// Matrix-granular reverse-mode differentiation. Every node of the tape holds a
// dense row-major matrix; rows index samples and columns index features.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aglo/common.hpp"

namespace aglo::ad {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Param {
  Mat value;
  Mat grad;
};

/// Named parameter tensors, ordered by name so iteration (and therefore
/// serialization and optimizer updates) is deterministic.
class ParamStore {
 public:
  Param& add(const std::string& name, Mat value) {
    require(!params_.count(name), ErrorKind::invalid_argument, "duplicate parameter " + name);
    Param p{std::move(value), Mat()};
    p.grad = Mat::Zero(p.value.rows(), p.value.cols());
    return params_.emplace(name, std::move(p)).first->second;
  }

  /// Glorot-uniform weights for a (out x in) layer.
  Param& add_weight(const std::string& name, Eigen::Index out, Eigen::Index in, Rng& rng, double gain = 1.0) {
    const double bound = gain * std::sqrt(6.0 / static_cast<double>(in + out));
    Mat w(out, in);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = uniform(rng, -bound, bound);
    return add(name, std::move(w));
  }

  Param& add_zeros(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    return add(name, Mat::Zero(rows, cols));
  }

  Param& at(const std::string& name) {
    auto it = params_.find(name);
    require(it != params_.end(), ErrorKind::invalid_argument, "unknown parameter " + name);
    return it->second;
  }
  const Param& at(const std::string& name) const {
    auto it = params_.find(name);
    require(it != params_.end(), ErrorKind::invalid_argument, "unknown parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  void zero_grad() {
    for (auto& [_, p] : params_) p.grad.setZero();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& [_, p] : params_) s += p.grad.squaredNorm();
    return std::sqrt(s);
  }

  void scale_grad(double factor) {
    for (auto& [_, p] : params_) p.grad *= factor;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (auto ia = a.params_.begin(), ib = b.params_.begin(); ia != a.params_.end(); ++ia, ++ib) {
      if (ia->first != ib->first) return false;
      if (ia->second.value.rows() != ib->second.value.rows() || ia->second.value.cols() != ib->second.value.cols())
        return false;
      if (ia->second.value != ib->second.value) return false;
    }
    return true;
  }

 private:
  std::map<std::string, Param> params_;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  Var constant(Mat value) { return push(std::move(value), false, nullptr, nullptr); }

  Var param(Param& p) { return push(p.value, true, nullptr, &p); }

  Var param(ParamStore& store, const std::string& name) { return param(store.at(name)); }

  Var push(Mat value, bool requires_grad, Backward backward, Param* bound = nullptr) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, std::move(backward), bound});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  const Mat& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  /// Gradient accumulator for node `id`, zero-initialized on first touch.
  Mat& grad_acc(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Seeds d(loss)/d(loss) = 1 and accumulates into every bound parameter.
  void backward(Var loss, double seed = 1.0) {
    require(loss.tape == this && loss.rows() == 1 && loss.cols() == 1, ErrorKind::invalid_argument,
            "backward expects a scalar node of this tape");
    grad_acc(loss.id)(0, 0) += seed;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param) n.param->grad += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad;
    Backward backward;
    Param* param;
  };
  std::deque<Node> nodes_;
};

inline const Mat& Var::value() const { return tape->value(id); }

namespace detail {

inline bool any_grad(std::initializer_list<Var> vs) {
  for (const Var& v : vs)
    if (v.tape->requires_grad(v.id)) return true;
  return false;
}

template <class F>
Var unary(Var a, Mat out, F dlocal) {
  Tape& t = *a.tape;
  const bool rg = t.requires_grad(a.id);
  return t.push(std::move(out), rg, rg ? Tape::Backward([a, dlocal](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    tp.grad_acc(a.id).array() += g.array() * dlocal(tp.value(a.id), tp.value(self)).array();
  }) : nullptr);
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::invalid_argument,
          std::string(op) + ": shape mismatch");
}

}  // namespace detail

inline Var add(Var a, Var b) {
  detail::check_same_shape(a, b, "add");
  Tape& t = *a.tape;
  const bool rg = detail::any_grad({a, b});
  return t.push(a.value() + b.value(), rg, [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad_acc(a.id) += g;
    if (tp.requires_grad(b.id)) tp.grad_acc(b.id) += g;
  });
}

inline Var sub(Var a, Var b) {
  detail::check_same_shape(a, b, "sub");
  Tape& t = *a.tape;
  const bool rg = detail::any_grad({a, b});
  return t.push(a.value() - b.value(), rg, [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad_acc(a.id) += g;
    if (tp.requires_grad(b.id)) tp.grad_acc(b.id) -= g;
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::check_same_shape(a, b, "mul");
  Tape& t = *a.tape;
  const bool rg = detail::any_grad({a, b});
  return t.push((a.value().array() * b.value().array()).matrix(), rg, [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad_acc(a.id).array() += g.array() * tp.value(b.id).array();
    if (tp.requires_grad(b.id)) tp.grad_acc(b.id).array() += g.array() * tp.value(a.id).array();
  });
}

/// Elementwise quotient.
inline Var div(Var a, Var b) {
  detail::check_same_shape(a, b, "div");
  Tape& t = *a.tape;
  const bool rg = detail::any_grad({a, b});
  return t.push((a.value().array() / b.value().array()).matrix(), rg, [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    const auto& bv = tp.value(b.id).array();
    if (tp.requires_grad(a.id)) tp.grad_acc(a.id).array() += g.array() / bv;
    if (tp.requires_grad(b.id)) tp.grad_acc(b.id).array() -= g.array() * tp.value(self).array() / bv;
  });
}

inline Var scale(Var a, double s) {
  return detail::unary(a, a.value() * s, [s](const Mat& x, const Mat&) { return Mat::Constant(x.rows(), x.cols(), s); });
}

inline Var add_scalar(Var a, double c) {
  return detail::unary(a, (a.value().array() + c).matrix(),
                       [](const Mat& x, const Mat&) { return Mat::Ones(x.rows(), x.cols()); });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator-(Var a) { return scale(a, -1.0); }

/// a (r x k) * b (k x c).
inline Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), ErrorKind::invalid_argument, "matmul: inner dimension mismatch");
  Tape& t = *a.tape;
  const bool rg = detail::any_grad({a, b});
  return t.push(a.value() * b.value(), rg, [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad_acc(a.id).noalias() += g * tp.value(b.id).transpose();
    if (tp.requires_grad(b.id)) tp.grad_acc(b.id).noalias() += tp.value(a.id).transpose() * g;
  });
}

/// x (r x in) * w^T (w is out x in) + b (1 x out), i.e. a dense layer over rows.
inline Var linear(Var x, Var w, Var b) {
  require(x.cols() == w.cols() && b.rows() == 1 && b.cols() == w.rows(), ErrorKind::invalid_argument,
          "linear: shape mismatch");
  Tape& t = *x.tape;
  Mat out = x.value() * w.value().transpose();
  out.rowwise() += b.value().row(0);
  const bool rg = detail::any_grad({x, w, b});
  return t.push(std::move(out), rg, [x, w, b](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    if (tp.requires_grad(x.id)) tp.grad_acc(x.id).noalias() += g * tp.value(w.id);
    if (tp.requires_grad(w.id)) tp.grad_acc(w.id).noalias() += g.transpose() * tp.value(x.id);
    if (tp.requires_grad(b.id)) tp.grad_acc(b.id) += g.colwise().sum();
  });
}

/// Adds a (1 x c) row to every row of a.
inline Var add_row(Var a, Var row) {
  require(row.rows() == 1 && row.cols() == a.cols(), ErrorKind::invalid_argument, "add_row: shape mismatch");
  Tape& t = *a.tape;
  Mat out = a.value();
  out.rowwise() += row.value().row(0);
  const bool rg = detail::any_grad({a, row});
  return t.push(std::move(out), rg, [a, row](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad_acc(a.id) += g;
    if (tp.requires_grad(row.id)) tp.grad_acc(row.id) += g.colwise().sum();
  });
}

/// Adds an (r x 1) column to every column of a.
inline Var add_col(Var a, Var col) {
  require(col.cols() == 1 && col.rows() == a.rows(), ErrorKind::invalid_argument, "add_col: shape mismatch");
  Tape& t = *a.tape;
  Mat out = a.value();
  out.colwise() += col.value().col(0);
  const bool rg = detail::any_grad({a, col});
  return t.push(std::move(out), rg, [a, col](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad_acc(a.id) += g;
    if (tp.requires_grad(col.id)) tp.grad_acc(col.id) += g.rowwise().sum();
  });
}

inline Var tanh(Var a) {
  return detail::unary(a, a.value().array().tanh().matrix(),
                       [](const Mat&, const Mat& y) { return (1.0 - y.array().square()).matrix(); });
}

inline Var relu(Var a) {
  return detail::unary(a, a.value().cwiseMax(0.0),
                       [](const Mat& x, const Mat&) { return (x.array() > 0.0).cast<double>().matrix(); });
}

inline Var sigmoid(Var a) {
  Mat y = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return detail::unary(a, std::move(y),
                       [](const Mat&, const Mat& y) { return (y.array() * (1.0 - y.array())).matrix(); });
}

/// log(1 + e^x), evaluated without overflow.
inline Var softplus(Var a) {
  Mat y = a.value().unaryExpr([](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); });
  return detail::unary(a, std::move(y), [](const Mat& x, const Mat&) {
    return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  });
}

inline Var exp(Var a) {
  return detail::unary(a, a.value().array().exp().matrix(), [](const Mat&, const Mat& y) { return y; });
}

inline Var log(Var a) {
  return detail::unary(a, a.value().array().log().matrix(),
                       [](const Mat& x, const Mat&) { return x.array().inverse().matrix(); });
}

inline Var sqrt(Var a) {
  return detail::unary(a, a.value().array().sqrt().matrix(),
                       [](const Mat&, const Mat& y) { return (0.5 / y.array()).matrix(); });
}

inline Var square(Var a) {
  return detail::unary(a, a.value().array().square().matrix(), [](const Mat& x, const Mat&) { return (2.0 * x).eval(); });
}

/// Scalar sum of all entries.
inline Var sum(Var a) {
  Tape& t = *a.tape;
  const bool rg = t.requires_grad(a.id);
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), rg, [a](Tape& tp, int self) {
    tp.grad_acc(a.id).array() += tp.grad(self)(0, 0);
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Sum across columns: (r x c) -> (r x 1).
inline Var row_sum(Var a) {
  Tape& t = *a.tape;
  const bool rg = t.requires_grad(a.id);
  return t.push(a.value().rowwise().sum(), rg, [a](Tape& tp, int self) {
    tp.grad_acc(a.id).colwise() += tp.grad(self).col(0);
  });
}

/// Mean over consecutive groups of `group` rows: (g*m x c) -> (m x c).
inline Var segment_mean(Var a, Eigen::Index group) {
  require(group > 0 && a.rows() % group == 0, ErrorKind::invalid_argument, "segment_mean: rows not divisible");
  const Eigen::Index m = a.rows() / group;
  Mat out = Mat::Zero(m, a.cols());
  const Mat& x = a.value();
  for (Eigen::Index s = 0; s < m; ++s) out.row(s) = x.middleRows(s * group, group).colwise().mean();
  Tape& t = *a.tape;
  const bool rg = t.requires_grad(a.id);
  return t.push(std::move(out), rg, [a, group, m](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    Mat& ga = tp.grad_acc(a.id);
    const double inv = 1.0 / static_cast<double>(group);
    for (Eigen::Index s = 0; s < m; ++s)
      for (Eigen::Index r = 0; r < group; ++r) ga.row(s * group + r) += inv * g.row(s);
  });
}

/// Row gather; gradients scatter-add back to the source rows.
inline Var gather_rows(Var a, std::vector<int> idx) {
  Mat out(static_cast<Eigen::Index>(idx.size()), a.cols());
  const Mat& x = a.value();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < x.rows(), ErrorKind::invalid_argument, "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.row(idx[i]);
  }
  Tape& t = *a.tape;
  const bool rg = t.requires_grad(a.id);
  return t.push(std::move(out), rg, [a, idx = std::move(idx)](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    Mat& ga = tp.grad_acc(a.id);
    for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

inline Var concat_cols(Var a, Var b) {
  require(a.rows() == b.rows(), ErrorKind::invalid_argument, "concat_cols: row mismatch");
  Mat out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  Tape& t = *a.tape;
  const bool rg = detail::any_grad({a, b});
  const Eigen::Index ca = a.cols();
  return t.push(std::move(out), rg, [a, b, ca](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad_acc(a.id) += g.leftCols(ca);
    if (tp.requires_grad(b.id)) tp.grad_acc(b.id) += g.rightCols(g.cols() - ca);
  });
}

inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), ErrorKind::invalid_argument, "slice_cols: out of range");
  Tape& t = *a.tape;
  const bool rg = t.requires_grad(a.id);
  return t.push(a.value().middleCols(start, count), rg, [a, start, count](Tape& tp, int self) {
    tp.grad_acc(a.id).middleCols(start, count) += tp.grad(self);
  });
}

/// Row-major reshape.
inline Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  require(rows * cols == a.value().size(), ErrorKind::invalid_argument, "reshape: size mismatch");
  Mat out = Eigen::Map<const Mat>(a.value().data(), rows, cols);
  Tape& t = *a.tape;
  const bool rg = t.requires_grad(a.id);
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  return t.push(std::move(out), rg, [a, r0, c0](Tape& tp, int self) {
    tp.grad_acc(a.id) += Eigen::Map<const Mat>(tp.grad(self).data(), r0, c0);
  });
}

/// log(sum(exp(row))) per row, stabilized by the row max: (r x c) -> (r x 1).
inline Var row_logsumexp(Var a) {
  const Mat& x = a.value();
  Mat out(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out(r, 0) = m + std::log((x.row(r).array() - m).exp().sum());
  }
  Tape& t = *a.tape;
  const bool rg = t.requires_grad(a.id);
  return t.push(std::move(out), rg, [a](Tape& tp, int self) {
    const Mat& x = tp.value(a.id);
    const Mat& y = tp.value(self);
    const Mat& g = tp.grad(self);
    Mat& ga = tp.grad_acc(a.id);
    for (Eigen::Index r = 0; r < x.rows(); ++r) ga.row(r).array() += g(r, 0) * (x.row(r).array() - y(r, 0)).exp();
  });
}

inline Var log_softmax_rows(Var a) { return add_col(a, -row_logsumexp(a)); }

/// Picks entries (row, col) into an (m x 1) column.
inline Var pick(Var a, std::vector<std::pair<int, int>> at) {
  Mat out(static_cast<Eigen::Index>(at.size()), 1);
  for (std::size_t i = 0; i < at.size(); ++i) out(static_cast<Eigen::Index>(i), 0) = a.value()(at[i].first, at[i].second);
  Tape& t = *a.tape;
  const bool rg = t.requires_grad(a.id);
  return t.push(std::move(out), rg, [a, at = std::move(at)](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    Mat& ga = tp.grad_acc(a.id);
    for (std::size_t i = 0; i < at.size(); ++i) ga(at[i].first, at[i].second) += g(static_cast<Eigen::Index>(i), 0);
  });
}

inline Var min(Var a, Var b) {
  detail::check_same_shape(a, b, "min");
  Tape& t = *a.tape;
  const bool rg = detail::any_grad({a, b});
  return t.push(a.value().cwiseMin(b.value()), rg, [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    const auto take_a = (tp.value(a.id).array() <= tp.value(b.id).array()).cast<double>();
    if (tp.requires_grad(a.id)) tp.grad_acc(a.id).array() += g.array() * take_a;
    if (tp.requires_grad(b.id)) tp.grad_acc(b.id).array() += g.array() * (1.0 - take_a);
  });
}

/// Clamp to [lo, hi]; zero gradient outside the interval.
inline Var clip(Var a, double lo, double hi) {
  return detail::unary(a, a.value().cwiseMax(lo).cwiseMin(hi), [lo, hi](const Mat& x, const Mat&) {
    return ((x.array() >= lo) && (x.array() <= hi)).cast<double>().matrix();
  });
}

/// Pearson correlation between row u and row v of x for every listed pair,
/// computed across columns: -> (m x 1). `stabilizer` is added to each
/// centered squared norm; zero reproduces the textbook coefficient.
inline Var pearson_pairs(Var x, std::vector<std::pair<int, int>> pairs, double stabilizer = 0.0) {
  const Mat& v = x.value();
  const Eigen::Index d = v.cols();
  Mat centered = v.colwise() - v.rowwise().mean();
  Eigen::VectorXd norms(v.rows());
  for (Eigen::Index r = 0; r < v.rows(); ++r) norms(r) = std::sqrt(centered.row(r).squaredNorm() + stabilizer);
  Mat out(static_cast<Eigen::Index>(pairs.size()), 1);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto [a, b] = pairs[i];
    out(static_cast<Eigen::Index>(i), 0) = centered.row(a).dot(centered.row(b)) / (norms(a) * norms(b));
  }
  (void)d;
  Tape& t = *x.tape;
  const bool rg = t.requires_grad(x.id);
  return t.push(std::move(out), rg,
                [x, pairs = std::move(pairs), centered = std::move(centered), norms = std::move(norms)](Tape& tp, int self) {
                  const Mat& g = tp.grad(self);
                  const Mat& r = tp.value(self);
                  Mat& gx = tp.grad_acc(x.id);
                  for (std::size_t i = 0; i < pairs.size(); ++i) {
                    const auto [a, b] = pairs[i];
                    const Eigen::Index k = static_cast<Eigen::Index>(i);
                    const double gi = g(k, 0);
                    if (gi == 0.0) continue;
                    const double na = norms(a), nb = norms(b), ri = r(k, 0);
                    // d r / d x_a = yc/(|xc||yc|) - r xc/|xc|^2; both terms are already mean-free.
                    RowVec da = centered.row(b) / (na * nb) - ri * centered.row(a) / (na * na);
                    RowVec db = centered.row(a) / (na * nb) - ri * centered.row(b) / (nb * nb);
                    if (a == b) {
                      gx.row(a) += gi * (da + db);
                    } else {
                      gx.row(a) += gi * da;
                      gx.row(b) += gi * db;
                    }
                  }
                });
}

}  // namespace aglo::ad
