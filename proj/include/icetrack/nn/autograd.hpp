#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "icetrack/errors.hpp"
#include "icetrack/rng.hpp"

namespace icetrack::nn {

using Mat = Eigen::MatrixXd;

// Reverse-mode autodiff over dense matrices. Graphs are built per forward
// pass and reference persistent parameter nodes; backward() runs once per
// graph. Single-threaded by contract.
struct Node {
  Mat value;
  Mat grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Var constant(Mat m) {
    auto n = std::make_shared<Node>();
    n->value = std::move(m);
    return Var(n);
  }

  static Var parameter(Mat m) {
    auto n = std::make_shared<Node>();
    n->value = std::move(m);
    n->requires_grad = true;
    return Var(n);
  }

  bool defined() const { return node_ != nullptr; }
  const Mat& value() const { return node_->value; }
  Mat& value() { return node_->value; }
  const Mat& grad() const { return node_->grad; }
  Mat& grad() { return node_->grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Var make_op(Mat value, std::vector<Var> parents, std::function<void(Node&)> back) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool req = false;
  for (const auto& p : parents) {
    n->parents.push_back(p.node());
    req = req || p.node()->requires_grad;
  }
  n->requires_grad = req;
  if (req) n->backward_fn = std::move(back);
  return Var(n);
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ShapeMismatch("matmul: inner dimensions differ");
  return detail::make_op(a.value() * b.value(), {a, b}, [a, b](Node& n) {
    a.node()->grad.noalias() += n.grad * b.value().transpose();
    b.node()->grad.noalias() += a.value().transpose() * n.grad;
  });
}

// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ShapeMismatch("matmul_nt: inner dimensions differ");
  return detail::make_op(a.value() * b.value().transpose(), {a, b}, [a, b](Node& n) {
    a.node()->grad.noalias() += n.grad * b.value();
    b.node()->grad.noalias() += n.grad.transpose() * a.value();
  });
}

inline Var add(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeMismatch("add: shapes differ");
  return detail::make_op(a.value() + b.value(), {a, b}, [a, b](Node& n) {
    a.node()->grad += n.grad;
    b.node()->grad += n.grad;
  });
}

// x + broadcast of a 1 x d row vector
inline Var add_rowvec(const Var& x, const Var& b) {
  if (b.rows() != 1 || x.cols() != b.cols()) throw ShapeMismatch("add_rowvec: bad bias shape");
  Mat v = x.value();
  v.rowwise() += b.value().row(0);
  return detail::make_op(std::move(v), {x, b}, [x, b](Node& n) {
    x.node()->grad += n.grad;
    b.node()->grad.row(0) += n.grad.colwise().sum();
  });
}

inline Var scale(const Var& x, double s) {
  return detail::make_op(x.value() * s, {x},
                         [x, s](Node& n) { x.node()->grad += s * n.grad; });
}

// GELU with the exact erf formulation.
inline Var gelu(const Var& x) {
  static constexpr double inv_sqrt2 = 0.70710678118654752440;
  static constexpr double inv_sqrt2pi = 0.39894228040143267794;
  Mat v = x.value().unaryExpr(
      [](double t) { return t * 0.5 * (1.0 + std::erf(t * inv_sqrt2)); });
  return detail::make_op(std::move(v), {x}, [x](Node& n) {
    const Mat& in = x.value();
    for (Eigen::Index i = 0; i < in.rows(); ++i) {
      for (Eigen::Index j = 0; j < in.cols(); ++j) {
        const double t = in(i, j);
        const double cdf = 0.5 * (1.0 + std::erf(t * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * t * t);
        x.node()->grad(i, j) += n.grad(i, j) * (cdf + t * pdf);
      }
    }
  });
}

inline Var softmax_rows(const Var& x) {
  Mat v = x.value();
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const double mx = v.row(i).maxCoeff();
    v.row(i) = (v.row(i).array() - mx).exp();
    v.row(i) /= v.row(i).sum();
  }
  return detail::make_op(std::move(v), {x}, [x](Node& n) {
    for (Eigen::Index i = 0; i < n.value.rows(); ++i) {
      const auto y = n.value.row(i);
      const auto gy = n.grad.row(i);
      const double dot = (gy.array() * y.array()).sum();
      x.node()->grad.row(i) += (y.array() * (gy.array() - dot)).matrix();
    }
  });
}

// Row-wise layer norm with learnable gain and bias (1 x d each).
inline Var layernorm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const Eigen::Index d = x.cols();
  if (gain.cols() != d || bias.cols() != d || gain.rows() != 1 || bias.rows() != 1)
    throw ShapeMismatch("layernorm: gain/bias must be 1 x d");
  Mat xhat(x.rows(), d);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.value().row(i).mean();
    const Eigen::RowVectorXd c = x.value().row(i).array() - mu;
    const double var = c.squaredNorm() / double(d);
    const double s = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = c * s;
    inv_std(i) = s;
  }
  Mat v = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  v.rowwise() += bias.value().row(0);
  return detail::make_op(
      std::move(v), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
        for (Eigen::Index i = 0; i < n.value.rows(); ++i) {
          const Eigen::RowVectorXd gxhat =
              (n.grad.row(i).array() * gain.value().row(0).array()).matrix();
          const double mean_g = gxhat.mean();
          const double mean_gx = (gxhat.array() * xhat.row(i).array()).mean();
          x.node()->grad.row(i) +=
              inv_std(i) *
              (gxhat.array() - mean_g - xhat.row(i).array() * mean_gx).matrix();
          gain.node()->grad.row(0) +=
              (n.grad.row(i).array() * xhat.row(i).array()).matrix();
          bias.node()->grad.row(0) += n.grad.row(i);
        }
      });
}

inline Var mean_rows(const Var& x) {
  Mat v = x.value().colwise().mean();
  const double r = double(x.rows());
  return detail::make_op(std::move(v), {x}, [x, r](Node& n) {
    x.node()->grad.rowwise() += (n.grad.row(0) / r).eval();
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw EmptyInput("concat_rows: no parts");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeMismatch("concat_rows: column counts differ");
    rows += p.rows();
  }
  Mat v(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return detail::make_op(std::move(v), parts, [parts](Node& n) {
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      p.node()->grad += n.grad.middleRows(at, p.rows());
      at += p.rows();
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw EmptyInput("concat_cols: no parts");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeMismatch("concat_cols: row counts differ");
    cols += p.cols();
  }
  Mat v(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return detail::make_op(std::move(v), parts, [parts](Node& n) {
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      p.node()->grad += n.grad.middleCols(at, p.cols());
      at += p.cols();
    }
  });
}

inline Var slice_rows(const Var& x, Eigen::Index r0, Eigen::Index nr) {
  if (r0 < 0 || r0 + nr > x.rows()) throw ShapeMismatch("slice_rows out of range");
  return detail::make_op(x.value().middleRows(r0, nr), {x}, [x, r0, nr](Node& n) {
    x.node()->grad.middleRows(r0, nr) += n.grad;
  });
}

inline Var slice_cols(const Var& x, Eigen::Index c0, Eigen::Index nc) {
  if (c0 < 0 || c0 + nc > x.cols()) throw ShapeMismatch("slice_cols out of range");
  return detail::make_op(x.value().middleCols(c0, nc), {x}, [x, c0, nc](Node& n) {
    x.node()->grad.middleCols(c0, nc) += n.grad;
  });
}

// Mean squared error against a constant target; 1 x 1 output.
inline Var mse(const Var& pred, const Mat& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw ShapeMismatch("mse: prediction and target shapes differ");
  const double n_elems = double(target.size());
  Mat v(1, 1);
  v(0, 0) = (pred.value() - target).squaredNorm() / n_elems;
  return detail::make_op(std::move(v), {pred}, [pred, target, n_elems](Node& n) {
    pred.node()->grad += (2.0 / n_elems) * n.grad(0, 0) * (pred.value() - target);
  });
}

inline Var add_scalars(const Var& a, const Var& b) { return add(a, b); }

// Inverted dropout; mask drawn from the provided stream.
inline Var dropout(const Var& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  Mat mask(x.rows(), x.cols());
  const double keep = 1.0 - p;
  for (Eigen::Index i = 0; i < mask.rows(); ++i)
    for (Eigen::Index j = 0; j < mask.cols(); ++j)
      mask(i, j) = rng.uniform() < keep ? 1.0 / keep : 0.0;
  return detail::make_op(x.value().cwiseProduct(mask), {x}, [x, mask](Node& n) {
    x.node()->grad += n.grad.cwiseProduct(mask);
  });
}

// Runs reverse-mode accumulation from a 1 x 1 loss node.
inline void backward(const Var& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) throw ShapeMismatch("backward expects a scalar loss");

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    std::size_t next;
  };
  std::vector<Frame> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node* p = f.n->parents[f.next++].get();
      if (visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->grad = Mat::Zero(n->value.rows(), n->value.cols());
  loss.node()->grad(0, 0) = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->requires_grad && n->backward_fn) n->backward_fn(*n);
  }
}

// Named trainable parameters in creation order.
class ParamStore {
 public:
  Var create(const std::string& name, Eigen::Index rows, Eigen::Index cols, double init_std,
             Rng& rng) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = init_std == 0.0 ? 0.0 : rng.normal() * init_std;
    return push(name, std::move(m));
  }

  Var create_const(const std::string& name, Eigen::Index rows, Eigen::Index cols, double fill) {
    return push(name, Mat::Constant(rows, cols, fill));
  }

  Var push(const std::string& name, Mat m) {
    items_.emplace_back(name, Var::parameter(std::move(m)));
    return items_.back().second;
  }

  const std::vector<std::pair<std::string, Var>>& items() const { return items_; }
  std::vector<std::pair<std::string, Var>>& items() { return items_; }

  Var find(const std::string& name) const {
    for (const auto& [n, v] : items_)
      if (n == name) return v;
    throw ConfigError("no parameter named '" + name + "'");
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [name, v] : items_) n += std::size_t(v.value().size());
    return n;
  }

  bool all_finite() const {
    for (const auto& [name, v] : items_)
      if (!v.value().allFinite()) return false;
    return true;
  }

  double grad_norm() const {
    double sq = 0.0;
    for (const auto& [name, v] : items_)
      if (v.node()->grad.size() > 0) sq += v.node()->grad.squaredNorm();
    return std::sqrt(sq);
  }

 private:
  std::vector<std::pair<std::string, Var>> items_;
};

}  // namespace icetrack::nn
