#pragma once

// Expression-graph differentiation over dense tensors.
//
// Graphs are immutable DAGs of shared nodes. `gradient` does not compute
// numbers: it returns new expressions built from the same primitive set, so
// the result can be evaluated, composed into a larger graph, and
// differentiated again (Hessian-vector products for meta-learning).
//
// Shape conventions: matrices are {rows, cols}, per-feature vectors are {d},
// scalars are {1}. Elementwise binary ops require identical shapes; the
// explicit broadcast_* nodes do all broadcasting.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hetfl/errors.hpp"
#include "hetfl/tensor.hpp"

namespace hetfl::ad {

enum class Op : std::uint8_t {
  Input,
  Constant,
  Add,
  Sub,
  Mul,
  MatMul,
  Relu,
  Tanh,
  Sigmoid,
  Log,
  Square,
  ReduceMean,
  SoftmaxCrossEntropy,
  Mse,
  BatchNormTrain,
  BatchNormEval,
  // Helper kinds; the backward rules above are written in terms of these.
  Neg,
  Scale,
  AddScalar,
  Reciprocal,
  Rsqrt,
  Exp,
  Step,
  Transpose,
  BroadcastRows,
  BroadcastCols,
  BroadcastScalar,
  SumRows,
  RowSum,
  SumAll,
  Softmax,
  SigmoidBce,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::MatMul: return "matmul";
    case Op::Relu: return "relu";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Log: return "log";
    case Op::Square: return "square";
    case Op::ReduceMean: return "reduce-mean";
    case Op::SoftmaxCrossEntropy: return "softmax-cross-entropy";
    case Op::Mse: return "mse";
    case Op::BatchNormTrain: return "batchnorm-train";
    case Op::BatchNormEval: return "batchnorm-eval";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add-scalar";
    case Op::Reciprocal: return "reciprocal";
    case Op::Rsqrt: return "rsqrt";
    case Op::Exp: return "exp";
    case Op::Step: return "step";
    case Op::Transpose: return "transpose";
    case Op::BroadcastRows: return "broadcast-rows";
    case Op::BroadcastCols: return "broadcast-cols";
    case Op::BroadcastScalar: return "broadcast-scalar";
    case Op::SumRows: return "sum-rows";
    case Op::RowSum: return "row-sum";
    case Op::SumAll: return "sum-all";
    case Op::Softmax: return "softmax";
    case Op::SigmoidBce: return "sigmoid-bce";
  }
  return "?";
}

using Shape = Tensor::Shape;

struct Node;
using NodePtr = std::shared_ptr<const Node>;

struct Node {
  Op op{};
  std::vector<NodePtr> args;
  Shape shape;
  std::string name;   // Input
  Tensor value;       // Constant
  double param = 0.0; // Scale factor, AddScalar offset, batch-norm epsilon
};

class Expr {
 public:
  Expr() = default;
  explicit Expr(NodePtr node) : node_(std::move(node)) {}

  [[nodiscard]] const Shape& shape() const { return node_->shape; }
  [[nodiscard]] Op op() const { return node_->op; }
  [[nodiscard]] const NodePtr& node() const { return node_; }
  [[nodiscard]] std::size_t numel() const { return Tensor::count(node_->shape); }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  NodePtr node_;
};

using Bindings = std::unordered_map<std::string, Tensor>;
using GradientMap = std::map<std::string, Expr>;

inline constexpr double kBatchNormEpsilon = 1e-5;

namespace detail {

inline Expr make(Op op, std::vector<NodePtr> args, Shape shape, double param = 0.0) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->args = std::move(args);
  n->shape = std::move(shape);
  n->param = param;
  return Expr(std::move(n));
}

inline void require(bool ok, Op op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op_name(op)) + ": " + what);
}

inline void same_shape(Op op, const Expr& a, const Expr& b) {
  require(a.shape() == b.shape(), op,
          "operand shapes differ " + Tensor::shape_string(a.shape()) + " vs " + Tensor::shape_string(b.shape()));
}

inline void is_matrix(Op op, const Expr& a) {
  require(a.shape().size() == 2, op, "expects a matrix, got " + Tensor::shape_string(a.shape()));
}

inline void is_feature_vector(Op op, const Expr& v, std::size_t d) {
  require(v.shape() == Shape{d}, op,
          "expects a vector of length " + std::to_string(d) + ", got " + Tensor::shape_string(v.shape()));
}

}  // namespace detail

// ---- construction ---------------------------------------------------------

inline Expr input(std::string name, Shape shape) {
  if (name.empty()) throw GraphError("input name must be nonempty");
  Tensor probe(shape);  // validates extents
  auto n = std::make_shared<Node>();
  n->op = Op::Input;
  n->name = std::move(name);
  n->shape = std::move(shape);
  return Expr(std::move(n));
}

inline Expr constant(Tensor value) {
  if (value.empty()) throw ShapeError("constant: empty tensor");
  auto n = std::make_shared<Node>();
  n->op = Op::Constant;
  n->shape = value.shape();
  n->value = std::move(value);
  return Expr(std::move(n));
}

inline Expr add(const Expr& a, const Expr& b) {
  detail::same_shape(Op::Add, a, b);
  return detail::make(Op::Add, {a.node(), b.node()}, a.shape());
}

inline Expr sub(const Expr& a, const Expr& b) {
  detail::same_shape(Op::Sub, a, b);
  return detail::make(Op::Sub, {a.node(), b.node()}, a.shape());
}

inline Expr mul(const Expr& a, const Expr& b) {
  detail::same_shape(Op::Mul, a, b);
  return detail::make(Op::Mul, {a.node(), b.node()}, a.shape());
}

inline Expr matmul(const Expr& a, const Expr& b) {
  detail::is_matrix(Op::MatMul, a);
  detail::is_matrix(Op::MatMul, b);
  detail::require(a.shape()[1] == b.shape()[0], Op::MatMul,
                  "inner extents differ " + Tensor::shape_string(a.shape()) + " x " + Tensor::shape_string(b.shape()));
  return detail::make(Op::MatMul, {a.node(), b.node()}, {a.shape()[0], b.shape()[1]});
}

inline Expr unary(Op op, const Expr& a, double param = 0.0) {
  return detail::make(op, {a.node()}, a.shape(), param);
}

inline Expr relu(const Expr& a) { return unary(Op::Relu, a); }
inline Expr tanh(const Expr& a) { return unary(Op::Tanh, a); }
inline Expr sigmoid(const Expr& a) { return unary(Op::Sigmoid, a); }
inline Expr log(const Expr& a) { return unary(Op::Log, a); }
inline Expr square(const Expr& a) { return unary(Op::Square, a); }
inline Expr neg(const Expr& a) { return unary(Op::Neg, a); }
inline Expr scale(const Expr& a, double c) { return unary(Op::Scale, a, c); }
inline Expr add_scalar(const Expr& a, double c) { return unary(Op::AddScalar, a, c); }
inline Expr reciprocal(const Expr& a) { return unary(Op::Reciprocal, a); }
inline Expr rsqrt(const Expr& a) { return unary(Op::Rsqrt, a); }
inline Expr exp(const Expr& a) { return unary(Op::Exp, a); }
// Heaviside step with step(0) = 0; the derivative of relu.
inline Expr step(const Expr& a) { return unary(Op::Step, a); }

inline Expr reduce_mean(const Expr& a) { return detail::make(Op::ReduceMean, {a.node()}, {1}); }
inline Expr sum_all(const Expr& a) { return detail::make(Op::SumAll, {a.node()}, {1}); }

inline Expr transpose(const Expr& a) {
  detail::is_matrix(Op::Transpose, a);
  return detail::make(Op::Transpose, {a.node()}, {a.shape()[1], a.shape()[0]});
}

// {d} -> {rows, d}
inline Expr broadcast_rows(const Expr& v, std::size_t rows) {
  detail::require(v.shape().size() == 1 && rows > 0, Op::BroadcastRows, "expects a vector");
  return detail::make(Op::BroadcastRows, {v.node()}, {rows, v.shape()[0]});
}

// {rows} -> {rows, cols}
inline Expr broadcast_cols(const Expr& v, std::size_t cols) {
  detail::require(v.shape().size() == 1 && cols > 0, Op::BroadcastCols, "expects a vector");
  return detail::make(Op::BroadcastCols, {v.node()}, {v.shape()[0], cols});
}

// {1} -> shape
inline Expr broadcast_scalar(const Expr& s, Shape shape) {
  detail::require(s.numel() == 1, Op::BroadcastScalar, "expects a scalar");
  Tensor probe(shape);
  return detail::make(Op::BroadcastScalar, {s.node()}, std::move(shape));
}

// {rows, d} -> {d}
inline Expr sum_rows(const Expr& a) {
  detail::is_matrix(Op::SumRows, a);
  return detail::make(Op::SumRows, {a.node()}, {a.shape()[1]});
}

// {rows, cols} -> {rows}
inline Expr row_sum(const Expr& a) {
  detail::is_matrix(Op::RowSum, a);
  return detail::make(Op::RowSum, {a.node()}, {a.shape()[0]});
}

inline Expr softmax(const Expr& logits) {
  detail::is_matrix(Op::Softmax, logits);
  return detail::make(Op::Softmax, {logits.node()}, logits.shape());
}

// Mean over rows of -sum_c labels[r,c] * log softmax(logits)[r,c]. Labels are
// one-hot (or soft) rows and are treated as data: they must not depend on a
// differentiated input.
inline Expr softmax_cross_entropy(const Expr& logits, const Expr& labels) {
  detail::is_matrix(Op::SoftmaxCrossEntropy, logits);
  detail::same_shape(Op::SoftmaxCrossEntropy, logits, labels);
  return detail::make(Op::SoftmaxCrossEntropy, {logits.node(), labels.node()}, {1});
}

// Mean over all elements of (prediction - target)^2.
inline Expr mse(const Expr& prediction, const Expr& target) {
  detail::same_shape(Op::Mse, prediction, target);
  return detail::make(Op::Mse, {prediction.node(), target.node()}, {1});
}

// Mean over all elements of the logistic loss of logits against {0,1} targets.
inline Expr sigmoid_bce(const Expr& logits, const Expr& targets) {
  detail::same_shape(Op::SigmoidBce, logits, targets);
  return detail::make(Op::SigmoidBce, {logits.node(), targets.node()}, {1});
}

// Normalizes each column with the batch mean and biased batch variance.
inline Expr batchnorm_train(const Expr& x, const Expr& gamma, const Expr& beta, double eps = kBatchNormEpsilon) {
  detail::is_matrix(Op::BatchNormTrain, x);
  const std::size_t d = x.shape()[1];
  detail::is_feature_vector(Op::BatchNormTrain, gamma, d);
  detail::is_feature_vector(Op::BatchNormTrain, beta, d);
  return detail::make(Op::BatchNormTrain, {x.node(), gamma.node(), beta.node()}, x.shape(), eps);
}

inline Expr batchnorm_eval(const Expr& x, const Expr& gamma, const Expr& beta, const Expr& running_mean,
                           const Expr& running_var, double eps = kBatchNormEpsilon) {
  detail::is_matrix(Op::BatchNormEval, x);
  const std::size_t d = x.shape()[1];
  for (const Expr* v : {&gamma, &beta, &running_mean, &running_var}) {
    detail::is_feature_vector(Op::BatchNormEval, *v, d);
  }
  return detail::make(Op::BatchNormEval,
                      {x.node(), gamma.node(), beta.node(), running_mean.node(), running_var.node()}, x.shape(),
                      eps);
}

inline Expr operator+(const Expr& a, const Expr& b) { return add(a, b); }
inline Expr operator-(const Expr& a, const Expr& b) { return sub(a, b); }
inline Expr operator*(const Expr& a, const Expr& b) { return mul(a, b); }
inline Expr operator-(const Expr& a) { return neg(a); }

// ---- evaluation -----------------------------------------------------------

namespace detail {

// Post-order over the DAG reachable from roots; each node appears once.
inline std::vector<const Node*> topological_order(const std::vector<const Node*>& roots) {
  std::vector<const Node*> order;
  std::unordered_map<const Node*, bool> seen;
  std::vector<std::pair<const Node*, std::size_t>> stack;
  for (const Node* r : roots) {
    if (seen.count(r)) continue;
    seen[r] = true;
    stack.emplace_back(r, 0);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->args.size()) {
        const Node* child = node->args[next++].get();
        if (!seen.count(child)) {
          seen[child] = true;
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }
  return order;
}

inline Tensor unary_map(const Tensor& a, double (*f)(double, double), double p) {
  Tensor out(a.shape());
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i], p);
  return out;
}

inline Tensor binary_map(const Tensor& a, const Tensor& b, double (*f)(double, double)) {
  Tensor out(a.shape());
  auto x = a.data();
  auto z = b.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i], z[i]);
  return out;
}

inline double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline Tensor compute(const Node& n, const std::vector<const Tensor*>& in) {
  const Tensor& a = *in[0];
  switch (n.op) {
    case Op::Add: return binary_map(a, *in[1], [](double x, double y) { return x + y; });
    case Op::Sub: return binary_map(a, *in[1], [](double x, double y) { return x - y; });
    case Op::Mul: return binary_map(a, *in[1], [](double x, double y) { return x * y; });
    case Op::MatMul: {
      const Tensor& b = *in[1];
      const std::size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
      Tensor out({m, p});
      auto A = a.data();
      auto B = b.data();
      auto C = out.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
          const double s = A[i * k + l];
          const double* brow = &B[l * p];
          double* crow = &C[i * p];
          for (std::size_t j = 0; j < p; ++j) crow[j] += s * brow[j];
        }
      }
      return out;
    }
    case Op::Relu: return unary_map(a, [](double x, double) { return x > 0 ? x : 0.0; }, 0);
    case Op::Step: return unary_map(a, [](double x, double) { return x > 0 ? 1.0 : 0.0; }, 0);
    case Op::Tanh: return unary_map(a, [](double x, double) { return std::tanh(x); }, 0);
    case Op::Sigmoid: return unary_map(a, [](double x, double) { return stable_sigmoid(x); }, 0);
    case Op::Log: return unary_map(a, [](double x, double) { return std::log(x); }, 0);
    case Op::Exp: return unary_map(a, [](double x, double) { return std::exp(x); }, 0);
    case Op::Square: return unary_map(a, [](double x, double) { return x * x; }, 0);
    case Op::Neg: return unary_map(a, [](double x, double) { return -x; }, 0);
    case Op::Scale: return unary_map(a, [](double x, double c) { return x * c; }, n.param);
    case Op::AddScalar: return unary_map(a, [](double x, double c) { return x + c; }, n.param);
    case Op::Reciprocal: return unary_map(a, [](double x, double) { return 1.0 / x; }, 0);
    case Op::Rsqrt: return unary_map(a, [](double x, double) { return 1.0 / std::sqrt(x); }, 0);
    case Op::ReduceMean: {
      double s = 0;
      for (double v : a.data()) s += v;
      return Tensor::scalar(s / static_cast<double>(a.numel()));
    }
    case Op::SumAll: {
      double s = 0;
      for (double v : a.data()) s += v;
      return Tensor::scalar(s);
    }
    case Op::Transpose: {
      const std::size_t r = a.shape()[0], c = a.shape()[1];
      Tensor out({c, r});
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
      return out;
    }
    case Op::BroadcastRows: {
      const std::size_t r = n.shape[0], c = n.shape[1];
      Tensor out(n.shape);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[j];
      return out;
    }
    case Op::BroadcastCols: {
      const std::size_t r = n.shape[0], c = n.shape[1];
      Tensor out(n.shape);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[i];
      return out;
    }
    case Op::BroadcastScalar: return Tensor(n.shape, a[0]);
    case Op::SumRows: {
      const std::size_t r = a.shape()[0], c = a.shape()[1];
      Tensor out({c});
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j] += a[i * c + j];
      return out;
    }
    case Op::RowSum: {
      const std::size_t r = a.shape()[0], c = a.shape()[1];
      Tensor out({r});
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i] += a[i * c + j];
      return out;
    }
    case Op::Softmax: {
      const std::size_t r = a.shape()[0], c = a.shape()[1];
      Tensor out(a.shape());
      for (std::size_t i = 0; i < r; ++i) {
        double m = a[i * c];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, a[i * c + j]);
        double s = 0;
        for (std::size_t j = 0; j < c; ++j) s += (out[i * c + j] = std::exp(a[i * c + j] - m));
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
      }
      return out;
    }
    case Op::SoftmaxCrossEntropy: {
      const Tensor& y = *in[1];
      const std::size_t r = a.shape()[0], c = a.shape()[1];
      double total = 0;
      for (std::size_t i = 0; i < r; ++i) {
        double m = a[i * c];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, a[i * c + j]);
        double s = 0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(a[i * c + j] - m);
        const double lse = m + std::log(s);
        for (std::size_t j = 0; j < c; ++j) total += y[i * c + j] * (lse - a[i * c + j]);
      }
      return Tensor::scalar(total / static_cast<double>(r));
    }
    case Op::Mse: {
      const Tensor& t = *in[1];
      double s = 0;
      for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = a[i] - t[i];
        s += d * d;
      }
      return Tensor::scalar(s / static_cast<double>(a.numel()));
    }
    case Op::SigmoidBce: {
      const Tensor& t = *in[1];
      double s = 0;
      for (std::size_t i = 0; i < a.numel(); ++i) s += softplus(a[i]) - a[i] * t[i];
      return Tensor::scalar(s / static_cast<double>(a.numel()));
    }
    case Op::BatchNormTrain: {
      const Tensor& gamma = *in[1];
      const Tensor& beta = *in[2];
      const std::size_t r = a.shape()[0], c = a.shape()[1];
      Tensor out(a.shape());
      for (std::size_t j = 0; j < c; ++j) {
        double mean = 0;
        for (std::size_t i = 0; i < r; ++i) mean += a[i * c + j];
        mean /= static_cast<double>(r);
        double var = 0;
        for (std::size_t i = 0; i < r; ++i) var += (a[i * c + j] - mean) * (a[i * c + j] - mean);
        var /= static_cast<double>(r);
        const double inv = 1.0 / std::sqrt(var + n.param);
        for (std::size_t i = 0; i < r; ++i) out[i * c + j] = (a[i * c + j] - mean) * inv * gamma[j] + beta[j];
      }
      return out;
    }
    case Op::BatchNormEval: {
      const Tensor& gamma = *in[1];
      const Tensor& beta = *in[2];
      const Tensor& rm = *in[3];
      const Tensor& rv = *in[4];
      const std::size_t r = a.shape()[0], c = a.shape()[1];
      Tensor out(a.shape());
      for (std::size_t j = 0; j < c; ++j) {
        const double inv = 1.0 / std::sqrt(rv[j] + n.param);
        for (std::size_t i = 0; i < r; ++i) out[i * c + j] = (a[i * c + j] - rm[j]) * inv * gamma[j] + beta[j];
      }
      return out;
    }
    case Op::Input:
    case Op::Constant: break;
  }
  throw GraphError("compute: unexpected node kind");
}

}  // namespace detail

// A fixed evaluation order for one or more roots. Reusable across bindings,
// which is what makes repeated finite-difference evaluations cheap.
class Program {
 public:
  explicit Program(std::vector<Expr> roots) : roots_(std::move(roots)) {
    std::vector<const Node*> raw;
    raw.reserve(roots_.size());
    for (const auto& r : roots_) {
      if (!r) throw GraphError("program root is empty");
      raw.push_back(r.node().get());
    }
    order_ = detail::topological_order(raw);
    std::unordered_map<const Node*, std::size_t> index;
    for (std::size_t i = 0; i < order_.size(); ++i) index[order_[i]] = i;
    args_.resize(order_.size());
    std::map<std::string, Shape> seen;
    for (std::size_t i = 0; i < order_.size(); ++i) {
      const Node* n = order_[i];
      for (const auto& a : n->args) args_[i].push_back(index.at(a.get()));
      if (n->op == Op::Input) {
        auto [it, fresh] = seen.emplace(n->name, n->shape);
        if (!fresh && it->second != n->shape) {
          throw GraphError("input '" + n->name + "' used with two different shapes");
        }
      }
    }
    inputs_.assign(seen.begin(), seen.end());
    for (const Node* r : raw) root_index_.push_back(index.at(r));
  }

  // Distinct inputs reachable from the roots, sorted by name.
  [[nodiscard]] const std::vector<std::pair<std::string, Shape>>& inputs() const noexcept { return inputs_; }

  [[nodiscard]] std::vector<Tensor> run(const Bindings& bindings) const {
    std::vector<Tensor> storage(order_.size());
    std::vector<const Tensor*> value(order_.size(), nullptr);
    std::vector<const Tensor*> in;
    for (std::size_t i = 0; i < order_.size(); ++i) {
      const Node& n = *order_[i];
      if (n.op == Op::Input) {
        auto it = bindings.find(n.name);
        if (it == bindings.end()) throw BindingError("unbound input '" + n.name + "'");
        if (it->second.shape() != n.shape) {
          throw BindingError("input '" + n.name + "' bound with shape " + Tensor::shape_string(it->second.shape()) +
                             ", expected " + Tensor::shape_string(n.shape));
        }
        value[i] = &it->second;
        continue;
      }
      if (n.op == Op::Constant) {
        value[i] = &n.value;
        continue;
      }
      in.clear();
      for (std::size_t a : args_[i]) in.push_back(value[a]);
      storage[i] = detail::compute(n, in);
      if (!storage[i].all_finite()) {
        throw NumericError(std::string("non-finite value produced by ") + std::string(op_name(n.op)));
      }
      value[i] = &storage[i];
    }
    std::vector<Tensor> out;
    out.reserve(root_index_.size());
    for (std::size_t r : root_index_) out.push_back(*value[r]);
    return out;
  }

 private:
  std::vector<Expr> roots_;
  std::vector<const Node*> order_;
  std::vector<std::vector<std::size_t>> args_;
  std::vector<std::size_t> root_index_;
  std::vector<std::pair<std::string, Shape>> inputs_;
};

inline Tensor evaluate(const Expr& root, const Bindings& bindings) { return Program({root}).run(bindings).front(); }

// ---- differentiation ------------------------------------------------------

namespace detail {

inline Expr arg(const Node& n, std::size_t i) { return Expr(n.args[i]); }

// Adds the vector-Jacobian contributions of `n` (output adjoint `g`) to its
// operands. Entries left empty contribute nothing.
inline std::vector<std::optional<Expr>> backward(const Node& n, const Expr& self, const Expr& g,
                                                 const std::vector<bool>& arg_needs) {
  std::vector<std::optional<Expr>> out(n.args.size());
  auto want = [&](std::size_t i) { return arg_needs[i]; };
  switch (n.op) {
    case Op::Add:
      if (want(0)) out[0] = g;
      if (want(1)) out[1] = g;
      break;
    case Op::Sub:
      if (want(0)) out[0] = g;
      if (want(1)) out[1] = neg(g);
      break;
    case Op::Mul:
      if (want(0)) out[0] = mul(g, arg(n, 1));
      if (want(1)) out[1] = mul(g, arg(n, 0));
      break;
    case Op::MatMul:
      if (want(0)) out[0] = matmul(g, transpose(arg(n, 1)));
      if (want(1)) out[1] = matmul(transpose(arg(n, 0)), g);
      break;
    case Op::Relu: out[0] = mul(g, step(arg(n, 0))); break;
    case Op::Step: break;
    case Op::Tanh: out[0] = sub(g, mul(g, square(self))); break;
    case Op::Sigmoid: out[0] = mul(g, sub(self, square(self))); break;
    case Op::Log: out[0] = mul(g, reciprocal(arg(n, 0))); break;
    case Op::Exp: out[0] = mul(g, self); break;
    case Op::Square: out[0] = scale(mul(g, arg(n, 0)), 2.0); break;
    case Op::Neg: out[0] = neg(g); break;
    case Op::Scale: out[0] = scale(g, n.param); break;
    case Op::AddScalar: out[0] = g; break;
    case Op::Reciprocal: out[0] = neg(mul(g, square(self))); break;
    case Op::Rsqrt: out[0] = scale(mul(g, mul(self, square(self))), -0.5); break;
    case Op::ReduceMean: {
      const Expr a = arg(n, 0);
      out[0] = broadcast_scalar(scale(g, 1.0 / static_cast<double>(a.numel())), a.shape());
      break;
    }
    case Op::SumAll: out[0] = broadcast_scalar(g, arg(n, 0).shape()); break;
    case Op::Transpose: out[0] = transpose(g); break;
    case Op::BroadcastRows: out[0] = sum_rows(g); break;
    case Op::BroadcastCols: out[0] = row_sum(g); break;
    case Op::BroadcastScalar: out[0] = sum_all(g); break;
    case Op::SumRows: out[0] = broadcast_rows(g, arg(n, 0).shape()[0]); break;
    case Op::RowSum: out[0] = broadcast_cols(g, arg(n, 0).shape()[1]); break;
    case Op::Softmax: out[0] = mul(self, sub(g, broadcast_cols(row_sum(mul(g, self)), n.shape[1]))); break;
    case Op::SoftmaxCrossEntropy: {
      if (want(1)) throw GraphError("softmax-cross-entropy labels cannot be differentiated");
      const Expr z = arg(n, 0);
      const double rows = static_cast<double>(z.shape()[0]);
      out[0] = mul(sub(softmax(z), arg(n, 1)), broadcast_scalar(scale(g, 1.0 / rows), z.shape()));
      break;
    }
    case Op::Mse: {
      const Expr p = arg(n, 0);
      const Expr dp =
          mul(sub(p, arg(n, 1)), broadcast_scalar(scale(g, 2.0 / static_cast<double>(p.numel())), p.shape()));
      if (want(0)) out[0] = dp;
      if (want(1)) out[1] = neg(dp);
      break;
    }
    case Op::SigmoidBce: {
      const Expr z = arg(n, 0);
      const Expr gs = broadcast_scalar(scale(g, 1.0 / static_cast<double>(z.numel())), z.shape());
      if (want(0)) out[0] = mul(sub(sigmoid(z), arg(n, 1)), gs);
      if (want(1)) out[1] = mul(neg(z), gs);
      break;
    }
    case Op::BatchNormTrain: {
      // Rebuild the normalization from primitives so the adjoint stays
      // differentiable.
      const Expr x = arg(n, 0), gamma = arg(n, 1);
      const std::size_t rows = x.shape()[0];
      const double inv_rows = 1.0 / static_cast<double>(rows);
      const Expr mean = scale(sum_rows(x), inv_rows);
      const Expr centered = sub(x, broadcast_rows(mean, rows));
      const Expr var = scale(sum_rows(square(centered)), inv_rows);
      const Expr inv_std = rsqrt(add_scalar(var, n.param));
      const Expr xhat = mul(centered, broadcast_rows(inv_std, rows));
      if (want(1)) out[1] = sum_rows(mul(g, xhat));
      if (want(2)) out[2] = sum_rows(g);
      if (want(0)) {
        const Expr gx = mul(g, broadcast_rows(gamma, rows));
        const Expr mean_gx = broadcast_rows(scale(sum_rows(gx), inv_rows), rows);
        const Expr mean_gx_xhat = broadcast_rows(scale(sum_rows(mul(gx, xhat)), inv_rows), rows);
        out[0] = mul(broadcast_rows(inv_std, rows), sub(sub(gx, mean_gx), mul(xhat, mean_gx_xhat)));
      }
      break;
    }
    case Op::BatchNormEval: {
      const Expr x = arg(n, 0), gamma = arg(n, 1), rm = arg(n, 3), rv = arg(n, 4);
      const std::size_t rows = x.shape()[0];
      const Expr inv_std = rsqrt(add_scalar(rv, n.param));
      const Expr centered = sub(x, broadcast_rows(rm, rows));
      const Expr g_sum = sum_rows(g);
      const Expr g_centered = sum_rows(mul(g, centered));
      if (want(0)) out[0] = mul(g, broadcast_rows(mul(gamma, inv_std), rows));
      if (want(1)) out[1] = mul(g_centered, inv_std);
      if (want(2)) out[2] = g_sum;
      if (want(3)) out[3] = neg(mul(g_sum, mul(gamma, inv_std)));
      if (want(4)) out[4] = scale(mul(g_centered, mul(gamma, mul(inv_std, square(inv_std)))), -0.5);
      break;
    }
    case Op::Input:
    case Op::Constant: break;
  }
  return out;
}

}  // namespace detail

enum class Unreachable {
  Error,  // a requested name that does not occur in the graph is an error
  Omit,   // silently leave it out of the result
};

// Reverse-mode gradient of a scalar root. The returned expressions are
// ordinary graph nodes; differentiating them again gives exact second
// derivatives.
inline GradientMap gradient(const Expr& root, const std::vector<std::string>& wrt,
                            Unreachable policy = Unreachable::Error) {
  if (!root) throw GraphError("gradient: empty root");
  if (root.numel() != 1) {
    throw GraphError("gradient: root must be scalar, got shape " + Tensor::shape_string(root.shape()));
  }
  const std::set<std::string> targets(wrt.begin(), wrt.end());
  const auto order = detail::topological_order({root.node().get()});
  std::unordered_map<const Node*, std::size_t> index;
  for (std::size_t i = 0; i < order.size(); ++i) index[order[i]] = i;

  std::vector<bool> needs(order.size(), false);
  std::map<std::string, Shape> found;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Node* n = order[i];
    if (n->op == Op::Input && targets.count(n->name)) {
      needs[i] = true;
      auto [it, fresh] = found.emplace(n->name, n->shape);
      if (!fresh && it->second != n->shape) throw GraphError("input '" + n->name + "' has inconsistent shapes");
    }
    for (const auto& a : n->args) needs[i] = needs[i] || needs[index.at(a.get())];
  }
  for (const auto& name : targets) {
    if (!found.count(name) && policy == Unreachable::Error) {
      throw GraphError("gradient: '" + name + "' is not reachable from the root");
    }
  }

  std::vector<std::optional<Expr>> adjoint(order.size());
  adjoint.back() = constant(Tensor(root.shape(), 1.0));
  GradientMap result;
  for (std::size_t k = order.size(); k-- > 0;) {
    if (!needs[k] || !adjoint[k]) continue;
    const Node& n = *order[k];
    if (n.op == Op::Input) {
      auto it = result.find(n.name);
      if (it == result.end()) {
        result.emplace(n.name, *adjoint[k]);
      } else {
        it->second = add(it->second, *adjoint[k]);
      }
      continue;
    }
    std::vector<bool> arg_needs;
    arg_needs.reserve(n.args.size());
    for (const auto& a : n.args) arg_needs.push_back(needs[index.at(a.get())]);
    // `self` must refer to the existing node so forward values are shared.
    const Expr self(order[k] == root.node().get() ? root.node() : NodePtr(root.node(), order[k]));
    auto contrib = detail::backward(n, self, *adjoint[k], arg_needs);
    for (std::size_t j = 0; j < n.args.size(); ++j) {
      if (!contrib[j] || !arg_needs[j]) continue;
      const std::size_t a = index.at(n.args[j].get());
      adjoint[a] = adjoint[a] ? add(*adjoint[a], *contrib[j]) : *contrib[j];
    }
  }
  for (const auto& [name, shape] : found) {
    if (!result.count(name)) result.emplace(name, constant(Tensor(shape, 0.0)));
  }
  return result;
}

// Max over every element of every input reachable from `root` of
// |analytic - central difference| / max(1, |central difference|).
inline double fd_check(const Expr& root, const Bindings& bindings, double eps) {
  if (!(eps > 0)) throw GraphError("fd_check: eps must be positive");
  if (root.numel() != 1) throw GraphError("fd_check: root must be scalar");
  const Program forward({root});
  std::vector<std::string> names;
  for (const auto& [name, shape] : forward.inputs()) names.push_back(name);
  if (names.empty()) {
    (void)forward.run(bindings);
    return 0.0;
  }
  const GradientMap grads = gradient(root, names);
  std::vector<Expr> grad_roots;
  for (const auto& name : names) grad_roots.push_back(grads.at(name));
  const auto analytic = Program(grad_roots).run(bindings);

  Bindings probe = bindings;
  double worst = 0.0;
  for (std::size_t p = 0; p < names.size(); ++p) {
    Tensor& t = probe.at(names[p]);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double saved = t[i];
      t[i] = saved + eps;
      const double up = forward.run(probe).front().item();
      t[i] = saved - eps;
      const double down = forward.run(probe).front().item();
      t[i] = saved;
      const double central = (up - down) / (2.0 * eps);
      worst = std::max(worst, std::abs(analytic[p][i] - central) / std::max(1.0, std::abs(central)));
    }
  }
  return worst;
}

}  // namespace hetfl::ad
