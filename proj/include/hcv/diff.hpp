#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hcv/error.hpp"

// =============================================================================
// Minimal reverse-mode differentiation over dense float64 matrices.
//
// A Graph is a single-shot tape: operations append nodes, backward() walks
// them in reverse once. Nodes are addressed by index, so a Var stays valid
// while the graph grows. Parameters live outside the graph; bind them as
// variables each step and read their gradients after backward().
// =============================================================================

namespace hcv::diff {

using Matrix = Eigen::MatrixXd;

class Graph;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// The single entry of a 1 x 1 node.
  double scalar() const;

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  /// Receives the upstream gradient of the node and pushes into its parents.
  using BackwardFn = std::function<void(Graph&, const Matrix&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, nullptr, "constant"); }
  Var variable(Matrix value) { return push(std::move(value), true, nullptr, "variable"); }

  /// Appends an operation result. `parents` decide whether it needs a gradient.
  Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn backward, const char* op) {
    bool needs = false;
    for (const auto& p : parents) {
      if (p.graph_ != this) throw InvalidInput(std::string(op) + ": operand belongs to another graph");
      needs = needs || nodes_[p.id_].needs_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{}, op);
  }

  void backward(const Var& root) {
    if (root.graph_ != this) throw InvalidInput("backward: root belongs to another graph");
    if (consumed_) throw Error("backward: tape already consumed; rebuild the graph");
    const auto& rv = nodes_[root.id_].value;
    if (rv.rows() != 1 || rv.cols() != 1) throw InvalidInput("backward: root must be a scalar");
    consumed_ = true;
    for (auto& node : nodes_) node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
    nodes_[root.id_].grad(0, 0) = 1.0;
    for (std::size_t i = root.id_ + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (node.backward && node.needs_grad) node.backward(*this, node.grad);
    }
  }

  /// Adds `contribution` to the gradient of `target` (used by backward functions).
  void accumulate(const Var& target, const Matrix& contribution) {
    auto& node = nodes_[target.id_];
    if (node.needs_grad) node.grad += contribution;
  }

  bool needs_grad(const Var& v) const { return nodes_[v.id_].needs_grad; }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const {
    if (!consumed_) throw Error("grad: backward has not run");
    return nodes_[id].grad;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    bool needs_grad = false;
  };

  Var push(Matrix value, bool needs_grad, BackwardFn backward, const char* op) {
    if (consumed_) throw Error(std::string(op) + ": tape already consumed");
    if (!value.allFinite()) throw NumericalError(std::string("non-finite value produced by ") + op);
    nodes_.push_back(Node{std::move(value), Matrix{}, std::move(backward), needs_grad});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline const Matrix& Var::value() const { return graph_->value(id_); }
inline const Matrix& Var::grad() const { return graph_->grad(id_); }
inline double Var::scalar() const {
  const auto& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw InvalidInput("scalar(): node is not 1 x 1");
  return v(0, 0);
}

namespace detail {

inline void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidInput(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                       std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) +
                       ")");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural operations
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  detail::same_shape(a, b, "add");
  return a.graph().record(a.value() + b.value(), {a, b}, [a, b](Graph& g, const Matrix& up) {
    g.accumulate(a, up);
    g.accumulate(b, up);
  }, "add");
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_shape(a, b, "sub");
  return a.graph().record(a.value() - b.value(), {a, b}, [a, b](Graph& g, const Matrix& up) {
    g.accumulate(a, up);
    g.accumulate(b, -up);
  }, "sub");
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
  detail::same_shape(a, b, "mul");
  return a.graph().record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Graph& g, const Matrix& up) {
    if (g.needs_grad(a)) g.accumulate(a, up.cwiseProduct(b.value()));
    if (g.needs_grad(b)) g.accumulate(b, up.cwiseProduct(a.value()));
  }, "mul");
}

inline Var scale(const Var& a, double factor) {
  return a.graph().record(a.value() * factor, {a}, [a, factor](Graph& g, const Matrix& up) {
    g.accumulate(a, up * factor);
  }, "scale");
}

inline Var add_scalar(const Var& a, double offset) {
  return a.graph().record(a.value().array() + offset, {a}, [a](Graph& g, const Matrix& up) {
    g.accumulate(a, up);
  }, "add_scalar");
}

/// a (n x p) plus the row vector `row` (1 x p) on every row.
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw InvalidInput("add_row: row vector shape mismatch");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.graph().record(std::move(out), {a, row}, [a, row](Graph& g, const Matrix& up) {
    g.accumulate(a, up);
    if (g.needs_grad(row)) g.accumulate(row, up.colwise().sum());
  }, "add_row");
}

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw InvalidInput("matmul: inner dimensions differ");
  return a.graph().record(a.value() * b.value(), {a, b}, [a, b](Graph& g, const Matrix& up) {
    if (g.needs_grad(a)) g.accumulate(a, up * b.value().transpose());
    if (g.needs_grad(b)) g.accumulate(b, a.value().transpose() * up);
  }, "matmul");
}

/// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw InvalidInput("matmul_nt: inner dimensions differ");
  return a.graph().record(a.value() * b.value().transpose(), {a, b}, [a, b](Graph& g, const Matrix& up) {
    if (g.needs_grad(a)) g.accumulate(a, up * b.value());
    if (g.needs_grad(b)) g.accumulate(b, up.transpose() * a.value());
  }, "matmul_nt");
}

inline Var tanh(const Var& a) {
  Matrix out = a.value().array().tanh();
  return a.graph().record(std::move(out), {a}, [a](Graph& g, const Matrix& up) {
    const auto t = a.value().array().tanh();
    g.accumulate(a, (up.array() * (1.0 - t.square())).matrix());
  }, "tanh");
}

/// log(1 + e^x), evaluated without overflow.
inline Var softplus(const Var& a) {
  Matrix out = a.value().unaryExpr([](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
  return a.graph().record(std::move(out), {a}, [a](Graph& g, const Matrix& up) {
    const Matrix sig = a.value().unaryExpr([](double x) {
      return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
    g.accumulate(a, up.cwiseProduct(sig));
  }, "softplus");
}

inline Var exp(const Var& a) {
  Matrix out = a.value().array().exp();
  return a.graph().record(std::move(out), {a}, [a](Graph& g, const Matrix& up) {
    g.accumulate(a, (up.array() * a.value().array().exp()).matrix());
  }, "exp");
}

inline Var square(const Var& a) {
  return a.graph().record(a.value().array().square(), {a}, [a](Graph& g, const Matrix& up) {
    g.accumulate(a, (2.0 * up.array() * a.value().array()).matrix());
  }, "square");
}

/// Elementwise clamp to [lo, hi]; the gradient is zero where clamping is active.
inline Var clamp(const Var& a, double lo, double hi) {
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  return a.graph().record(std::move(out), {a}, [a, lo, hi](Graph& g, const Matrix& up) {
    const auto inside = (a.value().array() >= lo && a.value().array() <= hi).cast<double>();
    g.accumulate(a, (up.array() * inside).matrix());
  }, "clamp");
}

/// Sum of all entries (1 x 1).
inline Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.graph().record(std::move(out), {a}, [a](Graph& g, const Matrix& up) {
    g.accumulate(a, Matrix::Constant(a.rows(), a.cols(), up(0, 0)));
  }, "sum");
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Row sums (n x 1).
inline Var row_sum(const Var& a) {
  Matrix out = a.value().rowwise().sum();
  return a.graph().record(std::move(out), {a}, [a](Graph& g, const Matrix& up) {
    g.accumulate(a, up.col(0).replicate(1, a.cols()));
  }, "row_sum");
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 1 || start + count > a.cols()) throw InvalidInput("slice_cols: range out of bounds");
  Matrix out = a.value().middleCols(start, count);
  return a.graph().record(std::move(out), {a}, [a, start, count](Graph& g, const Matrix& up) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    full.middleCols(start, count) = up;
    g.accumulate(a, full);
  }, "slice_cols");
}

inline Var concat_cols(const Var& a, const Var& b) {
  if (a.rows() != b.rows()) throw InvalidInput("concat_cols: row counts differ");
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph& g, const Matrix& up) {
    if (g.needs_grad(a)) g.accumulate(a, up.leftCols(a.cols()));
    if (g.needs_grad(b)) g.accumulate(b, up.rightCols(b.cols()));
  }, "concat_cols");
}

/// D_ij = ||a_i - a_j||^2 over the rows of a (n x n). The diagonal is exactly 0.
inline Var pairwise_sq_dists(const Var& a) {
  const Matrix& x = a.value();
  const Eigen::Index n = x.rows();
  const Matrix cols = x.transpose();
  Matrix out(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    out(j, j) = 0.0;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      const double d = (cols.col(i) - cols.col(j)).squaredNorm();
      out(i, j) = d;
      out(j, i) = d;
    }
  }
  return a.graph().record(std::move(out), {a}, [a](Graph& g, const Matrix& up) {
    // d/da_i = sum_j 2 (G_ij + G_ji) (a_i - a_j)
    const Matrix s = up + up.transpose();
    const Eigen::VectorXd weight = s.rowwise().sum();
    g.accumulate(a, 2.0 * (weight.asDiagonal() * a.value() - s * a.value()));
  }, "pairwise_sq_dists");
}

// ---------------------------------------------------------------------------
// Kernel statistics built from graph operations
// ---------------------------------------------------------------------------

/// exp(-gamma * ||z_i - z_j||^2); gamma is a constant of the graph.
inline Var gaussian_gram(const Var& z, double gamma) {
  if (!(gamma > 0.0)) throw InvalidInput("gaussian_gram: gamma must be positive");
  return exp(scale(pairwise_sq_dists(z), -gamma));
}

/// Three-term HSIC V-statistic from two Gram nodes.
inline Var hsic_v(const Var& k, const Var& l) {
  detail::same_shape(k, l, "hsic_v");
  const double n = static_cast<double>(k.rows());
  const Var t1 = scale(sum(mul(k, l)), 1.0 / (n * n));
  const Var t2 = scale(mul(sum(k), sum(l)), 1.0 / (n * n * n * n));
  const Var t3 = scale(sum(mul(row_sum(k), row_sum(l))), 2.0 / (n * n * n));
  return sub(add(t1, t2), t3);
}

/// d-variable HSIC V-statistic from d Gram nodes.
inline Var dhsic_v(std::span<const Var> grams) {
  if (grams.size() < 2) throw InvalidInput("dhsic_v: need at least 2 Gram matrices");
  const double n = static_cast<double>(grams.front().rows());
  Var joint = grams[0];
  Var rows = row_sum(grams[0]);
  Var means = scale(sum(grams[0]), 1.0 / (n * n));
  for (std::size_t j = 1; j < grams.size(); ++j) {
    detail::same_shape(grams[0], grams[j], "dhsic_v");
    joint = mul(joint, grams[j]);
    rows = mul(rows, row_sum(grams[j]));
    means = mul(means, scale(sum(grams[j]), 1.0 / (n * n)));
  }
  const double d = static_cast<double>(grams.size());
  const Var t1 = scale(sum(joint), 1.0 / (n * n));
  const Var t3 = scale(sum(rows), 2.0 / std::pow(n, d + 1.0));
  return sub(add(t1, means), t3);
}

// ---------------------------------------------------------------------------
// Gaussian helpers
// ---------------------------------------------------------------------------

/// mu + exp(log_var / 2) * noise. The noise is supplied by the caller.
inline Var reparameterized_gaussian_sample(const Var& mu, const Var& log_var, const Matrix& noise) {
  detail::same_shape(mu, log_var, "reparameterized_gaussian_sample");
  if (noise.rows() != mu.rows() || noise.cols() != mu.cols()) {
    throw InvalidInput("reparameterized_gaussian_sample: noise shape mismatch");
  }
  const Var eps = mu.graph().constant(noise);
  return add(mu, mul(exp(scale(log_var, 0.5)), eps));
}

/// Sum over all entries of log N(x; mu, exp(log_var)).
inline Var gaussian_log_density(const Matrix& x, const Var& mu, const Var& log_var) {
  detail::same_shape(mu, log_var, "gaussian_log_density");
  if (x.rows() != mu.rows() || x.cols() != mu.cols()) throw InvalidInput("gaussian_log_density: x shape mismatch");
  const Var xv = mu.graph().constant(x);
  const Var resid_sq = square(sub(xv, mu));
  const Var weighted = mul(resid_sq, exp(scale(log_var, -1.0)));
  const double constant = 1.8378770664093454836 * static_cast<double>(x.size());  // log(2*pi) per entry
  return scale(add_scalar(sum(add(log_var, weighted)), constant), -0.5);
}

/// Sum over all entries of KL(N(mu, exp(log_var)) || N(0, 1)).
inline Var kl_to_standard_normal(const Var& mu, const Var& log_var) {
  detail::same_shape(mu, log_var, "kl_to_standard_normal");
  const Var terms = sub(add(exp(log_var), square(mu)), log_var);
  return scale(add_scalar(sum(terms), -static_cast<double>(mu.value().size())), 0.5);
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------

enum class Activation { identity, tanh, softplus };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::softplus: return "softplus";
  }
  return "identity";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "tanh") return Activation::tanh;
  if (s == "softplus") return Activation::softplus;
  throw InvalidInput("unknown activation '" + s + "'");
}

/// y = act(x W^T + b) with W stored out x in and b stored 1 x out.
struct DenseLayer {
  Matrix weights;
  Matrix bias;
  Activation activation = Activation::identity;

  Eigen::Index in_dim() const { return weights.cols(); }
  Eigen::Index out_dim() const { return weights.rows(); }
};

/// Glorot-uniform weights and zero bias.
inline DenseLayer make_dense_layer(Eigen::Index in, Eigen::Index out, Activation act, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> uniform(-limit, limit);
  DenseLayer layer;
  layer.weights.resize(out, in);
  for (Eigen::Index i = 0; i < out; ++i) {
    for (Eigen::Index j = 0; j < in; ++j) layer.weights(i, j) = uniform(rng);
  }
  layer.bias = Matrix::Zero(1, out);
  layer.activation = act;
  return layer;
}

struct Mlp {
  std::vector<DenseLayer> layers;

  Eigen::Index in_dim() const { return layers.front().in_dim(); }
  Eigen::Index out_dim() const { return layers.back().out_dim(); }

  void validate() const {
    if (layers.empty()) throw InvalidInput("mlp: no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.bias.rows() != 1 || l.bias.cols() != l.out_dim()) throw InvalidInput("mlp: bias shape mismatch");
      if (i > 0 && l.in_dim() != layers[i - 1].out_dim()) {
        throw InvalidInput("mlp: layer " + std::to_string(i) + " input does not chain with previous output");
      }
    }
  }
};

/// Hidden layers use `hidden`; the last layer is linear.
inline Mlp make_mlp(Eigen::Index in, const std::vector<int>& widths, Eigen::Index out, Activation hidden,
                    std::mt19937_64& rng) {
  Mlp mlp;
  Eigen::Index prev = in;
  for (int w : widths) {
    mlp.layers.push_back(make_dense_layer(prev, w, hidden, rng));
    prev = w;
  }
  mlp.layers.push_back(make_dense_layer(prev, out, Activation::identity, rng));
  return mlp;
}

/// Graph handles for an Mlp's parameters for one step.
struct MlpVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
};

/// Binds parameters as variables (trainable) or constants (evaluation only).
inline MlpVars bind(Graph& g, const Mlp& mlp, bool trainable = true) {
  MlpVars vars;
  for (const auto& l : mlp.layers) {
    vars.weights.push_back(trainable ? g.variable(l.weights) : g.constant(l.weights));
    vars.biases.push_back(trainable ? g.variable(l.bias) : g.constant(l.bias));
  }
  return vars;
}

inline Var apply_activation(const Var& x, Activation act) {
  switch (act) {
    case Activation::identity: return x;
    case Activation::tanh: return tanh(x);
    case Activation::softplus: return softplus(x);
  }
  return x;
}

inline Var forward_mlp(const Mlp& mlp, const MlpVars& vars, const Var& input) {
  mlp.validate();
  if (input.cols() != mlp.in_dim()) {
    throw InvalidInput("forward_mlp: input has " + std::to_string(input.cols()) + " columns, network expects " +
                       std::to_string(mlp.in_dim()));
  }
  Var h = input;
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    h = apply_activation(add_row(matmul_nt(h, vars.weights[i]), vars.biases[i]), mlp.layers[i].activation);
  }
  return h;
}

/// Plain forward pass without a graph.
inline Matrix forward_values(const Mlp& mlp, const Matrix& input) {
  mlp.validate();
  if (input.cols() != mlp.in_dim()) throw InvalidInput("forward_values: input dimension mismatch");
  Matrix h = input;
  for (const auto& l : mlp.layers) {
    Matrix z = (h * l.weights.transpose()).rowwise() + l.bias.row(0);
    switch (l.activation) {
      case Activation::identity: break;
      case Activation::tanh: z = z.array().tanh(); break;
      case Activation::softplus:
        z = z.unaryExpr([](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
        break;
    }
    h = std::move(z);
  }
  if (!h.allFinite()) throw NumericalError("forward_values: non-finite output");
  return h;
}

/// Parameter matrices in checkpoint order: weight then bias for each layer.
inline std::vector<Matrix*> parameters(Mlp& mlp) {
  std::vector<Matrix*> out;
  for (auto& l : mlp.layers) {
    out.push_back(&l.weights);
    out.push_back(&l.bias);
  }
  return out;
}

inline std::vector<Matrix> gradients(const MlpVars& vars) {
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < vars.weights.size(); ++i) {
    out.push_back(vars.weights[i].grad());
    out.push_back(vars.biases[i].grad());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamOptions options;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  long step = 0;
};

/// One bias-corrected Adam descent step on `params` given `grads`.
inline void adam_step(std::span<Matrix* const> params, std::span<const Matrix> grads, AdamState& state) {
  if (params.size() != grads.size()) throw InvalidInput("adam_step: parameter and gradient counts differ");
  if (state.first_moment.empty()) {
    for (const Matrix* p : params) {
      state.first_moment.push_back(Matrix::Zero(p->rows(), p->cols()));
      state.second_moment.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (state.first_moment.size() != params.size()) throw InvalidInput("adam_step: state does not match parameters");
  ++state.step;
  const auto& o = state.options;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    const Matrix& g = grads[i];
    if (g.rows() != p.rows() || g.cols() != p.cols()) throw InvalidInput("adam_step: gradient shape mismatch");
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    m = o.beta1 * m + (1.0 - o.beta1) * g;
    v = o.beta2 * v + (1.0 - o.beta2) * g.cwiseProduct(g);
    p.array() -= o.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + o.eps);
  }
}

}  // namespace hcv::diff
