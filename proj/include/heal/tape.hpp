#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "heal/error.hpp"
#include "heal/matrix.hpp"

namespace heal {

// Lower bound applied inside log_clamped and the cross-entropy path.
inline constexpr double kLogClamp = 1e-12;

enum class OpKind : std::uint8_t {
  constant_leaf,
  parameter_leaf,
  matmul,
  add,
  sub,
  hadamard,
  scale,
  relu,
  transpose,
  col_sum,
  sum_all,
  hconcat,
  row_softmax,
  log_clamped,
  cosine_anchors,
};

// Handle to a node on a Tape. Only meaningful together with the tape that
// produced it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

struct TapeNode {
  OpKind kind;
  std::array<int, 2> parents{-1, -1};
  double scalar = 0.0;   // scale factor for OpKind::scale
  int param_id = -1;     // registry index for parameter leaves
  DenseMatrix aux;       // detached anchor matrix for cosine_anchors
  DenseMatrix output;
};

// Gradients keyed by parameter id. Shapes always mirror the parameter.
class GradientStore {
 public:
  bool contains(int param_id) const { return grads_.count(param_id) > 0; }

  const DenseMatrix* find(int param_id) const {
    auto it = grads_.find(param_id);
    return it == grads_.end() ? nullptr : &it->second;
  }

  const DenseMatrix& at(int param_id) const {
    auto it = grads_.find(param_id);
    if (it == grads_.end())
      throw ContractError("GradientStore: no gradient recorded for parameter " +
                          std::to_string(param_id));
    return it->second;
  }

  void accumulate(int param_id, const DenseMatrix& g) {
    auto it = grads_.find(param_id);
    if (it == grads_.end())
      grads_.emplace(param_id, g);
    else
      add_in_place(it->second, g);
  }

  std::size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

 private:
  std::map<int, DenseMatrix> grads_;
};

// Define-by-run computation tape. Nodes are appended in execution order, so
// parent ids always precede their consumers and a single reverse sweep
// computes gradients for every parameter leaf.
//
// A tape is confined to one thread while being built and swept; completed
// output matrices may be read from anywhere.
class Tape {
 public:
  Var constant(DenseMatrix value) {
    TapeNode n{OpKind::constant_leaf};
    n.output = std::move(value);
    return push(std::move(n));
  }

  Var parameter(int param_id, const DenseMatrix& value) {
    if (param_id < 0) throw ContractError("parameter: id must be non-negative");
    TapeNode n{OpKind::parameter_leaf};
    n.param_id = param_id;
    n.output = value;
    return push(std::move(n));
  }

  Var matmul(Var a, Var b) {
    TapeNode n{OpKind::matmul};
    n.output = multiply(out(a), out(b));
    check_finite(n.output, "matmul");
    n.parents = {a.id, b.id};
    return push(std::move(n));
  }

  Var add(Var a, Var b) { return elementwise_binary(OpKind::add, a, b); }
  Var sub(Var a, Var b) { return elementwise_binary(OpKind::sub, a, b); }
  Var hadamard(Var a, Var b) { return elementwise_binary(OpKind::hadamard, a, b); }

  Var scale(Var a, double factor) {
    if (!std::isfinite(factor)) throw ContractError("scale: factor must be finite");
    const DenseMatrix& x = out(a);
    TapeNode n{OpKind::scale};
    n.scalar = factor;
    n.output = x;
    for (double& v : n.output.values()) v *= factor;
    n.parents = {a.id, -1};
    return push(std::move(n));
  }

  Var relu(Var a) {
    const DenseMatrix& x = out(a);
    TapeNode n{OpKind::relu};
    n.output = x;
    for (double& v : n.output.values()) v = v > 0.0 ? v : 0.0;
    n.parents = {a.id, -1};
    return push(std::move(n));
  }

  Var transpose(Var a) {
    TapeNode n{OpKind::transpose};
    n.output = transposed(out(a));
    n.parents = {a.id, -1};
    return push(std::move(n));
  }

  // Sum over rows: r x c -> 1 x c.
  Var col_sum(Var a) {
    const DenseMatrix& x = out(a);
    if (x.rows() == 0) throw ContractError("col_sum: matrix has no rows");
    TapeNode n{OpKind::col_sum};
    n.output = DenseMatrix(1, x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) n.output(0, j) += x(i, j);
    check_finite(n.output, "col_sum");
    n.parents = {a.id, -1};
    return push(std::move(n));
  }

  // Sum of every entry: r x c -> 1 x 1.
  Var sum_all(Var a) {
    const DenseMatrix& x = out(a);
    if (x.empty()) throw ContractError("sum_all: matrix is empty");
    TapeNode n{OpKind::sum_all};
    n.output = DenseMatrix(1, 1);
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    n.output(0, 0) = acc;
    check_finite(n.output, "sum_all");
    n.parents = {a.id, -1};
    return push(std::move(n));
  }

  // Horizontal concatenation: r x c1, r x c2 -> r x (c1+c2).
  Var hconcat(Var a, Var b) {
    const DenseMatrix& x = out(a);
    const DenseMatrix& y = out(b);
    if (x.rows() != y.rows())
      throw ShapeError("hconcat: row counts disagree (" + x.shape_str() + " vs " +
                       y.shape_str() + ")");
    TapeNode n{OpKind::hconcat};
    n.output = DenseMatrix(x.rows(), x.cols() + y.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      for (std::size_t j = 0; j < x.cols(); ++j) n.output(i, j) = x(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) n.output(i, x.cols() + j) = y(i, j);
    }
    n.parents = {a.id, b.id};
    return push(std::move(n));
  }

  // Row-wise softmax with max subtraction. Outputs are strictly positive and
  // each row sums to 1.
  Var row_softmax(Var a) {
    const DenseMatrix& x = out(a);
    if (x.cols() == 0) throw ContractError("row_softmax: matrix has no columns");
    TapeNode n{OpKind::row_softmax};
    n.output = DenseMatrix(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double mx = x(i, 0);
      for (std::size_t j = 1; j < x.cols(); ++j) mx = std::max(mx, x(i, j));
      double denom = 0.0;
      for (std::size_t j = 0; j < x.cols(); ++j) {
        const double e = std::exp(x(i, j) - mx);
        n.output(i, j) = e;
        denom += e;
      }
      for (std::size_t j = 0; j < x.cols(); ++j) n.output(i, j) /= denom;
    }
    check_finite(n.output, "row_softmax");
    n.parents = {a.id, -1};
    return push(std::move(n));
  }

  // ln(max(x, kLogClamp)); gradient is zero where the clamp is active.
  Var log_clamped(Var a) {
    const DenseMatrix& x = out(a);
    TapeNode n{OpKind::log_clamped};
    n.output = x;
    for (double& v : n.output.values()) v = std::log(v > kLogClamp ? v : kLogClamp);
    check_finite(n.output, "log_clamped");
    n.parents = {a.id, -1};
    return push(std::move(n));
  }

  // Cosine similarity of a 1 x d query against M detached anchor rows,
  // giving 1 x M. Anchors are cached inside the node and never receive
  // gradient. A query or anchor with norm below 1e-12 yields cosine 0 with
  // zero gradient.
  Var cosine_anchors(Var query, DenseMatrix anchors) {
    const DenseMatrix& q = out(query);
    if (q.rows() != 1)
      throw ShapeError("cosine_anchors: query must be a row vector, got " + q.shape_str());
    if (q.cols() != anchors.cols())
      throw ShapeError("cosine_anchors: dimension mismatch (query " + q.shape_str() +
                       ", anchors " + anchors.shape_str() + ")");
    if (anchors.rows() == 0) throw ContractError("cosine_anchors: no anchors");
    TapeNode n{OpKind::cosine_anchors};
    n.output = DenseMatrix(1, anchors.rows());
    const double qn = norm(q.row(0));
    for (std::size_t m = 0; m < anchors.rows(); ++m) {
      const double an = norm(anchors.row(m));
      if (qn < 1e-12 || an < 1e-12) {
        n.output(0, m) = 0.0;
        continue;
      }
      double dot = 0.0;
      for (std::size_t j = 0; j < q.cols(); ++j) dot += q(0, j) * anchors(m, j);
      n.output(0, m) = dot / (qn * an);
    }
    check_finite(n.output, "cosine_anchors");
    n.aux = std::move(anchors);
    n.parents = {query.id, -1};
    return push(std::move(n));
  }

  const DenseMatrix& value(Var v) const { return node(v).output; }

  double scalar_value(Var v) const {
    const DenseMatrix& m = node(v).output;
    if (m.rows() != 1 || m.cols() != 1)
      throw ContractError("scalar_value: node is " + m.shape_str() + ", expected 1x1");
    return m(0, 0);
  }

  std::size_t size() const { return nodes_.size(); }

  const TapeNode& node(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw ContractError("Tape: invalid node id " + std::to_string(v.id));
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  // Reverse sweep from a scalar loss node. Gradients accumulate over every
  // path; parameter leaves end up in the store, other leaves are dropped.
  // The tape itself is not modified, so repeated sweeps give identical
  // results.
  GradientStore backward(Var loss) const {
    const DenseMatrix& l = node(loss).output;
    if (l.rows() != 1 || l.cols() != 1)
      throw ContractError("backward: loss must be scalar (1x1), got " + l.shape_str());

    std::vector<DenseMatrix> grad(static_cast<std::size_t>(loss.id) + 1);
    grad[static_cast<std::size_t>(loss.id)] = DenseMatrix(1, 1, 1.0);

    GradientStore store;
    for (int id = loss.id; id >= 0; --id) {
      DenseMatrix& g = grad[static_cast<std::size_t>(id)];
      if (g.empty()) continue;
      const TapeNode& n = nodes_[static_cast<std::size_t>(id)];
      switch (n.kind) {
        case OpKind::constant_leaf:
          break;
        case OpKind::parameter_leaf:
          store.accumulate(n.param_id, g);
          break;
        case OpKind::matmul: {
          const DenseMatrix& a = parent_out(n, 0);
          const DenseMatrix& b = parent_out(n, 1);
          accumulate(grad, n.parents[0], multiply_a_bT(g, b));
          accumulate(grad, n.parents[1], multiply_aT_b(a, g));
          break;
        }
        case OpKind::add:
          accumulate(grad, n.parents[0], g);
          accumulate(grad, n.parents[1], g);
          break;
        case OpKind::sub: {
          accumulate(grad, n.parents[0], g);
          DenseMatrix neg = g;
          for (double& v : neg.values()) v = -v;
          accumulate(grad, n.parents[1], std::move(neg));
          break;
        }
        case OpKind::hadamard: {
          const DenseMatrix& a = parent_out(n, 0);
          const DenseMatrix& b = parent_out(n, 1);
          DenseMatrix da = g;
          DenseMatrix db = g;
          for (std::size_t i = 0; i < g.size(); ++i) {
            da.values()[i] *= b.values()[i];
            db.values()[i] *= a.values()[i];
          }
          accumulate(grad, n.parents[0], std::move(da));
          accumulate(grad, n.parents[1], std::move(db));
          break;
        }
        case OpKind::scale: {
          DenseMatrix da = g;
          for (double& v : da.values()) v *= n.scalar;
          accumulate(grad, n.parents[0], std::move(da));
          break;
        }
        case OpKind::relu: {
          const DenseMatrix& x = parent_out(n, 0);
          DenseMatrix da = g;
          for (std::size_t i = 0; i < g.size(); ++i)
            if (x.values()[i] <= 0.0) da.values()[i] = 0.0;  // derivative at 0 is 0
          accumulate(grad, n.parents[0], std::move(da));
          break;
        }
        case OpKind::transpose:
          accumulate(grad, n.parents[0], transposed(g));
          break;
        case OpKind::col_sum: {
          const DenseMatrix& x = parent_out(n, 0);
          DenseMatrix da(x.rows(), x.cols());
          for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) da(i, j) = g(0, j);
          accumulate(grad, n.parents[0], std::move(da));
          break;
        }
        case OpKind::sum_all: {
          const DenseMatrix& x = parent_out(n, 0);
          accumulate(grad, n.parents[0], DenseMatrix(x.rows(), x.cols(), g(0, 0)));
          break;
        }
        case OpKind::hconcat: {
          const DenseMatrix& a = parent_out(n, 0);
          const DenseMatrix& b = parent_out(n, 1);
          DenseMatrix da(a.rows(), a.cols());
          DenseMatrix db(b.rows(), b.cols());
          for (std::size_t i = 0; i < a.rows(); ++i) {
            for (std::size_t j = 0; j < a.cols(); ++j) da(i, j) = g(i, j);
            for (std::size_t j = 0; j < b.cols(); ++j) db(i, j) = g(i, a.cols() + j);
          }
          accumulate(grad, n.parents[0], std::move(da));
          accumulate(grad, n.parents[1], std::move(db));
          break;
        }
        case OpKind::row_softmax: {
          // dz_j = y_j * (g_j - sum_k g_k y_k) per row
          const DenseMatrix& y = n.output;
          DenseMatrix da(y.rows(), y.cols());
          for (std::size_t i = 0; i < y.rows(); ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
            for (std::size_t j = 0; j < y.cols(); ++j) da(i, j) = y(i, j) * (g(i, j) - dot);
          }
          accumulate(grad, n.parents[0], std::move(da));
          break;
        }
        case OpKind::log_clamped: {
          const DenseMatrix& x = parent_out(n, 0);
          DenseMatrix da = g;
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double xv = x.values()[i];
            da.values()[i] = xv > kLogClamp ? da.values()[i] / xv : 0.0;
          }
          accumulate(grad, n.parents[0], std::move(da));
          break;
        }
        case OpKind::cosine_anchors: {
          // dq = sum_m g_m * (a_m / (|q||a_m|) - c_m * q / |q|^2)
          const DenseMatrix& q = parent_out(n, 0);
          const DenseMatrix& anchors = n.aux;
          const DenseMatrix& c = n.output;
          DenseMatrix dq(1, q.cols());
          const double qn = norm(q.row(0));
          if (qn >= 1e-12) {
            for (std::size_t m = 0; m < anchors.rows(); ++m) {
              const double an = norm(anchors.row(m));
              if (an < 1e-12) continue;
              const double gm = g(0, m);
              if (gm == 0.0) continue;
              for (std::size_t j = 0; j < q.cols(); ++j)
                dq(0, j) += gm * (anchors(m, j) / (qn * an) - c(0, m) * q(0, j) / (qn * qn));
            }
          }
          accumulate(grad, n.parents[0], std::move(dq));
          break;
        }
      }
      if (id != loss.id) g = DenseMatrix();  // free as we go
    }
    return store;
  }

 private:
  Var elementwise_binary(OpKind kind, Var a, Var b) {
    const DenseMatrix& x = out(a);
    const DenseMatrix& y = out(b);
    if (!x.same_shape(y))
      throw ShapeError(std::string(kind == OpKind::add      ? "add"
                                   : kind == OpKind::sub    ? "sub"
                                                            : "hadamard") +
                       ": shapes disagree (" + x.shape_str() + " vs " + y.shape_str() + ")");
    TapeNode n{kind};
    n.output = x;
    auto dst = n.output.values();
    auto src = y.values();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (kind == OpKind::add)
        dst[i] += src[i];
      else if (kind == OpKind::sub)
        dst[i] -= src[i];
      else
        dst[i] *= src[i];
    }
    check_finite(n.output, "elementwise");
    n.parents = {a.id, b.id};
    return push(std::move(n));
  }

  static double norm(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
  }

  const DenseMatrix& out(Var v) const { return node(v).output; }

  const DenseMatrix& parent_out(const TapeNode& n, int slot) const {
    return nodes_[static_cast<std::size_t>(n.parents[static_cast<std::size_t>(slot)])].output;
  }

  static void accumulate(std::vector<DenseMatrix>& grad, int id, DenseMatrix&& g) {
    DenseMatrix& slot = grad[static_cast<std::size_t>(id)];
    if (slot.empty())
      slot = std::move(g);
    else
      add_in_place(slot, g);
  }

  static void accumulate(std::vector<DenseMatrix>& grad, int id, const DenseMatrix& g) {
    DenseMatrix& slot = grad[static_cast<std::size_t>(id)];
    if (slot.empty())
      slot = g;
    else
      add_in_place(slot, g);
  }

  Var push(TapeNode&& n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<TapeNode> nodes_;
};

}  // namespace heal
