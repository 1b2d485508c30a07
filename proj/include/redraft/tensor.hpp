#pragma once

// Dense f64 tensors (rank 1 and 2) with reverse-mode automatic
// differentiation. Every model equation in this project is built from the
// primitives below. Graphs are recorded eagerly per forward pass; backward()
// replays the tape in reverse topological order and accumulates gradients
// into leaf tensors, so parameters kept across passes accumulate gradients
// until zero_grad().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "redraft/util.hpp"

namespace redraft {

using Shape = std::vector<int>;

inline int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) {
    check(d > 0, "tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

struct TensorData;
using TensorNode = std::shared_ptr<TensorData>;

struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until the backward pass touches it
  bool requires_grad = false;
  std::vector<TensorNode> parents;
  std::function<void(TensorData&)> backward_fn;  // nullptr for leaves
  const char* op = "leaf";

  int size() const { return static_cast<int>(value.size()); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

// Thread-local switch: when disabled, ops compute values only (decoding).
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool v) { flag() = v; }

 private:
  static bool& flag() {
    thread_local bool f = true;
    return f;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(TensorNode n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }

  static Tensor filled(Shape shape, double v, bool requires_grad = false) {
    auto n = std::make_shared<TensorData>();
    n->shape = std::move(shape);
    n->value.assign(shape_numel(n->shape), v);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    auto n = std::make_shared<TensorData>();
    n->shape = std::move(shape);
    check(shape_numel(n->shape) == static_cast<int>(data.size()),
          "tensor data length does not match shape");
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int size() const { return node_->size(); }
  int rows() const { return node_->rows(); }
  int cols() const { return node_->cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  const std::vector<double>& value() const { return node_->value; }
  std::vector<double>& value() { return node_->value; }
  double item() const {
    check(size() == 1, "item() on non-scalar tensor");
    return node_->value[0];
  }
  double at(int i) const { return node_->value[static_cast<std::size_t>(i)]; }
  double at(int r, int c) const {
    return node_->value[static_cast<std::size_t>(r) * cols() + c];
  }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const { return node_->grad; }
  std::vector<double>& ensure_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  TensorNode node() const { return node_; }
  TensorData* raw() const { return node_.get(); }

 private:
  TensorNode node_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> value, const char* op,
                          std::vector<TensorNode> parents,
                          std::function<void(TensorData&)> backward_fn) {
  auto n = std::make_shared<TensorData>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool record = false;
  if (GradMode::enabled()) {
    for (const auto& p : parents)
      if (p->requires_grad) record = true;
  }
  if (record) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(n);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar primitives
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  check(same_shape(a.shape(), b.shape()), "add: shape mismatch");
  std::vector<double> out(a.value());
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_result(a.shape(), std::move(out), "add", {pa, pb},
                             [pa, pb](TensorData& self) {
                               const auto& g = self.grad;
                               if (pa->requires_grad) {
                                 auto& ga = pa->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                               }
                               if (pb->requires_grad) {
                                 auto& gb = pb->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                               }
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check(same_shape(a.shape(), b.shape()), "sub: shape mismatch");
  std::vector<double> out(a.value());
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_result(a.shape(), std::move(out), "sub", {pa, pb},
                             [pa, pb](TensorData& self) {
                               const auto& g = self.grad;
                               if (pa->requires_grad) {
                                 auto& ga = pa->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                               }
                               if (pb->requires_grad) {
                                 auto& gb = pb->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                               }
                             });
}

// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  check(same_shape(a.shape(), b.shape()), "mul: shape mismatch");
  std::vector<double> out(a.size());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_result(a.shape(), std::move(out), "mul", {pa, pb},
                             [pa, pb](TensorData& self) {
                               const auto& g = self.grad;
                               if (pa->requires_grad) {
                                 auto& ga = pa->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   ga[i] += g[i] * pb->value[i];
                               }
                               if (pb->requires_grad) {
                                 auto& gb = pb->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   gb[i] += g[i] * pa->value[i];
                               }
                             });
}

// Broadcast multiply by a scalar tensor (shape {1}).
inline Tensor smul(const Tensor& s, const Tensor& x) {
  check(s.size() == 1, "smul: first operand must be scalar");
  double sv = s.item();
  std::vector<double> out(x.value());
  for (double& v : out) v *= sv;
  auto ps = s.node(), px = x.node();
  return detail::make_result(x.shape(), std::move(out), "smul", {ps, px},
                             [ps, px](TensorData& self) {
                               const auto& g = self.grad;
                               if (ps->requires_grad) {
                                 double acc = 0.0;
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   acc += g[i] * px->value[i];
                                 ps->ensure_grad()[0] += acc;
                               }
                               if (px->requires_grad) {
                                 auto& gx = px->ensure_grad();
                                 double svv = ps->value[0];
                                 for (std::size_t i = 0; i < g.size(); ++i) gx[i] += svv * g[i];
                               }
                             });
}

inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.value());
  for (double& v : out) v *= c;
  auto px = x.node();
  return detail::make_result(x.shape(), std::move(out), "scale", {px},
                             [px, c](TensorData& self) {
                               auto& gx = px->ensure_grad();
                               const auto& g = self.grad;
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
                             });
}

inline Tensor add_const(const Tensor& x, double c) {
  std::vector<double> out(x.value());
  for (double& v : out) v += c;
  auto px = x.node();
  return detail::make_result(x.shape(), std::move(out), "add_const", {px},
                             [px](TensorData& self) {
                               auto& gx = px->ensure_grad();
                               const auto& g = self.grad;
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                             });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& x, const char* name, Fwd fwd, Bwd bwd) {
  std::vector<double> out(x.size());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  auto px = x.node();
  std::vector<double> saved = out;
  return detail::make_result(
      x.shape(), std::move(out), name, {px},
      [px, bwd, saved = std::move(saved)](TensorData& self) {
        auto& gx = px->ensure_grad();
        const auto& g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i)
          gx[i] += bwd(px->value[i], saved[i]) * g[i];
      });
}

}  // namespace detail

inline Tensor tanh(const Tensor& x) {
  return detail::unary_op(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_op(
      x, "exp", [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary_op(
      x, "log", [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

inline Tensor relu(const Tensor& x) {
  // Subgradient at 0 uses the zero branch.
  return detail::unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor pow_const(const Tensor& x, double p) {
  std::vector<double> out(x.size());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(xv[i], p);
  auto px = x.node();
  return detail::make_result(x.shape(), std::move(out), "pow_const", {px},
                             [px, p](TensorData& self) {
                               auto& gx = px->ensure_grad();
                               const auto& g = self.grad;
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 gx[i] += p * std::pow(px->value[i], p - 1.0) * g[i];
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// Supported shapes: (m,k)x(k,n) -> (m,n);  (m,k)x(k) -> (m);  (k)x(k,n) -> (n).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool a_vec = a.shape().size() == 1;
  const bool b_vec = b.shape().size() == 1;
  check(!(a_vec && b_vec), "matmul: use dot() for vector-vector products");
  const int m = a_vec ? 1 : a.shape()[0];
  const int ka = a_vec ? a.shape()[0] : a.shape()[1];
  const int kb = b_vec ? b.shape()[0] : b.shape()[0];
  const int n = b_vec ? 1 : b.shape()[1];
  check(ka == kb, "matmul: inner dimensions do not match");
  const int k = ka;

  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double aip = av[static_cast<std::size_t>(i) * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv[static_cast<std::size_t>(p) * n];
      double* orow = &out[static_cast<std::size_t>(i) * n];
      for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }

  Shape out_shape;
  if (a_vec)
    out_shape = {n};
  else if (b_vec)
    out_shape = {m};
  else
    out_shape = {m, n};

  auto pa = a.node(), pb = b.node();
  return detail::make_result(
      std::move(out_shape), std::move(out), "matmul", {pa, pb},
      [pa, pb, m, n, k](TensorData& self) {
        const auto& g = self.grad;
        if (pa->requires_grad) {
          // dA = g . B^T
          auto& ga = pa->ensure_grad();
          const auto& bv = pb->value;
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              double acc = 0.0;
              const double* grow = &g[static_cast<std::size_t>(i) * n];
              const double* brow = &bv[static_cast<std::size_t>(p) * n];
              for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
              ga[static_cast<std::size_t>(i) * k + p] += acc;
            }
        }
        if (pb->requires_grad) {
          // dB = A^T . g
          auto& gb = pb->ensure_grad();
          const auto& av = pa->value;
          for (int p = 0; p < k; ++p)
            for (int i = 0; i < m; ++i) {
              const double aip = av[static_cast<std::size_t>(i) * k + p];
              if (aip == 0.0) continue;
              const double* grow = &g[static_cast<std::size_t>(i) * n];
              double* gbrow = &gb[static_cast<std::size_t>(p) * n];
              for (int j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
            }
        }
      });
}

inline Tensor transpose(const Tensor& a) {
  check(a.shape().size() == 2, "transpose: rank-2 tensor required");
  const int m = a.rows(), n = a.cols();
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  const auto& av = a.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(j) * m + i] = av[static_cast<std::size_t>(i) * n + j];
  auto pa = a.node();
  return detail::make_result(
      {n, m}, std::move(out), "transpose", {pa}, [pa, m, n](TensorData& self) {
        auto& ga = pa->ensure_grad();
        const auto& g = self.grad;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            ga[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
      });
}

// Adds vector v to every row of matrix a.
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  check(a.shape().size() == 2 && v.shape().size() == 1, "add_rowvec: (matrix, vector) required");
  check(a.cols() == v.shape()[0], "add_rowvec: width mismatch");
  const int m = a.rows(), n = a.cols();
  std::vector<double> out(a.value());
  const auto& vv = v.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] += vv[j];
  auto pa = a.node(), pv = v.node();
  return detail::make_result({m, n}, std::move(out), "add_rowvec", {pa, pv},
                             [pa, pv, m, n](TensorData& self) {
                               const auto& g = self.grad;
                               if (pa->requires_grad) {
                                 auto& ga = pa->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                               }
                               if (pv->requires_grad) {
                                 auto& gv = pv->ensure_grad();
                                 for (int i = 0; i < m; ++i)
                                   for (int j = 0; j < n; ++j)
                                     gv[j] += g[static_cast<std::size_t>(i) * n + j];
                               }
                             });
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
  check(a.shape().size() == 1 && b.shape().size() == 1 && a.size() == b.size(),
        "dot: equal-length vectors required");
  double acc = 0.0;
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_result({1}, {acc}, "dot", {pa, pb}, [pa, pb](TensorData& self) {
    const double g = self.grad[0];
    if (pa->requires_grad) {
      auto& ga = pa->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& gb = pb->ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * pa->value[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

inline Tensor concat(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat: no inputs");
  int total = 0;
  for (const auto& p : parts) {
    check(p.shape().size() == 1, "concat: vectors only");
    total += p.size();
  }
  std::vector<double> out;
  out.reserve(total);
  std::vector<TensorNode> parents;
  parents.reserve(parts.size());
  for (const auto& p : parts) {
    out.insert(out.end(), p.value().begin(), p.value().end());
    parents.push_back(p.node());
  }
  auto ps = parents;
  return detail::make_result({total}, std::move(out), "concat", std::move(parents),
                             [ps](TensorData& self) {
                               const auto& g = self.grad;
                               std::size_t off = 0;
                               for (const auto& p : ps) {
                                 if (p->requires_grad) {
                                   auto& gp = p->ensure_grad();
                                   for (std::size_t i = 0; i < gp.size(); ++i)
                                     gp[i] += g[off + i];
                                 }
                                 off += p->value.size();
                               }
                             });
}

// Builds an (n x d) matrix from n vectors of length d.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  check(!rows.empty(), "stack_rows: no inputs");
  const int d = rows[0].size();
  std::vector<double> out;
  out.reserve(rows.size() * d);
  std::vector<TensorNode> parents;
  parents.reserve(rows.size());
  for (const auto& r : rows) {
    check(r.shape().size() == 1 && r.size() == d, "stack_rows: rows must be equal-length vectors");
    out.insert(out.end(), r.value().begin(), r.value().end());
    parents.push_back(r.node());
  }
  const int n = static_cast<int>(rows.size());
  auto ps = parents;
  return detail::make_result({n, d}, std::move(out), "stack_rows", std::move(parents),
                             [ps, d](TensorData& self) {
                               const auto& g = self.grad;
                               for (std::size_t r = 0; r < ps.size(); ++r) {
                                 if (!ps[r]->requires_grad) continue;
                                 auto& gp = ps[r]->ensure_grad();
                                 for (int j = 0; j < d; ++j) gp[j] += g[r * d + j];
                               }
                             });
}

// Row lookup (embedding select): returns row i of a as a vector.
inline Tensor row(const Tensor& a, int i) {
  check(a.shape().size() == 2, "row: rank-2 tensor required");
  check(i >= 0 && i < a.rows(), "row: index out of range");
  const int n = a.cols();
  std::vector<double> out(a.value().begin() + static_cast<std::size_t>(i) * n,
                          a.value().begin() + static_cast<std::size_t>(i + 1) * n);
  auto pa = a.node();
  return detail::make_result({n}, std::move(out), "row", {pa}, [pa, i, n](TensorData& self) {
    auto& ga = pa->ensure_grad();
    const auto& g = self.grad;
    for (int j = 0; j < n; ++j) ga[static_cast<std::size_t>(i) * n + j] += g[j];
  });
}

// Mean over an axis of a matrix: axis 0 averages rows (result has cols()
// entries), axis 1 averages columns.
inline Tensor mean(const Tensor& a, int axis) {
  check(a.shape().size() == 2, "mean: rank-2 tensor required");
  check(axis == 0 || axis == 1, "mean: axis must be 0 or 1");
  const int m = a.rows(), n = a.cols();
  const auto& av = a.value();
  if (axis == 0) {
    std::vector<double> out(n, 0.0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out[j] += av[static_cast<std::size_t>(i) * n + j];
    for (double& v : out) v /= m;
    auto pa = a.node();
    return detail::make_result({n}, std::move(out), "mean0", {pa}, [pa, m, n](TensorData& self) {
      auto& ga = pa->ensure_grad();
      const auto& g = self.grad;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga[static_cast<std::size_t>(i) * n + j] += g[j] / m;
    });
  }
  std::vector<double> out(m, 0.0);
  for (int i = 0; i < m; ++i) {
    double acc = 0.0;
    for (int j = 0; j < n; ++j) acc += av[static_cast<std::size_t>(i) * n + j];
    out[i] = acc / n;
  }
  auto pa = a.node();
  return detail::make_result({m}, std::move(out), "mean1", {pa}, [pa, m, n](TensorData& self) {
    auto& ga = pa->ensure_grad();
    const auto& g = self.grad;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) ga[static_cast<std::size_t>(i) * n + j] += g[i] / n;
  });
}

inline Tensor sum(const Tensor& a) {
  double acc = std::accumulate(a.value().begin(), a.value().end(), 0.0);
  auto pa = a.node();
  return detail::make_result({1}, {acc}, "sum", {pa}, [pa](TensorData& self) {
    auto& ga = pa->ensure_grad();
    const double g = self.grad[0];
    for (double& v : ga) v += g;
  });
}

// Selects one element by flat index as a scalar tensor.
inline Tensor pick(const Tensor& a, int i) {
  check(i >= 0 && i < a.size(), "pick: index out of range");
  auto pa = a.node();
  return detail::make_result({1}, {a.value()[static_cast<std::size_t>(i)]}, "pick", {pa},
                             [pa, i](TensorData& self) {
                               pa->ensure_grad()[static_cast<std::size_t>(i)] += self.grad[0];
                             });
}

// ---------------------------------------------------------------------------
// Masked softmax
// ---------------------------------------------------------------------------

namespace detail {

// Softmax of one strided slice with an optional 0/1 mask. Masked entries are
// exactly 0 in the output and receive no gradient. The row max is subtracted
// before exponentiation.
inline void softmax_slice(const double* x, const double* mask, double* out, int n, int stride) {
  double mx = -std::numeric_limits<double>::infinity();
  int live = 0;
  for (int i = 0; i < n; ++i) {
    if (mask && mask[static_cast<std::size_t>(i) * stride] == 0.0) continue;
    ++live;
    mx = std::max(mx, x[static_cast<std::size_t>(i) * stride]);
  }
  if (live == 0) throw std::domain_error("softmax: fully masked slice");
  double denom = 0.0;
  for (int i = 0; i < n; ++i) {
    const std::size_t k = static_cast<std::size_t>(i) * stride;
    if (mask && mask[k] == 0.0) {
      out[k] = 0.0;
      continue;
    }
    out[k] = std::exp(x[k] - mx);
    denom += out[k];
  }
  for (int i = 0; i < n; ++i) {
    const std::size_t k = static_cast<std::size_t>(i) * stride;
    if (!(mask && mask[k] == 0.0)) out[k] /= denom;
  }
}

inline void softmax_slice_backward(const double* y, const double* g, const double* mask,
                                   double* gx, int n, int stride) {
  double dotp = 0.0;
  for (int i = 0; i < n; ++i) {
    const std::size_t k = static_cast<std::size_t>(i) * stride;
    if (mask && mask[k] == 0.0) continue;
    dotp += g[k] * y[k];
  }
  for (int i = 0; i < n; ++i) {
    const std::size_t k = static_cast<std::size_t>(i) * stride;
    if (mask && mask[k] == 0.0) continue;
    gx[k] += y[k] * (g[k] - dotp);
  }
}

}  // namespace detail

// Softmax over `axis` of a matrix, or over the whole of a vector (axis
// ignored for vectors). `mask`, when defined, is a 0/1 tensor of identical
// shape; a fully masked row/column is a degenerate-input error.
inline Tensor softmax(const Tensor& a, int axis = 1, const Tensor& mask = Tensor()) {
  if (mask.defined()) {
    check(same_shape(mask.shape(), a.shape()), "softmax: mask shape mismatch");
    for (double v : mask.value()) check(v == 0.0 || v == 1.0, "softmax: mask must be 0/1");
  }
  const bool vec = a.shape().size() == 1;
  const int m = vec ? 1 : a.rows();
  const int n = vec ? a.size() : a.cols();
  std::vector<double> out(a.size());
  const double* mv = mask.defined() ? mask.value().data() : nullptr;
  const auto& av = a.value();
  const int ncols = vec ? n : a.cols();

  if (vec || axis == 1) {
    for (int i = 0; i < m; ++i)
      detail::softmax_slice(&av[static_cast<std::size_t>(i) * ncols],
                            mv ? &mv[static_cast<std::size_t>(i) * ncols] : nullptr,
                            &out[static_cast<std::size_t>(i) * ncols], n, 1);
  } else {
    check(axis == 0, "softmax: axis must be 0 or 1");
    for (int j = 0; j < n; ++j)
      detail::softmax_slice(&av[j], mv ? &mv[j] : nullptr, &out[j], m, ncols);
  }

  auto pa = a.node();
  auto pm = mask.defined() ? mask.node() : nullptr;
  std::vector<TensorNode> parents = {pa};
  std::vector<double> saved = out;
  const bool over_rows = vec || axis == 1;
  return detail::make_result(
      a.shape(), std::move(out), "softmax", std::move(parents),
      [pa, pm, saved = std::move(saved), over_rows, m, n, ncols](TensorData& self) {
        auto& gx = pa->ensure_grad();
        const auto& g = self.grad;
        const double* mv = pm ? pm->value.data() : nullptr;
        if (over_rows) {
          for (int i = 0; i < m; ++i)
            detail::softmax_slice_backward(&saved[static_cast<std::size_t>(i) * ncols],
                                           &g[static_cast<std::size_t>(i) * ncols],
                                           mv ? &mv[static_cast<std::size_t>(i) * ncols] : nullptr,
                                           &gx[static_cast<std::size_t>(i) * ncols], n, 1);
        } else {
          for (int j = 0; j < n; ++j)
            detail::softmax_slice_backward(&saved[j], &g[j], mv ? &mv[j] : nullptr, &gx[j], m,
                                           ncols);
        }
      });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// The record of one forward pass, reconstructed from the root: nodes in
// topological order, parents before children. Valid while the root's graph
// is alive.
struct ComputationTape {
  std::vector<TensorData*> order;

  static ComputationTape build(const Tensor& root) {
    ComputationTape tape;
    std::unordered_set<TensorData*> seen;
    // Iterative post-order DFS: a node is appended after all its parents.
    std::vector<std::pair<TensorData*, std::size_t>> stack;
    if (root.raw()->requires_grad) stack.emplace_back(root.raw(), 0);
    if (!stack.empty()) seen.insert(root.raw());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        TensorData* p = node->parents[idx].get();
        ++idx;
        if (p->requires_grad && !p->parents.empty() && seen.insert(p).second)
          stack.emplace_back(p, 0);
      } else {
        tape.order.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  // Seeds the root with gradient 1 and replays backward: every recorded node
  // is visited exactly once, in reverse topological order.
  void run_backward() {
    if (order.empty()) return;
    order.back()->ensure_grad()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorData* node = *it;
      if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
  }
};

inline void backward(const Tensor& root) {
  check(root.size() == 1, "backward: root must be a scalar");
  ComputationTape::build(root).run_backward();
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

// Uniform in +-sqrt(6/(fan_in+fan_out)). For an (out x in) matrix fan_in is
// the column count; vectors use their length for both fans.
inline Tensor glorot(Shape shape, std::mt19937_64& rng) {
  int fan_in, fan_out;
  if (shape.size() == 2) {
    fan_out = shape[0];
    fan_in = shape[1];
  } else {
    fan_in = fan_out = shape[0];
  }
  const double lim = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-lim, lim);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(data), true);
}

struct ParamRegistry {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor add(const std::string& name, Tensor t) {
    check(find(name) == nullptr, "duplicate parameter name: " + name);
    t.set_requires_grad(true);
    items.emplace_back(name, t);
    return t;
  }

  Tensor* find(const std::string& name) {
    for (auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }

  void zero_grad() {
    for (auto& [n, t] : items) t.zero_grad();
  }

  // All parameters whose name starts with one of the given prefixes.
  std::vector<Tensor> with_prefixes(const std::vector<std::string>& prefixes) const {
    std::vector<Tensor> out;
    for (const auto& [n, t] : items)
      for (const auto& p : prefixes)
        if (n.rfind(p, 0) == 0) {
          out.push_back(t);
          break;
        }
    return out;
  }
};

}  // namespace redraft
