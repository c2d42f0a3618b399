#pragma once

// Minimal tape-based reverse-mode differentiation over dense row-major
// matrices. A Graph records every op in creation order, which is a
// topological order, and backward() walks the tape in reverse.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mcad/error.hpp"
#include "mcad/rng.hpp"

namespace mcad {

template <class Real>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, Real fill = Real(0))
      : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<Real> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) {
      throw ContractError("matrix payload size does not match shape");
    }
  }
  Matrix(std::initializer_list<std::initializer_list<Real>> init) {
    rows = init.size();
    cols = rows ? init.begin()->size() : 0;
    data.reserve(rows * cols);
    for (const auto& row : init) {
      if (row.size() != cols) throw ContractError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = Real(1);
    return m;
  }

  Real& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const Real& operator()(std::size_t r, std::size_t c) const {
    return data[r * cols + c];
  }
  std::span<Real> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const Real> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }
  std::size_t size() const { return data.size(); }

  Matrix transposed() const {
    Matrix t(cols, rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  template <class Other>
  Matrix<Other> cast() const {
    Matrix<Other> out(rows, cols);
    for (std::size_t i = 0; i < data.size(); ++i)
      out.data[i] = static_cast<Other>(data[i]);
    return out;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

inline std::string shape_str(std::size_t r, std::size_t c) {
  return "[" + std::to_string(r) + "," + std::to_string(c) + "]";
}

template <class Real>
std::string shape_str(const Matrix<Real>& m) {
  return shape_str(m.rows, m.cols);
}

// ---------------------------------------------------------------------------
// Parameters

template <class Real>
struct Parameter {
  std::string name;
  Matrix<Real> value;
  Matrix<Real> grad;
  bool trainable = true;
  /// Receives decoupled weight decay in the optimizer.
  bool decay = true;
};

/// Named learnable tensors, iterated in insertion order. Element addresses
/// are stable for the lifetime of the store.
template <class Real>
class ParamStore {
 public:
  Parameter<Real>& add(const std::string& name, Matrix<Real> value,
                       bool decay = true) {
    if (index_.count(name)) {
      throw ContractError("duplicate parameter '" + name + "'");
    }
    index_[name] = params_.size();
    Matrix<Real> grad(value.rows, value.cols);
    params_.push_back(
        Parameter<Real>{name, std::move(value), std::move(grad), true, decay});
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name); }

  Parameter<Real>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw ContractError("unknown parameter '" + name + "'");
    }
    return params_[it->second];
  }
  const Parameter<Real>& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), Real(0));
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter<Real>> params_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Graph and tensor handles

template <class Real>
class Graph;

/// Lightweight handle to a node of a Graph.
template <class Real>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Graph<Real>* g, std::size_t id) : graph_(g), id_(id) {}

  Graph<Real>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Matrix<Real>& value() const;
  const Matrix<Real>& grad() const;
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
  bool requires_grad() const;
  /// Value of a [1,1] tensor.
  Real item() const;

 private:
  Graph<Real>* graph_ = nullptr;
  std::size_t id_ = 0;
};

template <class Real>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  struct Node {
    const char* op;
    Matrix<Real> value;
    Matrix<Real> grad;  // empty until backward reaches the node
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<Real>* param = nullptr;
  };

  /// With grad disabled every leaf is a constant and no backward state is kept.
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor<Real> constant(Matrix<Real> value) {
    return push("constant", std::move(value), false, nullptr);
  }

  Tensor<Real> scalar(Real v) { return constant(Matrix<Real>(1, 1, v)); }

  /// Input leaf; when requires_grad its gradient is readable after backward.
  Tensor<Real> input(Matrix<Real> value, bool requires_grad) {
    return push("input", std::move(value), requires_grad && grad_enabled_, nullptr);
  }

  /// Leaf bound to a stored parameter. backward() accumulates into p.grad.
  Tensor<Real> param(Parameter<Real>& p) {
    auto bound = bound_.find(&p);
    if (bound != bound_.end()) return Tensor<Real>(this, bound->second);
    auto t = push("param", p.value, p.trainable && grad_enabled_, nullptr);
    nodes_[t.id()].param = &p;
    bound_[&p] = t.id();
    return t;
  }

  /// Records an op result. The backward function runs only when the node
  /// requires grad, and is dropped otherwise.
  Tensor<Real> push(const char* op, Matrix<Real> value, bool requires_grad,
                    BackwardFn fn) {
    for (const Real v : value.data) {
      if (!std::isfinite(v)) {
        throw NumericError(std::string("non-finite output from op '") + op +
                           "' with shape " + shape_str(value));
      }
    }
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Tensor<Real>(this, nodes_.size() - 1);
  }

  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, allocated on first use.
  Matrix<Real>& grad_of(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) {
      n.grad = Matrix<Real>(n.value.rows, n.value.cols);
    }
    return n.grad;
  }

  /// Reverse sweep from a scalar loss. Parameter leaves add their gradient
  /// into the bound Parameter::grad.
  void backward(const Tensor<Real>& loss) {
    const Node& l = nodes_[loss.id()];
    if (l.value.rows != 1 || l.value.cols != 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_str(l.value));
    }
    if (!l.requires_grad) return;
    grad_of(loss.id()).data[0] = Real(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) {
        auto& dst = n.param->grad.data;
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad.data[j];
      }
    }
  }

  /// Rows that l2_normalize_rows found to be exactly zero.
  std::size_t zero_norm_rows() const { return zero_norm_rows_; }
  void note_zero_norm_rows(std::size_t n) { zero_norm_rows_ += n; }

 private:
  std::vector<Node> nodes_;
  std::map<const Parameter<Real>*, std::size_t> bound_;
  std::size_t zero_norm_rows_ = 0;
  bool grad_enabled_ = true;
};

template <class Real>
const Matrix<Real>& Tensor<Real>::value() const {
  return graph_->node(id_).value;
}
template <class Real>
const Matrix<Real>& Tensor<Real>::grad() const {
  return graph_->node(id_).grad;
}
template <class Real>
bool Tensor<Real>::requires_grad() const {
  return graph_->node(id_).requires_grad;
}
template <class Real>
Real Tensor<Real>::item() const {
  const auto& v = value();
  if (v.rows != 1 || v.cols != 1) {
    throw ContractError("item() on non-scalar tensor " + shape_str(v));
  }
  return v.data[0];
}

// ---------------------------------------------------------------------------
// Dense kernels. All reductions run left to right.

namespace detail {

/// C[n,m] += A[n,k] * B[k,m]
template <class Real>
void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t n,
             std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    Real* ci = c + i * m;
    const Real* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = ai[p];
      const Real* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

/// C[n,m] += A[n,k] * B[m,k]^T
template <class Real>
void gemm_nt(const Real* a, const Real* b, Real* c, std::size_t n,
             std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const Real* ai = a + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const Real* bj = b + j * k;
      Real s = Real(0);
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * m + j] += s;
    }
  }
}

/// C[k,m] += A[n,k]^T * B[n,m]
template <class Real>
void gemm_tn(const Real* a, const Real* b, Real* c, std::size_t n,
             std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const Real* ai = a + i * k;
    const Real* bi = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = ai[p];
      Real* cp = c + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += av * bi[j];
    }
  }
}

template <class Real>
void require_same_shape(const char* op, const Tensor<Real>& a,
                        const Tensor<Real>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractError(std::string(op) + ": shape mismatch " +
                        shape_str(a.value()) + " vs " + shape_str(b.value()));
  }
}

template <class Real>
void require_scalar(const char* op, const Tensor<Real>& s) {
  if (s.rows() != 1 || s.cols() != 1) {
    throw ContractError(std::string(op) + ": expected scalar operand, got " +
                        shape_str(s.value()));
  }
}

template <class Real>
void require_same_graph(const char* op, const Tensor<Real>& a,
                        const Tensor<Real>& b) {
  if (&a.graph() != &b.graph()) {
    throw ContractError(std::string(op) + ": operands from different graphs");
  }
}

/// Elementwise unary op with derivative expressed through (x, y).
template <class Real, class F, class DF>
Tensor<Real> unary(const char* op, const Tensor<Real>& x, F f, DF df) {
  auto& g = x.graph();
  Matrix<Real> y(x.rows(), x.cols());
  const auto& xv = x.value().data;
  for (std::size_t i = 0; i < xv.size(); ++i) y.data[i] = f(xv[i]);
  const std::size_t xid = x.id();
  return g.push(op, std::move(y), x.requires_grad(),
                [xid, df](Graph<Real>& gr, std::size_t self) {
                  const auto& xs = gr.node(xid).value.data;
                  const auto& ys = gr.node(self).value.data;
                  const auto& dy = gr.node(self).grad.data;
                  auto& dx = gr.grad_of(xid).data;
                  for (std::size_t i = 0; i < dx.size(); ++i)
                    dx[i] += dy[i] * df(xs[i], ys[i]);
                });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_graph("matmul", a, b);
  if (a.cols() != b.rows()) {
    throw ContractError("matmul: inner dimension mismatch " +
                        shape_str(a.value()) + " x " + shape_str(b.value()));
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Matrix<Real> c(n, m);
  detail::gemm_nn(a.value().data.data(), b.value().data.data(), c.data.data(),
                  n, k, m);
  const auto ia = a.id(), ib = b.id();
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  return a.graph().push(
      "matmul", std::move(c), ra || rb,
      [=](Graph<Real>& g, std::size_t self) {
        const auto& dc = g.node(self).grad.data;
        if (ra) {
          auto& da = g.grad_of(ia).data;
          detail::gemm_nt(dc.data(), g.node(ib).value.data.data(), da.data(),
                          n, m, k);
        }
        if (rb) {
          auto& db = g.grad_of(ib).data;
          detail::gemm_tn(g.node(ia).value.data.data(), dc.data(), db.data(),
                          n, k, m);
        }
      });
}

/// a * b^T without materializing the transpose.
template <class Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_graph("matmul_nt", a, b);
  if (a.cols() != b.cols()) {
    throw ContractError("matmul_nt: inner dimension mismatch " +
                        shape_str(a.value()) + " x " + shape_str(b.value()) +
                        "^T");
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  Matrix<Real> c(n, m);
  detail::gemm_nt(a.value().data.data(), b.value().data.data(), c.data.data(),
                  n, k, m);
  const auto ia = a.id(), ib = b.id();
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  return a.graph().push(
      "matmul_nt", std::move(c), ra || rb,
      [=](Graph<Real>& g, std::size_t self) {
        const auto& dc = g.node(self).grad.data;
        if (ra) {
          detail::gemm_nn(dc.data(), g.node(ib).value.data.data(),
                          g.grad_of(ia).data.data(), n, m, k);
        }
        if (rb) {
          detail::gemm_tn(dc.data(), g.node(ia).value.data.data(),
                          g.grad_of(ib).data.data(), n, m, k);
        }
      });
}

template <class Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  const auto ia = a.id();
  return a.graph().push("transpose", a.value().transposed(), a.requires_grad(),
                        [ia](Graph<Real>& g, std::size_t self) {
                          const auto& dy = g.node(self).grad;
                          auto& dx = g.grad_of(ia);
                          for (std::size_t r = 0; r < dy.rows; ++r)
                            for (std::size_t c = 0; c < dy.cols; ++c)
                              dx(c, r) += dy(r, c);
                        });
}

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_graph("add", a, b);
  detail::require_same_shape("add", a, b);
  Matrix<Real> c = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] += bv[i];
  const auto ia = a.id(), ib = b.id();
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  return a.graph().push("add", std::move(c), ra || rb,
                        [=](Graph<Real>& g, std::size_t self) {
                          const auto& dc = g.node(self).grad.data;
                          for (auto [id, r] : {std::pair{ia, ra}, std::pair{ib, rb}}) {
                            if (!r) continue;
                            auto& d = g.grad_of(id).data;
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i];
                          }
                        });
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_graph("sub", a, b);
  detail::require_same_shape("sub", a, b);
  Matrix<Real> c = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] -= bv[i];
  const auto ia = a.id(), ib = b.id();
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  return a.graph().push("sub", std::move(c), ra || rb,
                        [=](Graph<Real>& g, std::size_t self) {
                          const auto& dc = g.node(self).grad.data;
                          if (ra) {
                            auto& d = g.grad_of(ia).data;
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i];
                          }
                          if (rb) {
                            auto& d = g.grad_of(ib).data;
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] -= dc[i];
                          }
                        });
}

/// a[n,m] + bias[1,m] broadcast over rows.
template <class Real>
Tensor<Real> add_bias(const Tensor<Real>& a, const Tensor<Real>& bias) {
  detail::require_same_graph("add_bias", a, bias);
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw ContractError("add_bias: bias shape " + shape_str(bias.value()) +
                        " does not match " + shape_str(a.value()));
  }
  Matrix<Real> c = a.value();
  const auto& bv = bias.value().data;
  for (std::size_t r = 0; r < c.rows; ++r)
    for (std::size_t j = 0; j < c.cols; ++j) c(r, j) += bv[j];
  const auto ia = a.id(), ib = bias.id();
  const bool ra = a.requires_grad(), rb = bias.requires_grad();
  return a.graph().push("add_bias", std::move(c), ra || rb,
                        [=](Graph<Real>& g, std::size_t self) {
                          const auto& dc = g.node(self).grad;
                          if (ra) {
                            auto& d = g.grad_of(ia).data;
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc.data[i];
                          }
                          if (rb) {
                            auto& d = g.grad_of(ib).data;
                            for (std::size_t r = 0; r < dc.rows; ++r)
                              for (std::size_t j = 0; j < dc.cols; ++j) d[j] += dc(r, j);
                          }
                        });
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real factor) {
  return detail::unary<Real>(
      "scale", a, [factor](Real x) { return factor * x; },
      [factor](Real, Real) { return factor; });
}

/// s[1,1] * a
template <class Real>
Tensor<Real> mul_scalar(const Tensor<Real>& a, const Tensor<Real>& s) {
  detail::require_same_graph("mul_scalar", a, s);
  detail::require_scalar("mul_scalar", s);
  const Real sv = s.item();
  Matrix<Real> c = a.value();
  for (auto& v : c.data) v *= sv;
  const auto ia = a.id(), is = s.id();
  const bool ra = a.requires_grad(), rs = s.requires_grad();
  return a.graph().push("mul_scalar", std::move(c), ra || rs,
                        [=](Graph<Real>& g, std::size_t self) {
                          const auto& dc = g.node(self).grad.data;
                          if (ra) {
                            auto& d = g.grad_of(ia).data;
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += sv * dc[i];
                          }
                          if (rs) {
                            const auto& av = g.node(ia).value.data;
                            Real acc = Real(0);
                            for (std::size_t i = 0; i < av.size(); ++i) acc += dc[i] * av[i];
                            g.grad_of(is).data[0] += acc;
                          }
                        });
}

/// a / s[1,1]
template <class Real>
Tensor<Real> div_scalar(const Tensor<Real>& a, const Tensor<Real>& s) {
  detail::require_same_graph("div_scalar", a, s);
  detail::require_scalar("div_scalar", s);
  const Real sv = s.item();
  if (sv == Real(0)) throw NumericError("div_scalar: division by zero");
  Matrix<Real> c = a.value();
  for (auto& v : c.data) v /= sv;
  const auto ia = a.id(), is = s.id();
  const bool ra = a.requires_grad(), rs = s.requires_grad();
  return a.graph().push("div_scalar", std::move(c), ra || rs,
                        [=](Graph<Real>& g, std::size_t self) {
                          const auto& dc = g.node(self).grad.data;
                          if (ra) {
                            auto& d = g.grad_of(ia).data;
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i] / sv;
                          }
                          if (rs) {
                            const auto& av = g.node(ia).value.data;
                            Real acc = Real(0);
                            for (std::size_t i = 0; i < av.size(); ++i) acc += dc[i] * av[i];
                            g.grad_of(is).data[0] -= acc / (sv * sv);
                          }
                        });
}

/// Elementwise product.
template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_graph("mul", a, b);
  detail::require_same_shape("mul", a, b);
  Matrix<Real> c = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] *= bv[i];
  const auto ia = a.id(), ib = b.id();
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  return a.graph().push("mul", std::move(c), ra || rb,
                        [=](Graph<Real>& g, std::size_t self) {
                          const auto& dc = g.node(self).grad.data;
                          if (ra) {
                            const auto& o = g.node(ib).value.data;
                            auto& d = g.grad_of(ia).data;
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i] * o[i];
                          }
                          if (rb) {
                            const auto& o = g.node(ia).value.data;
                            auto& d = g.grad_of(ib).data;
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i] * o[i];
                          }
                        });
}

/// Elementwise quotient.
template <class Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_graph("div", a, b);
  detail::require_same_shape("div", a, b);
  Matrix<Real> c = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] /= bv[i];
  const auto ia = a.id(), ib = b.id();
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  return a.graph().push("div", std::move(c), ra || rb,
                        [=](Graph<Real>& g, std::size_t self) {
                          const auto& dc = g.node(self).grad.data;
                          const auto& bs = g.node(ib).value.data;
                          if (ra) {
                            auto& d = g.grad_of(ia).data;
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i] / bs[i];
                          }
                          if (rb) {
                            const auto& ys = g.node(self).value.data;
                            auto& d = g.grad_of(ib).data;
                            for (std::size_t i = 0; i < d.size(); ++i)
                              d[i] -= dc[i] * ys[i] / bs[i];
                          }
                        });
}

template <class Real>
Tensor<Real> exp(const Tensor<Real>& a) {
  return detail::unary<Real>(
      "exp", a, [](Real x) { return std::exp(x); },
      [](Real, Real y) { return y; });
}

template <class Real>
Tensor<Real> log(const Tensor<Real>& a) {
  return detail::unary<Real>(
      "log", a, [](Real x) { return std::log(x); },
      [](Real x, Real) { return Real(1) / x; });
}

/// max(a, floor); gradient passes only where a > floor.
template <class Real>
Tensor<Real> clamp_min(const Tensor<Real>& a, Real floor) {
  return detail::unary<Real>(
      "clamp_min", a, [floor](Real x) { return x > floor ? x : floor; },
      [floor](Real x, Real) { return x > floor ? Real(1) : Real(0); });
}

template <class Real>
Tensor<Real> tanh(const Tensor<Real>& a) {
  return detail::unary<Real>(
      "tanh", a, [](Real x) { return std::tanh(x); },
      [](Real, Real y) { return Real(1) - y * y; });
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
  return detail::unary<Real>(
      "sigmoid", a, [](Real x) { return Real(1) / (Real(1) + std::exp(-x)); },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <class Real>
Tensor<Real> row_softmax(const Tensor<Real>& a) {
  const auto& x = a.value();
  Matrix<Real> y(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const auto xr = x.row(r);
    auto yr = y.row(r);
    Real mx = xr.empty() ? Real(0) : xr[0];
    for (const Real v : xr) mx = std::max(mx, v);
    Real s = Real(0);
    for (std::size_t c = 0; c < xr.size(); ++c) {
      yr[c] = std::exp(xr[c] - mx);
      s += yr[c];
    }
    for (auto& v : yr) v /= s;
  }
  const auto ia = a.id();
  return a.graph().push("row_softmax", std::move(y), a.requires_grad(),
                        [ia](Graph<Real>& g, std::size_t self) {
                          const auto& yv = g.node(self).value;
                          const auto& dy = g.node(self).grad;
                          auto& dx = g.grad_of(ia);
                          for (std::size_t r = 0; r < yv.rows; ++r) {
                            Real dot = Real(0);
                            for (std::size_t c = 0; c < yv.cols; ++c)
                              dot += dy(r, c) * yv(r, c);
                            for (std::size_t c = 0; c < yv.cols; ++c)
                              dx(r, c) += yv(r, c) * (dy(r, c) - dot);
                          }
                        });
}

/// Row-wise l2 normalization. An exactly-zero row maps to zero and passes
/// zero gradient; such rows are counted on the graph.
template <class Real>
Tensor<Real> l2_normalize_rows(const Tensor<Real>& a) {
  const auto& x = a.value();
  Matrix<Real> y(x.rows, x.cols);
  std::vector<Real> norms(x.rows);
  std::size_t zeros = 0;
  for (std::size_t r = 0; r < x.rows; ++r) {
    Real ss = Real(0);
    for (const Real v : x.row(r)) ss += v * v;
    norms[r] = std::sqrt(ss);
    if (norms[r] == Real(0)) {
      ++zeros;
      continue;
    }
    for (std::size_t c = 0; c < x.cols; ++c) y(r, c) = x(r, c) / norms[r];
  }
  if (zeros) a.graph().note_zero_norm_rows(zeros);
  const auto ia = a.id();
  return a.graph().push(
      "l2_normalize_rows", std::move(y), a.requires_grad(),
      [ia, norms = std::move(norms)](Graph<Real>& g, std::size_t self) {
        const auto& yv = g.node(self).value;
        const auto& dy = g.node(self).grad;
        auto& dx = g.grad_of(ia);
        for (std::size_t r = 0; r < yv.rows; ++r) {
          if (norms[r] == Real(0)) continue;
          Real dot = Real(0);
          for (std::size_t c = 0; c < yv.cols; ++c) dot += yv(r, c) * dy(r, c);
          for (std::size_t c = 0; c < yv.cols; ++c)
            dx(r, c) += (dy(r, c) - yv(r, c) * dot) / norms[r];
        }
      });
}

/// [n,m] -> [n,1]
template <class Real>
Tensor<Real> row_sum(const Tensor<Real>& a) {
  const auto& x = a.value();
  Matrix<Real> y(x.rows, 1);
  for (std::size_t r = 0; r < x.rows; ++r) {
    Real s = Real(0);
    for (const Real v : x.row(r)) s += v;
    y.data[r] = s;
  }
  const auto ia = a.id();
  return a.graph().push("row_sum", std::move(y), a.requires_grad(),
                        [ia](Graph<Real>& g, std::size_t self) {
                          const auto& dy = g.node(self).grad.data;
                          auto& dx = g.grad_of(ia);
                          for (std::size_t r = 0; r < dx.rows; ++r)
                            for (auto& v : dx.row(r)) v += dy[r];
                        });
}

/// Sum of all entries -> [1,1]
template <class Real>
Tensor<Real> sum(const Tensor<Real>& a) {
  Real s = Real(0);
  for (const Real v : a.value().data) s += v;
  const auto ia = a.id();
  return a.graph().push("sum", Matrix<Real>(1, 1, s), a.requires_grad(),
                        [ia](Graph<Real>& g, std::size_t self) {
                          const Real d = g.node(self).grad.data[0];
                          for (auto& v : g.grad_of(ia).data) v += d;
                        });
}

/// a[n,m] / s[n,1] row-broadcast.
template <class Real>
Tensor<Real> div_by_col(const Tensor<Real>& a, const Tensor<Real>& s) {
  detail::require_same_graph("div_by_col", a, s);
  if (s.cols() != 1 || s.rows() != a.rows()) {
    throw ContractError("div_by_col: divisor shape " + shape_str(s.value()) +
                        " does not match " + shape_str(a.value()));
  }
  Matrix<Real> c = a.value();
  const auto& sv = s.value().data;
  for (std::size_t r = 0; r < c.rows; ++r)
    for (auto& v : c.row(r)) v /= sv[r];
  const auto ia = a.id(), is = s.id();
  const bool ra = a.requires_grad(), rs = s.requires_grad();
  return a.graph().push(
      "div_by_col", std::move(c), ra || rs,
      [=](Graph<Real>& g, std::size_t self) {
        const auto& dc = g.node(self).grad;
        const auto& yv = g.node(self).value;
        const auto& svv = g.node(is).value.data;
        if (ra) {
          auto& d = g.grad_of(ia);
          for (std::size_t r = 0; r < d.rows; ++r)
            for (std::size_t c2 = 0; c2 < d.cols; ++c2) d(r, c2) += dc(r, c2) / svv[r];
        }
        if (rs) {
          auto& d = g.grad_of(is).data;
          for (std::size_t r = 0; r < dc.rows; ++r) {
            Real acc = Real(0);
            for (std::size_t c2 = 0; c2 < dc.cols; ++c2) acc += dc(r, c2) * yv(r, c2);
            d[r] -= acc / svv[r];
          }
        }
      });
}

/// out[r][j] = a[r][cols[r*k + j]], giving [n,k].
template <class Real>
Tensor<Real> gather_cols(const Tensor<Real>& a, std::span<const std::uint32_t> cols,
                         std::size_t k) {
  const auto& x = a.value();
  if (cols.size() != x.rows * k) {
    throw ContractError("gather_cols: index table size " +
                        std::to_string(cols.size()) + " does not match rows " +
                        std::to_string(x.rows) + " x k " + std::to_string(k));
  }
  Matrix<Real> y(x.rows, k);
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t j = 0; j < k; ++j) {
      const auto c = cols[r * k + j];
      if (c >= x.cols) {
        throw ContractError("gather_cols: column " + std::to_string(c) +
                            " out of range for " + shape_str(x));
      }
      y(r, j) = x(r, c);
    }
  const auto ia = a.id();
  std::vector<std::uint32_t> idx(cols.begin(), cols.end());
  return a.graph().push("gather_cols", std::move(y), a.requires_grad(),
                        [ia, k, idx = std::move(idx)](Graph<Real>& g, std::size_t self) {
                          const auto& dy = g.node(self).grad;
                          auto& dx = g.grad_of(ia);
                          for (std::size_t r = 0; r < dy.rows; ++r)
                            for (std::size_t j = 0; j < k; ++j)
                              dx(r, idx[r * k + j]) += dy(r, j);
                        });
}

/// out[i] = a[rows[i]], giving [q,m].
template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& a, std::span<const std::uint32_t> rows) {
  const auto& x = a.value();
  Matrix<Real> y(rows.size(), x.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows) {
      throw ContractError("gather_rows: row " + std::to_string(rows[i]) +
                          " out of range for " + shape_str(x));
    }
    std::copy(x.row(rows[i]).begin(), x.row(rows[i]).end(), y.row(i).begin());
  }
  const auto ia = a.id();
  std::vector<std::uint32_t> idx(rows.begin(), rows.end());
  return a.graph().push("gather_rows", std::move(y), a.requires_grad(),
                        [ia, idx = std::move(idx)](Graph<Real>& g, std::size_t self) {
                          const auto& dy = g.node(self).grad;
                          auto& dx = g.grad_of(ia);
                          for (std::size_t i = 0; i < idx.size(); ++i) {
                            auto dst = dx.row(idx[i]);
                            const auto src = dy.row(i);
                            for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                          }
                        });
}

/// [a | b] column-wise.
template <class Real>
Tensor<Real> concat_cols(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_graph("concat_cols", a, b);
  if (a.rows() != b.rows()) {
    throw ContractError("concat_cols: row mismatch " + shape_str(a.value()) +
                        " vs " + shape_str(b.value()));
  }
  const std::size_t ca = a.cols(), cb = b.cols();
  Matrix<Real> y(a.rows(), ca + cb);
  for (std::size_t r = 0; r < y.rows; ++r) {
    std::copy(a.value().row(r).begin(), a.value().row(r).end(), y.row(r).begin());
    std::copy(b.value().row(r).begin(), b.value().row(r).end(),
              y.row(r).begin() + static_cast<std::ptrdiff_t>(ca));
  }
  const auto ia = a.id(), ib = b.id();
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  return a.graph().push("concat_cols", std::move(y), ra || rb,
                        [=](Graph<Real>& g, std::size_t self) {
                          const auto& dy = g.node(self).grad;
                          for (std::size_t r = 0; r < dy.rows; ++r) {
                            if (ra) {
                              auto d = g.grad_of(ia).row(r);
                              for (std::size_t c = 0; c < ca; ++c) d[c] += dy(r, c);
                            }
                            if (rb) {
                              auto d = g.grad_of(ib).row(r);
                              for (std::size_t c = 0; c < cb; ++c) d[c] += dy(r, ca + c);
                            }
                          }
                        });
}

/// [a ; b] row-wise.
template <class Real>
Tensor<Real> concat_rows(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_graph("concat_rows", a, b);
  if (a.cols() != b.cols()) {
    throw ContractError("concat_rows: column mismatch " + shape_str(a.value()) +
                        " vs " + shape_str(b.value()));
  }
  Matrix<Real> y(a.rows() + b.rows(), a.cols());
  std::copy(a.value().data.begin(), a.value().data.end(), y.data.begin());
  std::copy(b.value().data.begin(), b.value().data.end(),
            y.data.begin() + static_cast<std::ptrdiff_t>(a.value().size()));
  const auto ia = a.id(), ib = b.id();
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  const std::size_t na = a.value().size();
  return a.graph().push("concat_rows", std::move(y), ra || rb,
                        [=](Graph<Real>& g, std::size_t self) {
                          const auto& dy = g.node(self).grad.data;
                          if (ra) {
                            auto& d = g.grad_of(ia).data;
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
                          }
                          if (rb) {
                            auto& d = g.grad_of(ib).data;
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[na + i];
                          }
                        });
}

/// Row-wise inner products of equally shaped operands -> [n,1].
template <class Real>
Tensor<Real> rowwise_dot(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_graph("rowwise_dot", a, b);
  detail::require_same_shape("rowwise_dot", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  Matrix<Real> y(av.rows, 1);
  for (std::size_t r = 0; r < av.rows; ++r) {
    Real s = Real(0);
    for (std::size_t c = 0; c < av.cols; ++c) s += av(r, c) * bv(r, c);
    y.data[r] = s;
  }
  const auto ia = a.id(), ib = b.id();
  const bool ra = a.requires_grad(), rb = b.requires_grad();
  return a.graph().push("rowwise_dot", std::move(y), ra || rb,
                        [=](Graph<Real>& g, std::size_t self) {
                          const auto& dy = g.node(self).grad.data;
                          const auto& x1 = g.node(ia).value;
                          const auto& x2 = g.node(ib).value;
                          if (ra) {
                            auto& d = g.grad_of(ia);
                            for (std::size_t r = 0; r < d.rows; ++r)
                              for (std::size_t c = 0; c < d.cols; ++c)
                                d(r, c) += dy[r] * x2(r, c);
                          }
                          if (rb) {
                            auto& d = g.grad_of(ib);
                            for (std::size_t r = 0; r < d.rows; ++r)
                              for (std::size_t c = 0; c < d.cols; ++c)
                                d(r, c) += dy[r] * x1(r, c);
                          }
                        });
}

struct Cell {
  std::uint32_t row;
  std::uint32_t col;
  friend auto operator<=>(const Cell&, const Cell&) = default;
};

/// Copy of base with base(cells[i]) replaced by values[i]. Overwritten base
/// entries receive no gradient. Cells must be distinct.
template <class Real>
Tensor<Real> masked_assign(const Tensor<Real>& base, std::span<const Cell> cells,
                           const Tensor<Real>& values) {
  detail::require_same_graph("masked_assign", base, values);
  if (values.cols() != 1 || values.rows() != cells.size()) {
    throw ContractError("masked_assign: values shape " +
                        shape_str(values.value()) + " does not match " +
                        std::to_string(cells.size()) + " cells");
  }
  Matrix<Real> y = base.value();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells[i].row >= y.rows || cells[i].col >= y.cols) {
      throw ContractError("masked_assign: cell out of range for " + shape_str(y));
    }
    y(cells[i].row, cells[i].col) = values.value().data[i];
  }
  const auto ib = base.id(), iv = values.id();
  const bool rb = base.requires_grad(), rv = values.requires_grad();
  std::vector<Cell> cs(cells.begin(), cells.end());
  return base.graph().push(
      "masked_assign", std::move(y), rb || rv,
      [=, cs = std::move(cs)](Graph<Real>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        if (rb) {
          Matrix<Real> pass = dy;
          for (const auto& c : cs) pass(c.row, c.col) = Real(0);
          auto& d = g.grad_of(ib).data;
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += pass.data[i];
        }
        if (rv) {
          auto& d = g.grad_of(iv).data;
          for (std::size_t i = 0; i < cs.size(); ++i) d[i] += dy(cs[i].row, cs[i].col);
        }
      });
}

// ---------------------------------------------------------------------------
// MLP blocks

enum class Activation { tanh, identity };

template <class Real>
Tensor<Real> activate(const Tensor<Real>& x, Activation act) {
  switch (act) {
    case Activation::tanh:
      return tanh(x);
    case Activation::identity:
      return x;
  }
  return x;
}

template <class Real>
Tensor<Real> affine(const Tensor<Real>& x, const Tensor<Real>& w,
                    const Tensor<Real>& b) {
  return add_bias(matmul(x, w), b);
}

/// affine -> nonlinearity -> affine
template <class Real>
Tensor<Real> two_layer_mlp(const Tensor<Real>& x, const Tensor<Real>& w1,
                           const Tensor<Real>& b1, const Tensor<Real>& w2,
                           const Tensor<Real>& b2,
                           Activation act = Activation::tanh) {
  return affine(activate(affine(x, w1, b1), act), w2, b2);
}

/// Layer widths of a feed-forward stack, input first.
struct MlpShape {
  std::vector<std::size_t> widths;
  Activation activation = Activation::tanh;

  std::size_t depth() const { return widths.empty() ? 0 : widths.size() - 1; }
  std::size_t in_dim() const { return widths.front(); }
  std::size_t out_dim() const { return widths.back(); }
};

/// Registers `prefix.<i>.W` / `prefix.<i>.b`, weights uniform in
/// +-1/sqrt(fan_in), biases zero.
template <class Real>
void register_mlp(ParamStore<Real>& store, const std::string& prefix,
                  const MlpShape& shape, Rng& rng) {
  if (shape.depth() < 1) throw ContractError("MLP needs at least one layer");
  for (std::size_t i = 0; i < shape.depth(); ++i) {
    const std::size_t fan_in = shape.widths[i], fan_out = shape.widths[i + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Matrix<Real> w(fan_in, fan_out);
    for (auto& v : w.data) v = static_cast<Real>(rng.uniform(-bound, bound));
    store.add(prefix + "." + std::to_string(i) + ".W", std::move(w), true);
    store.add(prefix + "." + std::to_string(i) + ".b", Matrix<Real>(1, fan_out),
              false);
  }
}

template <class Real>
Tensor<Real> mlp_forward(Graph<Real>& g, ParamStore<Real>& store,
                         const std::string& prefix, const MlpShape& shape,
                         const Tensor<Real>& x) {
  if (x.cols() != shape.in_dim()) {
    throw ContractError(prefix + ": input width " + std::to_string(x.cols()) +
                        " does not match " + std::to_string(shape.in_dim()));
  }
  auto layer = [&](std::size_t i, const Tensor<Real>& in) {
    const auto p = prefix + "." + std::to_string(i);
    return affine(in, g.param(store.at(p + ".W")), g.param(store.at(p + ".b")));
  };
  if (shape.depth() == 2) {
    const auto p0 = prefix + ".0", p1 = prefix + ".1";
    return two_layer_mlp(x, g.param(store.at(p0 + ".W")),
                         g.param(store.at(p0 + ".b")),
                         g.param(store.at(p1 + ".W")),
                         g.param(store.at(p1 + ".b")), shape.activation);
  }
  Tensor<Real> h = x;
  for (std::size_t i = 0; i < shape.depth(); ++i) {
    h = layer(i, h);
    if (i + 1 < shape.depth()) h = activate(h, shape.activation);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Gradient checking

struct ParamCheck {
  std::string name;
  double rel_err = 0.0;
  double analytic_norm = 0.0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_err = 0.0;
  bool pass = true;
};

/// Compares backward() against central differences for every trainable
/// parameter in `names` (all trainable parameters when empty).
///
/// The error of one parameter tensor is ||a - n|| / max(||a||, ||n||), the
/// absolute ||a - n|| when both norms fall below 1e-8.
template <class LossFn>
GradCheckReport gradient_check(LossFn&& loss_fn, ParamStore<double>& store,
                               const std::vector<std::string>& names,
                               double step, double tolerance) {
  std::vector<Parameter<double>*> targets;
  if (names.empty()) {
    for (auto& p : store)
      if (p.trainable) targets.push_back(&p);
  } else {
    for (const auto& n : names) targets.push_back(&store.at(n));
  }

  store.zero_grad();
  {
    Graph<double> g;
    auto loss = loss_fn(g);
    g.backward(loss);
  }

  auto eval = [&](const std::string& pname) {
    Graph<double> g;
    try {
      return loss_fn(g).item();
    } catch (const NumericError& e) {
      throw NumericError("gradient_check: perturbing '" + pname + "': " + e.what());
    }
  };

  GradCheckReport report;
  for (Parameter<double>* p : targets) {
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value.data[i];
      p->value.data[i] = orig + step;
      const double up = eval(p->name);
      p->value.data[i] = orig - step;
      const double down = eval(p->name);
      p->value.data[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = p->grad.data[i];
      if (!std::isfinite(numeric)) {
        throw NumericError("gradient_check: non-finite difference for '" +
                           p->name + "'");
      }
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
    }
    const double denom = std::max(std::sqrt(a2), std::sqrt(n2));
    const double err =
        denom < 1e-8 ? std::sqrt(diff2) : std::sqrt(diff2) / denom;
    report.params.push_back({p->name, err, std::sqrt(a2)});
    report.max_rel_err = std::max(report.max_rel_err, err);
  }
  report.pass = report.max_rel_err <= tolerance;
  return report;
}

}  // namespace mcad
