#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vcap/errors.hpp"
#include "vcap/tensor.hpp"

namespace vcap {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Shape& shape() const;
  std::span<const T> value() const;
  std::size_t size() const { return value().size(); }
  std::size_t rows() const { return shape().empty() ? 0 : shape()[0]; }
  std::size_t cols() const { return shape().size() < 2 ? 1 : shape()[1]; }
  T scalar() const { return value()[0]; }
  T operator[](std::size_t i) const { return value()[i]; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run reverse-mode tape. Nodes are appended in execution order,
/// so reverse iteration is a valid topological order for backward.
/// A tape built with record=false keeps values only (inference).
template <class T>
class Tape {
 public:
  using Rule = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Shape shape, std::vector<T> value) {
    if (value.size() != shape_size(shape))
      throw ShapeError("constant data length does not match shape " + shape_str(shape));
    return push(std::move(shape), std::move(value), false, nullptr);
  }
  Var<T> constant(const Tensor<T>& t) { return constant(t.shape, t.data); }
  Var<T> zeros(std::size_t n) { return constant({n}, std::vector<T>(n, T{0})); }
  Var<T> scalar(T x) { return constant({1}, {x}); }

  /// Leaf for a parameter. Repeated calls within one tape return the same node.
  Var<T> param(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var<T>(this, it->second);
    auto v = push(p.value.shape, p.value.data, record_, nullptr);
    nodes_[v.id()].param = &p;
    param_nodes_[&p] = v.id();
    return v;
  }

  /// Append an op output. `needs_grad` is true when any input needs a gradient;
  /// the rule is dropped otherwise (or when not recording).
  Var<T> push(Shape shape, std::vector<T> value, bool needs_grad, Rule rule) {
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.needs_grad = record_ && needs_grad;
    if (n.needs_grad) n.rule = std::move(rule);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
  std::span<const T> value(std::size_t id) const { return nodes_[id].value; }
  bool needs(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Gradient buffer of a node, zero-initialized on first use.
  std::vector<T>& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return n.grad;
  }

  /// Accumulate d(loss)/d(parameter) into every Parameter reached from `loss`,
  /// scaled by `seed`. The tape is consumed.
  void backward(const Var<T>& loss, T seed = T{1}) {
    if (!record_) throw ValueError("backward on a non-recording tape");
    if (consumed_) throw ValueError("tape already consumed by backward");
    if (loss.size() != 1) throw ValueError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    consumed_ = true;
    if (!nodes_[loss.id()].needs_grad) return;
    grad(loss.id())[0] += seed;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.grad.empty() || !n.needs_grad) continue;
      if (n.rule) n.rule(*this, i);
      if (n.param) {
        auto& g = n.param->grad.data;
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
      }
    }
  }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool needs_grad = false;
    Parameter<T>* param = nullptr;
    Rule rule;
  };

  bool record_;
  bool consumed_ = false;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
};

template <class T>
const Shape& Var<T>::shape() const {
  return tape_->shape(id_);
}
template <class T>
std::span<const T> Var<T>::value() const {
  return tape_->value(id_);
}

namespace detail {

template <class T>
bool any_needs(std::initializer_list<Var<T>> vars) {
  for (const auto& v : vars)
    if (v.tape().needs(v.id())) return true;
  return false;
}

inline void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// y = W x + b with W [h x k].
template <class T>
Var<T> affine(const Var<T>& x, const Var<T>& W, const Var<T>& b) {
  auto& tp = x.tape();
  detail::require(W.shape().size() == 2, "affine", "W must be a matrix, got " + shape_str(W.shape()));
  const std::size_t h = W.shape()[0], k = W.shape()[1];
  detail::require(x.size() == k, "affine", "x has " + std::to_string(x.size()) + " entries, W expects " + std::to_string(k));
  detail::require(b.size() == h, "affine", "b has " + std::to_string(b.size()) + " entries, W expects " + std::to_string(h));
  auto xv = x.value(), wv = W.value(), bv = b.value();
  std::vector<T> y(h);
  for (std::size_t i = 0; i < h; ++i) {
    const T* w = wv.data() + i * k;
    T acc = bv[i];
    for (std::size_t j = 0; j < k; ++j) acc += w[j] * xv[j];
    y[i] = acc;
  }
  const auto xi = x.id(), wi = W.id(), bi = b.id();
  return tp.push({h}, std::move(y), detail::any_needs({x, W, b}), [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(self);
    if (t.needs(bi)) {
      auto& gb = t.grad(bi);
      for (std::size_t i = 0; i < h; ++i) gb[i] += gy[i];
    }
    if (t.needs(wi)) {
      auto& gw = t.grad(wi);
      auto xv2 = t.value(xi);
      for (std::size_t i = 0; i < h; ++i) {
        T* g = gw.data() + i * k;
        for (std::size_t j = 0; j < k; ++j) g[j] += gy[i] * xv2[j];
      }
    }
    if (t.needs(xi)) {
      auto& gx = t.grad(xi);
      auto wv2 = t.value(wi);
      for (std::size_t i = 0; i < h; ++i) {
        const T* w = wv2.data() + i * k;
        for (std::size_t j = 0; j < k; ++j) gx[j] += gy[i] * w[j];
      }
    }
  });
}

/// y = W x with W [h x k].
template <class T>
Var<T> matvec(const Var<T>& W, const Var<T>& x) {
  auto& tp = x.tape();
  detail::require(W.shape().size() == 2, "matvec", "W must be a matrix");
  const std::size_t h = W.shape()[0], k = W.shape()[1];
  detail::require(x.size() == k, "matvec", "inner dimension mismatch");
  auto xv = x.value(), wv = W.value();
  std::vector<T> y(h);
  for (std::size_t i = 0; i < h; ++i) {
    const T* w = wv.data() + i * k;
    T acc{0};
    for (std::size_t j = 0; j < k; ++j) acc += w[j] * xv[j];
    y[i] = acc;
  }
  const auto xi = x.id(), wi = W.id();
  return tp.push({h}, std::move(y), detail::any_needs({x, W}), [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(self);
    if (t.needs(wi)) {
      auto& gw = t.grad(wi);
      auto xv2 = t.value(xi);
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < k; ++j) gw[i * k + j] += gy[i] * xv2[j];
    }
    if (t.needs(xi)) {
      auto& gx = t.grad(xi);
      auto wv2 = t.value(wi);
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < k; ++j) gx[j] += gy[i] * wv2[i * k + j];
    }
  });
}

/// y = M^T a with M [k x d], a [k]: a weighted sum of rows.
template <class T>
Var<T> matvec_t(const Var<T>& M, const Var<T>& a) {
  auto& tp = a.tape();
  detail::require(M.shape().size() == 2, "matvec_t", "M must be a matrix");
  const std::size_t k = M.shape()[0], d = M.shape()[1];
  detail::require(a.size() == k, "matvec_t", "weight count does not match rows");
  auto mv = M.value(), av = a.value();
  std::vector<T> y(d, T{0});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j) y[j] += av[i] * mv[i * d + j];
  const auto mi = M.id(), ai = a.id();
  return tp.push({d}, std::move(y), detail::any_needs({M, a}), [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(self);
    if (t.needs(mi)) {
      auto& gm = t.grad(mi);
      auto av2 = t.value(ai);
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < d; ++j) gm[i * d + j] += av2[i] * gy[j];
    }
    if (t.needs(ai)) {
      auto& ga = t.grad(ai);
      auto mv2 = t.value(mi);
      for (std::size_t i = 0; i < k; ++i) {
        T acc{0};
        for (std::size_t j = 0; j < d; ++j) acc += mv2[i * d + j] * gy[j];
        ga[i] += acc;
      }
    }
  });
}

/// Y = X W^T (+ b) applied to every row of X [k x d], W [h x d].
template <class T>
Var<T> linear_rows(const Var<T>& X, const Var<T>& W, const Var<T>* b = nullptr) {
  auto& tp = X.tape();
  detail::require(X.shape().size() == 2 && W.shape().size() == 2, "linear_rows", "X and W must be matrices");
  const std::size_t k = X.shape()[0], d = X.shape()[1], h = W.shape()[0];
  detail::require(W.shape()[1] == d, "linear_rows",
                  "row width " + std::to_string(d) + " does not match W " + shape_str(W.shape()));
  if (b) detail::require(b->size() == h, "linear_rows", "bias length mismatch");
  auto xv = X.value(), wv = W.value();
  std::vector<T> y(k * h);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t i = 0; i < h; ++i) {
      T acc = b ? b->value()[i] : T{0};
      for (std::size_t j = 0; j < d; ++j) acc += wv[i * d + j] * xv[r * d + j];
      y[r * h + i] = acc;
    }
  const auto xi = X.id(), wi = W.id();
  const bool has_b = b != nullptr;
  const std::size_t bi = has_b ? b->id() : 0;
  const bool needs = detail::any_needs({X, W}) || (has_b && tp.needs(bi));
  return tp.push({k, h}, std::move(y), needs, [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(self);
    if (has_b && t.needs(bi)) {
      auto& gb = t.grad(bi);
      for (std::size_t r = 0; r < k; ++r)
        for (std::size_t i = 0; i < h; ++i) gb[i] += gy[r * h + i];
    }
    if (t.needs(wi)) {
      auto& gw = t.grad(wi);
      auto xv2 = t.value(xi);
      for (std::size_t r = 0; r < k; ++r)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < d; ++j) gw[i * d + j] += gy[r * h + i] * xv2[r * d + j];
    }
    if (t.needs(xi)) {
      auto& gx = t.grad(xi);
      auto wv2 = t.value(wi);
      for (std::size_t r = 0; r < k; ++r)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += gy[r * h + i] * wv2[i * d + j];
    }
  });
}

template <class T>
Var<T> linear_rows(const Var<T>& X, const Var<T>& W, const Var<T>& b) {
  return linear_rows(X, W, &b);
}

/// C = A B^T with A [p x d], B [q x d].
template <class T>
Var<T> matmul_t(const Var<T>& A, const Var<T>& B) {
  return linear_rows(A, B);
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <class T, class F, class G>
Var<T> unary(const Var<T>& x, F f, G dfdy_dx) {
  auto& tp = x.tape();
  auto xv = x.value();
  std::vector<T> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  const auto xi = x.id();
  return tp.push(x.shape(), std::move(y), tp.needs(xi), [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(self);
    auto yv = t.value(self);
    auto xv2 = t.value(xi);
    auto& gx = t.grad(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * dfdy_dx(xv2[i], yv[i]);
  });
}

template <class T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a.size() == b.size(), op,
          "size mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

template <class T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return T{1} / (T{1} + std::exp(-v)); }, [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <class T>
Var<T> scale(const Var<T>& x, T c) {
  return detail::unary(x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "add");
  auto& tp = a.tape();
  auto av = a.value(), bv = b.value();
  std::vector<T> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  const auto ai = a.id(), bi = b.id();
  return tp.push(a.shape(), std::move(y), detail::any_needs({a, b}), [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(self);
    for (auto id : {ai, bi}) {
      if (!t.needs(id)) continue;
      auto& g = t.grad(id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return add(a, scale(b, T{-1}));
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "mul");
  auto& tp = a.tape();
  auto av = a.value(), bv = b.value();
  std::vector<T> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  const auto ai = a.id(), bi = b.id();
  return tp.push(a.shape(), std::move(y), detail::any_needs({a, b}), [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(self);
    if (t.needs(ai)) {
      auto& g = t.grad(ai);
      auto bv2 = t.value(bi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * bv2[i];
    }
    if (t.needs(bi)) {
      auto& g = t.grad(bi);
      auto av2 = t.value(ai);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * av2[i];
    }
  });
}

/// M + 1 v^T: adds v to every row of M [k x d].
template <class T>
Var<T> add_rowwise(const Var<T>& M, const Var<T>& v) {
  auto& tp = M.tape();
  detail::require(M.shape().size() == 2 && M.shape()[1] == v.size(), "add_rowwise", "row width mismatch");
  const std::size_t k = M.shape()[0], d = M.shape()[1];
  auto mv = M.value(), vv = v.value();
  std::vector<T> y(k * d);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = mv[r * d + j] + vv[j];
  const auto mi = M.id(), vi = v.id();
  return tp.push(M.shape(), std::move(y), detail::any_needs({M, v}), [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(self);
    if (t.needs(mi)) {
      auto& g = t.grad(mi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    }
    if (t.needs(vi)) {
      auto& g = t.grad(vi);
      for (std::size_t r = 0; r < k; ++r)
        for (std::size_t j = 0; j < d; ++j) g[j] += gy[r * d + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Structural

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  auto& tp = parts.front().tape();
  std::vector<T> y;
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (id, length)
  bool needs = false;
  for (const auto& p : parts) {
    auto v = p.value();
    y.insert(y.end(), v.begin(), v.end());
    spans.emplace_back(p.id(), v.size());
    needs = needs || tp.needs(p.id());
  }
  const std::size_t n = y.size();
  return tp.push({n}, std::move(y), needs, [spans](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(self);
    std::size_t off = 0;
    for (auto [id, len] : spans) {
      if (t.needs(id)) {
        auto& g = t.grad(id);
        for (std::size_t i = 0; i < len; ++i) g[i] += gy[off + i];
      }
      off += len;
    }
  });
}

template <class T>
Var<T> slice(const Var<T>& x, std::size_t offset, std::size_t len) {
  detail::require(offset + len <= x.size() && len > 0, "slice", "range out of bounds");
  auto& tp = x.tape();
  auto xv = x.value();
  std::vector<T> y(xv.begin() + offset, xv.begin() + offset + len);
  const auto xi = x.id();
  return tp.push({len}, std::move(y), tp.needs(xi), [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(self);
    auto& g = t.grad(xi);
    for (std::size_t i = 0; i < len; ++i) g[offset + i] += gy[i];
  });
}

/// Row r of M [k x d] as a vector (embedding lookup).
template <class T>
Var<T> row(const Var<T>& M, std::size_t r) {
  detail::require(M.shape().size() == 2 && r < M.shape()[0], "row",
                  "row " + std::to_string(r) + " out of range for " + shape_str(M.shape()));
  const std::size_t d = M.shape()[1];
  auto& tp = M.tape();
  auto mv = M.value();
  std::vector<T> y(mv.begin() + r * d, mv.begin() + (r + 1) * d);
  const auto mi = M.id();
  return tp.push({d}, std::move(y), tp.needs(mi), [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(self);
    auto& g = t.grad(mi);
    for (std::size_t j = 0; j < d; ++j) g[r * d + j] += gy[j];
  });
}

template <class T>
Var<T> stack_rows(const std::vector<Var<T>>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no inputs");
  const std::size_t d = rows.front().size();
  for (const auto& r : rows) detail::require(r.size() == d, "stack_rows", "rows differ in width");
  auto out = concat(rows);
  auto& tp = out.tape();
  // Reshape view: a zero-cost identity node with matrix shape.
  auto v = out.value();
  const auto oi = out.id();
  return tp.push({rows.size(), d}, std::vector<T>(v.begin(), v.end()), tp.needs(oi),
                 [oi](Tape<T>& t, std::size_t self) {
                   const auto& gy = t.grad(self);
                   auto& g = t.grad(oi);
                   for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
                 });
}

/// Column-wise mean over the rows of M [k x d].
template <class T>
Var<T> mean_rows(const Var<T>& M) {
  detail::require(M.shape().size() == 2, "mean_rows", "M must be a matrix");
  const std::size_t k = M.shape()[0], d = M.shape()[1];
  auto& tp = M.tape();
  auto mv = M.value();
  std::vector<T> y(d, T{0});
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t j = 0; j < d; ++j) y[j] += mv[r * d + j];
  for (auto& v : y) v /= static_cast<T>(k);
  const auto mi = M.id();
  return tp.push({d}, std::move(y), tp.needs(mi), [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(self);
    auto& g = t.grad(mi);
    const T inv = T{1} / static_cast<T>(k);
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] += gy[j] * inv;
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(const Var<T>& x) {
  auto& tp = x.tape();
  T acc{0};
  for (T v : x.value()) acc += v;
  const auto xi = x.id();
  return tp.push({1}, {acc}, tp.needs(xi), [=](Tape<T>& t, std::size_t self) {
    const T gy = t.grad(self)[0];
    auto& g = t.grad(xi);
    for (auto& v : g) v += gy;
  });
}

template <class T>
Var<T> dot(const Var<T>& a, const Var<T>& b) {
  return sum(mul(a, b));
}

/// Sum of scalar nodes, accumulated in input order.
template <class T>
Var<T> add_n(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("add_n: no inputs");
  auto& tp = xs.front().tape();
  T acc{0};
  std::vector<std::size_t> ids;
  bool needs = false;
  for (const auto& x : xs) {
    detail::require(x.size() == 1, "add_n", "inputs must be scalars");
    acc += x.scalar();
    ids.push_back(x.id());
    needs = needs || tp.needs(x.id());
  }
  return tp.push({1}, {acc}, needs, [ids](Tape<T>& t, std::size_t self) {
    const T gy = t.grad(self)[0];
    for (auto id : ids)
      if (t.needs(id)) t.grad(id)[0] += gy;
  });
}

template <class T>
Var<T> mean_n(const std::vector<Var<T>>& xs) {
  return scale(add_n(xs), T{1} / static_cast<T>(xs.size()));
}

// ---------------------------------------------------------------------------
// Probability

/// Max-subtracted softmax on raw values (no tape).
template <class T>
std::vector<T> softmax_values(std::span<const T> z) {
  if (z.empty()) throw ShapeError("softmax: empty input");
  const T m = *std::max_element(z.begin(), z.end());
  std::vector<T> y(z.size());
  T s{0};
  for (std::size_t i = 0; i < z.size(); ++i) s += (y[i] = std::exp(z[i] - m));
  for (auto& v : y) v /= s;
  return y;
}

/// log softmax on raw values (no tape).
template <class T>
std::vector<T> log_softmax_values(std::span<const T> z) {
  if (z.empty()) throw ShapeError("log_softmax: empty input");
  const T m = *std::max_element(z.begin(), z.end());
  T s{0};
  for (T v : z) s += std::exp(v - m);
  const T lse = m + std::log(s);
  std::vector<T> y(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) y[i] = z[i] - lse;
  return y;
}

template <class T>
Var<T> softmax(const Var<T>& z) {
  auto& tp = z.tape();
  auto y = softmax_values<T>(z.value());
  const auto zi = z.id();
  return tp.push(z.shape(), std::move(y), tp.needs(zi), [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(self);
    auto yv = t.value(self);
    T inner{0};
    for (std::size_t i = 0; i < gy.size(); ++i) inner += gy[i] * yv[i];
    auto& g = t.grad(zi);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += yv[i] * (gy[i] - inner);
  });
}

/// log softmax(logits)[target] as a scalar node.
template <class T>
Var<T> log_prob(const Var<T>& logits, std::size_t target) {
  if (target >= logits.size())
    throw ValueError("target id " + std::to_string(target) + " out of range for " +
                     std::to_string(logits.size()) + " classes");
  auto& tp = logits.tape();
  auto ls = log_softmax_values<T>(logits.value());
  const auto li = logits.id();
  return tp.push({1}, {ls[target]}, tp.needs(li), [=](Tape<T>& t, std::size_t self) {
    const T gy = t.grad(self)[0];
    auto p = softmax_values<T>(t.value(li));
    auto& g = t.grad(li);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy * ((i == target ? T{1} : T{0}) - p[i]);
  });
}

/// -log softmax(logits)[target].
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::size_t target) {
  return scale(log_prob(logits, target), T{-1});
}

/// v / ||v||. A zero vector has no direction and is rejected.
template <class T>
Var<T> l2_normalize(const Var<T>& v) {
  auto& tp = v.tape();
  auto vv = v.value();
  T ss{0};
  for (T x : vv) ss += x * x;
  const T norm = std::sqrt(ss);
  if (!(norm > T{0})) throw ValueError("l2_normalize: zero vector");
  std::vector<T> y(vv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = vv[i] / norm;
  const auto vi = v.id();
  return tp.push(v.shape(), std::move(y), tp.needs(vi), [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(self);
    auto yv = t.value(self);
    T inner{0};
    for (std::size_t i = 0; i < gy.size(); ++i) inner += gy[i] * yv[i];
    auto& g = t.grad(vi);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (gy[i] - yv[i] * inner) / norm;
  });
}

/// Hardest-negative bidirectional hinge over a similarity matrix S [B x B]
/// whose diagonal holds the positive pairs. Rows index videos, columns
/// captions. Mean over the batch of
///   max_j [m + S(i,j) - S(i,i)]_+  +  max_j [m + S(j,i) - S(i,i)]_+,  j != i.
/// Hardest negatives are picked by similarity, ties to the lowest index.
template <class T>
Var<T> hardest_negative_hinge(const Var<T>& S, T margin) {
  detail::require(S.shape().size() == 2 && S.shape()[0] == S.shape()[1], "hardest_negative_hinge",
                  "similarity matrix must be square");
  const std::size_t B = S.shape()[0];
  if (B < 2) throw ValueError("hardest_negative_hinge: batch needs at least 2 pairs");
  auto sv = S.value();
  struct Term {
    std::size_t pos, neg;
  };
  std::vector<Term> active;
  T total{0};
  for (std::size_t i = 0; i < B; ++i) {
    std::size_t jc = B, jv = B;
    for (std::size_t j = 0; j < B; ++j) {
      if (j == i) continue;
      if (jc == B || sv[i * B + j] > sv[i * B + jc]) jc = j;
      if (jv == B || sv[j * B + i] > sv[jv * B + i]) jv = j;
    }
    const T pos = sv[i * B + i];
    const T hc = margin + sv[i * B + jc] - pos;
    const T hv = margin + sv[jv * B + i] - pos;
    if (hc > T{0}) {
      total += hc;
      active.push_back({i * B + i, i * B + jc});
    }
    if (hv > T{0}) {
      total += hv;
      active.push_back({i * B + i, jv * B + i});
    }
  }
  auto& tp = S.tape();
  const auto si = S.id();
  const T inv = T{1} / static_cast<T>(B);
  return tp.push({1}, {total * inv}, tp.needs(si), [=](Tape<T>& t, std::size_t self) {
    const T gy = t.grad(self)[0] * inv;
    auto& g = t.grad(si);
    for (const auto& a : active) {
      g[a.neg] += gy;
      g[a.pos] -= gy;
    }
  });
}

// ---------------------------------------------------------------------------
// Recurrent cell

template <class T>
struct LstmWeights {
  Var<T> W;  // [4H x (in + H)], gate blocks ordered i, f, g, o
  Var<T> b;  // [4H]
};

template <class T>
struct LstmOut {
  Var<T> h;
  Var<T> c;
};

/// c = f*c_prev + i*g, h = o*tanh(c), gates from W [x; h_prev] + b.
template <class T>
LstmOut<T> lstm_cell(const Var<T>& x, const Var<T>& h_prev, const Var<T>& c_prev, const LstmWeights<T>& w) {
  const std::size_t H = h_prev.size();
  detail::require(c_prev.size() == H, "lstm_cell", "h and c sizes differ");
  detail::require(w.W.shape().size() == 2 && w.W.shape()[0] == 4 * H &&
                      w.W.shape()[1] == x.size() + H,
                  "lstm_cell",
                  "weights " + shape_str(w.W.shape()) + " do not fit input " + std::to_string(x.size()) +
                      " and hidden " + std::to_string(H));
  auto z = affine(concat<T>({x, h_prev}), w.W, w.b);
  auto i = sigmoid(slice(z, 0, H));
  auto f = sigmoid(slice(z, H, H));
  auto g = tanh(slice(z, 2 * H, H));
  auto o = sigmoid(slice(z, 3 * H, H));
  auto c = add(mul(f, c_prev), mul(i, g));
  auto h = mul(o, tanh(c));
  return {h, c};
}

}  // namespace vcap
