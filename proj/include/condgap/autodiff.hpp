#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "condgap/tensor.hpp"

// Reverse-mode automatic differentiation over dense Tensors.
//
// A Node is a shared handle to a value plus the closure that pushes an
// upstream gradient into its parents. Graphs are rebuilt every step; leaves
// created with Node::parameter persist and accumulate gradients across
// backward passes until zero_grad().

namespace condgap {

class Node;

namespace detail {

struct NodeState;
using BackwardFn =
    std::function<void(const NodeState& self, const Tensor& grad, std::span<Tensor* const> parent_grads)>;

struct NodeState {
  Tensor value;
  Tensor grad;
  bool has_grad = false;
  bool requires_grad = false;
  bool consumed = false;
  std::string name;
  std::vector<std::shared_ptr<NodeState>> parents;
  BackwardFn backward;
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

class Node {
 public:
  Node() : state_(std::make_shared<detail::NodeState>()) {}
  explicit Node(Tensor value, bool requires_grad = false, std::string name = {})
      : state_(std::make_shared<detail::NodeState>()) {
    state_->value = std::move(value);
    state_->requires_grad = requires_grad;
    state_->name = std::move(name);
  }

  static Node constant(Tensor value) { return Node(std::move(value), false); }
  static Node parameter(Tensor value, std::string name = {}) {
    return Node(std::move(value), true, std::move(name));
  }

  const Tensor& value() const noexcept { return state_->value; }
  /// Direct access for optimizers and checkpoint loading.
  Tensor& mutable_value() noexcept { return state_->value; }
  const Shape& shape() const noexcept { return state_->value.shape(); }
  double item() const { return state_->value.item(); }

  bool requires_grad() const noexcept { return state_->requires_grad; }
  bool is_leaf() const noexcept { return !state_->backward; }
  const std::string& name() const noexcept { return state_->name; }
  void set_name(std::string name) { state_->name = std::move(name); }

  bool has_grad() const noexcept { return state_->has_grad; }
  /// Accumulated gradient; zeros if backward never reached this node.
  Tensor grad() const {
    if (state_->has_grad) return state_->grad;
    return Tensor(state_->value.shape(), 0.0);
  }
  void zero_grad() noexcept {
    state_->has_grad = false;
    state_->grad = Tensor();
  }
  /// Overwrites the accumulated gradient (used when gradients come from
  /// outside the graph, e.g. analytic score terms).
  void set_grad(Tensor g) {
    if (g.shape() != state_->value.shape()) throw ShapeError("set_grad", g.shape(), state_->value.shape());
    state_->grad = std::move(g);
    state_->has_grad = true;
  }

  /// Clears the "backward already ran" flag on this root and the gradients
  /// of every non-leaf node reachable from it.
  void reset_graph();

  detail::NodeState* raw() const noexcept { return state_.get(); }
  const std::shared_ptr<detail::NodeState>& state() const noexcept { return state_; }

 private:
  friend Node make_op(Tensor, std::vector<Node>, detail::BackwardFn);
  std::shared_ptr<detail::NodeState> state_;
};

/// Records an op node. Parents that do not require gradients (and all
/// parents under NoGradGuard) are dropped from the graph.
inline Node make_op(Tensor value, std::vector<Node> parents, detail::BackwardFn fn) {
  Node out;
  out.state_->value = std::move(value);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  out.state_->requires_grad = true;
  out.state_->parents.reserve(parents.size());
  for (auto& p : parents) out.state_->parents.push_back(p.state());
  out.state_->backward = std::move(fn);
  return out;
}

namespace detail {

inline std::vector<NodeState*> topological_order(NodeState* root) {
  std::vector<NodeState*> order;
  std::unordered_map<NodeState*, bool> visited;
  std::vector<std::pair<NodeState*, std::size_t>> stack{{root, 0}};
  visited[root] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeState* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited[parent]) {
        visited[parent] = true;
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

inline void accumulate(Tensor& into, const Tensor& g) {
  auto dst = into.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

/// Propagates d(loss)/d(node) to every node reachable from `loss`.
/// Gradients are accumulated pass-locally and then added to each node's
/// persistent accumulator, so backward on two losses sharing a subgraph
/// yields the same leaf gradients as backward on their sum.
inline void backward(const Node& loss) {
  detail::NodeState* root = loss.raw();
  if (root->value.numel() != 1) {
    throw ShapeError("backward", "loss must be scalar, got shape " + shape_string(root->value.shape()));
  }
  for (std::size_t d : root->value.shape()) {
    if (d != 1) throw ShapeError("backward", "loss must be scalar, got shape " + shape_string(root->value.shape()));
  }
  if (root->consumed) {
    throw std::logic_error("backward: graph already differentiated; rebuild it or call reset_graph()");
  }
  root->consumed = true;
  if (!root->requires_grad) return;

  const auto order = detail::topological_order(root);
  std::unordered_map<detail::NodeState*, Tensor> local;
  local.reserve(order.size());
  local.emplace(root, Tensor(root->value.shape(), 1.0));

  std::vector<Tensor*> parent_grads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::NodeState* node = *it;
    auto found = local.find(node);
    if (found == local.end() || !node->backward) continue;
    parent_grads.assign(node->parents.size(), nullptr);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      detail::NodeState* parent = node->parents[i].get();
      if (!parent->requires_grad) continue;
      auto [slot, inserted] = local.try_emplace(parent);
      if (inserted) slot->second = Tensor(parent->value.shape(), 0.0);
      parent_grads[i] = &slot->second;
    }
    node->backward(*node, found->second, parent_grads);
  }

  for (auto& [node, g] : local) {
    if (node->has_grad) {
      detail::accumulate(node->grad, g);
    } else {
      node->grad = std::move(g);
      node->has_grad = true;
    }
  }
}

inline void Node::reset_graph() {
  for (detail::NodeState* node : detail::topological_order(raw())) {
    if (node->backward) {
      node->has_grad = false;
      node->grad = Tensor();
    }
  }
  state_->consumed = false;
}

namespace ops {

namespace detail_ops {

inline const Shape& broadcast_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.is_scalar_like()) return a.shape();
  if (a.is_scalar_like()) return b.shape();
  throw ShapeError(op, a.shape(), b.shape());
}

/// Accumulates `g` (shape of output) into a parent gradient that may be a
/// broadcast scalar.
inline void reduce_into(Tensor* target, const Tensor& g, double sign = 1.0) {
  if (!target) return;
  auto dst = target->data();
  auto src = g.data();
  if (dst.size() == src.size()) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += sign * src[i];
  } else {
    double s = 0.0;
    for (double v : src) s += v;
    dst[0] += sign * s;
  }
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <class F>
Tensor zip(const char* op, const Tensor& a, const Tensor& b, F f) {
  Tensor out(broadcast_shape(op, a, b));
  const bool sa = a.numel() != out.numel();
  const bool sb = b.numel() != out.numel();
  auto pa = a.data();
  auto pb = b.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = f(pa[sa ? 0 : i], pb[sb ? 0 : i]);
  return out;
}

/// Unary op with derivative expressed through input x and output y.
template <class F, class D>
Node unary(const Node& a, F f, D dfdx) {
  return make_op(map(a.value(), f), {a},
                 [dfdx](const ::condgap::detail::NodeState& self, const Tensor& g, std::span<Tensor* const> pg) {
                   if (!pg[0]) return;
                   auto x = self.parents[0]->value.data();
                   auto y = self.value.data();
                   auto gi = g.data();
                   auto dst = pg[0]->data();
                   for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gi[i] * dfdx(x[i], y[i]);
                 });
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace detail_ops

inline Node add(const Node& a, const Node& b) {
  return make_op(detail_ops::zip("add", a.value(), b.value(), [](double x, double y) { return x + y; }), {a, b},
                 [](const auto&, const Tensor& g, std::span<Tensor* const> pg) {
                   detail_ops::reduce_into(pg[0], g);
                   detail_ops::reduce_into(pg[1], g);
                 });
}

inline Node sub(const Node& a, const Node& b) {
  return make_op(detail_ops::zip("sub", a.value(), b.value(), [](double x, double y) { return x - y; }), {a, b},
                 [](const auto&, const Tensor& g, std::span<Tensor* const> pg) {
                   detail_ops::reduce_into(pg[0], g);
                   detail_ops::reduce_into(pg[1], g, -1.0);
                 });
}

inline Node mul(const Node& a, const Node& b) {
  return make_op(detail_ops::zip("mul", a.value(), b.value(), [](double x, double y) { return x * y; }), {a, b},
                 [](const ::condgap::detail::NodeState& self, const Tensor& g, std::span<Tensor* const> pg) {
                   const Tensor& va = self.parents[0]->value;
                   const Tensor& vb = self.parents[1]->value;
                   if (pg[0]) {
                     detail_ops::reduce_into(pg[0], detail_ops::zip("mul", g, vb, [](double x, double y) { return x * y; }));
                   }
                   if (pg[1]) {
                     detail_ops::reduce_into(pg[1], detail_ops::zip("mul", g, va, [](double x, double y) { return x * y; }));
                   }
                 });
}

inline Node scale(const Node& a, double c) {
  return detail_ops::unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Node add_scalar(const Node& a, double c) {
  return detail_ops::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Node neg(const Node& a) { return scale(a, -1.0); }

inline Node square(const Node& a) {
  return detail_ops::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Node exp(const Node& a) {
  return detail_ops::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

/// Natural log; non-positive inputs produce -inf/NaN rather than an error.
inline Node log(const Node& a) {
  return detail_ops::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Node tanh(const Node& a) {
  return detail_ops::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Node sigmoid(const Node& a) {
  return detail_ops::unary(a, detail_ops::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Node softplus(const Node& a) {
  return detail_ops::unary(a, detail_ops::stable_softplus,
                           [](double x, double) { return detail_ops::stable_sigmoid(x); });
}

inline Node softsign(const Node& a) {
  return detail_ops::unary(a, [](double x) { return x / (1.0 + std::abs(x)); },
                           [](double x, double) {
                             const double d = 1.0 + std::abs(x);
                             return 1.0 / (d * d);
                           });
}

inline Node relu(const Node& a) {
  return detail_ops::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                           [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// Hard clamp; gradient is zero outside [lo, hi].
inline Node clamp(const Node& a, double lo, double hi) {
  return detail_ops::unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                           [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Node matmul(const Node& a, const Node& b) {
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  if (va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0]) {
    throw ShapeError("matmul", va.shape(), vb.shape());
  }
  const std::size_t m = va.shape()[0], k = va.shape()[1], n = vb.shape()[1];
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = va[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * vb[p * n + j];
    }
  return make_op(std::move(out), {a, b},
                 [m, k, n](const ::condgap::detail::NodeState& self, const Tensor& g, std::span<Tensor* const> pg) {
                   const Tensor& A = self.parents[0]->value;
                   const Tensor& B = self.parents[1]->value;
                   if (pg[0]) {
                     Tensor& ga = *pg[0];
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t p = 0; p < k; ++p) {
                         double s = 0.0;
                         for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
                         ga[i * k + p] += s;
                       }
                   }
                   if (pg[1]) {
                     Tensor& gb = *pg[1];
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t p = 0; p < k; ++p) {
                         const double aip = A[i * k + p];
                         if (aip == 0.0) continue;
                         for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
                       }
                   }
                 });
}

/// x·W + b with b a row of length W.cols() added to every row.
inline Node linear(const Node& x, const Node& w, const Node& b) {
  const Tensor& vx = x.value();
  const Tensor& vw = w.value();
  const Tensor& vb = b.value();
  if (vx.rank() != 2 || vw.rank() != 2 || vx.shape()[1] != vw.shape()[0]) {
    throw ShapeError("linear", vx.shape(), vw.shape());
  }
  const std::size_t m = vx.shape()[0], k = vx.shape()[1], n = vw.shape()[1];
  if (vb.numel() != n) throw ShapeError("linear(bias)", vb.shape(), Shape{1, n});
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data().data() + i * n;
    for (std::size_t j = 0; j < n; ++j) row[j] = vb[j];
    for (std::size_t p = 0; p < k; ++p) {
      const double xip = vx[i * k + p];
      if (xip == 0.0) continue;
      const double* wrow = vw.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += xip * wrow[j];
    }
  }
  return make_op(std::move(out), {x, w, b},
                 [m, k, n](const ::condgap::detail::NodeState& self, const Tensor& g, std::span<Tensor* const> pg) {
                   const Tensor& X = self.parents[0]->value;
                   const Tensor& W = self.parents[1]->value;
                   if (pg[0]) {
                     Tensor& gx = *pg[0];
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t p = 0; p < k; ++p) {
                         double s = 0.0;
                         for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * W[p * n + j];
                         gx[i * k + p] += s;
                       }
                   }
                   if (pg[1]) {
                     Tensor& gw = *pg[1];
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t p = 0; p < k; ++p) {
                         const double xip = X[i * k + p];
                         if (xip == 0.0) continue;
                         for (std::size_t j = 0; j < n; ++j) gw[p * n + j] += xip * g[i * n + j];
                       }
                   }
                   if (pg[2]) {
                     Tensor& gbias = *pg[2];
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) gbias[j] += g[i * n + j];
                   }
                 });
}

/// Adds a bias row to every row of a 2-D tensor.
inline Node add_bias(const Node& x, const Node& b) {
  const Tensor& vx = x.value();
  const Tensor& vb = b.value();
  if (vx.rank() != 2 || vb.numel() != vx.shape()[1]) throw ShapeError("add_bias", vx.shape(), vb.shape());
  const std::size_t m = vx.shape()[0], n = vx.shape()[1];
  Tensor out = vx;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += vb[j];
  return make_op(std::move(out), {x, b}, [m, n](const auto&, const Tensor& g, std::span<Tensor* const> pg) {
    if (pg[0]) detail_ops::reduce_into(pg[0], g);
    if (pg[1]) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*pg[1])[j] += g[i * n + j];
    }
  });
}

/// Multiplies every row of a 2-D tensor elementwise by a row vector.
inline Node mul_row(const Node& x, const Node& r) {
  const Tensor& vx = x.value();
  const Tensor& vr = r.value();
  if (vx.rank() != 2 || vr.numel() != vx.shape()[1]) throw ShapeError("mul_row", vx.shape(), vr.shape());
  const std::size_t m = vx.shape()[0], n = vx.shape()[1];
  Tensor out = vx;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= vr[j];
  return make_op(std::move(out), {x, r},
                 [m, n](const ::condgap::detail::NodeState& self, const Tensor& g, std::span<Tensor* const> pg) {
                   const Tensor& X = self.parents[0]->value;
                   const Tensor& R = self.parents[1]->value;
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < n; ++j) {
                       if (pg[0]) (*pg[0])[i * n + j] += g[i * n + j] * R[j];
                       if (pg[1]) (*pg[1])[j] += g[i * n + j] * X[i * n + j];
                     }
                 });
}

/// Concatenates 2-D tensors with equal row counts along columns.
inline Node concat(const std::vector<Node>& parts) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  const std::size_t m = parts.front().value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rank() != 2 || p.value().rows() != m) throw ShapeError("concat", parts.front().shape(), p.shape());
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  Tensor out(Shape{m, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + offset + j] = v[i * widths[k] + j];
    offset += widths[k];
  }
  return make_op(std::move(out), parts,
                 [m, total, widths](const auto&, const Tensor& g, std::span<Tensor* const> pg) {
                   std::size_t offset = 0;
                   for (std::size_t k = 0; k < widths.size(); ++k) {
                     if (pg[k]) {
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < widths[k]; ++j)
                           (*pg[k])[i * widths[k] + j] += g[i * total + offset + j];
                     }
                     offset += widths[k];
                   }
                 });
}

/// Columns [begin, end) of a 2-D tensor.
inline Node slice(const Node& a, std::size_t begin, std::size_t end) {
  const Tensor& v = a.value();
  if (v.rank() != 2 || begin > end || end > v.cols()) {
    throw ShapeError("slice", "columns [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                                  shape_string(v.shape()));
  }
  const std::size_t m = v.rows(), n = v.cols(), w = end - begin;
  Tensor out(Shape{m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = v[i * n + begin + j];
  return make_op(std::move(out), {a}, [m, n, w, begin](const auto&, const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) (*pg[0])[i * n + begin + j] += g[i * w + j];
  });
}

/// Rows [begin, end) of a 2-D tensor.
inline Node slice_rows(const Node& a, std::size_t begin, std::size_t end) {
  const Tensor& v = a.value();
  if (v.rank() != 2 || begin > end || end > v.rows()) {
    throw ShapeError("slice_rows", "rows [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                                       shape_string(v.shape()));
  }
  const std::size_t n = v.cols();
  Tensor out(Shape{end - begin, n},
             std::vector<double>(v.storage().begin() + static_cast<std::ptrdiff_t>(begin * n),
                                 v.storage().begin() + static_cast<std::ptrdiff_t>(end * n)));
  return make_op(std::move(out), {a}, [begin, n](const auto&, const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < g.numel(); ++i) (*pg[0])[begin * n + i] += g[i];
  });
}

inline Node sum(const Node& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return make_op(Tensor::scalar(s), {a}, [](const auto&, const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    const double gv = g[0];
    for (double& d : pg[0]->data()) d += gv;
  });
}

inline Node mean(const Node& a) {
  const double n = static_cast<double>(a.value().numel());
  return scale(sum(a), 1.0 / n);
}

/// Row-wise sum of a 2-D tensor: [m, n] -> [m, 1].
inline Node sum_cols(const Node& a) {
  const Tensor& v = a.value();
  if (v.rank() != 2) throw ShapeError("sum_cols", "expected rank 2, got " + shape_string(v.shape()));
  const std::size_t m = v.rows(), n = v.cols();
  Tensor out(Shape{m, 1});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += v[i * n + j];
  return make_op(std::move(out), {a}, [m, n](const auto&, const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) (*pg[0])[i * n + j] += g[i];
  });
}

/// Row-wise log Σ_j exp(a_ij), [B, K] -> [B, 1].
inline Node logsumexp_cols(const Node& a) {
  const Tensor& v = a.value();
  if (v.rank() != 2) throw ShapeError("logsumexp_cols", "expected rank 2, got " + shape_string(v.shape()));
  const std::size_t m = v.rows(), n = v.cols();
  Tensor out(Shape{m, 1});
  for (std::size_t i = 0; i < m; ++i) {
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) hi = std::max(hi, v[i * n + j]);
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += std::exp(v[i * n + j] - hi);
    out[i] = hi + std::log(acc);
  }
  return make_op(std::move(out), {a}, [m, n](const detail::NodeState& self, const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    const Tensor& x = self.parents[0]->value;
    const Tensor& y = self.value;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) (*pg[0])[i * n + j] += g[i] * std::exp(x[i * n + j] - y[i]);
  });
}

}  // namespace ops

inline Node operator+(const Node& a, const Node& b) { return ops::add(a, b); }
inline Node operator-(const Node& a, const Node& b) { return ops::sub(a, b); }
inline Node operator*(const Node& a, const Node& b) { return ops::mul(a, b); }
inline Node operator-(const Node& a) { return ops::neg(a); }
inline Node operator*(const Node& a, double c) { return ops::scale(a, c); }
inline Node operator*(double c, const Node& a) { return ops::scale(a, c); }
inline Node operator+(const Node& a, double c) { return ops::add_scalar(a, c); }
inline Node operator+(double c, const Node& a) { return ops::add_scalar(a, c); }
inline Node operator-(const Node& a, double c) { return ops::add_scalar(a, -c); }

}  // namespace condgap
