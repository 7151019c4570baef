#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ibpbnn/tensor.hpp"

namespace ibpbnn {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the reverse-mode tape. `backward` reads `grad` and
/// accumulates into the parents' gradients.
struct Node {
  Tensor value;
  Tensor grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Tensor& g) {
    if (!requires_grad) return;
    if (!has_grad) {
      grad = g;
      has_grad = true;
    } else {
      grad += g;
    }
  }
};

/// Handle to a graph node. Cheap to copy; values are immutable once built.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : node_(std::move(n)) {}

  static Var leaf(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }
  static Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
  }
  static Var constant(double v) { return constant(Tensor::scalar(v)); }

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  double item() const { return node_->value.item(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const NodePtr& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  NodePtr node_;
};

/// Gradients of a scalar loss with respect to leaves.
class Gradients {
 public:
  /// Gradient for `v`; zeros of the right shape if `v` did not reach the loss.
  Tensor of(const Var& v) const {
    auto it = grads_.find(v.node().get());
    if (it == grads_.end()) return Tensor::zeros_like(v.value());
    return it->second;
  }
  bool reached(const Var& v) const { return grads_.count(v.node().get()) != 0; }

 private:
  friend Gradients backward(const Var& loss);
  std::unordered_map<const Node*, Tensor> grads_;
};

namespace detail {

inline Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (auto& p : parents) {
    n->requires_grad = n->requires_grad || p.requires_grad();
    n->parents.push_back(p.node());
  }
  if (n->requires_grad) n->backward = std::move(bw);
  return Var(std::move(n));
}

inline const Tensor& pval(const Node& n, std::size_t i) { return n.parents[i]->value; }

}  // namespace detail

inline Gradients backward(const Var& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  // Iterative post-order DFS; `order` ends up topologically sorted.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->has_grad = false;
  Gradients out;
  if (!loss.requires_grad()) return out;
  loss.node()->grad = Tensor(loss.shape(), 1.0);
  loss.node()->has_grad = true;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->has_grad) continue;
    if (n->parents.empty()) {
      out.grads_.emplace(n, n->grad);
    } else if (n->backward) {
      n->backward(*n);
    }
  }
  return out;
}

// Elementwise arithmetic with broadcasting.

inline Var add(const Var& a, const Var& b) {
  return detail::make_node(
      zip_broadcast(a.value(), b.value(), [](double x, double y) { return x + y; }, "add"), {a, b},
      [](Node& n) {
        n.parents[0]->accumulate(reduce_to(n.grad, detail::pval(n, 0).shape()));
        n.parents[1]->accumulate(reduce_to(n.grad, detail::pval(n, 1).shape()));
      });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::make_node(
      zip_broadcast(a.value(), b.value(), [](double x, double y) { return x - y; }, "sub"), {a, b},
      [](Node& n) {
        n.parents[0]->accumulate(reduce_to(n.grad, detail::pval(n, 0).shape()));
        n.parents[1]->accumulate(
            reduce_to(map(n.grad, [](double g) { return -g; }), detail::pval(n, 1).shape()));
      });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::make_node(
      zip_broadcast(a.value(), b.value(), [](double x, double y) { return x * y; }, "mul"), {a, b},
      [](Node& n) {
        const Tensor& x = detail::pval(n, 0);
        const Tensor& y = detail::pval(n, 1);
        if (n.parents[0]->requires_grad) {
          const Tensor gy = zip_broadcast(n.grad, y, [](double g, double v) { return g * v; }, "mul");
          n.parents[0]->accumulate(reduce_to(gy, x.shape()));
        }
        if (n.parents[1]->requires_grad) {
          const Tensor gx = zip_broadcast(n.grad, x, [](double g, double v) { return g * v; }, "mul");
          n.parents[1]->accumulate(reduce_to(gx, y.shape()));
        }
      });
}

inline Var div(const Var& a, const Var& b) {
  return detail::make_node(
      zip_broadcast(a.value(), b.value(), [](double x, double y) { return x / y; }, "div"), {a, b},
      [](Node& n) {
        const Tensor& x = detail::pval(n, 0);
        const Tensor& y = detail::pval(n, 1);
        if (n.parents[0]->requires_grad) {
          const Tensor g = zip_broadcast(n.grad, y, [](double g, double v) { return g / v; }, "div");
          n.parents[0]->accumulate(reduce_to(g, x.shape()));
        }
        if (n.parents[1]->requires_grad) {
          // d(x/y)/dy = -out / y
          const Tensor q = zip_broadcast(n.value, y, [](double o, double v) { return -o / v; }, "div");
          const Tensor g = zip_broadcast(n.grad, q, [](double g, double v) { return g * v; }, "div");
          n.parents[1]->accumulate(reduce_to(g, y.shape()));
        }
      });
}

inline Var scale(const Var& a, double c) {
  return detail::make_node(map(a.value(), [c](double x) { return c * x; }), {a}, [c](Node& n) {
    n.parents[0]->accumulate(map(n.grad, [c](double g) { return c * g; }));
  });
}

inline Var add_scalar(const Var& a, double c) {
  return detail::make_node(map(a.value(), [c](double x) { return x + c; }), {a},
                           [](Node& n) { n.parents[0]->accumulate(n.grad); });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return scale(a, -1.0); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }
inline Var operator+(double c, const Var& a) { return add_scalar(a, c); }
inline Var operator-(const Var& a, double c) { return add_scalar(a, -c); }
inline Var operator-(double c, const Var& a) { return add_scalar(scale(a, -1.0), c); }

namespace detail {

template <class F, class D>
Var unary(const Var& a, F f, D dfdx_from_x_and_out) {
  return make_node(map(a.value(), f), {a}, [d = std::move(dfdx_from_x_and_out)](Node& n) {
    const Tensor& x = pval(n, 0);
    Tensor g(x.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * d(x[i], n.value[i]);
    n.parents[0]->accumulate(g);
  });
}

inline double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Var relu(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(a, detail::stable_sigmoid, [](double, double s) { return s * (1.0 - s); });
}

inline Var softplus(const Var& a) {
  return detail::unary(a, detail::stable_softplus,
                       [](double x, double) { return detail::stable_sigmoid(x); });
}

inline Var log(const Var& a) {
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var exp(const Var& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double e) { return e; });
}

/// log(1 - x), stable for x near zero.
inline Var log1m(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::log1p(-x); }, [](double x, double) { return -1.0 / (1.0 - x); });
}

/// Clamp into [lo, hi]; gradient is zero where the bound is active.
inline Var clamp(const Var& a, double lo, double hi) {
  return detail::unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Var clamp_min(const Var& a, double lo) {
  return detail::unary(
      a, [lo](double x) { return std::max(x, lo); }, [lo](double x, double) { return x >= lo ? 1.0 : 0.0; });
}

inline Var sum(const Var& a) {
  return detail::make_node(Tensor::scalar(sum_all(a.value())), {a}, [](Node& n) {
    n.parents[0]->accumulate(Tensor(detail::pval(n, 0).shape(), n.grad.item()));
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Var broadcast(const Var& a, const Shape& target) {
  return detail::make_node(broadcast_to(a.value(), target), {a}, [](Node& n) {
    n.parents[0]->accumulate(reduce_to(n.grad, detail::pval(n, 0).shape()));
  });
}

inline Var reshape(const Var& a, const Shape& target) {
  if (shape_numel(target) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(target));
  }
  return detail::make_node(Tensor(target, a.value().values()), {a}, [](Node& n) {
    n.parents[0]->accumulate(Tensor(detail::pval(n, 0).shape(), n.grad.values()));
  });
}

inline Var detach(const Var& a) { return Var::constant(a.value()); }

inline Var matmul(const Var& a, const Var& b) {
  return detail::make_node(matmul(a.value(), b.value()), {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->accumulate(matmul(n.grad, transpose(detail::pval(n, 1))));
    if (n.parents[1]->requires_grad)
      n.parents[1]->accumulate(matmul(transpose(detail::pval(n, 0)), n.grad));
  });
}

/// Inclusive prefix sum of a vector.
inline Var cumsum(const Var& a) {
  if (a.value().rank() != 1) throw ShapeError("cumsum: expected a vector, got " + shape_str(a.shape()));
  Tensor out = a.value();
  for (std::size_t i = 1; i < out.size(); ++i) out[i] += out[i - 1];
  return detail::make_node(std::move(out), {a}, [](Node& n) {
    Tensor g = n.grad;
    for (std::size_t i = g.size() - 1; i-- > 0;) g[i] += g[i + 1];
    n.parents[0]->accumulate(g);
  });
}

namespace detail {

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

}  // namespace detail

/// Row-wise softmax of a matrix.
inline Var softmax(const Var& a) {
  detail::require_matrix(a.value(), "softmax");
  const std::size_t r = a.value().dim(0), c = a.value().dim(1);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = a.value().data() + i * c;
    const double m = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (out[i * c + j] = std::exp(x[j] - m));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return detail::make_node(std::move(out), {a}, [r, c](Node& n) {
    Tensor g(n.value.shape());
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += n.grad[i * c + j] * n.value[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] = n.value[i * c + j] * (n.grad[i * c + j] - dot);
    }
    n.parents[0]->accumulate(g);
  });
}

inline Var log_softmax(const Var& a) {
  detail::require_matrix(a.value(), "log_softmax");
  const std::size_t r = a.value().dim(0), c = a.value().dim(1);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = a.value().data() + i * c;
    const double m = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - m);
    const double lz = m + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[j] - lz;
  }
  return detail::make_node(std::move(out), {a}, [r, c](Node& n) {
    Tensor g(n.value.shape());
    for (std::size_t i = 0; i < r; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += n.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] = n.grad[i * c + j] - std::exp(n.value[i * c + j]) * gs;
    }
    n.parents[0]->accumulate(g);
  });
}

/// out[i] = a[i, index[i]] for a matrix `a`.
inline Var pick(const Var& a, std::vector<std::size_t> index) {
  detail::require_matrix(a.value(), "pick");
  const std::size_t r = a.value().dim(0), c = a.value().dim(1);
  if (index.size() != r) {
    throw ShapeError("pick: " + std::to_string(index.size()) + " indices for matrix " + shape_str(a.shape()));
  }
  Tensor out(Shape{r});
  for (std::size_t i = 0; i < r; ++i) {
    if (index[i] >= c) throw ShapeError("pick: index out of range for " + shape_str(a.shape()));
    out[i] = a.value()[i * c + index[i]];
  }
  return detail::make_node(std::move(out), {a}, [r, c, index = std::move(index)](Node& n) {
    Tensor g(Shape{r, c}, 0.0);
    for (std::size_t i = 0; i < r; ++i) g[i * c + index[i]] = n.grad[i];
    n.parents[0]->accumulate(g);
  });
}

/// Sum of the elements of each row of a matrix.
inline Var sum_rows(const Var& a) {
  detail::require_matrix(a.value(), "sum_rows");
  const std::size_t r = a.value().dim(0), c = a.value().dim(1);
  Tensor out(Shape{r}, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += a.value()[i * c + j];
  return detail::make_node(std::move(out), {a}, [r, c](Node& n) {
    Tensor g(Shape{r, c});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] = n.grad[i];
    n.parents[0]->accumulate(g);
  });
}

using CustomForward = std::function<Tensor(std::span<const Tensor> inputs)>;
using CustomBackward = std::function<std::vector<Tensor>(
    std::span<const Tensor> inputs, const Tensor& output, const Tensor& upstream)>;

/// Operation defined by a user-supplied forward and vector-Jacobian product.
/// The backward callable returns one gradient per input, each shaped like
/// that input.
class CustomOp {
 public:
  CustomOp(CustomForward fwd, CustomBackward bwd)
      : fwd_(std::make_shared<CustomForward>(std::move(fwd))),
        bwd_(std::make_shared<CustomBackward>(std::move(bwd))) {}

  Var apply(std::span<const Var> inputs) const {
    std::vector<Tensor> vals;
    vals.reserve(inputs.size());
    for (const auto& v : inputs) vals.push_back(v.value());
    Tensor out = (*fwd_)(vals);
    std::vector<Var> parents(inputs.begin(), inputs.end());
    return detail::make_node(std::move(out), std::move(parents), [bwd = bwd_](Node& n) {
      std::vector<Tensor> in;
      in.reserve(n.parents.size());
      for (const auto& p : n.parents) in.push_back(p->value);
      std::vector<Tensor> g = (*bwd)(in, n.value, n.grad);
      if (g.size() != n.parents.size()) {
        throw std::logic_error("custom op backward returned " + std::to_string(g.size()) +
                               " gradients for " + std::to_string(n.parents.size()) + " inputs");
      }
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (g[i].shape() != n.parents[i]->value.shape()) {
          throw ShapeError("custom op gradient " + shape_str(g[i].shape()) + " for input " +
                           shape_str(n.parents[i]->value.shape()));
        }
        n.parents[i]->accumulate(g[i]);
      }
    });
  }

  Var operator()(std::initializer_list<Var> inputs) const {
    return apply(std::span<const Var>(inputs.begin(), inputs.size()));
  }

 private:
  std::shared_ptr<CustomForward> fwd_;
  std::shared_ptr<CustomBackward> bwd_;
};

inline CustomOp register_custom_gradient(CustomForward forward, CustomBackward backward) {
  return CustomOp(std::move(forward), std::move(backward));
}

}  // namespace ibpbnn
