#pragma once
// Dense N-D tensor of doubles with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a graph node. Operations on tracked tensors
// append a node that remembers its inputs and an adjoint closure; `backward`
// walks the reachable nodes in strict reverse creation order and then frees
// the interior of the graph. Leaves keep their accumulated gradients until
// `zero_grad`.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "bayesseg/errors.hpp"

namespace bayesseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> adjoint;

  double* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad.data();
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed) + 1;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() : Tensor(Shape{0}, {}, false) {}

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_size(shape) != values.size()) {
      throw ShapeError("Tensor", "size",
                       "shape " + shape_str(shape) + " holds " + std::to_string(shape_size(shape)) +
                           " elements but " + std::to_string(values.size()) + " values were given");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
    node_->id = detail::next_node_id();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }
  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    const auto n = v.size();
    return Tensor({n}, std::move(v), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  /// Mutable view of the values. Only meaningful for leaves (parameters, inputs).
  std::span<double> mutable_data() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }

  double item() const {
    if (size() != 1) throw ShapeError("item", "size", "tensor " + shape_str(shape()) + " is not a scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Accumulated gradient; all zeros when nothing has been accumulated yet.
  std::vector<double> grad() const {
    if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
    return node_->grad;
  }
  std::span<double> mutable_grad() { return {node_->grad_buffer(), size()}; }
  void zero_grad() { node_->grad.clear(); }

  /// Untracked copy of the values.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }
  /// Tracked leaf copy of the values.
  Tensor clone_leaf() const { return Tensor(shape(), node_->value, true); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  /// Builds the result of an operation. The adjoint is recorded only when some
  /// input is tracked; it must accumulate into the inputs' gradient buffers.
  static Tensor from_op(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                        std::function<void(detail::Node&)> adjoint) {
    Tensor out(std::move(shape), std::move(values), false);
    bool tracked = false;
    if (detail::grad_mode())
      for (const auto& in : inputs) tracked = tracked || in.requires_grad();
    if (tracked) {
      out.node_->requires_grad = true;
      out.node_->leaf = false;
      for (const auto& in : inputs)
        if (in.requires_grad()) out.node_->inputs.push_back(in.node_);
      out.node_->adjoint = std::move(adjoint);
    }
    return out;
  }

  static Tensor from_op(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                        std::function<void(detail::Node&)> adjoint) {
    Tensor out(std::move(shape), std::move(values), false);
    bool tracked = false;
    if (detail::grad_mode())
      for (const auto& in : inputs) tracked = tracked || in.requires_grad();
    if (tracked) {
      out.node_->requires_grad = true;
      out.node_->leaf = false;
      for (const auto& in : inputs)
        if (in.requires_grad()) out.node_->inputs.push_back(in.node_);
      out.node_->adjoint = std::move(adjoint);
    }
    return out;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Accumulates dRoot/dLeaf into every tracked leaf reachable from `root`,
/// then releases the interior of the graph. A constant root is a no-op.
inline void backward(const Tensor& root) {
  if (root.size() != 1) {
    throw ShapeError("backward", "size", "root must be a scalar, got " + shape_str(root.shape()));
  }
  detail::Node* r = root.node();
  if (!r->requires_grad) return;
  if (r->consumed) throw StateError("backward: graph already consumed; run a new forward pass");
  if (r->leaf) {
    r->grad_buffer()[0] += 1.0;
    return;
  }

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen{r};
  std::vector<detail::Node*> stack{r};
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (n->consumed) throw StateError("backward: graph already consumed; run a new forward pass");
    order.push_back(n);
    for (const auto& in : n->inputs)
      if (seen.insert(in.get()).second) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->id > b->id; });

  r->grad.assign(1, 1.0);
  for (detail::Node* n : order) {
    if (!n->leaf && n->adjoint && !n->grad.empty()) n->adjoint(*n);
  }
  std::vector<std::shared_ptr<detail::Node>> keep_alive;
  keep_alive.reserve(order.size());
  for (detail::Node* n : order)
    for (const auto& in : n->inputs) keep_alive.push_back(in);
  for (detail::Node* n : order) {
    if (n->leaf) continue;
    n->adjoint = nullptr;
    n->inputs.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->consumed = true;
  }
}

// ---------------------------------------------------------------------------
// Elementwise operations. Binary ops require identical shapes, or one side
// holding a single element (scalar broadcast).

namespace detail {

inline void check_binary(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() && a.size() != 1 && b.size() != 1) {
    throw ShapeError(op, "shape", "operands " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                                      " differ and neither is a scalar");
  }
}

template <class Fwd, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  check_binary(op, a, b);
  const bool a_scalar = a.size() == 1 && b.size() != 1;
  const bool b_scalar = b.size() == 1 && a.size() != 1;
  const Shape shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_size(shape);
  std::vector<double> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
  return Tensor::from_op(shape, std::move(out), {a, b}, [a, b, a_scalar, b_scalar, n, da, db](Node& self) {
    const auto& g = self.grad;
    const auto& av = a.values();
    const auto& bv = b.values();
    if (a.requires_grad()) {
      double* ga = a.node()->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const double x = av[a_scalar ? 0 : i], y = bv[b_scalar ? 0 : i];
        ga[a_scalar ? 0 : i] += g[i] * da(x, y, self.value[i]);
      }
    }
    if (b.requires_grad()) {
      double* gb = b.node()->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const double x = av[a_scalar ? 0 : i], y = bv[b_scalar ? 0 : i];
        gb[b_scalar ? 0 : i] += g[i] * db(x, y, self.value[i]);
      }
    }
  });
}

// `deriv(x, y)` receives the input and the forward output.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
  return Tensor::from_op(a.shape(), std::move(out), {a}, [a, n, deriv](Node& self) {
    double* ga = a.node()->grad_buffer();
    const auto& av = a.values();
    for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * deriv(av[i], self.value[i]);
  });
}

inline double stable_softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  const auto& bv = b.values();
  for (std::size_t i = 0; i < bv.size(); ++i)
    if (bv[i] == 0.0) throw DomainError("div", i, "division by zero");
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

/// scale * x + shift
inline Tensor affine(const Tensor& x, double scale, double shift = 0.0) {
  return detail::unary(
      x, [scale, shift](double v) { return scale * v + shift; }, [scale](double, double) { return scale; });
}
inline Tensor operator*(double s, const Tensor& x) { return affine(x, s, 0.0); }
inline Tensor operator*(const Tensor& x, double s) { return affine(x, s, 0.0); }
inline Tensor operator+(const Tensor& x, double s) { return affine(x, 1.0, s); }
inline Tensor operator-(const Tensor& x, double s) { return affine(x, 1.0, -s); }
inline Tensor operator-(double s, const Tensor& x) { return affine(x, -1.0, s); }
inline Tensor operator-(const Tensor& x) { return affine(x, -1.0, 0.0); }

inline Tensor square(const Tensor& x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor exp(const Tensor& x) {
  const auto& v = x.values();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(std::exp(v[i]))) throw DomainError("exp", i, "result overflows");
  return detail::unary(x, [](double a) { return std::exp(a); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  const auto& v = x.values();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!(v[i] > 0.0)) throw DomainError("log", i, "requires strictly positive input");
  return detail::unary(x, [](double a) { return std::log(a); }, [](double a, double) { return 1.0 / a; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(x, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(x, [](double a) { return std::tanh(a); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary(x, detail::stable_softplus, [](double a, double) { return detail::stable_sigmoid(a); });
}

/// Subgradient at 0 is 0.
inline Tensor relu(const Tensor& x) {
  return detail::unary(x, [](double a) { return a > 0 ? a : 0.0; }, [](double a, double) { return a > 0 ? 1.0 : 0.0; });
}

/// x^p for x >= 0. The derivative at x = 0 is taken as 0 when p < 1.
inline Tensor pow_scalar(const Tensor& x, double p) {
  const auto& v = x.values();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] < 0.0) throw DomainError("pow_scalar", i, "requires non-negative input");
  return detail::unary(
      x, [p](double a) { return p == 0.0 ? 1.0 : std::pow(a, p); },
      [p](double a, double) {
        if (p == 0.0) return 0.0;
        if (a == 0.0) return p == 1.0 ? 1.0 : 0.0;
        return p * std::pow(a, p - 1.0);
      });
}

/// Clamps into [lo, hi]; gradient passes only strictly inside the interval.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return detail::unary(
      x, [lo, hi](double a) { return std::clamp(a, lo, hi); },
      [lo, hi](double a, double) { return (a > lo && a < hi) ? 1.0 : 0.0; });
}

enum class UnaryOp { sigmoid, tanh, softplus, log, exp, relu, square, neg };
enum class BinaryOp { add, sub, mul, div };

inline Tensor elementwise(UnaryOp op, const Tensor& x) {
  switch (op) {
    case UnaryOp::sigmoid: return sigmoid(x);
    case UnaryOp::tanh: return tanh(x);
    case UnaryOp::softplus: return softplus(x);
    case UnaryOp::log: return log(x);
    case UnaryOp::exp: return exp(x);
    case UnaryOp::relu: return relu(x);
    case UnaryOp::square: return square(x);
    case UnaryOp::neg: return -x;
  }
  return x;
}

inline Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  switch (op) {
    case BinaryOp::add: return add(a, b);
    case BinaryOp::sub: return sub(a, b);
    case BinaryOp::mul: return mul(a, b);
    case BinaryOp::div: return div(a, b);
  }
  return a;
}

// ---------------------------------------------------------------------------
// Reductions and reshaping.

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  const std::size_t n = x.size();
  return Tensor::from_op({1}, {s}, {x}, [x, n](detail::Node& self) {
    double* g = x.node()->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean", "size", "empty tensor");
  return affine(sum(x), 1.0 / static_cast<double>(x.size()));
}

/// Sums over `axes` (each listed once); the reduced axes are dropped. Reducing
/// every axis yields shape [1].
inline Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  std::vector<bool> reduced(in.size(), false);
  for (auto a : axes) {
    if (a >= in.size()) throw ShapeError("sum", "axis", "axis " + std::to_string(a) + " out of range for rank " +
                                                           std::to_string(in.size()));
    if (reduced[a]) throw ShapeError("sum", "axis", "axis " + std::to_string(a) + " listed twice");
    reduced[a] = true;
  }
  Shape out_shape;
  for (std::size_t d = 0; d < in.size(); ++d)
    if (!reduced[d]) out_shape.push_back(in[d]);
  if (out_shape.empty()) out_shape = {1};

  // Map each input index to its output index.
  const std::size_t n = x.size();
  std::vector<std::size_t> target(n);
  {
    std::vector<std::size_t> idx(in.size(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t o = 0;
      for (std::size_t d = 0; d < in.size(); ++d)
        if (!reduced[d]) o = o * in[d] + idx[d];
      target[i] = o;
      for (std::size_t d = in.size(); d-- > 0;) {
        if (++idx[d] < in[d]) break;
        idx[d] = 0;
      }
    }
  }
  std::vector<double> out(shape_size(out_shape), 0.0);
  const auto& v = x.values();
  for (std::size_t i = 0; i < n; ++i) out[target[i]] += v[i];
  return Tensor::from_op(out_shape, std::move(out), {x}, [x, target = std::move(target)](detail::Node& self) {
    double* g = x.node()->grad_buffer();
    for (std::size_t i = 0; i < target.size(); ++i) g[i] += self.grad[target[i]];
  });
}

inline Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes) {
  Tensor s = sum(x, axes);
  const double count = static_cast<double>(x.size()) / static_cast<double>(s.size());
  return affine(s, 1.0 / count);
}

enum class ReduceOp { sum, mean };

inline Tensor reduce(ReduceOp op, const Tensor& x, const std::vector<std::size_t>& axes) {
  return op == ReduceOp::sum ? sum(x, axes) : mean(x, axes);
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape", "size", shape_str(x.shape()) + " cannot be viewed as " + shape_str(shape));
  }
  const std::size_t n = x.size();
  return Tensor::from_op(std::move(shape), x.values(), {x}, [x, n](detail::Node& self) {
    double* g = x.node()->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
  });
}

/// y = W x + b with x: [in], W: [out, in], b: [out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) throw ShapeError("linear", "weight rank", "expected [out,in], got " + shape_str(w.shape()));
  const std::size_t n_out = w.dim(0), n_in = w.dim(1);
  if (x.size() != n_in) throw ShapeError("linear", "in", "input has " + std::to_string(x.size()) +
                                                             " elements, weight expects " + std::to_string(n_in));
  if (b.size() != n_out) throw ShapeError("linear", "out", "bias has " + std::to_string(b.size()) +
                                                               " elements, weight produces " + std::to_string(n_out));
  std::vector<double> out(n_out);
  const auto& xv = x.values();
  const auto& wv = w.values();
  const auto& bv = b.values();
  for (std::size_t o = 0; o < n_out; ++o) {
    double acc = bv[o];
    for (std::size_t i = 0; i < n_in; ++i) acc += wv[o * n_in + i] * xv[i];
    out[o] = acc;
  }
  return Tensor::from_op({n_out}, std::move(out), {x, w, b}, [x, w, b, n_out, n_in](detail::Node& self) {
    const auto& g = self.grad;
    if (x.requires_grad()) {
      double* gx = x.node()->grad_buffer();
      const auto& wv = w.values();
      for (std::size_t o = 0; o < n_out; ++o)
        for (std::size_t i = 0; i < n_in; ++i) gx[i] += g[o] * wv[o * n_in + i];
    }
    if (w.requires_grad()) {
      double* gw = w.node()->grad_buffer();
      const auto& xv = x.values();
      for (std::size_t o = 0; o < n_out; ++o)
        for (std::size_t i = 0; i < n_in; ++i) gw[o * n_in + i] += g[o] * xv[i];
    }
    if (b.requires_grad()) {
      double* gb = b.node()->grad_buffer();
      for (std::size_t o = 0; o < n_out; ++o) gb[o] += g[o];
    }
  });
}

/// Multiplies every slice w[c, ...] by z[c].
inline Tensor channel_scale(const Tensor& w, const Tensor& z) {
  if (w.rank() < 1 || z.size() != w.dim(0)) {
    throw ShapeError("channel_scale", "channels", "scale vector of " + std::to_string(z.size()) +
                                                      " does not match leading extent of " + shape_str(w.shape()));
  }
  const std::size_t c = w.dim(0), inner = w.size() / std::max<std::size_t>(c, 1);
  std::vector<double> out(w.size());
  const auto& wv = w.values();
  const auto& zv = z.values();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < inner; ++i) out[k * inner + i] = wv[k * inner + i] * zv[k];
  return Tensor::from_op(w.shape(), std::move(out), {w, z}, [w, z, c, inner](detail::Node& self) {
    const auto& g = self.grad;
    if (w.requires_grad()) {
      double* gw = w.node()->grad_buffer();
      const auto& zv = z.values();
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t i = 0; i < inner; ++i) gw[k * inner + i] += g[k * inner + i] * zv[k];
    }
    if (z.requires_grad()) {
      double* gz = z.node()->grad_buffer();
      const auto& wv = w.values();
      for (std::size_t k = 0; k < c; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < inner; ++i) acc += g[k * inner + i] * wv[k * inner + i];
        gz[k] += acc;
      }
    }
  });
}

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace bayesseg

namespace bayesseg {

/// A trainable leaf with a stable, checkpoint-visible name.
struct NamedParameter {
  std::string name;
  Tensor value;
};

}  // namespace bayesseg
