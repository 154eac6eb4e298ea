// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensors with a dynamic reverse-mode tape.
//
// A Tensor is a cheap handle to a shared node. Every differentiable op
// records its inputs and a backward closure on the result node while grad
// mode is on and at least one input requires a gradient. The tape is owned
// by the result handles, so it disappears with the last handle to the loss.
//
// Layout is row-major. Binary elementwise ops broadcast with trailing-axis
// alignment (numpy rules). Structural ops always copy; nothing aliases.

#pragma once

#include "meta_attention/errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace meta_attention {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// grad mode

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// node + handle

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Reads this->grad and accumulates into inputs[i]->grad.
  std::function<void(TensorNode&)> backward;

  bool is_leaf() const { return !backward; }

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (meta_attention::numel(shape) != values.size()) {
      throw dimension_error("tensor: shape " + to_string(shape) + " does not hold " +
                            std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }
  static Tensor full(Shape shape, double fill, bool requires_grad = false) {
    const auto n = meta_attention::numel(shape);
    return from(std::move(shape), std::vector<double>(n, fill), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Direct write access; used by the optimiser and by tests. Never call it on
  // a tensor that is an input of a live tape you intend to differentiate.
  std::span<double> mutable_data() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  double item() const {
    if (numel() != 1) throw contract_error("item(): tensor of shape " + to_string(shape()) + " is not a scalar");
    return node_->value[0];
  }

  std::size_t offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != dim()) throw dimension_error("at(): rank mismatch for shape " + to_string(shape()));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : index) {
      if (i >= shape()[axis]) throw dimension_error("at(): index out of range for shape " + to_string(shape()));
      off = off * shape()[axis++] + i;
    }
    return off;
  }
  double at(std::initializer_list<std::size_t> index) const { return node_->value[offset(index)]; }

  /// Copy of the values with no tape attached.
  Tensor detach() const { return from(shape(), node_->value, false); }

  /// Reverse sweep from a scalar. Leaf gradients accumulate across calls.
  void backward() const;

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

/// Wraps a forward result; attaches the tape edge when any input needs it.
inline Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> inputs,
                          std::function<void(TensorNode&)> backward) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (any_requires_grad(inputs)) {
    node->requires_grad = true;
    for (const auto* t : inputs) node->inputs.push_back(t->node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

inline Tensor make_result_n(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                            std::function<void(TensorNode&)> backward) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled())
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

/// Gradient sink for input i, or nullptr if that input does not want one.
inline std::vector<double>* sink(TensorNode& self, std::size_t i) {
  auto& in = *self.inputs[i];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) throw dimension_error("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

/// (outer, extent, inner) split of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};
inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      throw dimension_error("cannot broadcast " + to_string(a) + " with " + to_string(b));
    out[i] = da == 1 ? db : da;
  }
  return out;
}

/// Strides of `in` when read through the broadcast shape `out` (0 on stretched axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = out.size() - 1 - k;
    strides[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

/// Calls f(out_index, a_offset, b_offset) for every element of `out`.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t total = meta_attention::numel(out);
  if (total == 0) return;
  if (out.empty()) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t rank = out.size();
  const std::size_t last = out[rank - 1];
  const std::size_t la = sa[rank - 1], lb = sb[rank - 1];
  std::vector<std::size_t> counter(rank, 0);
  std::size_t base_a = 0, base_b = 0;
  for (std::size_t i = 0; i < total; i += last) {
    for (std::size_t j = 0; j < last; ++j) f(i + j, base_a + j * la, base_b + j * lb);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++counter[d];
      base_a += sa[d];
      base_b += sb[d];
      if (counter[d] < out[d]) break;
      base_a -= sa[d] * counter[d];
      base_b -= sb[d] * counter[d];
      counter[d] = 0;
    }
  }
}

/// True when `small`, ignoring leading unit axes, equals the trailing axes of `big`.
inline bool tiles_trailing(const Shape& small, const Shape& big) {
  std::size_t lead = 0;
  while (lead < small.size() && small[lead] == 1) ++lead;
  const std::size_t n = small.size() - lead;
  if (n > big.size() || small.size() > big.size()) return false;
  return std::equal(small.begin() + static_cast<long>(lead), small.end(), big.end() - static_cast<long>(n));
}

template <typename F, typename DA, typename DB>
Tensor binary_op(const Tensor& a, const Tensor& b, F fwd, DA dfa, DB dfb) {
  if (a.shape() == b.shape()) {
    const auto av = a.data();
    const auto bv = b.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    return make_result(a.shape(), std::move(out), {&a, &b}, [dfa, dfb](TensorNode& self) {
      const auto& x = self.inputs[0]->value;
      const auto& y = self.inputs[1]->value;
      const auto& g = self.grad;
      if (auto* ga = sink(self, 0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * dfa(x[i], y[i]);
      if (auto* gb = sink(self, 1))
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * dfb(x[i], y[i]);
    });
  }
  if (const std::size_t nb = b.numel(); nb > 0 && tiles_trailing(b.shape(), a.shape())) {
    // b repeats along the leading axes of a (bias-style broadcast).
    const auto av = a.data();
    const auto bv = b.data();
    std::vector<double> out(av.size());
    for (std::size_t r = 0; r < av.size(); r += nb)
      for (std::size_t j = 0; j < nb; ++j) out[r + j] = fwd(av[r + j], bv[j]);
    return make_result(a.shape(), std::move(out), {&a, &b}, [dfa, dfb, nb](TensorNode& self) {
      const auto& x = self.inputs[0]->value;
      const auto& y = self.inputs[1]->value;
      const auto& g = self.grad;
      if (auto* ga = sink(self, 0))
        for (std::size_t r = 0; r < g.size(); r += nb)
          for (std::size_t j = 0; j < nb; ++j) (*ga)[r + j] += g[r + j] * dfa(x[r + j], y[j]);
      if (auto* gb = sink(self, 1))
        for (std::size_t r = 0; r < g.size(); r += nb)
          for (std::size_t j = 0; j < nb; ++j) (*gb)[j] += g[r + j] * dfb(x[r + j], y[j]);
    });
  }
  Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  auto sa = broadcast_strides(a.shape(), out_shape);
  auto sb = broadcast_strides(b.shape(), out_shape);
  std::vector<double> out(meta_attention::numel(out_shape));
  const auto av = a.data();
  const auto bv = b.data();
  for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(av[ia], bv[ib]); });
  return make_result(out_shape, std::move(out), {&a, &b}, [dfa, dfb, sa, sb](TensorNode& self) {
    const auto& x = self.inputs[0]->value;
    const auto& y = self.inputs[1]->value;
    const auto& g = self.grad;
    auto* ga = sink(self, 0);
    auto* gb = sink(self, 1);
    for_each_broadcast(self.shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += g[i] * dfa(x[ia], y[ib]);
      if (gb) (*gb)[ib] += g[i] * dfb(x[ia], y[ib]);
    });
  });
}

}  // namespace detail

/// Elementwise map with a derivative expressed through input x and output y.
/// This is the extension point special functions plug into.
template <typename F, typename D>
Tensor map_unary(const Tensor& x, F fwd, D deriv) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return detail::make_result(x.shape(), std::move(out), {&x}, [deriv](TensorNode& self) {
    auto* gx = detail::sink(self, 0);
    if (!gx) return;
    const auto& xin = self.inputs[0]->value;
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i] * deriv(xin[i], self.value[i]);
  });
}

// ---------------------------------------------------------------------------
// backward

inline void Tensor::backward() const {
  if (numel() != 1) throw contract_error("backward(): loss must be a scalar, got shape " + to_string(shape()));
  if (!requires_grad()) return;

  // Iterative post-order DFS; reversed, it is a topological order.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      TensorNode* child = n->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(n);
    stack.pop_back();
  }

  // Interior buffers are allocated on first contribution, so a node nothing
  // flowed into is skipped rather than back-propagating zeros.
  for (auto* n : order)
    if (!n->is_leaf()) std::vector<double>().swap(n->grad);
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->is_leaf() || n->grad.empty()) continue;
    n->backward(*n);
    if (n != node_.get()) std::vector<double>().swap(n->grad);
  }
}

// ---------------------------------------------------------------------------
// arithmetic

inline Tensor operator+(const Tensor& a, const Tensor& b) {
  return detail::binary_op(a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
                           [](double, double) { return 1.0; });
}
inline Tensor operator-(const Tensor& a, const Tensor& b) {
  return detail::binary_op(a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
                           [](double, double) { return -1.0; });
}
inline Tensor operator*(const Tensor& a, const Tensor& b) {
  return detail::binary_op(a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
                           [](double x, double) { return x; });
}
inline Tensor operator/(const Tensor& a, const Tensor& b) {
  return detail::binary_op(a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
                           [](double x, double y) { return -x / (y * y); });
}
inline Tensor operator-(const Tensor& a) {
  return map_unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}
inline Tensor operator*(const Tensor& a, double s) {
  return map_unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}
inline Tensor operator*(double s, const Tensor& a) { return a * s; }
inline Tensor operator/(const Tensor& a, double s) { return a * (1.0 / s); }
inline Tensor operator+(const Tensor& a, double s) {
  return map_unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}
inline Tensor operator+(double s, const Tensor& a) { return a + s; }
inline Tensor operator-(const Tensor& a, double s) { return a + (-s); }
inline Tensor operator-(double s, const Tensor& a) {
  return map_unary(a, [s](double x) { return s - x; }, [](double, double) { return -1.0; });
}

// ---------------------------------------------------------------------------
// elementwise nonlinearities

inline Tensor exp(const Tensor& x) {
  return map_unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& x) {
  return map_unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}
inline Tensor sqrt(const Tensor& x) {
  return map_unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}
inline Tensor square(const Tensor& x) {
  return map_unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

/// log(1 + e^x), evaluated without overflow.
inline Tensor softplus(const Tensor& x) {
  return map_unary(
      x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); });
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return map_unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) { return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v); });
}

/// ELU(x) + 1: the positive feature map of kernel attention.
inline Tensor elu_plus_one(const Tensor& x) {
  return map_unary(
      x, [](double v) { return v > 0 ? v + 1.0 : std::exp(v); }, [](double v, double y) { return v > 0 ? 1.0 : y; });
}

/// max(x, lo); the gradient is blocked where the floor is active.
inline Tensor clamp_min(const Tensor& x, double lo) {
  return map_unary(x, [lo](double v) { return v > lo ? v : lo; }, [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& x) {
  const auto v = x.data();
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  return detail::make_result({}, {s}, {&x}, [](TensorNode& self) {
    if (auto* gx = detail::sink(self, 0))
      for (auto& g : *gx) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return sum(x) * (1.0 / static_cast<double>(x.numel())); }

inline Tensor sum(const Tensor& x, long axis, bool keepdim = false) {
  const std::size_t ax = detail::normalize_axis(axis, x.dim());
  const auto sp = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim) out_shape[ax] = 1;
  else out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  const auto xv = x.data();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.extent; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xv[(o * sp.extent + j) * sp.inner + i];
  return detail::make_result(std::move(out_shape), std::move(out), {&x}, [sp](TensorNode& self) {
    auto* gx = detail::sink(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.extent; ++j)
        for (std::size_t i = 0; i < sp.inner; ++i) (*gx)[(o * sp.extent + j) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

inline Tensor mean(const Tensor& x, long axis, bool keepdim = false) {
  const std::size_t ax = detail::normalize_axis(axis, x.dim());
  return sum(x, axis, keepdim) * (1.0 / static_cast<double>(x.shape()[ax]));
}

/// Inclusive prefix sum along an axis.
inline Tensor cumsum(const Tensor& x, long axis) {
  const std::size_t ax = detail::normalize_axis(axis, x.dim());
  const auto sp = detail::split_at(x.shape(), ax);
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double run = 0.0;
      for (std::size_t j = 0; j < sp.extent; ++j) {
        const std::size_t k = (o * sp.extent + j) * sp.inner + i;
        run += xv[k];
        out[k] = run;
      }
    }
  return detail::make_result(x.shape(), std::move(out), {&x}, [sp](TensorNode& self) {
    auto* gx = detail::sink(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        double run = 0.0;
        for (std::size_t j = sp.extent; j-- > 0;) {
          const std::size_t k = (o * sp.extent + j) * sp.inner + i;
          run += self.grad[k];
          (*gx)[k] += run;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// softmax family

/// Softmax along `axis`, max-shifted.
inline Tensor softmax(const Tensor& x, long axis = -1) {
  const std::size_t ax = detail::normalize_axis(axis, x.dim());
  const auto sp = detail::split_at(x.shape(), ax);
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto idx = [&](std::size_t j) { return (o * sp.extent + j) * sp.inner + i; };
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < sp.extent; ++j) m = std::max(m, xv[idx(j)]);
      double z = 0.0;
      for (std::size_t j = 0; j < sp.extent; ++j) z += out[idx(j)] = std::exp(xv[idx(j)] - m);
      for (std::size_t j = 0; j < sp.extent; ++j) out[idx(j)] /= z;
    }
  return detail::make_result(x.shape(), std::move(out), {&x}, [sp](TensorNode& self) {
    auto* gx = detail::sink(self, 0);
    if (!gx) return;
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        auto idx = [&](std::size_t j) { return (o * sp.extent + j) * sp.inner + i; };
        double dot = 0.0;
        for (std::size_t j = 0; j < sp.extent; ++j) dot += y[idx(j)] * g[idx(j)];
        for (std::size_t j = 0; j < sp.extent; ++j) (*gx)[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
      }
  });
}

/// Mean next-token cross-entropy. `logits` is (..., V); one target per row.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  if (logits.dim() < 1) throw dimension_error("cross_entropy: logits must have a class axis");
  const std::size_t classes = logits.shape().back();
  const std::size_t rows = logits.numel() / classes;
  if (targets.size() != rows)
    throw dimension_error("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " + to_string(logits.shape()));
  for (int t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= classes) throw std::out_of_range("cross_entropy: target out of range");
  const auto lv = logits.data();
  std::vector<double> probs(lv.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = lv.data() + r * classes;
    const double m = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += probs[r * classes + c] = std::exp(row[c] - m);
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] /= z;
    total += -(row[targets[r]] - m - std::log(z));
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  return detail::make_result({}, {total / static_cast<double>(rows)}, {&logits},
                             [probs = std::move(probs), tgt = std::move(tgt), rows, classes](TensorNode& self) {
                               auto* gx = detail::sink(self, 0);
                               if (!gx) return;
                               const double scale = self.grad[0] / static_cast<double>(rows);
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t c = 0; c < classes; ++c) {
                                   const double onehot = static_cast<int>(c) == tgt[r] ? 1.0 : 0.0;
                                   (*gx)[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                                 }
                             });
}

/// LayerNorm over the last axis with population variance and eps inside the root.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d)
    throw dimension_error("layer_norm: affine parameters must have " + std::to_string(d) + " entries");
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  std::vector<double> xhat(xv.size()), out(xv.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t k = 0; k < d; ++k) mu += row[k];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t k = 0; k < d; ++k) var += (row[k] - mu) * (row[k] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t k = 0; k < d; ++k) {
      xhat[r * d + k] = (row[k] - mu) * inv_std[r];
      out[r * d + k] = xhat[r * d + k] * gv[k] + bv[k];
    }
  }
  return detail::make_result(x.shape(), std::move(out), {&x, &gain, &bias},
                             [xhat = std::move(xhat), inv_std = std::move(inv_std), d, rows](TensorNode& self) {
                               const auto& g = self.grad;
                               const auto& gain_v = self.inputs[1]->value;
                               auto* gx = detail::sink(self, 0);
                               auto* gg = detail::sink(self, 1);
                               auto* gb = detail::sink(self, 2);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                                 for (std::size_t k = 0; k < d; ++k) {
                                   const double dxh = g[r * d + k] * gain_v[k];
                                   mean_dxh += dxh;
                                   mean_dxh_xh += dxh * xhat[r * d + k];
                                   if (gg) (*gg)[k] += g[r * d + k] * xhat[r * d + k];
                                   if (gb) (*gb)[k] += g[r * d + k];
                                 }
                                 if (!gx) continue;
                                 mean_dxh /= static_cast<double>(d);
                                 mean_dxh_xh /= static_cast<double>(d);
                                 for (std::size_t k = 0; k < d; ++k) {
                                   const double dxh = g[r * d + k] * gain_v[k];
                                   (*gx)[r * d + k] += inv_std[r] * (dxh - mean_dxh - xhat[r * d + k] * mean_dxh_xh);
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// structural

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw dimension_error("reshape: " + to_string(x.shape()) + " -> " + to_string(shape) + " changes element count");
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result(std::move(shape), std::move(out), {&x}, [](TensorNode& self) {
    if (auto* gx = detail::sink(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
  });
}

/// Reorders axes: result axis k is input axis `axes[k]`.
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.dim();
  if (axes.size() != rank) throw dimension_error("permute: axis list does not match rank of " + to_string(x.shape()));
  std::vector<bool> seen(rank, false);
  for (auto a : axes) {
    if (a >= rank || seen[a]) throw dimension_error("permute: invalid axis list");
    seen[a] = true;
  }
  Shape out_shape(rank);
  std::vector<std::size_t> in_strides(rank), src_strides(rank);
  for (std::size_t s = 1, i = rank; i-- > 0;) {
    in_strides[i] = s;
    s *= x.shape()[i];
  }
  for (std::size_t k = 0; k < rank; ++k) {
    out_shape[k] = x.shape()[axes[k]];
    src_strides[k] = in_strides[axes[k]];
  }
  // Gather map: out[i] = x[src[i]].
  std::vector<std::size_t> src(x.numel());
  const std::vector<std::size_t> zero(rank, 0);
  detail::for_each_broadcast(out_shape, src_strides, zero, [&](std::size_t i, std::size_t is, std::size_t) { src[i] = is; });
  const auto xv = x.data();
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = xv[src[i]];
  return detail::make_result(std::move(out_shape), std::move(out), {&x}, [src = std::move(src)](TensorNode& self) {
    if (auto* gx = detail::sink(self, 0))
      for (std::size_t i = 0; i < src.size(); ++i) (*gx)[src[i]] += self.grad[i];
  });
}

inline Tensor transpose(const Tensor& x, long a0 = -2, long a1 = -1) {
  std::vector<std::size_t> axes(x.dim());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[detail::normalize_axis(a0, x.dim())], axes[detail::normalize_axis(a1, x.dim())]);
  return permute(x, axes);
}

inline Tensor concat(const std::vector<Tensor>& parts, long axis) {
  if (parts.empty()) throw dimension_error("concat: no inputs");
  const std::size_t ax = detail::normalize_axis(axis, parts[0].dim());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != out_shape.size()) throw dimension_error("concat: rank mismatch");
    probe[ax] = 0;
    if (probe != out_shape) throw dimension_error("concat: incompatible shape " + to_string(p.shape()));
  }
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    extents.push_back(p.shape()[ax]);
    out_shape[ax] += p.shape()[ax];
  }
  const auto sp = detail::split_at(out_shape, ax);
  std::vector<double> out(numel(out_shape));
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::size_t pos = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const std::size_t chunk = extents[p] * sp.inner;
      const double* from = parts[p].data().data() + o * chunk;
      std::copy(from, from + chunk, out.data() + (o * sp.extent + pos) * sp.inner);
      pos += extents[p];
    }
  }
  return detail::make_result_n(std::move(out_shape), std::move(out), parts, [sp, extents](TensorNode& self) {
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::size_t pos = 0;
      for (std::size_t p = 0; p < extents.size(); ++p) {
        const std::size_t chunk = extents[p] * sp.inner;
        if (auto* gp = detail::sink(self, p)) {
          const double* from = self.grad.data() + (o * sp.extent + pos) * sp.inner;
          for (std::size_t k = 0; k < chunk; ++k) (*gp)[o * chunk + k] += from[k];
        }
        pos += extents[p];
      }
    }
  });
}

/// Half-open range [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, long axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = detail::normalize_axis(axis, x.dim());
  if (begin > end || end > x.shape()[ax])
    throw dimension_error("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " + to_string(x.shape()));
  const auto sp = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  const std::size_t width = (end - begin) * sp.inner;
  std::vector<double> out(sp.outer * width);
  const auto xv = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xv.data() + (o * sp.extent + begin) * sp.inner, width, out.data() + o * width);
  return detail::make_result(std::move(out_shape), std::move(out), {&x}, [sp, begin, width](TensorNode& self) {
    auto* gx = detail::sink(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < width; ++k) (*gx)[(o * sp.extent + begin) * sp.inner + k] += self.grad[o * width + k];
  });
}

/// Sets entries with column > row in the trailing (T, T) block to -inf.
inline Tensor causal_mask(const Tensor& scores) {
  if (scores.dim() < 2 || scores.shape()[scores.dim() - 1] != scores.shape()[scores.dim() - 2])
    throw dimension_error("causal_mask: expected trailing square block, got " + to_string(scores.shape()));
  const std::size_t t = scores.shape().back();
  const std::size_t blocks = scores.numel() / (t * t);
  std::vector<double> out(scores.data().begin(), scores.data().end());
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = i + 1; j < t; ++j) out[(b * t + i) * t + j] = -std::numeric_limits<double>::infinity();
  return detail::make_result(scores.shape(), std::move(out), {&scores}, [t, blocks](TensorNode& self) {
    auto* gx = detail::sink(self, 0);
    if (!gx) return;
    for (std::size_t b = 0; b < blocks; ++b)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j <= i; ++j) (*gx)[(b * t + i) * t + j] += self.grad[(b * t + i) * t + j];
  });
}

// ---------------------------------------------------------------------------
// matmul

namespace detail {
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;
}  // namespace detail

/// Matrix product over the last two axes; leading axes broadcast.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() < 2 || b.dim() < 2) throw dimension_error("matmul: operands must be at least 2-D, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t n = a.shape()[a.dim() - 2], k = a.shape().back();
  const std::size_t k2 = b.shape()[b.dim() - 2], m = b.shape().back();
  if (k != k2) throw dimension_error("matmul: inner dimensions differ for " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const auto nk = static_cast<Eigen::Index>(k), nm = static_cast<Eigen::Index>(m);

  if (b.dim() == 2) {
    // Shared right operand: fold all leading axes of a into rows.
    const auto rows = static_cast<Eigen::Index>(a.numel() / k);
    Shape out_shape = a.shape();
    out_shape.back() = m;
    std::vector<double> out(static_cast<std::size_t>(rows) * m);
    detail::MutMap(out.data(), rows, nm).noalias() = detail::ConstMap(a.data().data(), rows, nk) * detail::ConstMap(b.data().data(), nk, nm);
    return detail::make_result(std::move(out_shape), std::move(out), {&a, &b}, [rows, nk, nm](TensorNode& self) {
      detail::ConstMap g(self.grad.data(), rows, nm);
      if (auto* ga = detail::sink(self, 0))
        detail::MutMap(ga->data(), rows, nk).noalias() += g * detail::ConstMap(self.inputs[1]->value.data(), nk, nm).transpose();
      if (auto* gb = detail::sink(self, 1))
        detail::MutMap(gb->data(), nk, nm).noalias() += detail::ConstMap(self.inputs[0]->value.data(), rows, nk).transpose() * g;
    });
  }

  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  const Shape batch = detail::broadcast_shapes(batch_a, batch_b);
  const auto sa = detail::broadcast_strides(batch_a, batch);
  const auto sb = detail::broadcast_strides(batch_b, batch);
  std::vector<std::size_t> off_a, off_b;
  detail::for_each_broadcast(batch, sa, sb, [&](std::size_t, std::size_t ia, std::size_t ib) {
    off_a.push_back(ia * n * k);
    off_b.push_back(ib * k * m);
  });
  Shape out_shape = batch;
  out_shape.push_back(n);
  out_shape.push_back(m);
  const auto nn = static_cast<Eigen::Index>(n);
  std::vector<double> out(numel(out_shape));
  for (std::size_t p = 0; p < off_a.size(); ++p)
    detail::MutMap(out.data() + p * n * m, nn, nm).noalias() =
        detail::ConstMap(a.data().data() + off_a[p], nn, nk) * detail::ConstMap(b.data().data() + off_b[p], nk, nm);
  return detail::make_result(std::move(out_shape), std::move(out), {&a, &b},
                             [off_a = std::move(off_a), off_b = std::move(off_b), nn, nk, nm](TensorNode& self) {
                               const auto& av = self.inputs[0]->value;
                               const auto& bv = self.inputs[1]->value;
                               auto* ga = detail::sink(self, 0);
                               auto* gb = detail::sink(self, 1);
                               for (std::size_t p = 0; p < off_a.size(); ++p) {
                                 detail::ConstMap g(self.grad.data() + p * nn * nm, nn, nm);
                                 if (ga) detail::MutMap(ga->data() + off_a[p], nn, nk).noalias() += g * detail::ConstMap(bv.data() + off_b[p], nk, nm).transpose();
                                 if (gb) detail::MutMap(gb->data() + off_b[p], nk, nm).noalias() += detail::ConstMap(av.data() + off_a[p], nn, nk).transpose() * g;
                               }
                             });
}

// ---------------------------------------------------------------------------
// lookup

/// Row gather: result[..., :] = table[index, :]; `prefix` is the index shape.
inline Tensor gather_rows(const Tensor& table, std::span<const int> indices, Shape prefix) {
  if (table.dim() != 2) throw dimension_error("gather_rows: table must be 2-D, got " + to_string(table.shape()));
  if (numel(prefix) != indices.size()) throw dimension_error("gather_rows: index count does not match " + to_string(prefix));
  const std::size_t rows = table.shape()[0], width = table.shape()[1];
  for (int i : indices)
    if (i < 0 || static_cast<std::size_t>(i) >= rows) throw input_error("gather_rows: index " + std::to_string(i) + " outside table of " + std::to_string(rows) + " rows");
  std::vector<double> out(indices.size() * width);
  const auto tv = table.data();
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy_n(tv.data() + static_cast<std::size_t>(indices[r]) * width, width, out.data() + r * width);
  prefix.push_back(width);
  return detail::make_result(std::move(prefix), std::move(out), {&table},
                             [idx = std::vector<int>(indices.begin(), indices.end()), width](TensorNode& self) {
                               auto* gt = detail::sink(self, 0);
                               if (!gt) return;
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 for (std::size_t k = 0; k < width; ++k) (*gt)[static_cast<std::size_t>(idx[r]) * width + k] += self.grad[r * width + k];
                             });
}

// ---------------------------------------------------------------------------
// checks

inline bool all_finite(const Tensor& t) {
  const auto v = t.data();
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace meta_attention
