// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

// Dense tensors with define-by-run reverse-mode autodiff.
//
// Every op returns a fresh tensor. When any input requires grad (and grad
// mode is on) the output keeps a link to its inputs plus a backward rule;
// `backward(loss)` orders that graph into a Tape and runs the rules in
// reverse. Leaves accumulate gradients additively across calls until
// `zero_grad()`.
//
// Numeric conventions: layer_norm uses eps = 1e-5 and no affine part (gain
// and bias are applied with mul/add); gelu is the tanh approximation;
// softmax over a slice that is entirely -inf yields zeros.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace cosmo {

#ifdef COSMO_REAL_FLOAT32
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<real> data;
  std::vector<real> grad;  // empty until something flows into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Pushes this node's grad into its inputs' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }
  std::vector<real>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), real{0});
    return grad;
  }
};

inline thread_local bool grad_mode_enabled = true;

}  // namespace detail

/// RAII switch disabling graph recording on the current thread.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
  ~NoGradGuard() { detail::grad_mode_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false) {
    if (numel_of(shape) != values.size()) {
      throw ShapeError("tensor: shape " + to_string(shape) + " holds " +
                       std::to_string(numel_of(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return from(std::move(shape), std::vector<real>(n, real{0}), requires_grad);
  }

  static Tensor full(Shape shape, real value, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return from(std::move(shape), std::vector<real>(n, value), requires_grad);
  }

  static Tensor scalar(real value, bool requires_grad = false) {
    return from({}, {value}, requires_grad);
  }

  template <class Rng>
  static Tensor randn(Shape shape, Rng& rng, real stddev, bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<real> values(numel_of(shape));
    for (auto& v : values) v = static_cast<real>(dist(rng) * stddev);
    return from(std::move(shape), std::move(values), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op_name() const { return node_->op; }

  std::span<const real> data() const { return node_->data; }
  real operator[](std::size_t i) const { return node_->data[i]; }
  real at(std::size_t row, std::size_t col) const {
    return node_->data[row * node_->shape.back() + col];
  }
  real item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
    return node_->data[0];
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const real> grad() const { return node_->grad; }
  std::span<real> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  // Direct writes are reserved for leaves (optimizer updates, checkpoint
  // restore, finite differences). Interior values are immutable.
  std::span<real> mutable_data() {
    if (!node_->is_leaf()) throw std::logic_error("mutable_data: only leaf tensors may be written");
    return node_->data;
  }

  void set_requires_grad(bool flag) {
    if (!node_->is_leaf()) throw std::logic_error("set_requires_grad: only leaf tensors");
    node_->requires_grad = flag;
    if (!flag) node_->grad.clear();
  }

  Tensor detach() const { return from(shape(), node_->data, false); }

  const detail::Node* id() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered view of the graph reachable from a root.
class Tape {
 public:
  static Tape record(const Tensor& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    // Iterative post-order DFS: a node is emitted after all of its inputs.
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        tape.nodes_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::span<detail::Node* const> nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }

 private:
  std::vector<detail::Node*> nodes_;
};

inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  }
  Tape tape = Tape::record(loss);
  if (tape.empty()) throw std::logic_error("backward: loss does not depend on any tensor requiring grad");
  for (auto* node : tape.nodes()) {
    if (!node->is_leaf()) node->grad.clear();
  }
  loss.node()->ensure_grad()[0] = real{1};
  for (auto it = tape.nodes().rbegin(); it != tape.nodes().rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && node->grad.size() == node->data.size()) node->backward(*node);
  }
}

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_mode_enabled) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline Tensor make_result(const char* op, Shape shape, std::vector<real> data,
                          std::vector<std::shared_ptr<Node>> inputs,
                          std::function<void(Node&)> rule, bool track) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (track) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(rule);
  }
  return Tensor(std::move(node));
}

inline std::vector<real>* grad_sink(const std::shared_ptr<Node>& input) {
  return input->requires_grad ? &input->ensure_grad() : nullptr;
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// rhs broadcasts onto lhs when it has one element or its shape is a suffix of lhs's.
inline bool broadcastable(const Shape& lhs, const Shape& rhs) {
  if (numel_of(rhs) == 1) return true;
  if (rhs.size() > lhs.size()) return false;
  return std::equal(rhs.rbegin(), rhs.rend(), lhs.rbegin());
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<real> out(m * n, real{0});
  const real* pa = a.data().data();
  const real* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    real* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const real av = pa[i * k + p];
      if (av == real{0}) continue;
      const real* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  const bool track = detail::any_requires_grad({&a, &b});
  auto na = a.node(), nb = b.node();
  return detail::make_result(
      "matmul", {m, n}, std::move(out), {na, nb},
      [na, nb, m, k, n](detail::Node& self) {
        const real* g = self.grad.data();
        if (auto* ga = detail::grad_sink(na)) {
          // dA = G B^T
          const real* pb = nb->data.data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              real acc = 0;
              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb[p * n + j];
              (*ga)[i * k + p] += acc;
            }
        }
        if (auto* gb = detail::grad_sink(nb)) {
          // dB = A^T G
          const real* pa = na->data.data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const real av = pa[i * k + p];
              if (av == real{0}) continue;
              real* dst = gb->data() + p * n;
              for (std::size_t j = 0; j < n; ++j) dst[j] += av * g[i * n + j];
            }
        }
      },
      track);
}

namespace detail {

template <class Fwd, class DLhs, class DRhs>
Tensor binary_broadcast(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DLhs dlhs, DRhs drhs) {
  if (!broadcastable(a.shape(), b.shape())) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(b.shape()) + " onto " +
                     to_string(a.shape()));
  }
  const std::size_t n = a.numel(), period = b.numel();
  std::vector<real> out(n);
  const real* pa = a.data().data();
  const real* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i % period]);
  const bool track = any_requires_grad({&a, &b});
  auto na = a.node(), nb = b.node();
  return make_result(
      op, a.shape(), std::move(out), {na, nb},
      [na, nb, n, period, dlhs, drhs](Node& self) {
        const real* g = self.grad.data();
        const real* pa = na->data.data();
        const real* pb = nb->data.data();
        if (auto* ga = grad_sink(na))
          for (std::size_t i = 0; i < n; ++i) (*ga)[i] += g[i] * dlhs(pa[i], pb[i % period]);
        if (auto* gb = grad_sink(nb))
          for (std::size_t i = 0; i < n; ++i) (*gb)[i % period] += g[i] * drhs(pa[i], pb[i % period]);
      },
      track);
}

template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  std::vector<real> out(a.numel());
  const real* pa = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i]);
  const bool track = any_requires_grad({&a});
  auto na = a.node();
  return make_result(
      op, a.shape(), std::move(out), {na},
      [na, deriv](Node& self) {
        auto& ga = na->ensure_grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * deriv(na->data[i], self.data[i]);
      },
      track);
}

}  // namespace detail

/// Elementwise a + b; b may broadcast as a scalar or a trailing-shape suffix.
inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      "add", a, b, [](real x, real y) { return x + y; }, [](real, real) { return real{1}; },
      [](real, real) { return real{1}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      "mul", a, b, [](real x, real y) { return x * y; }, [](real, real y) { return y; },
      [](real x, real) { return x; });
}

inline Tensor scale(const Tensor& a, real factor) {
  return detail::unary(
      "scale", a, [factor](real x) { return x * factor; }, [factor](real, real) { return factor; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      "tanh", a, [](real x) { return std::tanh(x); }, [](real, real y) { return real{1} - y * y; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      "exp", a, [](real x) { return std::exp(x); }, [](real, real y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary(
      "log", a, [](real x) { return std::log(x); }, [](real x, real) { return real{1} / x; });
}

inline Tensor gelu(const Tensor& a) {
  constexpr real k = real(0.7978845608028654);  // sqrt(2/pi)
  constexpr real c = real(0.044715);
  return detail::unary(
      "gelu", a,
      [](real x) { return real(0.5) * x * (real{1} + std::tanh(k * (x + c * x * x * x))); },
      [](real x, real) {
        const real u = k * (x + c * x * x * x);
        const real t = std::tanh(u);
        const real du = k * (real{1} + real{3} * c * x * x);
        return real(0.5) * (real{1} + t) + real(0.5) * x * (real{1} - t * t) * du;
      });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got shape " + to_string(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<real> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  const bool track = detail::any_requires_grad({&a});
  auto na = a.node();
  return detail::make_result(
      "transpose", {c, r}, std::move(out), {na},
      [na, r, c](detail::Node& self) {
        auto& ga = na->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
      },
      track);
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  const bool track = detail::any_requires_grad({&a});
  auto na = a.node();
  return detail::make_result(
      "reshape", std::move(shape), na->data, {na},
      [na](detail::Node& self) {
        auto& ga = na->ensure_grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
      },
      track);
}

/// Half-open range [begin, end) along one axis.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto s = detail::split_axis(a.shape(), axis, "slice");
  if (begin > end || end > s.n) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of bounds for axis " + std::to_string(axis) + " of shape " + to_string(a.shape()));
  }
  const std::size_t len = end - begin;
  Shape shape = a.shape();
  shape[axis] = len;
  std::vector<real> out(s.outer * len * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(a.data().data() + (o * s.n + begin) * s.inner, len * s.inner, out.data() + o * len * s.inner);
  const bool track = detail::any_requires_grad({&a});
  auto na = a.node();
  return detail::make_result(
      "slice", std::move(shape), std::move(out), {na},
      [na, s, begin, len](detail::Node& self) {
        auto& ga = na->ensure_grad();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < len * s.inner; ++i)
            ga[(o * s.n + begin) * s.inner + i] += self.grad[o * len * s.inner + i];
      },
      track);
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  detail::split_axis(first, axis, "concat");
  Shape shape = first;
  shape[axis] = 0;
  bool track = false;
  for (const auto& p : parts) {
    bool ok = p.rank() == first.size();
    for (std::size_t d = 0; ok && d < first.size(); ++d) ok = d == axis || p.dim(d) == first[d];
    if (!ok) throw ShapeError("concat: shape " + to_string(p.shape()) + " does not match " + to_string(first) +
                              " off axis " + std::to_string(axis));
    shape[axis] += p.dim(axis);
    track = track || detail::any_requires_grad({&p});
  }
  const auto s = detail::split_axis(shape, axis, "concat");
  std::vector<real> out(numel_of(shape));
  std::vector<std::shared_ptr<detail::Node>> nodes;
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis);
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(p.data().data() + o * len * s.inner, len * s.inner, out.data() + (o * s.n + offset) * s.inner);
    nodes.push_back(p.node());
    offsets.push_back(offset);
    offset += len;
  }
  auto inputs = nodes;
  return detail::make_result(
      "concat", std::move(shape), std::move(out), std::move(inputs),
      [nodes, offsets, s, axis](detail::Node& self) {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          auto* g = detail::grad_sink(nodes[k]);
          if (!g) continue;
          const std::size_t len = nodes[k]->shape[axis];
          for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < len * s.inner; ++i)
              (*g)[o * len * s.inner + i] += self.grad[(o * s.n + offsets[k]) * s.inner + i];
        }
      },
      track);
}

inline Tensor softmax(const Tensor& a, std::size_t axis) {
  const auto s = detail::split_axis(a.shape(), axis, "softmax");
  std::vector<real> out(a.numel(), real{0});
  const real* pa = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      real mx = -std::numeric_limits<real>::infinity();
      for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, pa[base + i * s.inner]);
      if (mx == -std::numeric_limits<real>::infinity()) continue;  // fully masked slice
      real total = 0;
      for (std::size_t i = 0; i < s.n; ++i) {
        const real e = std::exp(pa[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] /= total;
    }
  const bool track = detail::any_requires_grad({&a});
  auto na = a.node();
  return detail::make_result(
      "softmax", a.shape(), std::move(out), {na},
      [na, s](detail::Node& self) {
        auto& ga = na->ensure_grad();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.n * s.inner + in;
            real dot = 0;
            for (std::size_t i = 0; i < s.n; ++i) dot += self.grad[base + i * s.inner] * self.data[base + i * s.inner];
            for (std::size_t i = 0; i < s.n; ++i) {
              const std::size_t idx = base + i * s.inner;
              ga[idx] += self.data[idx] * (self.grad[idx] - dot);
            }
          }
      },
      track);
}

inline constexpr real kLayerNormEps = real(1e-5);

/// (x - mean) / sqrt(var + eps) along `axis`, population variance.
inline Tensor layer_norm(const Tensor& a, std::size_t axis, real eps = kLayerNormEps) {
  const auto s = detail::split_axis(a.shape(), axis, "layer_norm");
  std::vector<real> out(a.numel());
  std::vector<real> inv_std(s.outer * s.inner);
  const real* pa = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      real mean = 0;
      for (std::size_t i = 0; i < s.n; ++i) mean += pa[base + i * s.inner];
      mean /= static_cast<real>(s.n);
      real var = 0;
      for (std::size_t i = 0; i < s.n; ++i) {
        const real d = pa[base + i * s.inner] - mean;
        var += d * d;
      }
      var /= static_cast<real>(s.n);
      const real is = real{1} / std::sqrt(var + eps);
      inv_std[o * s.inner + in] = is;
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] = (pa[base + i * s.inner] - mean) * is;
    }
  const bool track = detail::any_requires_grad({&a});
  auto na = a.node();
  return detail::make_result(
      "layer_norm", a.shape(), std::move(out), {na},
      [na, s, inv_std = std::move(inv_std)](detail::Node& self) {
        auto& ga = na->ensure_grad();
        const real inv_n = real{1} / static_cast<real>(s.n);
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.n * s.inner + in;
            real mean_g = 0, mean_gx = 0;
            for (std::size_t i = 0; i < s.n; ++i) {
              const std::size_t idx = base + i * s.inner;
              mean_g += self.grad[idx];
              mean_gx += self.grad[idx] * self.data[idx];
            }
            mean_g *= inv_n;
            mean_gx *= inv_n;
            const real is = inv_std[o * s.inner + in];
            for (std::size_t i = 0; i < s.n; ++i) {
              const std::size_t idx = base + i * s.inner;
              ga[idx] += is * (self.grad[idx] - mean_g - self.data[idx] * mean_gx);
            }
          }
      },
      track);
}

inline Tensor sum(const Tensor& a) {
  real total = 0;
  for (real v : a.data()) total += v;
  const bool track = detail::any_requires_grad({&a});
  auto na = a.node();
  return detail::make_result(
      "sum", {}, {total}, {na},
      [na](detail::Node& self) {
        auto& ga = na->ensure_grad();
        for (auto& g : ga) g += self.grad[0];
      },
      track);
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), real{1} / static_cast<real>(a.numel()));
}

/// Rows of `table` ([vocab, dim]) selected by `ids`, giving [ids.size(), dim].
inline Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be rank 2, got " + to_string(table.shape()));
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<real> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw ShapeError("embedding_lookup: id " + std::to_string(ids[r]) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(table.data().data() + ids[r] * d, d, out.data() + r * d);
  }
  const bool track = detail::any_requires_grad({&table});
  auto nt = table.node();
  std::vector<int> idx(ids.begin(), ids.end());
  return detail::make_result(
      "embedding_lookup", {ids.size(), d}, std::move(out), {nt},
      [nt, idx = std::move(idx), d](detail::Node& self) {
        auto& gt = nt->ensure_grad();
        for (std::size_t r = 0; r < idx.size(); ++r)
          for (std::size_t j = 0; j < d; ++j) gt[idx[r] * d + j] += self.grad[r * d + j];
      },
      track);
}

/// Entries where mask != 0 are replaced by `value` and receive no gradient.
inline Tensor masked_fill(const Tensor& a, std::span<const std::uint8_t> mask, real value) {
  if (mask.size() != a.numel()) {
    throw ShapeError("masked_fill: mask of " + std::to_string(mask.size()) + " entries for shape " +
                     to_string(a.shape()));
  }
  std::vector<real> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = value;
  const bool track = detail::any_requires_grad({&a});
  auto na = a.node();
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return detail::make_result(
      "masked_fill", a.shape(), std::move(out), {na},
      [na, m = std::move(m)](detail::Node& self) {
        auto& ga = na->ensure_grad();
        for (std::size_t i = 0; i < ga.size(); ++i)
          if (!m[i]) ga[i] += self.grad[i];
      },
      track);
}

/// Weighted mean negative log-likelihood of `targets` under softmax(logits)
/// row-wise. A rank-1 input is treated as a single row. Empty `weights`
/// means unit weight per row; the result is sum(w * nll) / sum(w).
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                            std::span<const real> weights = {}) {
  const std::size_t rows = logits.rank() == 1 ? 1 : logits.dim(0);
  if (logits.rank() < 1 || logits.rank() > 2 || targets.size() != rows) {
    throw ShapeError("cross_entropy: logits " + to_string(logits.shape()) + " with " +
                     std::to_string(targets.size()) + " targets");
  }
  if (!weights.empty() && weights.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(rows) + " rows");
  }
  const std::size_t classes = logits.shape().back();
  std::vector<real> probs(logits.numel());
  std::vector<real> w(rows, real{1});
  if (!weights.empty()) std::copy(weights.begin(), weights.end(), w.begin());
  real wsum = 0, total = 0;
  const real* pl = logits.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= classes) {
      throw ShapeError("cross_entropy: target " + std::to_string(targets[r]) + " outside " +
                       std::to_string(classes) + " classes");
    }
    const real* row = pl + r * classes;
    const real mx = *std::max_element(row, row + classes);
    real z = 0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const real lse = mx + std::log(z);
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] = std::exp(row[c] - lse);
    wsum += w[r];
    if (w[r] != real{0}) total += w[r] * (lse - row[targets[r]]);
  }
  if (wsum <= real{0}) throw std::invalid_argument("cross_entropy: total weight is zero");
  const bool track = detail::any_requires_grad({&logits});
  auto nl = logits.node();
  std::vector<int> t(targets.begin(), targets.end());
  return detail::make_result(
      "cross_entropy", {}, {total / wsum}, {nl},
      [nl, probs = std::move(probs), w = std::move(w), t = std::move(t), wsum, classes](detail::Node& self) {
        auto& gl = nl->ensure_grad();
        const real g = self.grad[0] / wsum;
        for (std::size_t r = 0; r < t.size(); ++r) {
          if (w[r] == real{0}) continue;
          for (std::size_t c = 0; c < classes; ++c) {
            const real onehot = static_cast<int>(c) == t[r] ? real{1} : real{0};
            gl[r * classes + c] += g * w[r] * (probs[r * classes + c] - onehot);
          }
        }
      },
      track);
}

/// Each slice along the last axis scaled to unit L2 norm.
inline Tensor l2_normalize(const Tensor& a, real eps = real(1e-12)) {
  if (a.rank() == 0) throw ShapeError("l2_normalize: scalar input");
  const std::size_t d = a.shape().back(), rows = a.numel() / d;
  std::vector<real> out(a.numel());
  std::vector<real> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    real ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += a[r * d + j] * a[r * d + j];
    norms[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = a[r * d + j] / norms[r];
  }
  const bool track = detail::any_requires_grad({&a});
  auto na = a.node();
  return detail::make_result(
      "l2_normalize", a.shape(), std::move(out), {na},
      [na, d, norms = std::move(norms)](detail::Node& self) {
        auto& ga = na->ensure_grad();
        for (std::size_t r = 0; r < norms.size(); ++r) {
          real dot = 0;
          for (std::size_t j = 0; j < d; ++j) dot += self.grad[r * d + j] * self.data[r * d + j];
          for (std::size_t j = 0; j < d; ++j)
            ga[r * d + j] += (self.grad[r * d + j] - self.data[r * d + j] * dot) / norms[r];
        }
      },
      track);
}

/// Max over every parameter entry of |analytic - numeric| / max(1, |analytic|, |numeric|),
/// with central differences of step `eps`.
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps = 1e-5) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-3]");
  for (auto& p : params) {
    if (!p.node()->is_leaf()) throw std::invalid_argument("grad_check: parameters must be leaf tensors");
    p.zero_grad();
  }
  Tensor loss = f();
  if (!std::isfinite(static_cast<double>(loss.item()))) throw std::domain_error("grad_check: f is not finite");
  if (loss.requires_grad()) backward(loss);
  double worst = 0.0;
  for (auto& p : params) {
    std::vector<real> analytic(p.numel(), real{0});
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const real saved = values[i];
      values[i] = saved + static_cast<real>(eps);
      double up;
      {
        NoGradGuard ng;
        up = static_cast<double>(f().item());
      }
      values[i] = saved - static_cast<real>(eps);
      double down;
      {
        NoGradGuard ng;
        down = static_cast<double>(f().item());
      }
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) throw std::domain_error("grad_check: f is not finite");
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, err);
    }
  }
  for (auto& p : params) p.zero_grad();
  return worst;
}

}  // namespace cosmo
