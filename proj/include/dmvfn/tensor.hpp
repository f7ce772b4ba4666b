#pragma once

// Dense tensors with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto shared storage. Operations never modify
// their inputs; they return fresh tensors, and when any input requires a
// gradient (and grad mode is on) the result records a TapeNode holding the
// parents and a backward rule. backward() walks the recorded DAG once in
// reverse topological order and accumulates gradients into every
// requires_grad ancestor.
//
// Scalar type is a template parameter: float for training and inference,
// double for finite-difference recomputation in tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dmvfn/errors.hpp"

namespace dmvfn {

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(s));
    n *= d;
  }
  return n;
}

namespace detail {
inline thread_local bool grad_mode = true;
}

inline bool grad_enabled() { return detail::grad_mode; }

/// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct TensorStorage;

template <class T>
struct TapeNode {
  std::string op;
  std::vector<std::shared_ptr<TensorStorage<T>>> parents;
  // Receives the gradient of the node's output and accumulates into parents.
  std::function<void(std::span<const T>)> backward;
  bool consumed = false;
};

template <class T>
struct TensorStorage {
  Shape dims;
  std::vector<T> values;
  std::vector<T> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::shared_ptr<TapeNode<T>> node;  // null for leaves
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape dims, T fill = T{0}) : s_(std::make_shared<TensorStorage<T>>()) {
    const auto n = numel_of(dims);
    s_->dims = std::move(dims);
    s_->values.assign(static_cast<std::size_t>(n), fill);
  }

  Tensor(Shape dims, std::vector<T> values) : s_(std::make_shared<TensorStorage<T>>()) {
    const auto n = numel_of(dims);
    if (static_cast<std::int64_t>(values.size()) != n) {
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match dims " +
                       shape_str(dims));
    }
    s_->dims = std::move(dims);
    s_->values = std::move(values);
  }

  static Tensor zeros(Shape dims) { return Tensor(std::move(dims), T{0}); }
  static Tensor full(Shape dims, T v) { return Tensor(std::move(dims), v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& dims() const { return s_->dims; }
  std::int64_t dim(std::size_t i) const { return s_->dims.at(i); }
  std::size_t rank() const { return s_->dims.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(s_->values.size()); }

  std::span<const T> values() const { return s_->values; }
  // Direct write access. Only meaningful on leaves (parameters, inputs).
  std::span<T> mutable_values() { return s_->values; }
  const std::vector<T>& vec() const { return s_->values; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor with dims " + shape_str(dims()));
    return s_->values[0];
  }

  T at(std::int64_t b, std::int64_t c, std::int64_t y, std::int64_t x) const {
    const auto& d = s_->dims;
    return s_->values[static_cast<std::size_t>(((b * d[1] + c) * d[2] + y) * d[3] + x)];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    if (s_->node) throw std::logic_error("requires_grad can only be set on leaf tensors");
    s_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return s_ && !s_->grad.empty(); }
  std::span<const T> grad() const { return s_->grad; }
  Tensor grad_tensor() const {
    if (!has_grad()) return Tensor(dims(), T{0});
    return Tensor(dims(), s_->grad);
  }
  void zero_grad() { s_->grad.clear(); }

  const std::string* op_name() const { return s_->node ? &s_->node->op : nullptr; }

  Tensor detach() const { return Tensor(dims(), s_->values); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(s_->values.begin(), s_->values.end());
    return Tensor<U>(dims(), std::move(out));
  }

  const std::shared_ptr<TensorStorage<T>>& storage() const { return s_; }

 private:
  std::shared_ptr<TensorStorage<T>> s_;
};

namespace detail {

// Wraps freshly computed values into a tensor and, when needed, attaches a
// tape node. `backward` receives d(loss)/d(output).
template <class T>
Tensor<T> record(Shape dims, std::vector<T> values, const char* op,
                 std::initializer_list<Tensor<T>> parents,
                 std::function<void(std::span<const T>)> backward) {
  Tensor<T> out(std::move(dims), std::move(values));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || (p.defined() && p.requires_grad());
  if (!any) return out;
  auto node = std::make_shared<TapeNode<T>>();
  node->op = op;
  for (const auto& p : parents)
    if (p.defined() && p.requires_grad()) node->parents.push_back(p.storage());
  node->backward = std::move(backward);
  out.storage()->requires_grad = true;
  out.storage()->node = std::move(node);
  return out;
}

// Gradient buffer of `t`, allocated on first use; null when t needs no grad.
template <class T>
T* grad_sink(const Tensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  auto& g = t.storage()->grad;
  if (g.empty()) g.assign(t.vec().size(), T{0});
  return g.data();
}

}  // namespace detail

/// Runs reverse-mode differentiation from a single-element root.
/// Each recorded node fires once; its saved context is released afterwards,
/// so a second backward over the same tape throws.
template <class T>
void backward(const Tensor<T>& root) {
  if (!root.defined() || root.numel() != 1)
    throw ShapeError("backward root must be a single element, got " +
                     (root.defined() ? shape_str(root.dims()) : std::string("undefined")));
  if (!root.requires_grad()) throw std::logic_error("backward root does not require grad");

  using Storage = TensorStorage<T>;
  std::vector<Storage*> order;
  std::unordered_set<Storage*> seen;
  std::vector<std::pair<Storage*, std::size_t>> stack;
  stack.emplace_back(root.storage().get(), 0);
  seen.insert(root.storage().get());
  while (!stack.empty()) {
    auto& [s, next] = stack.back();
    if (s->node && s->node->consumed) throw std::logic_error("tape already consumed (" + s->node->op + ")");
    if (s->node && next < s->node->parents.size()) {
      Storage* p = s->node->parents[next++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
      continue;
    }
    order.push_back(s);
    stack.pop_back();
  }

  auto* g = detail::grad_sink(root);
  g[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Storage* s = *it;
    if (!s->node) continue;
    if (!s->grad.empty()) s->node->backward(std::span<const T>(s->grad));
    s->node->consumed = true;
    s->node->backward = nullptr;
  }
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.vec().begin(), t.vec().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace dmvfn
