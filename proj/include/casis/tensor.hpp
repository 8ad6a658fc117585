#pragma once

// Reverse-mode autodiff tensor. A Tensor is a shared handle to a graph node;
// ops record a backward closure on their output while grad mode is on and
// at least one input requires grad.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "casis/errors.hpp"

namespace casis {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  T* grad_ptr() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (numel_of(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
  static Tensor full(Shape shape, T value) {
    const auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  /// Size of axis `i`; negative values count from the back.
  std::size_t dim(int i) const {
    const int r = static_cast<int>(rank());
    const int a = i < 0 ? i + r : i;
    if (a < 0 || a >= r)
      throw DimensionError("axis " + std::to_string(i) + " out of range for shape " +
                           shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(a)];
  }

  std::span<const T> data() const { return node_->data; }
  /// Direct write access, reserved for initializers and optimizers.
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return std::span<T>(node_->grad_ptr(), numel()); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  T at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw DimensionError("at(): index rank mismatch");
    std::size_t off = 0;
    std::size_t a = 0;
    for (auto i : idx) {
      if (i >= node_->shape[a])
        throw DimensionError("at(): index out of range on axis " + std::to_string(a));
      off = off * node_->shape[a] + i;
      ++a;
    }
    return node_->data[off];
  }

  /// Leaf copy of the values, cut from the graph.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  Tensor clone() const { return Tensor(shape(), node_->data, requires_grad()); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(out));
  }

  /// Back-propagates from this scalar. The recorded graph is released afterwards.
  void backward() const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

template <class T>
void Tensor<T>::backward() const {
  if (numel() != 1)
    throw UsageError("backward() requires a scalar, got shape " + shape_str(shape()));
  if (!node_->requires_grad) throw UsageError("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) n->grad_ptr();
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward) n->backward(*n);
  }
  // Release parents first to last: a node can only be freed by a later one.
  for (Node<T>* n : order) {
    n->backward = nullptr;
    n->parents.clear();
  }
}

namespace detail {

/// Wraps an op result, recording `backward` when any input needs a gradient.
template <class T, class Fn>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs, const char* op,
                      Fn&& backward) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto* in : inputs)
    if (in && in->defined() && in->requires_grad()) any = true;
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.op = op;
  for (const auto* in : inputs)
    if (in && in->defined() && in->requires_grad()) node.parents.push_back(in->node());
  node.backward = std::forward<Fn>(backward);
  return out;
}

template <class T, class Fn>
Tensor<T> make_result_n(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                        const char* op, Fn&& backward) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs)
    if (in.requires_grad()) any = true;
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.op = op;
  for (const auto& in : inputs)
    if (in.requires_grad()) node.parents.push_back(in.node());
  node.backward = std::forward<Fn>(backward);
  return out;
}

}  // namespace detail

}  // namespace casis
