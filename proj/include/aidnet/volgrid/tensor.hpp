#pragma once

// Reference-counted N-d tensor of doubles with a reverse-mode differentiation
// graph. Results of ops hold their parents alive; a backward pass walks the
// graph from a scalar root in reverse topological order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "aidnet/error.hpp"

namespace aidnet::vg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

struct TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

/// Receives d(root)/d(self) and accumulates into the gradient buffers of the
/// parents. A null buffer means that parent does not need a gradient.
using BackwardFn = std::function<void(const TensorImpl& self, std::span<const double> grad_out,
                                      std::span<std::vector<double>*> parent_grads)>;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool retain_grad = false;
  std::vector<ImplPtr> parents;
  BackwardFn backward;
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph construction on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline void check_finite(std::span<const double> values, const char* where) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + where);
  }
}

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl>()) {
    if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
    for (std::size_t e : shape) {
      if (e == 0) throw ShapeError("zero extent in tensor shape " + shape_str(shape));
    }
    if (numel_of(shape) != data.size()) {
      throw ShapeError("shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    }
    check_finite(data, "tensor construction");
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  /// Internal constructor for op results. Attaches the graph node only when
  /// grad mode is on and some parent participates in differentiation.
  static Tensor from_op(Shape shape, std::vector<double> data, std::vector<ImplPtr> parents,
                        BackwardFn backward, const char* op_name) {
    check_finite(data, op_name);
    Tensor out;
    out.impl_ = std::make_shared<TensorImpl>();
    out.impl_->shape = std::move(shape);
    out.impl_->data = std::move(data);
    const bool needs = detail::grad_mode() &&
                       std::any_of(parents.begin(), parents.end(),
                                   [](const ImplPtr& p) { return p->requires_grad; });
    if (needs) {
      out.impl_->requires_grad = true;
      out.impl_->parents = std::move(parents);
      out.impl_->backward = std::move(backward);
    }
    return out;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  /// Direct write access; reserved for initialization and optimizer updates.
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    if (impl_->backward) throw ShapeError("requires_grad can only be changed on leaf tensors");
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return !impl_->backward; }

  /// Keep this non-leaf tensor's gradient after backward().
  Tensor& retain_grad() {
    impl_->retain_grad = true;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  /// Values only, no graph, no gradient.
  Tensor detach() const { return Tensor(shape(), impl_->data, false); }

  /// Fresh leaf with the same values and requires_grad flag.
  Tensor clone() const { return Tensor(shape(), impl_->data, impl_->requires_grad); }

  const ImplPtr& impl() const { return impl_; }
  bool same_node(const Tensor& other) const { return impl_ == other.impl_; }

  void backward() const;

 private:
  ImplPtr impl_;
};

inline void Tensor::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() needs a scalar root, got " + shape_str(shape()));
  }
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<TensorImpl*> order;
  std::unordered_map<TensorImpl*, bool> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{impl_.get(), 0}};
  visited[impl_.get()] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorImpl* p = node->parents[next++].get();
      if (p->requires_grad && !visited[p]) {
        visited[p] = true;
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<TensorImpl*, std::vector<double>> grads;
  grads[impl_.get()] = {1.0};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    std::vector<double> g = std::move(found->second);
    grads.erase(found);

    if (node->backward) {
      std::vector<std::vector<double>*> parent_grads(node->parents.size(), nullptr);
      for (std::size_t i = 0; i < node->parents.size(); ++i) {
        TensorImpl* p = node->parents[i].get();
        if (!p->requires_grad) continue;
        auto& buf = grads[p];
        if (buf.empty()) buf.assign(p->data.size(), 0.0);
        parent_grads[i] = &buf;
      }
      node->backward(*node, g, parent_grads);
    }
    if (!node->backward || node->retain_grad) {
      check_finite(g, "backward pass");
      if (node->grad.empty()) {
        node->grad = std::move(g);
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
      }
    }
  }
}

}  // namespace aidnet::vg
