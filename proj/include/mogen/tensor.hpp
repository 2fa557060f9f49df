#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mogen/common.hpp"
#include "mogen/rng.hpp"

namespace mogen {

namespace detail {

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> values;
  std::vector<S> grad;  // lazily allocated, same length as values
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<S>>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node<S>&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), S(0));
  }
};

}  // namespace detail

inline thread_local int g_no_grad_depth = 0;

inline bool grad_enabled() { return g_no_grad_depth == 0; }

// Disables graph recording in scope; used by sampling loops and optimizers.
struct NoGradGuard {
  NoGradGuard() { ++g_no_grad_depth; }
  ~NoGradGuard() { --g_no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense row-major tensor with optional reverse-mode gradient tracking.
// Tensors are immutable once they participate in a graph; parameters are
// mutated in place only between steps (raw()), never mid-graph.
template <typename S>
class Tensor {
 public:
  Tensor() : n_(std::make_shared<detail::Node<S>>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_vec(std::move(shape), {}, requires_grad, S(0));
  }

  static Tensor full(Shape shape, S value, bool requires_grad = false) {
    return from_vec(std::move(shape), {}, requires_grad, value);
  }

  static Tensor from_data(Shape shape, std::vector<S> values, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
      throw ShapeError("from_data: " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    }
    for (std::int64_t e : shape) {
      if (e <= 0) throw ShapeError("from_data: nonpositive extent in " + shape_str(shape));
    }
    Tensor t;
    t.n_->shape = std::move(shape);
    t.n_->values = std::move(values);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(S value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  static Tensor randn(Shape shape, Rng& rng, bool requires_grad = false) {
    std::vector<S> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<S>(rng.normal());
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor uniform(Shape shape, S lo, S hi, Rng& rng, bool requires_grad = false) {
    std::vector<S> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  std::int64_t dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return n_->numel(); }
  bool requires_grad() const { return n_->requires_grad; }
  bool defined() const { return !n_->shape.empty(); }

  const S* data() const { return n_->values.data(); }
  S* raw() { return n_->values.data(); }
  const std::vector<S>& values() const { return n_->values; }

  S at(std::int64_t i) const { return n_->values[static_cast<std::size_t>(i)]; }
  S at(std::int64_t i, std::int64_t j) const {
    return n_->values[static_cast<std::size_t>(i * dim(1) + j)];
  }
  S at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return n_->values[static_cast<std::size_t>((i * dim(1) + j) * dim(2) + k)];
  }
  S& mut(std::int64_t i) { return n_->values[static_cast<std::size_t>(i)]; }
  S& mut(std::int64_t i, std::int64_t j) {
    return n_->values[static_cast<std::size_t>(i * dim(1) + j)];
  }
  S& mut(std::int64_t i, std::int64_t j, std::int64_t k) {
    return n_->values[static_cast<std::size_t>((i * dim(1) + j) * dim(2) + k)];
  }

  S item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
    return n_->values[0];
  }

  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<S>& grad() const { return n_->grad; }
  S grad_at(std::int64_t i) const { return n_->grad[static_cast<std::size_t>(i)]; }

  void zero_grad() { n_->grad.assign(n_->values.size(), S(0)); }

  void set_requires_grad(bool rg) {
    if (n_->backward_fn) throw NumericError("set_requires_grad on non-leaf tensor");
    n_->requires_grad = rg;
  }

  // Value copy detached from any graph.
  Tensor detach() const {
    Tensor t;
    t.n_->shape = n_->shape;
    t.n_->values = n_->values;
    return t;
  }

  // Converts the payload to another scalar type (detached).
  template <typename S2>
  Tensor<S2> cast() const {
    std::vector<S2> v(n_->values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<S2>(n_->values[i]);
    return Tensor<S2>::from_data(n_->shape, std::move(v));
  }

  std::shared_ptr<detail::Node<S>> node() const { return n_; }

  // Internal: builds an op result. Gradient tracking is skipped when disabled
  // or when no parent requires it.
  static Tensor make_op(Shape shape, std::vector<S> values,
                        std::vector<Tensor> parents,
                        std::function<void(detail::Node<S>&)> backward_fn) {
    Tensor t = from_data(std::move(shape), std::move(values));
    bool rg = false;
    if (grad_enabled()) {
      for (const auto& p : parents) rg = rg || p.requires_grad();
    }
    if (rg) {
      t.n_->requires_grad = true;
      t.n_->backward_fn = std::move(backward_fn);
      t.n_->parents.reserve(parents.size());
      for (auto& p : parents) t.n_->parents.push_back(p.n_);
    }
    return t;
  }

 private:
  static Tensor from_vec(Shape shape, std::vector<S> v, bool rg, S fill) {
    const auto n = shape_numel(shape);
    for (std::int64_t e : shape) {
      if (e <= 0) throw ShapeError("tensor: nonpositive extent in " + shape_str(shape));
    }
    v.assign(static_cast<std::size_t>(n), fill);
    Tensor t;
    t.n_->shape = std::move(shape);
    t.n_->values = std::move(v);
    t.n_->requires_grad = rg;
    return t;
  }

  std::shared_ptr<detail::Node<S>> n_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Ordered record of the primitive ops reachable from one root. Replaying it
// backward visits each node exactly once in reverse topological order.
template <typename S>
class GradTape {
 public:
  explicit GradTape(const Tensor<S>& root) : root_(root.node()) {
    // Iterative post-order DFS; order_ ends up topological (parents first).
    std::unordered_set<const detail::Node<S>*> seen;
    std::vector<std::pair<detail::Node<S>*, std::size_t>> stack;
    if (root_->requires_grad) {
      stack.emplace_back(root_.get(), 0);
      seen.insert(root_.get());
    }
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node<S>* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::size_t size() const { return order_.size(); }

  // Seeds the root with d(root)/d(root) = 1 and propagates to all leaves.
  void run() {
    if (ran_) throw NumericError("GradTape::run called twice");
    ran_ = true;
    if (order_.empty()) return;
    if (root_->numel() != 1) {
      throw ShapeError("backward: root must be scalar, got " + shape_str(root_->shape));
    }
    root_->ensure_grad();
    root_->grad[0] += S(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      detail::Node<S>* node = *it;
      if (node->backward_fn) {
        node->ensure_grad();
        node->backward_fn(*node);
      }
    }
  }

 private:
  std::shared_ptr<detail::Node<S>> root_;
  std::vector<detail::Node<S>*> order_;
  bool ran_ = false;
};

template <typename S>
void backward(const Tensor<S>& loss) {
  GradTape<S>(loss).run();
}

}  // namespace mogen
