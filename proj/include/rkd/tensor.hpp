// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense n-dimensional tensors with reverse-mode automatic differentiation.
// Tensors are value-semantic handles onto shared nodes; every op that runs
// while gradient recording is enabled links its output to its inputs, and
// backward() walks that graph once in reverse topological order.

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "rkd/errors.hpp"
#include "rkd/rng.hpp"

namespace rkd {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Thread-local switch: when disabled, ops compute values but record no graph.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool f = true;
    return f;
  }
};

struct NoGradGuard {
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev); }
  bool prev;
};

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty means "no grad accumulated"
  bool requires_grad = false;
  std::string name;  // set for named parameters, useful in error messages

  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  bool defined() const { return static_cast<bool>(node_); }

  static Tensor from(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<TensorNode<S>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), S(0), requires_grad);
  }

  static Tensor full(Shape shape, S fill, bool requires_grad = false) {
    std::vector<S> d(static_cast<size_t>(shape_numel(shape)), fill);
    return from(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(S v) { return from({1}, {v}); }

  // Seeded normal(0, stddev) fill.
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::vector<S> d(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : d) x = static_cast<S>(rng.normal(0.0, stddev));
    return from(std::move(shape), std::move(d), requires_grad);
  }

  const Shape& shape() const { return node()->shape; }
  int64_t dim(size_t i) const { return node()->shape.at(i); }
  size_t ndim() const { return node()->shape.size(); }
  int64_t numel() const { return static_cast<int64_t>(node()->value.size()); }

  const std::vector<S>& values() const { return node()->value; }
  std::vector<S>& mutable_values() { return node()->value; }
  const S* data() const { return node()->value.data(); }
  S* data() { return node()->value.data(); }

  bool requires_grad() const { return node()->requires_grad; }
  void set_requires_grad(bool on) { node()->requires_grad = on; }

  const std::string& name() const { return node()->name; }
  void set_name(std::string n) { node()->name = std::move(n); }

  bool has_grad() const { return !node()->grad.empty(); }
  const std::vector<S>& grad() const {
    if (!has_grad()) throw ShapeError("tensor '" + node()->name + "' has no grad");
    return node()->grad;
  }
  void zero_grad() { node()->grad.clear(); }

  S item() const {
    if (numel() != 1)
      throw ShapeError("item() on non-scalar tensor of shape " + shape_str(shape()));
    return node()->value[0];
  }

  // Same values, detached from the graph.
  Tensor detach() const {
    return from(node()->shape, node()->value, false);
  }

  std::shared_ptr<TensorNode<S>>& node() { return require_node(); }
  const std::shared_ptr<TensorNode<S>>& node() const { return require_node(); }

 private:
  std::shared_ptr<TensorNode<S>>& require_node() {
    if (!node_) throw ShapeError("use of undefined tensor");
    return node_;
  }
  const std::shared_ptr<TensorNode<S>>& require_node() const {
    if (!node_) throw ShapeError("use of undefined tensor");
    return node_;
  }

  std::shared_ptr<TensorNode<S>> node_;
};

namespace detail {

// Whether an op invoked on these inputs should record a graph node.
template <typename S>
bool tracing(std::initializer_list<const Tensor<S>*> inputs) {
  if (!GradMode::enabled()) return false;
  for (const Tensor<S>* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

template <typename S>
void accumulate(TensorNode<S>& n, const S* delta) {
  if (!n.requires_grad) return;
  n.ensure_grad();
  S* g = n.grad.data();
  const size_t sz = n.value.size();
  for (size_t i = 0; i < sz; ++i) g[i] += delta[i];
}

}  // namespace detail

// Populate grads of every requires_grad tensor reachable from `loss`.
template <typename S>
void backward(const Tensor<S>& loss) {
  if (loss.numel() != 1)
    throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));

  using Node = TensorNode<S>;
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS over parents.
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      topo.push_back(n);
      stack.pop_back();
    }
  }

  loss.node()->grad.assign(1, S(1));
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

}  // namespace rkd
