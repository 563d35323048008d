// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "layalign/errors.hpp"

namespace layalign {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty means "no gradient"
  bool requires_grad = false;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

/// Dense row-major tensor with a shared handle. Copies alias the same node, so
/// a parameter handed to several modules is one parameter.
template <class T>
class Tensor {
 public:
  using Node = TensorNode<T>;
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
    if (layalign::numel(shape) != data.size()) {
      throw ShapeError("shape " + to_string(shape) + " holds " +
                       std::to_string(layalign::numel(shape)) +
                       " values, data has " + std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = layalign::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }
  template <class Rng>
  static Tensor randn(Shape shape, double stddev, Rng& rng, bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(layalign::numel(shape));
    for (T& x : v) x = static_cast<T>(dist(rng));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  /// Extent of axis i; negative i counts from the end.
  std::size_t dim(int i) const {
    const int r = static_cast<int>(rank());
    const int a = i < 0 ? i + r : i;
    if (a < 0 || a >= r) throw ContractError("axis " + std::to_string(i) + " out of range");
    return node_->shape[static_cast<std::size_t>(a)];
  }

  std::span<const T> data() const { return node_->data; }
  /// Only the optimizer, checkpoint loader and tests write through this.
  std::span<T> mutable_data() { return node_->data; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return std::span<T>(node_->grad_buffer(), numel()); }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy without gradient state.
  Tensor clone() const { return Tensor(shape(), node_->data, false); }

  const std::shared_ptr<Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::shared_ptr<Node> node_;
};

template <class U, class T>
Tensor<U> cast(const Tensor<T>& x) {
  std::vector<U> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>(x.data()[i]);
  return Tensor<U>(x.shape(), std::move(v), x.requires_grad());
}

/// Records differentiable operations in execution order, which is a
/// topological order of the graph by construction. Ops record onto the tape
/// made active by a TapeScope on the current thread; with no active tape no
/// graph is built.
template <class T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<TensorNode<T>>;

  struct Entry {
    NodePtr output;
    std::vector<NodePtr> inputs;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(NodePtr output, std::vector<NodePtr> inputs, std::function<void()> backward) {
    entries_.push_back({std::move(output), std::move(inputs), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and runs the recorded rules in reverse.
  /// Gradients accumulate additively into every reachable requires_grad node.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
      throw ContractError("backward() on a loss that does not depend on any trainable tensor");
    }
    loss.node()->grad_buffer()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward();
    }
  }

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

 private:
  std::vector<Entry> entries_;
};

template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active()) { Tape<T>::active() = &tape; }
  ~TapeScope() { Tape<T>::active() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Temporarily disables recording (e.g. the frozen encoder forward).
template <class T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<T>::active()) { Tape<T>::active() = nullptr; }
  ~NoGradScope() { Tape<T>::active() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

}  // namespace layalign
