#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>

#include "segtran/tensor.hpp"

namespace segtran {

template <Real T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <Real T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  Tape<T>* tape_ptr() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Linear record of forward operations. Entries are appended in evaluation
/// order, so every entry's inputs precede it; backward() walks the record once
/// in reverse. Single-threaded: concurrent passes need separate tapes.
template <Real T>
class Tape {
 public:
  // Called with the gradient of the entry's output; accumulates into inputs.
  using Backward = std::function<void(std::span<const T>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}); }
  Var<T> variable(Tensor<T> value) { return push(std::move(value), true, {}); }

  // Records an op output. The backward rule is kept only when some input
  // needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
    bool needs = false;
    for (const Var<T>& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  template <class Range>
  Var<T> record_range(Tensor<T> value, const Range& inputs, Backward backward) {
    bool needs = false;
    for (const Var<T>& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  const Tensor<T>& value(const Var<T>& v) const { return nodes_[v.id()].value; }
  bool requires_grad(const Var<T>& v) const { return nodes_[v.id()].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer for an input inside a backward rule; empty when the input
  // does not need a gradient.
  std::optional<std::span<T>> grad_sink(const Var<T>& v) {
    Node& node = nodes_[v.id()];
    if (!node.requires_grad) return std::nullopt;
    if (node.grad.empty()) node.grad.assign(node.value.size(), T(0));
    return std::span<T>(node.grad);
  }

  // Accumulated gradient of v after backward(); zeros if nothing reached it.
  Tensor<T> grad(const Var<T>& v) const {
    check_owned(v);
    const Node& node = nodes_[v.id()];
    if (node.grad.empty()) return Tensor<T>(node.value.shape());
    return Tensor<T>(node.value.shape(), node.grad);
  }

  void backward(const Var<T>& seed) {
    check_seed(seed);
    if (nodes_[seed.id()].value.size() != 1) {
      throw UsageError("backward from a non-scalar of shape " +
                       to_string(nodes_[seed.id()].value.shape()) + " needs an explicit cotangent");
    }
    run_backward(seed, std::vector<T>{T(1)});
  }

  void backward(const Var<T>& seed, const Tensor<T>& cotangent) {
    check_seed(seed);
    if (cotangent.shape() != nodes_[seed.id()].value.shape()) {
      throw DimensionError("cotangent shape " + to_string(cotangent.shape()) +
                           " does not match seed shape " +
                           to_string(nodes_[seed.id()].value.shape()));
    }
    run_backward(seed, cotangent.storage());
  }

  // Number of entries whose backward rule ran during the last backward().
  std::size_t visited_in_last_backward() const { return last_visited_; }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    Backward backward;
    bool requires_grad = false;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, Backward backward) {
    if (finite_checks_enabled() && !value.all_finite()) {
      throw NumericError("non-finite value produced at tape entry " + std::to_string(nodes_.size()));
    }
    nodes_.push_back(Node{std::move(value), {}, std::move(backward), requires_grad});
    return Var<T>(this, nodes_.size() - 1);
  }

  void check_owned(const Var<T>& v) const {
    if (v.tape_ptr() != this || v.id() >= nodes_.size()) {
      throw UsageError("value is not recorded on this tape");
    }
  }

  void check_seed(const Var<T>& seed) const {
    if (seed.tape_ptr() != this || seed.id() >= nodes_.size()) {
      throw UsageError("backward seed is not recorded on this tape");
    }
  }

  void run_backward(const Var<T>& seed, const std::vector<T>& cotangent) {
    for (Node& n : nodes_) n.grad.clear();
    last_visited_ = 0;
    Node& root = nodes_[seed.id()];
    if (!root.requires_grad) return;
    root.grad = cotangent;
    for (std::size_t i = seed.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(std::span<const T>(n.grad));
      ++last_visited_;
    }
  }

  std::deque<Node> nodes_;
  std::size_t last_visited_ = 0;
};

template <Real T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(*this);
}

template <Real T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(*this);
}

}  // namespace segtran
