#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "segtran/autodiff.hpp"
#include "segtran/tensor.hpp"

namespace segtran {

using ParamId = std::size_t;

/// Named, ordered collection of trainable tensors. Insertion order is the
/// serialization and optimizer order.
template <Real T>
class ParamStore {
 public:
  ParamId add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{std::move(name), std::move(value)});
    return entries_.size() - 1;
  }

  std::size_t size() const { return entries_.size(); }
  const std::string& name(ParamId id) const { return entries_.at(id).name; }
  Tensor<T>& value(ParamId id) { return entries_.at(id).value; }
  const Tensor<T>& value(ParamId id) const { return entries_.at(id).value; }

  std::optional<ParamId> find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t element_count() const {
    std::size_t total = 0;
    for (const Entry& e : entries_) total += e.value.size();
    return total;
  }

  template <Real U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const Entry& e : entries_) out.add(e.name, e.value.template cast<U>());
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value)) {
        return false;
      }
    }
    return true;
  }

 private:
  struct Entry {
    std::string name;
    Tensor<T> value;
  };
  std::vector<Entry> entries_;
  std::map<std::string, ParamId, std::less<>> index_;
};

/// Optional instrumentation consulted by the attention blocks.
template <Real T>
struct ForwardHooks {
  // Shapes of every attention-weight matrix instantiated, in creation order.
  bool record_attention = false;
  std::vector<std::pair<std::size_t, std::size_t>> attention_shapes;
  std::vector<Tensor<T>> attention_weights;
  std::vector<Tensor<T>> mode_gates;
  std::size_t largest_attention = 0;

  // Mode excluded from every expanded block's gate softmax.
  std::optional<std::size_t> knockout_mode;

  void note_attention(const Tensor<T>& weights) {
    if (!record_attention) return;
    attention_shapes.emplace_back(weights.dim(0), weights.dim(1));
    largest_attention = std::max(largest_attention, weights.size());
    attention_weights.push_back(weights);
  }
  void note_gate(const Tensor<T>& gate) {
    if (record_attention) mode_gates.push_back(gate);
  }
};

/// One forward pass: a tape plus lazily bound parameter handles. With
/// gradient tracking on, parameters enter the tape as leaves.
template <Real T>
class Graph {
 public:
  Graph(const ParamStore<T>& params, bool track_gradients)
      : params_(&params), track_(track_gradients), bound_(params.size()) {}

  Tape<T>& tape() { return tape_; }
  const ParamStore<T>& params() const { return *params_; }

  Var<T> param(ParamId id) {
    if (id >= bound_.size()) throw UsageError("parameter id " + std::to_string(id) + " out of range");
    if (!bound_[id]) {
      bound_[id] = track_ ? tape_.variable(params_->value(id)) : tape_.constant(params_->value(id));
    }
    return *bound_[id];
  }

  Var<T> input(Tensor<T> value, bool requires_grad = false) {
    return requires_grad ? tape_.variable(std::move(value)) : tape_.constant(std::move(value));
  }

  Var<T> constant(Tensor<T> value) { return tape_.constant(std::move(value)); }

  // Gradients for every parameter after tape().backward(); zeros where unused.
  std::vector<Tensor<T>> param_gradients() const {
    std::vector<Tensor<T>> grads;
    grads.reserve(bound_.size());
    for (std::size_t i = 0; i < bound_.size(); ++i) {
      if (bound_[i]) {
        grads.push_back(tape_.grad(*bound_[i]));
      } else {
        grads.emplace_back(params_->value(i).shape());
      }
    }
    return grads;
  }

  ForwardHooks<T>& hooks() { return hooks_; }

 private:
  Tape<T> tape_;
  const ParamStore<T>* params_;
  bool track_;
  std::vector<std::optional<Var<T>>> bound_;
  ForwardHooks<T> hooks_;
};

}  // namespace segtran
