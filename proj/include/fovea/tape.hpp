#pragma once

#include "fovea/tensor.hpp"

#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace fovea {

/// Trainable (or frozen) tensor with its gradient accumulator.
template <typename S>
struct Param {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  bool trainable = true;
  bool decay = true;  // weight decay applies to conv/dense weights only

  Param() = default;
  Param(std::string n, Tensor<S> v, bool decay_ = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape), decay(decay_) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), S(0)); }
};

template <typename S>
class Tape;

/// Handle to a value recorded on a tape.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<S>& value() const;
  const Shape& shape() const { return value().shape; }
};

/// Reverse-mode tape. Operations append value slots and backward closures in
/// creation order; backward() replays the closures in reverse, which reaches
/// every input and parameter of the recorded graph (the graph is acyclic by
/// construction since ops only consume already-existing slots).
///
/// A tape belongs to one execution context and is not shared across threads.
template <typename S>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true, bool param_grads = true)
      : grad_enabled_(grad_enabled), param_grads_(param_grads) {}

  bool grad_enabled() const { return grad_enabled_; }
  bool param_grads() const { return param_grads_; }

  Var<S> input(Tensor<S> v, bool needs_grad = false) {
    return make_slot(std::move(v), needs_grad && grad_enabled_, nullptr);
  }

  Var<S> constant(Tensor<S> v) { return make_slot(std::move(v), false, nullptr); }

  /// Binds a parameter; gradients accumulate into p.grad after backward().
  Var<S> param(Param<S>& p) {
    const bool ng = grad_enabled_ && param_grads_ && p.trainable;
    return make_slot(p.value, ng, ng ? &p : nullptr);
  }

  /// Used by ops: appends an output slot and, when gradients are live, the
  /// node's backward closure. The closure receives the tape and the output
  /// slot id; it must add into the input slots' gradients.
  Var<S> emit(Tensor<S> out, bool needs_grad, std::function<void(Tape&, int)> backward) {
    const bool ng = needs_grad && grad_enabled_;
    Var<S> v = make_slot(std::move(out), ng, nullptr);
    if (ng && backward) nodes_.push_back(Node{v.id, std::move(backward)});
    return v;
  }

  const Tensor<S>& value(int id) const { return slots_[static_cast<size_t>(id)].value; }
  Tensor<S>& mutable_value(int id) { return slots_[static_cast<size_t>(id)].value; }
  bool needs_grad(int id) const { return slots_[static_cast<size_t>(id)].needs_grad; }
  bool needs_grad(const Var<S>& v) const { return v.valid() && needs_grad(v.id); }

  /// Gradient accumulator for a slot, zero-allocated on first touch.
  Tensor<S>& grad_slot(int id) {
    Slot& s = slots_[static_cast<size_t>(id)];
    if (!s.grad_live) {
      s.grad = Tensor<S>(s.value.shape);
      s.grad_live = true;
    }
    return s.grad;
  }

  bool grad_live(int id) const { return slots_[static_cast<size_t>(id)].grad_live; }

  /// Gradient of a slot after backward(); zeros if the slot was unreachable.
  const Tensor<S>& grad(const Var<S>& v) { return grad_slot(v.id); }

  /// Reverse accumulation from a scalar loss. Parameter slots add their
  /// gradients into the bound Param::grad.
  void backward(const Var<S>& loss) {
    if (!loss.valid() || loss.tape != this) throw ShapeError("backward: loss not on this tape");
    if (value(loss.id).numel() != 1) throw ShapeError("backward: loss must be scalar");
    if (!grad_enabled_) throw ShapeError("backward: tape recorded without gradients");
    grad_slot(loss.id)[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!grad_live(it->out)) continue;  // nothing downstream pulled on this node
      (it->fn)(*this, it->out);
    }
    for (auto& s : slots_) {
      if (s.bound && s.grad_live) {
        for (long i = 0; i < s.grad.numel(); ++i) s.bound->grad[i] += s.grad[i];
      }
    }
  }

  size_t num_nodes() const { return nodes_.size(); }
  size_t num_slots() const { return slots_.size(); }

 private:
  struct Slot {
    Tensor<S> value;
    Tensor<S> grad;
    bool needs_grad = false;
    bool grad_live = false;
    Param<S>* bound = nullptr;
  };
  struct Node {
    int out;
    std::function<void(Tape&, int)> fn;
  };

  Var<S> make_slot(Tensor<S> v, bool needs_grad, Param<S>* bound) {
    Slot s;
    s.value = std::move(v);
    s.needs_grad = needs_grad;
    s.bound = bound;
    slots_.push_back(std::move(s));
    return Var<S>{this, static_cast<int>(slots_.size()) - 1};
  }

  std::deque<Slot> slots_;  // deque: references stay valid as slots append
  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool param_grads_;
};

template <typename S>
const Tensor<S>& Var<S>::value() const {
  return tape->value(id);
}

}  // namespace fovea
