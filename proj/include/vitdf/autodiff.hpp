#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "vitdf/tensor.hpp"

namespace vitdf {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  bool needs_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients of a scalar loss keyed by leaf name.
struct GradientMap {
  std::map<std::string, Tensor> grads;
  /// False when the loss does not depend on any trainable leaf; grads are then all zero.
  bool connected = false;

  const Tensor& at(const std::string& name) const;
};

/// Passed to a node's backward rule.
class BackwardContext {
 public:
  const Tensor& grad() const { return grad_; }
  const Tensor& output() const;
  const Tensor& input(std::size_t k) const;
  bool needs(std::size_t k) const;
  /// Adds `g` into the gradient accumulator of input k (no-op when not needed).
  void accumulate(std::size_t k, const Tensor& g);

 private:
  friend class Tape;
  BackwardContext(Tape& tape, std::size_t node, const Tensor& grad) : tape_(tape), node_(node), grad_(grad) {}

  Tape& tape_;
  std::size_t node_;
  const Tensor& grad_;
};

/// Reverse-mode tape for one forward invocation.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid reverse topological order. Values are never mutated once recorded.
/// A tape is not thread-safe; use one tape per concurrent forward pass.
class Tape {
 public:
  using BackwardFn = std::function<void(BackwardContext&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Value that never receives a gradient.
  Var constant(Tensor value);
  /// Named leaf; trainable when `value.requires_grad()` is set.
  Var variable(std::string name, Tensor value);
  /// Named trainable leaf.
  Var parameter(std::string name, Tensor value);
  /// Leaf that reads `value` in place instead of copying it. The tensor must
  /// outlive the tape and stay unmodified while the tape is in use.
  Var reference(std::string name, const Tensor& value, bool trainable);

  /// Appends an interior node. `fn` is only invoked when some input needs a gradient.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn fn);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).get(); }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Propagates d(loss)/d(node) to every trainable leaf.
  GradientMap backward(const Var& loss);

 private:
  friend class BackwardContext;

  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
    bool leaf = false;
    std::string name;

    const Tensor& get() const { return external ? *external : value; }
  };

  std::deque<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<bool> has_grad_;
};

}  // namespace vitdf
