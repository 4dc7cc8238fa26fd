#include "vitdf/autodiff.hpp"

namespace vitdf {

const Tensor& Var::value() const {
  if (!tape_) throw Error("use of an empty Var");
  return tape_->value(id_);
}

bool Var::needs_grad() const { return tape_ && tape_->needs_grad(id_); }

const Tensor& GradientMap::at(const std::string& name) const {
  auto it = grads.find(name);
  if (it == grads.end()) throw Error("no gradient recorded for '" + name + "'");
  return it->second;
}

const Tensor& BackwardContext::output() const { return tape_.nodes_[node_].get(); }

const Tensor& BackwardContext::input(std::size_t k) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs.at(k)].get();
}

bool BackwardContext::needs(std::size_t k) const { return tape_.nodes_[tape_.nodes_[node_].inputs.at(k)].needs_grad; }

void BackwardContext::accumulate(std::size_t k, const Tensor& g) {
  std::size_t target = tape_.nodes_[node_].inputs.at(k);
  if (!tape_.nodes_[target].needs_grad) return;
  const Shape& want = tape_.nodes_[target].get().shape();
  if (g.size() != element_count(want)) {
    throw ShapeError("backward produced gradient " + g.shape_string() + " for input of shape " + to_string(want));
  }
  if (!tape_.has_grad_[target]) {
    tape_.grads_[target] = g.reshaped(want);
    tape_.has_grad_[target] = true;
  } else {
    tape_.grads_[target].array() += g.array();
  }
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.value.set_requires_grad(false);
  n.leaf = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(std::string name, Tensor value) {
  Node n;
  n.needs_grad = value.requires_grad();
  n.value = std::move(value);
  n.leaf = true;
  n.name = std::move(name);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(std::string name, Tensor value) {
  value.set_requires_grad(true);
  return variable(std::move(name), std::move(value));
}

Var Tape::reference(std::string name, const Tensor& value, bool trainable) {
  Node n;
  n.external = &value;
  n.needs_grad = trainable;
  n.leaf = true;
  n.name = std::move(name);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (const auto& v : inputs) {
    if (&v.tape() != this) throw Error("operands recorded on different tapes");
    n.inputs.push_back(v.id());
    n.needs_grad = n.needs_grad || nodes_[v.id()].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

GradientMap Tape::backward(const Var& loss) {
  if (&loss.tape() != this) throw Error("loss belongs to a different tape");
  if (loss.value().size() != 1) throw ShapeError("backward requires a scalar loss, got " + loss.value().shape_string());

  grads_.assign(nodes_.size(), Tensor{});
  has_grad_.assign(nodes_.size(), false);

  GradientMap out;
  if (nodes_[loss.id()].needs_grad) {
    grads_[loss.id()] = Tensor(loss.value().shape(), 1.0);
    has_grad_[loss.id()] = true;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!has_grad_[i] || n.leaf || !n.backward) continue;
      BackwardContext ctx(*this, i, grads_[i]);
      n.backward(ctx);
      // Interior gradients are dead once propagated.
      grads_[i] = Tensor{};
    }
  }

  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (!n.leaf || !n.needs_grad) continue;
    if (has_grad_[i]) {
      out.connected = true;
      out.grads.insert_or_assign(n.name, std::move(grads_[i]));
    } else {
      out.grads.insert_or_assign(n.name, Tensor::zeros(n.get().shape()));
    }
  }
  grads_.clear();
  has_grad_.clear();
  return out;
}

}  // namespace vitdf
