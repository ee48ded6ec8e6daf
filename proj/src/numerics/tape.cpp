#include "tridiff/numerics/tape.hpp"

#include <stdexcept>
#include <string>

namespace tridiff::num {

Tape& Var::tape() const {
  if (!tape_) throw std::logic_error("use of an unbound Var");
  return *tape_;
}

const Tensor& Var::value() const { return tape().value(id_); }

bool Var::requires_grad() const { return tape().requires_grad(id_); }

void Tape::check_owned(const Var& v) const {
  if (&v.tape() != this) throw std::logic_error("Var belongs to a different tape");
  if (v.id() >= nodes_.size()) throw std::logic_error("Var id out of range (tape cleared?)");
}

Var Tape::leaf(Tensor value) {
  if (!value.all_finite()) throw NumericError("non-finite value registered on tape");
  Node node;
  node.requires_grad = value.requires_grad();
  node.value = std::move(value);
  node.op = "leaf";
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward, std::string_view op) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward), op);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward, std::string_view op) {
  if (backward_done_) throw std::logic_error("cannot record on a tape after backward; clear() it first");
  if (!value.all_finite()) throw NumericError("non-finite output from op '" + std::string(op) + "'");
  bool needs = false;
  for (const auto& in : inputs) {
    check_owned(in);
    needs = needs || nodes_[in.id()].requires_grad;
  }
  Node node;
  node.value = std::move(value);
  node.value.set_requires_grad(needs);
  node.requires_grad = needs;
  if (needs) node.backward = std::move(backward);
  node.op = op;
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

std::span<float> Tape::grad_buffer(std::uint32_t id) {
  Node& n = nodes_.at(id);
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
  return n.grad.data();
}

void Tape::backward(Var root) {
  check_owned(root);
  if (root.value().numel() != 1) {
    throw ShapeError("backward() without a seed needs a single-element root, got " + shape_str(root.shape()));
  }
  backward(root, Tensor(root.shape(), 1.0f));
}

void Tape::backward(Var root, const Tensor& seed) {
  check_owned(root);
  if (backward_done_) throw std::logic_error("backward called twice on the same recording");
  if (seed.shape() != root.shape()) throw ShapeError("backward seed shape mismatch");
  backward_done_ = true;
  trace_.clear();
  {
    auto g = grad_buffer(root.id());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  }
  for (std::int64_t id = root.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.backward || n.grad.empty()) continue;
    trace_.push_back(static_cast<std::uint32_t>(id));
    n.backward(*this, static_cast<std::uint32_t>(id), n.grad);
  }
}

const Tensor& Tape::grad(Var v) {
  check_owned(v);
  Node& n = nodes_[v.id()];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::clear() {
  nodes_.clear();
  trace_.clear();
  backward_done_ = false;
}

}  // namespace tridiff::num
