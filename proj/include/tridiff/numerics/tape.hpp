#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

#include "tridiff/numerics/tensor.hpp"

namespace tridiff::num {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the
/// owning tape lives and has not been cleared.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const;
  std::uint32_t id() const noexcept { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Reverse-mode recording of tensor ops. Single owner; not thread-safe.
///
/// Every recorded value is checked for non-finite entries. A node whose
/// inputs are all non-differentiable is stored without a backward rule.
class Tape {
 public:
  /// Backward rule: receives the gradient of the node's output and
  /// accumulates into its inputs through grad_buffer().
  using BackwardFn = std::function<void(Tape& tape, std::uint32_t self, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers an input. Differentiable iff value.requires_grad().
  Var leaf(Tensor value);
  Var param(Tensor value) { return leaf(std::move(value.set_requires_grad(true))); }
  Var constant(Tensor value) { return leaf(std::move(value.set_requires_grad(false))); }
  Var scalar(float value) { return constant(Tensor::scalar(value)); }

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward, std::string_view op);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward, std::string_view op);

  const Tensor& value(std::uint32_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::uint32_t id) const { return nodes_.at(id).requires_grad; }

  /// Zero-initialised on first access. Only for use inside backward rules.
  std::span<float> grad_buffer(std::uint32_t id);

  /// Seeds d(root)/d(root) = 1; root must hold a single element.
  void backward(Var root);
  void backward(Var root, const Tensor& seed);

  /// Gradient accumulated for v; exactly zero if v did not reach the root.
  const Tensor& grad(Var v);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool backward_done() const noexcept { return backward_done_; }
  /// Node ids whose backward rule ran, in visiting order.
  const std::vector<std::uint32_t>& backward_trace() const noexcept { return trace_; }
  void clear();

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    std::string_view op;
  };

  void check_owned(const Var& v) const;

  std::deque<Node> nodes_;
  std::vector<std::uint32_t> trace_;
  bool backward_done_ = false;
};

}  // namespace tridiff::num
