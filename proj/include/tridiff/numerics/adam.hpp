#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tridiff/numerics/tensor.hpp"

namespace tridiff::num {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// First and second moment estimates for one parameter buffer.
struct AdamState {
  std::vector<float> m, v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update applied in place. Throws NumericError if any
/// gradient entry is non-finite; in that case nothing is modified.
void adam_step(std::span<float> params, std::span<const float> grads, AdamState& state, const AdamConfig& cfg);

/// Adam over a fixed list of parameter tensors, each with its own moments.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  /// Registers a tensor; returns its slot index.
  std::size_t add(Tensor* param);
  void step(std::span<const Tensor* const> grads);
  /// Updates one slot only (for parameter groups sharing an optimizer).
  void step_slot(std::size_t slot, const Tensor& grad);

  AdamConfig& config() noexcept { return cfg_; }
  const AdamState& state(std::size_t slot) const { return states_.at(slot); }
  std::size_t size() const noexcept { return params_.size(); }

 private:
  AdamConfig cfg_;
  std::vector<Tensor*> params_;
  std::vector<AdamState> states_;
};

}  // namespace tridiff::num
