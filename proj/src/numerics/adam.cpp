#include "tridiff/numerics/adam.hpp"

#include <cmath>

namespace tridiff::num {

void adam_step(std::span<float> params, std::span<const float> grads, AdamState& state, const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient size mismatch");
  for (float g : grads) {
    if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient");
  }
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0f);
    state.v.assign(params.size(), 0.0f);
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state size mismatch");
  ++state.step;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.step));
  const float step_size = static_cast<float>(cfg.lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const float g = grads[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0f - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0f - cfg.beta2) * g * g;
    params[i] -= step_size * state.m[i] / (std::sqrt(state.v[i]) * inv_sqrt_bc2 + cfg.eps);
  }
}

std::size_t Adam::add(Tensor* param) {
  params_.push_back(param);
  states_.emplace_back();
  return params_.size() - 1;
}

void Adam::step(std::span<const Tensor* const> grads) {
  if (grads.size() != params_.size()) throw ShapeError("Adam::step: expected one gradient per parameter");
  for (const Tensor* g : grads) {
    if (g && !g->all_finite()) throw NumericError("Adam::step: non-finite gradient");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (grads[i]) step_slot(i, *grads[i]);
  }
}

void Adam::step_slot(std::size_t slot, const Tensor& grad) {
  Tensor* p = params_.at(slot);
  if (p->shape() != grad.shape()) throw ShapeError("Adam: gradient shape " + shape_str(grad.shape()));
  adam_step(p->data(), grad.data(), states_[slot], cfg_);
}

}  // namespace tridiff::num
