#pragma once

#include <vector>

#include "tridiff/numerics/rng.hpp"
#include "tridiff/numerics/tape.hpp"

namespace tridiff::num {

/// Fully connected stack with SiLU between layers and a linear output. SiLU
/// keeps every decode path smooth, so finite-difference checks stay well posed.
/// Weights are stored in x·W form (in x out).
struct Mlp {
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;

  /// widths = {in, hidden..., out}; He-uniform weights, zero biases.
  static Mlp create(const std::vector<int>& widths, Rng& rng);

  int in_dim() const { return static_cast<int>(weights.front().dim(0)); }
  int out_dim() const { return static_cast<int>(weights.back().dim(1)); }
  std::vector<Tensor*> params();
};

struct MlpVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
};

/// Places the weights on the tape as params (trainable) or constants.
MlpVars bind(Tape& tape, const Mlp& mlp, bool trainable);
Var forward(const MlpVars& mlp, Var x);

/// Puts each tensor on the tape as a param, in order.
std::vector<Var> bind_params(Tape& tape, const std::vector<Tensor*>& params);
/// Gradients of the given vars after backward, aligned with them.
std::vector<const Tensor*> collect_grads(Tape& tape, const std::vector<Var>& vars);

}  // namespace tridiff::num
