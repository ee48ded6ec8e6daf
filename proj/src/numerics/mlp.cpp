#include "tridiff/numerics/mlp.hpp"

#include <cmath>

#include "tridiff/numerics/ops.hpp"

namespace tridiff::num {

Mlp Mlp::create(const std::vector<int>& widths, Rng& rng) {
  if (widths.size() < 2) throw std::invalid_argument("Mlp needs at least input and output widths");
  Mlp m;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const float bound = std::sqrt(6.0f / static_cast<float>(widths[i]));
    m.weights.push_back(rng.uniform_tensor({widths[i], widths[i + 1]}, -bound, bound));
    m.biases.emplace_back(Shape{widths[i + 1]});
  }
  return m;
}

std::vector<Tensor*> Mlp::params() {
  std::vector<Tensor*> out;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.push_back(&weights[i]);
    out.push_back(&biases[i]);
  }
  return out;
}

MlpVars bind(Tape& tape, const Mlp& mlp, bool trainable) {
  MlpVars v;
  for (std::size_t i = 0; i < mlp.weights.size(); ++i) {
    v.weights.push_back(trainable ? tape.param(mlp.weights[i]) : tape.constant(mlp.weights[i]));
    v.biases.push_back(trainable ? tape.param(mlp.biases[i]) : tape.constant(mlp.biases[i]));
  }
  return v;
}

Var forward(const MlpVars& mlp, Var x) {
  for (std::size_t i = 0; i < mlp.weights.size(); ++i) {
    x = linear(x, mlp.weights[i], mlp.biases[i]);
    if (i + 1 < mlp.weights.size()) x = silu(x);
  }
  return x;
}

std::vector<Var> bind_params(Tape& tape, const std::vector<Tensor*>& params) {
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (Tensor* p : params) vars.push_back(tape.param(*p));
  return vars;
}

std::vector<const Tensor*> collect_grads(Tape& tape, const std::vector<Var>& vars) {
  std::vector<const Tensor*> grads;
  grads.reserve(vars.size());
  for (const Var& v : vars) grads.push_back(&tape.grad(v));
  return grads;
}

}  // namespace tridiff::num
