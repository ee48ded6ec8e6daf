#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "tridiff/numerics/rng.hpp"
#include "tridiff/numerics/tape.hpp"

namespace tridiff::testing {

/// Records a computation on `tape` from the given differentiable inputs.
using GraphBuilder = std::function<num::Var(num::Tape& tape, std::span<const num::Var> inputs)>;

/// Finite-difference oracle. The builder's output is projected onto a fixed
/// random direction c, so the checked scalar is sum(c * out). The analytic
/// gradient comes from the tape; the numeric one from central differences
/// with step h, where each difference is formed per output element in double
/// precision before projecting. Returns the norm-wise relative error
/// ||analytic - numeric|| / max(||analytic||, ||numeric||), where the norms
/// run over the gradients of all inputs stacked together.
double gradcheck(const GraphBuilder& build, const std::vector<num::Tensor>& inputs, std::uint64_t seed,
                 double h = 1e-3);

/// Uniform random tensor in [lo, hi).
num::Tensor random_tensor(num::Rng& rng, const num::Shape& shape, float lo = -1.0f, float hi = 1.0f);

}  // namespace tridiff::testing
