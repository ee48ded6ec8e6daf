#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tridiff/numerics/tape.hpp"

// Differentiable ops over tape values. Binary elementwise ops accept equal
// shapes or a single-element operand; there is no general broadcasting.

namespace tridiff::num {

// Elementwise binary.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var add(Var a, float s);
Var mul(Var a, float s);

// Elementwise unary.
Var neg(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var abs(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var relu(Var a);
Var silu(Var a);
Var tanh(Var a);
/// Gradient passes only where lo < a < hi.
Var clamp(Var a, float lo, float hi);

// Reductions to a rank-0 scalar.
Var sum(Var a);
Var mean(Var a);
Var mse(Var a, Var b);
/// sum(a * c) for a constant c of the same shape.
Var dot_const(Var a, const Tensor& c);

// Linear algebra.
Var matmul(Var a, Var b);
/// x[m x n] + bias[n] on every row.
Var add_row_bias(Var x, Var bias);
Var linear(Var x, Var weight, Var bias);

// Shape manipulation.
Var reshape(Var a, Shape shape);
Var concat(std::span<const Var> parts, int axis);
Var slice(Var a, int axis, std::int64_t begin, std::int64_t end);
/// Rows of a rank-2 value selected by index.
Var gather_rows(Var a, std::vector<std::int32_t> rows);

// Image ops over single C x H x W maps.
/// Cross-correlation with weight O x C x k x k; bias (O) may be an unbound Var.
Var conv2d(Var input, Var weight, Var bias, int stride, int padding);
/// Adjoint of conv2d: weight is C x O x k x k, output O x Ho x Wo with
/// Ho = (H - 1) * stride - 2 * padding + k.
Var conv_transpose2d(Var input, Var weight, Var bias, int stride, int padding);
/// x[C x H x W] + bias[C] per channel.
Var add_channel_bias(Var x, Var bias);
Var avg_pool2d(Var input, int factor);
Var upsample_nearest2d(Var input, int factor);

/// Bilinear lookup of plane[C x H x W] at uv[N x 2] in [-1, 1]^2 (u along W,
/// v along H, align-corners, border clamped). Returns N x C, differentiable
/// with respect to the plane and the coordinates.
Var grid_sample_2d(Var plane, Var uv);

}  // namespace tridiff::num
