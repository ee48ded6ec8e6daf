#include "tridiff/numerics/ops.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "detail/bilinear.hpp"
#include "tridiff/numerics/kernels.hpp"

namespace tridiff::num {

namespace k = kernels::parallel;
using kernels::ConvGeom;
using kernels::Trans;

namespace {

Tape& common_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw std::logic_error("operands recorded on different tapes");
  return a.tape();
}

void require_rank(const Var& v, int rank, const char* op) {
  if (v.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(v.shape()));
  }
}

enum class BinaryKind { Add, Sub, Mul, Div };

Var binary(Var a, Var b, BinaryKind kind, std::string_view name) {
  Tape& tape = common_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Shape shape;
  bool bcast_a = false, bcast_b = false;
  if (x.shape() == y.shape()) {
    shape = x.shape();
  } else if (y.numel() == 1) {
    shape = x.shape();
    bcast_b = true;
  } else if (x.numel() == 1) {
    shape = y.shape();
    bcast_a = true;
  } else {
    throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  Tensor out(shape);
  const std::size_t n = out.numel();
  const float* xp = x.ptr();
  const float* yp = y.ptr();
  float* op = out.ptr();
  for (std::size_t i = 0; i < n; ++i) {
    const float u = xp[bcast_a ? 0 : i];
    const float v = yp[bcast_b ? 0 : i];
    switch (kind) {
      case BinaryKind::Add: op[i] = u + v; break;
      case BinaryKind::Sub: op[i] = u - v; break;
      case BinaryKind::Mul: op[i] = u * v; break;
      case BinaryKind::Div: op[i] = u / v; break;
    }
  }
  const auto ia = a.id(), ib = b.id();
  return tape.record(
      std::move(out), {a, b},
      [=](Tape& t, std::uint32_t, const Tensor& g) {
        const Tensor& xa = t.value(ia);
        const Tensor& xb = t.value(ib);
        const std::size_t m = g.numel();
        if (t.requires_grad(ia)) {
          auto ga = t.grad_buffer(ia);
          for (std::size_t i = 0; i < m; ++i) {
            const float v = xb[bcast_b ? 0 : i];
            float d = g[i];
            if (kind == BinaryKind::Mul) d *= v;
            if (kind == BinaryKind::Div) d /= v;
            ga[bcast_a ? 0 : i] += d;
          }
        }
        if (t.requires_grad(ib)) {
          auto gb = t.grad_buffer(ib);
          for (std::size_t i = 0; i < m; ++i) {
            const float u = xa[bcast_a ? 0 : i];
            const float v = xb[bcast_b ? 0 : i];
            float d = g[i];
            switch (kind) {
              case BinaryKind::Add: break;
              case BinaryKind::Sub: d = -d; break;
              case BinaryKind::Mul: d *= u; break;
              case BinaryKind::Div: d = -d * u / (v * v); break;
            }
            gb[bcast_b ? 0 : i] += d;
          }
        }
      },
      name);
}

// f maps x -> y; d maps (x, y) -> dy/dx.
template <class F, class D>
Var unary(Var a, std::string_view name, F f, D d) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) y[i] = f(x[i]);
  const auto ia = a.id();
  return a.tape().record(
      std::move(y), {a},
      [ia, d](Tape& t, std::uint32_t self, const Tensor& g) {
        const Tensor& xv = t.value(ia);
        const Tensor& yv = t.value(self);
        auto gx = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * d(xv[i], yv[i]);
      },
      name);
}

inline float stable_sigmoid(float x) {
  if (x >= 0) return 1.0f / (1.0f + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0f + e);
}

}  // namespace

Var add(Var a, Var b) { return binary(a, b, BinaryKind::Add, "add"); }
Var sub(Var a, Var b) { return binary(a, b, BinaryKind::Sub, "sub"); }
Var mul(Var a, Var b) { return binary(a, b, BinaryKind::Mul, "mul"); }
Var div(Var a, Var b) { return binary(a, b, BinaryKind::Div, "div"); }
Var add(Var a, float s) { return add(a, a.tape().scalar(s)); }
Var mul(Var a, float s) { return mul(a, a.tape().scalar(s)); }

Var neg(Var a) {
  return unary(a, "neg", [](float x) { return -x; }, [](float, float) { return -1.0f; });
}

Var exp(Var a) {
  return unary(a, "exp", [](float x) { return std::exp(x); }, [](float, float y) { return y; });
}

Var log(Var a) {
  return unary(a, "log", [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; });
}

Var square(Var a) {
  return unary(a, "square", [](float x) { return x * x; }, [](float x, float) { return 2.0f * x; });
}

Var abs(Var a) {
  return unary(
      a, "abs", [](float x) { return std::fabs(x); },
      [](float x, float) { return x > 0 ? 1.0f : (x < 0 ? -1.0f : 0.0f); });
}

Var sigmoid(Var a) {
  return unary(a, "sigmoid", stable_sigmoid, [](float, float y) { return y * (1.0f - y); });
}

Var softplus(Var a) {
  return unary(
      a, "softplus", [](float x) { return std::log1p(std::exp(-std::fabs(x))) + std::max(x, 0.0f); },
      [](float x, float) { return stable_sigmoid(x); });
}

Var relu(Var a) {
  return unary(
      a, "relu", [](float x) { return x > 0 ? x : 0.0f; }, [](float x, float) { return x > 0 ? 1.0f : 0.0f; });
}

Var silu(Var a) {
  return unary(
      a, "silu", [](float x) { return x * stable_sigmoid(x); },
      [](float x, float) {
        const float s = stable_sigmoid(x);
        return s * (1.0f + x * (1.0f - s));
      });
}

Var tanh(Var a) {
  return unary(a, "tanh", [](float x) { return std::tanh(x); }, [](float, float y) { return 1.0f - y * y; });
}

Var clamp(Var a, float lo, float hi) {
  return unary(
      a, "clamp", [lo, hi](float x) { return std::clamp(x, lo, hi); },
      [lo, hi](float x, float) { return (x > lo && x < hi) ? 1.0f : 0.0f; });
}

Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (float v : x.data()) s += v;
  const auto ia = a.id();
  return a.tape().record(
      Tensor::scalar(static_cast<float>(s)), {a},
      [ia](Tape& t, std::uint32_t, const Tensor& g) {
        auto gx = t.grad_buffer(ia);
        const float gv = g[0];
        for (auto& v : gx) v += gv;
      },
      "sum");
}

Var mean(Var a) {
  const std::size_t n = a.numel();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return mul(sum(a), 1.0f / static_cast<float>(n));
}

Var mse(Var a, Var b) { return mean(square(sub(a, b))); }

Var dot_const(Var a, const Tensor& c) {
  if (a.shape() != c.shape()) throw ShapeError("dot_const: shape mismatch");
  const Tensor& x = a.value();
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += static_cast<double>(x[i]) * c[i];
  const auto ia = a.id();
  return a.tape().record(
      Tensor::scalar(static_cast<float>(s)), {a},
      [ia, c](Tape& t, std::uint32_t, const Tensor& g) {
        auto gx = t.grad_buffer(ia);
        const float gv = g[0];
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gv * c[i];
      },
      "dot_const");
}

Var matmul(Var a, Var b) {
  Tape& tape = common_tape(a, b);
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::int64_t m = a.value().dim(0), kk = a.value().dim(1), n = b.value().dim(1);
  if (b.value().dim(0) != kk) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({m, n});
  k::gemm(Trans::No, Trans::No, m, n, kk, a.value().ptr(), b.value().ptr(), out.ptr(), false);
  const auto ia = a.id(), ib = b.id();
  return tape.record(
      std::move(out), {a, b},
      [=](Tape& t, std::uint32_t, const Tensor& g) {
        if (t.requires_grad(ia)) {
          k::gemm(Trans::No, Trans::Yes, m, kk, n, g.ptr(), t.value(ib).ptr(), t.grad_buffer(ia).data(), true);
        }
        if (t.requires_grad(ib)) {
          k::gemm(Trans::Yes, Trans::No, kk, n, m, t.value(ia).ptr(), g.ptr(), t.grad_buffer(ib).data(), true);
        }
      },
      "matmul");
}

Var add_row_bias(Var x, Var bias) {
  Tape& tape = common_tape(x, bias);
  require_rank(x, 2, "add_row_bias");
  const std::int64_t m = x.value().dim(0), n = x.value().dim(1);
  if (static_cast<std::int64_t>(bias.numel()) != n) throw ShapeError("add_row_bias: bias length mismatch");
  Tensor out = x.value();
  const float* bp = bias.value().ptr();
  for (std::int64_t i = 0; i < m; ++i) {
    float* row = out.ptr() + i * n;
    for (std::int64_t j = 0; j < n; ++j) row[j] += bp[j];
  }
  const auto ix = x.id(), ib = bias.id();
  return tape.record(
      std::move(out), {x, bias},
      [=](Tape& t, std::uint32_t, const Tensor& g) {
        if (t.requires_grad(ix)) {
          auto gx = t.grad_buffer(ix);
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
        }
        if (t.requires_grad(ib)) {
          auto gb = t.grad_buffer(ib);
          for (std::int64_t i = 0; i < m; ++i) {
            const float* row = g.ptr() + i * n;
            for (std::int64_t j = 0; j < n; ++j) gb[j] += row[j];
          }
        }
      },
      "add_row_bias");
}

Var linear(Var x, Var weight, Var bias) { return add_row_bias(matmul(x, weight), bias); }

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshape(std::move(shape));
  const auto ia = a.id();
  return a.tape().record(
      std::move(out), {a},
      [ia](Tape& t, std::uint32_t, const Tensor& g) {
        auto gx = t.grad_buffer(ia);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
      },
      "reshape");
}

namespace {

struct AxisSplit {
  std::int64_t outer = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Tape& tape = parts[0].tape();
  const Shape& first = parts[0].shape();
  const int rank = static_cast<int>(first.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  std::vector<std::int64_t> lens;
  for (const auto& p : parts) {
    common_tape(parts[0], p);
    const Shape& s = p.shape();
    if (static_cast<int>(s.size()) != rank) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis && s[static_cast<std::size_t>(d)] != first[static_cast<std::size_t>(d)]) {
        throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(first));
      }
    }
    lens.push_back(s[static_cast<std::size_t>(axis)]);
    out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
  }
  const AxisSplit sp = split_at(out_shape, axis);
  const std::int64_t total = out_shape[static_cast<std::size_t>(axis)];
  Tensor out(out_shape);
  std::int64_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const float* src = parts[p].value().ptr();
    const std::int64_t block = lens[p] * sp.inner;
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      std::copy_n(src + o * block, block, out.ptr() + (o * total + offset) * sp.inner);
    }
    offset += lens[p];
  }
  std::vector<std::uint32_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return tape.record(
      std::move(out), parts,
      [ids, lens, sp, total](Tape& t, std::uint32_t, const Tensor& g) {
        std::int64_t off = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
          const std::int64_t block = lens[p] * sp.inner;
          if (t.requires_grad(ids[p])) {
            auto gp = t.grad_buffer(ids[p]);
            for (std::int64_t o = 0; o < sp.outer; ++o) {
              const float* src = g.ptr() + (o * total + off) * sp.inner;
              float* dst = gp.data() + o * block;
              for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
            }
          }
          off += lens[p];
        }
      },
      "concat");
}

Var slice(Var a, int axis, std::int64_t begin, std::int64_t end) {
  const Shape& s = a.shape();
  const int rank = static_cast<int>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("slice: axis out of range");
  const std::int64_t len = s[static_cast<std::size_t>(axis)];
  if (begin < 0 || end > len || begin > end) throw ShapeError("slice: range out of bounds");
  Shape out_shape = s;
  out_shape[static_cast<std::size_t>(axis)] = end - begin;
  const AxisSplit sp = split_at(s, axis);
  const std::int64_t block = (end - begin) * sp.inner;
  Tensor out(out_shape);
  const float* src = a.value().ptr();
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    std::copy_n(src + (o * len + begin) * sp.inner, block, out.ptr() + o * block);
  }
  const auto ia = a.id();
  return a.tape().record(
      std::move(out), {a},
      [=](Tape& t, std::uint32_t, const Tensor& g) {
        auto ga = t.grad_buffer(ia);
        for (std::int64_t o = 0; o < sp.outer; ++o) {
          float* dst = ga.data() + (o * len + begin) * sp.inner;
          const float* gs = g.ptr() + o * block;
          for (std::int64_t i = 0; i < block; ++i) dst[i] += gs[i];
        }
      },
      "slice");
}

Var gather_rows(Var a, std::vector<std::int32_t> rows) {
  require_rank(a, 2, "gather_rows");
  const std::int64_t n = a.value().dim(0), d = a.value().dim(1);
  Tensor out({static_cast<std::int64_t>(rows.size()), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= n) throw ShapeError("gather_rows: index out of range");
    std::copy_n(a.value().ptr() + rows[r] * d, d, out.ptr() + static_cast<std::int64_t>(r) * d);
  }
  const auto ia = a.id();
  return a.tape().record(
      std::move(out), {a},
      [ia, d, rows = std::move(rows)](Tape& t, std::uint32_t, const Tensor& g) {
        auto ga = t.grad_buffer(ia);
        for (std::size_t r = 0; r < rows.size(); ++r) {
          float* dst = ga.data() + rows[r] * d;
          const float* src = g.ptr() + static_cast<std::int64_t>(r) * d;
          for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      },
      "gather_rows");
}

namespace {

void check_conv_args(int stride, int padding) {
  if (stride < 1) throw std::invalid_argument("convolution stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("convolution padding must be >= 0");
}

void accumulate_channel_sums(const Tensor& g, std::int64_t channels, std::span<float> out) {
  const std::int64_t plane = static_cast<std::int64_t>(g.numel()) / channels;
  for (std::int64_t c = 0; c < channels; ++c) {
    double s = 0.0;
    const float* p = g.ptr() + c * plane;
    for (std::int64_t i = 0; i < plane; ++i) s += p[i];
    out[static_cast<std::size_t>(c)] += static_cast<float>(s);
  }
}

}  // namespace

Var conv2d(Var input, Var weight, Var bias, int stride, int padding) {
  Tape& tape = common_tape(input, weight);
  check_conv_args(stride, padding);
  require_rank(input, 3, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  const std::int64_t out_ch = w.dim(0);
  const int ksize = static_cast<int>(w.dim(2));
  if (w.dim(1) != x.dim(0) || w.dim(3) != ksize) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  const ConvGeom geom{x.dim(0), x.dim(1), x.dim(2), ksize, stride, padding};
  if (x.dim(1) + 2 * padding < ksize || x.dim(2) + 2 * padding < ksize) {
    throw std::invalid_argument("conv2d: kernel does not fit the padded input");
  }
  if (bias.valid() && static_cast<std::int64_t>(bias.numel()) != out_ch) throw ShapeError("conv2d: bias length");
  const std::int64_t rows = geom.col_rows(), cols = geom.col_cols();
  std::vector<float> col(static_cast<std::size_t>(rows * cols));
  k::im2col(x.ptr(), geom, col.data());
  Tensor out({out_ch, geom.out_height(), geom.out_width()});
  k::gemm(Trans::No, Trans::No, out_ch, cols, rows, w.ptr(), col.data(), out.ptr(), false);
  if (bias.valid()) {
    for (std::int64_t o = 0; o < out_ch; ++o) {
      const float b = bias.value()[static_cast<std::size_t>(o)];
      float* p = out.ptr() + o * cols;
      for (std::int64_t i = 0; i < cols; ++i) p[i] += b;
    }
  }
  const auto ix = input.id(), iw = weight.id();
  const bool has_bias = bias.valid();
  const auto ib = has_bias ? bias.id() : 0u;
  std::vector<Var> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  return tape.record(
      std::move(out), inputs,
      [=](Tape& t, std::uint32_t, const Tensor& g) {
        std::vector<float> buf(static_cast<std::size_t>(rows * cols));
        if (t.requires_grad(iw)) {
          k::im2col(t.value(ix).ptr(), geom, buf.data());
          k::gemm(Trans::No, Trans::Yes, out_ch, rows, cols, g.ptr(), buf.data(), t.grad_buffer(iw).data(), true);
        }
        if (t.requires_grad(ix)) {
          k::gemm(Trans::Yes, Trans::No, rows, cols, out_ch, t.value(iw).ptr(), g.ptr(), buf.data(), false);
          k::col2im(buf.data(), geom, t.grad_buffer(ix).data());
        }
        if (has_bias && t.requires_grad(ib)) accumulate_channel_sums(g, out_ch, t.grad_buffer(ib));
      },
      "conv2d");
}

Var conv_transpose2d(Var input, Var weight, Var bias, int stride, int padding) {
  Tape& tape = common_tape(input, weight);
  check_conv_args(stride, padding);
  require_rank(input, 3, "conv_transpose2d input");
  require_rank(weight, 4, "conv_transpose2d weight");
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  const std::int64_t in_ch = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::int64_t out_ch = w.dim(1);
  const int ksize = static_cast<int>(w.dim(2));
  if (w.dim(0) != in_ch || w.dim(3) != ksize) {
    throw ShapeError("conv_transpose2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  const std::int64_t oh = (h - 1) * stride - 2 * padding + ksize;
  const std::int64_t ow = (wd - 1) * stride - 2 * padding + ksize;
  if (oh < 1 || ow < 1) throw std::invalid_argument("conv_transpose2d: empty output");
  if (bias.valid() && static_cast<std::int64_t>(bias.numel()) != out_ch) {
    throw ShapeError("conv_transpose2d: bias length");
  }
  // Adjoint geometry: a conv over the O x oh x ow output maps back to h x w.
  const ConvGeom geom{out_ch, oh, ow, ksize, stride, padding};
  const std::int64_t rows = geom.col_rows(), cols = h * wd;
  std::vector<float> col(static_cast<std::size_t>(rows * cols));
  k::gemm(Trans::Yes, Trans::No, rows, cols, in_ch, w.ptr(), x.ptr(), col.data(), false);
  Tensor out({out_ch, oh, ow});
  k::col2im(col.data(), geom, out.ptr());
  if (bias.valid()) {
    for (std::int64_t o = 0; o < out_ch; ++o) {
      const float b = bias.value()[static_cast<std::size_t>(o)];
      float* p = out.ptr() + o * oh * ow;
      for (std::int64_t i = 0; i < oh * ow; ++i) p[i] += b;
    }
  }
  const auto ix = input.id(), iw = weight.id();
  const bool has_bias = bias.valid();
  const auto ib = has_bias ? bias.id() : 0u;
  std::vector<Var> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  return tape.record(
      std::move(out), inputs,
      [=](Tape& t, std::uint32_t, const Tensor& g) {
        std::vector<float> gcol(static_cast<std::size_t>(rows * cols));
        k::im2col(g.ptr(), geom, gcol.data());
        if (t.requires_grad(ix)) {
          k::gemm(Trans::No, Trans::No, in_ch, cols, rows, t.value(iw).ptr(), gcol.data(), t.grad_buffer(ix).data(),
                  true);
        }
        if (t.requires_grad(iw)) {
          k::gemm(Trans::No, Trans::Yes, in_ch, rows, cols, t.value(ix).ptr(), gcol.data(), t.grad_buffer(iw).data(),
                  true);
        }
        if (has_bias && t.requires_grad(ib)) accumulate_channel_sums(g, out_ch, t.grad_buffer(ib));
      },
      "conv_transpose2d");
}

Var add_channel_bias(Var x, Var bias) {
  Tape& tape = common_tape(x, bias);
  require_rank(x, 3, "add_channel_bias");
  const std::int64_t ch = x.value().dim(0);
  if (static_cast<std::int64_t>(bias.numel()) != ch) throw ShapeError("add_channel_bias: bias length mismatch");
  const std::int64_t plane = x.value().dim(1) * x.value().dim(2);
  Tensor out = x.value();
  for (std::int64_t c = 0; c < ch; ++c) {
    const float b = bias.value()[static_cast<std::size_t>(c)];
    float* p = out.ptr() + c * plane;
    for (std::int64_t i = 0; i < plane; ++i) p[i] += b;
  }
  const auto ix = x.id(), ib = bias.id();
  return tape.record(
      std::move(out), {x, bias},
      [=](Tape& t, std::uint32_t, const Tensor& g) {
        if (t.requires_grad(ix)) {
          auto gx = t.grad_buffer(ix);
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
        }
        if (t.requires_grad(ib)) accumulate_channel_sums(g, ch, t.grad_buffer(ib));
      },
      "add_channel_bias");
}

Var avg_pool2d(Var input, int factor) {
  require_rank(input, 3, "avg_pool2d");
  const Tensor& x = input.value();
  const std::int64_t ch = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (factor < 1 || h % factor != 0 || w % factor != 0) {
    throw ShapeError("avg_pool2d: factor must divide " + shape_str(x.shape()));
  }
  const std::int64_t oh = h / factor, ow = w / factor;
  const float scale = 1.0f / static_cast<float>(factor * factor);
  Tensor out({ch, oh, ow});
  for (std::int64_t c = 0; c < ch; ++c) {
    for (std::int64_t i = 0; i < h; ++i) {
      for (std::int64_t j = 0; j < w; ++j) {
        out[static_cast<std::size_t>((c * oh + i / factor) * ow + j / factor)] +=
            x[static_cast<std::size_t>((c * h + i) * w + j)] * scale;
      }
    }
  }
  const auto ix = input.id();
  return input.tape().record(
      std::move(out), {input},
      [=](Tape& t, std::uint32_t, const Tensor& g) {
        auto gx = t.grad_buffer(ix);
        for (std::int64_t c = 0; c < ch; ++c) {
          for (std::int64_t i = 0; i < h; ++i) {
            for (std::int64_t j = 0; j < w; ++j) {
              gx[static_cast<std::size_t>((c * h + i) * w + j)] +=
                  g[static_cast<std::size_t>((c * oh + i / factor) * ow + j / factor)] * scale;
            }
          }
        }
      },
      "avg_pool2d");
}

Var upsample_nearest2d(Var input, int factor) {
  require_rank(input, 3, "upsample_nearest2d");
  if (factor < 1) throw std::invalid_argument("upsample factor must be >= 1");
  const Tensor& x = input.value();
  const std::int64_t ch = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::int64_t oh = h * factor, ow = w * factor;
  Tensor out({ch, oh, ow});
  for (std::int64_t c = 0; c < ch; ++c) {
    for (std::int64_t i = 0; i < oh; ++i) {
      for (std::int64_t j = 0; j < ow; ++j) {
        out[static_cast<std::size_t>((c * oh + i) * ow + j)] =
            x[static_cast<std::size_t>((c * h + i / factor) * w + j / factor)];
      }
    }
  }
  const auto ix = input.id();
  return input.tape().record(
      std::move(out), {input},
      [=](Tape& t, std::uint32_t, const Tensor& g) {
        auto gx = t.grad_buffer(ix);
        for (std::int64_t c = 0; c < ch; ++c) {
          for (std::int64_t i = 0; i < oh; ++i) {
            for (std::int64_t j = 0; j < ow; ++j) {
              gx[static_cast<std::size_t>((c * h + i / factor) * w + j / factor)] +=
                  g[static_cast<std::size_t>((c * oh + i) * ow + j)];
            }
          }
        }
      },
      "upsample_nearest2d");
}

Var grid_sample_2d(Var plane, Var uv) {
  Tape& tape = common_tape(plane, uv);
  require_rank(plane, 3, "grid_sample_2d plane");
  require_rank(uv, 2, "grid_sample_2d uv");
  if (uv.value().dim(1) != 2) throw ShapeError("grid_sample_2d: uv must be N x 2");
  const std::int64_t ch = plane.value().dim(0), h = plane.value().dim(1), w = plane.value().dim(2);
  const std::int64_t n = uv.value().dim(0);
  Tensor out({n, ch});
  k::grid_sample(plane.value().ptr(), ch, h, w, uv.value().ptr(), n, out.ptr());
  const auto ip = plane.id(), iu = uv.id();
  return tape.record(
      std::move(out), {plane, uv},
      [=](Tape& t, std::uint32_t, const Tensor& g) {
        const float* coords = t.value(iu).ptr();
        const float* pv = t.value(ip).ptr();
        const std::int64_t hw = h * w;
        std::vector<detail::AxisTap> tx(static_cast<std::size_t>(n)), ty(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) {
          tx[static_cast<std::size_t>(i)] = detail::axis_tap(coords[2 * i], w);
          ty[static_cast<std::size_t>(i)] = detail::axis_tap(coords[2 * i + 1], h);
        }
        if (t.requires_grad(ip)) {
          float* gp = t.grad_buffer(ip).data();
#pragma omp parallel for schedule(static)
          for (std::int64_t c = 0; c < ch; ++c) {
            float* dst = gp + c * hw;
            for (std::int64_t i = 0; i < n; ++i) {
              const auto& a = tx[static_cast<std::size_t>(i)];
              const auto& b = ty[static_cast<std::size_t>(i)];
              const float gv = g[static_cast<std::size_t>(i * ch + c)];
              dst[b.i0 * w + a.i0] += gv * (1 - a.frac) * (1 - b.frac);
              dst[b.i0 * w + a.i1] += gv * a.frac * (1 - b.frac);
              dst[b.i1 * w + a.i0] += gv * (1 - a.frac) * b.frac;
              dst[b.i1 * w + a.i1] += gv * a.frac * b.frac;
            }
          }
        }
        if (t.requires_grad(iu)) {
          float* gu = t.grad_buffer(iu).data();
#pragma omp parallel for schedule(static)
          for (std::int64_t i = 0; i < n; ++i) {
            const auto& a = tx[static_cast<std::size_t>(i)];
            const auto& b = ty[static_cast<std::size_t>(i)];
            float du = 0.0f, dv = 0.0f;
            for (std::int64_t c = 0; c < ch; ++c) {
              const float* p = pv + c * hw;
              const float p00 = p[b.i0 * w + a.i0], p01 = p[b.i0 * w + a.i1];
              const float p10 = p[b.i1 * w + a.i0], p11 = p[b.i1 * w + a.i1];
              const float gv = g[static_cast<std::size_t>(i * ch + c)];
              du += gv * ((1 - b.frac) * (p01 - p00) + b.frac * (p11 - p10));
              dv += gv * ((1 - a.frac) * (p10 - p00) + a.frac * (p11 - p01));
            }
            gu[2 * i] += du * a.dpix_du;
            gu[2 * i + 1] += dv * b.dpix_du;
          }
        }
      },
      "grid_sample_2d");
}

}  // namespace tridiff::num
