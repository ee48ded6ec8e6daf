#include "tridiff/numerics/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "detail/bilinear.hpp"

namespace tridiff::num::kernels {

namespace {

struct BilinearTap {
  std::int64_t x0, x1, y0, y1;
  float fx, fy;
};

inline BilinearTap bilinear_tap(float u, float v, std::int64_t height, std::int64_t width) {
  const auto tx = detail::axis_tap(u, width);
  const auto ty = detail::axis_tap(v, height);
  return {tx.i0, tx.i1, ty.i0, ty.i1, tx.frac, ty.frac};
}

}  // namespace

// ---------------------------------------------------------------------------
// Serial reference kernels.

namespace serial {

void gemm(Trans ta, Trans tb, std::int64_t m, std::int64_t n, std::int64_t k, const float* a, const float* b,
          float* c, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::int64_t p = 0; p < k; ++p) {
        const float av = ta == Trans::No ? a[i * k + p] : a[p * m + i];
        const float bv = tb == Trans::No ? b[p * n + j] : b[j * k + p];
        s += static_cast<double>(av) * bv;
      }
      c[i * n + j] = static_cast<float>((accumulate ? c[i * n + j] : 0.0) + s);
    }
  }
}

void im2col(const float* image, const ConvGeom& g, float* cols) {
  const auto oh = g.out_height(), ow = g.out_width();
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        const std::int64_t row = (c * g.kernel + ki) * g.kernel + kj;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t y = oy * g.stride - g.pad + ki;
            const std::int64_t x = ox * g.stride - g.pad + kj;
            const bool inside = y >= 0 && y < g.height && x >= 0 && x < g.width;
            cols[row * oh * ow + oy * ow + ox] = inside ? image[(c * g.height + y) * g.width + x] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im(const float* cols, const ConvGeom& g, float* image) {
  const auto oh = g.out_height(), ow = g.out_width();
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        const std::int64_t row = (c * g.kernel + ki) * g.kernel + kj;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t y = oy * g.stride - g.pad + ki;
            const std::int64_t x = ox * g.stride - g.pad + kj;
            if (y >= 0 && y < g.height && x >= 0 && x < g.width) {
              image[(c * g.height + y) * g.width + x] += cols[row * oh * ow + oy * ow + ox];
            }
          }
        }
      }
    }
  }
}

void grid_sample(const float* plane, std::int64_t channels, std::int64_t height, std::int64_t width,
                 const float* uv, std::int64_t n, float* out) {
  for (std::int64_t i = 0; i < n; ++i) {
    const auto t = bilinear_tap(uv[2 * i], uv[2 * i + 1], height, width);
    for (std::int64_t c = 0; c < channels; ++c) {
      const float* p = plane + c * height * width;
      const float top = p[t.y0 * width + t.x0] * (1 - t.fx) + p[t.y0 * width + t.x1] * t.fx;
      const float bot = p[t.y1 * width + t.x0] * (1 - t.fx) + p[t.y1 * width + t.x1] * t.fx;
      out[i * channels + c] = top * (1 - t.fy) + bot * t.fy;
    }
  }
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP kernels.

namespace parallel {

namespace {

// C = A * B with A m x k, B k x n, all row-major. Rows are processed four at a
// time so each loaded row of B feeds four accumulators; columns are tiled so
// the active C tile stays cache resident.
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const float* __restrict a,
             const float* __restrict b, float* __restrict c, bool accumulate) {
  constexpr std::int64_t kRowBlock = 4;
  constexpr std::int64_t kColBlock = 512;
  const std::int64_t row_blocks = (m + kRowBlock - 1) / kRowBlock;
  const std::int64_t col_blocks = (n + kColBlock - 1) / kColBlock;

#pragma omp parallel for collapse(2) schedule(static)
  for (std::int64_t rb = 0; rb < row_blocks; ++rb) {
    for (std::int64_t cb = 0; cb < col_blocks; ++cb) {
      const std::int64_t i0 = rb * kRowBlock;
      const std::int64_t rows = std::min(kRowBlock, m - i0);
      const std::int64_t j0 = cb * kColBlock;
      const std::int64_t cols = std::min(kColBlock, n - j0);
      if (!accumulate) {
        for (std::int64_t r = 0; r < rows; ++r) std::fill_n(c + (i0 + r) * n + j0, cols, 0.0f);
      }
      if (rows == kRowBlock) {
        float* __restrict c0 = c + (i0 + 0) * n + j0;
        float* __restrict c1 = c + (i0 + 1) * n + j0;
        float* __restrict c2 = c + (i0 + 2) * n + j0;
        float* __restrict c3 = c + (i0 + 3) * n + j0;
        const float* a0 = a + (i0 + 0) * k;
        const float* a1 = a + (i0 + 1) * k;
        const float* a2 = a + (i0 + 2) * k;
        const float* a3 = a + (i0 + 3) * k;
        for (std::int64_t p = 0; p < k; ++p) {
          const float v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
          const float* __restrict bp = b + p * n + j0;
#pragma omp simd
          for (std::int64_t j = 0; j < cols; ++j) {
            const float bv = bp[j];
            c0[j] += v0 * bv;
            c1[j] += v1 * bv;
            c2[j] += v2 * bv;
            c3[j] += v3 * bv;
          }
        }
      } else {
        for (std::int64_t r = 0; r < rows; ++r) {
          float* __restrict cr = c + (i0 + r) * n + j0;
          const float* ar = a + (i0 + r) * k;
          for (std::int64_t p = 0; p < k; ++p) {
            const float v = ar[p];
            const float* __restrict bp = b + p * n + j0;
#pragma omp simd
            for (std::int64_t j = 0; j < cols; ++j) cr[j] += v * bp[j];
          }
        }
      }
    }
  }
}

// C = A * B^T with A m x k and B n x k. Each output is a dot product of two
// contiguous rows, so no transpose copy is needed; a 4 x 2 register tile
// reuses every loaded A and B vector across several accumulators.
void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t k, const float* __restrict a,
             const float* __restrict b, float* __restrict c, bool accumulate) {
  const std::int64_t row_blocks = (m + 3) / 4;
#pragma omp parallel for schedule(static)
  for (std::int64_t rb = 0; rb < row_blocks; ++rb) {
    const std::int64_t i0 = rb * 4;
    const std::int64_t rows = std::min<std::int64_t>(4, m - i0);
    std::int64_t j = 0;
    if (rows == 4) {
      const float* a0 = a + (i0 + 0) * k;
      const float* a1 = a + (i0 + 1) * k;
      const float* a2 = a + (i0 + 2) * k;
      const float* a3 = a + (i0 + 3) * k;
      for (; j + 2 <= n; j += 2) {
        const float* b0 = b + j * k;
        const float* b1 = b + (j + 1) * k;
        float s00 = 0, s01 = 0, s10 = 0, s11 = 0, s20 = 0, s21 = 0, s30 = 0, s31 = 0;
#pragma omp simd reduction(+ : s00, s01, s10, s11, s20, s21, s30, s31)
        for (std::int64_t p = 0; p < k; ++p) {
          const float x0 = b0[p], x1 = b1[p];
          s00 += a0[p] * x0;
          s01 += a0[p] * x1;
          s10 += a1[p] * x0;
          s11 += a1[p] * x1;
          s20 += a2[p] * x0;
          s21 += a2[p] * x1;
          s30 += a3[p] * x0;
          s31 += a3[p] * x1;
        }
        const float sums[4][2] = {{s00, s01}, {s10, s11}, {s20, s21}, {s30, s31}};
        for (int r = 0; r < 4; ++r) {
          for (int q = 0; q < 2; ++q) {
            float& dst = c[(i0 + r) * n + j + q];
            dst = accumulate ? dst + sums[r][q] : sums[r][q];
          }
        }
      }
    }
    // Leftover columns, or every column of a partial row block.
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* ar = a + (i0 + r) * k;
      for (std::int64_t jj = (rows == 4 ? j : 0); jj < n; ++jj) {
        const float* bj = b + jj * k;
        float s = 0;
#pragma omp simd reduction(+ : s)
        for (std::int64_t p = 0; p < k; ++p) s += ar[p] * bj[p];
        float& dst = c[(i0 + r) * n + jj];
        dst = accumulate ? dst + s : s;
      }
    }
  }
}

}  // namespace

void transpose(const float* src, std::int64_t rows, std::int64_t cols, float* dst) {
  constexpr std::int64_t kTile = 32;
#pragma omp parallel for collapse(2) schedule(static)
  for (std::int64_t r0 = 0; r0 < rows; r0 += kTile) {
    for (std::int64_t c0 = 0; c0 < cols; c0 += kTile) {
      const std::int64_t r1 = std::min(rows, r0 + kTile), c1 = std::min(cols, c0 + kTile);
      for (std::int64_t r = r0; r < r1; ++r) {
        for (std::int64_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
      }
    }
  }
}

void gemm(Trans ta, Trans tb, std::int64_t m, std::int64_t n, std::int64_t k, const float* a, const float* b,
          float* c, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill_n(c, m * n, 0.0f);
    return;
  }
  if (ta == Trans::No && tb == Trans::Yes) {
    gemm_nt(m, n, k, a, b, c, accumulate);
    return;
  }
  std::vector<float> at, bt;
  if (ta == Trans::Yes) {
    at.resize(static_cast<std::size_t>(m * k));
    transpose(a, k, m, at.data());
    a = at.data();
  }
  if (tb == Trans::Yes) {
    bt.resize(static_cast<std::size_t>(k * n));
    transpose(b, n, k, bt.data());
    b = bt.data();
  }
  gemm_nn(m, n, k, a, b, c, accumulate);
}

void im2col(const float* image, const ConvGeom& g, float* cols) {
  const auto oh = g.out_height(), ow = g.out_width();
  const std::int64_t rows = g.col_rows();
#pragma omp parallel for schedule(static)
  for (std::int64_t row = 0; row < rows; ++row) {
    const std::int64_t c = row / (g.kernel * g.kernel);
    const int ki = static_cast<int>((row / g.kernel) % g.kernel);
    const int kj = static_cast<int>(row % g.kernel);
    const float* src = image + c * g.height * g.width;
    float* dst = cols + row * oh * ow;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      const std::int64_t y = oy * g.stride - g.pad + ki;
      float* drow = dst + oy * ow;
      if (y < 0 || y >= g.height) {
        std::fill_n(drow, ow, 0.0f);
        continue;
      }
      const float* srow = src + y * g.width;
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        const std::int64_t x = ox * g.stride - g.pad + kj;
        drow[ox] = (x >= 0 && x < g.width) ? srow[x] : 0.0f;
      }
    }
  }
}

void col2im(const float* cols, const ConvGeom& g, float* image) {
  const auto oh = g.out_height(), ow = g.out_width();
#pragma omp parallel for schedule(static)
  for (std::int64_t c = 0; c < g.channels; ++c) {
    float* dst = image + c * g.height * g.width;
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        const std::int64_t row = (c * g.kernel + ki) * g.kernel + kj;
        const float* src = cols + row * oh * ow;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t y = oy * g.stride - g.pad + ki;
          if (y < 0 || y >= g.height) continue;
          float* drow = dst + y * g.width;
          const float* srow = src + oy * ow;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t x = ox * g.stride - g.pad + kj;
            if (x >= 0 && x < g.width) drow[x] += srow[ox];
          }
        }
      }
    }
  }
}

void grid_sample(const float* plane, std::int64_t channels, std::int64_t height, std::int64_t width,
                 const float* uv, std::int64_t n, float* out) {
  const std::int64_t hw = height * width;
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    const auto t = bilinear_tap(uv[2 * i], uv[2 * i + 1], height, width);
    const float w00 = (1 - t.fx) * (1 - t.fy), w01 = t.fx * (1 - t.fy);
    const float w10 = (1 - t.fx) * t.fy, w11 = t.fx * t.fy;
    const std::int64_t o00 = t.y0 * width + t.x0, o01 = t.y0 * width + t.x1;
    const std::int64_t o10 = t.y1 * width + t.x0, o11 = t.y1 * width + t.x1;
    float* dst = out + i * channels;
    for (std::int64_t c = 0; c < channels; ++c) {
      const float* p = plane + c * hw;
      dst[c] = w00 * p[o00] + w01 * p[o01] + w10 * p[o10] + w11 * p[o11];
    }
  }
}

}  // namespace parallel

}  // namespace tridiff::num::kernels
