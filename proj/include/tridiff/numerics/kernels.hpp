#pragma once

#include <cstdint>

// Hot loops behind the tape ops. Each kernel exists twice: a plain serial
// reference used by the tests as an oracle, and an OpenMP version used by the
// ops. Both take raw row-major buffers; shapes are validated by the callers.

namespace tridiff::num::kernels {

enum class Trans : bool { No = false, Yes = true };

/// Geometry of a 2-D convolution over a single C x H x W image.
struct ConvGeom {
  std::int64_t channels = 0, height = 0, width = 0;
  int kernel = 1, stride = 1, pad = 0;

  std::int64_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::int64_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  std::int64_t col_rows() const { return channels * kernel * kernel; }
  std::int64_t col_cols() const { return out_height() * out_width(); }
};

namespace serial {

/// C[m x n] = op(A) * op(B) (+ C when accumulate). A is m x k (or k x m when
/// transposed), B is k x n (or n x k).
void gemm(Trans ta, Trans tb, std::int64_t m, std::int64_t n, std::int64_t k, const float* a, const float* b,
          float* c, bool accumulate);
void im2col(const float* image, const ConvGeom& g, float* cols);
/// Scatter-adds columns back into image (which is not cleared).
void col2im(const float* cols, const ConvGeom& g, float* image);
/// Bilinear, align-corners, border-clamped lookup. out is N x C.
void grid_sample(const float* plane, std::int64_t channels, std::int64_t height, std::int64_t width,
                 const float* uv, std::int64_t n, float* out);

}  // namespace serial

namespace parallel {

void gemm(Trans ta, Trans tb, std::int64_t m, std::int64_t n, std::int64_t k, const float* a, const float* b,
          float* c, bool accumulate);
void im2col(const float* image, const ConvGeom& g, float* cols);
void col2im(const float* cols, const ConvGeom& g, float* image);
void grid_sample(const float* plane, std::int64_t channels, std::int64_t height, std::int64_t width,
                 const float* uv, std::int64_t n, float* out);
void transpose(const float* src, std::int64_t rows, std::int64_t cols, float* dst);

}  // namespace parallel

}  // namespace tridiff::num::kernels
