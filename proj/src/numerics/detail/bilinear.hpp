#pragma once

#include <algorithm>
#include <cstdint>

namespace tridiff::num::detail {

// Align-corners mapping of u in [-1, 1] to pixel space, clamped to the border.
struct AxisTap {
  std::int64_t i0 = 0, i1 = 0;
  float frac = 0.0f;
  float dpix_du = 0.0f;  // zero where the coordinate was clamped
};

inline AxisTap axis_tap(float u, std::int64_t size) {
  AxisTap t;
  const float scale = 0.5f * static_cast<float>(size - 1);
  const float raw = (u + 1.0f) * scale;
  const float p = std::clamp(raw, 0.0f, static_cast<float>(size - 1));
  t.dpix_du = (raw > 0.0f && raw < static_cast<float>(size - 1)) ? scale : 0.0f;
  t.i0 = std::min<std::int64_t>(static_cast<std::int64_t>(p), std::max<std::int64_t>(size - 2, 0));
  t.i1 = std::min(t.i0 + 1, size - 1);
  t.frac = p - static_cast<float>(t.i0);
  return t;
}

}  // namespace tridiff::num::detail
