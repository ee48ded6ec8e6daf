#pragma once

#include <cstdint>
#include <random>

#include "tridiff/numerics/tensor.hpp"

namespace tridiff::num {

/// Seeded generator threaded explicitly through every stochastic op.
/// Distribution transforms are implemented here rather than taken from
/// <random> so draws are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n);
  double normal();

  Tensor normal_tensor(const Shape& shape);
  Tensor uniform_tensor(const Shape& shape, float lo, float hi);

  /// Independent child stream derived from this generator's next output.
  Rng fork() { return Rng(engine_() ^ 0x9e3779b97f4a7c15ULL); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace tridiff::num
