#pragma once

#include <functional>

#include "tridiff/numerics/tape.hpp"
#include "tridiff/refine/mesh.hpp"

namespace tridiff::refine {

/// Signed distances (negative inside) on an n^3 lattice plus a per-lattice
/// positional offset. Lattice point (i, j, k) sits at origin + cell * (i, j, k)
/// + offset; values are stored with i (x) slowest and k (z) fastest.
struct SdfGrid {
  int n = 0;
  Vec3 origin;
  double cell = 0;
  num::Tensor values;   // n*n*n
  num::Tensor offsets;  // n*n*n x 3, each component within +-cell/2

  static SdfGrid zeros(int n, const Vec3& origin, double cell);
  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * n + j) * static_cast<std::size_t>(n) + k;
  }
  /// Lattice position without the offset.
  Vec3 lattice(int i, int j, int k) const { return origin + Vec3(i, j, k) * cell; }
  Vec3 corner(std::size_t idx) const;  // lattice position plus offset
  void validate() const;
  void clamp_offsets();
};

/// Samples fn on an n^3 lattice spanning [lo, hi] along each axis.
SdfGrid sample_sdf(const std::function<double(const Vec3&)>& fn, int n, double lo, double hi);

/// Lattice over the mesh's bounding cube with two cells of margin on every
/// side. Magnitude is the exact distance to the nearest triangle; the sign is a
/// majority vote of ray-parity tests along three skew directions.
/// Throws std::invalid_argument on an empty mesh or n < 8.
SdfGrid mesh_to_sdf(const Mesh& mesh, int resolution = 32);

/// Standard 256-case marching cubes on the zero level set. Vertices shared by
/// neighboring cells are merged, so a grid whose boundary values are all
/// positive gives a closed mesh. A grid without a zero crossing gives an empty
/// mesh.
Mesh marching_cubes(const SdfGrid& grid);

/// Differentiable form. `values` (n^3) and `offsets` (n^3 x 3) carry the
/// grid's data; `layout` supplies n, origin and cell. Vertex (a, b) on a
/// lattice edge is p_a + t (p_b - p_a) with t = s_a / (s_a - s_b).
struct McVars {
  num::Var vertices;  // V x 3; unbound when the mesh is empty
  std::vector<Face> faces;
  bool empty() const { return faces.empty(); }
};
McVars marching_cubes(num::Var values, num::Var offsets, const SdfGrid& layout);

}  // namespace tridiff::refine
