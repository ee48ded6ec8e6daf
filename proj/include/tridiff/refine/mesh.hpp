#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "tridiff/numerics/vec3.hpp"

namespace tridiff::refine {

using Face = std::array<int, 3>;

/// Triangle mesh with optional per-vertex colors in [0, 1].
/// Faces are counter-clockwise seen from outside.
struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;
  std::vector<Vec3> colors;  // empty or one per vertex

  bool empty() const { return faces.empty(); }
  /// Throws std::invalid_argument on out-of-range indices, repeated corners or
  /// a color array of the wrong length.
  void validate() const;
};

/// Subdivided icosahedron projected onto a sphere.
Mesh icosphere(double radius, int subdivisions, const Vec3& center = {});
/// Two triangles spanning center +- u +- v, facing along cross(u, v).
Mesh quad(const Vec3& center, const Vec3& u, const Vec3& v);
/// Concatenation with reindexed faces.
Mesh merge(const Mesh& a, const Mesh& b);

/// V - E + F over referenced vertices.
int euler_characteristic(const Mesh& mesh);
/// Every directed edge is matched by exactly one opposite edge.
bool is_watertight(const Mesh& mesh);
double signed_volume(const Mesh& mesh);

/// Component label per face (faces sharing a vertex are connected) and the
/// number of components.
std::vector<int> face_components(const Mesh& mesh, int& count);
/// Keeps only the largest connected component by face count.
Mesh remove_floaters(const Mesh& mesh);
/// Drops vertices no face references.
Mesh compact(const Mesh& mesh);

/// Quadric-error edge collapse down to at most max_faces faces. Collapses
/// that would change topology or flip a face are rejected, so the result may
/// stay above the budget on tiny meshes.
Mesh decimate(const Mesh& mesh, std::size_t max_faces);

struct SmoothOptions {
  int iterations = 10;
  double laplacian_weight = 1.0;  // pull toward the neighbor average
  double offset_weight = 1.0;     // pull toward the input position
};
/// Jacobi minimization of laplacian_weight * |v - avg(N(v))|^2 +
/// offset_weight * |v - v0|^2 per vertex.
Mesh smooth(const Mesh& mesh, const SmoothOptions& opts = {});

void write_obj(const std::filesystem::path& path, const Mesh& mesh);
void write_ply(const std::filesystem::path& path, const Mesh& mesh);
/// Reads v/f records; polygons are fan-triangulated and "v x y z r g b"
/// colors are kept when every vertex has them.
Mesh read_obj(const std::filesystem::path& path);

}  // namespace tridiff::refine
