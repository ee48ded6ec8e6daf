#pragma once

#include "tridiff/numerics/tape.hpp"
#include "tridiff/refine/mesh.hpp"
#include "tridiff/triplane/camera.hpp"

namespace tridiff::refine {

/// Visible triangle per pixel after depth testing, with barycentric weights
/// of the pixel-center ray hit.
struct Fragments {
  int width = 0, height = 0;
  std::vector<int> pixel;                   // covered pixel ids (row * width + col)
  std::vector<int> face;                    // face id per covered pixel
  std::vector<std::array<float, 3>> bary;   // weights of the face's three corners
};

/// Exact ray casting of every pixel center against the triangles whose
/// projected bounds contain it; the nearest hit wins. Faces with a corner
/// behind the camera are skipped.
Fragments rasterize(const std::vector<Vec3>& vertices, const std::vector<Face>& faces, const triplane::Camera& cam);
/// Convenience overload over a V x 3 vertex tensor.
Fragments rasterize(const num::Tensor& vertices, const std::vector<Face>& faces, const triplane::Camera& cam);

/// Surface points sum_k bary_k * v[face_k] for every covered pixel; P x 3,
/// differentiable wrt the vertices with the weights held fixed.
num::Var interpolate_points(num::Var vertices, const std::vector<Face>& faces, const Fragments& frags);

/// Places per-pixel colors (P x 3, in fragment order) over a constant
/// background; H x W x 3 and differentiable wrt the colors. With no covered
/// pixels `colors` may be unbound and the result is a constant image.
num::Var composite(num::Tape& tape, num::Var colors, const Fragments& frags, float background = 1.0f);

}  // namespace tridiff::refine
