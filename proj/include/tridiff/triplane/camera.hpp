#pragma once

#include <vector>

#include "tridiff/numerics/vec3.hpp"

namespace tridiff::triplane {

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit length
};

/// Pinhole camera on an object-centric orbit, looking at the origin with +y
/// up. Azimuth 0 places the camera on +z; positive elevation lifts it.
struct Camera {
  double radius = 2.5;
  double azimuth_deg = 0.0;
  double elevation_deg = 0.0;
  double fov_deg = 49.1;
  int width = 32;
  int height = 32;

  /// Throws std::invalid_argument on radius <= 0, fov outside (0, 120) or an
  /// empty image.
  void validate() const;
  Vec3 position() const;
  /// Focal length in pixels; fov spans the image width.
  double focal() const;
  /// Ray through the center of pixel (col, row).
  Ray ray(int col, int row) const { return ray_through(col + 0.5, row + 0.5); }
  /// Ray through continuous image coordinates; pixel (c, r) spans [c, c+1) x [r, r+1).
  Ray ray_through(double x, double y) const;
  /// All pixel rays in row-major order.
  std::vector<Ray> rays() const;
  /// Pixel coordinates (col, row, continuous) where a world point projects.
  void project(const Vec3& p, double& col, double& row) const;
};

/// Slab test against the cube [-1, 1]^3. Returns false when the ray misses or
/// only touches it; otherwise t_near < t_far with t_near clipped at 0.
bool intersect_unit_cube(const Ray& ray, double& t_near, double& t_far);

}  // namespace tridiff::triplane
