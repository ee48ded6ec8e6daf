#include "tridiff/triplane/camera.hpp"

#include <algorithm>
#include <numbers>
#include <stdexcept>

namespace tridiff::triplane {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

struct Frame {
  Vec3 forward, right, up;
};

Frame look_at_origin(const Vec3& eye) {
  Frame f;
  f.forward = normalize(-eye);
  Vec3 world_up{0, 1, 0};
  // Straight above or below: any horizontal right vector will do.
  if (norm(cross(f.forward, world_up)) < 1e-9) world_up = {0, 0, -1};
  f.right = normalize(cross(f.forward, world_up));
  f.up = cross(f.right, f.forward);
  return f;
}

}  // namespace

void Camera::validate() const {
  if (!(radius > 0)) throw std::invalid_argument("camera radius must be positive");
  if (!(fov_deg > 0 && fov_deg < 120)) throw std::invalid_argument("camera fov must lie in (0, 120) degrees");
  if (width < 1 || height < 1) throw std::invalid_argument("camera image must be non-empty");
}

Vec3 Camera::position() const {
  const double az = azimuth_deg * kDeg, el = elevation_deg * kDeg;
  return radius * Vec3{std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az)};
}

double Camera::focal() const { return 0.5 * width / std::tan(0.5 * fov_deg * kDeg); }

Ray Camera::ray_through(double px, double py) const {
  const Vec3 eye = position();
  const Frame f = look_at_origin(eye);
  const double fl = focal();
  const double x = (px - 0.5 * width) / fl;
  const double y = -(py - 0.5 * height) / fl;
  return {eye, normalize(f.forward + x * f.right + y * f.up)};
}

std::vector<Ray> Camera::rays() const {
  validate();
  std::vector<Ray> out;
  out.reserve(static_cast<std::size_t>(width) * height);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) out.push_back(ray(c, r));
  }
  return out;
}

void Camera::project(const Vec3& p, double& col, double& row) const {
  const Vec3 eye = position();
  const Frame f = look_at_origin(eye);
  const Vec3 d = p - eye;
  const double z = dot(d, f.forward);
  const double fl = focal();
  col = dot(d, f.right) / z * fl + 0.5 * width;
  row = -dot(d, f.up) / z * fl + 0.5 * height;
}

bool intersect_unit_cube(const Ray& ray, double& t_near, double& t_far) {
  double lo = -1e30, hi = 1e30;
  for (int a = 0; a < 3; ++a) {
    const double o = ray.origin[a], d = ray.dir[a];
    if (std::abs(d) < 1e-12) {
      if (o < -1.0 || o > 1.0) return false;
      continue;
    }
    double t0 = (-1.0 - o) / d, t1 = (1.0 - o) / d;
    if (t0 > t1) std::swap(t0, t1);
    lo = std::max(lo, t0);
    hi = std::min(hi, t1);
  }
  lo = std::max(lo, 0.0);
  if (hi - lo <= 1e-9) return false;
  t_near = lo;
  t_far = hi;
  return true;
}

}  // namespace tridiff::triplane
