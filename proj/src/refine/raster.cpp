#include "tridiff/refine/raster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tridiff/numerics/ops.hpp"

namespace tridiff::refine {

using num::Tensor;
using num::Var;

Fragments rasterize(const std::vector<Vec3>& vertices, const std::vector<Face>& faces, const triplane::Camera& cam) {
  cam.validate();
  const int w = cam.width, h = cam.height;
  const auto rays = cam.rays();
  const Vec3 eye = cam.position();
  const Vec3 forward = normalize(-eye);
  std::vector<double> depth(rays.size(), std::numeric_limits<double>::infinity());
  std::vector<int> owner(rays.size(), -1);
  std::vector<std::array<float, 3>> weights(rays.size());

  for (std::size_t fi = 0; fi < faces.size(); ++fi) {
    const Face& f = faces[fi];
    const Vec3 a = vertices[f[0]], b = vertices[f[1]], c = vertices[f[2]];
    if (dot(a - eye, forward) <= 1e-6 || dot(b - eye, forward) <= 1e-6 || dot(c - eye, forward) <= 1e-6) continue;
    double cmin = 1e30, cmax = -1e30, rmin = 1e30, rmax = -1e30;
    for (const Vec3* p : {&a, &b, &c}) {
      double col, row;
      cam.project(*p, col, row);
      cmin = std::min(cmin, col);
      cmax = std::max(cmax, col);
      rmin = std::min(rmin, row);
      rmax = std::max(rmax, row);
    }
    // Pixel centers sit at integer + 0.5; pad by one pixel against rounding.
    const int c0 = std::max(0, static_cast<int>(std::floor(cmin - 0.5)) - 1);
    const int c1 = std::min(w - 1, static_cast<int>(std::ceil(cmax - 0.5)) + 1);
    const int r0 = std::max(0, static_cast<int>(std::floor(rmin - 0.5)) - 1);
    const int r1 = std::min(h - 1, static_cast<int>(std::ceil(rmax - 0.5)) + 1);
    const Vec3 e1 = b - a, e2 = c - a;
    for (int r = r0; r <= r1; ++r) {
      for (int col = c0; col <= c1; ++col) {
        const std::size_t px = static_cast<std::size_t>(r) * w + col;
        const auto& ray = rays[px];
        const Vec3 pv = cross(ray.dir, e2);
        const double det = dot(e1, pv);
        if (std::abs(det) < 1e-14) continue;
        const double inv = 1.0 / det;
        const Vec3 tv = ray.origin - a;
        const double u = dot(tv, pv) * inv;
        if (u < 0 || u > 1) continue;
        const Vec3 qv = cross(tv, e1);
        const double v = dot(ray.dir, qv) * inv;
        if (v < 0 || u + v > 1) continue;
        const double t = dot(e2, qv) * inv;
        if (t <= 0 || t >= depth[px]) continue;
        depth[px] = t;
        owner[px] = static_cast<int>(fi);
        weights[px] = {static_cast<float>(1.0 - u - v), static_cast<float>(u), static_cast<float>(v)};
      }
    }
  }

  Fragments out;
  out.width = w;
  out.height = h;
  for (std::size_t px = 0; px < owner.size(); ++px) {
    if (owner[px] < 0) continue;
    out.pixel.push_back(static_cast<int>(px));
    out.face.push_back(owner[px]);
    out.bary.push_back(weights[px]);
  }
  return out;
}

Fragments rasterize(const Tensor& vertices, const std::vector<Face>& faces, const triplane::Camera& cam) {
  if (vertices.rank() != 2 || vertices.dim(1) != 3) throw num::ShapeError("rasterize: vertices must be V x 3");
  std::vector<Vec3> v(static_cast<std::size_t>(vertices.dim(0)));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = {vertices[3 * i], vertices[3 * i + 1], vertices[3 * i + 2]};
  return rasterize(v, faces, cam);
}

Var interpolate_points(Var vertices, const std::vector<Face>& faces, const Fragments& frags) {
  const Tensor& vv = vertices.value();
  if (vv.rank() != 2 || vv.dim(1) != 3) throw num::ShapeError("interpolate_points: vertices must be V x 3");
  const std::int64_t p = static_cast<std::int64_t>(frags.pixel.size());
  Tensor out({p, 3});
  for (std::int64_t i = 0; i < p; ++i) {
    const Face& f = faces[frags.face[i]];
    for (int c = 0; c < 3; ++c) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += static_cast<double>(frags.bary[i][k]) * vv[3 * f[k] + c];
      out[3 * i + c] = static_cast<float>(s);
    }
  }
  const auto iv = vertices.id();
  std::vector<Face> used(static_cast<std::size_t>(p));
  for (std::int64_t i = 0; i < p; ++i) used[i] = faces[frags.face[i]];
  return vertices.tape().record(
      std::move(out), {vertices},
      [iv, used = std::move(used), bary = frags.bary](num::Tape& tape, std::uint32_t, const Tensor& g) {
        auto gv = tape.grad_buffer(iv);
        for (std::size_t i = 0; i < used.size(); ++i) {
          for (int k = 0; k < 3; ++k) {
            for (int c = 0; c < 3; ++c) gv[3 * used[i][k] + c] += bary[i][k] * g[3 * i + c];
          }
        }
      },
      "interpolate_points");
}

Var composite(num::Tape& tape, Var colors, const Fragments& frags, float background) {
  const std::int64_t h = frags.height, w = frags.width;
  if (frags.pixel.empty()) return tape.constant(Tensor({h, w, 3}, background));
  const std::int64_t p = static_cast<std::int64_t>(frags.pixel.size());
  if (colors.shape() != num::Shape{p, 3}) throw num::ShapeError("composite: colors must be P x 3");
  // Row p of the stacked table is the background color.
  std::vector<std::int32_t> rows(static_cast<std::size_t>(h * w), static_cast<std::int32_t>(p));
  for (std::int64_t i = 0; i < p; ++i) rows[frags.pixel[i]] = static_cast<std::int32_t>(i);
  const Var bg = tape.constant(Tensor({1, 3}, background));
  const Var table = num::concat(std::vector<Var>{colors, bg}, 0);
  return num::reshape(num::gather_rows(table, std::move(rows)), {h, w, 3});
}

}  // namespace tridiff::refine
