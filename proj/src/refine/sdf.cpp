#include "tridiff/refine/sdf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "mc_tables.hpp"

namespace tridiff::refine {

using num::Tensor;
using num::Var;

SdfGrid SdfGrid::zeros(int n, const Vec3& origin, double cell) {
  if (n < 2 || !(cell > 0)) throw std::invalid_argument("SdfGrid needs n >= 2 and a positive cell size");
  SdfGrid g;
  g.n = n;
  g.origin = origin;
  g.cell = cell;
  const std::int64_t count = static_cast<std::int64_t>(n) * n * n;
  g.values = Tensor({count});
  g.offsets = Tensor({count, 3});
  return g;
}

Vec3 SdfGrid::corner(std::size_t idx) const {
  const int k = static_cast<int>(idx % n), j = static_cast<int>((idx / n) % n), i = static_cast<int>(idx / n / n);
  const float* o = offsets.ptr() + 3 * idx;
  return lattice(i, j, k) + Vec3(o[0], o[1], o[2]);
}

void SdfGrid::validate() const {
  const std::int64_t count = static_cast<std::int64_t>(n) * n * n;
  if (n < 2 || !(cell > 0)) throw std::invalid_argument("SdfGrid needs n >= 2 and a positive cell size");
  if (values.shape() != num::Shape{count}) throw num::ShapeError("SdfGrid values must hold n^3 entries");
  if (offsets.shape() != num::Shape{count, 3}) throw num::ShapeError("SdfGrid offsets must be n^3 x 3");
}

void SdfGrid::clamp_offsets() {
  const float bound = static_cast<float>(0.5 * cell);
  for (std::size_t i = 0; i < offsets.numel(); ++i) offsets[i] = std::clamp(offsets[i], -bound, bound);
}

SdfGrid sample_sdf(const std::function<double(const Vec3&)>& fn, int n, double lo, double hi) {
  if (!(hi > lo)) throw std::invalid_argument("sample_sdf: empty range");
  SdfGrid g = SdfGrid::zeros(n, {lo, lo, lo}, (hi - lo) / (n - 1));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < n; ++k) g.values[g.index(i, j, k)] = static_cast<float>(fn(g.lattice(i, j, k)));
    }
  }
  return g;
}

namespace {

struct Box {
  Vec3 lo{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
          std::numeric_limits<double>::infinity()};
  Vec3 hi{-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
          -std::numeric_limits<double>::infinity()};
  void grow(const Vec3& p) {
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
    hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
  }
  void grow(const Box& b) {
    grow(b.lo);
    grow(b.hi);
  }
  double dist2(const Vec3& p) const {
    double d = 0;
    for (int a = 0; a < 3; ++a) {
      const double e = std::max({lo[a] - p[a], 0.0, p[a] - hi[a]});
      d += e * e;
    }
    return d;
  }
  bool hit(const Vec3& o, const Vec3& inv_dir) const {
    double t0 = 0, t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      double ta = (lo[a] - o[a]) * inv_dir[a], tb = (hi[a] - o[a]) * inv_dir[a];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    }
    return t0 <= t1;
  }
};

// Closest point on triangle abc to p (Ericson, Real-Time Collision Detection 5.1.5).
Vec3 closest_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = dot(ab, ap), d2 = dot(ac, ap);
  if (d1 <= 0 && d2 <= 0) return a;
  const Vec3 bp = p - b;
  const double d3 = dot(ab, bp), d4 = dot(ac, bp);
  if (d3 >= 0 && d4 <= d3) return b;
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) return a + ab * (d1 / (d1 - d3));
  const Vec3 cp = p - c;
  const double d5 = dot(ab, cp), d6 = dot(ac, cp);
  if (d6 >= 0 && d5 <= d6) return c;
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) return a + ac * (d2 / (d2 - d6));
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

// Moller-Trumbore; counts hits with t > 0.
bool ray_hits_triangle(const Vec3& o, const Vec3& d, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 e1 = b - a, e2 = c - a, pv = cross(d, e2);
  const double det = dot(e1, pv);
  if (std::abs(det) < 1e-14) return false;
  const double inv = 1.0 / det;
  const Vec3 tv = o - a;
  const double u = dot(tv, pv) * inv;
  if (u < 0 || u > 1) return false;
  const Vec3 qv = cross(tv, e1);
  const double v = dot(d, qv) * inv;
  if (v < 0 || u + v > 1) return false;
  return dot(e2, qv) * inv > 0;
}

class Bvh {
 public:
  explicit Bvh(const Mesh& mesh) : mesh_(mesh), order_(mesh.faces.size()) {
    std::iota(order_.begin(), order_.end(), 0);
    centroid_.reserve(mesh.faces.size());
    for (const Face& f : mesh.faces) {
      centroid_.push_back((mesh.vertices[f[0]] + mesh.vertices[f[1]] + mesh.vertices[f[2]]) / 3.0);
    }
    nodes_.emplace_back();
    build_into(0, 0, static_cast<int>(order_.size()));
  }

  double distance(const Vec3& p) const {
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> stack{0};
    while (!stack.empty()) {
      const Node& nd = nodes_[stack.back()];
      stack.pop_back();
      if (nd.box.dist2(p) >= best) continue;
      if (nd.count > 0) {
        for (int i = nd.start; i < nd.start + nd.count; ++i) {
          const Face& f = mesh_.faces[order_[i]];
          const Vec3 q = closest_on_triangle(p, mesh_.vertices[f[0]], mesh_.vertices[f[1]], mesh_.vertices[f[2]]);
          best = std::min(best, dot(q - p, q - p));
        }
      } else {
        const int l = nd.left, r = nd.left + 1;
        const double dl = nodes_[l].box.dist2(p), dr = nodes_[r].box.dist2(p);
        // Visit the nearer child first.
        if (dl < dr) {
          stack.push_back(r);
          stack.push_back(l);
        } else {
          stack.push_back(l);
          stack.push_back(r);
        }
      }
    }
    return std::sqrt(best);
  }

  int crossings(const Vec3& o, const Vec3& d) const {
    const Vec3 inv(1.0 / d.x, 1.0 / d.y, 1.0 / d.z);
    int hits = 0;
    std::vector<int> stack{0};
    while (!stack.empty()) {
      const Node& nd = nodes_[stack.back()];
      stack.pop_back();
      if (!nd.box.hit(o, inv)) continue;
      if (nd.count > 0) {
        for (int i = nd.start; i < nd.start + nd.count; ++i) {
          const Face& f = mesh_.faces[order_[i]];
          hits += ray_hits_triangle(o, d, mesh_.vertices[f[0]], mesh_.vertices[f[1]], mesh_.vertices[f[2]]);
        }
      } else {
        stack.push_back(nd.left);
        stack.push_back(nd.left + 1);
      }
    }
    return hits;
  }

 private:
  struct Node {
    Box box;
    int left = -1, start = 0, count = 0;
  };

  void build_into(int slot, int begin, int end) {
    Box box, cbox;
    for (int i = begin; i < end; ++i) {
      const Face& f = mesh_.faces[order_[i]];
      for (int k : f) box.grow(mesh_.vertices[k]);
      cbox.grow(centroid_[order_[i]]);
    }
    nodes_[slot].box = box;
    if (end - begin <= 4) {
      nodes_[slot].start = begin;
      nodes_[slot].count = end - begin;
      return;
    }
    const Vec3 ext = cbox.hi - cbox.lo;
    const int axis = ext.x >= ext.y && ext.x >= ext.z ? 0 : (ext.y >= ext.z ? 1 : 2);
    const int mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](int a, int b) { return centroid_[a][axis] < centroid_[b][axis]; });
    // Children are allocated adjacently so a node only stores its left index.
    const int left = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    nodes_.emplace_back();
    nodes_[slot].left = left;
    build_into(left, begin, mid);
    build_into(left + 1, mid, end);
  }

  const Mesh& mesh_;
  std::vector<int> order_;
  std::vector<Vec3> centroid_;
  std::vector<Node> nodes_;
};

}  // namespace

SdfGrid mesh_to_sdf(const Mesh& mesh, int resolution) {
  if (mesh.empty()) throw std::invalid_argument("mesh_to_sdf: empty mesh");
  if (resolution < 8) throw std::invalid_argument("mesh_to_sdf: resolution must be at least 8");
  mesh.validate();
  Box box;
  for (const Face& f : mesh.faces) {
    for (int k : f) box.grow(mesh.vertices[k]);
  }
  const Vec3 ext = box.hi - box.lo;
  const double extent = std::max({ext.x, ext.y, ext.z, 1e-6});
  // side = extent + 4 cells and cell = side / (n - 1).
  const double cell = extent / (resolution - 5);
  const Vec3 center = (box.lo + box.hi) * 0.5;
  const double half = 0.5 * cell * (resolution - 1);
  SdfGrid g = SdfGrid::zeros(resolution, center - Vec3(half, half, half), cell);

  const Bvh bvh(mesh);
  const Vec3 dirs[3] = {normalize({1.0, 0.1234, 0.0567}), normalize({-0.0711, 1.0, 0.1893}),
                        normalize({0.1571, -0.0933, -1.0})};
  const int n = resolution;
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < n; ++k) {
        const Vec3 p = g.lattice(i, j, k);
        const double d = bvh.distance(p);
        int inside_votes = 0;
        for (const Vec3& dir : dirs) inside_votes += bvh.crossings(p, dir) % 2;
        g.values[g.index(i, j, k)] = static_cast<float>(inside_votes >= 2 ? -d : d);
      }
    }
  }
  return g;
}

namespace {

// Cube corners (x, y, z) and edges as (corner, axis) in table numbering.
constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                               {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
constexpr int kEdgeBase[12] = {0, 1, 3, 0, 4, 5, 7, 4, 0, 1, 2, 3};
constexpr int kEdgeAxis[12] = {0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2};

struct McTopology {
  // Lattice endpoints (lower, upper) per output vertex.
  std::vector<std::array<std::size_t, 2>> ends;
  std::vector<Face> faces;
};

McTopology mc_topology(int n, const float* s) {
  McTopology topo;
  auto index = [n](int i, int j, int k) { return (static_cast<std::size_t>(i) * n + j) * static_cast<std::size_t>(n) + k; };
  std::unordered_map<std::size_t, int> vertex_of_edge;
  const std::size_t stride[3] = {static_cast<std::size_t>(n) * n, static_cast<std::size_t>(n), 1};
  for (int i = 0; i + 1 < n; ++i) {
    for (int j = 0; j + 1 < n; ++j) {
      for (int k = 0; k + 1 < n; ++k) {
        std::size_t corner[8];
        int cube = 0;
        for (int c = 0; c < 8; ++c) {
          corner[c] = index(i + kCorner[c][0], j + kCorner[c][1], k + kCorner[c][2]);
          if (s[corner[c]] < 0.0f) cube |= 1 << c;
        }
        if (mc_tables::kEdgeTable[cube] == 0) continue;
        const auto& tri = mc_tables::kTriTable[cube];
        for (int t = 0; tri[t] != -1; t += 3) {
          int ids[3];
          for (int q = 0; q < 3; ++q) {
            const int e = tri[t + q];
            const std::size_t lo = corner[kEdgeBase[e]];
            const std::size_t key = 3 * lo + static_cast<std::size_t>(kEdgeAxis[e]);
            auto [it, fresh] = vertex_of_edge.emplace(key, static_cast<int>(topo.ends.size()));
            if (fresh) topo.ends.push_back({lo, lo + stride[kEdgeAxis[e]]});
            ids[q] = it->second;
          }
          // The table winds triangles toward negative values; flip to face outward.
          topo.faces.push_back({ids[0], ids[2], ids[1]});
        }
      }
    }
  }
  return topo;
}

}  // namespace

Mesh marching_cubes(const SdfGrid& grid) {
  grid.validate();
  const McTopology topo = mc_topology(grid.n, grid.values.ptr());
  Mesh m;
  m.faces = topo.faces;
  m.vertices.reserve(topo.ends.size());
  for (const auto& [a, b] : topo.ends) {
    const double sa = grid.values[a], sb = grid.values[b];
    const double t = sa / (sa - sb);
    const Vec3 pa = grid.corner(a), pb = grid.corner(b);
    m.vertices.push_back(pa + (pb - pa) * t);
  }
  return m;
}

McVars marching_cubes(Var values, Var offsets, const SdfGrid& layout) {
  const std::int64_t count = static_cast<std::int64_t>(layout.n) * layout.n * layout.n;
  if (values.shape() != num::Shape{count} || offsets.shape() != num::Shape{count, 3}) {
    throw num::ShapeError("marching_cubes: values must be n^3 and offsets n^3 x 3");
  }
  McTopology topo = mc_topology(layout.n, values.value().ptr());
  McVars out;
  out.faces = std::move(topo.faces);
  if (out.faces.empty()) return out;

  const float* s = values.value().ptr();
  const float* off = offsets.value().ptr();
  auto position = [&](std::size_t idx) {
    const int k = static_cast<int>(idx % layout.n), j = static_cast<int>((idx / layout.n) % layout.n),
              i = static_cast<int>(idx / layout.n / layout.n);
    return layout.origin + Vec3(i, j, k) * layout.cell + Vec3(off[3 * idx], off[3 * idx + 1], off[3 * idx + 2]);
  };
  const std::int64_t nv = static_cast<std::int64_t>(topo.ends.size());
  Tensor verts({nv, 3});
  std::vector<float> t_of(static_cast<std::size_t>(nv));
  std::vector<Vec3> delta(static_cast<std::size_t>(nv));
  for (std::int64_t v = 0; v < nv; ++v) {
    const auto [a, b] = topo.ends[static_cast<std::size_t>(v)];
    const double sa = s[a], sb = s[b];
    const double t = sa / (sa - sb);
    const Vec3 pa = position(a), pb = position(b);
    const Vec3 p = pa + (pb - pa) * t;
    verts[3 * v] = static_cast<float>(p.x);
    verts[3 * v + 1] = static_cast<float>(p.y);
    verts[3 * v + 2] = static_cast<float>(p.z);
    t_of[static_cast<std::size_t>(v)] = static_cast<float>(t);
    delta[static_cast<std::size_t>(v)] = pb - pa;
  }
  const auto is = values.id(), io = offsets.id();
  out.vertices = values.tape().record(
      std::move(verts), {values, offsets},
      [is, io, ends = std::move(topo.ends), t_of = std::move(t_of), delta = std::move(delta)](
          num::Tape& tape, std::uint32_t, const Tensor& g) {
        const bool want_s = tape.requires_grad(is), want_o = tape.requires_grad(io);
        const float* sv = tape.value(is).ptr();
        std::span<float> gs, go;
        if (want_s) gs = tape.grad_buffer(is);
        if (want_o) go = tape.grad_buffer(io);
        for (std::size_t v = 0; v < ends.size(); ++v) {
          const auto [a, b] = ends[v];
          const double gx = g[3 * v], gy = g[3 * v + 1], gz = g[3 * v + 2];
          if (want_s) {
            const double sa = sv[a], sb = sv[b], den = (sa - sb) * (sa - sb);
            const double gd = gx * delta[v].x + gy * delta[v].y + gz * delta[v].z;
            gs[a] += static_cast<float>(gd * (-sb / den));
            gs[b] += static_cast<float>(gd * (sa / den));
          }
          if (want_o) {
            const double t = t_of[v];
            const double gv[3] = {gx, gy, gz};
            for (int c = 0; c < 3; ++c) {
              go[3 * a + c] += static_cast<float>((1.0 - t) * gv[c]);
              go[3 * b + c] += static_cast<float>(t * gv[c]);
            }
          }
        }
      },
      "marching_cubes");
  return out;
}

}  // namespace tridiff::refine
