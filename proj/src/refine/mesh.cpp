#include "tridiff/refine/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace tridiff::refine {

void Mesh::validate() const {
  const int n = static_cast<int>(vertices.size());
  for (const Face& f : faces) {
    for (int k = 0; k < 3; ++k) {
      if (f[k] < 0 || f[k] >= n) throw std::invalid_argument("mesh face index out of range");
    }
    if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) throw std::invalid_argument("mesh face repeats a vertex");
  }
  if (!colors.empty() && colors.size() != vertices.size()) {
    throw std::invalid_argument("mesh colors must match the vertex count");
  }
}

namespace {

Vec3 face_normal(const Vec3& a, const Vec3& b, const Vec3& c) { return cross(b - a, c - a); }

std::uint64_t edge_key(int a, int b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(static_cast<std::size_t>(n)) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(int a, int b) { parent[find(a)] = find(b); }
};

}  // namespace

Mesh icosphere(double radius, int subdivisions, const Vec3& center) {
  if (radius <= 0 || subdivisions < 0) throw std::invalid_argument("icosphere: bad radius or subdivision count");
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> v = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                         {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (auto& p : v) p = normalize(p);
  std::vector<Face> f = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                         {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
                         {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> mid;
    auto midpoint = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = mid.find(key);
      if (it != mid.end()) return it->second;
      v.push_back(normalize(v[a] + v[b]));
      const int id = static_cast<int>(v.size()) - 1;
      mid.emplace(key, id);
      return id;
    };
    std::vector<Face> next;
    next.reserve(f.size() * 4);
    for (const Face& tri : f) {
      const int a = midpoint(tri[0], tri[1]), b = midpoint(tri[1], tri[2]), c = midpoint(tri[2], tri[0]);
      next.push_back({tri[0], a, c});
      next.push_back({tri[1], b, a});
      next.push_back({tri[2], c, b});
      next.push_back({a, b, c});
    }
    f = std::move(next);
  }
  Mesh m;
  for (const auto& p : v) m.vertices.push_back(center + p * radius);
  for (Face tri : f) {
    const Vec3 n = face_normal(v[tri[0]], v[tri[1]], v[tri[2]]);
    if (dot(n, v[tri[0]] + v[tri[1]] + v[tri[2]]) < 0) std::swap(tri[1], tri[2]);
    m.faces.push_back(tri);
  }
  return m;
}

Mesh quad(const Vec3& center, const Vec3& u, const Vec3& v) {
  Mesh m;
  m.vertices = {center - u - v, center + u - v, center + u + v, center - u + v};
  m.faces = {{0, 1, 2}, {0, 2, 3}};
  return m;
}

Mesh merge(const Mesh& a, const Mesh& b) {
  Mesh m = a;
  const int off = static_cast<int>(a.vertices.size());
  m.vertices.insert(m.vertices.end(), b.vertices.begin(), b.vertices.end());
  for (const Face& f : b.faces) m.faces.push_back({f[0] + off, f[1] + off, f[2] + off});
  if (!a.colors.empty() && !b.colors.empty()) {
    m.colors.insert(m.colors.end(), b.colors.begin(), b.colors.end());
  } else {
    m.colors.clear();
  }
  return m;
}

int euler_characteristic(const Mesh& mesh) {
  std::set<int> used;
  std::set<std::pair<int, int>> edges;
  for (const Face& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      used.insert(f[k]);
      edges.insert(std::minmax(f[k], f[(k + 1) % 3]));
    }
  }
  return static_cast<int>(used.size()) - static_cast<int>(edges.size()) + static_cast<int>(mesh.faces.size());
}

bool is_watertight(const Mesh& mesh) {
  if (mesh.faces.empty()) return false;
  std::unordered_map<std::uint64_t, int> directed;
  for (const Face& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      if (++directed[edge_key(f[k], f[(k + 1) % 3])] > 1) return false;
    }
  }
  for (const auto& [key, count] : directed) {
    const int a = static_cast<int>(key >> 32), b = static_cast<int>(key & 0xffffffffu);
    if (!directed.count(edge_key(b, a))) return false;
  }
  return true;
}

double signed_volume(const Mesh& mesh) {
  double vol = 0;
  for (const Face& f : mesh.faces) {
    vol += dot(mesh.vertices[f[0]], cross(mesh.vertices[f[1]], mesh.vertices[f[2]]));
  }
  return vol / 6.0;
}

std::vector<int> face_components(const Mesh& mesh, int& count) {
  UnionFind uf(static_cast<int>(mesh.vertices.size()));
  for (const Face& f : mesh.faces) {
    uf.unite(f[0], f[1]);
    uf.unite(f[1], f[2]);
  }
  std::unordered_map<int, int> label;
  std::vector<int> out;
  out.reserve(mesh.faces.size());
  for (const Face& f : mesh.faces) {
    const int root = uf.find(f[0]);
    auto [it, fresh] = label.emplace(root, static_cast<int>(label.size()));
    out.push_back(it->second);
  }
  count = static_cast<int>(label.size());
  return out;
}

Mesh compact(const Mesh& mesh) {
  std::vector<int> remap(mesh.vertices.size(), -1);
  Mesh out;
  for (const Face& f : mesh.faces) {
    Face g;
    for (int k = 0; k < 3; ++k) {
      int& r = remap[f[k]];
      if (r < 0) {
        r = static_cast<int>(out.vertices.size());
        out.vertices.push_back(mesh.vertices[f[k]]);
        if (!mesh.colors.empty()) out.colors.push_back(mesh.colors[f[k]]);
      }
      g[k] = r;
    }
    out.faces.push_back(g);
  }
  return out;
}

Mesh remove_floaters(const Mesh& mesh) {
  int count = 0;
  const auto labels = face_components(mesh, count);
  if (count <= 1) return mesh;
  std::vector<std::size_t> sizes(static_cast<std::size_t>(count), 0);
  for (int l : labels) ++sizes[l];
  const int keep = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  Mesh kept;
  kept.vertices = mesh.vertices;
  kept.colors = mesh.colors;
  for (std::size_t i = 0; i < mesh.faces.size(); ++i) {
    if (labels[i] == keep) kept.faces.push_back(mesh.faces[i]);
  }
  return compact(kept);
}

namespace {

// Symmetric 4x4 quadric stored as its upper triangle.
struct Quadric {
  std::array<double, 10> q{};

  static Quadric plane(const Vec3& n, double d) {
    Quadric r;
    const double p[4] = {n.x, n.y, n.z, d};
    int k = 0;
    for (int i = 0; i < 4; ++i) {
      for (int j = i; j < 4; ++j) r.q[k++] = p[i] * p[j];
    }
    return r;
  }
  Quadric& operator+=(const Quadric& o) {
    for (int i = 0; i < 10; ++i) q[i] += o.q[i];
    return *this;
  }
  double error(const Vec3& v) const {
    const double x = v.x, y = v.y, z = v.z;
    return q[0] * x * x + 2 * q[1] * x * y + 2 * q[2] * x * z + 2 * q[3] * x + q[4] * y * y + 2 * q[5] * y * z +
           2 * q[6] * y + q[7] * z * z + 2 * q[8] * z + q[9];
  }
  // Minimizer of the quadric, or false when the system is near singular.
  bool optimum(Vec3& out) const {
    const double a = q[0], b = q[1], c = q[2], d = q[4], e = q[5], f = q[7];
    const double det = a * (d * f - e * e) - b * (b * f - c * e) + c * (b * e - c * d);
    const double scale = std::abs(a) + std::abs(d) + std::abs(f);
    if (std::abs(det) < 1e-9 * scale * scale * scale || scale == 0) return false;
    const double rx = -q[3], ry = -q[6], rz = -q[8];
    out.x = (rx * (d * f - e * e) - b * (ry * f - e * rz) + c * (ry * e - d * rz)) / det;
    out.y = (a * (ry * f - e * rz) - rx * (b * f - c * e) + c * (b * rz - ry * c)) / det;
    out.z = (a * (d * rz - ry * e) - b * (b * rz - ry * c) + rx * (b * e - c * d)) / det;
    return true;
  }
};

struct Candidate {
  double cost;
  int u, v;
  std::uint32_t ver_u, ver_v;
  Vec3 target;
  bool operator<(const Candidate& o) const { return cost > o.cost; }
};

class Decimator {
 public:
  explicit Decimator(const Mesh& mesh) : pos_(mesh.vertices), faces_(mesh.faces) {
    const std::size_t nv = pos_.size();
    alive_face_.assign(faces_.size(), true);
    alive_vertex_.assign(nv, true);
    version_.assign(nv, 0);
    incident_.resize(nv);
    quadric_.resize(nv);
    for (std::size_t i = 0; i < faces_.size(); ++i) {
      const Face& f = faces_[i];
      Vec3 n = face_normal(pos_[f[0]], pos_[f[1]], pos_[f[2]]);
      const double len = norm(n);
      if (len > 0) n = n / len;
      const Quadric k = Quadric::plane(n, -dot(n, pos_[f[0]]));
      for (int c = 0; c < 3; ++c) {
        incident_[f[c]].push_back(static_cast<int>(i));
        quadric_[f[c]] += k;
      }
    }
    alive_faces_ = faces_.size();
    for (std::size_t u = 0; u < nv; ++u) push_edges(static_cast<int>(u));
  }

  void run(std::size_t max_faces) {
    while (alive_faces_ > max_faces && !heap_.empty()) {
      const Candidate c = heap_.top();
      heap_.pop();
      if (!alive_vertex_[c.u] || !alive_vertex_[c.v] || version_[c.u] != c.ver_u || version_[c.v] != c.ver_v) continue;
      collapse(c.u, c.v, c.target);
    }
  }

  Mesh result() const {
    Mesh m;
    m.vertices = pos_;
    for (std::size_t i = 0; i < faces_.size(); ++i) {
      if (alive_face_[i]) m.faces.push_back(faces_[i]);
    }
    return compact(m);
  }

 private:
  std::set<int> neighbors(int u) const {
    std::set<int> out;
    for (int fi : incident_[u]) {
      if (!alive_face_[fi]) continue;
      for (int k : faces_[fi]) {
        if (k != u) out.insert(k);
      }
    }
    return out;
  }

  void push_edges(int u) {
    for (int w : neighbors(u)) {
      if (w == u) continue;
      Quadric q = quadric_[u];
      q += quadric_[w];
      Vec3 best;
      double cost;
      const Vec3 midpoint = (pos_[u] + pos_[w]) * 0.5;
      if (!q.optimum(best) || norm(best - midpoint) > norm(pos_[u] - pos_[w])) {
        const Vec3 cands[3] = {pos_[u], pos_[w], midpoint};
        best = cands[0];
        cost = q.error(best);
        for (const Vec3& p : cands) {
          if (q.error(p) < cost) {
            cost = q.error(p);
            best = p;
          }
        }
      } else {
        cost = q.error(best);
      }
      heap_.push({cost, u, w, version_[u], version_[w], best});
    }
  }

  void collapse(int u, int v, const Vec3& target) {
    std::vector<int> shared;
    for (int fi : incident_[u]) {
      if (!alive_face_[fi]) continue;
      const Face& f = faces_[fi];
      if (f[0] == v || f[1] == v || f[2] == v) shared.push_back(fi);
    }
    if (shared.empty() || alive_faces_ - shared.size() < 4) return;
    // Link condition: common neighbors are exactly the apexes of the shared faces.
    const auto nu = neighbors(u), nv = neighbors(v);
    std::size_t common = 0;
    for (int w : nu) common += nv.count(w);
    if (common != shared.size()) return;
    // Reject collapses that flip or degenerate a surviving face.
    for (int a : {u, v}) {
      for (int fi : incident_[a]) {
        if (!alive_face_[fi] || std::find(shared.begin(), shared.end(), fi) != shared.end()) continue;
        Face f = faces_[fi];
        const Vec3 before = face_normal(pos_[f[0]], pos_[f[1]], pos_[f[2]]);
        Vec3 p[3];
        for (int k = 0; k < 3; ++k) p[k] = (f[k] == u || f[k] == v) ? target : pos_[f[k]];
        const Vec3 after = face_normal(p[0], p[1], p[2]);
        const double la = norm(after), lb = norm(before);
        if (la < 1e-12 * (lb + 1e-30) || dot(before, after) < 0.2 * la * lb) return;
      }
    }
    for (int fi : shared) alive_face_[fi] = false;
    alive_faces_ -= shared.size();
    for (int fi : incident_[v]) {
      if (!alive_face_[fi]) continue;
      for (int& k : faces_[fi]) {
        if (k == v) k = u;
      }
      incident_[u].push_back(fi);
    }
    incident_[v].clear();
    alive_vertex_[v] = false;
    pos_[u] = target;
    quadric_[u] += quadric_[v];
    ++version_[u];
    for (int w : neighbors(u)) ++version_[w];
    push_edges(u);
    for (int w : neighbors(u)) push_edges(w);
  }

  std::vector<Vec3> pos_;
  std::vector<Face> faces_;
  std::vector<bool> alive_face_, alive_vertex_;
  std::vector<std::uint32_t> version_;
  std::vector<std::vector<int>> incident_;
  std::vector<Quadric> quadric_;
  std::priority_queue<Candidate> heap_;
  std::size_t alive_faces_ = 0;
};

}  // namespace

Mesh decimate(const Mesh& mesh, std::size_t max_faces) {
  mesh.validate();
  if (mesh.faces.size() <= max_faces) return mesh;
  Decimator d(mesh);
  d.run(max_faces);
  return d.result();
}

Mesh smooth(const Mesh& mesh, const SmoothOptions& opts) {
  if (opts.laplacian_weight < 0 || opts.offset_weight < 0 || opts.laplacian_weight + opts.offset_weight <= 0) {
    throw std::invalid_argument("smooth: weights must be non-negative and not both zero");
  }
  std::vector<std::set<int>> adj(mesh.vertices.size());
  for (const Face& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      adj[f[k]].insert(f[(k + 1) % 3]);
      adj[f[k]].insert(f[(k + 2) % 3]);
    }
  }
  const double wl = opts.laplacian_weight, wo = opts.offset_weight;
  Mesh out = mesh;
  std::vector<Vec3> next(mesh.vertices.size());
  for (int it = 0; it < opts.iterations; ++it) {
    for (std::size_t i = 0; i < next.size(); ++i) {
      if (adj[i].empty()) {
        next[i] = out.vertices[i];
        continue;
      }
      Vec3 avg;
      for (int j : adj[i]) avg += out.vertices[j];
      avg = avg / static_cast<double>(adj[i].size());
      next[i] = (avg * wl + mesh.vertices[i] * wo) / (wl + wo);
    }
    out.vertices = next;
  }
  return out;
}

namespace {

int to_byte(double c) { return static_cast<int>(std::lround(std::clamp(c, 0.0, 1.0) * 255.0)); }

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(9);
  return out;
}

}  // namespace

void write_obj(const std::filesystem::path& path, const Mesh& mesh) {
  mesh.validate();
  auto out = open_out(path);
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Vec3& p = mesh.vertices[i];
    out << "v " << p.x << ' ' << p.y << ' ' << p.z;
    if (!mesh.colors.empty()) {
      const Vec3& c = mesh.colors[i];
      out << ' ' << c.x << ' ' << c.y << ' ' << c.z;
    }
    out << '\n';
  }
  for (const Face& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void write_ply(const std::filesystem::path& path, const Mesh& mesh) {
  mesh.validate();
  auto out = open_out(path);
  out << "ply\nformat ascii 1.0\nelement vertex " << mesh.vertices.size()
      << "\nproperty float x\nproperty float y\nproperty float z\n";
  if (!mesh.colors.empty()) out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "element face " << mesh.faces.size() << "\nproperty list uchar int vertex_indices\nend_header\n";
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Vec3& p = mesh.vertices[i];
    out << p.x << ' ' << p.y << ' ' << p.z;
    if (!mesh.colors.empty()) {
      const Vec3& c = mesh.colors[i];
      out << ' ' << to_byte(c.x) << ' ' << to_byte(c.y) << ' ' << to_byte(c.z);
    }
    out << '\n';
  }
  for (const Face& f : mesh.faces) out << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Mesh read_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  Mesh m;
  bool all_colored = true;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "v") {
      Vec3 p, c;
      if (!(ss >> p.x >> p.y >> p.z)) throw std::runtime_error("malformed vertex in " + path.string());
      if (ss >> c.x >> c.y >> c.z) {
        m.colors.push_back(c);
      } else {
        all_colored = false;
      }
      m.vertices.push_back(p);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ss >> tok) {
        const int i = std::stoi(tok.substr(0, tok.find('/')));
        idx.push_back(i > 0 ? i - 1 : static_cast<int>(m.vertices.size()) + i);
      }
      if (idx.size() < 3) throw std::runtime_error("face with fewer than 3 vertices in " + path.string());
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) m.faces.push_back({idx[0], idx[k], idx[k + 1]});
    }
  }
  if (!all_colored) m.colors.clear();
  m.validate();
  return m;
}

}  // namespace tridiff::refine
