#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "tridiff/numerics/ops.hpp"
#include "tridiff/refine/refine.hpp"
#include "tridiff/synthdata/synthdata.hpp"

using namespace tridiff;
using namespace tridiff::refine;
using num::Tensor;
using triplane::Camera;

namespace {

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.numel() * sizeof(float)) == 0;
}

bool same_params(const HashGridTexture& a, const HashGridTexture& b) {
  const auto pa = a.params(), pb = b.params();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!same_bits(*pa[i], *pb[i])) return false;
  }
  return true;
}

// Axis-aligned box [-h, h]^3 as 12 outward-facing triangles.
Mesh box_mesh(double h) {
  Mesh m;
  for (int i = 0; i < 8; ++i) m.vertices.push_back({i & 1 ? h : -h, i & 2 ? h : -h, i & 4 ? h : -h});
  m.faces = {{0, 2, 1}, {1, 2, 3}, {4, 5, 6}, {5, 7, 6}, {0, 1, 4}, {1, 5, 4},
             {2, 6, 3}, {3, 6, 7}, {0, 4, 2}, {2, 4, 6}, {1, 3, 5}, {3, 7, 5}};
  return m;
}

// Faces sharing a vertex are connected; plain BFS as an independent oracle.
std::vector<std::size_t> component_sizes_bfs(const Mesh& m) {
  std::map<int, std::vector<int>> by_vertex;
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    for (int v : m.faces[f]) by_vertex[v].push_back(static_cast<int>(f));
  }
  std::vector<bool> seen(m.faces.size(), false);
  std::vector<std::size_t> sizes;
  for (std::size_t s = 0; s < m.faces.size(); ++s) {
    if (seen[s]) continue;
    std::vector<int> queue{static_cast<int>(s)};
    seen[s] = true;
    std::size_t count = 0;
    while (!queue.empty()) {
      const int f = queue.back();
      queue.pop_back();
      ++count;
      for (int v : m.faces[f]) {
        for (int g : by_vertex[v]) {
          if (!seen[g]) {
            seen[g] = true;
            queue.push_back(g);
          }
        }
      }
    }
    sizes.push_back(count);
  }
  return sizes;
}

HashGridConfig tiny_texture() {
  HashGridConfig c;
  c.levels = 4;
  c.log2_table = 10;
  c.base_resolution = 2;
  c.growth = 2.0;
  c.hidden = 16;
  return c;
}

Camera front_camera(int res) {
  Camera c;
  c.width = c.height = res;
  return c;
}

Tensor solid_image(int res, float r, float g, float b) {
  Tensor img({res, res, 3});
  for (int p = 0; p < res * res; ++p) {
    img[3 * p] = r;
    img[3 * p + 1] = g;
    img[3 * p + 2] = b;
  }
  return img;
}

double mean_abs(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::abs(static_cast<double>(a[i]) - b[i]);
  return s / static_cast<double>(a.numel());
}

// Quad filling the whole front view.
RefineState quad_state(std::uint64_t seed) {
  return RefineState::from_mesh(quad({0, 0, 0}, {1.2, 0, 0}, {0, 1.2, 0}), tiny_texture(), seed);
}

// Returns a fixed prediction and records what it was shown.
class SpyScore final : public ScoreModel {
 public:
  enum class Reply { Injected, Nan, Analytic };
  SpyScore(Reply reply, ScoreMode mode, std::shared_ptr<const LatentCodec> codec = nullptr, Tensor mean = {})
      : reply_(reply), mode_(mode), codec_(std::move(codec)), mean_(std::move(mean)), sched_(diffusion::build_schedule()) {}

  Tensor predict(const Tensor& x_t, int t, const diffusion::CondEmbedding& e) const override {
    return predict_view(x_t, t, e, {});
  }
  Tensor predict_view(const Tensor& x_t, int t, const diffusion::CondEmbedding&, const ViewContext& view) const override {
    if (view.coarse) coarse_seen.push_back(*view.coarse);
    if (reply_ == Reply::Nan) return Tensor(x_t.shape(), NAN);
    if (reply_ == Reply::Analytic) return gaussian_epsilon(x_t, mean_, 0.0, t, sched_);
    // Replays the step's documented draw order: t, then eps, from Rng(seed).
    num::Rng rng(next_seed);
    const int t_again = diffusion::sample_sds_timestep(rng, sched_.T);
    REQUIRE(t_again == t);
    return rng.normal_tensor(x_t.shape());
  }
  ScoreMode mode() const override { return mode_; }
  const diffusion::NoiseSchedule& schedule() const override { return sched_; }
  const LatentCodec* codec() const override { return codec_.get(); }

  std::uint64_t next_seed = 0;
  mutable std::vector<Tensor> coarse_seen;

 private:
  Reply reply_;
  ScoreMode mode_;
  std::shared_ptr<const LatentCodec> codec_;
  Tensor mean_;
  diffusion::NoiseSchedule sched_;
};

}  // namespace

TEST_CASE("mesh topology helpers") {
  const Mesh s = icosphere(0.5, 2);
  CHECK(s.faces.size() == 320u);
  CHECK(is_watertight(s));
  CHECK(euler_characteristic(s) == 2);
  CHECK(signed_volume(s) > 0);
  CHECK(euler_characteristic(box_mesh(0.3)) == 2);
  CHECK(is_watertight(box_mesh(0.3)));
  CHECK(signed_volume(box_mesh(0.5)) == doctest::Approx(1.0));
  const Mesh q = quad({0, 0, 0}, {1, 0, 0}, {0, 1, 0});
  CHECK_FALSE(is_watertight(q));
  CHECK(euler_characteristic(q) == 1);
  Mesh bad = q;
  bad.faces.push_back({0, 0, 1});
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("remove_floaters") {
  const Mesh sphere = icosphere(0.5, 2);
  SUBCASE("single component is unchanged") {
    const Mesh out = remove_floaters(sphere);
    CHECK(out.faces == sphere.faces);
    CHECK(out.vertices == sphere.vertices);
  }
  SUBCASE("a distant speck is removed") {
    const Mesh speck = quad({3, 3, 3}, {0.01, 0, 0}, {0, 0.01, 0});
    const Mesh out = remove_floaters(merge(sphere, speck));
    CHECK(out.faces.size() == sphere.faces.size());
    CHECK(is_watertight(out));
    for (const auto& v : out.vertices) CHECK(norm(v) < 0.6);
  }
  SUBCASE("largest component agrees with a BFS oracle") {
    num::Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
      Mesh m;
      const int parts = 2 + static_cast<int>(rng.uniform_int(4));
      for (int p = 0; p < parts; ++p) {
        const Vec3 c(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
        // Components of distinct sizes: subdivision level or a quad.
        Mesh part = p % 3 == 2 ? quad(c, {0.1, 0, 0}, {0, 0.1, 0})
                               : icosphere(0.1, static_cast<int>(rng.uniform_int(3)), c + Vec3(20.0 * p, 0, 0));
        m = merge(m, part);
      }
      int count = 0;
      face_components(m, count);
      const auto sizes = component_sizes_bfs(m);
      CHECK(count == static_cast<int>(sizes.size()));
      const Mesh out = remove_floaters(m);
      CHECK(out.faces.size() == *std::max_element(sizes.begin(), sizes.end()));
      int after = 0;
      face_components(out, after);
      CHECK(after == 1);
    }
  }
}

TEST_CASE("mesh_to_sdf") {
  SUBCASE("icosphere matches the analytic sphere distance") {
    const SdfGrid g = mesh_to_sdf(icosphere(0.5, 4), 32);
    double worst = 0;
    for (int i = 0; i < g.n; ++i)
      for (int j = 0; j < g.n; ++j)
        for (int k = 0; k < g.n; ++k) {
          const Vec3 p = g.lattice(i, j, k);
          worst = std::max(worst, std::abs(g.values[g.index(i, j, k)] - (norm(p) - 0.5)));
        }
    INFO("worst error ", worst, " cell ", g.cell);
    CHECK(worst < 1.5 * g.cell);
    // Boundary lattice points are outside, the center inside.
    CHECK(g.values[g.index(0, 0, 0)] > 0);
    CHECK(g.values[g.index(16, 16, 16)] < 0);
  }
  SUBCASE("a lattice point on a mesh vertex has zero distance") {
    // A cube's bounding-box corner lands on lattice point (2, 2, 2).
    const SdfGrid g = mesh_to_sdf(box_mesh(0.4), 16);
    CHECK(norm(g.lattice(2, 2, 2) - Vec3(-0.4, -0.4, -0.4)) < 1e-9);
    CHECK(std::abs(g.values[g.index(2, 2, 2)]) < 1e-4);
  }
  SUBCASE("desk and full-size resolutions") {
    CHECK(mesh_to_sdf(box_mesh(0.4), 32).n == 32);
    const SdfGrid big = mesh_to_sdf(box_mesh(0.4), 128);
    CHECK(big.values.numel() == 128u * 128u * 128u);
    CHECK(big.values[big.index(64, 64, 64)] < 0);
  }
  CHECK_THROWS_AS(mesh_to_sdf(Mesh{}, 32), std::invalid_argument);
}

TEST_CASE("marching_cubes") {
  SUBCASE("sphere at 32^3") {
    const double r = 0.6;
    const SdfGrid g = sample_sdf([r](const Vec3& p) { return norm(p) - r; }, 32, -1.0, 1.0);
    const Mesh m = marching_cubes(g);
    CHECK(is_watertight(m));
    CHECK(euler_characteristic(m) == 2);
    double worst = 0;
    for (const auto& v : m.vertices) worst = std::max(worst, std::abs(norm(v) - r));
    CHECK(worst < std::sqrt(3.0) * g.cell);
    CHECK(signed_volume(m) == doctest::Approx(4.0 / 3.0 * M_PI * r * r * r).epsilon(0.03));
  }
  SUBCASE("one negative corner gives one triangle") {
    SdfGrid g = SdfGrid::zeros(2, {0, 0, 0}, 1.0);
    for (std::size_t i = 0; i < 8; ++i) g.values[i] = 1.0f;
    g.values[0] = -1.0f;
    const Mesh m = marching_cubes(g);
    REQUIRE(m.faces.size() == 1u);
    for (const auto& v : m.vertices) CHECK(norm(v) == doctest::Approx(0.5));
  }
  SUBCASE("no zero crossing gives an empty mesh") {
    const SdfGrid g = sample_sdf([](const Vec3&) { return 1.0; }, 8, -1, 1);
    CHECK(marching_cubes(g).empty());
    num::Tape tape;
    CHECK(marching_cubes(tape.param(g.values), tape.param(g.offsets), g).empty());
  }
  SUBCASE("offsets move vertices") {
    SdfGrid g = SdfGrid::zeros(2, {0, 0, 0}, 1.0);
    for (std::size_t i = 0; i < 8; ++i) g.values[i] = 1.0f;
    g.values[0] = -1.0f;
    for (std::size_t i = 0; i < g.offsets.numel(); ++i) g.offsets[i] = 0.9f;
    g.clamp_offsets();
    CHECK(g.offsets[0] == 0.5f);
    const Mesh m = marching_cubes(g);
    for (const auto& v : m.vertices) CHECK(v.x + v.y + v.z == doctest::Approx(0.5 + 1.5));
  }
  SUBCASE("vertex gradients match finite differences on random cells") {
    num::Rng rng(17);
    const SdfGrid layout = SdfGrid::zeros(2, {-0.5, -0.5, -0.5}, 1.0);
    int checked = 0;
    while (checked < 20) {
      Tensor values({8});
      bool neg = false, pos = false;
      for (std::size_t i = 0; i < 8; ++i) {
        const float mag = static_cast<float>(rng.uniform(0.2, 1.0));
        values[i] = rng.uniform() < 0.5 ? -mag : mag;
        neg = neg || values[i] < 0;
        pos = pos || values[i] > 0;
      }
      if (!neg || !pos) continue;
      const Tensor offsets = testing::random_tensor(rng, {8, 3}, -0.3f, 0.3f);
      const double err = testing::gradcheck(
          [&](num::Tape&, std::span<const num::Var> in) { return marching_cubes(in[0], in[1], layout).vertices; },
          {values, offsets}, 100 + checked);
      CHECK(err < 1e-3);
      ++checked;
    }
  }
}

TEST_CASE("decimate and smooth") {
  const Mesh s = icosphere(0.5, 4);
  const Mesh d = decimate(s, 1000);
  CHECK(d.faces.size() <= 1000u);
  CHECK(d.faces.size() > 500u);
  CHECK(is_watertight(d));
  CHECK(euler_characteristic(d) == 2);
  for (const auto& v : d.vertices) CHECK(std::abs(norm(v) - 0.5) < 0.03);
  CHECK(decimate(s, 10000).faces == s.faces);

  const Mesh held = smooth(d, {10, 1.0, 1e6});
  for (std::size_t i = 0; i < d.vertices.size(); ++i) CHECK(norm(held.vertices[i] - d.vertices[i]) < 1e-4);
  const Mesh smoothed = smooth(d, {10, 1.0, 1.0});
  CHECK(smoothed.faces == d.faces);
  CHECK(euler_characteristic(smoothed) == 2);
  CHECK_THROWS_AS(smooth(d, {1, 0.0, 0.0}), std::invalid_argument);
}

TEST_CASE("OBJ and PLY export") {
  const auto dir = std::filesystem::temp_directory_path() / "tridiff_refine_io";
  std::filesystem::remove_all(dir);
  Mesh m = icosphere(0.5, 1);
  for (std::size_t i = 0; i < m.vertices.size(); ++i) m.colors.push_back({0.1, 0.5, static_cast<double>(i % 2)});
  write_obj(dir / "m.obj", m);
  const Mesh back = read_obj(dir / "m.obj");
  CHECK(back.faces == m.faces);
  REQUIRE(back.colors.size() == m.colors.size());
  for (std::size_t i = 0; i < m.vertices.size(); ++i) {
    CHECK(norm(back.vertices[i] - m.vertices[i]) < 1e-6);
    CHECK(norm(back.colors[i] - m.colors[i]) < 1e-6);
  }
  write_ply(dir / "m.ply", m);
  std::ifstream in(dir / "m.ply");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string ply = ss.str();
  CHECK(ply.find("element vertex " + std::to_string(m.vertices.size())) != std::string::npos);
  CHECK(ply.find("element face " + std::to_string(m.faces.size())) != std::string::npos);
  CHECK(ply.find("property uchar red") != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("hash_lookup") {
  num::Rng rng(3);
  SUBCASE("zero tables and zero-bias head give mid gray") {
    HashGridTexture tex = HashGridTexture::create({}, rng);
    tex.table.fill(0.0f);
    const Tensor rgb = hash_lookup(tex, testing::random_tensor(rng, {7, 3}));
    for (float v : rgb.data()) CHECK(v == 0.5f);
  }
  SUBCASE("deterministic and bounded") {
    HashGridTexture tex = HashGridTexture::create({}, rng);
    tex.table = testing::random_tensor(rng, tex.table.shape());
    Tensor pts = testing::random_tensor(rng, {2, 3});
    for (int c = 0; c < 3; ++c) pts[3 + c] = pts[c];
    const Tensor rgb = hash_lookup(tex, pts);
    for (int c = 0; c < 3; ++c) CHECK(rgb[c] == rgb[3 + c]);
    const Tensor many = hash_lookup(tex, testing::random_tensor(rng, {200, 3}, -1.5f, 1.5f));
    for (float v : many.data()) CHECK((v >= 0.0f && v <= 1.0f));
  }
  SUBCASE("gradients wrt table entries") {
    const HashGridConfig cfg = tiny_texture();
    for (int trial = 0; trial < 20; ++trial) {
      HashGridTexture tex = HashGridTexture::create(cfg, rng);
      const Tensor table = testing::random_tensor(rng, tex.table.shape());
      const Tensor pts = testing::random_tensor(rng, {4, 3}, -0.95f, 0.95f);
      const double err = testing::gradcheck(
          [&](num::Tape& tape, std::span<const num::Var> in) {
            HashGridVars v = bind(tape, tex, false);
            v.table = in[0];
            return hash_lookup(v, cfg, tape.constant(pts));
          },
          {table}, 200 + trial, 1e-2);
      CHECK(err < 1e-3);
    }
  }
  SUBCASE("gradients wrt positions away from cell faces") {
    const HashGridConfig cfg = tiny_texture();
    HashGridTexture tex = HashGridTexture::create(cfg, rng);
    tex.table = testing::random_tensor(rng, tex.table.shape());
    int checked = 0;
    while (checked < 20) {
      const Tensor pts = testing::random_tensor(rng, {1, 3}, -0.9f, 0.9f);
      bool clear = true;
      for (int l = 0; l < cfg.levels; ++l) {
        for (int a = 0; a < 3; ++a) {
          const double u = (pts[a] + 1.0) / 2.0 * cfg.resolution(l);
          const double f = u - std::floor(u);
          clear = clear && std::min(f, 1.0 - f) > 0.01;
        }
      }
      if (!clear) continue;
      const double err = testing::gradcheck(
          [&](num::Tape& tape, std::span<const num::Var> in) { return hash_encode(tape.constant(tex.table), in[0], cfg); },
          {pts}, 300 + checked, 1e-4);
      CHECK(err < 1e-3);
      ++checked;
    }
  }
}

TEST_CASE("render_refined") {
  SUBCASE("constant red texture on a sphere") {
    RefineState s = RefineState::from_mesh(icosphere(0.5, 3), tiny_texture(), 1);
    s.texture.table.fill(0.0f);
    s.texture.head.biases.back() = Tensor({3}, std::vector<float>{20.0f, -20.0f, -20.0f});
    const Tensor img = render_refined(s, front_camera(32));
    int red = 0, white = 0;
    for (int p = 0; p < 32 * 32; ++p) {
      const float r = img[3 * p], g = img[3 * p + 1], b = img[3 * p + 2];
      red += r > 0.99f && g < 0.01f && b < 0.01f;
      white += r == 1.0f && g == 1.0f && b == 1.0f;
    }
    CHECK(red + white == 32 * 32);
    CHECK(red > 100);
    CHECK(img[3 * (16 * 32 + 16)] > 0.99f);
    CHECK(img[3 * (16 * 32 + 16) + 1] < 0.01f);
  }
  SUBCASE("silhouette matches the analytic sphere render within one pixel") {
    const double r = 0.5;
    RefineState s = RefineState::from_mesh(icosphere(r, 4), tiny_texture(), 1);
    s.texture.table.fill(0.0f);
    s.texture.head.biases.back() = Tensor({3}, std::vector<float>{-20.0f, -20.0f, -20.0f});
    for (double az : {0.0, 70.0}) {
      Camera cam = front_camera(64);
      cam.azimuth_deg = az;
      cam.elevation_deg = 20;
      const Tensor ours = render_refined(s, cam);
      const Tensor gt = synth::render_gt(synth::make_primitive(synth::Kind::Sphere, {r, 0, 0}, "red"), cam);
      auto covered = [](const Tensor& img, int row, int col) {
        if (row < 0 || col < 0 || row >= 64 || col >= 64) return false;
        const int p = row * 64 + col;
        return !(img[3 * p] == 1.0f && img[3 * p + 1] == 1.0f && img[3 * p + 2] == 1.0f);
      };
      auto near = [&](const Tensor& img, int row, int col, bool want) {
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc)
            if (covered(img, row + dr, col + dc) == want) return true;
        return false;
      };
      int mismatched = 0;
      for (int row = 0; row < 64; ++row) {
        for (int col = 0; col < 64; ++col) {
          const bool a = covered(ours, row, col), b = covered(gt, row, col);
          if (a == b) continue;
          ++mismatched;
          CHECK(near(gt, row, col, a));
        }
      }
      CHECK(mismatched < 64);
    }
  }
  SUBCASE("texture gradient matches finite differences") {
    RefineState s = quad_state(2);
    num::Rng rng(8);
    const Tensor table = testing::random_tensor(rng, s.texture.table.shape());
    const Camera cam = front_camera(8);
    const double err = testing::gradcheck(
        [&](num::Tape& tape, std::span<const num::Var> in) {
          HashGridVars v = bind(tape, s.texture, false);
          v.table = in[0];
          const Tensor verts({4, 3}, std::vector<float>{-1.2f, -1.2f, 0, 1.2f, -1.2f, 0, 1.2f, 1.2f, 0, -1.2f, 1.2f, 0});
          const num::Var vv = tape.constant(verts);
          const Fragments f = rasterize(verts, s.surface.faces, cam);
          return composite(tape, hash_lookup(v, s.texture.config, interpolate_points(vv, s.surface.faces, f)), f);
        },
        {table}, 9);
    CHECK(err < 1e-2);
  }
  SUBCASE("surface points depend linearly on the vertices") {
    const Mesh sphere = icosphere(0.5, 1);
    const Camera cam = front_camera(16);
    Tensor verts({static_cast<std::int64_t>(sphere.vertices.size()), 3});
    for (std::size_t i = 0; i < sphere.vertices.size(); ++i) {
      for (int c = 0; c < 3; ++c) verts[3 * i + c] = static_cast<float>(sphere.vertices[i][c]);
    }
    const Fragments f = rasterize(verts, sphere.faces, cam);
    REQUIRE(!f.pixel.empty());
    const double err = testing::gradcheck(
        [&](num::Tape&, std::span<const num::Var> in) { return interpolate_points(in[0], sphere.faces, f); }, {verts}, 4);
    CHECK(err < 1e-3);
  }
  SUBCASE("empty surface renders background") {
    RefineState s = RefineState::from_grid(sample_sdf([](const Vec3&) { return 1.0; }, 8, -1, 1), tiny_texture(), 1);
    const Tensor img = render_refined(s, front_camera(8));
    for (float v : img.data()) CHECK(v == 1.0f);
  }
}

TEST_CASE("texture_distill_init") {
  RefineState s = RefineState::from_mesh(icosphere(0.5, 3), tiny_texture(), 4);
  // Stage-1 renders of a uniformly green object: the sphere's silhouette in green.
  std::vector<ReferenceView> views;
  for (double az : {0.0, 90.0, 180.0, 270.0}) {
    Camera cam = front_camera(32);
    cam.azimuth_deg = az;
    cam.elevation_deg = 15;
    const Fragments f = rasterize(s.surface.vertices, s.surface.faces, cam);
    Tensor img({32, 32, 3}, 1.0f);
    for (int p : f.pixel) {
      img[3 * p] = 0.0f;
      img[3 * p + 2] = 0.0f;
    }
    views.push_back({cam, img});
  }
  SUBCASE("zero iterations leave the state unchanged") {
    const RefineState before = s;
    DistillOptions opts;
    opts.iters = 0;
    CHECK(texture_distill_init(s, views, opts).empty());
    CHECK(same_params(before.texture, s.texture));
  }
  SUBCASE("converges to green") {
    DistillOptions opts;
    opts.iters = 300;
    const auto losses = texture_distill_init(s, views, opts);
    CHECK(losses.back() < losses.front());
    for (const auto& v : views) {
      const Tensor img = render_refined(s, v.camera);
      double err = 0;
      int n = 0;
      for (int p = 0; p < 32 * 32; ++p) {
        if (v.image[3 * p] == 1.0f) continue;
        err += std::abs(img[3 * p]) + std::abs(img[3 * p + 1] - 1.0) + std::abs(img[3 * p + 2]);
        n += 3;
      }
      CHECK(err / n < 0.05);
    }
  }
  CHECK(DistillOptions{}.iters == 512);
  views.pop_back();
  CHECK_THROWS_AS(texture_distill_init(s, views), std::invalid_argument);
}

TEST_CASE("prompt decoration") {
  CHECK(view_direction(0) == "front");
  CHECK(view_direction(60) == "front");
  CHECK(view_direction(-90) == "side");
  CHECK(view_direction(119) == "side");
  CHECK(view_direction(180) == "back");
  CHECK(view_direction(-150) == "back");
  CHECK(view_direction(330) == "front");
  CHECK(decorate_prompt("a red sphere", 200) ==
        "a red sphere, back view, best quality, extremely detailed, masterpiece, high resolution, high quality");
  CHECK(decorate_prompt("a red sphere", 10, "") == "a red sphere, front view");
  CHECK(std::string(kNegativePrompt) ==
        "blur, lowres, cropped, low quality, worst quality, ugly, dark, shadow, oversaturated");
}

TEST_CASE("SDS on a textured quad with the analytic oracle") {
  const auto sched = diffusion::build_schedule();
  const int res = 32;
  const Camera cam = front_camera(res);
  const Tensor blue = solid_image(res, 0.0f, 0.0f, 1.0f);
  const auto e = diffusion::embed_caption("a blue quad");
  SdsOptions opts;
  opts.resolution = res;

  auto run = [&](RefineState& s, const ScoreModel& score, int iters, bool latent) {
    std::vector<double> checkpoints{mean_abs(render_refined(s, cam), blue)};
    for (int it = 0; it < iters; ++it) {
      const SdsStep step = latent ? sds_latent_step(s, score, e, opts, 1000 + it, &cam)
                                  : sds_pixel_step(s, score, e, opts, 1000 + it, &cam);
      REQUIRE(step.applied);
      CHECK((step.t >= 20 && step.t <= 980));
      if ((it + 1) % 50 == 0) checkpoints.push_back(mean_abs(render_refined(s, cam), blue));
    }
    return checkpoints;
  };
  auto monotone = [](const std::vector<double>& c) {
    for (std::size_t i = 1; i < c.size(); ++i) {
      if (c[i] > c[i - 1] + 0.005) return false;
    }
    return true;
  };

  SUBCASE("latent space through the average-pool codec, 800 iterations") {
    auto codec = std::make_shared<AvgPoolCodec>(4);
    const AnalyticGaussianScore score(codec->encode(blue), 0.0, sched, ScoreMode::Latent, codec);
    RefineState s = quad_state(11);
    const auto c = run(s, score, 800, true);
    INFO("mean abs error every 50 steps: ", c.front(), " -> ", c.back());
    CHECK(monotone(c));
    CHECK(c.back() < 0.1);
  }
  SUBCASE("latent space through the identity codec, 300 iterations") {
    auto codec = std::make_shared<IdentityCodec>();
    const AnalyticGaussianScore score(blue, 0.0, sched, ScoreMode::Latent, codec);
    RefineState s = quad_state(12);
    const auto c = run(s, score, 300, true);
    CHECK(monotone(c));
    CHECK(c.back() < 0.1);
  }
  SUBCASE("pixel space, 400 iterations") {
    const AnalyticGaussianScore score(blue, 0.0, sched, ScoreMode::PixelSuperRes);
    RefineState s = quad_state(13);
    const auto c = run(s, score, 400, false);
    CHECK(monotone(c));
    CHECK(c.back() < 0.1);
  }
}

TEST_CASE("SDS no-op and safety properties") {
  const Camera cam = front_camera(16);
  const auto e = diffusion::embed_caption("a quad");
  SdsOptions opts;
  opts.resolution = 16;

  SUBCASE("returning the injected noise leaves parameters bit-identical") {
    for (bool latent : {true, false}) {
      SpyScore spy(SpyScore::Reply::Injected, latent ? ScoreMode::Latent : ScoreMode::PixelSuperRes,
                   latent ? std::make_shared<AvgPoolCodec>(4) : nullptr);
      RefineState s = quad_state(21);
      const RefineState before = s;
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        spy.next_seed = seed;
        const SdsStep step = latent ? sds_latent_step(s, spy, e, opts, seed, &cam) : sds_pixel_step(s, spy, e, opts, seed, &cam);
        CHECK_FALSE(step.applied);
        CHECK(step.skipped == "zero residual");
      }
      CHECK(same_params(before.texture, s.texture));
    }
  }
  SUBCASE("zero weight leaves parameters bit-identical, on a grid too") {
    RefineState s = RefineState::from_grid(sample_sdf([](const Vec3& p) { return norm(p) - 0.5; }, 12, -1, 1),
                                           tiny_texture(), 3);
    const RefineState before = s;
    const AnalyticGaussianScore score(solid_image(16, 0, 0, 1), 0.0, diffusion::build_schedule());
    SdsOptions zero = opts;
    zero.weight = [](const diffusion::NoiseSchedule&, int) { return 0.0; };
    for (std::uint64_t seed = 0; seed < 5; ++seed) CHECK_FALSE(sds_pixel_step(s, score, e, zero, seed, &cam).applied);
    CHECK(same_params(before.texture, s.texture));
    CHECK(same_bits(before.grid->values, s.grid->values));
    CHECK(same_bits(before.grid->offsets, s.grid->offsets));
  }
  SUBCASE("a non-finite prediction skips the step") {
    SpyScore spy(SpyScore::Reply::Nan, ScoreMode::PixelSuperRes);
    RefineState s = quad_state(22);
    const RefineState before = s;
    const SdsStep step = sds_pixel_step(s, spy, e, opts, 1, &cam);
    CHECK_FALSE(step.applied);
    CHECK(step.skipped == "non-finite score residual");
    CHECK(same_params(before.texture, s.texture));
  }
  SUBCASE("coarse conditioning comes from the frozen snapshot") {
    SpyScore spy(SpyScore::Reply::Analytic, ScoreMode::PixelSuperRes, nullptr, solid_image(16, 0, 0, 1));
    RefineState s = quad_state(23);
    const Tensor initial = render_refined(s, cam);
    for (std::uint64_t seed = 0; seed < 30; ++seed) REQUIRE(sds_pixel_step(s, spy, e, opts, seed, &cam).applied);
    REQUIRE(spy.coarse_seen.size() == 30u);
    CHECK(same_bits(spy.coarse_seen.back(), initial));
    CHECK(same_bits(render_coarse(s, cam), initial));
    CHECK(mean_abs(render_refined(s, cam), initial) > 0.01);
  }
  SUBCASE("geometry receives gradients on a grid") {
    const auto sched = diffusion::build_schedule();
    RefineState s = RefineState::from_grid(sample_sdf([](const Vec3& p) { return norm(p) - 0.5; }, 12, -1, 1),
                                           tiny_texture(), 3);
    const Tensor before = s.grid->values;
    const AnalyticGaussianScore score(solid_image(16, 0, 0, 1), 0.0, sched);
    for (std::uint64_t seed = 0; seed < 3; ++seed) REQUIRE(sds_pixel_step(s, score, e, opts, seed, &cam).applied);
    CHECK_FALSE(same_bits(before, s.grid->values));
    for (std::size_t i = 0; i < s.grid->offsets.numel(); ++i) CHECK(std::abs(s.grid->offsets[i]) <= 0.5 * s.grid->cell + 1e-6);
  }
  SUBCASE("mode mismatches are rejected") {
    RefineState s = quad_state(24);
    const AnalyticGaussianScore pixel(solid_image(16, 0, 0, 1), 0.0, diffusion::build_schedule());
    CHECK_THROWS_AS(sds_latent_step(s, pixel, e, opts, 0, &cam), std::invalid_argument);
    auto codec = std::make_shared<IdentityCodec>();
    const AnalyticGaussianScore lat(solid_image(16, 0, 0, 1), 0.0, diffusion::build_schedule(), ScoreMode::Latent, codec);
    CHECK_THROWS_AS(sds_pixel_step(s, lat, e, opts, 0, &cam), std::invalid_argument);
  }
}

TEST_CASE("refine_pipeline on a synthetic sphere") {
  const auto sched = diffusion::build_schedule();
  const int res = 32;
  const auto obj = synth::make_primitive(synth::Kind::Sphere, {0.5, 0, 0}, "red");
  std::vector<ReferenceView> views;
  for (double az : {0.0, 90.0, 180.0, 270.0}) {
    Camera cam = front_camera(res);
    cam.azimuth_deg = az;
    cam.elevation_deg = 10;
    views.push_back({cam, synth::render_gt(obj, cam)});
  }
  const Tensor target = views[0].image;
  auto codec = std::make_shared<AvgPoolCodec>(4);
  const AnalyticGaussianScore latent(codec->encode(target), 0.0, sched, ScoreMode::Latent, codec);
  const AnalyticGaussianScore pixel(target, 0.0, sched);

  RefineConfig cfg;
  cfg.sdf_resolution = 24;
  cfg.texture = tiny_texture();
  cfg.distill_iters = 60;
  cfg.latent_iters = 40;
  cfg.pixel_iters = 40;
  cfg.sds.resolution = res;
  cfg.max_faces = 600;
  cfg.seed = 5;

  const Mesh input = merge(icosphere(0.5, 3), quad({2, 2, 2}, {0.01, 0, 0}, {0, 0.01, 0}));
  std::vector<std::string> stages;
  const auto out = refine_pipeline(input, views, "a red sphere", &latent, pixel, cfg,
                                   [&](const std::string& st, int it, int total) {
                                     if (it == total && (stages.empty() || stages.back() != st)) stages.push_back(st);
                                   });
  CHECK(stages == std::vector<std::string>{"texture_distill_init", "latent_sds", "pixel_sds", "postprocess"});
  CHECK(euler_characteristic(out.mesh) == 2);
  CHECK(is_watertight(out.mesh));
  CHECK(out.mesh.faces.size() <= cfg.max_faces);
  REQUIRE(out.mesh.colors.size() == out.mesh.vertices.size());
  CHECK(out.latent_applied + out.pixel_applied + out.skipped == 80);
  CHECK(out.distill_losses.size() == 60u);
  // Baked colors lean red.
  double r = 0, g = 0;
  for (const auto& c : out.mesh.colors) {
    r += c.x;
    g += c.y;
  }
  CHECK(r > g);

  SUBCASE("latent phase can be skipped without a latent model") {
    RefineConfig skip = cfg;
    skip.skip_latent = true;
    const auto res2 = refine_pipeline(input, views, "a red sphere", nullptr, pixel, skip);
    CHECK(res2.latent_applied == 0);
    CHECK(euler_characteristic(res2.mesh) == 2);
    CHECK_THROWS_AS(refine_pipeline(input, views, "x", nullptr, pixel, cfg), RefineError);
  }
  SUBCASE("stage failures carry their tag") {
    try {
      refine_pipeline(Mesh{}, views, "x", &latent, pixel, cfg);
      FAIL("expected RefineError");
    } catch (const RefineError& err) {
      CHECK(err.stage() == "mesh_to_sdf");
      CHECK(std::string(err.what()).rfind("[mesh_to_sdf]", 0) == 0);
    }
  }
  SUBCASE("budgets") {
    const RefineConfig d;
    CHECK(d.max_faces == 5000u);
    CHECK(d.latent_iters == 800);
    CHECK(d.pixel_iters == 400);
    CHECK(d.distill_iters == 512);
    CHECK(d.sds.resolution == 128);
    CHECK(d.sds.lr.texture == 1e-2f);
    CHECK(d.sds.lr.mlp == 1e-3f);
    CHECK(d.sds.lr.geometry == 1e-4f);
    const RefineConfig p = RefineConfig::full();
    CHECK(p.max_faces == 50000u);
    CHECK(p.sdf_resolution == 128);
    CHECK(p.sds.resolution == 512);
  }
}
