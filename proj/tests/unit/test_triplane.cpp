#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gradcheck.hpp"
#include "tridiff/numerics/ops.hpp"
#include "tridiff/triplane/render.hpp"

using namespace tridiff;
using namespace tridiff::triplane;
using num::Tape;
using num::Tensor;
using num::Var;

namespace {

SharedDecoder small_decoder(int channels, int split, std::uint64_t seed, DecoderKind kind = DecoderKind::Disentangled) {
  num::Rng rng(seed);
  DecoderConfig cfg;
  cfg.kind = kind;
  cfg.hidden = 8;
  cfg.layers = 2;
  cfg.density_bias = 0.0f;
  return SharedDecoder::create(channels, split, cfg, rng);
}

double image_psnr(const Tensor& a, const Tensor& b) {
  double se = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  return 10 * std::log10(1.0 / std::max(se / a.numel(), 1e-10));
}

}  // namespace

TEST_CASE("decode_point on zero planes with a zero-bias decoder") {
  TriPlane tp = TriPlane::zeros(16, 8, 8);
  num::Rng rng(1);
  SharedDecoder dec = SharedDecoder::create(16, 8, {DecoderKind::Disentangled, 64, 3, 0.0f}, rng);
  const auto v = decode_point(tp, dec, {0.3, -0.2, 0.9});
  for (float c : v.rgb) CHECK(c == doctest::Approx(0.5f));
  CHECK(v.sigma == doctest::Approx(std::log(2.0f)));
}

TEST_CASE("the origin samples the center texel of every plane") {
  const auto uv = project_point({0, 0, 0});
  for (const auto& p : uv) {
    CHECK(p[0] == 0.0);
    CHECK(p[1] == 0.0);
  }
  // Projection rule: xy <- (x, y), yz <- (y, z), xz <- (x, z).
  const auto q = project_point({0.1, 0.2, 0.3});
  CHECK(q[kXY] == std::array<double, 2>{0.1, 0.2});
  CHECK(q[kYZ] == std::array<double, 2>{0.2, 0.3});
  CHECK(q[kXZ] == std::array<double, 2>{0.1, 0.3});
  // With odd resolution the center is a texel; each plane's marker there must
  // be what the decoder sees.
  TriPlane tp = TriPlane::zeros(2, 5, 1);
  for (int p = 0; p < 3; ++p) {
    tp.planes[p][(0 * 5 + 2) * 5 + 2] = static_cast<float>(p + 1);
    tp.planes[p][(1 * 5 + 2) * 5 + 2] = static_cast<float>(-(p + 1));
  }
  Tape tape;
  const auto vars = bind(tape, tp, false);
  for (int p = 0; p < 3; ++p) {
    const Var f = num::grid_sample_2d(vars.planes[p], tape.constant(Tensor({1, 2})));
    CHECK(f.value()[0] == static_cast<float>(p + 1));
    CHECK(f.value()[1] == static_cast<float>(-(p + 1)));
  }
}

TEST_CASE("decode_points gradients wrt planes and decoder") {
  num::Rng rng(2);
  for (int inst = 0; inst < 20; ++inst) {
    const auto dec = small_decoder(4, 2, 100 + inst);
    std::vector<float> xyz;
    for (int i = 0; i < 5 * 3; ++i) xyz.push_back(static_cast<float>(rng.uniform(-0.95, 0.95)));
    std::vector<Tensor> planes;
    for (int p = 0; p < 3; ++p) planes.push_back(rng.uniform_tensor({4, 5, 5}, -1, 1));
    const double err = testing::gradcheck(
        [&](Tape& tape, std::span<const Var> v) {
          TriPlaneVars tp{{v[0], v[1], v[2]}, 2};
          const auto f = decode_points(tp, bind(tape, dec, false), xyz);
          return num::concat(std::vector<Var>{f.rgb, f.sigma}, 1);
        },
        planes, inst + 1);
    CHECK_MESSAGE(err < 1e-3, "instance " << inst << " err " << err);
  }
}

TEST_CASE("single-MLP ablation decodes rgb and density") {
  TriPlane tp = TriPlane::zeros(4, 4, 2);
  const auto dec = small_decoder(4, 2, 5, DecoderKind::Single);
  CHECK(dec.color.out_dim() == 4);
  CHECK(dec.color.in_dim() == 12);
  const auto v = decode_point(tp, dec, {0, 0, 0});
  CHECK(v.rgb[0] == doctest::Approx(0.5f));
  CHECK(v.sigma == doctest::Approx(std::log(2.0f)));
}

TEST_CASE("volume render gradients wrt planes") {
  num::Rng rng(3);
  Camera cam;
  cam.width = cam.height = 4;
  cam.fov_deg = 30;
  const auto rays = cam.rays();
  RenderOptions opts;
  opts.samples = 6;
  for (int inst = 0; inst < 20; ++inst) {
    auto dec = small_decoder(4, 2, 200 + inst);
    // Stronger weights lift the gradient well above float32 forward rounding at h = 1e-3.
    for (auto* w : dec.params()) {
      for (float& x : w->data()) x *= 2.0f;
    }
    std::vector<Tensor> planes;
    for (int p = 0; p < 3; ++p) planes.push_back(rng.uniform_tensor({4, 4, 4}, -1, 1));
    const double err = testing::gradcheck(
        [&](Tape& tape, std::span<const Var> v) {
          TriPlaneVars tp{{v[0], v[1], v[2]}, 2};
          return render_rays(tp, bind(tape, dec, false), rays, opts, nullptr);
        },
        planes, inst + 1);
    CHECK_MESSAGE(err < 1e-3, "instance " << inst << " err " << err);
  }
}

TEST_CASE("compositing gradients wrt color and density") {
  num::Rng rng(4);
  Camera cam;
  cam.width = cam.height = 3;
  const auto rays = cam.rays();
  RenderOptions opts;
  opts.samples = 5;
  const SampleLayout L = sample_rays(rays, opts, nullptr);
  const std::int64_t p = static_cast<std::int64_t>(L.hit_ray.size()) * opts.samples;
  for (int inst = 0; inst < 20; ++inst) {
    const double err = testing::gradcheck(
        [&](Tape&, std::span<const Var> v) { return composite(v[0], v[1], L, 1.0f); },
        {rng.uniform_tensor({p, 3}, 0, 1), rng.uniform_tensor({p, 1}, 0, 3)}, inst + 1);
    CHECK_MESSAGE(err < 1e-3, "instance " << inst << " err " << err);
  }
}

TEST_CASE("empty scenes render white") {
  Camera cam;
  const Tensor img = render_field([](const Vec3&, std::array<float, 3>& c, float& s) {
    c = {0.2f, 0.3f, 0.4f};
    s = 0.0f;
  }, cam);
  for (float v : img.data()) CHECK(v == 1.0f);

  TriPlane tp = TriPlane::zeros(4, 8, 2);
  num::Rng rng(1);
  auto dec = SharedDecoder::create(4, 2, {DecoderKind::Disentangled, 8, 2, -40.0f}, rng);
  const Tensor img2 = render_image(tp, dec, cam);
  for (float v : img2.data()) CHECK(v == doctest::Approx(1.0f).epsilon(1e-6));
}

TEST_CASE("opaque red sphere projects to the predicted disk") {
  const double radius = 0.5;
  Camera cam;
  cam.width = cam.height = 64;
  const Tensor img = render_field([&](const Vec3& p, std::array<float, 3>& c, float& s) {
    c = {1.0f, 0.0f, 0.0f};
    s = norm(p) < radius ? 1e3f : 0.0f;
  }, cam, {128, false, 1.0f});
  // Silhouette half-angle asin(r/d); its pinhole image radius in pixels.
  const double predicted = cam.focal() * std::tan(std::asin(radius / cam.radius));
  // Measure the red extent along the middle row (green channel drops to 0 on red).
  const int row = 32;
  double covered = 0;
  for (int col = 0; col < 64; ++col) covered += 1.0 - img[static_cast<std::size_t>((row * 64 + col) * 3 + 1)];
  CHECK(std::abs(covered / 2.0 - predicted) < 1.0);
  // Center is red, corner is white.
  CHECK(img[(32 * 64 + 32) * 3 + 0] == doctest::Approx(1.0f));
  CHECK(img[(32 * 64 + 32) * 3 + 1] < 0.01f);
  CHECK(img[0] == 1.0f);
}

TEST_CASE("quadrature converges as samples double") {
  // The opaque red sphere: doubling the sample count barely moves the image
  // relative to a 4x reference.
  auto field = [](const Vec3& p, std::array<float, 3>& c, float& s) {
    c = {1.0f, 0.0f, 0.0f};
    s = norm(p) < 0.5 ? 1e3f : 0.0f;
  };
  Camera cam;
  cam.width = cam.height = 32;
  for (int n : {32, 64}) {
    const Tensor ref = render_field(field, cam, {4 * n, false, 1.0f});
    const double base = image_psnr(render_field(field, cam, {n, false, 1.0f}), ref);
    const double doubled = image_psnr(render_field(field, cam, {2 * n, false, 1.0f}), ref);
    MESSAGE("n=" << n << ": " << base << " dB -> " << doubled << " dB");
    CHECK(std::abs(doubled - base) < 0.5);
  }
}

TEST_CASE("rotationally symmetric fields render identically across azimuth") {
  auto field = [](const Vec3& p, std::array<float, 3>& c, float& s) {
    const double rho = std::hypot(p.x, p.z);
    c = {static_cast<float>(0.5 + 0.4 * p.y), 0.3f, static_cast<float>(0.2 + rho)};
    s = (rho < 0.5 && std::abs(p.y) < 0.4) ? 30.0f : 0.0f;
  };
  Camera a, b;
  a.elevation_deg = b.elevation_deg = 20;
  b.azimuth_deg = 90;
  CHECK(image_psnr(render_field(field, a), render_field(field, b)) > 30.0);
}

TEST_CASE("camera inside the cube is rejected") {
  Camera cam;
  cam.radius = 0.5;
  TriPlane tp = TriPlane::zeros(4, 4, 2);
  const auto dec = small_decoder(4, 2, 1);
  CHECK_THROWS_AS(render_image(tp, dec, cam), std::invalid_argument);
  cam.radius = 2.5;
  cam.fov_deg = 130;
  CHECK_THROWS_AS(cam.validate(), std::invalid_argument);
}

TEST_CASE("clamp") {
  TriPlane tp = TriPlane::zeros(2, 2, 1);
  tp.planes[0][0] = 7;
  tp.planes[1][1] = -7;
  tp.planes[2][2] = 3;
  const TriPlane c = clamp_triplane(tp);
  CHECK(c.planes[0][0] == 5.0f);
  CHECK(c.planes[1][1] == -5.0f);
  CHECK(c.planes[2][2] == 3.0f);
  const TriPlane cc = clamp_triplane(c);
  for (int p = 0; p < 3; ++p) CHECK(cc.planes[p] == c.planes[p]);
}

TEST_CASE("tv and l1 losses") {
  TriPlane tp = TriPlane::zeros(2, 4, 1);
  for (auto& p : tp.planes) p.fill(1.5f);
  CHECK(tv_loss(tp) == 0.0f);
  CHECK(l1_loss(tp) == doctest::Approx(1.5f));
  for (auto& p : tp.planes) p.fill(2.0f);
  CHECK(l1_loss(tp) == 2.0f);
  CHECK(l1_loss(TriPlane::zeros(2, 4, 1)) == 0.0f);

  // Spike of height h scales as h^2.
  TriPlane s1 = TriPlane::zeros(1 + 1, 4, 1), s2 = s1;
  s1.planes[0][5] = 1.0f;
  s2.planes[0][5] = 3.0f;
  CHECK(tv_loss(s1) > 0.0f);
  CHECK(tv_loss(s2) == doctest::Approx(9.0f * tv_loss(s1)));

  // Brute-force double loop.
  num::Rng rng(8);
  TriPlane r = TriPlane::zeros(2, 4, 1);
  for (auto& p : r.planes) p = rng.uniform_tensor({2, 4, 4}, -1, 1);
  double tv = 0, l1 = 0;
  for (const auto& p : r.planes) {
    double sx = 0, sy = 0;
    for (int c = 0; c < 2; ++c) {
      for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
          const double v = p[(c * 4 + i) * 4 + j];
          l1 += std::abs(v);
          if (j + 1 < 4) sx += std::pow(p[(c * 4 + i) * 4 + j + 1] - v, 2);
          if (i + 1 < 4) sy += std::pow(p[(c * 4 + i + 1) * 4 + j] - v, 2);
        }
      }
    }
    tv += sx / (2 * 4 * 3) + sy / (2 * 3 * 4);
  }
  CHECK(tv_loss(r) == doctest::Approx(tv).epsilon(1e-6));
  CHECK(l1_loss(r) == doctest::Approx(l1 / 96).epsilon(1e-6));
}

TEST_CASE("decode_point is continuous for smooth planes") {
  TriPlane tp = TriPlane::zeros(4, 16, 2);
  for (int p = 0; p < 3; ++p) {
    for (int c = 0; c < 4; ++c)
      for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 16; ++j) tp.planes[p][(c * 16 + i) * 16 + j] = std::sin(0.3f * (i + c)) * std::cos(0.2f * j);
  }
  const auto dec = small_decoder(4, 2, 9);
  num::Rng rng(5);
  for (int k = 0; k < 50; ++k) {
    const Vec3 x{rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9)};
    const auto a = decode_point(tp, dec, x);
    const auto b = decode_point(tp, dec, x + Vec3{1e-4, -1e-4, 1e-4});
    for (int i = 0; i < 3; ++i) CHECK(std::abs(a.rgb[i] - b.rgb[i]) < 1e-2);
    CHECK(std::abs(a.sigma - b.sigma) < 1e-2);
  }
}

TEST_CASE("tri-plane and decoder persistence") {
  const auto dir = std::filesystem::temp_directory_path() / "tridiff_tp_test";
  std::filesystem::create_directories(dir);
  num::Rng rng(6);
  TriPlane tp = TriPlane::zeros(4, 6, 3);
  for (auto& p : tp.planes) p = rng.uniform_tensor({4, 6, 6}, -5, 5);
  save_triplane(dir / "obj", tp);
  const TriPlane back = load_triplane(dir / "obj");
  for (int p = 0; p < 3; ++p) CHECK(back.planes[p] == tp.planes[p]);
  CHECK(back.split == 3);
  const auto dec = small_decoder(4, 3, 4);
  save_decoder(dir / "dec.ttns", dec);
  const auto d2 = load_decoder(dir / "dec.ttns");
  CHECK(d2.color.weights.size() == dec.color.weights.size());
  CHECK(d2.density.weights.back() == dec.density.weights.back());
  std::filesystem::remove_all(dir);
}
