#include "tridiff/triplane/render.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tridiff/numerics/ops.hpp"

namespace tridiff::triplane {

using num::Tensor;
using num::Var;

namespace {

constexpr std::size_t kChunkRays = 4096;

void check_camera_outside(const Camera& cam) {
  cam.validate();
  const Vec3 p = cam.position();
  if (std::abs(p.x) <= 1.0 && std::abs(p.y) <= 1.0 && std::abs(p.z) <= 1.0) {
    throw std::invalid_argument("camera lies inside the unit cube");
  }
}

}  // namespace

SampleLayout sample_rays(std::span<const Ray> rays, const RenderOptions& opts, num::Rng* rng) {
  if (opts.samples < 2) throw std::invalid_argument("need at least 2 samples per ray");
  if (opts.stratified && !rng) throw std::invalid_argument("stratified sampling needs an Rng");
  SampleLayout L;
  L.num_rays = static_cast<std::int64_t>(rays.size());
  L.samples = opts.samples;
  for (std::size_t r = 0; r < rays.size(); ++r) {
    double t0, t1;
    if (!intersect_unit_cube(rays[r], t0, t1)) continue;
    const double dt = (t1 - t0) / opts.samples;
    L.hit_ray.push_back(static_cast<std::int32_t>(r));
    L.delta.push_back(static_cast<float>(dt));
    for (int s = 0; s < opts.samples; ++s) {
      const double u = opts.stratified ? rng->uniform() : 0.5;
      const Vec3 p = rays[r].origin + (t0 + (s + u) * dt) * rays[r].dir;
      L.xyz.push_back(static_cast<float>(p.x));
      L.xyz.push_back(static_cast<float>(p.y));
      L.xyz.push_back(static_cast<float>(p.z));
    }
  }
  return L;
}

Var composite(Var rgb, Var sigma, const SampleLayout& L, float background) {
  num::Tape& tape = rgb.tape();
  const std::int64_t hits = static_cast<std::int64_t>(L.hit_ray.size());
  const int S = L.samples;
  if (rgb.shape() != num::Shape{hits * S, 3} || sigma.numel() != static_cast<std::size_t>(hits * S)) {
    throw num::ShapeError("composite: sample arrays do not match the layout");
  }
  Tensor out({L.num_rays, 3}, background);
  const float* c = rgb.value().ptr();
  const float* sg = sigma.value().ptr();
#pragma omp parallel for schedule(static)
  for (std::int64_t h = 0; h < hits; ++h) {
    float T = 1.0f, acc[3] = {0, 0, 0};
    for (int s = 0; s < S; ++s) {
      const std::int64_t i = h * S + s;
      const float alpha = 1.0f - std::exp(-sg[i] * L.delta[static_cast<std::size_t>(h)]);
      const float w = T * alpha;
      for (int k = 0; k < 3; ++k) acc[k] += w * c[3 * i + k];
      T *= 1.0f - alpha;
    }
    float* o = out.ptr() + 3 * L.hit_ray[static_cast<std::size_t>(h)];
    for (int k = 0; k < 3; ++k) o[k] = acc[k] + T * background;
  }
  const auto ic = rgb.id(), is = sigma.id();
  return tape.record(
      std::move(out), {rgb, sigma},
      [ic, is, background, hits, S, hit = L.hit_ray, deltas = L.delta](num::Tape& t, std::uint32_t, const Tensor& g) {
        const float* cv = t.value(ic).ptr();
        const float* sv = t.value(is).ptr();
        float* gc = t.requires_grad(ic) ? t.grad_buffer(ic).data() : nullptr;
        float* gs = t.requires_grad(is) ? t.grad_buffer(is).data() : nullptr;
#pragma omp parallel for schedule(static)
        for (std::int64_t h = 0; h < hits; ++h) {
          const float delta = deltas[static_cast<std::size_t>(h)];
          const float* go = g.ptr() + 3 * hit[static_cast<std::size_t>(h)];
          std::vector<float> w(static_cast<std::size_t>(S)), t_next(static_cast<std::size_t>(S));
          float T = 1.0f;
          for (int s = 0; s < S; ++s) {
            const float a = 1.0f - std::exp(-sv[h * S + s] * delta);
            w[static_cast<std::size_t>(s)] = T * a;
            T *= 1.0f - a;
            t_next[static_cast<std::size_t>(s)] = T;
          }
          // Suffix holds sum_{k>i} w_k c_k + T_final * bg, per channel.
          float suffix[3] = {T * background, T * background, T * background};
          for (int s = S - 1; s >= 0; --s) {
            const std::int64_t i = h * S + s;
            const float ws = w[static_cast<std::size_t>(s)];
            if (gc) {
              for (int k = 0; k < 3; ++k) gc[3 * i + k] += go[k] * ws;
            }
            if (gs) {
              float d = 0.0f;
              for (int k = 0; k < 3; ++k) d += go[k] * (t_next[static_cast<std::size_t>(s)] * cv[3 * i + k] - suffix[k]);
              gs[i] += delta * d;
            }
            for (int k = 0; k < 3; ++k) suffix[k] += ws * cv[3 * i + k];
          }
        }
      },
      "composite");
}

Var render_rays(const TriPlaneVars& tp, const DecoderVars& dec, std::span<const Ray> rays, const RenderOptions& opts,
                num::Rng* rng) {
  num::Tape& tape = tp.planes[0].tape();
  const SampleLayout L = sample_rays(rays, opts, rng);
  if (L.hit_ray.empty()) return tape.constant(Tensor({L.num_rays, 3}, opts.background));
  const FieldSample f = decode_points(tp, dec, L.xyz);
  return composite(f.rgb, f.sigma, L, opts.background);
}

namespace {

Tensor assemble(const Camera& cam, const std::vector<Ray>& rays,
                const std::function<Tensor(std::span<const Ray>)>& render_chunk) {
  Tensor img({cam.height, cam.width, 3});
  for (std::size_t begin = 0; begin < rays.size(); begin += kChunkRays) {
    const std::size_t n = std::min(kChunkRays, rays.size() - begin);
    const Tensor part = render_chunk(std::span<const Ray>(rays).subspan(begin, n));
    std::copy_n(part.ptr(), 3 * n, img.ptr() + 3 * begin);
  }
  return img;
}

}  // namespace

Tensor render_image(const TriPlane& tp, const SharedDecoder& dec, const Camera& cam, const RenderOptions& opts) {
  check_camera_outside(cam);
  RenderOptions o = opts;
  o.stratified = false;
  return assemble(cam, cam.rays(), [&](std::span<const Ray> chunk) {
    num::Tape tape;
    return render_rays(bind(tape, tp, false), bind(tape, dec, false), chunk, o, nullptr).value();
  });
}

Tensor render_field(const AnalyticField& field, const Camera& cam, const RenderOptions& opts) {
  check_camera_outside(cam);
  RenderOptions o = opts;
  o.stratified = false;
  return assemble(cam, cam.rays(), [&](std::span<const Ray> chunk) {
    const SampleLayout L = sample_rays(chunk, o, nullptr);
    const std::int64_t p = static_cast<std::int64_t>(L.xyz.size() / 3);
    Tensor rgb({p, 3}), sigma({p, 1});
    for (std::int64_t i = 0; i < p; ++i) {
      std::array<float, 3> c{};
      float s = 0.0f;
      field(Vec3{L.xyz[3 * i], L.xyz[3 * i + 1], L.xyz[3 * i + 2]}, c, s);
      for (int k = 0; k < 3; ++k) rgb[static_cast<std::size_t>(3 * i + k)] = c[static_cast<std::size_t>(k)];
      sigma[static_cast<std::size_t>(i)] = s;
    }
    num::Tape tape;
    if (L.hit_ray.empty()) return Tensor({L.num_rays, 3}, o.background);
    return composite(tape.constant(std::move(rgb)), tape.constant(std::move(sigma)), L, o.background).value();
  });
}

}  // namespace tridiff::triplane
