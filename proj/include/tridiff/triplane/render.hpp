#pragma once

#include <array>
#include <functional>
#include <span>

#include "tridiff/numerics/rng.hpp"
#include "tridiff/triplane/camera.hpp"
#include "tridiff/triplane/triplane.hpp"

namespace tridiff::triplane {

struct RenderOptions {
  int samples = 32;         // per ray, >= 2
  bool stratified = false;  // jitter inside each bin (needs an Rng), else bin midpoints
  float background = 1.0f;  // white
};

/// Sample points along the part of each ray inside the unit cube. Every hit
/// ray gets the same number of equal-width bins.
struct SampleLayout {
  std::int64_t num_rays = 0;
  int samples = 0;
  std::vector<std::int32_t> hit_ray;  // batch index of each hit ray
  std::vector<float> delta;           // bin width of each hit ray
  std::vector<float> xyz;             // hit_ray.size() * samples * 3
};

SampleLayout sample_rays(std::span<const Ray> rays, const RenderOptions& opts, num::Rng* rng);

/// Emission-absorption compositing over a constant background. rgb is
/// P x 3 and sigma P x 1 for the P = hits * samples points of the layout, in
/// layout order. Returns num_rays x 3.
num::Var composite(num::Var rgb, num::Var sigma, const SampleLayout& layout, float background);

num::Var render_rays(const TriPlaneVars& tp, const DecoderVars& dec, std::span<const Ray> rays,
                     const RenderOptions& opts, num::Rng* rng);

/// H x W x 3 image. Throws if the camera sits inside the unit cube.
num::Tensor render_image(const TriPlane& tp, const SharedDecoder& dec, const Camera& cam,
                         const RenderOptions& opts = {});

/// Same quadrature over a closed-form field, for oracle tests.
using AnalyticField = std::function<void(const Vec3& p, std::array<float, 3>& rgb, float& sigma)>;
num::Tensor render_field(const AnalyticField& field, const Camera& cam, const RenderOptions& opts = {});

}  // namespace tridiff::triplane
