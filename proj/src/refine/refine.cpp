#include "tridiff/refine/refine.hpp"

#include <cmath>
#include <iostream>

#include "tridiff/numerics/ops.hpp"

namespace tridiff::refine {

using num::Tensor;
using num::Var;
using triplane::Camera;

std::string view_direction(double azimuth_deg) {
  double a = std::fmod(azimuth_deg, 360.0);
  if (a > 180.0) a -= 360.0;
  if (a <= -180.0) a += 360.0;
  const double m = std::abs(a);
  if (m <= 60.0) return "front";
  if (m >= 120.0) return "back";
  return "side";
}

std::string decorate_prompt(const std::string& prompt, double azimuth_deg, const std::string& suffix) {
  std::string out = prompt + ", " + view_direction(azimuth_deg) + " view";
  if (!suffix.empty()) out += ", " + suffix;
  return out;
}

RefineState RefineState::from_grid(SdfGrid grid, HashGridConfig cfg, std::uint64_t seed) {
  grid.validate();
  const double span = grid.cell * (grid.n - 1);
  cfg.lo = grid.origin;
  cfg.hi = grid.origin + Vec3(span, span, span);
  num::Rng rng(seed);
  RefineState s;
  s.texture = HashGridTexture::create(cfg, rng);
  s.grid = std::move(grid);
  return s;
}

RefineState RefineState::from_mesh(Mesh surface, HashGridConfig cfg, std::uint64_t seed) {
  surface.validate();
  if (surface.empty()) throw std::invalid_argument("RefineState: empty surface");
  Vec3 lo = surface.vertices[surface.faces[0][0]], hi = lo;
  for (const Face& f : surface.faces) {
    for (int k : f) {
      const Vec3& p = surface.vertices[k];
      lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
      hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
    }
  }
  const Vec3 ext = hi - lo;
  const double pad = 0.05 * std::max({ext.x, ext.y, ext.z});
  cfg.lo = lo - Vec3(pad, pad, pad);
  cfg.hi = hi + Vec3(pad, pad, pad);
  num::Rng rng(seed);
  RefineState s;
  s.texture = HashGridTexture::create(cfg, rng);
  s.surface = std::move(surface);
  return s;
}

Mesh RefineState::extract_mesh() const { return grid ? marching_cubes(*grid) : surface; }

namespace {

struct Bound {
  HashGridVars tex;
  Var values, offsets;
  Var vertices;
  std::vector<Face> faces;
  std::vector<Var> params;  // same order as RefineState::moments
};

Bound bind_state(num::Tape& tape, const RefineState& s, const HashGridTexture& tex, bool train_texture,
                 bool train_geometry) {
  Bound b;
  b.tex = bind(tape, tex, train_texture);
  b.params.push_back(b.tex.table);
  for (std::size_t i = 0; i < b.tex.head.weights.size(); ++i) {
    b.params.push_back(b.tex.head.weights[i]);
    b.params.push_back(b.tex.head.biases[i]);
  }
  if (s.grid) {
    b.values = train_geometry ? tape.param(s.grid->values) : tape.constant(s.grid->values);
    b.offsets = train_geometry ? tape.param(s.grid->offsets) : tape.constant(s.grid->offsets);
    b.params.push_back(b.values);
    b.params.push_back(b.offsets);
    McVars mc = marching_cubes(b.values, b.offsets, *s.grid);
    b.vertices = mc.vertices;
    b.faces = std::move(mc.faces);
  } else if (!s.surface.empty()) {
    Tensor v({static_cast<std::int64_t>(s.surface.vertices.size()), 3});
    for (std::size_t i = 0; i < s.surface.vertices.size(); ++i) {
      for (int c = 0; c < 3; ++c) v[3 * i + c] = static_cast<float>(s.surface.vertices[i][c]);
    }
    b.vertices = tape.constant(std::move(v));
    b.faces = s.surface.faces;
  }
  return b;
}

Var render_bound(num::Tape& tape, const Bound& b, const HashGridConfig& cfg, const Camera& cam) {
  if (b.faces.empty()) return tape.constant(Tensor({cam.height, cam.width, 3}, 1.0f));
  const Fragments frags = rasterize(b.vertices.value(), b.faces, cam);
  if (frags.pixel.empty()) return composite(tape, Var{}, frags);
  const Var pts = interpolate_points(b.vertices, b.faces, frags);
  return composite(tape, hash_lookup(b.tex, cfg, pts), frags);
}

Tensor render_with(const RefineState& s, const HashGridTexture& tex, const Camera& cam) {
  num::Tape tape;
  const Bound b = bind_state(tape, s, tex, false, false);
  return render_bound(tape, b, tex.config, cam).value();
}

// Adam on every parameter the tape reached. Returns false, leaving the state
// untouched, when any gradient is non-finite.
bool apply_updates(RefineState& s, num::Tape& tape, const Bound& b, const LearningRates& lr, bool geometry) {
  std::vector<Tensor*> targets = s.texture.params();
  if (s.grid) {
    targets.push_back(&s.grid->values);
    targets.push_back(&s.grid->offsets);
  }
  const std::size_t n_texture = s.texture.params().size();
  const std::size_t count = geometry && s.grid ? targets.size() : n_texture;
  std::vector<const Tensor*> grads(count);
  for (std::size_t i = 0; i < count; ++i) {
    grads[i] = &tape.grad(b.params[i]);
    if (!grads[i]->all_finite()) return false;
  }
  if (s.moments.size() < targets.size()) s.moments.resize(targets.size());
  for (std::size_t i = 0; i < count; ++i) {
    num::AdamConfig cfg;
    cfg.lr = i == 0 ? lr.texture : (i < n_texture ? lr.mlp : lr.geometry);
    num::adam_step(targets[i]->data(), grads[i]->data(), s.moments[i], cfg);
  }
  if (geometry && s.grid) s.grid->clamp_offsets();
  return true;
}

SdsStep sds_step(RefineState& state, const ScoreModel& score, const diffusion::CondEmbedding& e,
                 const SdsOptions& opts, std::uint64_t seed, const Camera* camera, bool latent) {
  if (latent && (score.mode() != ScoreMode::Latent || !score.codec())) {
    throw std::invalid_argument("sds_latent_step needs a latent-mode score model with a codec");
  }
  if (!latent && score.mode() != ScoreMode::PixelSuperRes) {
    throw std::invalid_argument("sds_pixel_step needs a pixel-mode score model");
  }
  num::Rng rng(seed);
  const Camera cam = camera ? *camera : sample_refine_camera(rng, opts);
  const bool geometry = opts.optimize_geometry && state.grid.has_value();

  num::Tape tape;
  const Bound b = bind_state(tape, state, state.texture, true, geometry);
  const Var x = render_bound(tape, b, state.texture.config, cam);
  const Var z = latent ? score.codec()->encode(x) : x;

  Tensor coarse;
  ViewContext view{&cam, nullptr};
  if (!latent) {
    if (!state.coarse) state.freeze_coarse();
    coarse = render_with(state, *state.coarse, cam);
    view.coarse = &coarse;
  }

  const auto& sched = score.schedule();
  SdsStep out;
  out.t = diffusion::sample_sds_timestep(rng, sched.T, opts.t_min, opts.t_max);
  const Tensor eps = rng.normal_tensor(z.shape());
  const Tensor z_t = diffusion::q_sample(z.value(), out.t, eps, sched);
  Tensor eps_hat = score.predict_view(z_t, out.t, e, view);
  if (opts.guidance != 1.0) {
    const Tensor eps_neg = score.predict_view(z_t, out.t, opts.negative, view);
    eps_hat = diffusion::cfg_epsilon(eps_hat, eps_neg, opts.guidance);
  }
  if (eps_hat.shape() != eps.shape()) throw num::ShapeError("score model output shape differs from its input");
  out.weight = opts.weight ? opts.weight(sched, out.t) : sched.posterior_var[out.t];
  ++state.iteration;

  Tensor grad(eps.shape());
  bool any = false;
  for (std::size_t i = 0; i < grad.numel(); ++i) {
    grad[i] = static_cast<float>(out.weight * (static_cast<double>(eps_hat[i]) - eps[i]));
    any = any || grad[i] != 0.0f;
  }
  if (!grad.all_finite()) {
    out.skipped = "non-finite score residual";
    std::clog << "warning: SDS step " << state.iteration << " skipped (" << out.skipped << ")\n";
    return out;
  }
  if (!any || !z.requires_grad()) {
    out.skipped = "zero residual";
    return out;
  }
  tape.backward(z, grad);
  if (!apply_updates(state, tape, b, opts.lr, geometry)) {
    out.skipped = "non-finite parameter gradient";
    std::clog << "warning: SDS step " << state.iteration << " skipped (" << out.skipped << ")\n";
    return out;
  }
  out.applied = true;
  return out;
}

}  // namespace

Tensor render_refined(const RefineState& state, const Camera& cam) { return render_with(state, state.texture, cam); }

Tensor render_coarse(const RefineState& state, const Camera& cam) {
  if (!state.coarse) throw std::logic_error("render_coarse: no coarse snapshot");
  return render_with(state, *state.coarse, cam);
}

std::vector<float> texture_distill_init(RefineState& state, const std::vector<ReferenceView>& views,
                                        const DistillOptions& opts) {
  if (views.size() < 4) throw std::invalid_argument("texture_distill_init needs at least 4 views");
  for (const auto& v : views) {
    if (v.image.shape() != num::Shape{v.camera.height, v.camera.width, 3}) {
      throw num::ShapeError("texture_distill_init: image does not match its camera");
    }
  }
  if (opts.iters < 0) throw std::invalid_argument("texture_distill_init: negative iteration count");
  num::Rng rng(opts.seed);
  std::vector<float> losses;
  losses.reserve(static_cast<std::size_t>(opts.iters));
  for (int it = 0; it < opts.iters; ++it) {
    const auto& view = views[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(views.size())))];
    num::Tape tape;
    const Bound b = bind_state(tape, state, state.texture, true, false);
    const Var x = render_bound(tape, b, state.texture.config, view.camera);
    const Var loss = num::mse(x, tape.constant(view.image));
    const float value = loss.value().item();
    if (!std::isfinite(value)) throw num::NumericError("texture_distill_init diverged");
    losses.push_back(value);
    if (!b.tex.table.valid() || !x.requires_grad()) continue;
    tape.backward(loss);
    if (!apply_updates(state, tape, b, opts.lr, false)) throw num::NumericError("texture_distill_init diverged");
  }
  return losses;
}

Camera sample_refine_camera(num::Rng& rng, const SdsOptions& opts) {
  Camera c;
  c.azimuth_deg = rng.uniform(-180.0, 180.0);
  c.elevation_deg = rng.uniform(opts.elevation_min, opts.elevation_max);
  c.width = c.height = opts.resolution;
  return c;
}

SdsStep sds_latent_step(RefineState& state, const ScoreModel& score, const diffusion::CondEmbedding& e,
                        const SdsOptions& opts, std::uint64_t seed, const Camera* camera) {
  return sds_step(state, score, e, opts, seed, camera, true);
}

SdsStep sds_pixel_step(RefineState& state, const ScoreModel& score, const diffusion::CondEmbedding& e,
                       const SdsOptions& opts, std::uint64_t seed, const Camera* camera) {
  return sds_step(state, score, e, opts, seed, camera, false);
}

RefineConfig RefineConfig::full() {
  RefineConfig c;
  c.sdf_resolution = 128;
  c.max_faces = 50000;
  c.sds.resolution = 512;
  c.texture.levels = 16;
  c.texture.log2_table = 19;
  c.texture.base_resolution = 16;
  c.texture.growth = 1.38;
  c.texture.hidden = 64;
  return c;
}

void RefineConfig::validate() const {
  if (sdf_resolution < 8) throw std::invalid_argument("refine: sdf_resolution must be >= 8");
  if (max_faces < 4) throw std::invalid_argument("refine: max_faces must be >= 4");
  if (distill_iters < 0 || latent_iters < 0 || pixel_iters < 0) {
    throw std::invalid_argument("refine: iteration counts must be non-negative");
  }
  if (sds.resolution < 4) throw std::invalid_argument("refine: render resolution too small");
  if (!(sds.t_min > 0 && sds.t_min < sds.t_max && sds.t_max < 1)) {
    throw std::invalid_argument("refine: need 0 < t_min < t_max < 1");
  }
  texture.validate();
}

namespace {

template <typename Fn>
auto run_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const RefineError&) {
    throw;
  } catch (const std::exception& ex) {
    throw RefineError(stage, ex.what());
  }
}

}  // namespace

RefineResult refine_pipeline(const Mesh& mesh, const std::vector<ReferenceView>& stage1, const std::string& prompt,
                             const ScoreModel* latent, const ScoreModel& pixel, const RefineConfig& cfg,
                             const RefineProgress& progress) {
  run_stage("config", [&] {
    cfg.validate();
    if (!cfg.skip_latent && cfg.latent_iters > 0 && !latent) {
      throw std::invalid_argument("latent phase enabled without a latent score model");
    }
    return 0;
  });
  RefineResult res;
  const Mesh cleaned = run_stage("remove_floaters", [&] { return remove_floaters(mesh); });
  SdfGrid grid = run_stage("mesh_to_sdf", [&] {
    SdfGrid g = mesh_to_sdf(cleaned, cfg.sdf_resolution);
    if (marching_cubes(g).empty()) throw std::runtime_error("surface is thinner than one grid cell");
    return g;
  });
  res.state = RefineState::from_grid(std::move(grid), cfg.texture, cfg.seed);
  RefineState& state = res.state;

  res.distill_losses = run_stage("texture_distill_init", [&] {
    DistillOptions d;
    d.iters = cfg.distill_iters;
    d.lr = cfg.sds.lr;
    d.seed = cfg.seed + 1;
    return texture_distill_init(state, stage1, d);
  });
  if (progress) progress("texture_distill_init", cfg.distill_iters, cfg.distill_iters);

  SdsOptions sds = cfg.sds;
  if (sds.guidance != 1.0) sds.negative = diffusion::embed_caption(cfg.negative_prompt);
  auto run_phase = [&](const std::string& stage, int iters, bool latent_phase) {
    run_stage(stage, [&] {
      num::Rng rng(cfg.seed + (latent_phase ? 2 : 3));
      for (int it = 0; it < iters; ++it) {
        const Camera cam = sample_refine_camera(rng, sds);
        const auto e = diffusion::embed_caption(decorate_prompt(prompt, cam.azimuth_deg, cfg.positive_suffix));
        const std::uint64_t seed = rng.uniform_int(std::int64_t{1} << 62);
        const SdsStep step = latent_phase ? sds_latent_step(state, *latent, e, sds, seed, &cam)
                                          : sds_pixel_step(state, pixel, e, sds, seed, &cam);
        (latent_phase ? res.latent_applied : res.pixel_applied) += step.applied;
        res.skipped += !step.applied;
        if (progress) progress(stage, it + 1, iters);
      }
      return 0;
    });
  };
  if (!cfg.skip_latent) run_phase("latent_sds", cfg.latent_iters, true);
  state.freeze_coarse();
  run_phase("pixel_sds", cfg.pixel_iters, false);

  res.mesh = run_stage("postprocess", [&] {
    Mesh out = state.extract_mesh();
    if (out.empty()) throw std::runtime_error("refined SDF has no zero crossing");
    out = remove_floaters(out);
    out = decimate(out, cfg.max_faces);
    out = smooth(out, cfg.smoothing);
    Tensor pts({static_cast<std::int64_t>(out.vertices.size()), 3});
    for (std::size_t i = 0; i < out.vertices.size(); ++i) {
      for (int c = 0; c < 3; ++c) pts[3 * i + c] = static_cast<float>(out.vertices[i][c]);
    }
    const Tensor rgb = hash_lookup(state.texture, pts);
    out.colors.resize(out.vertices.size());
    for (std::size_t i = 0; i < out.vertices.size(); ++i) out.colors[i] = {rgb[3 * i], rgb[3 * i + 1], rgb[3 * i + 2]};
    return out;
  });
  if (progress) progress("postprocess", 1, 1);
  return res;
}

}  // namespace tridiff::refine
