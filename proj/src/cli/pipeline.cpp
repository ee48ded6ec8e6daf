#include "tridiff/cli/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>

#include "tridiff/diffusion/diffusion.hpp"
#include "tridiff/fitting/fitting.hpp"
#include "tridiff/numerics/hash.hpp"
#include "tridiff/numerics/io.hpp"
#include "tridiff/refine/raster.hpp"
#include "tridiff/refine/refine.hpp"
#include "tridiff/synthdata/synthdata.hpp"
#include "tridiff/vae/vae.hpp"

namespace tridiff::cli {

namespace fs = std::filesystem;
using num::Tensor;
using triplane::Camera;

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> s = {"data", "fit", "vae", "ldm", "sample", "refine"};
  return s;
}

const std::vector<std::string>& stage_inputs(const std::string& stage) {
  static const std::map<std::string, std::vector<std::string>> deps = {
      {"data", {}},
      {"fit", {"data"}},
      {"vae", {"data", "fit"}},
      {"ldm", {"data", "vae"}},
      {"sample", {"fit", "vae", "ldm"}},
      {"refine", {"fit", "sample"}},
  };
  const auto it = deps.find(stage);
  if (it == deps.end()) throw std::invalid_argument("unknown stage '" + stage + "'");
  return it->second;
}

namespace {

void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream out(p);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

std::string tensor_sha(const Tensor& t) {
  return num::sha256_hex(std::string_view(reinterpret_cast<const char*>(t.ptr()), t.numel() * sizeof(float)));
}

std::vector<fit::MultiViewSample> load_samples(const ArtifactRecord& data) {
  const auto m = synth::read_manifest(data.dir / synth::kManifestFile);
  std::vector<fit::MultiViewSample> out;
  for (const auto& e : m.entries) out.push_back(fit::load_sample(e, data.dir));
  return out;
}

std::vector<triplane::TriPlane> load_planes(const ArtifactRecord& fit, const std::vector<fit::MultiViewSample>& s) {
  std::vector<triplane::TriPlane> out;
  for (const auto& x : s) out.push_back(triplane::load_triplane(fit.dir / "planes" / x.id));
  return out;
}

num::Shape latent_shape(const PipelineConfig& cfg) {
  return cfg.vae.latent_shape({cfg.fit.channels, cfg.fit.resolution, 3 * cfg.fit.resolution});
}

// Logs roughly ten progress lines per training loop.
auto step_logger(std::ostream& log, const std::string& stage, int total) {
  return [&log, stage, total](int step, float loss) {
    const int every = std::max(1, total / 10);
    if ((step + 1) % every == 0 || step + 1 == total) {
      log << "[" << stage << "] step " << (step + 1) << "/" << total << " loss " << loss << std::endl;
    }
  };
}

}  // namespace

Orchestrator::Orchestrator(PipelineConfig cfg, const fs::path& artifacts, std::ostream& log)
    : cfg_(std::move(cfg)), store_(artifacts), log_(log) {
  cfg_.validate();
}

std::optional<std::string> Orchestrator::key_for(const std::string& stage) const {
  std::vector<std::string> upstream;
  for (const auto& in : stage_inputs(stage)) {
    const auto rec = cached(in);
    if (!rec) return std::nullopt;
    upstream.push_back(rec->content_hash);
  }
  return ArtifactStore::stage_key(stage, num::sha256_hex(cfg_.stage_text(stage)), upstream);
}

std::optional<ArtifactRecord> Orchestrator::cached(const std::string& stage) const {
  if (const auto it = resolved_.find(stage); it != resolved_.end()) return it->second;
  const auto key = key_for(stage);
  if (!key) return std::nullopt;
  return store_.lookup(*key);
}

std::vector<PlanEntry> Orchestrator::plan(const std::string& target) const {
  std::vector<std::string> order;
  std::function<void(const std::string&)> visit = [&](const std::string& s) {
    for (const auto& in : stage_inputs(s)) visit(in);
    if (std::find(order.begin(), order.end(), s) == order.end()) order.push_back(s);
  };
  visit(target);
  std::vector<PlanEntry> out;
  for (const auto& s : order) {
    PlanEntry e;
    e.stage = s;
    if (const auto key = key_for(s)) {
      e.key = *key;
      e.cached = store_.lookup(*key).has_value();
    }
    out.push_back(e);
  }
  return out;
}

ArtifactRecord Orchestrator::ensure(const std::string& stage) {
  if (const auto it = resolved_.find(stage); it != resolved_.end()) return it->second;
  std::map<std::string, ArtifactRecord> inputs;
  std::vector<std::string> upstream;
  for (const auto& in : stage_inputs(stage)) {
    inputs[in] = ensure(in);
    upstream.push_back(inputs[in].content_hash);
  }
  const std::string config_hash = num::sha256_hex(cfg_.stage_text(stage));
  const std::string key = ArtifactStore::stage_key(stage, config_hash, upstream);
  if (auto hit = store_.lookup(key)) {
    log_ << "[" << stage << "] cached " << hit->content_hash.substr(0, 12) << std::endl;
    reused_.push_back(stage);
    resolved_[stage] = *hit;
    return *hit;
  }
  log_ << "[" << stage << "] running" << std::endl;
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path out = store_.staging(stage, key);
  nlohmann::json info;
  try {
    info = run_stage(stage, inputs, out);
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  info["seconds"] = secs;
  ArtifactRecord rec = store_.commit(stage, key, config_hash, upstream, out, info);
  log_ << "[" << stage << "] done in " << secs << " s -> " << rec.content_hash.substr(0, 12) << std::endl;
  executed_.push_back(stage);
  resolved_[stage] = rec;
  return rec;
}

nlohmann::json Orchestrator::run_stage(const std::string& stage, const std::map<std::string, ArtifactRecord>& in,
                                       const fs::path& out) {
  const std::uint64_t seed = cfg_.seed;
  if (stage == "data") {
    synth::BuildOptions o;
    o.n_objects = cfg_.data.objects;
    o.n_views = cfg_.data.views;
    o.resolution = cfg_.data.resolution;
    o.seed = seed;
    if (cfg_.data.source == "two_class") o.objects = synth::two_class_objects(cfg_.data.objects / 2, seed);
    const auto m = synth::build_manifest(o, out);
    return {{"objects", m.entries.size()}, {"views", cfg_.data.views}};
  }

  if (stage == "fit") {
    const auto samples = load_samples(in.at("data"));
    fit::FitConfig fc = cfg_.fit;
    fc.seed = seed;
    const auto jr = fit::train_shared_decoder(samples, fc);
    log_ << "[fit] shared decoder trained, loss " << jr.losses.back() << std::endl;
    const auto planes = fit::fit_objects(samples, jr.decoder, fc);
    triplane::save_decoder(out / "decoder", jr.decoder);
    fs::create_directories(out / "planes");
    nlohmann::json psnr = nlohmann::json::object();
    double mean = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      triplane::save_triplane(out / "planes" / samples[i].id, planes[i]);
      const double p = fit::sample_psnr(planes[i], jr.decoder, samples[i], fc.samples);
      psnr[samples[i].id] = p;
      mean += p / static_cast<double>(samples.size());
    }
    write_json(out / "metrics.json", {{"psnr", psnr}, {"mean_psnr", mean}});
    return {{"mean_psnr", mean}};
  }

  if (stage == "vae") {
    const auto samples = load_samples(in.at("data"));
    const auto planes = load_planes(in.at("fit"), samples);
    const auto dec = triplane::load_decoder(in.at("fit").dir / "decoder");
    vae::VaeConfig vc = cfg_.vae;
    vc.seed = seed;
    const auto tr = vae::train_vae(planes, vc, step_logger(log_, "vae", vc.steps));
    vae::save_vae(out / "vae", tr.vae);
    std::vector<Tensor> latents;
    for (const auto& tp : planes) latents.push_back(vae::encode(tr.vae, vae::rollout(tp)));
    const auto stats = vae::compute_latent_stats(latents);
    vae::save_latent_stats(out / "latent_stats.json", stats, num::sha256_file(out / "vae"));
    num::TensorBundle bundle;
    for (std::size_t i = 0; i < samples.size(); ++i) bundle[samples[i].id] = vae::normalize(latents[i], stats);
    num::save_bundle(out / "latents", bundle);
    nlohmann::json psnr = nlohmann::json::object();
    double mean = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const double p = fit::sample_psnr(vae::reconstruct(tr.vae, planes[i]), dec, samples[i], cfg_.fit.samples);
      psnr[samples[i].id] = p;
      mean += p / static_cast<double>(samples.size());
    }
    write_json(out / "metrics.json", {{"psnr", psnr}, {"mean_psnr", mean}});
    return {{"mean_psnr", mean}, {"final_loss", tr.losses.empty() ? 0.0f : tr.losses.back()}};
  }

  if (stage == "ldm") {
    const auto m = synth::read_manifest(in.at("data").dir / synth::kManifestFile);
    const auto bundle = num::load_bundle(in.at("vae").dir / "latents");
    std::vector<Tensor> latents;
    std::vector<std::string> captions;
    for (const auto& e : m.entries) {
      latents.push_back(bundle.at(e.id));
      captions.push_back(e.caption);
    }
    diffusion::LdmConfig lc = cfg_.ldm;
    lc.seed = seed;
    const auto r = diffusion::train_ldm(latents, captions, lc, step_logger(log_, "ldm", lc.steps));
    r.denoiser.save(out / "denoiser");
    const std::size_t tail = std::max<std::size_t>(1, r.losses.size() / 10);
    double tail_loss = 0;
    for (std::size_t i = r.losses.size() - tail; i < r.losses.size(); ++i) tail_loss += r.losses[i] / tail;
    write_json(out / "metrics.json", {{"tail_loss", tail_loss}});
    return {{"tail_loss", tail_loss}};
  }

  if (stage == "sample") {
    const auto den = diffusion::Denoiser::load(in.at("ldm").dir / "denoiser");
    const auto model = vae::load_vae(in.at("vae").dir / "vae");
    const auto stats = vae::load_latent_stats(in.at("vae").dir / "latent_stats.json");
    const auto dec = triplane::load_decoder(in.at("fit").dir / "decoder");
    const auto e = diffusion::embed_caption(cfg_.sample.prompt);
    const auto sched = cfg_.ldm.schedule();
    nlohmann::json samples = nlohmann::json::array();
    for (int i = 0; i < cfg_.sample.count; ++i) {
      const Tensor z = diffusion::ddim_sample(den, e, sched, latent_shape(cfg_), cfg_.sample.ddim_steps,
                                              cfg_.sample.guidance, seed + static_cast<std::uint64_t>(i));
      auto tp = vae::unroll(vae::decode(model, vae::denormalize(z, stats), cfg_.fit.split));
      triplane::clamp_in_place(tp);
      const fs::path dir = out / ("sample_" + std::to_string(i));
      fs::create_directories(dir);
      triplane::save_triplane(dir / "triplane", tp);
      triplane::RenderOptions ro;
      ro.samples = cfg_.fit.samples;
      const auto cams = orbit_cameras(cfg_.sample.render_views, 20.0, cfg_.data.resolution);
      for (std::size_t v = 0; v < cams.size(); ++v) {
        synth::write_ppm(dir / ("view_" + std::to_string(v) + ".ppm"), triplane::render_image(tp, dec, cams[v], ro));
      }
      samples.push_back({{"latent_sha256", tensor_sha(z)}, {"seed", seed + static_cast<std::uint64_t>(i)}});
    }
    write_json(out / "info.json", {{"prompt", cfg_.sample.prompt}, {"samples", samples}});
    return {{"prompt", cfg_.sample.prompt}, {"samples", samples}};
  }

  if (stage == "refine") {
    const auto dec = triplane::load_decoder(in.at("fit").dir / "decoder");
    const auto tp = triplane::load_triplane(in.at("sample").dir / "sample_0" / "triplane");
    const auto& rc = cfg_.refine;
    double peak = 0;
    refine::Mesh stage1 = density_mesh(tp, dec, rc.stage1_grid, rc.density_threshold, &peak);
    double level = rc.density_threshold;
    if (stage1.empty() && peak > 1e-3) {
      // Weak fields (short trainings) never reach the configured level.
      level = 0.5 * peak;
      log_ << "[refine] density peaks at " << peak << ", extracting at " << level << std::endl;
      stage1 = density_mesh(tp, dec, rc.stage1_grid, level);
    }
    if (stage1.empty()) {
      throw StageError("refine", "stage-1 density is empty (peak " + std::to_string(peak) + ")");
    }
    refine::write_obj(out / "stage1.obj", stage1);

    triplane::RenderOptions ro;
    ro.samples = cfg_.fit.samples;
    const int res = rc.refine.sds.resolution;
    std::vector<refine::ReferenceView> views;
    for (const auto& cam : orbit_cameras(rc.reference_views, 20.0, res)) {
      views.push_back({cam, triplane::render_image(tp, dec, cam, ro)});
    }
    auto renderer = [&tp, &dec, ro](const Camera& cam) { return triplane::render_image(tp, dec, cam, ro); };
    const auto sched = diffusion::build_schedule(1000);
    const refine::ReferenceRenderScore pixel(renderer, rc.sigma_d, sched, refine::ScoreMode::PixelSuperRes);
    const refine::ReferenceRenderScore latent(renderer, rc.sigma_d, sched, refine::ScoreMode::Latent,
                                              std::make_shared<refine::AvgPoolCodec>(rc.codec_factor));
    refine::RefineConfig cfg = rc.refine;
    cfg.seed = seed;
    std::string last;
    auto progress = [&](const std::string& s, int it, int total) {
      const int every = std::max(1, total / 4);
      if (s != last || it % every == 0) log_ << "[refine] " << s << " " << it << "/" << total << std::endl;
      last = s;
    };
    const auto result =
        refine::refine_pipeline(stage1, views, cfg_.sample.prompt, &latent, pixel, cfg, progress);
    refine::write_obj(out / "refined.obj", result.mesh);
    refine::write_ply(out / "refined.ply", result.mesh);
    const nlohmann::json info = {{"faces", result.mesh.faces.size()},
                                 {"vertices", result.mesh.vertices.size()},
                                 {"stage1_faces", stage1.faces.size()},
                                 {"stage1_level", level},
                                 {"latent_applied", result.latent_applied},
                                 {"pixel_applied", result.pixel_applied},
                                 {"skipped", result.skipped},
                                 {"watertight", refine::is_watertight(result.mesh)}};
    write_json(out / "info.json", info);
    return info;
  }
  throw std::invalid_argument("unknown stage '" + stage + "'");
}

const std::vector<std::string>& eval_report_keys() {
  static const std::vector<std::string> k = {"fitting_psnr",       "fitting_psnr_mean", "vae_psnr",
                                             "vae_psnr_mean",      "vae_psnr_threshold", "vae_psnr_pass",
                                             "latent_stats",       "sampling_hash",     "sampling_deterministic"};
  return k;
}

nlohmann::json evaluate(Orchestrator& orch) {
  std::vector<std::string> missing;
  std::map<std::string, ArtifactRecord> rec;
  for (const std::string s : {"data", "fit", "vae", "ldm"}) {
    if (auto r = orch.cached(s)) rec[s] = *r;
    else missing.push_back(s);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw std::runtime_error("missing artifacts for stages: " + list);
  }
  const PipelineConfig& cfg = orch.config();
  const auto samples = load_samples(rec["data"]);
  const auto planes = load_planes(rec["fit"], samples);
  const auto dec = triplane::load_decoder(rec["fit"].dir / "decoder");
  const auto model = vae::load_vae(rec["vae"].dir / "vae");

  nlohmann::json report;
  nlohmann::json fit_psnr = nlohmann::json::object(), vae_psnr = nlohmann::json::object();
  double fit_mean = 0, vae_mean = 0;
  const double n = static_cast<double>(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double fp = fit::sample_psnr(planes[i], dec, samples[i], cfg.fit.samples);
    const double vp = fit::sample_psnr(vae::reconstruct(model, planes[i]), dec, samples[i], cfg.fit.samples);
    fit_psnr[samples[i].id] = fp;
    vae_psnr[samples[i].id] = vp;
    fit_mean += fp / n;
    vae_mean += vp / n;
  }
  report["fitting_psnr"] = fit_psnr;
  report["fitting_psnr_mean"] = fit_mean;
  report["vae_psnr"] = vae_psnr;
  report["vae_psnr_mean"] = vae_mean;
  report["vae_psnr_threshold"] = kVaePsnrThreshold;
  report["vae_psnr_pass"] = vae_mean >= kVaePsnrThreshold;

  const auto bundle = num::load_bundle(rec["vae"].dir / "latents");
  std::vector<Tensor> latents;
  for (const auto& [id, t] : bundle) latents.push_back(t);
  const auto stats = vae::compute_latent_stats(latents);
  report["latent_stats"] = {{"mean", stats.mean}, {"std", stats.std}};

  const auto den = diffusion::Denoiser::load(rec["ldm"].dir / "denoiser");
  const auto e = diffusion::embed_caption(cfg.sample.prompt);
  const auto sched = cfg.ldm.schedule();
  const Tensor a = diffusion::ddim_sample(den, e, sched, latent_shape(cfg), cfg.sample.ddim_steps,
                                          cfg.sample.guidance, cfg.seed);
  const Tensor b = diffusion::ddim_sample(den, e, sched, latent_shape(cfg), cfg.sample.ddim_steps,
                                          cfg.sample.guidance, cfg.seed);
  report["sampling_hash"] = tensor_sha(a);
  report["sampling_deterministic"] = tensor_sha(a) == tensor_sha(b);
  return report;
}

refine::Mesh density_mesh(const triplane::TriPlane& tp, const triplane::SharedDecoder& dec, int n, double threshold,
                          double* max_density) {
  auto grid = refine::SdfGrid::zeros(n, {-1, -1, -1}, 2.0 / (n - 1));
  std::vector<float> xyz;
  xyz.reserve(static_cast<std::size_t>(n) * n * n * 3);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < n; ++k) {
        const Vec3 p = grid.lattice(i, j, k);
        xyz.insert(xyz.end(), {static_cast<float>(p.x), static_cast<float>(p.y), static_cast<float>(p.z)});
      }
    }
  }
  const auto vals = triplane::decode_batch(tp, dec, xyz);
  double peak = 0;
  for (std::size_t i = 0; i < vals.size(); ++i) {
    grid.values[i] = static_cast<float>(threshold - vals[i].sigma);
    peak = std::max(peak, static_cast<double>(vals[i].sigma));
  }
  // Empty outer shell so surfaces touching the bounds still close.
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < n; ++k) {
        const bool shell = i == 0 || j == 0 || k == 0 || i == n - 1 || j == n - 1 || k == n - 1;
        if (shell) grid.values[grid.index(i, j, k)] = std::max(grid.values[grid.index(i, j, k)], 1e-3f);
      }
    }
  }
  if (max_density) *max_density = peak;
  refine::Mesh mesh = refine::marching_cubes(grid);
  if (mesh.empty()) return mesh;
  std::vector<float> vx;
  for (const auto& v : mesh.vertices) vx.insert(vx.end(), {static_cast<float>(v.x), static_cast<float>(v.y), static_cast<float>(v.z)});
  const auto colors = triplane::decode_batch(tp, dec, vx);
  mesh.colors.clear();
  for (const auto& c : colors) mesh.colors.push_back({c.rgb[0], c.rgb[1], c.rgb[2]});
  return mesh;
}

Tensor render_vertex_colors(const refine::Mesh& mesh, const Camera& cam) {
  const auto frags = refine::rasterize(mesh.vertices, mesh.faces, cam);
  Tensor img({cam.height, cam.width, 3}, 1.0f);
  for (std::size_t i = 0; i < frags.pixel.size(); ++i) {
    const auto& f = mesh.faces[frags.face[i]];
    for (int c = 0; c < 3; ++c) {
      double v = 0;
      for (int k = 0; k < 3; ++k) {
        const double col = mesh.colors.empty() ? 0.7 : (c == 0 ? mesh.colors[f[k]].x : c == 1 ? mesh.colors[f[k]].y : mesh.colors[f[k]].z);
        v += frags.bary[i][k] * col;
      }
      img[3 * static_cast<std::size_t>(frags.pixel[i]) + c] = static_cast<float>(v);
    }
  }
  return img;
}

std::vector<Camera> orbit_cameras(int n, double elevation_deg, int resolution) {
  std::vector<Camera> out;
  for (int i = 0; i < n; ++i) {
    Camera c;
    c.azimuth_deg = -180.0 + 360.0 * i / n;
    c.elevation_deg = elevation_deg;
    c.width = c.height = resolution;
    out.push_back(c);
  }
  return out;
}

}  // namespace tridiff::cli
