#include "tridiff/fitting/fitting.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <thread>
#include <stdexcept>

#include "tridiff/numerics/adam.hpp"
#include "tridiff/numerics/ops.hpp"

namespace tridiff::fit {

using num::Tensor;
using num::Var;
using triplane::Camera;
using triplane::SharedDecoder;
using triplane::TriPlane;

void FitConfig::validate() const {
  if (lambda_tv < 0 || lambda_l1 < 0) throw std::invalid_argument("fit weights must be non-negative");
  if (joint_steps < 0 || object_steps < 0) throw std::invalid_argument("fit step counts must be non-negative");
  if (rays_per_batch < 1 || samples < 2) throw std::invalid_argument("fit needs rays and >= 2 samples per ray");
}

void MultiViewSample::validate() const {
  if (views.size() < 2) throw std::invalid_argument("sample '" + id + "' needs at least 2 views");
  for (const auto& v : views) {
    if (v.image.shape() != num::Shape{v.camera.height, v.camera.width, 3}) {
      throw num::ShapeError("sample '" + id + "': image does not match its camera");
    }
    if (v.image.shape() != views[0].image.shape()) throw num::ShapeError("sample '" + id + "': mixed resolutions");
  }
}

MultiViewSample make_sample(const std::string& id, const synth::ProceduralObject& obj,
                            const std::vector<Camera>& cams) {
  MultiViewSample s;
  s.id = id;
  s.caption = obj.caption();
  for (const auto& c : cams) s.views.push_back({c, synth::render_gt(obj, c)});
  return s;
}

std::vector<MultiViewSample> make_samples(const std::vector<synth::ProceduralObject>& objects, int n_views,
                                          int resolution, std::uint64_t seed) {
  if (n_views < 2) throw std::invalid_argument("make_samples needs at least 2 views");
  num::Rng rng(seed);
  std::vector<MultiViewSample> out;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    std::vector<Camera> cams;
    for (int v = 0; v < n_views; ++v) cams.push_back(synth::sample_camera(rng, resolution));
    char id[32];
    std::snprintf(id, sizeof id, "obj_%04zu", i);
    out.push_back(make_sample(id, objects[i], cams));
  }
  return out;
}

MultiViewSample load_sample(const synth::ManifestEntry& entry, const std::filesystem::path& root) {
  MultiViewSample s;
  s.id = entry.id;
  s.caption = entry.caption;
  for (const auto& v : entry.views) s.views.push_back({v.camera, synth::read_ppm(root / v.image)});
  s.validate();
  return s;
}

Var fit_loss(Var pred, const Tensor& gt, const triplane::TriPlaneVars& tp, float lambda_tv, float lambda_l1) {
  num::Tape& tape = pred.tape();
  const std::size_t pixels = pred.numel() / 3;
  Var loss = num::mul(num::sum(num::square(num::sub(pred, tape.constant(gt.reshape(pred.shape()))))),
                      1.0f / static_cast<float>(pixels));
  if (lambda_tv > 0) loss = num::add(loss, num::mul(triplane::tv_loss(tp), lambda_tv));
  if (lambda_l1 > 0) loss = num::add(loss, num::mul(triplane::l1_loss(tp), lambda_l1));
  return loss;
}

float fit_loss(const Tensor& pred, const Tensor& gt, const TriPlane& tp, float lambda_tv, float lambda_l1) {
  if (pred.numel() != gt.numel() || pred.numel() % 3 != 0) throw num::ShapeError("fit_loss: image shapes differ");
  num::Tape tape;
  return fit_loss(tape.constant(pred.reshape({static_cast<std::int64_t>(pred.numel() / 3), 3})), gt,
                  triplane::bind(tape, tp, false), lambda_tv, lambda_l1)
      .value()
      .item();
}

double psnr(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw num::ShapeError("psnr: image shapes differ");
  double se = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    se += d * d;
  }
  const double mse = a.numel() ? se / static_cast<double>(a.numel()) : 0.0;
  return 10.0 * std::log10(1.0 / std::max(mse, 1e-10));
}

double sample_psnr(const TriPlane& tp, const SharedDecoder& dec, const MultiViewSample& s, int samples) {
  triplane::RenderOptions opts;
  opts.samples = samples;
  double total = 0.0;
  for (const auto& v : s.views) total += psnr(triplane::render_image(tp, dec, v.camera, opts), v.image);
  return s.views.empty() ? 0.0 : total / static_cast<double>(s.views.size());
}

namespace {

struct RayBatch {
  std::vector<triplane::Ray> rays;
  Tensor target;  // R x 3
};

RayBatch sample_batch(const MultiViewSample& s, int n_rays, num::Rng& rng) {
  const View& v = s.views[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(s.views.size())))];
  const int w = v.camera.width, h = v.camera.height;
  RayBatch b;
  b.target = Tensor({n_rays, 3});
  for (int i = 0; i < n_rays; ++i) {
    const auto pix = rng.uniform_int(static_cast<std::int64_t>(w) * h);
    const int col = static_cast<int>(pix % w), row = static_cast<int>(pix / w);
    b.rays.push_back(v.camera.ray(col, row));
    for (int k = 0; k < 3; ++k) b.target[static_cast<std::size_t>(3 * i + k)] = v.image[static_cast<std::size_t>(3 * pix + k)];
  }
  return b;
}

void check_finite(float loss, const std::string& what, int step) {
  if (!std::isfinite(loss)) {
    throw num::NumericError(what + " diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")");
  }
}

}  // namespace

JointResult train_shared_decoder(const std::vector<MultiViewSample>& data, const FitConfig& cfg) {
  cfg.validate();
  if (data.size() < 2) throw std::invalid_argument("shared decoder training needs at least 2 objects");
  for (const auto& s : data) s.validate();
  num::Rng rng(cfg.seed);
  JointResult out;
  out.decoder = SharedDecoder::create(cfg.channels, cfg.split, cfg.decoder, rng);
  for (std::size_t i = 0; i < data.size(); ++i) out.planes.push_back(TriPlane::zeros(cfg.channels, cfg.resolution, cfg.split));

  num::Adam dec_opt({cfg.lr_decoder});
  const auto dec_params = out.decoder.params();
  for (auto* p : dec_params) dec_opt.add(p);
  std::vector<num::Adam> plane_opts;
  for (auto& tp : out.planes) {
    plane_opts.emplace_back(num::AdamConfig{cfg.lr_planes});
    for (auto* p : tp.params()) plane_opts.back().add(p);
  }

  triplane::RenderOptions ropts;
  ropts.samples = cfg.samples;
  ropts.stratified = true;
  for (int step = 0; step < cfg.joint_steps; ++step) {
    const std::size_t obj = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(data.size())));
    const RayBatch batch = sample_batch(data[obj], cfg.rays_per_batch, rng);
    num::Tape tape;
    const auto tpv = triplane::bind(tape, out.planes[obj], true);
    const auto dv_params = num::bind_params(tape, dec_params);
    triplane::DecoderVars dv;
    dv.kind = out.decoder.kind;
    const std::size_t n_color = 2 * out.decoder.color.weights.size();
    for (std::size_t i = 0; i < dv_params.size(); i += 2) {
      auto& mlp = i < n_color ? dv.color : dv.density;
      mlp.weights.push_back(dv_params[i]);
      mlp.biases.push_back(dv_params[i + 1]);
    }
    const Var pred = triplane::render_rays(tpv, dv, batch.rays, ropts, &rng);
    const Var loss = fit_loss(pred, batch.target, tpv, cfg.lambda_tv, cfg.lambda_l1);
    check_finite(loss.value().item(), "shared decoder training", step);
    out.losses.push_back(loss.value().item());
    tape.backward(loss);
    dec_opt.step(num::collect_grads(tape, dv_params));
    const std::vector<const Tensor*> pg{&tape.grad(tpv.planes[0]), &tape.grad(tpv.planes[1]), &tape.grad(tpv.planes[2])};
    plane_opts[obj].step(pg);
    triplane::clamp_in_place(out.planes[obj]);
  }
  return out;
}

TriPlane fit_object(const MultiViewSample& sample, const SharedDecoder& dec, const FitConfig& cfg,
                    const TriPlane* init) {
  cfg.validate();
  sample.validate();
  TriPlane tp = init ? *init : TriPlane::zeros(cfg.channels, cfg.resolution, cfg.split);
  num::Rng rng(cfg.seed ^ std::hash<std::string>{}(sample.id));
  num::Adam opt({cfg.lr_planes});
  for (auto* p : tp.params()) opt.add(p);
  triplane::RenderOptions ropts;
  ropts.samples = cfg.samples;
  ropts.stratified = true;
  for (int step = 0; step < cfg.object_steps; ++step) {
    const RayBatch batch = sample_batch(sample, cfg.rays_per_batch, rng);
    num::Tape tape;
    const auto tpv = triplane::bind(tape, tp, true);
    const Var pred = triplane::render_rays(tpv, triplane::bind(tape, dec, false), batch.rays, ropts, &rng);
    const Var loss = fit_loss(pred, batch.target, tpv, cfg.lambda_tv, cfg.lambda_l1);
    check_finite(loss.value().item(), "fit_object(" + sample.id + ")", step);
    tape.backward(loss);
    const std::vector<const Tensor*> pg{&tape.grad(tpv.planes[0]), &tape.grad(tpv.planes[1]), &tape.grad(tpv.planes[2])};
    opt.step(pg);
    triplane::clamp_in_place(tp);
  }
  return tp;
}

std::vector<TriPlane> fit_objects(const std::vector<MultiViewSample>& samples, const SharedDecoder& dec,
                                  const FitConfig& cfg, unsigned workers) {
  std::vector<TriPlane> out(samples.size());
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(1, samples.size())));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < samples.size(); i = next++) {
      try {
        out[i] = fit_object(samples[i], dec, cfg);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace tridiff::fit
