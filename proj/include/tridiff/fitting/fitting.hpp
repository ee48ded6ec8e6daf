#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "tridiff/synthdata/synthdata.hpp"
#include "tridiff/triplane/render.hpp"

namespace tridiff::fit {

struct FitConfig {
  float lambda_tv = 2e-3f;
  float lambda_l1 = 1e-4f;
  float lr_planes = 2e-2f;
  float lr_decoder = 2e-3f;
  int joint_steps = 2000;   // shared-decoder stage, over all objects
  int object_steps = 600;   // per-object stage, decoder frozen
  int rays_per_batch = 256;
  int samples = 32;
  int channels = 16;
  int resolution = 64;
  int split = 8;
  std::uint64_t seed = 0;
  triplane::DecoderConfig decoder;

  void validate() const;
};

struct View {
  triplane::Camera camera;
  num::Tensor image;  // H x W x 3
};

struct MultiViewSample {
  std::string id;
  std::vector<View> views;
  std::string caption;

  void validate() const;
};

/// Renders ground-truth views of a procedural object in memory.
MultiViewSample make_sample(const std::string& id, const synth::ProceduralObject& obj,
                            const std::vector<triplane::Camera>& cams);
/// One sample per object, each with n_views random cameras at the given
/// resolution. Ids are obj_0000, obj_0001 and so on.
std::vector<MultiViewSample> make_samples(const std::vector<synth::ProceduralObject>& objects, int n_views,
                                          int resolution, std::uint64_t seed);
/// Loads a manifest row's views from disk.
MultiViewSample load_sample(const synth::ManifestEntry& entry, const std::filesystem::path& root);

/// Mean over pixels of the squared RGB error, plus lambda_tv * tv + lambda_l1 * l1.
num::Var fit_loss(num::Var pred, const num::Tensor& gt, const triplane::TriPlaneVars& tp, float lambda_tv,
                  float lambda_l1);
float fit_loss(const num::Tensor& pred, const num::Tensor& gt, const triplane::TriPlane& tp, float lambda_tv,
               float lambda_l1);

/// 10 log10(1 / MSE) with MSE floored at 1e-10.
double psnr(const num::Tensor& a, const num::Tensor& b);
/// Mean PSNR of midpoint renders against every view of the sample.
double sample_psnr(const triplane::TriPlane& tp, const triplane::SharedDecoder& dec, const MultiViewSample& s,
                   int samples);

struct JointResult {
  triplane::SharedDecoder decoder;
  std::vector<triplane::TriPlane> planes;
  std::vector<float> losses;  // one per step
};

/// Optimizes one decoder together with one tri-plane per object. Each step
/// draws a random object, a random view and rays_per_batch random pixels.
/// Planes are clamped after every update. Throws NumericError on divergence.
JointResult train_shared_decoder(const std::vector<MultiViewSample>& data, const FitConfig& cfg);

/// Fits a fresh tri-plane (zeros, or `init` when given) against the frozen
/// decoder for cfg.object_steps steps.
triplane::TriPlane fit_object(const MultiViewSample& sample, const triplane::SharedDecoder& dec, const FitConfig& cfg,
                              const triplane::TriPlane* init = nullptr);

/// Fits every sample independently on `workers` threads (0 picks the
/// hardware concurrency). The decoder is shared read-only.
std::vector<triplane::TriPlane> fit_objects(const std::vector<MultiViewSample>& samples,
                                            const triplane::SharedDecoder& dec, const FitConfig& cfg,
                                            unsigned workers = 0);

}  // namespace tridiff::fit
