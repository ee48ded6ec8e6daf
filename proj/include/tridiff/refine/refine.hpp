#pragma once

#include <functional>
#include <optional>
#include <stdexcept>
#include <string>

#include "tridiff/numerics/adam.hpp"
#include "tridiff/refine/hashgrid.hpp"
#include "tridiff/refine/mesh.hpp"
#include "tridiff/refine/raster.hpp"
#include "tridiff/refine/score.hpp"
#include "tridiff/refine/sdf.hpp"

namespace tridiff::refine {

inline constexpr const char* kPositiveSuffix =
    "best quality, extremely detailed, masterpiece, high resolution, high quality";
inline constexpr const char* kNegativePrompt =
    "blur, lowres, cropped, low quality, worst quality, ugly, dark, shadow, oversaturated";

/// "front" for |azimuth| <= 60, "back" for |azimuth| >= 120, else "side"
/// (azimuth wrapped to (-180, 180]).
std::string view_direction(double azimuth_deg);
/// "<prompt>, <direction> view, <suffix>"; the suffix is skipped when empty.
std::string decorate_prompt(const std::string& prompt, double azimuth_deg, const std::string& suffix = kPositiveSuffix);

struct LearningRates {
  float texture = 1e-2f;   // hash tables
  float mlp = 1e-3f;       // texture head
  float geometry = 1e-4f;  // SDF values and offsets
};

/// Optimizable stage-2 representation. With a grid the surface is re-extracted
/// by marching cubes every step; without one `surface` is a fixed mesh and only
/// the texture is optimized.
struct RefineState {
  std::optional<SdfGrid> grid;
  Mesh surface;
  HashGridTexture texture;
  std::optional<HashGridTexture> coarse;  // frozen texture for pixel-space conditioning
  std::vector<num::AdamState> moments;    // texture params, then grid values and offsets
  std::int64_t iteration = 0;

  /// The texture box matches the grid's lattice extent.
  static RefineState from_grid(SdfGrid grid, HashGridConfig cfg, std::uint64_t seed);
  /// The texture box is the mesh bounds padded by 5%.
  static RefineState from_mesh(Mesh surface, HashGridConfig cfg, std::uint64_t seed);

  Mesh extract_mesh() const;
  /// Snapshots the current texture as the coarse reference.
  void freeze_coarse() { coarse = texture; }
};

/// Rasterize the current surface and shade covered pixels with the texture
/// (or the coarse snapshot); white background. H x W x 3.
num::Tensor render_refined(const RefineState& state, const triplane::Camera& cam);
num::Tensor render_coarse(const RefineState& state, const triplane::Camera& cam);

struct ReferenceView {
  triplane::Camera camera;
  num::Tensor image;  // H x W x 3 matching the camera
};

struct DistillOptions {
  int iters = 512;
  LearningRates lr;
  std::uint64_t seed = 0;
};
/// MSE fit of the texture alone to the given renders, one random view per
/// iteration. Returns the per-iteration losses. Throws std::invalid_argument
/// with fewer than 4 views and NumericError on divergence.
std::vector<float> texture_distill_init(RefineState& state, const std::vector<ReferenceView>& views,
                                        const DistillOptions& opts = {});

struct SdsOptions {
  double t_min = 0.02;
  double t_max = 0.98;
  /// Classifier-free guidance against `negative`; 1 disables the second pass.
  double guidance = 1.0;
  diffusion::CondEmbedding negative = diffusion::CondEmbedding::null();
  LearningRates lr;
  bool optimize_geometry = true;
  /// w(t); defaults to the schedule's posterior variance sigma_t^2.
  std::function<double(const diffusion::NoiseSchedule&, int)> weight;
  int resolution = 128;
  double elevation_min = -10.0;
  double elevation_max = 45.0;
};

struct SdsStep {
  bool applied = false;
  int t = 0;
  double weight = 0;
  std::string skipped;  // reason when not applied
};

/// Random orbit camera at radius 2.5 with fov 49.1.
triplane::Camera sample_refine_camera(num::Rng& rng, const SdsOptions& opts);

/// One latent-space step: render, encode through the score model's codec,
/// noise to z_t, and back-propagate w(t) (eps_hat - eps) into the state.
/// `camera` overrides the sampled pose. Rng(seed) draws the pose (unless
/// given), then t, then the noise.
SdsStep sds_latent_step(RefineState& state, const ScoreModel& score, const diffusion::CondEmbedding& e,
                        const SdsOptions& opts, std::uint64_t seed, const triplane::Camera* camera = nullptr);
/// One pixel-space step conditioned on the coarse render from the same pose.
/// Freezes the coarse texture on first use.
SdsStep sds_pixel_step(RefineState& state, const ScoreModel& score, const diffusion::CondEmbedding& e,
                       const SdsOptions& opts, std::uint64_t seed, const triplane::Camera* camera = nullptr);

struct RefineConfig {
  int sdf_resolution = 32;
  std::size_t max_faces = 5000;
  HashGridConfig texture;
  int distill_iters = 512;
  int latent_iters = 800;
  int pixel_iters = 400;
  bool skip_latent = false;
  SdsOptions sds;
  SmoothOptions smoothing;
  std::string positive_suffix = kPositiveSuffix;
  std::string negative_prompt = kNegativePrompt;
  std::uint64_t seed = 0;

  /// 128^3 grid, 512 x 512 renders, 5e4 faces and larger hash tables.
  static RefineConfig full();
  void validate() const;
};

/// Failure inside one pipeline stage; what() starts with "[stage]".
class RefineError : public std::runtime_error {
 public:
  RefineError(std::string stage, const std::string& what)
      : std::runtime_error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct RefineResult {
  Mesh mesh;  // decimated, smoothed, with baked vertex colors
  RefineState state;
  std::vector<float> distill_losses;
  int latent_applied = 0;
  int pixel_applied = 0;
  int skipped = 0;
};

using RefineProgress = std::function<void(const std::string& stage, int iter, int total)>;

/// remove_floaters -> mesh_to_sdf -> texture_distill_init -> latent SDS ->
/// pixel SDS -> marching cubes, decimation, smoothing and color baking.
/// `latent` may be null when the latent phase is skipped.
RefineResult refine_pipeline(const Mesh& mesh, const std::vector<ReferenceView>& stage1, const std::string& prompt,
                             const ScoreModel* latent, const ScoreModel& pixel, const RefineConfig& cfg,
                             const RefineProgress& progress = {});

}  // namespace tridiff::refine
