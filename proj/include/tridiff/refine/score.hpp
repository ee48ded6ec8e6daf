#pragma once

#include <functional>
#include <memory>

#include "tridiff/diffusion/diffusion.hpp"
#include "tridiff/triplane/camera.hpp"

namespace tridiff::refine {

/// Differentiable image <-> latent map used by latent-space score models.
/// Images are H x W x 3; latents are whatever the codec defines.
class LatentCodec {
 public:
  virtual ~LatentCodec() = default;
  virtual num::Var encode(num::Var image) const = 0;
  virtual num::Tensor decode(const num::Tensor& latent) const = 0;
  num::Tensor encode(const num::Tensor& image) const;
};

/// Passes images through unchanged.
class IdentityCodec final : public LatentCodec {
 public:
  using LatentCodec::encode;
  num::Var encode(num::Var image) const override { return image; }
  num::Tensor decode(const num::Tensor& latent) const override { return latent; }
};

/// 3 x H/f x W/f average pool; decoding is the transposed op (a stride-f
/// transposed convolution with a constant kernel, i.e. nearest upsampling).
class AvgPoolCodec final : public LatentCodec {
 public:
  explicit AvgPoolCodec(int factor = 4);
  using LatentCodec::encode;
  num::Var encode(num::Var image) const override;
  num::Tensor decode(const num::Tensor& latent) const override;
  int factor() const { return factor_; }

 private:
  int factor_;
};

enum class ScoreMode { Latent, PixelSuperRes };

/// Per-step side information a score model may use.
struct ViewContext {
  const triplane::Camera* camera = nullptr;
  const num::Tensor* coarse = nullptr;  // pixel mode: render of the frozen coarse texture
};

/// Frozen diffusion prior used by score distillation. It never receives
/// gradients; callers only read its predictions.
class ScoreModel : public diffusion::EpsilonPredictor {
 public:
  virtual ScoreMode mode() const = 0;
  virtual const diffusion::NoiseSchedule& schedule() const = 0;
  /// Latent-mode models supply their codec; pixel models return nullptr.
  virtual const LatentCodec* codec() const { return nullptr; }
  /// Prediction with view side information. Defaults to ignoring it.
  virtual num::Tensor predict_view(const num::Tensor& x_t, int t, const diffusion::CondEmbedding& e,
                                   const ViewContext& view) const;
};

/// Exact MMSE noise predictor for data ~ N(m, sigma_d^2 I):
/// eps_hat = sqrt(1 - ab) (x_t - sqrt(ab) m) / (ab sigma_d^2 + 1 - ab).
/// The caption is ignored. In latent mode `mean` lives in latent space.
class AnalyticGaussianScore final : public ScoreModel {
 public:
  AnalyticGaussianScore(num::Tensor mean, double sigma_d, diffusion::NoiseSchedule schedule,
                        ScoreMode mode = ScoreMode::PixelSuperRes, std::shared_ptr<const LatentCodec> codec = nullptr);

  num::Tensor predict(const num::Tensor& x_t, int t, const diffusion::CondEmbedding& e) const override;
  ScoreMode mode() const override { return mode_; }
  const diffusion::NoiseSchedule& schedule() const override { return schedule_; }
  const LatentCodec* codec() const override { return codec_.get(); }
  const num::Tensor& mean() const { return mean_; }

 private:
  num::Tensor mean_;
  double sigma_d_;
  diffusion::NoiseSchedule schedule_;
  ScoreMode mode_;
  std::shared_ptr<const LatentCodec> codec_;
};

/// Gaussian score whose mean depends on the view: mean_for(camera) renders a
/// reference image (encoded through the codec in latent mode). Requires a
/// camera in the ViewContext.
class ReferenceRenderScore final : public ScoreModel {
 public:
  using Renderer = std::function<num::Tensor(const triplane::Camera&)>;
  ReferenceRenderScore(Renderer mean_for, double sigma_d, diffusion::NoiseSchedule schedule,
                       ScoreMode mode = ScoreMode::PixelSuperRes, std::shared_ptr<const LatentCodec> codec = nullptr);

  num::Tensor predict(const num::Tensor& x_t, int t, const diffusion::CondEmbedding& e) const override;
  num::Tensor predict_view(const num::Tensor& x_t, int t, const diffusion::CondEmbedding& e,
                           const ViewContext& view) const override;
  ScoreMode mode() const override { return mode_; }
  const diffusion::NoiseSchedule& schedule() const override { return schedule_; }
  const LatentCodec* codec() const override { return codec_.get(); }

 private:
  Renderer mean_for_;
  double sigma_d_;
  diffusion::NoiseSchedule schedule_;
  ScoreMode mode_;
  std::shared_ptr<const LatentCodec> codec_;
};

/// eps_hat for data ~ N(mean, sigma_d^2 I) at step t.
num::Tensor gaussian_epsilon(const num::Tensor& x_t, const num::Tensor& mean, double sigma_d, int t,
                             const diffusion::NoiseSchedule& s);

}  // namespace tridiff::refine
