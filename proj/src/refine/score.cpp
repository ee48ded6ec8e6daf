#include "tridiff/refine/score.hpp"

#include <cmath>
#include <stdexcept>

#include "tridiff/numerics/ops.hpp"

namespace tridiff::refine {

using num::Tensor;
using num::Var;

Tensor LatentCodec::encode(const Tensor& image) const {
  num::Tape tape;
  return encode(tape.constant(image)).value();
}

AvgPoolCodec::AvgPoolCodec(int factor) : factor_(factor) {
  if (factor < 1) throw std::invalid_argument("codec factor must be positive");
}

namespace {

// H x W x 3 -> 3 x H x W as a differentiable gather.
Var hwc_to_chw(Var image) {
  const auto& s = image.shape();
  if (s.size() != 3 || s[2] != 3) throw num::ShapeError("codec: expected an H x W x 3 image");
  const std::int64_t h = s[0], w = s[1];
  std::vector<std::int32_t> rows(static_cast<std::size_t>(3 * h * w));
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t p = 0; p < h * w; ++p) rows[static_cast<std::size_t>(c * h * w + p)] = static_cast<std::int32_t>(3 * p + c);
  }
  Var flat = num::reshape(image, {3 * h * w, 1});
  return num::reshape(num::gather_rows(flat, std::move(rows)), {3, h, w});
}

}  // namespace

Var AvgPoolCodec::encode(Var image) const {
  const auto& s = image.shape();
  if (s.size() != 3 || s[0] % factor_ != 0 || s[1] % factor_ != 0) {
    throw num::ShapeError("AvgPoolCodec: image size must be divisible by the factor");
  }
  return num::avg_pool2d(hwc_to_chw(image), factor_);
}

Tensor AvgPoolCodec::decode(const Tensor& latent) const {
  if (latent.rank() != 3 || latent.dim(0) != 3) throw num::ShapeError("AvgPoolCodec: expected a 3 x h x w latent");
  const std::int64_t h = latent.dim(1), w = latent.dim(2), f = factor_;
  Tensor img({h * f, w * f, 3});
  for (std::int64_t y = 0; y < h * f; ++y) {
    for (std::int64_t x = 0; x < w * f; ++x) {
      for (std::int64_t c = 0; c < 3; ++c) {
        img[static_cast<std::size_t>((y * w * f + x) * 3 + c)] = latent[static_cast<std::size_t>((c * h + y / f) * w + x / f)];
      }
    }
  }
  return img;
}

Tensor ScoreModel::predict_view(const Tensor& x_t, int t, const diffusion::CondEmbedding& e, const ViewContext&) const {
  return predict(x_t, t, e);
}

Tensor gaussian_epsilon(const Tensor& x_t, const Tensor& mean, double sigma_d, int t, const diffusion::NoiseSchedule& s) {
  s.check_step(t);
  if (x_t.shape() != mean.shape()) throw num::ShapeError("gaussian score: input shape differs from the mean");
  const double ab = s.alpha_bar[t];
  const double sa = std::sqrt(ab);
  const double scale = std::sqrt(1.0 - ab) / (ab * sigma_d * sigma_d + 1.0 - ab);
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<float>(scale * (x_t[i] - sa * mean[i]));
  return out;
}

namespace {

void check_score_args(double sigma_d, ScoreMode mode, const std::shared_ptr<const LatentCodec>& codec) {
  if (!(sigma_d >= 0.0)) throw std::invalid_argument("sigma_d must be non-negative");
  if (mode == ScoreMode::Latent && !codec) throw std::invalid_argument("latent-mode score model needs a codec");
}

}  // namespace

AnalyticGaussianScore::AnalyticGaussianScore(Tensor mean, double sigma_d, diffusion::NoiseSchedule schedule,
                                             ScoreMode mode, std::shared_ptr<const LatentCodec> codec)
    : mean_(std::move(mean)), sigma_d_(sigma_d), schedule_(std::move(schedule)), mode_(mode), codec_(std::move(codec)) {
  check_score_args(sigma_d, mode_, codec_);
}

Tensor AnalyticGaussianScore::predict(const Tensor& x_t, int t, const diffusion::CondEmbedding&) const {
  return gaussian_epsilon(x_t, mean_, sigma_d_, t, schedule_);
}

ReferenceRenderScore::ReferenceRenderScore(Renderer mean_for, double sigma_d, diffusion::NoiseSchedule schedule,
                                           ScoreMode mode, std::shared_ptr<const LatentCodec> codec)
    : mean_for_(std::move(mean_for)), sigma_d_(sigma_d), schedule_(std::move(schedule)), mode_(mode),
      codec_(std::move(codec)) {
  check_score_args(sigma_d, mode_, codec_);
  if (!mean_for_) throw std::invalid_argument("ReferenceRenderScore needs a renderer");
}

Tensor ReferenceRenderScore::predict(const Tensor&, int, const diffusion::CondEmbedding&) const {
  throw std::logic_error("ReferenceRenderScore needs a camera; call predict_view");
}

Tensor ReferenceRenderScore::predict_view(const Tensor& x_t, int t, const diffusion::CondEmbedding&,
                                          const ViewContext& view) const {
  if (!view.camera) throw std::invalid_argument("ReferenceRenderScore: missing camera");
  Tensor mean = mean_for_(*view.camera);
  if (codec_) mean = codec_->encode(mean);
  return gaussian_epsilon(x_t, mean, sigma_d_, t, schedule_);
}

}  // namespace tridiff::refine
