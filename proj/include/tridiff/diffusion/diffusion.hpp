#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "tridiff/diffusion/schedule.hpp"
#include "tridiff/numerics/io.hpp"
#include "tridiff/numerics/tape.hpp"

namespace tridiff::diffusion {

inline constexpr int kEmbeddingWidth = 256;

/// Caption embedding. The null (unconditional) embedding is all zeros.
struct CondEmbedding {
  std::vector<float> vec;

  static CondEmbedding null() { return {std::vector<float>(kEmbeddingWidth, 0.0f)}; }
  bool is_null() const;
};

/// Signed bag of hashed lowercase alphanumeric tokens, L2-normalized.
/// Articles and connectives are skipped; text without any remaining token
/// maps to the null embedding.
CondEmbedding embed_caption(std::string_view text);
double cosine_similarity(const CondEmbedding& a, const CondEmbedding& b);

/// Anything that predicts the injected noise of x_t. Implementations must be
/// deterministic given their inputs.
class EpsilonPredictor {
 public:
  virtual ~EpsilonPredictor() = default;
  virtual num::Tensor predict(const num::Tensor& x_t, int t, const CondEmbedding& e) const = 0;
};

struct DenoiserConfig {
  int latent_channels = 8;
  int base_channels = 32;
  int time_dim = 64;    // sinusoidal table width
  int embed_dim = 128;  // hidden width of time and condition embeddings
  int T = 1000;

  void validate() const;
};

/// Two-level convolutional U-Net with residual blocks. Time and condition
/// embeddings are summed and injected as per-channel biases in every block;
/// two fixed coordinate ramps are appended to the input channels.
class Denoiser : public EpsilonPredictor {
 public:
  Denoiser() = default;
  static Denoiser create(const DenoiserConfig& cfg, num::Rng& rng);

  const DenoiserConfig& config() const { return cfg_; }
  num::TensorBundle& params() { return params_; }
  const num::TensorBundle& params() const { return params_; }

  /// Differentiable forward; `vars` holds one bound Var per parameter name.
  num::Var forward(const std::map<std::string, num::Var>& vars, num::Var x_t, int t, const CondEmbedding& e) const;
  std::map<std::string, num::Var> bind(num::Tape& tape, bool trainable) const;

  num::Tensor predict(const num::Tensor& x_t, int t, const CondEmbedding& e) const override;

  void save(const std::filesystem::path& path) const;
  static Denoiser load(const std::filesystem::path& path);

 private:
  DenoiserConfig cfg_;
  num::TensorBundle params_;
  num::Tensor time_table_;  // (T + 1) x time_dim, fixed
};

struct LdmConfig {
  DenoiserConfig denoiser;
  double beta_start = 1e-4, beta_end = 2e-2, shift = 1.0;
  float cfg_dropout = 0.10f;
  float lr = 1e-3f;
  int steps = 2000;
  int batch = 4;
  /// Decay of the weight average returned by training; 0 returns the raw weights.
  float ema_decay = 0.999f;
  std::uint64_t seed = 0;

  void validate() const;
  NoiseSchedule schedule() const { return build_schedule(denoiser.T, beta_start, beta_end, shift); }
};

struct LdmResult {
  Denoiser denoiser;
  std::vector<float> losses;
};
using ProgressFn = std::function<void(int step, float loss)>;

/// Minimizes the mean squared error between eps and eps_theta(f_t, t, e) on
/// normalized latents; each sample's condition is nulled with probability
/// cfg_dropout. Throws NumericError on divergence.
LdmResult train_ldm(const std::vector<num::Tensor>& latents, const std::vector<std::string>& captions,
                    const LdmConfig& cfg, const ProgressFn& progress = {});
/// Continues training an existing denoiser with the same configuration.
LdmResult finetune_ldm(Denoiser start, const std::vector<num::Tensor>& latents,
                       const std::vector<std::string>& captions, const LdmConfig& cfg,
                       const ProgressFn& progress = {});

/// CFG-combined prediction; g == 1 skips the unconditional pass.
num::Tensor guided_epsilon(const EpsilonPredictor& model, const num::Tensor& x_t, int t, const CondEmbedding& e,
                           double guidance);

/// Ancestral DDPM over all T steps from seeded Gaussian noise.
num::Tensor ddpm_sample(const EpsilonPredictor& model, const CondEmbedding& e, const NoiseSchedule& s,
                        const num::Shape& shape, double guidance, std::uint64_t seed);
/// Deterministic DDIM over a uniform timestep subsequence. Returns a
/// normalized latent; the caller denormalizes.
num::Tensor ddim_sample(const EpsilonPredictor& model, const CondEmbedding& e, const NoiseSchedule& s,
                        const num::Shape& shape, int n_steps = 200, double guidance = 7.5, std::uint64_t seed = 0);

}  // namespace tridiff::diffusion
