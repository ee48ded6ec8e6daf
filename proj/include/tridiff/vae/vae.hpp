#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tridiff/numerics/rng.hpp"
#include "tridiff/numerics/tape.hpp"
#include "tridiff/triplane/triplane.hpp"

namespace tridiff::vae {

inline constexpr float kLogvarMin = -30.0f;
inline constexpr float kLogvarMax = 20.0f;
inline constexpr float kStdFloor = 1e-6f;

/// The three planes side by side along the width axis: C x R x 3R in the
/// order xy, yz, xz. `split` travels along so unroll can rebuild the tri-plane.
struct RolledPlane {
  num::Tensor data;
  int split = 0;
};

RolledPlane rollout(const triplane::TriPlane& tp);
triplane::TriPlane unroll(const RolledPlane& rp);
/// Differentiable unroll, used to put the TV term on decoded planes.
triplane::TriPlaneVars unroll(num::Var rolled, int split);

struct VaeConfig {
  int in_channels = 16;
  int latent_channels = 8;
  /// Channel width of each stride-2 stage; the stage count sets the spatial
  /// reduction (2 stages: 64 x 192 -> 16 x 48).
  std::vector<int> stage_channels{32, 64};
  float kl_weight = 1e-5f;
  float tv_weight = 2e-3f;
  float lr = 2e-3f;
  int steps = 3000;
  std::uint64_t seed = 0;

  void validate() const;
  /// Latent shape for a rolled input of shape C x H x W.
  num::Shape latent_shape(const num::Shape& rolled) const;
};

/// 3x3 convolution; decoder layers upsample (nearest, x2) before convolving.
struct ConvLayer {
  num::Tensor weight;  // O x C x 3 x 3
  num::Tensor bias;    // O
  int stride = 1;
  bool upsample = false;
};

struct Vae {
  VaeConfig config;
  std::vector<ConvLayer> encoder;  // last layer emits mu and logvar stacked
  std::vector<ConvLayer> decoder;

  static Vae create(const VaeConfig& cfg, num::Rng& rng);
  std::vector<num::Tensor*> params();
  std::vector<const num::Tensor*> params() const;
};

struct VaeVars {
  std::vector<num::Var> encoder_w, encoder_b, decoder_w, decoder_b;
};
VaeVars bind(num::Tape& tape, const Vae& vae, bool trainable);

struct Encoded {
  num::Var mu, logvar, z;  // each latent_channels x h x w
};
/// With rng the latent is reparameterized (z = mu + exp(logvar / 2) eps);
/// without it z = mu.
Encoded encode(const Vae& vae, const VaeVars& vars, num::Var rolled, num::Rng* rng);
num::Var decode(const Vae& vae, const VaeVars& vars, num::Var z);

/// Inference helpers on plain tensors (deterministic encoder).
num::Tensor encode(const Vae& vae, const RolledPlane& rp);
RolledPlane decode(const Vae& vae, const num::Tensor& latent, int split);
triplane::TriPlane reconstruct(const Vae& vae, const triplane::TriPlane& tp);

/// KL(N(mu, exp(logvar)) || N(0, 1)), averaged over latent elements.
num::Var kl_divergence(num::Var mu, num::Var logvar);
/// Mean squared reconstruction error + kl_weight * KL + tv_weight * tv(decoded).
num::Var vae_loss(num::Var x, num::Var x_hat, num::Var mu, num::Var logvar, int split, float kl_weight,
                  float tv_weight);

struct TrainResult {
  Vae vae;
  std::vector<float> losses;
};
using ProgressFn = std::function<void(int step, float loss)>;
/// Adam over single-sample steps cycling through a shuffled order.
TrainResult train_vae(const std::vector<triplane::TriPlane>& data, const VaeConfig& cfg,
                      const ProgressFn& progress = {});

struct LatentStats {
  std::vector<float> mean, std;  // one entry per channel
};
/// Population mean and std per channel over every latent and position.
LatentStats compute_latent_stats(const std::vector<num::Tensor>& latents);
num::Tensor normalize(const num::Tensor& latent, const LatentStats& stats);
num::Tensor denormalize(const num::Tensor& latent, const LatentStats& stats);

/// Weights bundle plus `<path>.json` index; the config lands in a meta file
/// `<path>.meta.json`.
void save_vae(const std::filesystem::path& path, const Vae& vae);
Vae load_vae(const std::filesystem::path& path);
/// Stats are stamped with the SHA-256 of the checkpoint they belong to.
void save_latent_stats(const std::filesystem::path& path, const LatentStats& stats, const std::string& checkpoint_sha);
LatentStats load_latent_stats(const std::filesystem::path& path, std::string* checkpoint_sha = nullptr);

}  // namespace tridiff::vae
