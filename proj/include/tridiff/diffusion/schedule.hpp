#pragma once

#include <vector>

#include "tridiff/numerics/rng.hpp"
#include "tridiff/numerics/tensor.hpp"

namespace tridiff::diffusion {

/// Discrete schedule indexed t = 1..T; index 0 holds the clean state
/// (alpha_bar = 1, beta = 0). Stored in double.
struct NoiseSchedule {
  int T = 0;
  double shift = 1.0;
  std::vector<double> beta, alpha, alpha_bar, posterior_var;

  double snr(int t) const { return alpha_bar[t] / (1.0 - alpha_bar[t]); }
  void check_step(int t) const;
};

/// Linear betas, then alpha_bar remapped so SNR(t) = SNR_linear(t) / shift^2
/// (alpha_bar' = SNR' / (1 + SNR')), with beta and alpha re-derived from the
/// remapped alpha_bar. shift == 1 keeps the linear schedule untouched.
NoiseSchedule build_schedule(int T = 1000, double beta_start = 1e-4, double beta_end = 2e-2, double shift = 1.0);

/// sqrt(alpha_bar_t) f0 + sqrt(1 - alpha_bar_t) eps.
num::Tensor q_sample(const num::Tensor& f0, int t, const num::Tensor& eps, const NoiseSchedule& s);

/// (f_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t).
num::Tensor posterior_mean(const num::Tensor& f_t, int t, const num::Tensor& eps_hat, const NoiseSchedule& s);
/// posterior_mean + sigma_t noise; the noise term is dropped at t = 1.
num::Tensor ddpm_step(const num::Tensor& f_t, int t, const num::Tensor& eps_hat, const NoiseSchedule& s,
                      const num::Tensor& noise);
/// Deterministic (eta = 0) DDIM update from t to t_prev < t (t_prev = 0 gives
/// the clean estimate).
num::Tensor ddim_step(const num::Tensor& x_t, int t, int t_prev, const num::Tensor& eps_hat, const NoiseSchedule& s);
/// Uniform descending subsequence of n_steps timesteps ending at T.
std::vector<int> ddim_timesteps(int T, int n_steps);

/// eps_uncond + g (eps_cond - eps_uncond), evaluated as (1 - g) eps_uncond +
/// g eps_cond so that g = 1 and g = 0 return their operand exactly.
num::Tensor cfg_epsilon(const num::Tensor& eps_cond, const num::Tensor& eps_uncond, double guidance);

/// Timestep for SDS: u ~ U(lo, hi) mapped to round(u * T), clamped to [1, T].
int sample_sds_timestep(num::Rng& rng, int T, double lo = 0.02, double hi = 0.98);

}  // namespace tridiff::diffusion
