#include "tridiff/diffusion/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace tridiff::diffusion {

using num::Tensor;

void NoiseSchedule::check_step(int t) const {
  if (t < 1 || t > T) throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
}

NoiseSchedule build_schedule(int T, double beta_start, double beta_end, double shift) {
  if (T < 2) throw std::invalid_argument("schedule needs T >= 2");
  if (!(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("schedule needs 0 < beta_start < beta_end < 1");
  }
  if (!(shift > 0.0) || !std::isfinite(shift)) throw std::invalid_argument("SNR shift must be positive");
  NoiseSchedule s;
  s.T = T;
  s.shift = shift;
  s.beta.assign(T + 1, 0.0);
  s.alpha.assign(T + 1, 1.0);
  s.alpha_bar.assign(T + 1, 1.0);
  s.posterior_var.assign(T + 1, 0.0);
  for (int t = 1; t <= T; ++t) {
    s.beta[t] = beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
  }
  if (shift != 1.0) {
    const double inv = 1.0 / (shift * shift);
    for (int t = 1; t <= T; ++t) {
      const double snr = s.alpha_bar[t] / (1.0 - s.alpha_bar[t]) * inv;
      s.alpha_bar[t] = snr / (1.0 + snr);
      s.alpha[t] = s.alpha_bar[t] / s.alpha_bar[t - 1];
      s.beta[t] = 1.0 - s.alpha[t];
    }
  }
  for (int t = 1; t <= T; ++t) {
    s.posterior_var[t] = (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t];
  }
  return s;
}

namespace {

Tensor affine(const Tensor& a, double ca, const Tensor& b, double cb) {
  if (a.shape() != b.shape()) throw num::ShapeError("diffusion: operand shapes differ");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = static_cast<float>(ca * a[i] + cb * b[i]);
  return out;
}

}  // namespace

Tensor q_sample(const Tensor& f0, int t, const Tensor& eps, const NoiseSchedule& s) {
  s.check_step(t);
  return affine(f0, std::sqrt(s.alpha_bar[t]), eps, std::sqrt(1.0 - s.alpha_bar[t]));
}

Tensor posterior_mean(const Tensor& f_t, int t, const Tensor& eps_hat, const NoiseSchedule& s) {
  s.check_step(t);
  const double ia = 1.0 / std::sqrt(s.alpha[t]);
  return affine(f_t, ia, eps_hat, -ia * s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]));
}

Tensor ddpm_step(const Tensor& f_t, int t, const Tensor& eps_hat, const NoiseSchedule& s, const Tensor& noise) {
  Tensor mean = posterior_mean(f_t, t, eps_hat, s);
  if (t == 1) return mean;
  return affine(mean, 1.0, noise, std::sqrt(s.posterior_var[t]));
}

Tensor ddim_step(const Tensor& x_t, int t, int t_prev, const Tensor& eps_hat, const NoiseSchedule& s) {
  s.check_step(t);
  if (t_prev < 0 || t_prev >= t) throw std::out_of_range("ddim_step: t_prev must lie in [0, t)");
  const double ab = s.alpha_bar[t], ap = s.alpha_bar[t_prev];
  // x0 = (x_t - sqrt(1 - ab) eps) / sqrt(ab); x_prev = sqrt(ap) x0 + sqrt(1 - ap) eps.
  const double c_x = std::sqrt(ap / ab);
  const double c_e = std::sqrt(1.0 - ap) - std::sqrt(ap) * std::sqrt(1.0 - ab) / std::sqrt(ab);
  return affine(x_t, c_x, eps_hat, c_e);
}

std::vector<int> ddim_timesteps(int T, int n_steps) {
  if (n_steps < 1 || n_steps > T) throw std::invalid_argument("ddim needs 1 <= n_steps <= T");
  std::vector<int> ts;
  for (int i = n_steps; i >= 1; --i) {
    ts.push_back(static_cast<int>((static_cast<long long>(i) * T + n_steps / 2) / n_steps));
  }
  return ts;
}

Tensor cfg_epsilon(const Tensor& eps_cond, const Tensor& eps_uncond, double guidance) {
  return affine(eps_uncond, 1.0 - guidance, eps_cond, guidance);
}

int sample_sds_timestep(num::Rng& rng, int T, double lo, double hi) {
  if (!(0.0 <= lo && lo < hi && hi <= 1.0)) throw std::invalid_argument("sds timestep range must satisfy 0 <= lo < hi <= 1");
  const double u = rng.uniform(lo, hi);
  const int t = static_cast<int>(std::lround(u * T));
  return std::min(T, std::max(1, t));
}

}  // namespace tridiff::diffusion
