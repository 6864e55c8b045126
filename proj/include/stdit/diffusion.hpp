#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "stdit/tensor.hpp"

namespace stdit {

/// Precomputed DDPM noise schedule. Public accessors take 1-based timesteps
/// t = 1..T.
class DiffusionSchedule {
 public:
  /// Schedule from explicit betas, beta_1 first.
  static DiffusionSchedule from_betas(std::vector<double> betas);

  std::size_t steps() const { return beta_.size(); }
  double beta(std::size_t t) const { return beta_[index(t)]; }
  double alpha(std::size_t t) const { return 1.0 - beta_[index(t)]; }
  double alpha_bar(std::size_t t) const { return alpha_bar_[index(t)]; }
  /// alpha_bar at t - 1, with alpha_bar_0 = 1.
  double alpha_bar_prev(std::size_t t) const { return t == 1 ? 1.0 : alpha_bar_[index(t) - 1]; }
  /// Posterior variance (1 - abar_{t-1}) / (1 - abar_t) * beta_t; zero at t = 1.
  double posterior_variance(std::size_t t) const { return posterior_var_[index(t)]; }
  /// log posterior variance with the t = 1 entry replaced by the t = 2 value.
  double posterior_log_variance_clipped(std::size_t t) const { return posterior_log_var_[index(t)]; }
  double log_beta(std::size_t t) const { return log_beta_[index(t)]; }
  /// Posterior mean = coef_x0 * x0 + coef_xt * x_t.
  double posterior_mean_coef_x0(std::size_t t) const { return coef_x0_[index(t)]; }
  double posterior_mean_coef_xt(std::size_t t) const { return coef_xt_[index(t)]; }

  const std::vector<double>& betas() const { return beta_; }
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }

 private:
  std::size_t index(std::size_t t) const;

  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
  std::vector<double> posterior_var_;
  std::vector<double> posterior_log_var_;
  std::vector<double> log_beta_;
  std::vector<double> coef_x0_;
  std::vector<double> coef_xt_;
};

/// Linear schedule beta_t = beta_min + (t - 1) / (T - 1) * (beta_max - beta_min).
DiffusionSchedule build_schedule(std::size_t steps = 1000, double beta_min = 1e-4, double beta_max = 2e-2);

/// Evenly spaced subset of the original timesteps with betas recomputed so the
/// cumulative products agree with the parent schedule at every kept step.
struct RespacedSchedule {
  DiffusionSchedule schedule;
  std::vector<std::size_t> timesteps;  // original t for respaced step 1..steps
};

RespacedSchedule respace(const DiffusionSchedule& parent, std::size_t steps);

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& eps, const DiffusionSchedule& sched);

struct PosteriorParams {
  Tensor mean;
  double variance = 0.0;
};

/// Mean and variance of q(x_{t-1} | x_t, x0). Requires t >= 2.
PosteriorParams posterior_params(const Tensor& x0, const Tensor& xt, std::size_t t, const DiffusionSchedule& sched);

/// Denoiser output: noise prediction and the variance interpolation value.
struct ModelOutput {
  Tensor eps;
  Tensor v;
};

/// Per-element log variance exp-interpolated between beta_t and the clipped
/// posterior variance: v log(beta_t) + (1 - v) log(beta_tilde_t).
Tensor model_log_variance(const Tensor& v, std::size_t t, const DiffusionSchedule& sched);

/// Mean of p(x_{t-1} | x_t) implied by an epsilon prediction.
Tensor model_mean(const Tensor& eps, const Tensor& xt, std::size_t t, const DiffusionSchedule& sched,
                  std::optional<double> clip_x0 = std::nullopt);

/// Elementwise KL(N(mean1, exp(logvar1)) || N(mean2, exp(logvar2))) in nats.
Tensor gaussian_kl(const Tensor& mean1, const Tensor& logvar1, const Tensor& mean2, const Tensor& logvar2);

/// Elementwise -log P(x) for x in [-1, 1] quantized to 256 bins under
/// N(mean, exp(2 log_scale)). Differentiable in mean and log_scale.
Tensor discretized_gaussian_nll(const Tensor& x, const Tensor& mean, const Tensor& log_scale);

/// Mean squared error between predicted and true noise.
Tensor loss_simple(const ModelOutput& out, const Tensor& eps);

/// Mean per-element variational bound term at step t. The model mean is
/// built from a stop-gradient copy of out.eps, so only out.v receives
/// gradient. t = 1 uses the discretized decoder likelihood.
Tensor loss_vlb(const ModelOutput& out, const Tensor& x0, const Tensor& xt, std::size_t t,
                const DiffusionSchedule& sched);

/// Model call used by the sampler: (x_t, original timestep) -> output.
using Denoiser = std::function<ModelOutput(const Tensor& xt, std::size_t t)>;

struct SampleOptions {
  std::size_t steps = 250;
  std::uint64_t seed = 0;
  /// Clamp the implied x0 to [-clip, clip] at every step.
  std::optional<double> clip_x0;
};

/// Ancestral DDPM sampling from x_T ~ N(0, I) over a respaced schedule.
/// Exactly `options.steps` model evaluations; no noise on the final step.
Tensor ddpm_sample(const Denoiser& model, const Shape& shape, const DiffusionSchedule& sched,
                   const SampleOptions& options, DType dtype = DType::f32);

}  // namespace stdit
