#include "stdit/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "stdit/autograd.hpp"
#include "stdit/ops.hpp"
#include "stdit/random.hpp"

namespace stdit {

namespace {

void check_timestep(std::size_t t, const DiffusionSchedule& sched) {
  if (t < 1 || t > sched.steps()) {
    throw ContractError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(sched.steps()) + "]");
  }
}

void check_same_shape(const char* what, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                     " differ");
  }
}

double std_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }
double std_normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI); }

}  // namespace

std::size_t DiffusionSchedule::index(std::size_t t) const {
  if (t < 1 || t > beta_.size()) {
    throw ContractError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(beta_.size()) + "]");
  }
  return t - 1;
}

DiffusionSchedule DiffusionSchedule::from_betas(std::vector<double> betas) {
  if (betas.size() < 2) throw ContractError("schedule needs at least 2 steps");
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw ContractError("schedule betas must lie in (0, 1)");
  }
  DiffusionSchedule s;
  const std::size_t n = betas.size();
  s.beta_ = std::move(betas);
  s.alpha_bar_.resize(n);
  s.posterior_var_.resize(n);
  s.posterior_log_var_.resize(n);
  s.log_beta_.resize(n);
  s.coef_x0_.resize(n);
  s.coef_xt_.resize(n);
  double prod = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double prev = prod;
    prod *= 1.0 - s.beta_[i];
    s.alpha_bar_[i] = prod;
    s.posterior_var_[i] = s.beta_[i] * (1.0 - prev) / (1.0 - prod);
    s.log_beta_[i] = std::log(s.beta_[i]);
    s.coef_x0_[i] = s.beta_[i] * std::sqrt(prev) / (1.0 - prod);
    s.coef_xt_[i] = (1.0 - prev) * std::sqrt(1.0 - s.beta_[i]) / (1.0 - prod);
  }
  for (std::size_t i = 0; i < n; ++i) {
    s.posterior_log_var_[i] = std::log(i == 0 ? s.posterior_var_[1] : s.posterior_var_[i]);
  }
  return s;
}

DiffusionSchedule build_schedule(std::size_t steps, double beta_min, double beta_max) {
  if (steps < 2) throw ContractError("build_schedule: T must be >= 2");
  if (!(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0)) {
    throw ContractError("build_schedule: require 0 < beta_min < beta_max < 1");
  }
  std::vector<double> betas(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    betas[i] = beta_min + static_cast<double>(i) / static_cast<double>(steps - 1) * (beta_max - beta_min);
  }
  betas.back() = beta_max;
  return DiffusionSchedule::from_betas(std::move(betas));
}

RespacedSchedule respace(const DiffusionSchedule& parent, std::size_t steps) {
  const std::size_t total = parent.steps();
  if (steps < 2 || steps > total) {
    throw ContractError("respace: steps must be in [2, " + std::to_string(total) + "], got " + std::to_string(steps));
  }
  RespacedSchedule r{DiffusionSchedule{}, {}};
  const double stride = static_cast<double>(total - 1) / static_cast<double>(steps - 1);
  for (std::size_t i = 0; i < steps; ++i) {
    r.timesteps.push_back(static_cast<std::size_t>(std::llround(static_cast<double>(i) * stride)) + 1);
  }
  std::vector<double> betas;
  double last = 1.0;
  for (std::size_t t : r.timesteps) {
    betas.push_back(1.0 - parent.alpha_bar(t) / last);
    last = parent.alpha_bar(t);
  }
  r.schedule = DiffusionSchedule::from_betas(std::move(betas));
  return r;
}

Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& eps, const DiffusionSchedule& sched) {
  check_timestep(t, sched);
  check_same_shape("q_sample", x0, eps);
  const double ab = sched.alpha_bar(t);
  return add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

PosteriorParams posterior_params(const Tensor& x0, const Tensor& xt, std::size_t t, const DiffusionSchedule& sched) {
  check_timestep(t, sched);
  if (t < 2) throw ContractError("posterior_params: t = 1 has no Gaussian posterior; use the decoder term");
  check_same_shape("posterior_params", x0, xt);
  return {add(scale(x0, sched.posterior_mean_coef_x0(t)), scale(xt, sched.posterior_mean_coef_xt(t))),
          sched.posterior_variance(t)};
}

Tensor model_log_variance(const Tensor& v, std::size_t t, const DiffusionSchedule& sched) {
  check_timestep(t, sched);
  const double lo = sched.posterior_log_variance_clipped(t);
  const double hi = sched.log_beta(t);
  return add_scalar(scale(v, hi - lo), lo);
}

Tensor model_mean(const Tensor& eps, const Tensor& xt, std::size_t t, const DiffusionSchedule& sched,
                  std::optional<double> clip_x0) {
  check_timestep(t, sched);
  check_same_shape("model_mean", eps, xt);
  const double ab = sched.alpha_bar(t);
  Tensor x0 = scale(sub(xt, scale(eps, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
  if (clip_x0) {
    const double c = *clip_x0;
    x0 = dispatch(x0.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto v = x0.data<T>();
      std::vector<T> out(v.begin(), v.end());
      for (auto& e : out) e = std::clamp(e, static_cast<T>(-c), static_cast<T>(c));
      return Tensor::from(x0.shape(), std::move(out));
    });
  }
  return add(scale(x0, sched.posterior_mean_coef_x0(t)), scale(xt, sched.posterior_mean_coef_xt(t)));
}

Tensor gaussian_kl(const Tensor& mean1, const Tensor& logvar1, const Tensor& mean2, const Tensor& logvar2) {
  // 0.5 * (expm1(d) - d + (m1 - m2)^2 / var2) with d = logvar1 - logvar2;
  // expm1(d) - d is never negative in floating point.
  Tensor d = sub(logvar1, logvar2);
  Tensor var_term = sub(expm1(d), d);
  Tensor mean_term = mul(square(sub(mean1, mean2)), exp(neg(logvar2)));
  return scale(add(var_term, mean_term), 0.5);
}

Tensor discretized_gaussian_nll(const Tensor& x, const Tensor& mean, const Tensor& log_scale) {
  const Shape shape = broadcast_shapes(broadcast_shapes(x.shape(), mean.shape()), log_scale.shape());
  const Tensor xb = broadcast_to(x, shape);
  const Tensor mb = broadcast_to(mean, shape);
  const Tensor lb = broadcast_to(log_scale, shape);
  const std::size_t n = numel(shape);
  constexpr double kHalfBin = 1.0 / 255.0;
  constexpr double kFloor = 1e-12;
  std::vector<double> nll(n), d_mean(n), d_log_scale(n);
  const auto xv = xb.to_vector();
  const auto mv = mb.to_vector();
  const auto lv = lb.to_vector();
  for (std::size_t i = 0; i < n; ++i) {
    const double s = std::exp(-lv[i]);
    const double c = xv[i] - mv[i];
    const double a = s * (c - kHalfBin);
    const double b = s * (c + kHalfBin);
    double p;
    double dp_dls;
    double dp_dm;
    if (xv[i] < -0.999) {
      p = std_normal_cdf(b);
      dp_dls = -b * std_normal_pdf(b);
      dp_dm = -s * std_normal_pdf(b);
    } else if (xv[i] > 0.999) {
      p = 0.5 * std::erfc(a / std::sqrt(2.0));
      dp_dls = a * std_normal_pdf(a);
      dp_dm = s * std_normal_pdf(a);
    } else {
      p = std_normal_cdf(b) - std_normal_cdf(a);
      dp_dls = -b * std_normal_pdf(b) + a * std_normal_pdf(a);
      dp_dm = -s * std_normal_pdf(b) + s * std_normal_pdf(a);
    }
    if (p < kFloor) {
      nll[i] = -std::log(kFloor);
      d_mean[i] = 0.0;
      d_log_scale[i] = 0.0;
    } else {
      nll[i] = -std::log(p);
      d_mean[i] = -dp_dm / p;
      d_log_scale[i] = -dp_dls / p;
    }
  }
  const DType dt = mean.dtype();
  auto storage = dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    return std::make_shared<detail::Buffer>(std::vector<T>(nll.begin(), nll.end()));
  });
  auto dm = Tensor::from_doubles(shape, d_mean, dt);
  auto dl = Tensor::from_doubles(shape, d_log_scale, dt);
  return detail::make_op("discretized_gaussian_nll", shape, std::move(storage), {xb, mb, lb},
                         [dm, dl](const Tensor& g, const Tensor&) -> std::vector<Tensor> {
                           return {Tensor{}, mul(g, dm), mul(g, dl)};
                         });
}

Tensor loss_simple(const ModelOutput& out, const Tensor& eps) {
  check_same_shape("loss_simple", out.eps, eps);
  return mean(square(sub(out.eps, eps)));
}

Tensor loss_vlb(const ModelOutput& out, const Tensor& x0, const Tensor& xt, std::size_t t,
                const DiffusionSchedule& sched) {
  check_timestep(t, sched);
  check_same_shape("loss_vlb", out.eps, xt);
  check_same_shape("loss_vlb", out.v, xt);
  check_same_shape("loss_vlb", x0, xt);
  const Tensor mean_pred = model_mean(stop_gradient(out.eps), stop_gradient(xt), t, sched);
  const Tensor log_var = model_log_variance(out.v, t, sched);
  if (t == 1) {
    return mean(discretized_gaussian_nll(stop_gradient(x0), mean_pred, scale(log_var, 0.5)));
  }
  Tensor true_mean;
  {
    NoGradGuard no_grad;
    true_mean = posterior_params(x0.detach(), xt.detach(), t, sched).mean;
  }
  const Tensor true_log_var = Tensor::scalar(sched.posterior_log_variance_clipped(t), xt.dtype());
  return mean(gaussian_kl(true_mean, true_log_var, mean_pred, log_var));
}

Tensor ddpm_sample(const Denoiser& model, const Shape& shape, const DiffusionSchedule& sched,
                   const SampleOptions& options, DType dtype) {
  const RespacedSchedule plan = options.steps == sched.steps()
                                    ? RespacedSchedule{sched, [&] {
                                                         std::vector<std::size_t> ts(sched.steps());
                                                         for (std::size_t i = 0; i < ts.size(); ++i) ts[i] = i + 1;
                                                         return ts;
                                                       }()}
                                    : respace(sched, options.steps);
  const DiffusionSchedule& s = plan.schedule;
  NoGradGuard no_grad;
  Rng rng(options.seed);
  Tensor x = randn(shape, rng, dtype);
  for (std::size_t j = s.steps(); j >= 1; --j) {
    const ModelOutput out = model(x, plan.timesteps[j - 1]);
    if (!out.eps.defined() || !out.v.defined() || out.eps.shape() != shape || out.v.shape() != shape) {
      throw ContractError("ddpm_sample: model output shape does not match sample shape " + to_string(shape));
    }
    const Tensor mean_pred = model_mean(cast(out.eps, dtype), x, j, s, options.clip_x0);
    if (j == 1) {
      x = mean_pred;
      break;
    }
    const Tensor std_dev = exp(scale(model_log_variance(cast(out.v, dtype), j, s), 0.5));
    x = add(mean_pred, mul(std_dev, randn(shape, rng, dtype)));
  }
  return x;
}

}  // namespace stdit
