#include "stdit/training.hpp"

#include <cmath>
#include <iostream>

#include "stdit/ops.hpp"

namespace stdit {

OptimState OptimState::create(const ParameterSet& params, const AdamWOptions& options) {
  OptimState s;
  s.options = options;
  for (const auto& [_, p] : params.entries()) {
    s.m.push_back(Tensor::zeros(p.shape(), p.dtype()));
    s.v.push_back(Tensor::zeros(p.shape(), p.dtype()));
  }
  return s;
}

void adamw_step(ParameterSet& params, const GradMap& grads, OptimState& state) {
  auto& entries = params.entries();
  if (state.m.size() != entries.size() || state.v.size() != entries.size()) {
    throw ContractError("adamw_step: optimizer state has " + std::to_string(state.m.size()) + " slots for " +
                        std::to_string(entries.size()) + " parameters");
  }
  for (const auto& [name, p] : entries) {
    const Tensor* g = grads.find(p);
    if (!g) continue;
    if (g->shape() != p.shape()) {
      throw ShapeError("adamw_step: gradient for '" + name + "' has shape " + to_string(g->shape()));
    }
    const bool finite = dispatch(g->dtype(), [&](auto tag) {
      for (auto x : g->template data<decltype(tag)>()) {
        if (!std::isfinite(x)) return false;
      }
      return true;
    });
    if (!finite) throw NumericError("adamw_step: non-finite gradient for '" + name + "'");
  }
  const AdamWOptions& o = state.options;
  ++state.step;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor& p = entries[i].second;
    const Tensor* g = grads.find(p);
    if (!g) continue;
    dispatch(p.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const Tensor gc = g->dtype() == p.dtype() ? *g : cast(*g, p.dtype());
      const auto gv = gc.template data<T>();
      auto w = p.template mutable_data<T>();
      auto m = state.m[i].template mutable_data<T>();
      auto v = state.v[i].template mutable_data<T>();
      const T b1 = static_cast<T>(o.beta1), b2 = static_cast<T>(o.beta2);
      const T c1 = static_cast<T>(1.0 - o.beta1), c2 = static_cast<T>(1.0 - o.beta2);
      const T decay = static_cast<T>(1.0 - o.lr * o.weight_decay);
      const T step_size = static_cast<T>(o.lr / bc1);
      const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
      const T eps = static_cast<T>(o.eps);
      for (std::size_t j = 0; j < w.size(); ++j) {
        const T gj = gv[j];
        const T mj = b1 * m[j] + c1 * gj;
        const T vj = b2 * v[j] + c2 * gj * gj;
        m[j] = mj;
        v[j] = vj;
        w[j] = w[j] * decay - step_size * mj / (std::sqrt(vj) * inv_sqrt_bc2 + eps);
      }
    });
  }
}

double clip_grad_norm(GradMap& grads, const ParameterSet& params, double max_norm) {
  if (!(max_norm > 0)) throw ContractError("clip_grad_norm: max_norm must be positive");
  double sq = 0.0;
  for (const auto& [_, p] : params.entries()) {
    if (const Tensor* g = grads.find(p)) {
      sq += dispatch(g->dtype(), [&](auto tag) {
        double acc = 0.0;
        for (auto x : g->template data<decltype(tag)>()) acc += static_cast<double>(x) * x;
        return acc;
      });
    }
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& [_, p] : params.entries()) {
      if (const Tensor* g = grads.find(p)) grads.insert(p.id(), scale(g->detach(), factor));
    }
  }
  return norm;
}

EmaState EmaState::create(const ParameterSet& params, double decay) {
  EmaState e;
  e.decay = decay;
  for (const auto& [name, p] : params.entries()) e.shadow.add(name, p.clone());
  return e;
}

EmaState EmaState::create_zero(const ParameterSet& params, double decay) {
  EmaState e;
  e.decay = decay;
  for (const auto& [name, p] : params.entries()) e.shadow.add(name, Tensor::zeros(p.shape(), p.dtype()));
  return e;
}

void ema_update(EmaState& ema, const ParameterSet& params) {
  auto& shadow = ema.shadow.entries();
  const auto& src = params.entries();
  if (shadow.size() != src.size()) throw ContractError("ema_update: shadow does not mirror the parameters");
  const double d = ema.decay;
  for (std::size_t i = 0; i < src.size(); ++i) {
    Tensor& s = shadow[i].second;
    const Tensor& p = src[i].second;
    if (s.shape() != p.shape() || s.dtype() != p.dtype()) {
      throw ContractError("ema_update: shadow '" + shadow[i].first + "' does not match parameter '" + src[i].first + "'");
    }
    dispatch(p.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto out = s.template mutable_data<T>();
      const auto in = p.template data<T>();
      for (std::size_t j = 0; j < out.size(); ++j) {
        out[j] = static_cast<T>(d * static_cast<double>(out[j]) + (1.0 - d) * static_cast<double>(in[j]));
      }
    });
  }
}

std::size_t clip_start_count(std::size_t frames, const ClipOptions& o) {
  const std::size_t span = (o.clip_len - 1) * o.interval + 1;
  if (o.clip_len == 0 || o.interval == 0 || frames < o.clip_len * o.interval) return 0;
  return frames - span + 1;
}

Tensor flip_horizontal(const Tensor& x) {
  if (x.rank() < 3) throw ShapeError("flip_horizontal: expected [..., H, W, C], got " + to_string(x.shape()));
  const std::size_t W = x.dim(-2), C = x.dim(-1);
  const std::size_t rows = x.numel() / (W * C);
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto in = x.template data<T>();
    std::vector<T> out(in.size());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t w = 0; w < W; ++w)
        for (std::size_t c = 0; c < C; ++c) out[(r * W + w) * C + c] = in[(r * W + (W - 1 - w)) * C + c];
    return Tensor::from(x.shape(), std::move(out));
  });
}

namespace {

Tensor frame_range(const Tensor& video, std::size_t start, std::size_t count, std::size_t interval) {
  std::vector<Tensor> frames;
  frames.reserve(count);
  for (std::size_t i = 0; i < count; ++i) frames.push_back(slice(video, 0, start + i * interval, start + i * interval + 1));
  return count == 1 ? frames[0] : concat(frames, 0);
}

Tensor frame(const Tensor& video, std::size_t index) {
  return reshape(slice(video, 0, index, index + 1), Shape(video.shape().begin() + 1, video.shape().end()));
}

Clip build_clip(const VideoSample& v, std::size_t start, std::size_t ref_index, const ClipOptions& o) {
  NoGradGuard guard;
  Clip c;
  c.start = start;
  c.latents = frame_range(v.latents, start, o.clip_len, o.interval).detach();
  if (v.audio.defined()) c.audio = frame_range(v.audio, start, o.clip_len, o.interval).detach();
  c.reference = frame(v.latents, ref_index).detach();
  std::size_t nm = 0;
  while (nm < o.motion_frames && start >= (nm + 1) * o.interval) ++nm;
  if (nm == o.motion_frames && nm > 0) {
    c.motion = frame_range(v.latents, start - nm * o.interval, nm, o.interval).detach();
  }
  return c;
}

}  // namespace

Clip clip_at(const VideoSample& video, std::size_t start, const ClipOptions& o) {
  const std::size_t frames = video.latents.dim(0);
  if (start >= clip_start_count(frames, o)) throw ContractError("clip_at: start " + std::to_string(start) + " out of range");
  const std::size_t end = start + (o.clip_len - 1) * o.interval + 1;
  std::size_t ref = end < frames ? end : 0;
  if (ref >= start && ref < end) throw ContractError("clip_at: video '" + video.name + "' has no frame outside the clip");
  return build_clip(video, start, ref, o);
}

std::vector<Clip> make_clips(const std::vector<VideoSample>& videos, const ClipOptions& o, std::size_t count, Rng& rng) {
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const std::size_t frames = videos[i].latents.dim(0);
    const std::size_t starts = clip_start_count(frames, o);
    const std::size_t span = starts ? (o.clip_len - 1) * o.interval + 1 : 0;
    if (starts == 0 || frames <= span) {
      std::cerr << "make_clips: skipping '" << videos[i].name << "' (" << frames << " frames, need more than "
                << o.clip_len * o.interval << ")\n";
      continue;
    }
    usable.push_back(i);
  }
  if (usable.empty()) throw ContractError("make_clips: no video is long enough for a clip");
  std::vector<Clip> clips;
  clips.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t vi = usable[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(usable.size()) - 1))];
    const VideoSample& v = videos[vi];
    const std::size_t frames = v.latents.dim(0);
    const std::size_t starts = clip_start_count(frames, o);
    const std::size_t start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(starts) - 1));
    const std::size_t span = (o.clip_len - 1) * o.interval + 1;
    // Reference drawn uniformly from the frames outside [start, start + span).
    const std::size_t outside = frames - span;
    std::size_t ref = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(outside) - 1));
    if (ref >= start) ref += span;
    Clip c = build_clip(v, start, ref, o);
    c.video = vi;
    if (rng.bernoulli(o.flip_prob)) {
      c.flipped = true;
      c.latents = flip_horizontal(c.latents);
      c.reference = flip_horizontal(c.reference);
      if (c.motion.defined()) c.motion = flip_horizontal(c.motion);
    }
    clips.push_back(std::move(c));
  }
  return clips;
}

Batch collate(const std::vector<Clip>& clips, DType dtype) {
  if (clips.empty()) throw ContractError("collate: empty batch");
  NoGradGuard guard;
  auto stack = [&](auto member) {
    std::vector<Tensor> parts;
    for (const Clip& c : clips) {
      const Tensor& t = c.*member;
      Shape s = t.shape();
      s.insert(s.begin(), 1);
      parts.push_back(reshape(cast(t, dtype), s));
    }
    return (parts.size() == 1 ? parts[0] : concat(parts, 0)).detach();
  };
  Batch b;
  b.x0 = stack(&Clip::latents);
  b.portrait = stack(&Clip::reference);
  bool audio = true, motion = true;
  for (const Clip& c : clips) {
    audio = audio && c.audio.defined();
    motion = motion && c.motion.defined() && c.motion.shape() == clips[0].motion.shape();
  }
  if (audio) b.audio = stack(&Clip::audio);
  if (motion) b.motion = stack(&Clip::motion);
  return b;
}

StepLosses train_step(DenoiserModel& model, const Batch& batch, const DiffusionSchedule& sched, OptimState& optim,
                      EmaState* ema, const TrainOptions& options, Rng& rng) {
  const ModelConfig& cfg = model.config();
  const std::size_t B = batch.x0.dim(0);
  const Shape sample_shape(batch.x0.shape().begin() + 1, batch.x0.shape().end());
  const Shape expected{cfg.frames, cfg.latent_h, cfg.latent_w, cfg.channels};
  if (batch.x0.rank() != 5 || sample_shape != expected) {
    throw ShapeError("train_step: batch latents " + to_string(batch.x0.shape()) + " do not match config [B, " +
                     std::to_string(cfg.frames) + ", " + std::to_string(cfg.latent_h) + ", " +
                     std::to_string(cfg.latent_w) + ", " + std::to_string(cfg.channels) + "]");
  }
  const DType dt = cfg.dtype;
  const Tensor x0 = cast(batch.x0, dt).detach();

  std::vector<std::size_t> t(B);
  std::vector<Tensor> x0s, xts, epss;
  Tensor eps, xt;
  {
    NoGradGuard guard;
    for (std::size_t b = 0; b < B; ++b) {
      t[b] = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(sched.steps())));
    }
    eps = randn(batch.x0.shape(), rng, dt);
    for (std::size_t b = 0; b < B; ++b) {
      const Tensor x0b = slice(x0, 0, b, b + 1).detach();
      const Tensor eb = slice(eps, 0, b, b + 1).detach();
      x0s.push_back(x0b);
      xts.push_back(q_sample(x0b, t[b], eb, sched).detach());
    }
    xt = (B == 1 ? xts[0] : concat(xts, 0)).detach();
  }

  Conditions cond;
  cond.portrait = batch.portrait;
  cond.motion = batch.motion;
  ForwardOptions fo;
  bool drop_any = false;
  std::vector<double> keep(B, 1.0);
  if (cfg.audio_fusion != FusionKind::none) {
    for (std::size_t b = 0; b < B; ++b) {
      if (options.zero_audio_prob > 0 && rng.bernoulli(options.zero_audio_prob)) {
        keep[b] = 0.0;
        drop_any = true;
      }
    }
  }
  Tensor audio_tokens;
  if (cfg.audio_fusion != FusionKind::none) {
    if (!batch.audio.defined()) throw ContractError("train_step: model fuses audio but the batch has none");
    audio_tokens = model.audio_tokens(cast(batch.audio, dt));
    if (drop_any) audio_tokens = mul(audio_tokens, Tensor::from_doubles({B, 1, 1, 1}, keep, dt));
    cond.audio_tokens = audio_tokens;
  }

  const ModelOutput out = model.forward(xt, t, cond, fo);
  const Tensor l_simple = loss_simple(out, eps);
  Tensor l_vlb;
  for (std::size_t b = 0; b < B; ++b) {
    const ModelOutput ob{slice(out.eps, 0, b, b + 1), slice(out.v, 0, b, b + 1)};
    const Tensor lb = loss_vlb(ob, x0s[b], xts[b], t[b], sched);
    l_vlb = l_vlb.defined() ? add(l_vlb, lb) : lb;
  }
  l_vlb = scale(l_vlb, 1.0 / static_cast<double>(B));
  const Tensor total = add(l_simple, scale(l_vlb, options.vlb_weight));

  StepLosses losses;
  losses.simple = l_simple.item();
  losses.vlb = l_vlb.item();
  losses.total = total.item();
  if (!std::isfinite(losses.total)) {
    throw NumericError("train_step: non-finite loss at optimizer step " + std::to_string(optim.step + 1));
  }
  GradMap grads = backward(total);
  losses.grad_norm = clip_grad_norm(grads, model.parameters(), options.clip_norm);
  adamw_step(model.parameters(), grads, optim);
  if (ema) ema_update(*ema, model.parameters());
  return losses;
}

}  // namespace stdit
