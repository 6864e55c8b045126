#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "stdit/ops.hpp"
#include "stdit/pipeline.hpp"
#include "stdit/training.hpp"

using namespace stdit;

namespace {

struct OneParam {
  ParameterSet ps;
  Tensor w;
  explicit OneParam(std::vector<double> v) {
    w = ps.add("w", Tensor::from_doubles({v.size()}, v, DType::f64));
  }
  GradMap grads(std::vector<double> g) const {
    GradMap m;
    m.insert(w.id(), Tensor::from_doubles({g.size()}, g, DType::f64));
    return m;
  }
};

VideoSample ramp_video(std::size_t frames, std::size_t h = 2, std::size_t w = 3) {
  std::vector<double> lat(frames * h * w);
  for (std::size_t i = 0; i < lat.size(); ++i) lat[i] = static_cast<double>(i);
  std::vector<double> aud(frames * 2);
  for (std::size_t i = 0; i < aud.size(); ++i) aud[i] = static_cast<double>(i / 2);
  return {Tensor::from_doubles({frames, h, w, 1}, lat, DType::f32),
          Tensor::from_doubles({frames, 1, 2}, aud, DType::f32), "ramp"};
}

ModelConfig toy_model() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 32;
  c.heads = 4;
  c.frames = 4;
  c.latent_h = 4;
  c.latent_w = 4;
  c.channels = 4;
  c.audio_tokens = 4;
  c.audio_feature_dim = 16;
  c.freq_dim = 32;
  return c;
}

}  // namespace

TEST(AdamW, FirstStepMovesByLearningRate) {
  OneParam p({1.0, -2.0, 3.0});
  AdamWOptions o;
  o.lr = 0.1;
  auto st = OptimState::create(p.ps, o);
  adamw_step(p.ps, p.grads({0.5, -4.0, 1e-3}), st);
  // Bias correction makes the first update lr * g / (|g| + eps').
  EXPECT_NEAR(p.w.at({0}), 0.9, 1e-6);
  EXPECT_NEAR(p.w.at({1}), -1.9, 1e-6);
  EXPECT_NEAR(p.w.at({2}), 2.9, 1e-4);
  EXPECT_EQ(st.step, 1u);
}

TEST(AdamW, MatchesReferenceRecursion) {
  OneParam p({0.3, -0.7});
  AdamWOptions o;
  o.lr = 0.01;
  o.weight_decay = 0.1;
  auto st = OptimState::create(p.ps, o);
  double w[2] = {0.3, -0.7}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int k = 1; k <= 50; ++k) {
    const double g[2] = {std::sin(k * 0.3), 0.2 * std::cos(k * 0.7)};
    adamw_step(p.ps, p.grads({g[0], g[1]}), st);
    for (int i = 0; i < 2; ++i) {
      w[i] *= 1.0 - o.lr * o.weight_decay;
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1.0 - std::pow(0.9, k)), vh = v[i] / (1.0 - std::pow(0.999, k));
      w[i] -= o.lr * mh / (std::sqrt(vh) + o.eps);
    }
  }
  EXPECT_NEAR(p.w.at({0}), w[0], 1e-12);
  EXPECT_NEAR(p.w.at({1}), w[1], 1e-12);
}

TEST(AdamW, ZeroGradientAndMissingGradientLeaveWeights) {
  OneParam p({1.0, 2.0});
  auto st = OptimState::create(p.ps, {});
  adamw_step(p.ps, p.grads({0.0, 0.0}), st);
  EXPECT_EQ(p.w.at({0}), 1.0);
  EXPECT_EQ(p.w.at({1}), 2.0);
  adamw_step(p.ps, GradMap{}, st);
  EXPECT_EQ(p.w.at({1}), 2.0);
}

TEST(AdamW, RejectsNonFiniteGradientBeforeUpdating) {
  OneParam p({1.0, 2.0});
  auto st = OptimState::create(p.ps, {});
  EXPECT_THROW(adamw_step(p.ps, p.grads({0.1, std::nan("")}), st), NumericError);
  EXPECT_EQ(p.w.at({0}), 1.0);
  EXPECT_EQ(st.step, 0u);
}

TEST(ClipGradNorm, ScalesDownPreservingDirection) {
  OneParam p({0.0, 0.0});
  GradMap g = p.grads({3.0, 4.0});
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, p.ps, 0.5), 5.0);
  const Tensor c = g.get(p.w);
  EXPECT_NEAR(c.at({0}), 0.3, 1e-12);
  EXPECT_NEAR(c.at({1}), 0.4, 1e-12);
}

TEST(ClipGradNorm, LeavesSmallGradientsAlone) {
  OneParam p({0.0, 0.0});
  GradMap g = p.grads({3.0, 4.0});
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, p.ps, 4.0 + 2.0), 5.0);
  EXPECT_EQ(g.get(p.w).at({0}), 3.0);
  GradMap h = p.grads({3.0, 4.0});
  clip_grad_norm(h, p.ps, 4.0);
  EXPECT_NEAR(h.get(p.w).at({0}), 2.4, 1e-12);
  EXPECT_NEAR(h.get(p.w).at({1}), 3.2, 1e-12);
}

TEST(Ema, ClosedFormFromZero) {
  OneParam p({2.0, -5.0});
  auto ema = EmaState::create_zero(p.ps, 0.9999);
  for (int k = 1; k <= 1000; ++k) ema_update(ema, p.ps);
  const Tensor& s = ema.shadow.entries()[0].second;
  const double f = 1.0 - std::pow(0.9999, 1000);
  EXPECT_NEAR(s.at({0}) / (2.0 * f), 1.0, 1e-10);
  EXPECT_NEAR(s.at({1}) / (-5.0 * f), 1.0, 1e-10);
}

TEST(Ema, FixedPointAndSingleStep) {
  OneParam p({1.5, 0.5});
  auto ema = EmaState::create(p.ps, 0.99);
  ema_update(ema, p.ps);
  EXPECT_EQ(ema.shadow.entries()[0].second.at({0}), 1.5);
  auto z = EmaState::create_zero(p.ps, 0.99);
  ema_update(z, p.ps);
  EXPECT_NEAR(z.shadow.entries()[0].second.at({0}), 0.015, 1e-15);
  // The shadow is a copy, not an alias.
  p.w.mutable_data<double>()[0] = 9.0;
  EXPECT_EQ(ema.shadow.entries()[0].second.at({0}), 1.5);
}

TEST(Clips, StartCountAndSkips) {
  ClipOptions o;
  EXPECT_EQ(clip_start_count(64, o), 49u);
  EXPECT_EQ(clip_start_count(16, o), 1u);
  EXPECT_EQ(clip_start_count(15, o), 0u);
  o.interval = 2;
  EXPECT_EQ(clip_start_count(40, o), 10u);  // span 31
  EXPECT_EQ(clip_start_count(32, o), 2u);
  EXPECT_EQ(clip_start_count(31, o), 0u);  // shorter than clip_len * interval
}

TEST(Clips, UniformOverAllOffsets) {
  const std::vector<VideoSample> videos{ramp_video(64)};
  ClipOptions o;
  o.flip_prob = 0.0;
  Rng rng(1);
  const auto clips = make_clips(videos, o, 2000, rng);
  std::set<std::size_t> starts;
  for (const auto& c : clips) {
    starts.insert(c.start);
    EXPECT_EQ(c.latents.shape(), (Shape{16, 2, 3, 1}));
    EXPECT_EQ(c.latents.at({0, 0, 0, 0}), static_cast<double>(c.start * 6));
    EXPECT_EQ(c.audio.at({0, 0, 0}), static_cast<double>(c.start));
    // Reference frame lies outside the clip.
    const auto ref_frame = static_cast<std::size_t>(c.reference.at({0, 0, 0})) / 6;
    EXPECT_TRUE(ref_frame < c.start || ref_frame >= c.start + 16);
    // Motion context is all or nothing.
    EXPECT_EQ(c.motion.defined() ? c.motion.dim(0) : 0u, c.start >= 2 ? 2u : 0u);
  }
  EXPECT_EQ(starts.size(), 49u);
  EXPECT_EQ(*starts.rbegin(), 48u);
}

TEST(Clips, FlipAppliesToEveryFrameAndTwiceIsIdentity) {
  Rng rng(2);
  const Tensor x = randn({3, 2, 5, 4}, rng);
  const Tensor f = flip_horizontal(x);
  EXPECT_EQ(f.at({1, 1, 0, 2}), x.at({1, 1, 4, 2}));
  const auto a = flip_horizontal(f).to_vector(), b = x.to_vector();
  EXPECT_EQ(a, b);

  const std::vector<VideoSample> videos{ramp_video(20)};
  ClipOptions o;
  o.flip_prob = 1.0;
  const auto clips = make_clips(videos, o, 3, rng);
  for (const auto& c : clips) {
    EXPECT_TRUE(c.flipped);
    EXPECT_EQ(c.latents.at({0, 0, 0, 0}), static_cast<double>(c.start * 6 + 2));
    EXPECT_EQ(static_cast<std::size_t>(c.reference.at({0, 0, 0})) % 3, 2u);
  }
}

TEST(Clips, SkipsShortVideosAndFailsWhenNoneUsable) {
  const std::vector<VideoSample> videos{ramp_video(8), ramp_video(20)};
  ClipOptions o;
  Rng rng(3);
  for (const auto& c : make_clips(videos, o, 20, rng)) EXPECT_EQ(c.video, 1u);
  const std::vector<VideoSample> short_only{ramp_video(8)};
  EXPECT_THROW(make_clips(short_only, o, 1, rng), ContractError);
}

TEST(Clips, CollateStacksBatch) {
  const std::vector<VideoSample> videos{ramp_video(24)};
  ClipOptions o;
  o.flip_prob = 0.0;
  const Batch b = collate({clip_at(videos[0], 4, o), clip_at(videos[0], 6, o)}, DType::f64);
  EXPECT_EQ(b.x0.shape(), (Shape{2, 16, 2, 3, 1}));
  EXPECT_EQ(b.portrait.shape(), (Shape{2, 2, 3, 1}));
  EXPECT_EQ(b.audio.shape(), (Shape{2, 16, 1, 2}));
  EXPECT_EQ(b.motion.shape(), (Shape{2, 2, 2, 3, 1}));
  EXPECT_EQ(b.x0.dtype(), DType::f64);
  EXPECT_EQ(b.motion.at({1, 0, 0, 0, 0}), 24.0);
}

TEST(TrainStep, LossesFiniteAndDecrease) {
  const ModelConfig cfg = toy_model();
  DenoiserModel model(cfg, 1);
  const auto videos = synthetic_videos(cfg, 1, 6, 2);
  ClipOptions co;
  co.clip_len = 4;
  co.flip_prob = 0.0;
  const Batch batch = collate({clip_at(videos[0], 2, co)}, DType::f32);
  const auto sched = build_schedule();
  AdamWOptions ao;
  ao.lr = 2e-3;
  auto optim = OptimState::create(model.parameters(), ao);
  auto ema = EmaState::create(model.parameters(), 0.99);
  TrainOptions to;
  double first = 0.0, last = 0.0;
  for (int s = 0; s < 200; ++s) {
    Rng rng(derive_seed(9, s));
    const auto l = train_step(model, batch, sched, optim, &ema, to, rng);
    ASSERT_TRUE(std::isfinite(l.total));
    EXPECT_NEAR(l.total, l.simple + l.vlb, 1e-6 * std::max(1.0, l.total));  // f32 sums
    if (s < 20) first += l.simple / 20;
    if (s >= 180) last += l.simple / 20;
  }
  EXPECT_EQ(optim.step, 200u);
  EXPECT_LT(last, 0.5 * first);
}

namespace {

// One step from a fixed randomized model; returns the step loss.
double step_loss(const DenoiserModel& base, const Batch& batch, double zero_prob, std::uint64_t seed) {
  DenoiserModel model(base.config(), 1);
  model.parameters().assign_from(base.parameters());
  auto optim = OptimState::create(model.parameters(), {});
  TrainOptions to;
  to.zero_audio_prob = zero_prob;
  Rng rng(seed);
  return train_step(model, batch, build_schedule(), optim, nullptr, to, rng).total;
}

}  // namespace

TEST(TrainStep, ZeroAudioDropsTheAudioPath) {
  const ModelConfig cfg = toy_model();
  const auto videos = synthetic_videos(cfg, 1, 6, 2);
  ClipOptions co;
  co.clip_len = 4;
  co.flip_prob = 0.0;
  const Batch a = collate({clip_at(videos[0], 2, co)}, DType::f32);
  Batch b = a;
  Rng noise(4);
  b.audio = randn(a.audio.shape(), noise);
  DenoiserModel base(cfg, 1);
  base.parameters().randomize(noise, 0.05);
  EXPECT_EQ(step_loss(base, a, 1.0, 6), step_loss(base, b, 1.0, 6));
  EXPECT_NE(step_loss(base, a, 0.0, 6), step_loss(base, b, 0.0, 6));
}

TEST(TrainStep, ZeroAudioRateIsRespected) {
  const ModelConfig cfg = toy_model();
  const auto videos = synthetic_videos(cfg, 1, 6, 2);
  ClipOptions co;
  co.clip_len = 4;
  co.flip_prob = 0.0;
  const Batch a = collate({clip_at(videos[0], 2, co)}, DType::f32);
  Batch b = a;
  Rng noise(8);
  b.audio = randn(a.audio.shape(), noise);
  DenoiserModel base(cfg, 1);
  base.parameters().randomize(noise, 0.05);
  // A step dropped its audio exactly when swapping the features changes nothing.
  const std::size_t trials = 400;
  std::size_t dropped = 0;
  for (std::size_t s = 0; s < trials; ++s) dropped += step_loss(base, a, 0.1, s) == step_loss(base, b, 0.1, s);
  EXPECT_NEAR(static_cast<double>(dropped) / trials, 0.1, 0.05);
}
