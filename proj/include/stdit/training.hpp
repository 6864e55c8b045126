#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stdit/autograd.hpp"
#include "stdit/backbone.hpp"
#include "stdit/diffusion.hpp"
#include "stdit/nn.hpp"
#include "stdit/random.hpp"
#include "stdit/tensor.hpp"

namespace stdit {

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// First and second moments per parameter, in parameter order.
struct OptimState {
  AdamWOptions options;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  static OptimState create(const ParameterSet& params, const AdamWOptions& options = {});
};

/// One bias-corrected AdamW update with decoupled weight decay. Parameters
/// without a gradient are left untouched. Throws NumericError naming the
/// offending parameter on non-finite gradients, before anything changes.
void adamw_step(ParameterSet& params, const GradMap& grads, OptimState& state);

/// Scales every gradient by max_norm / ||g|| when the global L2 norm exceeds
/// max_norm. Returns the norm before clipping.
double clip_grad_norm(GradMap& grads, const ParameterSet& params, double max_norm = 1.0);

struct EmaState {
  double decay = 0.9999;
  ParameterSet shadow;

  /// Shadow initialized as a copy of `params`.
  static EmaState create(const ParameterSet& params, double decay = 0.9999);
  /// Shadow initialized to zeros.
  static EmaState create_zero(const ParameterSet& params, double decay = 0.9999);
};

/// shadow <- decay * shadow + (1 - decay) * param, elementwise.
void ema_update(EmaState& ema, const ParameterSet& params);

/// One video with its per-frame audio features.
struct VideoSample {
  Tensor latents;  // [T, H, W, C]
  Tensor audio;    // [T, L, m] windowed per-frame features, or undefined
  std::string name;
};

struct ClipOptions {
  std::size_t clip_len = 16;
  std::size_t interval = 1;
  double flip_prob = 0.5;
  /// Clean frames preceding the clip delivered as motion context.
  std::size_t motion_frames = 2;
};

/// One training example.
struct Clip {
  Tensor latents;    // [clip_len, H, W, C]
  Tensor audio;      // [clip_len, L, m]
  Tensor reference;  // [H, W, C], a frame of the same video outside the clip
  Tensor motion;     // [Nm, H, W, C] ground-truth frames before the clip; Nm may be 0
  std::size_t video = 0;
  std::size_t start = 0;
  bool flipped = false;
};

/// Number of start offsets for a video of `frames` frames.
std::size_t clip_start_count(std::size_t frames, const ClipOptions& options);

/// Mirrors the W axis of [..., H, W, C].
Tensor flip_horizontal(const Tensor& x);

/// Draws `count` clips uniformly over (video, start). Videos shorter than
/// clip_len * interval are skipped with a warning on stderr; throws when no
/// video is usable.
std::vector<Clip> make_clips(const std::vector<VideoSample>& videos, const ClipOptions& options, std::size_t count,
                             Rng& rng);

/// Clip at a fixed (video, start) without flipping; reference is the first
/// frame outside the clip.
Clip clip_at(const VideoSample& video, std::size_t start, const ClipOptions& options);

/// Stacks clips into model inputs. Motion frames are kept only when every
/// clip has the same count.
struct Batch {
  Tensor x0;         // [B, F, H, W, C]
  Tensor portrait;   // [B, H, W, C]
  Tensor audio;      // [B, F, L, m] or undefined
  Tensor motion;     // [B, Nm, H, W, C] or undefined
};

Batch collate(const std::vector<Clip>& clips, DType dtype);

struct TrainOptions {
  double clip_norm = 1.0;
  double vlb_weight = 1.0;
  double zero_audio_prob = 0.1;
};

struct StepLosses {
  double simple = 0.0;
  double vlb = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
};

/// Samples t uniformly per example, noises x0, runs the model, and applies
/// L_simple + vlb_weight * L_vlb through clipping, AdamW and EMA.
StepLosses train_step(DenoiserModel& model, const Batch& batch, const DiffusionSchedule& sched, OptimState& optim,
                      EmaState* ema, const TrainOptions& options, Rng& rng);

}  // namespace stdit
