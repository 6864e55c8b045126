#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "stdit/backbone.hpp"
#include "stdit/checkpoint.hpp"
#include "stdit/config.hpp"
#include "stdit/training.hpp"

namespace stdit {

/// Smooth moving patterns in [-1, 1] with per-frame random audio features.
std::vector<VideoSample> synthetic_videos(const ModelConfig& model, std::size_t videos, std::size_t frames,
                                          std::uint64_t seed);

/// Windowed per-frame audio features [frames, L, m] for a waveform file.
Tensor load_audio_windows(const std::filesystem::path& path, std::size_t frames, const DataParams& data);

/// Videos under data.path: one subdirectory per video holding latents.stdt
/// ([T, h, w, C]) or frames/frame_XXXX.png (encoded with the codec), and
/// audio.wav or audio.f32. Synthetic data when data.kind is "synthetic".
std::vector<VideoSample> load_dataset(const RunConfig& config);

DiffusionSchedule make_schedule(const ScheduleParams& params);

/// Model, optimizer and EMA records for a training checkpoint.
Checkpoint training_checkpoint(const RunConfig& config, const DenoiserModel& model, const OptimState& optim,
                               const EmaState& ema, std::uint64_t step);
/// Restores everything training_checkpoint wrote; returns the step.
std::uint64_t restore_training(const Checkpoint& ckpt, DenoiserModel& model, OptimState& optim, EmaState& ema);
/// Weights-only checkpoint under plain parameter names.
Checkpoint weights_checkpoint(const RunConfig& config, const ParameterSet& params);
/// Loads model weights from a weights-only file or, in a training
/// checkpoint, the EMA records (use_ema) or raw model records.
void load_weights(const Checkpoint& ckpt, DenoiserModel& model, bool use_ema = true);

struct TrainResult {
  std::uint64_t steps = 0;
  StepLosses last;
  /// Mean L_simple over the final min(steps, 100) steps.
  double tail_simple = 0.0;
  std::filesystem::path checkpoint;
  std::filesystem::path ema_checkpoint;
  double seconds = 0.0;
};

struct TrainHooks {
  /// Optional progress stream (one line per log interval).
  std::ostream* log = nullptr;
  /// Called after every step with (step, losses).
  std::function<void(std::uint64_t, const StepLosses&)> on_step;
};

/// Writes config.json, train_log.csv (step, l_simple, l_vlb, grad_norm,
/// wall_time) and checkpoint_<step>.stdf / ema_<step>.stdf plus
/// checkpoint_last.stdf / ema_last.stdf under config.output_dir. Step s draws
/// its randomness from derive_seed(seed, s), so resuming reproduces the
/// uninterrupted run.
TrainResult run_train(const RunConfig& config, const std::optional<std::filesystem::path>& resume = std::nullopt,
                      const TrainHooks& hooks = {});

/// As run_train, but on an existing model and dataset; no files written
/// unless `output` is set.
TrainResult train_model(const RunConfig& config, DenoiserModel& model, const std::vector<VideoSample>& videos,
                        OptimState& optim, EmaState& ema, std::uint64_t first_step, const TrainHooks& hooks = {},
                        const std::filesystem::path* output = nullptr);

struct GenerateOptions {
  std::size_t clips = 1;
  std::size_t motion_frames = 2;
  std::size_t steps = 250;
  std::uint64_t seed = 0;
  bool zero_audio = false;
  std::optional<double> clip_x0 = 1.0;
  /// Clean frames [Nm, H, W, C] that precede the first clip; none by default.
  Tensor initial_motion;
  /// Records temporal attention shapes of every model call when set.
  AttentionProbe* temporal_probe = nullptr;
};

/// Chains `clips` clips: clip k > 1 receives the previous clip's last
/// motion_frames clean latents as temporal key/value context. reference is
/// [H, W, C]; audio is windowed features [clips * F, L, m] (ignored for
/// audio-free models). Returns [clips * F, H, W, C].
Tensor long_duration_generate(const DenoiserModel& model, const DiffusionSchedule& sched, const Tensor& reference,
                              const Tensor& audio, const GenerateOptions& options);

struct SampleRequest {
  std::filesystem::path checkpoint;
  std::filesystem::path reference;  // .png image or .stdt latent [h, w, C]
  std::filesystem::path audio;      // .wav / .f32 waveform or .stdt windows [T, L, m]
  std::uint64_t seed = 0;
  bool zero_audio = false;
  std::size_t clips = 1;
  std::filesystem::path output;  // .stdt latents; PNG frames go to <output>_frames/
};

/// Loads the checkpoint (rejecting fingerprint mismatches before any
/// compute), generates, decodes and writes the result. Returns latents.
Tensor run_sample(const RunConfig& config, const SampleRequest& request);

struct BenchRow {
  std::size_t frames = 0;
  std::size_t positions = 0;
  std::uint64_t joint_elements = 0;
  std::uint64_t factorized_elements = 0;
  double joint_ms = 0.0;
  double factorized_ms = 0.0;
  std::size_t joint_peak_bytes = 0;
  std::size_t factorized_peak_bytes = 0;
};

/// Joint versus spatial-then-temporal attention forward on random tokens;
/// medians over `reps`. Peak bytes are the largest single tensor buffer.
std::vector<BenchRow> run_benchmark(const std::vector<std::size_t>& frames, const std::vector<std::size_t>& positions,
                                    std::size_t dim, std::size_t reps, std::size_t heads = 1, std::uint64_t seed = 0);

void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows);
void write_bench_table(std::ostream& out, const std::vector<BenchRow>& rows);

}  // namespace stdit
