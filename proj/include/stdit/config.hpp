#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "stdit/backbone.hpp"
#include "stdit/codec.hpp"
#include "stdit/training.hpp"

namespace stdit {

/// Raised for malformed or inconsistent configuration; the message names the
/// offending key.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ScheduleParams {
  std::size_t timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
};

struct OptimizerParams {
  AdamWOptions adamw;
  double clip_norm = 1.0;
  double ema_decay = 0.9999;
};

struct TrainingParams {
  std::size_t steps = 1000;
  std::size_t batch_size = 8;
  double vlb_weight = 1.0;
  double zero_audio_prob = 0.1;
  double flip_prob = 0.5;
  std::size_t clip_interval = 1;
  std::size_t log_every = 10;
  std::size_t checkpoint_every = 500;
  int threads = 1;
};

/// Where training videos come from.
struct DataParams {
  /// "synthetic" generates videos from `seed`; "directory" reads `path`.
  std::string kind = "synthetic";
  std::filesystem::path path;
  std::size_t synthetic_videos = 4;
  std::size_t synthetic_frames = 24;
  double fps = 25.0;
  /// Audio context half-width in video frames.
  std::size_t audio_window = 2;
};

struct SamplingParams {
  std::size_t steps = 250;
  std::size_t motion_frames = 2;
  std::optional<double> clip_x0 = 1.0;
  bool use_ema = true;
};

struct RunConfig {
  ModelConfig model;
  ScheduleParams schedule;
  OptimizerParams optimizer;
  TrainingParams training;
  DataParams data;
  SamplingParams sampling;
  CodecKind codec = CodecKind::identity;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/default";

  /// Cross-field checks; throws ConfigError.
  void validate() const;
};

/// Parses JSON text. Unknown keys and wrong value types are errors.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Canonical JSON with every field present.
std::string to_json(const RunConfig& config);

/// Hash of everything that fixes parameter shapes and the diffusion process.
std::uint64_t config_fingerprint(const ModelConfig& model, const ScheduleParams& schedule);
std::uint64_t config_fingerprint(const RunConfig& config);

}  // namespace stdit
