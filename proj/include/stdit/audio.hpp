#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stdit/nn.hpp"
#include "stdit/tensor.hpp"

namespace stdit {

struct Waveform {
  std::vector<float> samples;  // mono, nominally in [-1, 1]
  std::size_t sample_rate = 16000;
};

/// 16-bit PCM mono RIFF/WAVE.
Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& wave);
/// Headerless little-endian f32 samples.
Waveform read_raw_f32(const std::filesystem::path& path, std::size_t sample_rate = 16000);
/// Dispatches on extension: .wav or anything else as raw f32.
Waveform load_audio(const std::filesystem::path& path);

/// Linear-interpolation resampler.
Waveform resample_linear(const Waveform& in, std::size_t target_rate);

/// Feature-extractor output, data shaped [L, T_a, c].
struct AudioFeatures {
  Tensor data;
  std::size_t sample_rate = 16000;
  double feature_rate = 50.0;

  std::size_t layers() const { return data.dim(0); }
  std::size_t frames() const { return data.dim(1); }
  std::size_t channels() const { return data.dim(2); }
};

struct LogMelOptions {
  std::size_t mels = 80;
  std::size_t window = 400;  // 25 ms
  std::size_t hop = 320;     // 20 ms
  std::size_t fft_size = 512;
  double floor = 1e-10;
  double fmin = 0.0;
  double fmax = 8000.0;
};

/// Log-mel energies, one frame per hop with frames centred on multiples of
/// the hop, so T_a = ceil(n / hop). Requires 16 kHz input.
AudioFeatures extract_features(const Waveform& wave, const LogMelOptions& options = {});

/// Triangular mel filterbank weights [mels, fft_size / 2 + 1].
std::vector<std::vector<double>> mel_filterbank(const LogMelOptions& options, std::size_t sample_rate);

/// Feature windows per video frame: frame f gathers the k = feature_rate / fps
/// feature frames of each video frame in [f0 + f - w, f0 + f + w], zero
/// outside the sequence. Returns [F, L, (2w + 1) * k * c].
Tensor align_windows(const AudioFeatures& feat, std::size_t frames, double video_fps = 25.0, std::size_t w = 2,
                     std::size_t first_frame = 0);

/// Windowed features -> per-frame context tokens.
struct AudioProjection {
  Tensor layer_logits;  // [L], only when L > 1
  Linear fc1;
  Linear fc2;
  std::size_t tokens = 32;
  std::size_t dim = 0;

  static AudioProjection create(ParamFactory& f, const std::string& name, std::size_t layers, std::size_t in_dim,
                                std::size_t hidden, std::size_t tokens, std::size_t dim);
  /// [B, F, L, m] -> [B, F, tokens, dim]
  Tensor operator()(const Tensor& windowed) const;
};

}  // namespace stdit
