#pragma once

#include <cstdint>
#include <vector>

#include "stdit/audio.hpp"
#include "stdit/diffusion.hpp"
#include "stdit/fusion.hpp"
#include "stdit/nn.hpp"
#include "stdit/tensor.hpp"

namespace stdit {

struct ModelConfig {
  std::size_t layers = 12;
  std::size_t hidden = 768;
  std::size_t heads = 12;
  std::size_t patch = 2;
  std::size_t frames = 16;
  std::size_t latent_h = 32;
  std::size_t latent_w = 32;
  std::size_t channels = 4;
  FusionKind portrait_fusion = FusionKind::symbiotic;
  FusionKind audio_fusion = FusionKind::direct;
  std::size_t audio_tokens = 32;
  std::size_t audio_layers = 1;
  std::size_t audio_feature_dim = 800;  // per-layer window width (2w+1)*k*c
  std::size_t audio_hidden = 0;         // 0 means `hidden`
  std::size_t freq_dim = 256;
  double mlp_ratio = 4.0;
  bool learned_pos = false;
  std::size_t max_motion_frames = 2;
  std::size_t timesteps = 1000;
  double init_std = 0.02;
  DType dtype = DType::f32;

  std::size_t positions() const { return (latent_h / patch) * (latent_w / patch); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  /// Positions per frame inside the blocks.
  std::size_t block_positions() const;
  /// Throws ContractError naming the offending field.
  void validate() const;
};

/// [..., F, H, W, C] -> [..., F, P, p*p*C]. Patches in raster order; each
/// patch flattened as (row, col, channel).
Tensor patchify(const Tensor& latent, std::size_t p);
/// Inverse of patchify for an H x W grid.
Tensor unpatchify(const Tensor& tokens, std::size_t p, std::size_t h, std::size_t w);

/// Sinusoidal table [count, dim] for positions offset, offset+1, ...:
/// even channels sin(pos / 10000^(2i/dim)), odd channels cos of the same.
Tensor sinusoidal_table(std::size_t count, std::size_t dim, double offset = 0.0, DType dtype = DType::f32);

/// Adds spatial (per position) and temporal (per frame) sinusoidal
/// embeddings to [..., F, P, d] tokens; frame indices start at frame_offset.
Tensor add_positional(const Tensor& tokens, double frame_offset = 0.0);

/// [sin(t f_0..), cos(t f_0..)] with f_i = 10000^(-i / (dim/2)); [B, dim].
Tensor timestep_frequencies(const std::vector<double>& t, std::size_t dim, DType dtype = DType::f32);

/// Attention-matrix entries per layer per head: F^2 P^2 jointly, or
/// F P^2 + P F^2 when factorized into spatial and temporal passes.
std::uint64_t count_attention_elements(std::uint64_t frames, std::uint64_t positions, bool factorized);

struct TimestepEmbedder {
  Linear fc1;
  Linear fc2;
  std::size_t freq_dim = 256;
  std::size_t max_t = 1000;

  static TimestepEmbedder create(ParamFactory& f, const std::string& name, std::size_t freq_dim, std::size_t dim,
                                 std::size_t max_t);
  /// One embedding row per timestep in 1..max_t.
  Tensor operator()(const std::vector<std::size_t>& t) const;
};

/// Self-attention within each frame, x [B, F, P', d]; returns the attention
/// output without residual. Probe shapes are [B*F, H, P', P'].
Tensor spatial_attend(const AttentionWeights& w, const Tensor& x, AttentionProbe* probe = nullptr);
/// Attention across frames at each position. Queries come from x
/// [B, F, P, d]; keys and values from motion [B, Fm, P, d] (optional)
/// followed by x. Probe shapes are [B*P, H, F, Fm+F].
Tensor temporal_attend(const AttentionWeights& w, const Tensor& x, const Tensor& motion = {},
                       AttentionProbe* probe = nullptr);
/// Full attention over all F*P tokens of each sample.
Tensor joint_attend(const AttentionWeights& w, const Tensor& x, AttentionProbe* probe = nullptr);

/// Residual forms.
Tensor spatial_attention(const AttentionWeights& w, const Tensor& x, AttentionProbe* probe = nullptr);
Tensor temporal_attention(const AttentionWeights& w, const Tensor& x, const Tensor& motion = {},
                          AttentionProbe* probe = nullptr);

/// Per-block condition inputs, already in token space.
struct BlockContext {
  Tensor c;                // [B, d] conditioning vector
  Tensor motion;           // [B, Fm, P', d] or undefined
  Tensor portrait_tokens;  // [B, 1, P, d] for direct portrait fusion
  Tensor audio_tokens;     // [B, F, A, d] for direct audio fusion
  Tensor portrait_feat;    // siamese feature for this block
  Tensor audio_feat;
  AttentionProbe* temporal_probe = nullptr;
  AttentionProbe* spatial_probe = nullptr;
};

struct Block {
  Linear ada;  // c -> 6d: shift/scale/gate for attention, then for the MLP
  AttentionWeights temporal;
  Linear bridge;
  AttentionWeights spatial;
  Mlp mlp;
  AttentionWeights portrait_cross;
  AttentionWeights audio_cross;
  Linear portrait_inject;
  Linear audio_inject;
  bool has_portrait_cross = false;
  bool has_audio_cross = false;
  bool has_portrait_inject = false;
  bool has_audio_inject = false;

  static Block create(ParamFactory& f, const std::string& name, const ModelConfig& cfg);
  Tensor forward(const Tensor& x, const BlockContext& ctx) const;
};

struct FinalHead {
  Linear ada;  // c -> 2d: shift, scale
  Linear proj;

  static FinalHead create(ParamFactory& f, const std::string& name, std::size_t dim, std::size_t out);
  /// [B, F, P, d] -> [B, F, P, out]
  Tensor operator()(const Tensor& x, const Tensor& c) const;
};

/// Conditions for one batch. Latent-space tensors use the model dtype after
/// an internal cast.
struct Conditions {
  Tensor portrait;      // [B, H, W, C] clean reference latent
  Tensor audio;         // [B, F, L, m] windowed audio features
  Tensor audio_tokens;  // [B, F, A, d]; overrides `audio` when defined
  Tensor motion;        // [B, Fm, H, W, C] clean latents preceding the clip
};

struct ForwardOptions {
  /// Skip the audio path entirely.
  bool fuse_audio = true;
  /// Replace the audio tokens with zeros.
  bool zero_audio = false;
  AttentionProbe* temporal_probe = nullptr;
  AttentionProbe* spatial_probe = nullptr;
};

class DenoiserModel {
 public:
  DenoiserModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  /// x_t [B, F, H, W, C] with one timestep per sample.
  ModelOutput forward(const Tensor& xt, const std::vector<std::size_t>& t, const Conditions& cond,
                      const ForwardOptions& opts = {}) const;

  /// Projected audio tokens for windowed features [B, F, L, m].
  Tensor audio_tokens(const Tensor& windowed) const;

  const std::vector<Block>& blocks() const { return blocks_; }

 private:
  Tensor embed_latents(const Tensor& latents, double frame_offset) const;
  Tensor embed_portrait(const Tensor& portrait) const;

  ModelConfig cfg_;
  ParameterSet params_;
  Linear x_embed_;
  TimestepEmbedder t_embed_;
  AudioProjection audio_proj_;
  Tensor pos_spatial_;   // learned tables when cfg.learned_pos
  Tensor pos_temporal_;  // [max_motion + F, d]
  Tensor portrait_segment_;
  Tensor audio_segment_;
  SiameseTower portrait_tower_;
  SiameseTower audio_tower_;
  std::vector<Block> blocks_;
  FinalHead head_;
};

}  // namespace stdit
