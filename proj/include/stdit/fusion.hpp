#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "stdit/nn.hpp"
#include "stdit/tensor.hpp"

namespace stdit {

enum class FusionKind { none, direct, siamese, symbiotic };

std::string to_string(FusionKind kind);
/// Accepts "none", "direct", "siamese", "symbiotic".
FusionKind parse_fusion_kind(std::string_view name);

// Token layout inside the backbone is [B, F, positions, d].

/// Appends condition tokens after the video tokens along the position axis.
/// `cond` is [B, 1, Q, d] (repeated over frames) or [B, F, Q, d].
Tensor symbiotic_concat(const Tensor& video, const Tensor& cond);

/// portrait [P, d], video [F, P, d] -> [F, 2P, d] with the portrait repeated
/// for every frame after that frame's video tokens.
Tensor symbiotic_prepare(const Tensor& portrait, const Tensor& video);

/// [F, 2P, d] -> [F, P, d]; also accepts a batch axis in front.
Tensor symbiotic_extract(const Tensor& tokens);

/// First `count` positions of [..., positions, d].
Tensor take_positions(const Tensor& tokens, std::size_t count);

/// Residual cross-attention from every frame's tokens to that frame's
/// condition tokens. tokens [B, F, P', d] or [F, P', d]; cond [B, F, A, d]
/// or [B, 1, A, d] broadcast over frames (batch axis optional likewise).
Tensor direct_fuse(const AttentionWeights& w, const Tensor& tokens, const Tensor& cond,
                   AttentionProbe* probe = nullptr);

/// Parallel condition tower with one feature map per backbone block.
struct SiameseTower {
  enum class Kind { portrait, audio };

  struct Layer {
    AttentionWeights attn;  // portrait towers only
    Mlp mlp;
  };

  Kind kind = Kind::audio;
  std::vector<Layer> layers;
  std::vector<Linear> injections;  // zero-initialized, bias-free

  static SiameseTower create(ParamFactory& f, const std::string& name, Kind kind, std::size_t depth,
                             std::size_t dim, std::size_t heads, double mlp_ratio = 4.0);
  std::size_t depth() const { return layers.size(); }

  /// Portrait input [B, P, d] -> features [B, 1, P, d]; audio input
  /// [B, F, A, d] -> features [B, F, 1, d] (tokens mean-pooled).
  std::vector<Tensor> forward(const Tensor& cond) const;
};

/// x + proj(feat) where the projected feature broadcasts over frames and
/// positions; a feature covering only the first Q < P' positions is
/// zero-padded.
Tensor siamese_inject(const Tensor& x, const Tensor& feat, const Linear& proj);

}  // namespace stdit
