#pragma once

#include <filesystem>
#include <string>

#include "stdit/tensor.hpp"

namespace stdit {

enum class CodecKind { identity, space_to_depth };

std::string to_string(CodecKind kind);
CodecKind parse_codec_kind(const std::string& name);

/// Lossless stand-in for a VAE between pixel videos and latents.
///
/// space_to_depth folds every factor x factor x 3 pixel block into one latent
/// position with factor^2 * 3 channels, ordered (row, col, channel). identity
/// passes latents through unchanged.
class LatentCodec {
 public:
  explicit LatentCodec(CodecKind kind = CodecKind::space_to_depth, std::size_t factor = 8,
                       std::size_t pixel_channels = 3);

  CodecKind kind() const { return kind_; }
  std::size_t factor() const { return kind_ == CodecKind::identity ? 1 : factor_; }
  std::size_t pixel_channels() const { return pixel_channels_; }
  std::size_t latent_channels() const;

  /// [..., H, W, c] -> [..., H/f, W/f, f*f*c].
  Tensor encode(const Tensor& video) const;
  /// Exact inverse of encode.
  Tensor decode(const Tensor& latent) const;

 private:
  CodecKind kind_;
  std::size_t factor_;
  std::size_t pixel_channels_;
};

/// Validates synthetic latents against `expected` and returns them as is.
Tensor identity_latents(const Tensor& latents, const Shape& expected);

/// Tensor file: a 16-byte header ("STDT", u32 dtype code 0 = f32 / 1 = f64,
/// u32 rank, u32 reserved), rank u64 extents, then the row-major payload,
/// all little-endian.
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// 8-bit RGB or grayscale PNG <-> [H, W, C] in [-1, 1].
Tensor read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Tensor& image);

/// Frames named frame_0000.png, frame_0001.png, ... in `dir`.
void write_png_frames(const std::filesystem::path& dir, const Tensor& video);
Tensor read_png_frames(const std::filesystem::path& dir);

}  // namespace stdit
