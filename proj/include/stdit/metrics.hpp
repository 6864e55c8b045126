#pragma once

#include "stdit/tensor.hpp"

namespace stdit {

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  /// Dynamic range; zero picks 2 for float images on [-1, 1].
  double data_range = 0.0;
};

/// SSIM of two [H, W] or [H, W, C] images. Three-channel inputs are reduced
/// to luma first; other channel counts average the per-channel index. The
/// Gaussian window is renormalized where it overhangs the border.
double ssim(const Tensor& a, const Tensor& b, const SsimOptions& options = {});

/// Mean SSIM over the leading frame axis of [F, H, W(, C)] videos.
double video_ssim(const Tensor& a, const Tensor& b, const SsimOptions& options = {});

}  // namespace stdit
