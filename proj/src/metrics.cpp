#include "stdit/metrics.hpp"

#include <cmath>
#include <vector>

namespace stdit {

namespace {

using Plane = std::vector<double>;

// Separable Gaussian filter; weights renormalized over in-bounds taps.
Plane blur(const Plane& x, std::size_t h, std::size_t w, const std::vector<double>& k) {
  const auto r = static_cast<std::ptrdiff_t>(k.size() / 2);
  auto pass = [&](const Plane& in, bool horizontal) {
    Plane out(in.size());
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        double acc = 0.0, norm = 0.0;
        for (std::ptrdiff_t o = -r; o <= r; ++o) {
          const auto ii = static_cast<std::ptrdiff_t>(i) + (horizontal ? 0 : o);
          const auto jj = static_cast<std::ptrdiff_t>(j) + (horizontal ? o : 0);
          if (ii < 0 || jj < 0 || ii >= static_cast<std::ptrdiff_t>(h) || jj >= static_cast<std::ptrdiff_t>(w)) continue;
          const double kw = k[static_cast<std::size_t>(o + r)];
          acc += kw * in[static_cast<std::size_t>(ii) * w + static_cast<std::size_t>(jj)];
          norm += kw;
        }
        out[i * w + j] = acc / norm;
      }
    }
    return out;
  };
  return pass(pass(x, true), false);
}

double ssim_plane(const Plane& a, const Plane& b, std::size_t h, std::size_t w, const SsimOptions& o, double range) {
  std::vector<double> k(o.window);
  const double c = static_cast<double>(o.window / 2);
  for (std::size_t i = 0; i < o.window; ++i) {
    const double d = static_cast<double>(i) - c;
    k[i] = std::exp(-d * d / (2 * o.sigma * o.sigma));
  }
  Plane aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const Plane ma = blur(a, h, w, k), mb = blur(b, h, w, k);
  const Plane saa = blur(aa, h, w, k), sbb = blur(bb, h, w, k), sab = blur(ab, h, w, k);
  const double c1 = (o.k1 * range) * (o.k1 * range);
  const double c2 = (o.k2 * range) * (o.k2 * range);
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double va = saa[i] - ma[i] * ma[i];
    const double vb = sbb[i] - mb[i] * mb[i];
    const double cov = sab[i] - ma[i] * mb[i];
    total += ((2 * ma[i] * mb[i] + c1) * (2 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(a.size());
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b, const SsimOptions& o) {
  if (a.shape() != b.shape()) {
    throw ShapeError("ssim: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  if (a.rank() != 2 && a.rank() != 3) throw ShapeError("ssim: expected [H, W] or [H, W, C], got " + to_string(a.shape()));
  if (o.window == 0 || o.window % 2 == 0) throw ContractError("ssim: window must be odd");
  const std::size_t h = a.dim(0), w = a.dim(1), ch = a.rank() == 3 ? a.dim(2) : 1;
  const double range = o.data_range > 0 ? o.data_range : 2.0;
  const std::vector<double> av = a.to_vector(), bv = b.to_vector();
  auto channel = [&](const std::vector<double>& v, std::size_t c) {
    Plane p(h * w);
    for (std::size_t i = 0; i < h * w; ++i) p[i] = v[i * ch + c];
    return p;
  };
  if (ch == 3) {
    auto luma = [&](const std::vector<double>& v) {
      Plane p(h * w);
      for (std::size_t i = 0; i < h * w; ++i) p[i] = 0.299 * v[i * 3] + 0.587 * v[i * 3 + 1] + 0.114 * v[i * 3 + 2];
      return p;
    };
    return ssim_plane(luma(av), luma(bv), h, w, o, range);
  }
  double total = 0.0;
  for (std::size_t c = 0; c < ch; ++c) total += ssim_plane(channel(av, c), channel(bv, c), h, w, o, range);
  return total / static_cast<double>(ch);
}

double video_ssim(const Tensor& a, const Tensor& b, const SsimOptions& o) {
  if (a.shape() != b.shape()) {
    throw ShapeError("video_ssim: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  if (a.rank() < 3) throw ShapeError("video_ssim: expected [F, H, W(, C)], got " + to_string(a.shape()));
  const std::size_t frames = a.dim(0);
  const Shape fs(a.shape().begin() + 1, a.shape().end());
  std::size_t n = 1;
  for (auto e : fs) n *= e;
  const std::vector<double> av = a.to_vector(), bv = b.to_vector();
  double total = 0.0;
  for (std::size_t f = 0; f < frames; ++f) {
    const std::span<const double> sa(av.data() + f * n, n), sb(bv.data() + f * n, n);
    total += ssim(Tensor::from_doubles(fs, sa, DType::f64), Tensor::from_doubles(fs, sb, DType::f64), o);
  }
  return total / static_cast<double>(frames);
}

}  // namespace stdit
