#include "stdit/codec.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

#include "stdit/ops.hpp"

namespace stdit {

std::string to_string(CodecKind kind) {
  return kind == CodecKind::identity ? "identity" : "space_to_depth";
}

CodecKind parse_codec_kind(const std::string& name) {
  if (name == "identity") return CodecKind::identity;
  if (name == "space_to_depth") return CodecKind::space_to_depth;
  throw ContractError("unknown codec '" + name + "' (expected identity, space_to_depth)");
}

LatentCodec::LatentCodec(CodecKind kind, std::size_t factor, std::size_t pixel_channels)
    : kind_(kind), factor_(factor), pixel_channels_(pixel_channels) {
  if (factor_ == 0 || pixel_channels_ == 0) throw ContractError("LatentCodec: factor and channels must be positive");
}

std::size_t LatentCodec::latent_channels() const {
  return kind_ == CodecKind::identity ? pixel_channels_ : factor_ * factor_ * pixel_channels_;
}

Tensor LatentCodec::encode(const Tensor& video) const {
  if (video.rank() < 3) throw ShapeError("encode: expected [..., H, W, C], got " + to_string(video.shape()));
  if (video.dim(-1) != pixel_channels_) {
    throw ShapeError("encode: expected " + std::to_string(pixel_channels_) + " channels, got " +
                     to_string(video.shape()));
  }
  if (kind_ == CodecKind::identity) return video;
  const std::size_t H = video.dim(-3), W = video.dim(-2), C = pixel_channels_, f = factor_;
  if (H % f != 0 || W % f != 0) {
    throw ShapeError("encode: spatial extents " + std::to_string(H) + "x" + std::to_string(W) +
                     " are not divisible by " + std::to_string(f));
  }
  Shape lead(video.shape().begin(), video.shape().end() - 3);
  const std::size_t n = numel(lead);
  Shape split{n, H / f, f, W / f, f, C};
  Tensor t = permute(reshape(video, split), {0, 1, 3, 2, 4, 5});
  Shape out = lead;
  out.insert(out.end(), {H / f, W / f, f * f * C});
  return reshape(t, out);
}

Tensor LatentCodec::decode(const Tensor& latent) const {
  if (latent.rank() < 3) throw ShapeError("decode: expected [..., h, w, C], got " + to_string(latent.shape()));
  if (latent.dim(-1) != latent_channels()) {
    throw ShapeError("decode: expected " + std::to_string(latent_channels()) + " latent channels for " +
                     to_string(kind_) + ", got " + to_string(latent.shape()));
  }
  if (kind_ == CodecKind::identity) return latent;
  const std::size_t h = latent.dim(-3), w = latent.dim(-2), C = pixel_channels_, f = factor_;
  Shape lead(latent.shape().begin(), latent.shape().end() - 3);
  const std::size_t n = numel(lead);
  Tensor t = permute(reshape(latent, {n, h, w, f, f, C}), {0, 1, 3, 2, 4, 5});
  Shape out = lead;
  out.insert(out.end(), {h * f, w * f, C});
  return reshape(t, out);
}

Tensor identity_latents(const Tensor& latents, const Shape& expected) {
  if (latents.shape() != expected) {
    throw ShapeError("identity_latents: got " + to_string(latents.shape()) + ", config expects " + to_string(expected));
  }
  return latents;
}

namespace {

constexpr char kTensorMagic[4] = {'S', 'T', 'D', 'T'};

template <class T>
void put(std::ostream& out, T v) {
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get(std::istream& in, const std::string& where) {
  unsigned char b[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) throw IoError(where + ": truncated header");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<T>(v);
}

static_assert(std::endian::native == std::endian::little, "payloads are written in native little-endian order");

}  // namespace

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kTensorMagic, 4);
  put<std::uint32_t>(out, t.dtype() == DType::f64 ? 1u : 0u);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  put<std::uint32_t>(out, 0u);
  for (std::size_t e : t.shape()) put<std::uint64_t>(out, e);
  dispatch(t.dtype(), [&](auto tag) {
    const auto d = t.template data<decltype(tag)>();
    out.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size_bytes()));
  });
  if (!out) throw IoError("write failed for " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  const std::string where = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + where);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kTensorMagic, 4) != 0) throw IoError(where + ": not a tensor file");
  const auto code = get<std::uint32_t>(in, where);
  const auto rank = get<std::uint32_t>(in, where);
  get<std::uint32_t>(in, where);
  if (code > 1) throw IoError(where + ": unknown dtype code " + std::to_string(code));
  if (rank > 16) throw IoError(where + ": implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = get<std::uint64_t>(in, where);
  const std::size_t n = numel(shape);
  auto read = [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> v(n);
    if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)))) {
      throw IoError(where + ": payload shorter than " + to_string(shape) + " requires");
    }
    return Tensor::from(shape, std::move(v));
  };
  return code == 1 ? read(double{}) : read(float{});
}

Tensor read_png(const std::filesystem::path& path) {
  const std::string where = path.string();
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, where.c_str())) {
    throw IoError(where + ": " + (img.message[0] ? img.message : "cannot read PNG"));
  }
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const std::size_t h = img.height, w = img.width, c = gray ? 1 : 3;
  std::vector<unsigned char> pixels(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError(where + ": " + msg);
  }
  std::vector<float> v(h * w * c);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(pixels[i]) / 127.5f - 1.0f;
  return Tensor::from({h, w, c}, std::move(v));
}

void write_png(const std::filesystem::path& path, const Tensor& image) {
  const std::string where = path.string();
  if (image.rank() != 3 || (image.dim(2) != 1 && image.dim(2) != 3)) {
    throw ShapeError("write_png: expected [H, W, 1|3], got " + to_string(image.shape()));
  }
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  std::vector<unsigned char> pixels(h * w * c);
  const auto v = image.to_vector();
  for (std::size_t i = 0; i < v.size(); ++i) {
    pixels[i] = static_cast<unsigned char>(std::lround(std::clamp((v[i] + 1.0) * 127.5, 0.0, 255.0)));
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, where.c_str(), 0, pixels.data(), 0, nullptr)) {
    throw IoError("cannot write " + where + ": " + img.message);
  }
}

void write_png_frames(const std::filesystem::path& dir, const Tensor& video) {
  if (video.rank() != 4) throw ShapeError("write_png_frames: expected [F, H, W, C], got " + to_string(video.shape()));
  std::filesystem::create_directories(dir);
  const Shape fs(video.shape().begin() + 1, video.shape().end());
  for (std::size_t f = 0; f < video.dim(0); ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04zu.png", f);
    write_png(dir / name, reshape(slice(video, 0, f, f + 1), fs));
  }
}

Tensor read_png_frames(const std::filesystem::path& dir) {
  std::vector<Tensor> frames;
  for (std::size_t f = 0;; ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04zu.png", f);
    const auto p = dir / name;
    if (!std::filesystem::exists(p)) break;
    Tensor img = read_png(p);
    if (!frames.empty() && img.shape() != Shape(frames[0].shape().begin() + 1, frames[0].shape().end())) {
      throw IoError(p.string() + ": frame size differs from frame_0000.png");
    }
    Shape s = img.shape();
    s.insert(s.begin(), 1);
    frames.push_back(reshape(img, s));
  }
  if (frames.empty()) throw IoError(dir.string() + ": no frame_0000.png found");
  return frames.size() == 1 ? frames[0] : concat(frames, 0);
}

}  // namespace stdit
