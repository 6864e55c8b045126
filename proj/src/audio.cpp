#include "stdit/audio.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>

#include "stdit/ops.hpp"

namespace stdit {

namespace {

std::uint32_t read_u32(const unsigned char* p) { return p[0] | p[1] << 8 | p[2] << 16 | std::uint32_t(p[3]) << 24; }
std::uint16_t read_u16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | p[1] << 8); }

void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>(v >> 8));
}

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// FFTW planning is not thread-safe.
std::mutex& fftw_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  const std::string where = path.string();
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw IoError(where + ": not a RIFF/WAVE file");
  }
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0;
  std::uint32_t rate = 0;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t size = read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw IoError(where + ": truncated chunk");
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16) throw IoError(where + ": short fmt chunk");
      const std::uint16_t format = read_u16(bytes.data() + body);
      channels = read_u16(bytes.data() + body + 2);
      rate = read_u32(bytes.data() + body + 4);
      bits = read_u16(bytes.data() + body + 14);
      if (format != 1) throw IoError(where + ": only PCM WAV is supported (format " + std::to_string(format) + ")");
      if (channels != 1) {
        throw IoError(where + ": expected mono audio, got " + std::to_string(channels) + " channels");
      }
      if (bits != 16) throw IoError(where + ": expected 16-bit samples, got " + std::to_string(bits));
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      if (!have_fmt) throw IoError(where + ": data chunk before fmt chunk");
      Waveform w;
      w.sample_rate = rate;
      w.samples.resize(size / 2);
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        const auto v = static_cast<std::int16_t>(read_u16(bytes.data() + body + 2 * i));
        w.samples[i] = static_cast<float>(v) / 32768.0f;
      }
      return w;
    }
    pos = body + size + (size & 1);
  }
  throw IoError(where + ": no data chunk");
}

void write_wav(const std::filesystem::path& path, const Waveform& wave) {
  std::string out;
  const auto data_bytes = static_cast<std::uint32_t>(wave.samples.size() * 2);
  out += "RIFF";
  put_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate * 2));
  put_u16(out, 2);
  put_u16(out, 16);
  out += "data";
  put_u32(out, data_bytes);
  for (float s : wave.samples) {
    const double clamped = std::clamp(static_cast<double>(s), -1.0, 1.0);
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(clamped * 32767.0))));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

Waveform read_raw_f32(const std::filesystem::path& path, std::size_t sample_rate) {
  const auto bytes = slurp(path);
  if (bytes.size() % 4 != 0) throw IoError(path.string() + ": size is not a multiple of 4 bytes");
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.resize(bytes.size() / 4);
  std::memcpy(w.samples.data(), bytes.data(), bytes.size());
  return w;
}

Waveform load_audio(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".wav" ? read_wav(path) : read_raw_f32(path);
}

Waveform resample_linear(const Waveform& in, std::size_t target_rate) {
  if (in.sample_rate == 0 || target_rate == 0) throw ContractError("resample_linear: zero sample rate");
  if (in.sample_rate == target_rate || in.samples.empty()) return {in.samples, target_rate};
  const double ratio = static_cast<double>(in.sample_rate) / static_cast<double>(target_rate);
  const auto n = static_cast<std::size_t>(std::llround(static_cast<double>(in.samples.size()) / ratio));
  Waveform out;
  out.sample_rate = target_rate;
  out.samples.resize(n);
  const std::size_t last = in.samples.size() - 1;
  for (std::size_t i = 0; i < n; ++i) {
    const double src = static_cast<double>(i) * ratio;
    const auto j = std::min(static_cast<std::size_t>(src), last);
    const double frac = src - static_cast<double>(j);
    const double a = in.samples[j];
    const double b = in.samples[std::min(j + 1, last)];
    out.samples[i] = static_cast<float>(a + (b - a) * frac);
  }
  return out;
}

std::vector<std::vector<double>> mel_filterbank(const LogMelOptions& o, std::size_t sample_rate) {
  const std::size_t bins = o.fft_size / 2 + 1;
  const double lo = hz_to_mel(o.fmin);
  const double hi = hz_to_mel(std::min(o.fmax, sample_rate / 2.0));
  std::vector<double> edges(o.mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(o.mels + 1));
  }
  std::vector<std::vector<double>> fb(o.mels, std::vector<double>(bins, 0.0));
  for (std::size_t m = 0; m < o.mels; ++m) {
    for (std::size_t b = 0; b < bins; ++b) {
      const double f = static_cast<double>(b) * sample_rate / static_cast<double>(o.fft_size);
      const double up = (f - edges[m]) / (edges[m + 1] - edges[m]);
      const double down = (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1]);
      fb[m][b] = std::max(0.0, std::min(up, down));
    }
  }
  return fb;
}

AudioFeatures extract_features(const Waveform& wave, const LogMelOptions& o) {
  if (wave.samples.empty()) throw ContractError("extract_features: empty waveform");
  if (wave.sample_rate != 16000) {
    throw ContractError("extract_features: expected 16000 Hz input, got " + std::to_string(wave.sample_rate) +
                        " (resample first)");
  }
  if (o.window > o.fft_size) throw ContractError("extract_features: window longer than FFT");
  const std::size_t n = wave.samples.size();
  const std::size_t frames = (n + o.hop - 1) / o.hop;
  const std::size_t bins = o.fft_size / 2 + 1;
  const auto fb = mel_filterbank(o, wave.sample_rate);

  std::vector<double> window(o.window);
  for (std::size_t i = 0; i < o.window; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) / static_cast<double>(o.window));
  }

  double* in = fftw_alloc_real(o.fft_size);
  fftw_complex* spectrum = fftw_alloc_complex(bins);
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_mutex());
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(o.fft_size), in, spectrum, FFTW_ESTIMATE);
  }
  std::vector<float> out(frames * o.mels);
  std::vector<double> power(bins);
  const auto half = static_cast<std::ptrdiff_t>(o.window / 2);
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(in, in + o.fft_size, 0.0);
    const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(t * o.hop) - half;
    for (std::size_t i = 0; i < o.window; ++i) {
      const std::ptrdiff_t s = start + static_cast<std::ptrdiff_t>(i);
      if (s >= 0 && s < static_cast<std::ptrdiff_t>(n)) in[i] = wave.samples[static_cast<std::size_t>(s)] * window[i];
    }
    fftw_execute(plan);
    for (std::size_t b = 0; b < bins; ++b) power[b] = spectrum[b][0] * spectrum[b][0] + spectrum[b][1] * spectrum[b][1];
    for (std::size_t m = 0; m < o.mels; ++m) {
      double e = 0.0;
      for (std::size_t b = 0; b < bins; ++b) e += fb[m][b] * power[b];
      out[t * o.mels + m] = static_cast<float>(std::log(std::max(e, o.floor)));
    }
  }
  {
    std::lock_guard lock(fftw_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(in);
  fftw_free(spectrum);
  return {Tensor::from({1, frames, o.mels}, std::move(out)), wave.sample_rate,
          static_cast<double>(wave.sample_rate) / static_cast<double>(o.hop)};
}

Tensor align_windows(const AudioFeatures& feat, std::size_t frames, double video_fps, std::size_t w,
                     std::size_t first_frame) {
  const double ratio = feat.feature_rate / video_fps;
  const auto k = static_cast<std::size_t>(std::llround(ratio));
  if (k == 0 || std::abs(ratio - static_cast<double>(k)) > 1e-9) {
    throw ContractError("align_windows: feature rate " + std::to_string(feat.feature_rate) + " / fps " +
                        std::to_string(video_fps) + " is not a positive integer");
  }
  const std::size_t L = feat.layers(), Ta = feat.frames(), c = feat.channels();
  const std::size_t span = (2 * w + 1) * k;
  const auto src = feat.data.to_vector();
  std::vector<float> out(frames * L * span * c, 0.0f);
  for (std::size_t f = 0; f < frames; ++f) {
    const auto centre = static_cast<std::ptrdiff_t>(first_frame + f);
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t j = 0; j < span; ++j) {
        const std::ptrdiff_t vf = centre - static_cast<std::ptrdiff_t>(w) + static_cast<std::ptrdiff_t>(j / k);
        if (vf < 0) continue;
        const std::size_t a = static_cast<std::size_t>(vf) * k + j % k;
        if (a >= Ta) continue;
        const double* s = src.data() + (l * Ta + a) * c;
        float* d = out.data() + ((f * L + l) * span + j) * c;
        for (std::size_t ch = 0; ch < c; ++ch) d[ch] = static_cast<float>(s[ch]);
      }
    }
  }
  return Tensor::from({frames, L, span * c}, std::move(out));
}

AudioProjection AudioProjection::create(ParamFactory& f, const std::string& name, std::size_t layers,
                                        std::size_t in_dim, std::size_t hidden, std::size_t tokens, std::size_t dim) {
  AudioProjection p;
  if (layers > 1) p.layer_logits = f.make(name + ".layer_logits", {layers}, Init::zeros);
  p.fc1 = Linear::create(f, name + ".fc1", in_dim, hidden, Init::trunc_normal);
  p.fc2 = Linear::create(f, name + ".fc2", hidden, tokens * dim, Init::trunc_normal);
  p.tokens = tokens;
  p.dim = dim;
  return p;
}

Tensor AudioProjection::operator()(const Tensor& windowed) const {
  if (windowed.rank() != 4) throw ShapeError("audio projection: expected [B, F, L, m], got " + to_string(windowed.shape()));
  const std::size_t B = windowed.dim(0), F = windowed.dim(1), L = windowed.dim(2);
  Tensor x;
  if (L == 1) {
    x = reshape(windowed, {B, F, windowed.dim(3)});
  } else {
    if (!layer_logits.defined() || layer_logits.dim(0) != L) {
      throw ShapeError("audio projection: built for a different layer count than " + std::to_string(L));
    }
    const Tensor w = reshape(softmax(layer_logits, 0), {1, 1, L, 1});
    x = sum(mul(windowed, w), 2);
  }
  if (x.dim(2) != fc1.in_features()) {
    throw ShapeError("audio projection: expected window width " + std::to_string(fc1.in_features()) + ", got " +
                     std::to_string(x.dim(2)));
  }
  return reshape(fc2(silu(fc1(x))), {B, F, tokens, dim});
}

}  // namespace stdit
