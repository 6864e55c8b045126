#include "stdit/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include "stdit/audio.hpp"
#include "stdit/codec.hpp"
#include "stdit/kernels.hpp"
#include "stdit/ops.hpp"

namespace stdit {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Tensor unsqueeze0(const Tensor& t) {
  Shape s = t.shape();
  s.insert(s.begin(), 1);
  return reshape(t, s);
}

}  // namespace

std::vector<VideoSample> synthetic_videos(const ModelConfig& m, std::size_t videos, std::size_t frames,
                                          std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t H = m.latent_h, W = m.latent_w, C = m.channels;
  std::vector<VideoSample> out;
  for (std::size_t v = 0; v < videos; ++v) {
    const double phase = rng.uniform() * 6.28, a = 0.3 + rng.uniform() * 0.6, b = 0.3 + rng.uniform() * 0.6;
    const double omega = 0.2 + 0.3 * rng.uniform();
    std::vector<float> lat(frames * H * W * C);
    for (std::size_t f = 0; f < frames; ++f)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w)
          for (std::size_t c = 0; c < C; ++c) {
            const double arg = a * static_cast<double>(h) + b * static_cast<double>(w) * static_cast<double>(c + 1) * 0.5 +
                               omega * static_cast<double>(f) + phase + static_cast<double>(c);
            lat[((f * H + h) * W + w) * C + c] = static_cast<float>(0.8 * std::sin(arg));
          }
    VideoSample s;
    s.latents = Tensor::from({frames, H, W, C}, std::move(lat));
    s.audio = randn({frames, m.audio_layers, m.audio_feature_dim}, rng);
    s.name = "synthetic_" + std::to_string(v);
    out.push_back(std::move(s));
  }
  return out;
}

Tensor load_audio_windows(const std::filesystem::path& path, std::size_t frames, const DataParams& data) {
  Waveform wave = load_audio(path);
  if (wave.sample_rate != 16000) wave = resample_linear(wave, 16000);
  const double needed = static_cast<double>(frames) / data.fps;
  const double have = static_cast<double>(wave.samples.size()) / static_cast<double>(wave.sample_rate);
  if (have + 1e-9 < needed) {
    throw ContractError(path.string() + ": audio lasts " + std::to_string(have) + " s but " + std::to_string(frames) +
                        " frames at " + std::to_string(data.fps) + " fps need " + std::to_string(needed) + " s");
  }
  return align_windows(extract_features(wave), frames, data.fps, data.audio_window);
}

std::vector<VideoSample> load_dataset(const RunConfig& config) {
  if (config.data.kind == "synthetic") {
    return synthetic_videos(config.model, config.data.synthetic_videos, config.data.synthetic_frames, config.seed);
  }
  const auto& root = config.data.path;
  if (!std::filesystem::is_directory(root)) throw IoError("data.path " + root.string() + " is not a directory");
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (e.is_directory()) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  const LatentCodec codec(config.codec, 8, config.codec == CodecKind::identity ? config.model.channels : 3);
  const ModelConfig& m = config.model;
  std::vector<VideoSample> out;
  for (const auto& dir : dirs) {
    VideoSample s;
    s.name = dir.filename().string();
    if (std::filesystem::exists(dir / "latents.stdt")) {
      s.latents = load_tensor(dir / "latents.stdt");
    } else if (std::filesystem::is_directory(dir / "frames")) {
      s.latents = codec.encode(read_png_frames(dir / "frames"));
    } else {
      throw IoError(dir.string() + ": neither latents.stdt nor frames/ found");
    }
    if (s.latents.rank() != 4 || s.latents.dim(1) != m.latent_h || s.latents.dim(2) != m.latent_w ||
        s.latents.dim(3) != m.channels) {
      throw ShapeError(dir.string() + ": latents " + to_string(s.latents.shape()) + " do not match [T, " +
                       std::to_string(m.latent_h) + ", " + std::to_string(m.latent_w) + ", " +
                       std::to_string(m.channels) + "]");
    }
    const std::size_t frames = s.latents.dim(0);
    for (const char* name : {"audio.wav", "audio.f32"}) {
      if (std::filesystem::exists(dir / name)) {
        s.audio = load_audio_windows(dir / name, frames, config.data);
        break;
      }
    }
    if (m.audio_fusion != FusionKind::none) {
      if (!s.audio.defined()) throw IoError(dir.string() + ": no audio.wav or audio.f32");
      if (s.audio.dim(1) != m.audio_layers || s.audio.dim(2) != m.audio_feature_dim) {
        throw ShapeError(dir.string() + ": audio windows " + to_string(s.audio.shape()) +
                         " do not match model.audio_layers x model.audio_feature_dim");
      }
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw IoError("data.path " + root.string() + " holds no video directories");
  return out;
}

DiffusionSchedule make_schedule(const ScheduleParams& p) { return build_schedule(p.timesteps, p.beta_start, p.beta_end); }

Checkpoint training_checkpoint(const RunConfig& config, const DenoiserModel& model, const OptimState& optim,
                               const EmaState& ema, std::uint64_t step) {
  Checkpoint c;
  c.fingerprint = config_fingerprint(config);
  const auto& params = model.parameters().entries();
  for (const auto& [name, t] : params) c.add("model/" + name, t);
  for (const auto& [name, t] : ema.shadow.entries()) c.add("ema/" + name, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.add("optim.m/" + params[i].first, optim.m[i]);
    c.add("optim.v/" + params[i].first, optim.v[i]);
  }
  c.add("optim.step", Tensor::scalar(static_cast<double>(optim.step), DType::f64));
  c.add("train.step", Tensor::scalar(static_cast<double>(step), DType::f64));
  return c;
}

namespace {

void copy_into(Tensor& dst, const Tensor& src, const std::string& name) {
  if (dst.shape() != src.shape()) {
    throw ShapeError("checkpoint record '" + name + "' has shape " + to_string(src.shape()) + ", model expects " +
                     to_string(dst.shape()));
  }
  dispatch(dst.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const Tensor s = src.dtype() == dst.dtype() ? src : cast(src, dst.dtype());
    const auto in = s.template data<T>();
    auto out = dst.template mutable_data<T>();
    std::copy(in.begin(), in.end(), out.begin());
  });
}

void load_prefixed(const Checkpoint& ckpt, ParameterSet& params, const std::string& prefix) {
  for (auto& [name, t] : params.entries()) copy_into(t, ckpt.get(prefix + name), prefix + name);
}

}  // namespace

std::uint64_t restore_training(const Checkpoint& ckpt, DenoiserModel& model, OptimState& optim, EmaState& ema) {
  load_prefixed(ckpt, model.parameters(), "model/");
  load_prefixed(ckpt, ema.shadow, "ema/");
  auto& params = model.parameters().entries();
  for (std::size_t i = 0; i < params.size(); ++i) {
    copy_into(optim.m[i], ckpt.get("optim.m/" + params[i].first), "optim.m/" + params[i].first);
    copy_into(optim.v[i], ckpt.get("optim.v/" + params[i].first), "optim.v/" + params[i].first);
  }
  optim.step = static_cast<std::uint64_t>(ckpt.get("optim.step").item());
  return static_cast<std::uint64_t>(ckpt.get("train.step").item());
}

Checkpoint weights_checkpoint(const RunConfig& config, const ParameterSet& params) {
  Checkpoint c;
  c.fingerprint = config_fingerprint(config);
  for (const auto& [name, t] : params.entries()) c.add(name, t);
  return c;
}

void load_weights(const Checkpoint& ckpt, DenoiserModel& model, bool use_ema) {
  auto& params = model.parameters();
  if (params.size() == 0) return;
  const std::string& first = params.entries()[0].first;
  if (use_ema && ckpt.find("ema/" + first)) {
    load_prefixed(ckpt, params, "ema/");
  } else if (ckpt.find("model/" + first)) {
    load_prefixed(ckpt, params, "model/");
  } else {
    load_prefixed(ckpt, params, "");
  }
}

TrainResult train_model(const RunConfig& config, DenoiserModel& model, const std::vector<VideoSample>& videos,
                        OptimState& optim, EmaState& ema, std::uint64_t first_step, const TrainHooks& hooks,
                        const std::filesystem::path* output) {
  kernels::set_num_threads(config.training.threads);
  const DiffusionSchedule sched = make_schedule(config.schedule);
  ClipOptions co;
  co.clip_len = config.model.frames;
  co.interval = config.training.clip_interval;
  co.flip_prob = config.training.flip_prob;
  co.motion_frames = config.sampling.motion_frames;
  TrainOptions to;
  to.clip_norm = config.optimizer.clip_norm;
  to.vlb_weight = config.training.vlb_weight;
  to.zero_audio_prob = config.training.zero_audio_prob;

  std::ofstream csv;
  if (output) {
    const auto path = *output / "train_log.csv";
    const bool fresh = first_step == 0 || !std::filesystem::exists(path);
    std::vector<std::string> kept;
    if (!fresh) {
      // Drop rows past the resume point so the log reads as one run.
      std::ifstream in(path);
      std::string line;
      while (std::getline(in, line)) {
        if (kept.empty() || std::stoull(line.substr(0, line.find(','))) <= first_step) kept.push_back(line);
      }
    }
    csv.open(path, std::ios::trunc);
    if (!csv) throw IoError("cannot write " + path.string());
    if (fresh) csv << "step,l_simple,l_vlb,grad_norm,wall_time\n";
    for (const auto& line : kept) csv << line << '\n';
    csv << std::setprecision(9);
  }
  auto save = [&](std::uint64_t step, const std::string& tag, TrainResult& r) {
    if (!output) return;
    r.checkpoint = *output / ("checkpoint_" + tag + ".stdf");
    r.ema_checkpoint = *output / ("ema_" + tag + ".stdf");
    save_checkpoint(r.checkpoint, training_checkpoint(config, model, optim, ema, step));
    save_checkpoint(r.ema_checkpoint, weights_checkpoint(config, ema.shadow));
  };

  TrainResult result;
  const auto t0 = Clock::now();
  const std::uint64_t total = config.training.steps;
  const std::uint64_t tail = std::min<std::uint64_t>(100, total > first_step ? total - first_step : 0);
  double tail_sum = 0.0;
  for (std::uint64_t step = first_step; step < total; ++step) {
    Rng rng(derive_seed(config.seed, step + 1));
    const auto clips = make_clips(videos, co, config.training.batch_size, rng);
    const Batch batch = collate(clips, config.model.dtype);
    StepLosses l;
    try {
      l = train_step(model, batch, sched, optim, &ema, to, rng);
    } catch (const NumericError& e) {
      std::string hint = result.checkpoint.empty() ? "no checkpoint written yet" : "last good checkpoint " + result.checkpoint.string();
      throw NumericError(std::string(e.what()) + " (" + hint + ")");
    }
    const std::uint64_t done = step + 1;
    result.last = l;
    result.steps = done;
    if (total - done < tail) tail_sum += l.simple;
    const double wall = seconds_since(t0);
    if (csv.is_open()) csv << done << ',' << l.simple << ',' << l.vlb << ',' << l.grad_norm << ',' << wall << '\n';
    if (hooks.on_step) hooks.on_step(done, l);
    if (hooks.log && config.training.log_every && done % config.training.log_every == 0) {
      *hooks.log << "step " << done << "/" << total << "  l_simple " << l.simple << "  l_vlb " << l.vlb
                 << "  grad_norm " << l.grad_norm << "  " << std::fixed << std::setprecision(1) << wall << " s\n"
                 << std::defaultfloat << std::setprecision(6);
    }
    if (output && config.training.checkpoint_every && done % config.training.checkpoint_every == 0 && done != total) {
      save(done, std::to_string(done), result);
    }
  }
  if (tail) result.tail_simple = tail_sum / static_cast<double>(tail);
  result.steps = std::max(result.steps, first_step);
  if (output) save(result.steps, "last", result);
  result.seconds = seconds_since(t0);
  return result;
}

TrainResult run_train(const RunConfig& config, const std::optional<std::filesystem::path>& resume,
                      const TrainHooks& hooks) {
  config.validate();
  const auto videos = load_dataset(config);
  DenoiserModel model(config.model, config.seed);
  OptimState optim = OptimState::create(model.parameters(), config.optimizer.adamw);
  EmaState ema = EmaState::create(model.parameters(), config.optimizer.ema_decay);
  std::uint64_t first = 0;
  if (resume) first = restore_training(load_checkpoint(*resume, config_fingerprint(config)), model, optim, ema);
  std::filesystem::create_directories(config.output_dir);
  {
    std::ofstream out(config.output_dir / "config.json");
    if (!out) throw IoError("cannot write " + (config.output_dir / "config.json").string());
    out << to_json(config) << '\n';
  }
  return train_model(config, model, videos, optim, ema, first, hooks, &config.output_dir);
}

Tensor long_duration_generate(const DenoiserModel& model, const DiffusionSchedule& sched, const Tensor& reference,
                              const Tensor& audio, const GenerateOptions& o) {
  const ModelConfig& m = model.config();
  const std::size_t F = m.frames;
  if (o.clips == 0) throw ContractError("long_duration_generate: clips must be at least 1");
  if (o.motion_frames >= F) {
    throw ContractError("long_duration_generate: motion_frames " + std::to_string(o.motion_frames) +
                        " must be smaller than the clip length " + std::to_string(F));
  }
  if (o.motion_frames > m.max_motion_frames) {
    throw ContractError("long_duration_generate: motion_frames exceeds model.max_motion_frames");
  }
  const Shape ref_shape{m.latent_h, m.latent_w, m.channels};
  if (reference.shape() != ref_shape) {
    throw ShapeError("long_duration_generate: reference " + to_string(reference.shape()) + ", expected " +
                     to_string(ref_shape));
  }
  const bool audio_model = m.audio_fusion != FusionKind::none;
  if (audio_model && !o.zero_audio) {
    if (!audio.defined() || audio.rank() != 3 || audio.dim(0) < o.clips * F) {
      throw ContractError("long_duration_generate: audio covers " +
                          (audio.defined() ? std::to_string(audio.dim(0)) : std::string("0")) + " frames, " +
                          std::to_string(o.clips) + " clips need " + std::to_string(o.clips * F));
    }
  }
  if (o.initial_motion.defined()) {
    const Shape& s = o.initial_motion.shape();
    if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != ref_shape) {
      throw ShapeError("long_duration_generate: initial motion " + to_string(s) + " does not match the latent frame " +
                       to_string(ref_shape));
    }
  }
  NoGradGuard guard;
  const Tensor portrait = unsqueeze0(cast(reference, m.dtype));
  std::vector<Tensor> outputs;
  Tensor previous;
  for (std::size_t k = 0; k < o.clips; ++k) {
    Conditions cond;
    cond.portrait = portrait;
    ForwardOptions fo;
    fo.temporal_probe = o.temporal_probe;
    if (audio_model) {
      if (o.zero_audio) {
        fo.zero_audio = true;
      } else {
        cond.audio_tokens = model.audio_tokens(unsqueeze0(cast(slice(audio, 0, k * F, (k + 1) * F), m.dtype)));
      }
    }
    if (k > 0 && o.motion_frames > 0) {
      cond.motion = slice(previous, 1, F - o.motion_frames, F);
    } else if (k == 0 && o.initial_motion.defined() && o.initial_motion.dim(0) > 0) {
      cond.motion = unsqueeze0(cast(o.initial_motion, m.dtype));
    }
    const Denoiser den = [&](const Tensor& x, std::size_t t) { return model.forward(x, {t}, cond, fo); };
    SampleOptions so;
    so.steps = o.steps;
    so.seed = derive_seed(o.seed, k);
    so.clip_x0 = o.clip_x0;
    previous = ddpm_sample(den, {1, F, m.latent_h, m.latent_w, m.channels}, sched, so, m.dtype);
    outputs.push_back(reshape(previous, {F, m.latent_h, m.latent_w, m.channels}));
  }
  return outputs.size() == 1 ? outputs[0] : concat(outputs, 0);
}

Tensor run_sample(const RunConfig& config, const SampleRequest& r) {
  config.validate();
  const std::uint64_t fp = config_fingerprint(config);
  const std::uint64_t found = read_fingerprint(r.checkpoint);
  if (found != fp) {
    std::ostringstream msg;
    msg << r.checkpoint.string() << ": config fingerprint " << std::hex << found
        << " does not match the sampling config (" << fp << ")";
    throw FingerprintError(msg.str());
  }
  if (r.clips == 0) throw ContractError("sample: --clips must be at least 1");
  const ModelConfig& m = config.model;
  const LatentCodec codec(config.codec, 8, config.codec == CodecKind::identity ? m.channels : 3);

  Tensor reference;
  const std::string ref_ext = r.reference.extension().string();
  if (ref_ext == ".png") {
    reference = codec.encode(read_png(r.reference));
  } else {
    reference = load_tensor(r.reference);
  }
  if (reference.rank() == 4 && reference.dim(0) == 1) {
    reference = reshape(reference, Shape(reference.shape().begin() + 1, reference.shape().end()));
  }
  const Shape ref_shape{m.latent_h, m.latent_w, m.channels};
  if (reference.shape() != ref_shape) {
    throw ShapeError("sample: reference " + r.reference.string() + " has latent shape " + to_string(reference.shape()) +
                     ", config expects " + to_string(ref_shape));
  }

  Tensor audio;
  const std::size_t frames = r.clips * m.frames;
  if (m.audio_fusion != FusionKind::none && !r.zero_audio) {
    if (r.audio.empty()) throw ContractError("sample: --audio is required unless --zero-audio is given");
    if (r.audio.extension() == ".stdt") {
      audio = load_tensor(r.audio);
      if (audio.rank() != 3 || audio.dim(0) < frames) {
        throw ContractError("sample: audio windows " + to_string(audio.shape()) + " are shorter than " +
                            std::to_string(frames) + " frames");
      }
    } else {
      audio = load_audio_windows(r.audio, frames, config.data);
    }
    if (audio.dim(1) != m.audio_layers || audio.dim(2) != m.audio_feature_dim) {
      throw ShapeError("sample: audio windows " + to_string(audio.shape()) +
                       " do not match model.audio_layers x model.audio_feature_dim");
    }
  }

  const Checkpoint ckpt = load_checkpoint(r.checkpoint, fp);
  DenoiserModel model(m, config.seed);
  load_weights(ckpt, model, config.sampling.use_ema);
  kernels::set_num_threads(config.training.threads);

  GenerateOptions go;
  go.clips = r.clips;
  go.motion_frames = r.clips > 1 ? config.sampling.motion_frames : 0;
  go.steps = config.sampling.steps;
  go.seed = r.seed;
  go.zero_audio = r.zero_audio;
  go.clip_x0 = config.sampling.clip_x0;
  const Tensor latents = long_duration_generate(model, make_schedule(config.schedule), reference, audio, go);

  if (!r.output.empty()) {
    if (r.output.has_parent_path()) std::filesystem::create_directories(r.output.parent_path());
    save_tensor(r.output, latents);
    const Tensor pixels = codec.decode(latents);
    if (pixels.dim(-1) == 1 || pixels.dim(-1) == 3) {
      auto dir = r.output;
      dir.replace_extension();
      write_png_frames(dir.string() + "_frames", pixels);
    }
  }
  return latents;
}

std::vector<BenchRow> run_benchmark(const std::vector<std::size_t>& frames, const std::vector<std::size_t>& positions,
                                    std::size_t dim, std::size_t reps, std::size_t heads, std::uint64_t seed) {
  if (reps == 0) throw ContractError("bench: reps must be at least 1");
  if (heads == 0 || dim % heads != 0) throw ContractError("bench: dim must be divisible by heads");
  Rng rng(seed);
  ParameterSet params;
  ParamFactory f{params, rng, DType::f32};
  const AttentionWeights wj = AttentionWeights::create(f, "joint", dim, heads);
  const AttentionWeights ws = AttentionWeights::create(f, "spatial", dim, heads);
  const AttentionWeights wt = AttentionWeights::create(f, "temporal", dim, heads);
  NoGradGuard guard;
  auto measure = [&](auto&& fn, double& ms, std::size_t& peak) {
    fn();
    std::vector<double> times;
    for (std::size_t r = 0; r < reps; ++r) {
      reset_memory_peaks();
      const auto t0 = Clock::now();
      fn();
      times.push_back(seconds_since(t0) * 1e3);
      peak = std::max(peak, memory_stats().largest_buffer_bytes);
    }
    std::nth_element(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2), times.end());
    ms = times[times.size() / 2];
  };
  std::vector<BenchRow> rows;
  for (std::size_t F : frames) {
    for (std::size_t P : positions) {
      BenchRow row;
      row.frames = F;
      row.positions = P;
      row.joint_elements = count_attention_elements(F, P, false);
      row.factorized_elements = count_attention_elements(F, P, true);
      const Tensor x = randn({1, F, P, dim}, rng);
      measure([&] { return joint_attend(wj, x); }, row.joint_ms, row.joint_peak_bytes);
      measure([&] { return spatial_attention(ws, temporal_attention(wt, x)); }, row.factorized_ms,
              row.factorized_peak_bytes);
      rows.push_back(row);
    }
  }
  return rows;
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows) {
  out << "frames,positions,joint_elements,factorized_elements,element_ratio,joint_ms,factorized_ms,speedup,"
         "joint_peak_bytes,factorized_peak_bytes\n";
  for (const auto& r : rows) {
    out << r.frames << ',' << r.positions << ',' << r.joint_elements << ',' << r.factorized_elements << ','
        << static_cast<double>(r.joint_elements) / static_cast<double>(r.factorized_elements) << ',' << r.joint_ms
        << ',' << r.factorized_ms << ',' << r.joint_ms / r.factorized_ms << ',' << r.joint_peak_bytes << ','
        << r.factorized_peak_bytes << '\n';
  }
}

void write_bench_table(std::ostream& out, const std::vector<BenchRow>& rows) {
  out << std::left << std::setw(6) << "F" << std::setw(7) << "P" << std::right << std::setw(14) << "joint elems"
      << std::setw(14) << "fact elems" << std::setw(8) << "ratio" << std::setw(12) << "joint ms" << std::setw(12)
      << "fact ms" << std::setw(9) << "speedup" << std::setw(14) << "joint peak" << std::setw(14) << "fact peak"
      << '\n';
  for (const auto& r : rows) {
    out << std::left << std::setw(6) << r.frames << std::setw(7) << r.positions << std::right << std::setw(14)
        << r.joint_elements << std::setw(14) << r.factorized_elements << std::setw(8) << std::fixed
        << std::setprecision(2) << static_cast<double>(r.joint_elements) / static_cast<double>(r.factorized_elements)
        << std::setw(12) << std::setprecision(3) << r.joint_ms << std::setw(12) << r.factorized_ms << std::setw(9)
        << std::setprecision(2) << r.joint_ms / r.factorized_ms << std::setw(14) << r.joint_peak_bytes
        << std::setw(14) << r.factorized_peak_bytes << std::defaultfloat << '\n';
  }
}

}  // namespace stdit
