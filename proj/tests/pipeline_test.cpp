#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stdit/checkpoint.hpp"
#include "stdit/config.hpp"
#include "stdit/metrics.hpp"
#include "stdit/ops.hpp"
#include "stdit/pipeline.hpp"

using namespace stdit;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("stdit_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string config_error(const std::string& json) {
  try {
    parse_run_config(json);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

ModelConfig toy_model() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.heads = 2;
  c.frames = 4;
  c.latent_h = 4;
  c.latent_w = 4;
  c.channels = 2;
  c.audio_tokens = 2;
  c.audio_feature_dim = 6;
  c.freq_dim = 8;
  return c;
}

RunConfig toy_run(const fs::path& out) {
  RunConfig r;
  r.model = toy_model();
  r.training.steps = 4;
  r.training.batch_size = 2;
  r.training.log_every = 1;
  r.training.checkpoint_every = 2;
  r.data.synthetic_videos = 2;
  r.data.synthetic_frames = 8;
  r.sampling.steps = 5;
  r.seed = 11;
  r.output_dir = out;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Config, DefaultsAndRoundTrip) {
  const RunConfig d = parse_run_config("{}");
  EXPECT_EQ(d.model.layers, 12u);
  EXPECT_EQ(d.schedule.timesteps, 1000u);
  EXPECT_DOUBLE_EQ(d.optimizer.adamw.lr, 1e-4);
  EXPECT_DOUBLE_EQ(d.optimizer.ema_decay, 0.9999);
  EXPECT_EQ(d.sampling.steps, 250u);
  EXPECT_EQ(d.sampling.motion_frames, 2u);

  RunConfig c = toy_run("/tmp/x");
  c.model.portrait_fusion = FusionKind::siamese;
  c.model.dtype = DType::f64;
  c.sampling.clip_x0.reset();
  const std::string text = to_json(c);
  const RunConfig back = parse_run_config(text);
  EXPECT_EQ(to_json(back), text);
  EXPECT_EQ(back.model.portrait_fusion, FusionKind::siamese);
  EXPECT_FALSE(back.sampling.clip_x0.has_value());
  EXPECT_EQ(config_fingerprint(back), config_fingerprint(c));
}

TEST(Config, StrictKeysAndTypes) {
  EXPECT_NE(config_error(R"({"sed": 1})").find("sed"), std::string::npos);
  EXPECT_NE(config_error(R"({"model": {"layer": 2}})").find("model.layer"), std::string::npos);
  EXPECT_NE(config_error(R"({"model": {"layers": "two"}})").find("model.layers"), std::string::npos);
  EXPECT_NE(config_error(R"({"model": {"layers": -1}})").find("model.layers"), std::string::npos);
  EXPECT_NE(config_error(R"({"model": {"audio_fusion": "cross"}})").find("audio_fusion"), std::string::npos);
  EXPECT_NE(config_error(R"({"codec": "vae"})").find("codec"), std::string::npos);
  EXPECT_FALSE(config_error("{not json").empty());
  EXPECT_FALSE(config_error("[]").empty());
}

TEST(Config, CrossFieldValidation) {
  EXPECT_NE(config_error(R"({"model": {"frames": 2}, "sampling": {"motion_frames": 2}})").find("motion_frames"),
            std::string::npos);
  EXPECT_NE(config_error(R"({"model": {"hidden": 30, "heads": 4}})").find("heads"), std::string::npos);
  EXPECT_NE(config_error(R"({"optimizer": {"ema_decay": 1.0}})").find("ema_decay"), std::string::npos);
  EXPECT_NE(config_error(R"({"schedule": {"beta_start": 0.1, "beta_end": 0.01}})").find("beta"), std::string::npos);
  EXPECT_NE(config_error(R"({"data": {"kind": "directory"}})").find("data.path"), std::string::npos);
  EXPECT_NE(config_error(R"({"sampling": {"steps": 2000}})").find("sampling.steps"), std::string::npos);
}

TEST(Config, FingerprintTracksShapesOnly) {
  RunConfig a = toy_run("/a"), b = toy_run("/b");
  b.training.steps = 99;
  b.optimizer.adamw.lr = 0.5;
  EXPECT_EQ(config_fingerprint(a), config_fingerprint(b));
  b.model.hidden = 32;
  EXPECT_NE(config_fingerprint(a), config_fingerprint(b));
  RunConfig c = toy_run("/c");
  c.schedule.beta_end = 0.03;
  EXPECT_NE(config_fingerprint(a), config_fingerprint(c));
}

TEST(Checkpoint, BitwiseRoundTrip) {
  const auto dir = scratch_dir("ckpt");
  Rng rng(1);
  Checkpoint c;
  c.fingerprint = 0x1234abcdULL;
  c.add("a", randn({3, 4}, rng));
  c.add("b/long.name", randn({2, 1, 5}, rng, DType::f64));
  c.add("scalar", Tensor::scalar(7.0));
  save_checkpoint(dir / "c.stdf", c);
  EXPECT_EQ(read_fingerprint(dir / "c.stdf"), 0x1234abcdULL);
  const Checkpoint back = load_checkpoint(dir / "c.stdf", 0x1234abcdULL);
  ASSERT_EQ(back.tensors.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.tensors[i].first, c.tensors[i].first);
    EXPECT_EQ(back.tensors[i].second.dtype(), c.tensors[i].second.dtype());
    EXPECT_EQ(back.tensors[i].second.shape(), c.tensors[i].second.shape());
    EXPECT_EQ(back.tensors[i].second.to_vector(), c.tensors[i].second.to_vector());
  }
  EXPECT_THROW(back.get("missing"), IoError);
  EXPECT_FALSE(fs::exists(dir / "c.stdf.tmp"));
  fs::remove_all(dir);
}

TEST(Checkpoint, RejectsMismatchAndCorruption) {
  const auto dir = scratch_dir("bad");
  Checkpoint c;
  c.fingerprint = 5;
  c.add("w", Tensor::ones({8}));
  save_checkpoint(dir / "c.stdf", c);
  EXPECT_THROW(load_checkpoint(dir / "c.stdf", 6), FingerprintError);
  fs::resize_file(dir / "c.stdf", fs::file_size(dir / "c.stdf") - 4);
  EXPECT_THROW(load_checkpoint(dir / "c.stdf"), IoError);
  std::ofstream(dir / "junk.stdf", std::ios::binary) << "JUNKJUNKJUNKJUNKJUNKJUNK";
  EXPECT_THROW(load_checkpoint(dir / "junk.stdf"), IoError);
  fs::remove_all(dir);
}

TEST(Checkpoint, Fnv1aKnownValues) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
}

TEST(Checkpoint, ModelWeightsRestoreExactly) {
  const RunConfig cfg = toy_run("/unused");
  DenoiserModel a(cfg.model, 1), b(cfg.model, 2);
  Rng rng(3);
  a.parameters().randomize(rng, 0.1);
  const auto dir = scratch_dir("weights");
  save_checkpoint(dir / "w.stdf", weights_checkpoint(cfg, a.parameters()));
  load_weights(load_checkpoint(dir / "w.stdf", config_fingerprint(cfg)), b);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters().entries()[i].second.to_vector(), b.parameters().entries()[i].second.to_vector());
  }
  fs::remove_all(dir);
}

TEST(Ssim, IdentityAndSymmetry) {
  Rng rng(4);
  const Tensor a = rand_uniform({24, 20, 3}, -1, 1, rng, DType::f64);
  const Tensor b = rand_uniform({24, 20, 3}, -1, 1, rng, DType::f64);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
  EXPECT_LT(ssim(a, b), 0.2);
  const Tensor g = rand_uniform({16, 16}, -1, 1, rng, DType::f64);
  EXPECT_NEAR(ssim(g, g), 1.0, 1e-12);
  EXPECT_THROW(ssim(a, g), ShapeError);
}

TEST(Ssim, CheckerboardAgainstFlatIsLow) {
  std::vector<double> v(32 * 32);
  for (std::size_t i = 0; i < 32; ++i) {
    for (std::size_t j = 0; j < 32; ++j) v[i * 32 + j] = ((i + j) % 2) ? 1.0 : -1.0;
  }
  const Tensor board = Tensor::from_doubles({32, 32}, v, DType::f64);
  EXPECT_LT(ssim(board, Tensor::zeros({32, 32}, DType::f64)), 0.5);
  EXPECT_LT(ssim(board, scale(board, -1.0)), 0.0);
}

TEST(Ssim, MatchesDirectFormulaOnConstantImages) {
  // Constant images: structure and contrast terms vanish, leaving luminance.
  const double c1 = std::pow(0.01 * 2.0, 2);
  const double mx = 0.3, my = -0.2;
  const double expected = (2 * mx * my + c1) / (mx * mx + my * my + c1);
  EXPECT_NEAR(ssim(Tensor::full({12, 12}, mx, DType::f64), Tensor::full({12, 12}, my, DType::f64)), expected, 1e-9);
}

TEST(Ssim, VideoAveragesFrames) {
  Rng rng(5);
  const Tensor a = rand_uniform({3, 16, 16}, -1, 1, rng, DType::f64);
  const Tensor b = rand_uniform({3, 16, 16}, -1, 1, rng, DType::f64);
  double mean = 0.0;
  for (std::size_t f = 0; f < 3; ++f) {
    mean += ssim(reshape(slice(a, 0, f, f + 1), {16, 16}), reshape(slice(b, 0, f, f + 1), {16, 16})) / 3.0;
  }
  EXPECT_NEAR(video_ssim(a, b), mean, 1e-12);
}

TEST(LongDuration, ChainsMotionFramesIntoTemporalAttention) {
  const ModelConfig m = toy_model();
  DenoiserModel model(m, 1);
  Rng rng(6);
  model.parameters().randomize(rng, 0.05);
  const auto sched = build_schedule();
  const Tensor ref = randn({4, 4, 2}, rng);
  const Tensor audio = randn({8, 1, 6}, rng);
  AttentionProbe probe;
  GenerateOptions o;
  o.clips = 2;
  o.steps = 3;
  o.seed = 9;
  o.temporal_probe = &probe;
  const Tensor out = long_duration_generate(model, sched, ref, audio, o);
  EXPECT_EQ(out.shape(), (Shape{8, 4, 4, 2}));
  // Clip 1: keys F; clip 2: keys F + 2 in every layer at every step.
  ASSERT_EQ(probe.shapes.size(), 2u * 3u * 2u);
  for (std::size_t i = 0; i < probe.shapes.size(); ++i) {
    const std::size_t keys = i < 6 ? 4 : 6;
    EXPECT_EQ(probe.shapes[i], (Shape{8, 2, 4, keys})) << "call " << i;
  }
  o.temporal_probe = nullptr;
  EXPECT_EQ(long_duration_generate(model, sched, ref, audio, o).to_vector(), out.to_vector());
  o.seed = 10;
  EXPECT_NE(long_duration_generate(model, sched, ref, audio, o).to_vector(), out.to_vector());
}

TEST(LongDuration, NoMotionFramesAndInitialContext) {
  const ModelConfig m = toy_model();
  DenoiserModel model(m, 1);
  Rng rng(7);
  const auto sched = build_schedule();
  const Tensor ref = randn({4, 4, 2}, rng);
  const Tensor audio = randn({8, 1, 6}, rng);
  AttentionProbe probe;
  GenerateOptions o;
  o.clips = 2;
  o.steps = 2;
  o.motion_frames = 0;
  o.temporal_probe = &probe;
  EXPECT_EQ(long_duration_generate(model, sched, ref, audio, o).dim(0), 8u);
  for (const auto& s : probe.shapes) EXPECT_EQ(s.back(), 4u);

  AttentionProbe first;
  GenerateOptions p;
  p.clips = 1;
  p.steps = 2;
  p.initial_motion = randn({2, 4, 4, 2}, rng);
  p.temporal_probe = &first;
  long_duration_generate(model, sched, ref, audio, p);
  for (const auto& s : first.shapes) EXPECT_EQ(s.back(), 6u);
  p.initial_motion = randn({2, 4, 4, 3}, rng);
  EXPECT_THROW(long_duration_generate(model, sched, ref, audio, p), ShapeError);
}

TEST(LongDuration, RejectsBadRequests) {
  const ModelConfig m = toy_model();
  DenoiserModel model(m, 1);
  Rng rng(8);
  const auto sched = build_schedule();
  const Tensor ref = randn({4, 4, 2}, rng);
  GenerateOptions o;
  o.clips = 2;
  o.steps = 2;
  EXPECT_THROW(long_duration_generate(model, sched, ref, randn({7, 1, 6}, rng), o), ContractError);
  o.motion_frames = 4;
  EXPECT_THROW(long_duration_generate(model, sched, ref, randn({8, 1, 6}, rng), o), ContractError);
  o.motion_frames = 2;
  EXPECT_THROW(long_duration_generate(model, sched, randn({4, 4, 3}, rng), randn({8, 1, 6}, rng), o), ShapeError);
  o.zero_audio = true;
  EXPECT_EQ(long_duration_generate(model, sched, ref, Tensor{}, o).dim(0), 8u);
}

TEST(Training, RunWritesLogsAndResumesIdentically) {
  const auto dir = scratch_dir("run");
  const RunConfig cfg = toy_run(dir / "full");
  const TrainResult full = run_train(cfg);
  EXPECT_EQ(full.steps, 4u);
  EXPECT_TRUE(fs::exists(dir / "full" / "config.json"));
  EXPECT_TRUE(fs::exists(dir / "full" / "checkpoint_2.stdf"));
  EXPECT_TRUE(fs::exists(dir / "full" / "ema_last.stdf"));
  const std::string log = slurp(dir / "full" / "train_log.csv");
  EXPECT_EQ(log.rfind("step,l_simple,l_vlb,grad_norm,wall_time", 0), 0u);

  RunConfig half = cfg;
  half.output_dir = dir / "half";
  half.training.steps = 2;
  run_train(half);
  RunConfig rest = cfg;
  rest.output_dir = dir / "half";
  const TrainResult resumed = run_train(rest, dir / "half" / "checkpoint_last.stdf");
  EXPECT_EQ(resumed.steps, 4u);
  EXPECT_EQ(resumed.last.total, full.last.total);
  const Checkpoint a = load_checkpoint(full.checkpoint), b = load_checkpoint(resumed.checkpoint);
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    EXPECT_EQ(a.tensors[i].second.to_vector(), b.tensors[i].second.to_vector()) << a.tensors[i].first;
  }
  fs::remove_all(dir);
}

TEST(Training, SampleRejectsForeignCheckpoint) {
  const auto dir = scratch_dir("sample");
  RunConfig cfg = toy_run(dir);
  const TrainResult r = run_train(cfg);
  save_tensor(dir / "ref.stdt", Tensor::zeros({4, 4, 2}));
  save_tensor(dir / "audio.stdt", Tensor::zeros({4, 1, 6}));
  SampleRequest req;
  req.checkpoint = r.ema_checkpoint;
  req.reference = dir / "ref.stdt";
  req.audio = dir / "audio.stdt";
  req.seed = 1;
  req.output = dir / "out.stdt";
  const Tensor out = run_sample(cfg, req);
  EXPECT_EQ(out.shape(), (Shape{4, 4, 4, 2}));
  EXPECT_EQ(load_tensor(req.output).to_vector(), out.to_vector());
  RunConfig other = cfg;
  other.model.hidden = 32;
  other.model.heads = 4;
  EXPECT_THROW(run_sample(other, req), FingerprintError);
  fs::remove_all(dir);
}

TEST(Benchmark, CountsAndRows) {
  const auto rows = run_benchmark({1, 4}, {16}, 8, 1);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].frames, 4u);
  EXPECT_EQ(rows[1].joint_elements, count_attention_elements(4, 16, false));
  EXPECT_EQ(rows[1].factorized_elements, count_attention_elements(4, 16, true));
  EXPECT_GT(rows[1].joint_peak_bytes, 0u);
  std::ostringstream csv;
  write_bench_csv(csv, rows);
  const std::string text = csv.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}
