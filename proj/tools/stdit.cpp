#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "stdit/codec.hpp"
#include "stdit/config.hpp"
#include "stdit/metrics.hpp"
#include "stdit/pipeline.hpp"

namespace fs = std::filesystem;
using namespace stdit;

namespace {

constexpr int kOk = 0;
constexpr int kUserError = 1;
constexpr int kInternalError = 2;

// A .stdt tensor, a PNG image, or a directory of frame_XXXX.png.
Tensor load_any(const fs::path& p) {
  if (fs::is_directory(p)) return read_png_frames(p);
  if (p.extension() == ".png") return read_png(p);
  return load_tensor(p);
}

int cmd_train(const std::string& config_path, const std::string& resume) {
  const RunConfig cfg = load_run_config(config_path);
  TrainHooks hooks;
  hooks.log = &std::cout;
  std::optional<fs::path> from;
  if (!resume.empty()) from = resume;
  const TrainResult r = run_train(cfg, from, hooks);
  std::cout << "trained " << r.steps << " steps in " << r.seconds << " s; final l_simple " << r.last.simple
            << "\ncheckpoint " << r.checkpoint.string() << "\nema " << r.ema_checkpoint.string() << '\n';
  return kOk;
}

int cmd_sample(const std::string& config_path, SampleRequest req) {
  const RunConfig cfg = load_run_config(config_path);
  if (req.output.empty()) req.output = cfg.output_dir / ("sample_seed" + std::to_string(req.seed) + ".stdt");
  const Tensor latents = run_sample(cfg, req);
  std::cout << "wrote " << req.output.string() << " " << to_string(latents.shape()) << '\n';
  return kOk;
}

int cmd_bench(const std::vector<std::size_t>& f, const std::vector<std::size_t>& p, std::size_t dim,
              std::size_t reps, std::size_t heads, const std::string& csv) {
  const auto rows = run_benchmark(f, p, dim, reps, heads);
  write_bench_table(std::cout, rows);
  if (!csv.empty()) {
    std::ofstream out(csv);
    if (!out) throw IoError("cannot write " + csv);
    write_bench_csv(out, rows);
  }
  return kOk;
}

int cmd_ssim(const std::string& a, const std::string& b) {
  const Tensor x = load_any(a), y = load_any(b);
  const double s = x.rank() == 4 ? video_ssim(x, y) : ssim(x, y);
  std::printf("%.6f\n", s);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatial-temporal diffusion transformer toolkit"};
  app.require_subcommand(1);

  std::string config, resume;
  auto* train = app.add_subcommand("train", "Train a model from a JSON config");
  train->add_option("--config", config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--resume", resume, "Training checkpoint to resume from")->check(CLI::ExistingFile);

  SampleRequest req;
  std::string ckpt, ref, audio, out;
  auto* sample = app.add_subcommand("sample", "Generate video latents from a checkpoint");
  sample->add_option("--config", config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  sample->add_option("--ckpt", ckpt, "Checkpoint or EMA weights file")->required()->check(CLI::ExistingFile);
  sample->add_option("--ref", ref, "Reference portrait (.png or .stdt latent)")->required()->check(CLI::ExistingFile);
  sample->add_option("--audio", audio, "Driving audio (.wav, .f32 or .stdt windows)");
  sample->add_option("--seed", req.seed, "Sampling seed")->required();
  sample->add_flag("--zero-audio", req.zero_audio, "Fill audio tokens with zeros");
  sample->add_option("--clips", req.clips, "Number of chained clips")->check(CLI::PositiveNumber);
  sample->add_option("--out", out, "Output tensor file (.stdt)");

  std::vector<std::size_t> f_list{1, 4, 8, 16}, p_list{64, 256};
  std::size_t dim = 64, reps = 5, heads = 1;
  std::string csv;
  auto* bench = app.add_subcommand("bench", "Joint versus factorized attention cost");
  bench->add_option("--f-list", f_list, "Frame counts")->delimiter(',');
  bench->add_option("--p-list", p_list, "Positions per frame")->delimiter(',');
  bench->add_option("--dim", dim, "Token width");
  bench->add_option("--reps", reps, "Timed repetitions (median reported)")->check(CLI::PositiveNumber);
  bench->add_option("--heads", heads, "Attention heads")->check(CLI::PositiveNumber);
  bench->add_option("--csv", csv, "Also write CSV here");

  std::string image_a, image_b;
  auto* eval = app.add_subcommand("eval-ssim", "SSIM between two images or videos");
  eval->add_option("a", image_a, "Tensor file, PNG, or PNG frame directory")->required();
  eval->add_option("b", image_b, "Tensor file, PNG, or PNG frame directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUserError;
  }

  try {
    if (*train) return cmd_train(config, resume);
    if (*sample) {
      req.checkpoint = ckpt;
      req.reference = ref;
      req.audio = audio;
      req.output = out;
      return cmd_sample(config, req);
    }
    if (*bench) return cmd_bench(f_list, p_list, dim, reps, heads, csv);
    if (*eval) return cmd_ssim(image_a, image_b);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUserError;
  } catch (const FingerprintError& e) {
    std::cerr << "checkpoint mismatch: " << e.what() << '\n';
    return kUserError;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kUserError;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kUserError;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUserError;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kInternalError;
  }
  return kInternalError;
}
