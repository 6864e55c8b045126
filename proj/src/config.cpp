#include "stdit/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "stdit/checkpoint.hpp"

namespace stdit {

using nlohmann::json;

namespace {

// Reads the keys of one JSON object and rejects any it was not asked about.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  void read(const char* key, std::size_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(where(key) + " must be a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void read(const char* key, std::uint64_t& out, int) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(where(key) + " must be a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void read(const char* key, int& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) throw ConfigError(where(key) + " must be an integer");
      out = v->get<int>();
    }
  }
  void read(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + " must be a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, std::optional<double>& out) {
    if (const json* v = take(key)) {
      if (v->is_null()) {
        out.reset();
      } else if (v->is_number()) {
        out = v->get<double>();
      } else {
        throw ConfigError(where(key) + " must be a number or null");
      }
    }
  }
  void read(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + " must be true or false");
      out = v->get<bool>();
    }
  }
  void read(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  void read(const char* key, std::filesystem::path& out) {
    std::string s = out.string();
    read(key, s);
    out = s;
  }
  template <class Parse>
  void read_enum(const char* key, Parse parse) {
    if (const json* v = take(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + " must be a string");
      try {
        parse(v->get<std::string>());
      } catch (const ContractError& e) {
        throw ConfigError(where(key) + ": " + e.what());
      }
    }
  }
  const json* sub(const char* key) { return take(key); }
  std::string where(const char* key = nullptr) const {
    std::string p = path_.empty() ? "config" : path_;
    return key ? p + "." + key : p;
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown key " + where(k.c_str()));
    }
  }

 private:
  const json* take(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void parse_model(Section& s, ModelConfig& m) {
  s.read("layers", m.layers);
  s.read("hidden", m.hidden);
  s.read("heads", m.heads);
  s.read("patch", m.patch);
  s.read("frames", m.frames);
  s.read("latent_h", m.latent_h);
  s.read("latent_w", m.latent_w);
  s.read("channels", m.channels);
  s.read_enum("portrait_fusion", [&](const std::string& v) { m.portrait_fusion = parse_fusion_kind(v); });
  s.read_enum("audio_fusion", [&](const std::string& v) { m.audio_fusion = parse_fusion_kind(v); });
  s.read("audio_tokens", m.audio_tokens);
  s.read("audio_layers", m.audio_layers);
  s.read("audio_feature_dim", m.audio_feature_dim);
  s.read("audio_hidden", m.audio_hidden);
  s.read("freq_dim", m.freq_dim);
  s.read("mlp_ratio", m.mlp_ratio);
  s.read("learned_pos", m.learned_pos);
  s.read("max_motion_frames", m.max_motion_frames);
  s.read("init_std", m.init_std);
  s.read_enum("dtype", [&](const std::string& v) {
    if (v == "f32") {
      m.dtype = DType::f32;
    } else if (v == "f64") {
      m.dtype = DType::f64;
    } else {
      throw ContractError("expected f32 or f64, got '" + v + "'");
    }
  });
  s.finish();
}

template <class Fn>
void section(Section& parent, const char* key, Fn fn) {
  if (const json* j = parent.sub(key)) {
    Section s(*j, parent.where(key));
    fn(s);
    s.finish();
  }
}

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (model.timesteps != schedule.timesteps) {
    throw ConfigError("model.timesteps must equal schedule.timesteps");
  }
  if (schedule.timesteps < 2) throw ConfigError("schedule.timesteps must be at least 2");
  if (!(schedule.beta_start > 0 && schedule.beta_start <= schedule.beta_end && schedule.beta_end < 1)) {
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
  }
  if (!(optimizer.adamw.lr > 0)) throw ConfigError("optimizer.lr must be positive");
  if (!(optimizer.clip_norm > 0)) throw ConfigError("optimizer.clip_norm must be positive");
  if (!(optimizer.ema_decay >= 0 && optimizer.ema_decay < 1)) throw ConfigError("optimizer.ema_decay must be in [0, 1)");
  if (training.batch_size == 0) throw ConfigError("training.batch_size must be at least 1");
  if (training.clip_interval == 0) throw ConfigError("training.clip_interval must be at least 1");
  if (training.threads < 1) throw ConfigError("training.threads must be at least 1");
  if (training.zero_audio_prob < 0 || training.zero_audio_prob > 1) {
    throw ConfigError("training.zero_audio_prob must be in [0, 1]");
  }
  if (training.flip_prob < 0 || training.flip_prob > 1) throw ConfigError("training.flip_prob must be in [0, 1]");
  if (data.kind != "synthetic" && data.kind != "directory") {
    throw ConfigError("data.kind must be \"synthetic\" or \"directory\"");
  }
  if (data.kind == "directory" && data.path.empty()) throw ConfigError("data.path is required for directory data");
  if (!(data.fps > 0)) throw ConfigError("data.fps must be positive");
  if (sampling.steps < 2 || sampling.steps > schedule.timesteps) {
    throw ConfigError("sampling.steps must be in [2, schedule.timesteps]");
  }
  if (sampling.motion_frames >= model.frames) throw ConfigError("sampling.motion_frames must be smaller than model.frames");
  if (sampling.motion_frames > model.max_motion_frames) {
    throw ConfigError("sampling.motion_frames exceeds model.max_motion_frames");
  }
  if (codec == CodecKind::space_to_depth && model.channels != 192) {
    throw ConfigError("codec space_to_depth produces 192 latent channels; model.channels is " +
                      std::to_string(model.channels));
  }
}

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Section root(j, "");
  section(root, "model", [&](Section& s) { parse_model(s, c.model); });
  section(root, "schedule", [&](Section& s) {
    s.read("timesteps", c.schedule.timesteps);
    s.read("beta_start", c.schedule.beta_start);
    s.read("beta_end", c.schedule.beta_end);
  });
  c.model.timesteps = c.schedule.timesteps;
  section(root, "optimizer", [&](Section& s) {
    s.read("lr", c.optimizer.adamw.lr);
    s.read("beta1", c.optimizer.adamw.beta1);
    s.read("beta2", c.optimizer.adamw.beta2);
    s.read("eps", c.optimizer.adamw.eps);
    s.read("weight_decay", c.optimizer.adamw.weight_decay);
    s.read("clip_norm", c.optimizer.clip_norm);
    s.read("ema_decay", c.optimizer.ema_decay);
  });
  section(root, "training", [&](Section& s) {
    s.read("steps", c.training.steps);
    s.read("batch_size", c.training.batch_size);
    s.read("vlb_weight", c.training.vlb_weight);
    s.read("zero_audio_prob", c.training.zero_audio_prob);
    s.read("flip_prob", c.training.flip_prob);
    s.read("clip_interval", c.training.clip_interval);
    s.read("log_every", c.training.log_every);
    s.read("checkpoint_every", c.training.checkpoint_every);
    s.read("threads", c.training.threads);
  });
  section(root, "data", [&](Section& s) {
    s.read("kind", c.data.kind);
    s.read("path", c.data.path);
    s.read("synthetic_videos", c.data.synthetic_videos);
    s.read("synthetic_frames", c.data.synthetic_frames);
    s.read("fps", c.data.fps);
    s.read("audio_window", c.data.audio_window);
  });
  section(root, "sampling", [&](Section& s) {
    s.read("steps", c.sampling.steps);
    s.read("motion_frames", c.sampling.motion_frames);
    s.read("clip_x0", c.sampling.clip_x0);
    s.read("use_ema", c.sampling.use_ema);
  });
  root.read_enum("codec", [&](const std::string& v) { c.codec = parse_codec_kind(v); });
  root.read("seed", c.seed, 0);
  root.read("output_dir", c.output_dir);
  root.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

namespace {

json model_json(const ModelConfig& m) {
  return json{{"layers", m.layers},
              {"hidden", m.hidden},
              {"heads", m.heads},
              {"patch", m.patch},
              {"frames", m.frames},
              {"latent_h", m.latent_h},
              {"latent_w", m.latent_w},
              {"channels", m.channels},
              {"portrait_fusion", to_string(m.portrait_fusion)},
              {"audio_fusion", to_string(m.audio_fusion)},
              {"audio_tokens", m.audio_tokens},
              {"audio_layers", m.audio_layers},
              {"audio_feature_dim", m.audio_feature_dim},
              {"audio_hidden", m.audio_hidden},
              {"freq_dim", m.freq_dim},
              {"mlp_ratio", m.mlp_ratio},
              {"learned_pos", m.learned_pos},
              {"max_motion_frames", m.max_motion_frames},
              {"init_std", m.init_std},
              {"dtype", to_string(m.dtype)}};
}

json schedule_json(const ScheduleParams& s) {
  return json{{"timesteps", s.timesteps}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

}  // namespace

std::string to_json(const RunConfig& c) {
  json j;
  j["model"] = model_json(c.model);
  j["schedule"] = schedule_json(c.schedule);
  j["optimizer"] = json{{"lr", c.optimizer.adamw.lr},
                        {"beta1", c.optimizer.adamw.beta1},
                        {"beta2", c.optimizer.adamw.beta2},
                        {"eps", c.optimizer.adamw.eps},
                        {"weight_decay", c.optimizer.adamw.weight_decay},
                        {"clip_norm", c.optimizer.clip_norm},
                        {"ema_decay", c.optimizer.ema_decay}};
  j["training"] = json{{"steps", c.training.steps},
                       {"batch_size", c.training.batch_size},
                       {"vlb_weight", c.training.vlb_weight},
                       {"zero_audio_prob", c.training.zero_audio_prob},
                       {"flip_prob", c.training.flip_prob},
                       {"clip_interval", c.training.clip_interval},
                       {"log_every", c.training.log_every},
                       {"checkpoint_every", c.training.checkpoint_every},
                       {"threads", c.training.threads}};
  j["data"] = json{{"kind", c.data.kind},
                   {"path", c.data.path.string()},
                   {"synthetic_videos", c.data.synthetic_videos},
                   {"synthetic_frames", c.data.synthetic_frames},
                   {"fps", c.data.fps},
                   {"audio_window", c.data.audio_window}};
  j["sampling"] = json{{"steps", c.sampling.steps},
                       {"motion_frames", c.sampling.motion_frames},
                       {"clip_x0", c.sampling.clip_x0 ? json(*c.sampling.clip_x0) : json(nullptr)},
                       {"use_ema", c.sampling.use_ema}};
  j["codec"] = to_string(c.codec);
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir.string();
  return j.dump(2);
}

std::uint64_t config_fingerprint(const ModelConfig& model, const ScheduleParams& schedule) {
  const json j{{"model", model_json(model)}, {"schedule", schedule_json(schedule)}};
  return fnv1a64(j.dump());
}

std::uint64_t config_fingerprint(const RunConfig& c) { return config_fingerprint(c.model, c.schedule); }

}  // namespace stdit
