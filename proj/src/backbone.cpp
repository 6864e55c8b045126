#include "stdit/backbone.hpp"

#include <cmath>

#include "stdit/ops.hpp"

namespace stdit {

namespace {

Tensor as_dtype(const Tensor& x, DType dtype) { return !x.defined() || x.dtype() == dtype ? x : cast(x, dtype); }

// [B, k*d] -> k tensors of shape [B, 1, 1, d].
std::vector<Tensor> split_modulation(const Tensor& mod, std::size_t parts) {
  const std::size_t B = mod.dim(0), d = mod.dim(1) / parts;
  const Tensor m = reshape(mod, {B, 1, 1, parts * d});
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < parts; ++i) out.push_back(slice(m, 3, i * d, (i + 1) * d));
  return out;
}

}  // namespace

std::size_t ModelConfig::block_positions() const {
  std::size_t n = positions();
  if (portrait_fusion == FusionKind::symbiotic) n += positions();
  if (audio_fusion == FusionKind::symbiotic) n += audio_tokens;
  return n;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ContractError("model config: " + msg); };
  if (layers == 0) fail("layers must be >= 1");
  if (hidden == 0 || heads == 0 || hidden % heads != 0) fail("hidden must be a positive multiple of heads");
  if (hidden % 2 != 0) fail("hidden must be even for sinusoidal embeddings");
  if (patch == 0 || latent_h % patch != 0 || latent_w % patch != 0) fail("latent_h and latent_w must be divisible by patch");
  if (frames == 0 || channels == 0) fail("frames and channels must be >= 1");
  if (freq_dim == 0 || freq_dim % 2 != 0) fail("freq_dim must be even");
  if (audio_fusion != FusionKind::none && (audio_tokens == 0 || audio_layers == 0 || audio_feature_dim == 0)) {
    fail("audio_tokens, audio_layers and audio_feature_dim must be >= 1 when audio fusion is on");
  }
  if (mlp_ratio <= 0.0) fail("mlp_ratio must be positive");
  if (timesteps < 2) fail("timesteps must be >= 2");
  if (!(init_std > 0.0)) fail("init_std must be positive");
}

Tensor patchify(const Tensor& latent, std::size_t p) {
  if (latent.rank() < 4) throw ShapeError("patchify: expected [..., F, H, W, C], got " + to_string(latent.shape()));
  const Shape& s = latent.shape();
  const std::size_t r = s.size();
  const std::size_t H = s[r - 3], W = s[r - 2], C = s[r - 1];
  if (p == 0 || H % p != 0 || W % p != 0) {
    throw ShapeError("patchify: extents " + std::to_string(H) + "x" + std::to_string(W) + " not divisible by patch " +
                     std::to_string(p));
  }
  std::size_t lead = 1;
  for (std::size_t i = 0; i + 3 < r; ++i) lead *= s[i];
  Shape out(s.begin(), s.end() - 3);
  out.push_back((H / p) * (W / p));
  out.push_back(p * p * C);
  if (p == 1) return reshape(latent, out);
  const Tensor x = reshape(latent, {lead, H / p, p, W / p, p, C});
  return reshape(permute(x, {0, 1, 3, 2, 4, 5}), out);
}

Tensor unpatchify(const Tensor& tokens, std::size_t p, std::size_t h, std::size_t w) {
  if (tokens.rank() < 3) throw ShapeError("unpatchify: expected [..., P, p*p*C], got " + to_string(tokens.shape()));
  const Shape& s = tokens.shape();
  const std::size_t r = s.size();
  if (p == 0 || h % p != 0 || w % p != 0 || s[r - 2] != (h / p) * (w / p) || s[r - 1] % (p * p) != 0) {
    throw ShapeError("unpatchify: tokens " + to_string(s) + " do not tile " + std::to_string(h) + "x" +
                     std::to_string(w) + " with patch " + std::to_string(p));
  }
  const std::size_t C = s[r - 1] / (p * p);
  std::size_t lead = 1;
  for (std::size_t i = 0; i + 2 < r; ++i) lead *= s[i];
  Shape out(s.begin(), s.end() - 2);
  out.insert(out.end(), {h, w, C});
  if (p == 1) return reshape(tokens, out);
  const Tensor x = reshape(tokens, {lead, h / p, w / p, p, p, C});
  return reshape(permute(x, {0, 1, 3, 2, 4, 5}), out);
}

Tensor sinusoidal_table(std::size_t count, std::size_t dim, double offset, DType dtype) {
  if (dim % 2 != 0) throw ContractError("sinusoidal_table: dim must be even");
  std::vector<double> v(count * dim);
  for (std::size_t n = 0; n < count; ++n) {
    const double pos = offset + static_cast<double>(n);
    for (std::size_t i = 0; i < dim / 2; ++i) {
      const double angle = pos * std::exp(-std::log(10000.0) * static_cast<double>(2 * i) / static_cast<double>(dim));
      v[n * dim + 2 * i] = std::sin(angle);
      v[n * dim + 2 * i + 1] = std::cos(angle);
    }
  }
  return Tensor::from_doubles({count, dim}, v, dtype);
}

Tensor add_positional(const Tensor& tokens, double frame_offset) {
  if (tokens.rank() < 3) throw ShapeError("add_positional: expected [..., F, P, d], got " + to_string(tokens.shape()));
  const std::size_t F = tokens.dim(-3), P = tokens.dim(-2), d = tokens.dim(-1);
  const Tensor spatial = sinusoidal_table(P, d, 0.0, tokens.dtype());
  const Tensor temporal = reshape(sinusoidal_table(F, d, frame_offset, tokens.dtype()), {F, 1, d});
  return add(add(tokens, spatial), temporal);
}

Tensor timestep_frequencies(const std::vector<double>& t, std::size_t dim, DType dtype) {
  if (dim % 2 != 0) throw ContractError("timestep_frequencies: dim must be even");
  const std::size_t half = dim / 2;
  std::vector<double> v(t.size() * dim);
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t i = 0; i < half; ++i) {
      const double arg = t[b] * std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      v[b * dim + i] = std::sin(arg);
      v[b * dim + half + i] = std::cos(arg);
    }
  }
  return Tensor::from_doubles({t.size(), dim}, v, dtype);
}

std::uint64_t count_attention_elements(std::uint64_t frames, std::uint64_t positions, bool factorized) {
  if (frames == 0 || positions == 0) throw ContractError("count_attention_elements: F and P must be >= 1");
  if (!factorized) return frames * frames * positions * positions;
  return frames * positions * positions + positions * frames * frames;
}

TimestepEmbedder TimestepEmbedder::create(ParamFactory& f, const std::string& name, std::size_t freq_dim,
                                          std::size_t dim, std::size_t max_t) {
  return {Linear::create(f, name + ".fc1", freq_dim, dim, Init::trunc_normal),
          Linear::create(f, name + ".fc2", dim, dim, Init::trunc_normal), freq_dim, max_t};
}

Tensor TimestepEmbedder::operator()(const std::vector<std::size_t>& t) const {
  std::vector<double> tv;
  for (std::size_t s : t) {
    if (s < 1 || s > max_t) {
      throw ContractError("timestep " + std::to_string(s) + " outside [1, " + std::to_string(max_t) + "]");
    }
    tv.push_back(static_cast<double>(s));
  }
  return fc2(silu(fc1(timestep_frequencies(tv, freq_dim, fc1.weight.dtype()))));
}

Tensor spatial_attend(const AttentionWeights& w, const Tensor& x, AttentionProbe* probe) {
  if (x.rank() != 4) throw ShapeError("spatial attention: expected [B, F, P, d], got " + to_string(x.shape()));
  const Shape& s = x.shape();
  const Tensor rows = reshape(x, {s[0] * s[1], s[2], s[3]});
  return reshape(attend(w, rows, rows, probe), s);
}

Tensor temporal_attend(const AttentionWeights& w, const Tensor& x, const Tensor& motion, AttentionProbe* probe) {
  if (x.rank() != 4) throw ShapeError("temporal attention: expected [B, F, P, d], got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), F = x.dim(1), P = x.dim(2), d = x.dim(3);
  const Tensor q = reshape(permute(x, {0, 2, 1, 3}), {B * P, F, d});
  Tensor kv = q;
  if (motion.defined() && motion.dim(1) > 0) {
    if (motion.rank() != 4 || motion.dim(0) != B || motion.dim(2) != P || motion.dim(3) != d) {
      throw ShapeError("temporal attention: motion frames " + to_string(motion.shape()) + " incompatible with " +
                       to_string(x.shape()));
    }
    const std::size_t Fm = motion.dim(1);
    kv = reshape(permute(concat({motion, x}, 1), {0, 2, 1, 3}), {B * P, Fm + F, d});
  }
  const Tensor out = reshape(attend(w, q, kv, probe), {B, P, F, d});
  return permute(out, {0, 2, 1, 3});
}

Tensor joint_attend(const AttentionWeights& w, const Tensor& x, AttentionProbe* probe) {
  if (x.rank() != 4) throw ShapeError("joint attention: expected [B, F, P, d], got " + to_string(x.shape()));
  const Shape& s = x.shape();
  const Tensor seq = reshape(x, {s[0], s[1] * s[2], s[3]});
  return reshape(attend(w, seq, seq, probe), s);
}

Tensor spatial_attention(const AttentionWeights& w, const Tensor& x, AttentionProbe* probe) {
  return add(x, spatial_attend(w, x, probe));
}

Tensor temporal_attention(const AttentionWeights& w, const Tensor& x, const Tensor& motion, AttentionProbe* probe) {
  return add(x, temporal_attend(w, x, motion, probe));
}

Block Block::create(ParamFactory& f, const std::string& name, const ModelConfig& cfg) {
  const std::size_t d = cfg.hidden;
  Block b;
  b.ada = Linear::create(f, name + ".ada", d, 6 * d, Init::zeros);
  b.temporal = AttentionWeights::create(f, name + ".temporal", d, cfg.heads);
  b.bridge = Linear::create(f, name + ".bridge", d, d, Init::trunc_normal);
  b.spatial = AttentionWeights::create(f, name + ".spatial", d, cfg.heads);
  b.mlp = Mlp::create(f, name + ".mlp", d, static_cast<std::size_t>(static_cast<double>(d) * cfg.mlp_ratio), d);
  if (cfg.portrait_fusion == FusionKind::direct) {
    b.portrait_cross = AttentionWeights::create_cross(f, name + ".portrait_cross", d, cfg.heads);
    b.has_portrait_cross = true;
  }
  if (cfg.audio_fusion == FusionKind::direct) {
    b.audio_cross = AttentionWeights::create_cross(f, name + ".audio_cross", d, cfg.heads);
    b.has_audio_cross = true;
  }
  return b;
}

Tensor Block::forward(const Tensor& x_in, const BlockContext& ctx) const {
  const auto m = split_modulation(ada(silu(ctx.c)), 6);
  const Tensor &shift_a = m[0], &scale_a = m[1], &gate_a = m[2];
  const Tensor &shift_m = m[3], &scale_m = m[4], &gate_m = m[5];

  Tensor x = x_in;
  const Tensor h = modulate(layer_norm(x), shift_a, scale_a);
  Tensor hm;
  if (ctx.motion.defined()) hm = modulate(layer_norm(ctx.motion), shift_a, scale_a);
  x = add(x, mul(gate_a, bridge(temporal_attend(temporal, h, hm, ctx.temporal_probe))));
  x = add(x, mul(gate_a, spatial_attend(spatial, modulate(layer_norm(x), shift_a, scale_a), ctx.spatial_probe)));

  if (has_portrait_cross) x = direct_fuse(portrait_cross, x, ctx.portrait_tokens);
  if (has_portrait_inject) x = siamese_inject(x, ctx.portrait_feat, portrait_inject);
  if (has_audio_cross && ctx.audio_tokens.defined()) x = direct_fuse(audio_cross, x, ctx.audio_tokens);
  if (has_audio_inject && ctx.audio_feat.defined()) x = siamese_inject(x, ctx.audio_feat, audio_inject);

  return add(x, mul(gate_m, mlp(modulate(layer_norm(x), shift_m, scale_m))));
}

FinalHead FinalHead::create(ParamFactory& f, const std::string& name, std::size_t dim, std::size_t out) {
  return {Linear::create(f, name + ".ada", dim, 2 * dim, Init::zeros),
          Linear::create(f, name + ".proj", dim, out, Init::zeros)};
}

Tensor FinalHead::operator()(const Tensor& x, const Tensor& c) const {
  const auto m = split_modulation(ada(silu(c)), 2);
  return proj(modulate(layer_norm(x), m[0], m[1]));
}

DenoiserModel::DenoiserModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  ParamFactory f{params_, rng, cfg_.dtype, cfg_.init_std};
  const std::size_t d = cfg_.hidden;
  x_embed_ = Linear::create(f, "x_embed", cfg_.patch_dim(), d, Init::trunc_normal);
  t_embed_ = TimestepEmbedder::create(f, "t_embed", cfg_.freq_dim, d, cfg_.timesteps);
  if (cfg_.audio_fusion != FusionKind::none) {
    audio_proj_ = AudioProjection::create(f, "audio_proj", cfg_.audio_layers, cfg_.audio_feature_dim,
                                          cfg_.audio_hidden ? cfg_.audio_hidden : d, cfg_.audio_tokens, d);
  }
  if (cfg_.learned_pos) {
    pos_spatial_ = f.make("pos_spatial", {cfg_.positions(), d}, Init::trunc_normal);
    pos_temporal_ = f.make("pos_temporal", {cfg_.max_motion_frames + cfg_.frames, d}, Init::trunc_normal);
  }
  if (cfg_.portrait_fusion == FusionKind::symbiotic) portrait_segment_ = f.make("portrait_segment", {d}, Init::trunc_normal);
  if (cfg_.audio_fusion == FusionKind::symbiotic) audio_segment_ = f.make("audio_segment", {d}, Init::trunc_normal);
  if (cfg_.portrait_fusion == FusionKind::siamese) {
    portrait_tower_ = SiameseTower::create(f, "portrait_tower", SiameseTower::Kind::portrait, cfg_.layers, d,
                                           cfg_.heads, cfg_.mlp_ratio);
  }
  if (cfg_.audio_fusion == FusionKind::siamese) {
    audio_tower_ = SiameseTower::create(f, "audio_tower", SiameseTower::Kind::audio, cfg_.layers, d, cfg_.heads, 2.0);
  }
  for (std::size_t i = 0; i < cfg_.layers; ++i) {
    Block b = Block::create(f, "blocks." + std::to_string(i), cfg_);
    if (cfg_.portrait_fusion == FusionKind::siamese) {
      b.portrait_inject = portrait_tower_.injections[i];
      b.has_portrait_inject = true;
    }
    if (cfg_.audio_fusion == FusionKind::siamese) {
      b.audio_inject = audio_tower_.injections[i];
      b.has_audio_inject = true;
    }
    blocks_.push_back(std::move(b));
  }
  head_ = FinalHead::create(f, "head", d, 2 * cfg_.patch_dim());
}

Tensor DenoiserModel::embed_latents(const Tensor& latents, double frame_offset) const {
  const Tensor tok = x_embed_(patchify(latents, cfg_.patch));
  if (!cfg_.learned_pos) return add_positional(tok, frame_offset);
  const std::size_t Fx = tok.dim(1);
  const auto first = static_cast<std::size_t>(static_cast<double>(cfg_.max_motion_frames) + frame_offset);
  if (first + Fx > pos_temporal_.dim(0)) throw ContractError("learned temporal embedding table too short");
  const Tensor temporal = reshape(slice(pos_temporal_, 0, first, first + Fx), {Fx, 1, cfg_.hidden});
  return add(add(tok, pos_spatial_), temporal);
}

Tensor DenoiserModel::embed_portrait(const Tensor& portrait) const {
  const Shape& s = portrait.shape();
  if (portrait.rank() != 4 || s[1] != cfg_.latent_h || s[2] != cfg_.latent_w || s[3] != cfg_.channels) {
    throw ShapeError("portrait: expected [B, " + std::to_string(cfg_.latent_h) + ", " + std::to_string(cfg_.latent_w) +
                     ", " + std::to_string(cfg_.channels) + "], got " + to_string(s));
  }
  Tensor tok = x_embed_(patchify(reshape(portrait, {s[0], 1, s[1], s[2], s[3]}), cfg_.patch));
  const Tensor spatial = cfg_.learned_pos ? pos_spatial_ : sinusoidal_table(cfg_.positions(), cfg_.hidden, 0.0, cfg_.dtype);
  tok = add(tok, spatial);
  if (portrait_segment_.defined()) tok = add(tok, portrait_segment_);
  return tok;  // [B, 1, P, d]
}

Tensor DenoiserModel::audio_tokens(const Tensor& windowed) const {
  if (cfg_.audio_fusion == FusionKind::none) throw ContractError("audio_tokens: model has no audio path");
  return audio_proj_(as_dtype(windowed, cfg_.dtype));
}

ModelOutput DenoiserModel::forward(const Tensor& xt_in, const std::vector<std::size_t>& t, const Conditions& cond,
                                   const ForwardOptions& opts) const {
  const Tensor xt = as_dtype(xt_in, cfg_.dtype);
  const Shape expect{xt.rank() == 5 ? xt.dim(0) : 0, cfg_.frames, cfg_.latent_h, cfg_.latent_w, cfg_.channels};
  if (xt.rank() != 5 || xt.shape() != expect) {
    throw ShapeError("denoiser: expected x_t of shape [B, " + std::to_string(cfg_.frames) + ", " +
                     std::to_string(cfg_.latent_h) + ", " + std::to_string(cfg_.latent_w) + ", " +
                     std::to_string(cfg_.channels) + "], got " + to_string(xt_in.shape()));
  }
  const std::size_t B = xt.dim(0), F = cfg_.frames, P = cfg_.positions(), d = cfg_.hidden;
  if (t.size() != B) throw ContractError("denoiser: need one timestep per batch element");

  Tensor x = embed_latents(xt, 0.0);

  Tensor motion;
  if (cond.motion.defined() && cond.motion.dim(0) > 0 && cond.motion.rank() == 5 && cond.motion.dim(1) > 0) {
    const std::size_t Fm = cond.motion.dim(1);
    if (Fm > cfg_.max_motion_frames || Fm >= F) {
      throw ContractError("denoiser: " + std::to_string(Fm) + " motion frames exceed the limit of " +
                          std::to_string(std::min(cfg_.max_motion_frames, F - 1)));
    }
    const Shape ms{B, Fm, cfg_.latent_h, cfg_.latent_w, cfg_.channels};
    if (cond.motion.shape() != ms) throw ShapeError("denoiser: motion latents " + to_string(cond.motion.shape()));
    motion = embed_latents(as_dtype(cond.motion, cfg_.dtype), -static_cast<double>(Fm));
  } else if (cond.motion.defined() && cond.motion.rank() != 5) {
    throw ShapeError("denoiser: motion latents must be [B, Fm, H, W, C]");
  }

  Tensor portrait;
  if (cfg_.portrait_fusion != FusionKind::none) {
    if (!cond.portrait.defined()) throw ContractError("denoiser: portrait condition missing");
    if (cond.portrait.dim(0) != B) throw ShapeError("denoiser: portrait batch size differs from x_t");
    portrait = embed_portrait(as_dtype(cond.portrait, cfg_.dtype));
  }

  Tensor audio;
  if (cfg_.audio_fusion != FusionKind::none && opts.fuse_audio) {
    const Shape as{B, F, cfg_.audio_tokens, d};
    if (opts.zero_audio) {
      audio = Tensor::zeros(as, cfg_.dtype);
    } else if (cond.audio_tokens.defined()) {
      audio = as_dtype(cond.audio_tokens, cfg_.dtype);
    } else if (cond.audio.defined()) {
      audio = audio_tokens(cond.audio);
    } else {
      throw ContractError("denoiser: audio condition missing (pass features, tokens, or zero_audio)");
    }
    if (audio.shape() != as) throw ShapeError("denoiser: audio tokens " + to_string(audio.shape()) + ", expected " + to_string(as));
  }

  BlockContext ctx;
  if (cfg_.portrait_fusion == FusionKind::symbiotic) {
    x = symbiotic_concat(x, portrait);
    if (motion.defined()) motion = symbiotic_concat(motion, portrait);
  } else if (cfg_.portrait_fusion == FusionKind::direct) {
    ctx.portrait_tokens = portrait;
  }
  if (audio.defined() && cfg_.audio_fusion == FusionKind::symbiotic) {
    const Tensor temporal = reshape(sinusoidal_table(F, d, 0.0, cfg_.dtype), {F, 1, d});
    x = concat({x, add(add(audio, temporal), audio_segment_)}, 2);
    if (motion.defined()) {
      const Tensor pad = broadcast_to(reshape(audio_segment_, {1, 1, 1, d}), {B, motion.dim(1), cfg_.audio_tokens, d});
      motion = concat({motion, pad}, 2);
    }
  } else if (audio.defined() && cfg_.audio_fusion == FusionKind::direct) {
    ctx.audio_tokens = audio;
  }
  std::vector<Tensor> portrait_feats, audio_feats;
  if (cfg_.portrait_fusion == FusionKind::siamese) portrait_feats = portrait_tower_.forward(reshape(portrait, {B, P, d}));
  if (audio.defined() && cfg_.audio_fusion == FusionKind::siamese) audio_feats = audio_tower_.forward(audio);

  ctx.c = t_embed_(t);
  ctx.motion = motion;
  ctx.temporal_probe = opts.temporal_probe;
  ctx.spatial_probe = opts.spatial_probe;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (!portrait_feats.empty()) ctx.portrait_feat = portrait_feats[i];
    if (!audio_feats.empty()) ctx.audio_feat = audio_feats[i];
    x = blocks_[i].forward(x, ctx);
  }

  const Tensor out = unpatchify(head_(take_positions(x, P), ctx.c), cfg_.patch, cfg_.latent_h, cfg_.latent_w);
  const std::size_t C = cfg_.channels;
  return {slice(out, 4, 0, C), slice(out, 4, C, 2 * C)};
}

}  // namespace stdit
