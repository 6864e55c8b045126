#include "stdit/fusion.hpp"

#include "stdit/ops.hpp"

namespace stdit {

std::string to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::none: return "none";
    case FusionKind::direct: return "direct";
    case FusionKind::siamese: return "siamese";
    case FusionKind::symbiotic: return "symbiotic";
  }
  return "?";
}

FusionKind parse_fusion_kind(std::string_view name) {
  if (name == "none") return FusionKind::none;
  if (name == "direct") return FusionKind::direct;
  if (name == "siamese") return FusionKind::siamese;
  if (name == "symbiotic") return FusionKind::symbiotic;
  throw ContractError("unknown fusion scheme '" + std::string(name) + "' (expected none, direct, siamese, symbiotic)");
}

Tensor symbiotic_concat(const Tensor& video, const Tensor& cond) {
  if (video.rank() != 4 || cond.rank() != 4) {
    throw ShapeError("symbiotic_concat: expected [B, F, P, d] and [B, F|1, Q, d], got " + to_string(video.shape()) +
                     " and " + to_string(cond.shape()));
  }
  const std::size_t B = video.dim(0), F = video.dim(1), d = video.dim(3);
  if (cond.dim(0) != B || cond.dim(3) != d || (cond.dim(1) != F && cond.dim(1) != 1)) {
    throw ShapeError("symbiotic_concat: condition " + to_string(cond.shape()) + " incompatible with video " +
                     to_string(video.shape()));
  }
  const Tensor rep = cond.dim(1) == F ? cond : broadcast_to(cond, {B, F, cond.dim(2), d});
  return concat({video, rep}, 2);
}

Tensor symbiotic_prepare(const Tensor& portrait, const Tensor& video) {
  if (portrait.rank() != 2 || video.rank() != 3) {
    throw ShapeError("symbiotic_prepare: expected [P, d] and [F, P, d], got " + to_string(portrait.shape()) + " and " +
                     to_string(video.shape()));
  }
  if (portrait.dim(0) != video.dim(1) || portrait.dim(1) != video.dim(2)) {
    throw ShapeError("symbiotic_prepare: portrait " + to_string(portrait.shape()) + " does not match video " +
                     to_string(video.shape()));
  }
  const Shape& s = video.shape();
  const Tensor out = symbiotic_concat(reshape(video, {1, s[0], s[1], s[2]}), reshape(portrait, {1, 1, s[1], s[2]}));
  return reshape(out, {s[0], 2 * s[1], s[2]});
}

Tensor symbiotic_extract(const Tensor& tokens) {
  if (tokens.rank() < 2) throw ShapeError("symbiotic_extract: rank too small");
  const std::size_t positions = tokens.dim(-2);
  if (positions % 2 != 0) {
    throw ShapeError("symbiotic_extract: odd position count " + std::to_string(positions));
  }
  return take_positions(tokens, positions / 2);
}

Tensor take_positions(const Tensor& tokens, std::size_t count) {
  const int axis = static_cast<int>(tokens.rank()) - 2;
  if (count > tokens.dim(axis)) throw ShapeError("take_positions: not enough positions");
  if (count == tokens.dim(axis)) return tokens;
  return slice(tokens, axis, 0, count);
}

Tensor direct_fuse(const AttentionWeights& w, const Tensor& tokens, const Tensor& cond, AttentionProbe* probe) {
  if (tokens.rank() == 3) {
    const Shape& s = tokens.shape();
    const Tensor c = cond.rank() == 3 ? reshape(cond, {1, cond.dim(0), cond.dim(1), cond.dim(2)}) : cond;
    return reshape(direct_fuse(w, reshape(tokens, {1, s[0], s[1], s[2]}), c, probe), s);
  }
  if (tokens.rank() != 4 || cond.rank() != 4) {
    throw ShapeError("direct_fuse: expected [B, F, P, d] tokens and [B, F, A, d] condition, got " +
                     to_string(tokens.shape()) + " and " + to_string(cond.shape()));
  }
  const std::size_t B = tokens.dim(0), F = tokens.dim(1), P = tokens.dim(2), d = tokens.dim(3);
  const std::size_t A = cond.dim(2);
  if (cond.dim(0) != B || cond.dim(3) != d) {
    throw ShapeError("direct_fuse: condition " + to_string(cond.shape()) + " incompatible with " +
                     to_string(tokens.shape()));
  }
  Tensor attn;
  if (cond.dim(1) == F) {
    attn = attend(w, reshape(tokens, {B * F, P, d}), reshape(cond, {B * F, A, d}), probe);
  } else if (cond.dim(1) == 1) {
    // One shared condition per sample: every frame's queries see the same keys.
    attn = attend(w, reshape(tokens, {B, F * P, d}), reshape(cond, {B, A, d}), probe);
  } else {
    throw ShapeError("direct_fuse: condition has " + std::to_string(cond.dim(1)) + " frames, tokens have " +
                     std::to_string(F));
  }
  return add(tokens, reshape(attn, tokens.shape()));
}

SiameseTower SiameseTower::create(ParamFactory& f, const std::string& name, Kind kind, std::size_t depth,
                                  std::size_t dim, std::size_t heads, double mlp_ratio) {
  SiameseTower t;
  t.kind = kind;
  const auto hidden = static_cast<std::size_t>(static_cast<double>(dim) * mlp_ratio);
  for (std::size_t i = 0; i < depth; ++i) {
    const std::string p = name + ".blocks." + std::to_string(i);
    Layer layer;
    if (kind == Kind::portrait) layer.attn = AttentionWeights::create(f, p + ".attn", dim, heads);
    layer.mlp = Mlp::create(f, p + ".mlp", dim, hidden, dim);
    t.layers.push_back(std::move(layer));
    t.injections.push_back(Linear::create(f, p + ".inject", dim, dim, Init::zeros, false));
  }
  return t;
}

std::vector<Tensor> SiameseTower::forward(const Tensor& cond) const {
  std::vector<Tensor> feats;
  feats.reserve(layers.size());
  Tensor x = cond;
  if (kind == Kind::portrait) {
    if (x.rank() != 3) throw ShapeError("siamese portrait tower: expected [B, P, d], got " + to_string(x.shape()));
    for (const auto& layer : layers) {
      x = add(x, attend(layer.attn, layer_norm(x), layer_norm(x)));
      x = add(x, layer.mlp(layer_norm(x)));
      feats.push_back(reshape(x, {x.dim(0), 1, x.dim(1), x.dim(2)}));
    }
  } else {
    if (x.rank() != 4) throw ShapeError("siamese audio tower: expected [B, F, A, d], got " + to_string(x.shape()));
    for (const auto& layer : layers) {
      x = add(x, layer.mlp(layer_norm(x)));
      feats.push_back(mean(x, 2, true));
    }
  }
  return feats;
}

Tensor siamese_inject(const Tensor& x, const Tensor& feat, const Linear& proj) {
  if (x.rank() != 4 || feat.rank() != 4) {
    throw ShapeError("siamese_inject: expected rank-4 tensors, got " + to_string(x.shape()) + " and " +
                     to_string(feat.shape()));
  }
  Tensor y = proj(feat);
  const std::size_t positions = x.dim(2), q = y.dim(2);
  if (q != 1 && q < positions) {
    Shape pad = y.shape();
    pad[2] = positions - q;
    y = concat({y, Tensor::zeros(pad, y.dtype())}, 2);
  }
  Shape target = x.shape();
  if (broadcast_shapes(target, y.shape()) != target) {
    throw ShapeError("siamese_inject: feature " + to_string(feat.shape()) + " does not broadcast to " +
                     to_string(target));
  }
  return add(x, y);
}

}  // namespace stdit
