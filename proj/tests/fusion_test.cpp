#include <gtest/gtest.h>

#include <cmath>

#include "stdit/backbone.hpp"
#include "stdit/fusion.hpp"
#include "stdit/ops.hpp"

using namespace stdit;

namespace {

void expect_bitwise_equal(const Tensor& a, const Tensor& b) {
  ASSERT_EQ(a.shape(), b.shape());
  const auto x = a.to_vector(), y = b.to_vector();
  for (std::size_t i = 0; i < x.size(); ++i) ASSERT_EQ(x[i], y[i]) << "index " << i;
}

ModelConfig tiny(FusionKind portrait, FusionKind audio) {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.heads = 2;
  c.frames = 2;
  c.latent_h = 4;
  c.latent_w = 4;
  c.channels = 2;
  c.audio_tokens = 3;
  c.audio_feature_dim = 6;
  c.freq_dim = 8;
  c.portrait_fusion = portrait;
  c.audio_fusion = audio;
  return c;
}

const FusionKind kSchemes[] = {FusionKind::direct, FusionKind::siamese, FusionKind::symbiotic};

}  // namespace

TEST(FusionKind, NamesRoundTrip) {
  for (auto k : {FusionKind::none, FusionKind::direct, FusionKind::siamese, FusionKind::symbiotic}) {
    EXPECT_EQ(parse_fusion_kind(to_string(k)), k);
  }
  EXPECT_THROW(parse_fusion_kind("cross"), ContractError);
}

TEST(Symbiotic, PrepareLayoutAndShape) {
  Rng rng(1);
  const Tensor portrait = randn({6, 5}, rng);
  const Tensor video = randn({3, 6, 5}, rng);
  const Tensor out = symbiotic_prepare(portrait, video);
  ASSERT_EQ(out.shape(), (Shape{3, 12, 5}));
  for (std::size_t f = 0; f < 3; ++f) {
    for (std::size_t p = 0; p < 6; ++p) {
      for (std::size_t c = 0; c < 5; ++c) {
        EXPECT_EQ(out.at({f, p, c}), video.at({f, p, c}));
        EXPECT_EQ(out.at({f, 6 + p, c}), portrait.at({p, c}));
      }
    }
  }
}

TEST(Symbiotic, ExtractInvertsPrepare) {
  Rng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const auto F = static_cast<std::size_t>(rng.uniform_int(1, 8));
    const auto P = static_cast<std::size_t>(rng.uniform_int(1, 32));
    const auto d = static_cast<std::size_t>(rng.uniform_int(1, 16));
    const Tensor portrait = randn({P, d}, rng);
    const Tensor video = randn({F, P, d}, rng);
    const Tensor joined = symbiotic_prepare(portrait, video);
    EXPECT_EQ(joined.shape(), (Shape{F, 2 * P, d}));
    expect_bitwise_equal(symbiotic_extract(joined), video);
  }
}

TEST(Symbiotic, ExtractAcceptsBatchAxis) {
  Rng rng(3);
  const Tensor video = randn({2, 3, 4, 5}, rng);
  const Tensor cond = randn({2, 1, 4, 5}, rng);
  const Tensor joined = symbiotic_concat(video, cond);
  EXPECT_EQ(joined.shape(), (Shape{2, 3, 8, 5}));
  expect_bitwise_equal(symbiotic_extract(joined), video);
}

TEST(Symbiotic, RejectsMismatchedShapes) {
  EXPECT_THROW(symbiotic_prepare(Tensor::zeros({4, 5}), Tensor::zeros({2, 3, 5})), ShapeError);
  EXPECT_THROW(symbiotic_prepare(Tensor::zeros({3, 4}), Tensor::zeros({2, 3, 5})), ShapeError);
  EXPECT_THROW(symbiotic_concat(Tensor::zeros({1, 3, 4, 5}), Tensor::zeros({1, 2, 4, 5})), ShapeError);
  EXPECT_THROW(symbiotic_extract(Tensor::zeros({2, 3, 5})), ShapeError);
}

TEST(DirectFusion, ZeroConditionIsBitwiseIdentity) {
  ParameterSet ps;
  Rng rng(4);
  ParamFactory pf{ps, rng, DType::f32};
  const auto w = AttentionWeights::create_cross(pf, "cross", 8, 2);
  ps.randomize(rng, 0.5);
  EXPECT_FALSE(w.v.bias.defined());
  EXPECT_FALSE(w.o.bias.defined());
  const Tensor x = randn({2, 3, 5, 8}, rng);
  expect_bitwise_equal(direct_fuse(w, x, Tensor::zeros({2, 3, 4, 8})), x);
  expect_bitwise_equal(direct_fuse(w, x, Tensor::zeros({2, 1, 4, 8})), x);
}

TEST(DirectFusion, ZeroInitOutputIsIdentityForAnyCondition) {
  ParameterSet ps;
  Rng rng(5);
  ParamFactory pf{ps, rng, DType::f32};
  const auto w = AttentionWeights::create_cross(pf, "cross", 8, 2);
  const Tensor x = randn({3, 5, 8}, rng);
  expect_bitwise_equal(direct_fuse(w, x, randn({3, 4, 8}, rng)), x);
}

TEST(DirectFusion, PerFrameAndSharedConditionProbeShapes) {
  ParameterSet ps;
  Rng rng(6);
  ParamFactory pf{ps, rng, DType::f32};
  const auto w = AttentionWeights::create_cross(pf, "cross", 8, 2);
  const Tensor x = randn({2, 3, 5, 8}, rng);
  AttentionProbe per_frame, shared;
  direct_fuse(w, x, randn({2, 3, 4, 8}, rng), &per_frame);
  direct_fuse(w, x, randn({2, 1, 4, 8}, rng), &shared);
  ASSERT_EQ(per_frame.shapes.size(), 1u);
  EXPECT_EQ(per_frame.shapes[0], (Shape{6, 2, 5, 4}));
  EXPECT_EQ(shared.shapes[0], (Shape{2, 2, 15, 4}));
  EXPECT_THROW(direct_fuse(w, x, randn({2, 2, 4, 8}, rng)), ShapeError);
}

TEST(DirectFusion, AudioOnlyAffectsItsOwnFrame) {
  ParameterSet ps;
  Rng rng(7);
  ParamFactory pf{ps, rng, DType::f64};
  const auto w = AttentionWeights::create_cross(pf, "cross", 8, 2);
  ps.randomize(rng, 0.5);
  const Tensor x = randn({1, 3, 5, 8}, rng, DType::f64);
  const Tensor cond = randn({1, 3, 4, 8}, rng, DType::f64);
  auto v = cond.to_vector();
  for (std::size_t i = 0; i < 4 * 8; ++i) v[2 * 32 + i] += 1.0;  // frame 2 only
  const Tensor bumped = Tensor::from_doubles({1, 3, 4, 8}, v, DType::f64);
  const Tensor a = direct_fuse(w, x, cond), b = direct_fuse(w, x, bumped);
  expect_bitwise_equal(slice(a, 1, 0, 2), slice(b, 1, 0, 2));
  EXPECT_GT(sum(square(slice(a, 1, 2, 3) - slice(b, 1, 2, 3))).item(), 0.0);
}

TEST(Siamese, TowerDepthAndFeatureShapes) {
  ParameterSet ps;
  Rng rng(8);
  ParamFactory pf{ps, rng, DType::f32};
  const auto portrait = SiameseTower::create(pf, "pt", SiameseTower::Kind::portrait, 3, 8, 2);
  const auto audio = SiameseTower::create(pf, "at", SiameseTower::Kind::audio, 3, 8, 2, 2.0);
  EXPECT_EQ(portrait.depth(), 3u);
  EXPECT_EQ(audio.injections.size(), 3u);
  const auto pf_feats = portrait.forward(randn({2, 6, 8}, rng));
  const auto af_feats = audio.forward(randn({2, 4, 5, 8}, rng));
  ASSERT_EQ(pf_feats.size(), 3u);
  ASSERT_EQ(af_feats.size(), 3u);
  for (const auto& f : pf_feats) EXPECT_EQ(f.shape(), (Shape{2, 1, 6, 8}));
  for (const auto& f : af_feats) EXPECT_EQ(f.shape(), (Shape{2, 4, 1, 8}));
  EXPECT_THROW(portrait.forward(randn({2, 1, 6, 8}, rng)), ShapeError);
}

TEST(Siamese, ZeroInitInjectionIsIdentity) {
  ParameterSet ps;
  Rng rng(9);
  ParamFactory pf{ps, rng, DType::f32};
  const auto tower = SiameseTower::create(pf, "pt", SiameseTower::Kind::portrait, 1, 8, 2);
  const Tensor x = randn({2, 3, 10, 8}, rng);
  const auto feats = tower.forward(randn({2, 6, 8}, rng));
  expect_bitwise_equal(siamese_inject(x, feats[0], tower.injections[0]), x);
}

TEST(Siamese, InjectionPadsShortPortraitFeatures) {
  ParameterSet ps;
  Rng rng(10);
  ParamFactory pf{ps, rng, DType::f64};
  const auto proj = Linear::create(pf, "inj", 4, 4, Init::trunc_normal, false);
  const Tensor x = Tensor::zeros({1, 2, 5, 4}, DType::f64);
  const Tensor feat = randn({1, 1, 3, 4}, rng, DType::f64);
  const Tensor y = siamese_inject(x, feat, proj);
  const Tensor expected = proj(feat);
  for (std::size_t f = 0; f < 2; ++f) {
    for (std::size_t c = 0; c < 4; ++c) {
      for (std::size_t p = 0; p < 3; ++p) EXPECT_EQ(y.at({0, f, p, c}), expected.at({0, 0, p, c}));
      for (std::size_t p = 3; p < 5; ++p) EXPECT_EQ(y.at({0, f, p, c}), 0.0);
    }
  }
}

TEST(FusionGrid, AllNineCombinationsAreIdentityAtInitAndTrainable) {
  for (auto ps : kSchemes) {
    for (auto as : kSchemes) {
      SCOPED_TRACE(to_string(ps) + " x " + to_string(as));
      ModelConfig cfg = tiny(ps, as);
      cfg.dtype = DType::f64;
      DenoiserModel model(cfg, 11);
      Rng rng(12);
      const Tensor xt = randn({1, 2, 4, 4, 2}, rng, DType::f64);
      Conditions cond;
      cond.portrait = randn({1, 4, 4, 2}, rng, DType::f64);
      cond.audio = randn({1, 2, 1, 6}, rng, DType::f64);

      // Zero-initialized gates and head: every output starts at zero.
      {
        NoGradGuard g;
        const auto out = model.forward(xt, {7}, cond);
        EXPECT_EQ(sum(square(out.eps)).item(), 0.0);
      }

      model.parameters().randomize(rng, 0.2);
      const auto out = model.forward(xt, {7}, cond);
      EXPECT_EQ(out.eps.shape(), xt.shape());
      const GradMap grads = backward(add(sum(square(out.eps)), sum(square(out.v))));
      for (const auto& [name, p] : model.parameters().entries()) {
        const Tensor* g = grads.find(p);
        ASSERT_NE(g, nullptr) << name;
        EXPECT_GT(sum(square(*g)).item(), 0.0) << name;
      }
    }
  }
}

TEST(FusionGrid, SiameseTowersMatchBackboneDepth) {
  for (std::size_t layers : {1u, 3u}) {
    ModelConfig cfg = tiny(FusionKind::siamese, FusionKind::siamese);
    cfg.layers = layers;
    DenoiserModel model(cfg, 1);
    for (const auto& b : model.blocks()) {
      EXPECT_TRUE(b.has_portrait_inject);
      EXPECT_TRUE(b.has_audio_inject);
    }
    EXPECT_EQ(model.blocks().size(), layers);
  }
}

TEST(FusionGrid, BlockPositionsFollowSymbioticTokens) {
  EXPECT_EQ(tiny(FusionKind::direct, FusionKind::direct).block_positions(), 4u);
  EXPECT_EQ(tiny(FusionKind::symbiotic, FusionKind::direct).block_positions(), 8u);
  EXPECT_EQ(tiny(FusionKind::symbiotic, FusionKind::symbiotic).block_positions(), 11u);
  EXPECT_EQ(tiny(FusionKind::siamese, FusionKind::symbiotic).block_positions(), 7u);
}
