// Encoder building blocks: patchify, divided space-time attention, the
// bootstrap cross-attention layer, the entity-aware decoder, text encoder.
#include <gtest/gtest.h>

#include <cmath>

#include "evl/config.hpp"
#include "evl/decoder.hpp"
#include "evl/global_encoder.hpp"
#include "evl/grammar.hpp"
#include "evl/model.hpp"
#include "evl/nn.hpp"
#include "evl/tensor.hpp"
#include "evl/text_encoder.hpp"

using evl::ModelConfig;
using evl::Rng;
using Td = evl::Tensor<double>;

namespace {

Td rand_tensor(evl::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Td t = Td::zeros(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

ModelConfig small_cfg() {
  ModelConfig c;
  c.image = 32;
  c.patch = 8;
  c.frames = 2;
  c.d_model = 16;
  c.heads = 2;
  c.global_layers = 3;
  c.boot_layers = 2;
  c.boot_groups = 4;
  c.entity_blocks = 1;
  c.entity_refine = 1;
  c.entities = 3;
  c.decoder_depth = 1;
  c.text_layers = 1;
  return c;
}

double max_abs_diff(const auto& a, const auto& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// patchify

TEST(Patchify, TokenCountArithmetic) {
  Rng rng(1);
  ModelConfig c = small_cfg();  // 32x32, P=8, T=2
  evl::GlobalEncoder<double> enc(c, rng);
  Td clip = Td::zeros({2, 3, 32, 32});
  Td z = enc.patchify(clip);
  EXPECT_EQ(z.dim(0), 2);
  EXPECT_EQ(z.dim(1), 16);  // K = HW / P^2
  EXPECT_EQ(z.dim(2), c.d_model);
}

TEST(Patchify, ZeroClipGivesBiasPlusPositions) {
  Rng rng(2);
  ModelConfig c = small_cfg();
  evl::GlobalEncoder<double> enc(c, rng);
  // give the projection a nonzero bias so the term is visible
  for (auto& v : enc.patch_embed.b.t.values()) v = 0.25;
  Td z = enc.patchify(Td::zeros({2, 3, 32, 32}));
  for (std::int64_t t = 0; t < 2; ++t)
    for (std::int64_t k = 0; k < c.patches(); ++k)
      for (std::int64_t j = 0; j < c.d_model; ++j) {
        const double expect = 0.25 + enc.pos_spatial.t.at({k, j}) +
                              enc.pos_temporal.t.at({t, j});
        EXPECT_NEAR(z.at({t, k, j}), expect, 1e-12);
      }
}

TEST(Patchify, IndivisibleResolutionIsConfigError) {
  ModelConfig c = small_cfg();
  c.image = 30;
  EXPECT_THROW(c.validate(), evl::ConfigError);
}

TEST(Patchify, PaperWidthConstructible) {
  ModelConfig p = ModelConfig::paper();
  EXPECT_EQ(p.d_model, 512);
  EXPECT_EQ(p.boot_layers, 6);
  EXPECT_EQ(p.boot_groups, 64);
  EXPECT_EQ(p.entities, 8);
  EXPECT_EQ(p.entity_blocks, 3);
  EXPECT_EQ(p.entity_refine, 3);
  EXPECT_EQ(p.decoder_depth, 3);
  p.validate();
  Rng rng(3);
  ModelConfig shallow = p;
  shallow.global_layers = 1;  // keep construction cheap; widths stay paper-scale
  shallow.boot_layers = 1;
  shallow.entity_blocks = 0;
  shallow.entity_refine = 0;
  shallow.text_layers = 1;
  shallow.decoder_depth = 1;
  evl::GlobalEncoder<double> enc(shallow, rng);
  Td z = enc.patchify(Td::zeros({4, 3, 224, 224}));
  EXPECT_EQ(z.dim(1), 196);
  EXPECT_EQ(z.dim(2), 512);
}

// ---------------------------------------------------------------------------
// DST block

TEST(DstBlock, ShapePreserved) {
  Rng rng(4);
  evl::DstBlock<double> blk("blk", 16, 2, 32, rng);
  Td c = rand_tensor({1, 16}, rng);
  Td z = rand_tensor({3, 5, 16}, rng);
  auto [c2, z2] = blk(c, z);
  EXPECT_EQ(z2.shape(), z.shape());
  EXPECT_EQ(c2.shape(), c.shape());
}

TEST(DstBlock, TimeAttentionKeepsSpatialIndicesSeparate) {
  Rng rng(5);
  evl::DstBlock<double> blk("blk", 16, 2, 32, rng);
  Td z = rand_tensor({3, 4, 16}, rng);
  Td base = blk.time_mix(z);

  Td z_mod = z.clone_detached();
  for (std::int64_t t = 0; t < 3; ++t)
    for (std::int64_t j = 0; j < 16; ++j)
      z_mod.values()[static_cast<std::size_t>((t * 4 + 2) * 16 + j)] += 0.5;  // k = 2
  Td out = blk.time_mix(z_mod);
  for (std::int64_t t = 0; t < 3; ++t)
    for (std::int64_t k = 0; k < 4; ++k) {
      double diff = 0;
      for (std::int64_t j = 0; j < 16; ++j)
        diff += std::abs(out.at({t, k, j}) - base.at({t, k, j}));
      if (k == 2)
        EXPECT_GT(diff, 1e-6);
      else
        EXPECT_EQ(diff, 0.0) << "time attention leaked into k=" << k;
    }
}

TEST(DstBlock, SpaceAttentionKeepsFramesSeparate) {
  Rng rng(6);
  evl::DstBlock<double> blk("blk", 16, 2, 32, rng);
  Td z = rand_tensor({3, 4, 16}, rng);
  Td base = blk.space_mix(Td(), z).second;

  Td z_mod = z.clone_detached();
  for (std::int64_t k = 0; k < 4; ++k)
    for (std::int64_t j = 0; j < 16; ++j)
      z_mod.values()[static_cast<std::size_t>((1 * 4 + k) * 16 + j)] += 0.5;  // t = 1
  Td out = blk.space_mix(Td(), z_mod).second;
  for (std::int64_t t = 0; t < 3; ++t) {
    double diff = 0;
    for (std::int64_t k = 0; k < 4; ++k)
      for (std::int64_t j = 0; j < 16; ++j)
        diff += std::abs(out.at({t, k, j}) - base.at({t, k, j}));
    if (t == 1)
      EXPECT_GT(diff, 1e-6);
    else
      EXPECT_EQ(diff, 0.0) << "space attention leaked into t=" << t;
  }
}

TEST(DstBlock, SingleFrameTimeSublayerIsValueResidual) {
  // T=1: the time softmax is a single-element distribution, so the sublayer
  // adds exactly the projected value of each token.
  Rng rng(7);
  evl::DstBlock<double> blk("blk", 16, 2, 32, rng);
  Td z = rand_tensor({1, 5, 16}, rng);
  Td out = blk.time_mix(z);

  Td zn = blk.time_norm(z);
  Td flat = evl::reshape(zn, {5, 16});
  Td expect = evl::add(evl::reshape(z, {5, 16}),
                       blk.time_att.o(blk.time_att.v(flat)));
  EXPECT_LT(max_abs_diff(out.values(), expect.values()), 1e-12);
}

TEST(DstBlock, SingleFrameEqualsJointAttentionOracle) {
  // With one frame, divided attention must coincide with a joint space-time
  // block on that frame: a value-only time update followed by full attention
  // over the frame and the feed-forward sublayer. The oracle below evaluates
  // that composition with plain loops from the block's own weights.
  Rng rng(8);
  const std::int64_t d = 8, heads = 2, k = 4, hd = d / heads;
  evl::DstBlock<double> blk("blk", d, heads, 16, rng);
  Td c = rand_tensor({1, d}, rng);
  Td z = rand_tensor({1, k, d}, rng);
  auto [c_out, z_out] = blk(c, z);

  auto ln = [&](const auto& row, const evl::Norm<double>& nm) {
    std::vector<double> out(row.size());
    double mu = 0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(row.size());
    double var = 0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(row.size());
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t j = 0; j < row.size(); ++j)
      out[j] = (row[j] - mu) * inv * nm.gain.t.values()[j] + nm.bias.t.values()[j];
    return out;
  };
  auto linear = [&](const auto& row, const evl::Linear<double>& l) {
    const std::int64_t di = l.w.t.dim(0), d_out = l.w.t.dim(1);
    std::vector<double> out(static_cast<std::size_t>(d_out));
    for (std::int64_t o = 0; o < d_out; ++o) {
      double acc = l.b.t.values()[static_cast<std::size_t>(o)];
      for (std::int64_t i = 0; i < di; ++i)
        acc += row[static_cast<std::size_t>(i)] * l.w.t.at({i, o});
      out[static_cast<std::size_t>(o)] = acc;
    }
    return out;
  };

  // rows: joint sequence [c; z] for the single frame
  std::vector<std::vector<double>> toks(static_cast<std::size_t>(k) + 1);
  toks[0].assign(c.values().begin(), c.values().end());
  for (std::int64_t i = 0; i < k; ++i)
    toks[static_cast<std::size_t>(i) + 1] =
        std::vector<double>(z.values().begin() + i * d, z.values().begin() + (i + 1) * d);

  // time sublayer: value residual for grid tokens only
  for (std::int64_t i = 1; i <= k; ++i) {
    auto v = linear(ln(toks[static_cast<std::size_t>(i)], blk.time_norm), blk.time_att.v);
    auto o = linear(v, blk.time_att.o);
    for (std::int64_t j = 0; j < d; ++j) toks[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] += o[static_cast<std::size_t>(j)];
  }

  // joint (full) attention over the frame with the space weights
  std::vector<std::vector<double>> q, kk, vv;
  for (auto& row : toks) {
    auto n = ln(row, blk.space_norm);
    q.push_back(linear(n, blk.space_att.q));
    kk.push_back(linear(n, blk.space_att.k));
    vv.push_back(linear(n, blk.space_att.v));
  }
  std::vector<std::vector<double>> ctx(toks.size(), std::vector<double>(static_cast<std::size_t>(d), 0.0));
  for (std::size_t i = 0; i < toks.size(); ++i) {
    for (std::int64_t h = 0; h < heads; ++h) {
      std::vector<double> logits(toks.size());
      for (std::size_t jj = 0; jj < toks.size(); ++jj) {
        double acc = 0;
        for (std::int64_t e = 0; e < hd; ++e)
          acc += q[i][static_cast<std::size_t>(h * hd + e)] * kk[jj][static_cast<std::size_t>(h * hd + e)];
        logits[jj] = acc / std::sqrt(static_cast<double>(hd));
      }
      double m = logits[0];
      for (double lv : logits) m = std::max(m, lv);
      double s = 0;
      std::vector<double> p(logits.size());
      for (std::size_t jj = 0; jj < logits.size(); ++jj) {
        p[jj] = std::exp(logits[jj] - m);
        s += p[jj];
      }
      for (std::size_t jj = 0; jj < logits.size(); ++jj) p[jj] /= s;
      for (std::int64_t e = 0; e < hd; ++e) {
        double acc = 0;
        for (std::size_t jj = 0; jj < logits.size(); ++jj)
          acc += p[jj] * vv[jj][static_cast<std::size_t>(h * hd + e)];
        ctx[i][static_cast<std::size_t>(h * hd + e)] = acc;
      }
    }
  }
  for (std::size_t i = 0; i < toks.size(); ++i) {
    auto o = linear(ctx[i], blk.space_att.o);
    for (std::int64_t j = 0; j < d; ++j) toks[i][static_cast<std::size_t>(j)] += o[static_cast<std::size_t>(j)];
  }

  // feed-forward sublayer
  for (auto& row : toks) {
    auto h = linear(ln(row, blk.ffn.norm), blk.ffn.up);
    for (auto& v : h) v = v > 0 ? v : 0;
    auto o = linear(h, blk.ffn.down);
    for (std::int64_t j = 0; j < d; ++j) row[static_cast<std::size_t>(j)] += o[static_cast<std::size_t>(j)];
  }

  for (std::int64_t j = 0; j < d; ++j)
    EXPECT_NEAR(c_out.values()[static_cast<std::size_t>(j)], toks[0][static_cast<std::size_t>(j)], 1e-9);
  for (std::int64_t i = 0; i < k; ++i)
    for (std::int64_t j = 0; j < d; ++j)
      EXPECT_NEAR(z_out.at({0, i, j}), toks[static_cast<std::size_t>(i) + 1][static_cast<std::size_t>(j)], 1e-9);
}

// ---------------------------------------------------------------------------
// global encoder

TEST(GlobalEncoder, TapsCountAndDeterminism) {
  Rng rng(9);
  ModelConfig c = small_cfg();
  evl::GlobalEncoder<double> enc(c, rng);
  Rng data(100);
  Td clip = rand_tensor({c.frames, 3, c.image, c.image}, data, 0.0, 1.0);
  auto taps1 = enc.forward(clip);
  auto taps2 = enc.forward(clip);
  EXPECT_EQ(taps1.z.size(), static_cast<std::size_t>(c.global_layers) + 1);
  for (std::size_t l = 0; l < taps1.z.size(); ++l)
    EXPECT_EQ(taps1.z[l].values(), taps2.z[l].values()) << "tap " << l;
  EXPECT_EQ(taps1.video_token.values(), taps2.video_token.values());
  for (const auto& z : taps1.z) {
    EXPECT_EQ(z.dim(0), c.frames);
    EXPECT_EQ(z.dim(1), c.patches());
    EXPECT_EQ(z.dim(2), c.d_model);
  }
}

TEST(GlobalEncoder, ShallowerThanBootstrapIsConfigError) {
  ModelConfig c = small_cfg();
  c.global_layers = 1;
  c.boot_layers = 2;
  EXPECT_THROW(c.validate(), evl::ConfigError);
}

TEST(GlobalEncoder, GradientReachesEmbeddings) {
  Rng rng(10);
  ModelConfig c = small_cfg();
  evl::GlobalEncoder<double> enc(c, rng);
  Rng data(11);
  Td clip = rand_tensor({c.frames, 3, c.image, c.image}, data, 0.0, 1.0);
  auto taps = enc.forward(clip);
  evl::backward(evl::mean_all(taps.last()));
  auto norm_of = [](const auto& g) {
    double s = 0;
    for (double v : g) s += v * v;
    return std::sqrt(s);
  };
  EXPECT_GT(norm_of(enc.patch_embed.w.t.grad_view()), 0.0);
  EXPECT_GT(norm_of(enc.pos_spatial.t.grad_view()), 0.0);
  EXPECT_GT(norm_of(enc.pos_temporal.t.grad_view()), 0.0);
}

// ---------------------------------------------------------------------------
// bootstrap cross-attention layer

TEST(CrossAttention, SingleKeyDegeneratesToValueResidual) {
  Rng rng(12);
  evl::CrossAttentionLayer<double> layer("x", 16, 2, 32, rng);
  Td g = rand_tensor({4, 16}, rng);
  Td kv = rand_tensor({1, 16}, rng);
  Td out = layer(g, kv);

  Td vproj = layer.att.o(layer.att.v(layer.kv_norm(kv)));  // (1, 16)
  Td expect = layer.ffn(evl::add(g, evl::tile_leading(evl::reshape(vproj, {16}), 4)));
  EXPECT_LT(max_abs_diff(out.values(), expect.values()), 1e-9);
}

// ---------------------------------------------------------------------------
// entity-aware decoder

TEST(Decoder, ShapePreservedAndSymmetry) {
  Rng rng(13);
  evl::HybridBlock<double> blk("h", 16, 2, 32, rng);
  Td e = rand_tensor({2, 16}, rng);
  // identical entity rows -> identical outputs
  for (std::int64_t j = 0; j < 16; ++j)
    e.values()[static_cast<std::size_t>(16 + j)] = e.values()[static_cast<std::size_t>(j)];
  Td z = rand_tensor({6, 16}, rng);
  Td out = blk(e, z);
  EXPECT_EQ(out.shape(), e.shape());
  for (std::int64_t j = 0; j < 16; ++j)
    EXPECT_NEAR(out.at({0, j}), out.at({1, j}), 1e-12);
}

TEST(Decoder, SinglePatchCrossAttentionIsValueResidual) {
  Rng rng(14);
  evl::HybridBlock<double> blk("h", 16, 2, 32, rng);
  Td e = rand_tensor({3, 16}, rng);
  Td z = rand_tensor({1, 16}, rng);

  Td vproj = blk.cross.o(blk.cross.v(blk.cross_kvn(z)));  // (1,16)
  Td e1 = evl::add(e, evl::tile_leading(evl::reshape(vproj, {16}), 3));
  Td sn = evl::reshape(blk.self_n(e1), {1, 3, 16});
  Td e2 = evl::add(e1, evl::reshape(evl::mha(blk.self, sn, sn), {3, 16}));
  Td expect = blk.ffn(e2);

  Td out = blk(e, z);
  EXPECT_LT(max_abs_diff(out.values(), expect.values()), 1e-9);
}

TEST(Decoder, DepthZeroIsPlainMean) {
  Rng rng(15);
  evl::EntityAwareDecoder<double> dec(0, 16, 2, 32, rng);
  Td e = rand_tensor({4, 16}, rng);
  Td z = rand_tensor({6, 16}, rng);
  Td v = dec.decode(e, z);
  Td expect = evl::mean_axis(e, 0);
  EXPECT_EQ(v.values(), expect.values());
}

TEST(Decoder, DepthOneComposes) {
  Rng rng(16);
  evl::EntityAwareDecoder<double> dec(1, 16, 2, 32, rng);
  Td e = rand_tensor({4, 16}, rng);
  Td z = rand_tensor({6, 16}, rng);
  Td v = dec.decode(e, z);
  Td expect = evl::mean_axis(dec.blocks[0](e, z), 0);
  EXPECT_EQ(v.values(), expect.values());
}

TEST(Decoder, PermutationInvariantVideoEmbedding) {
  Rng rng(17);
  evl::EntityAwareDecoder<double> dec(2, 16, 2, 32, rng);
  Td e = rand_tensor({4, 16}, rng);
  Td z = rand_tensor({6, 16}, rng);
  Td v = dec.decode(e, z);

  const std::vector<std::int64_t> perm = {2, 0, 3, 1};
  Td ep = Td::zeros({4, 16});
  for (std::int64_t r = 0; r < 4; ++r)
    for (std::int64_t j = 0; j < 16; ++j)
      ep.values()[static_cast<std::size_t>(r * 16 + j)] = e.at({perm[static_cast<std::size_t>(r)], j});
  Td vp = dec.decode(ep, z);
  EXPECT_LT(max_abs_diff(v.values(), vp.values()), 1e-9);
}

TEST(Decoder, GradientReachesEntitiesAndPatches) {
  Rng rng(18);
  evl::EntityAwareDecoder<double> dec(2, 16, 2, 32, rng);
  Td e = rand_tensor({4, 16}, rng);
  e.set_requires_grad(true);
  Td z = rand_tensor({6, 16}, rng);
  z.set_requires_grad(true);
  evl::backward(evl::mean_all(dec.decode(e, z)));
  auto norm_of = [](const auto& g) {
    double s = 0;
    for (double v : g) s += v * v;
    return std::sqrt(s);
  };
  EXPECT_GT(norm_of(e.grad_view()), 0.0);
  EXPECT_GT(norm_of(z.grad_view()), 0.0);
}

// ---------------------------------------------------------------------------
// text encoder

TEST(TextEncoder, DeterministicWidthAndNonCollapse) {
  Rng rng(19);
  ModelConfig c = small_cfg();
  evl::Vocabulary vocab = evl::build_vocabulary();
  evl::TextEncoder<double> enc(c, vocab.size(), rng);

  auto ids1 = evl::tokenize("the red circle is sliding right", vocab);
  auto ids2 = evl::tokenize("the blue square is growing", vocab);
  Td a1 = enc(ids1);
  Td a2 = enc(ids1);
  Td b = enc(ids2);
  EXPECT_EQ(a1.values(), a2.values());
  EXPECT_EQ(a1.numel(), c.d_model);

  double dot = 0, na = 0, nb = 0;
  for (std::int64_t j = 0; j < c.d_model; ++j) {
    dot += a1.values()[static_cast<std::size_t>(j)] * b.values()[static_cast<std::size_t>(j)];
    na += a1.values()[static_cast<std::size_t>(j)] * a1.values()[static_cast<std::size_t>(j)];
    nb += b.values()[static_cast<std::size_t>(j)] * b.values()[static_cast<std::size_t>(j)];
  }
  EXPECT_LT(dot / std::sqrt(na * nb), 0.999);
}

TEST(TextEncoder, EmptySequenceRejected) {
  Rng rng(20);
  evl::Vocabulary vocab = evl::build_vocabulary();
  evl::TextEncoder<double> enc(small_cfg(), vocab.size(), rng);
  EXPECT_THROW(enc({}), evl::ShapeError);
}

// ---------------------------------------------------------------------------
// full model assembly

TEST(Model, ForwardShapesAndUniqueParamNames) {
  Rng rng(21);
  ModelConfig c = small_cfg();
  evl::Model<double> model(c, evl::build_vocabulary(), rng);
  auto params = model.params();  // throws on duplicate names
  EXPECT_GT(params.size(), 0u);

  Rng data(22);
  Td clip = rand_tensor({c.frames, 3, c.image, c.image}, data, 0.0, 1.0);
  evl::TagOptions<double> opt;
  opt.noise = false;
  auto out = model.video_forward(clip, opt);
  EXPECT_EQ(out.video_embedding.numel(), c.d_model);
  EXPECT_EQ(out.entities.shape(), (evl::Shape{c.entities, c.d_model}));
  EXPECT_EQ(out.entity_tokens.shape(), (evl::Shape{c.frames, c.entities, c.d_model}));
  EXPECT_EQ(out.boot_record.similarity.shape(),
            (evl::Shape{c.frames, c.boot_groups, c.patches()}));
  EXPECT_EQ(out.entity_record.similarity.shape(),
            (evl::Shape{c.frames, c.entities, c.boot_groups}));

  Td t = model.encode_text("the red circle is sliding right");
  EXPECT_EQ(t.numel(), c.d_model);
}
