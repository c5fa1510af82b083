// Temporal-aware grouping: straight-through contracts, brute-force grouping
// oracle, partition/permutation properties, entity stage composition.
#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "evl/config.hpp"
#include "evl/local_encoder.hpp"
#include "evl/tag.hpp"
#include "evl/tensor.hpp"

using evl::AssignMode;
using evl::ModelConfig;
using evl::Rng;
using Td = evl::Tensor<double>;
using TagD = evl::TagLayer<double>;
using OptD = evl::TagOptions<double>;

namespace {

Td rand_tensor(evl::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Td t = Td::zeros(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

OptD eval_opt() {
  OptD o;
  o.noise = false;
  o.mode = AssignMode::kHard;
  return o;
}

// Plain-loop replica of the grouping computation: projected similarities,
// per-token argmax over groups, per-frame per-group means, query residual,
// and optionally the layer's mixing projection. Independent of the tensor
// graph path.
struct GroupingOracle {
  std::vector<std::vector<double>> out;  // (T*Q) rows of D
  std::vector<std::vector<std::int64_t>> argmax;  // [t][i] -> group

  GroupingOracle(const TagD& layer, const Td& queries, const Td& inputs,
                 bool apply_projection) {
    const std::int64_t t = inputs.dim(0), ni = inputs.dim(1), d = inputs.dim(2);
    const std::int64_t q = queries.dim(0);
    auto matvec = [&](const Td& w, const double* row) {
      std::vector<double> r(static_cast<std::size_t>(w.dim(1)), 0.0);
      for (std::int64_t o = 0; o < w.dim(1); ++o)
        for (std::int64_t i2 = 0; i2 < w.dim(0); ++i2)
          r[static_cast<std::size_t>(o)] += row[i2] * w.at({i2, o});
      return r;
    };
    std::vector<std::vector<double>> qp;
    for (std::int64_t g = 0; g < q; ++g)
      qp.push_back(matvec(layer.w_q.t, queries.values().data() + g * d));
    argmax.assign(static_cast<std::size_t>(t), std::vector<std::int64_t>(static_cast<std::size_t>(ni), 0));
    for (std::int64_t ti = 0; ti < t; ++ti)
      for (std::int64_t j = 0; j < ni; ++j) {
        auto ip = matvec(layer.w_i.t, inputs.values().data() + (ti * ni + j) * d);
        double best = -1e300;
        std::int64_t bi = 0;
        for (std::int64_t g = 0; g < q; ++g) {
          double dot = 0;
          for (std::int64_t e = 0; e < d; ++e) dot += qp[static_cast<std::size_t>(g)][static_cast<std::size_t>(e)] * ip[static_cast<std::size_t>(e)];
          if (dot > best) {
            best = dot;
            bi = g;
          }
        }
        argmax[static_cast<std::size_t>(ti)][static_cast<std::size_t>(j)] = bi;
      }
    out.assign(static_cast<std::size_t>(t * q), std::vector<double>(static_cast<std::size_t>(d), 0.0));
    for (std::int64_t ti = 0; ti < t; ++ti)
      for (std::int64_t g = 0; g < q; ++g) {
        std::vector<double> acc(static_cast<std::size_t>(d), 0.0);
        double count = 0;
        for (std::int64_t j = 0; j < ni; ++j)
          if (argmax[static_cast<std::size_t>(ti)][static_cast<std::size_t>(j)] == g) {
            for (std::int64_t e = 0; e < d; ++e)
              acc[static_cast<std::size_t>(e)] += inputs.at({ti, j, e});
            count += 1;
          }
        auto& row = out[static_cast<std::size_t>(ti * q + g)];
        for (std::int64_t e = 0; e < d; ++e)
          row[static_cast<std::size_t>(e)] =
              queries.at({g, e}) + acc[static_cast<std::size_t>(e)] / (count + 1e-6);
      }
    if (apply_projection) {
      for (auto& row : out) {
        // replicate the residual feed-forward with plain loops
        std::vector<double> n(row.size());
        double mu = 0;
        for (double v : row) mu += v;
        mu /= static_cast<double>(row.size());
        double var = 0;
        for (double v : row) var += (v - mu) * (v - mu);
        var /= static_cast<double>(row.size());
        const double inv = 1.0 / std::sqrt(var + 1e-5);
        for (std::size_t e = 0; e < row.size(); ++e)
          n[e] = (row[e] - mu) * inv * layer.post.norm.gain.t.values()[e] +
                 layer.post.norm.bias.t.values()[e];
        const std::int64_t hidden = layer.post.up.w.t.dim(1);
        std::vector<double> h(static_cast<std::size_t>(hidden), 0.0);
        for (std::int64_t o = 0; o < hidden; ++o) {
          double acc = layer.post.up.b.t.values()[static_cast<std::size_t>(o)];
          for (std::size_t e = 0; e < n.size(); ++e)
            acc += n[e] * layer.post.up.w.t.at({static_cast<std::int64_t>(e), o});
          h[static_cast<std::size_t>(o)] = acc > 0 ? acc : 0;
        }
        for (std::size_t e = 0; e < row.size(); ++e) {
          double acc = layer.post.down.b.t.values()[e];
          for (std::int64_t o = 0; o < hidden; ++o)
            acc += h[static_cast<std::size_t>(o)] *
                   layer.post.down.w.t.at({o, static_cast<std::int64_t>(e)});
          row[e] += acc;
        }
      }
    }
  }
};

}  // namespace

TEST(Tag, FullAssignmentToOneGroup) {
  // Every input token most similar to group 0 (noise off): group 0's output
  // is g0 + the per-frame mean of all inputs, other groups stay at their
  // query tokens.
  Rng rng(1);
  TagD layer("tag", "bootstrap", 4, 8, rng, 1.0);
  layer.with_projection = false;
  // identity similarity projections
  layer.w_q.t = Td::zeros({4, 4});
  layer.w_i.t = Td::zeros({4, 4});
  for (int i = 0; i < 4; ++i) {
    layer.w_q.t.values()[static_cast<std::size_t>(i * 4 + i)] = 1.0;
    layer.w_i.t.values()[static_cast<std::size_t>(i * 4 + i)] = 1.0;
  }
  Td queries = Td::from({2, 4}, {5.0, 0.0, 0.0, 0.0,
                                 -5.0, 0.0, 0.0, 0.0});
  // all inputs have strong positive first coordinate -> group 0 wins
  Td inputs = Td::from({2, 3, 4}, {
      1.0, 0.1, 0.2, 0.3,  1.2, -0.1, 0.0, 0.5,  0.8, 0.3, -0.2, 0.1,
      0.9, 0.0, 0.1, -0.3, 1.1, 0.2, 0.4, 0.0,   1.3, -0.2, 0.3, 0.2});
  auto [out, rec] = layer(queries, inputs, eval_opt());

  for (std::int64_t t = 0; t < 2; ++t) {
    for (std::int64_t e = 0; e < 4; ++e) {
      double mean = 0;
      for (std::int64_t j = 0; j < 3; ++j) mean += inputs.at({t, j, e});
      mean /= (3.0 + 1e-6);
      EXPECT_NEAR(out.at({t, 0, e}), queries.at({0, e}) + mean, 1e-9);
      EXPECT_NEAR(out.at({t, 1, e}), queries.at({1, e}), 1e-12);  // empty group
    }
  }
}

TEST(Tag, StraightThroughForwardIsExactlyHard) {
  Rng rng(2);
  TagD layer("tag", "bootstrap", 6, 12, rng, 1.0);
  Td queries = rand_tensor({3, 6}, rng);
  Td inputs = rand_tensor({2, 4, 6}, rng);
  auto [out, rec] = layer(queries, inputs, eval_opt());

  // assignment forward values are exactly one-hot
  for (std::int64_t t = 0; t < 2; ++t)
    for (std::int64_t j = 0; j < 4; ++j) {
      double sum = 0;
      int ones = 0;
      for (std::int64_t q = 0; q < 3; ++q) {
        const double v = rec.assignment.at({t, q, j});
        sum += v;
        if (v == 1.0) ++ones;
        EXPECT_TRUE(v == 0.0 || v == 1.0) << "non-binary straight-through forward";
      }
      EXPECT_EQ(ones, 1);
      EXPECT_EQ(sum, 1.0);
    }

  // merging with the pure one-hot matrix gives bit-identical output
  evl::NoGradGuard ng;
  Td qp = evl::matmul(queries, layer.w_q.t);
  Td ip = evl::reshape(evl::matmul(evl::reshape(inputs, {8, 6}), layer.w_i.t), {2, 4, 6});
  Td logits = evl::bmm(evl::tile_leading(qp, 2), ip, false, true);
  Td hard = evl::one_hot_argmax(logits, 1);
  Td merged = evl::bmm(hard, inputs);
  Td counts = evl::sum_axis(hard, 2);
  Td inv = evl::recip(evl::add_scalar(counts, 1e-6));
  Td grouped = evl::scale_rows(merged, inv);
  Td pure = layer.post(evl::add(grouped, evl::tile_leading(queries, 2)));
  EXPECT_EQ(out.values(), pure.values());
}

TEST(Tag, StraightThroughBackwardEqualsSoftPath) {
  // The gradient arriving at the soft similarity A must equal the cotangent
  // of the assignment exactly: one-hot and stop-gradient contribute nothing.
  Rng rng(3);
  TagD layer("tag", "bootstrap", 6, 12, rng, 1.0);
  Td queries = rand_tensor({3, 6}, rng);
  Td inputs = rand_tensor({2, 4, 6}, rng);
  inputs.set_requires_grad(true);
  auto [out, rec] = layer(queries, inputs, eval_opt());
  rec.similarity.retain_grad();
  rec.assignment.retain_grad();

  Td w = rand_tensor(out.shape(), rng);
  evl::backward(evl::sum_all(evl::mul(out, w)));
  ASSERT_FALSE(rec.similarity.grad_view().empty());
  ASSERT_FALSE(rec.assignment.grad_view().empty());
  EXPECT_EQ(rec.similarity.grad_view(), rec.assignment.grad_view());
}

TEST(Tag, MatchesBruteForceOracle) {
  // T=2, Q=2, I=3 random values, noise disabled; both with and without the
  // mixing projection.
  for (std::uint64_t seed = 10; seed < 15; ++seed) {
    Rng rng(seed);
    TagD layer("tag", "bootstrap", 5, 10, rng, 1.0);
    Td queries = rand_tensor({2, 5}, rng);
    Td inputs = rand_tensor({2, 3, 5}, rng);

    layer.with_projection = false;
    auto [plain, rec] = layer(queries, inputs, eval_opt());
    GroupingOracle oracle(layer, queries, inputs, false);
    for (std::int64_t t = 0; t < 2; ++t)
      for (std::int64_t q = 0; q < 2; ++q)
        for (std::int64_t e = 0; e < 5; ++e)
          EXPECT_NEAR(plain.at({t, q, e}),
                      oracle.out[static_cast<std::size_t>(t * 2 + q)][static_cast<std::size_t>(e)], 1e-12);

    layer.with_projection = true;
    auto [proj, rec2] = layer(queries, inputs, eval_opt());
    GroupingOracle oracle2(layer, queries, inputs, true);
    for (std::int64_t t = 0; t < 2; ++t)
      for (std::int64_t q = 0; q < 2; ++q)
        for (std::int64_t e = 0; e < 5; ++e)
          EXPECT_NEAR(proj.at({t, q, e}),
                      oracle2.out[static_cast<std::size_t>(t * 2 + q)][static_cast<std::size_t>(e)], 1e-12);
  }
}

TEST(Tag, PartitionInvariant) {
  Rng rng(4);
  TagD layer("tag", "bootstrap", 8, 16, rng, 1.0);
  Td queries = rand_tensor({5, 8}, rng);
  Td inputs = rand_tensor({3, 7, 8}, rng);
  Rng noise(99);
  OptD opt;
  opt.noise = true;
  opt.rng = &noise;
  auto [out, rec] = layer(queries, inputs, opt);
  for (std::int64_t t = 0; t < 3; ++t)
    for (std::int64_t j = 0; j < 7; ++j) {
      double hard_sum = 0, soft_sum = 0;
      for (std::int64_t q = 0; q < 5; ++q) {
        hard_sum += rec.assignment.at({t, q, j});
        soft_sum += rec.similarity.at({t, q, j});
      }
      EXPECT_EQ(hard_sum, 1.0);
      EXPECT_NEAR(soft_sum, 1.0, 1e-9);
    }
}

TEST(Tag, PermutationEquivariantInGroups) {
  Rng rng(5);
  TagD layer("tag", "bootstrap", 6, 12, rng, 1.0);
  Td queries = rand_tensor({4, 6}, rng);
  Td inputs = rand_tensor({2, 5, 6}, rng);
  auto [out, rec] = layer(queries, inputs, eval_opt());

  const std::vector<std::int64_t> perm = {2, 0, 3, 1};
  Td qperm = Td::zeros({4, 6});
  for (std::int64_t r = 0; r < 4; ++r)
    for (std::int64_t j = 0; j < 6; ++j)
      qperm.values()[static_cast<std::size_t>(r * 6 + j)] = queries.at({perm[static_cast<std::size_t>(r)], j});
  auto [out2, rec2] = layer(qperm, inputs, eval_opt());

  for (std::int64_t t = 0; t < 2; ++t)
    for (std::int64_t r = 0; r < 4; ++r) {
      for (std::int64_t j = 0; j < 6; ++j)
        EXPECT_NEAR(out2.at({t, r, j}), out.at({t, perm[static_cast<std::size_t>(r)], j}), 1e-12);
      for (std::int64_t i = 0; i < 5; ++i) {
        EXPECT_NEAR(rec2.similarity.at({t, r, i}),
                    rec.similarity.at({t, perm[static_cast<std::size_t>(r)], i}), 1e-12);
        EXPECT_EQ(rec2.assignment.at({t, r, i}),
                  rec.assignment.at({t, perm[static_cast<std::size_t>(r)], i}));
      }
    }
}

TEST(Tag, NoiselessAssignmentIdempotent) {
  Rng rng(6);
  TagD layer("tag", "entity", 6, 12, rng, 1.0);
  Td queries = rand_tensor({3, 6}, rng);
  Td inputs = rand_tensor({2, 4, 6}, rng);
  auto [o1, r1] = layer(queries, inputs, eval_opt());
  auto [o2, r2] = layer(queries, inputs, eval_opt());
  EXPECT_EQ(r1.assignment.values(), r2.assignment.values());
  EXPECT_EQ(o1.values(), o2.values());
}

TEST(Tag, GumbelNoiseVariesAssignments) {
  // With near-uniform similarities, fresh noise should flip some assignments
  // between draws.
  Rng rng(7);
  TagD layer("tag", "bootstrap", 6, 12, rng, 1.0);
  Td queries = rand_tensor({4, 6}, rng, -0.01, 0.01);
  Td inputs = rand_tensor({2, 16, 6}, rng, -0.01, 0.01);
  Rng n1(1000);
  OptD o1;
  o1.noise = true;
  o1.rng = &n1;
  auto [a, ra] = layer(queries, inputs, o1);
  Rng n2(2000);
  OptD o2;
  o2.noise = true;
  o2.rng = &n2;
  auto [b, rb] = layer(queries, inputs, o2);
  EXPECT_NE(ra.assignment.values(), rb.assignment.values());
}

TEST(LocalEncoder, ZeroDstStagesReduceToPlainTag) {
  Rng rng(8);
  ModelConfig c = ModelConfig::micro();
  c.entity_blocks = 0;
  c.entity_refine = 0;
  evl::LocalEntityEncoder<double> enc(c, rng);
  evl::GlobalEncoder<double> genc(c, rng);
  Rng data(9);
  Td clip = rand_tensor({c.frames, 3, c.image, c.image}, data, 0.0, 1.0);
  auto taps = genc.forward(clip);
  OptD opt = eval_opt();
  auto out = enc.forward(taps, opt);

  Td g_boot = enc.bootstrap_forward(taps);
  auto [segments, rb] =
      enc.boot_tag(g_boot, taps.tap(static_cast<std::size_t>(c.boot_layers)), opt);
  auto [ehat, re] = enc.entity_tag(enc.entity_tokens.t, segments, opt);
  EXPECT_EQ(out.entity_tokens.values(), ehat.values());
  EXPECT_EQ(out.entity_record.similarity.values(), re.similarity.values());
}

TEST(LocalEncoder, EntityTokensShape) {
  Rng rng(10);
  ModelConfig c = ModelConfig::micro();
  evl::LocalEntityEncoder<double> enc(c, rng);
  evl::GlobalEncoder<double> genc(c, rng);
  Rng data(11);
  Td clip = rand_tensor({c.frames, 3, c.image, c.image}, data, 0.0, 1.0);
  OptD opt = eval_opt();
  auto out = enc.forward(genc.forward(clip), opt);
  EXPECT_EQ(out.entity_tokens.shape(), (evl::Shape{c.frames, c.entities, c.d_model}));
  EXPECT_EQ(out.pooled.shape(), (evl::Shape{c.entities, c.d_model}));
}

TEST(PoolEntities, MeanSemantics) {
  // constant across frames -> any frame's slice
  Td cst = Td::from({2, 2, 3}, {1, 2, 3, 4, 5, 6, 1, 2, 3, 4, 5, 6});
  Td pooled = evl::pool_entities(cst);
  EXPECT_EQ(pooled.values(), (std::vector<double>{1, 2, 3, 4, 5, 6}));

  // rows r and -r cancel
  Td anti = Td::from({2, 1, 3}, {1.5, -2.0, 0.25, -1.5, 2.0, -0.25});
  Td zero = evl::pool_entities(anti);
  for (auto v : zero.values()) EXPECT_DOUBLE_EQ(v, 0.0);

  // random T=3 against a direct mean
  Rng rng(12);
  Td x = rand_tensor({3, 4, 5}, rng);
  Td got = evl::pool_entities(x);
  for (std::int64_t e = 0; e < 4; ++e)
    for (std::int64_t j = 0; j < 5; ++j) {
      double m = (x.at({0, e, j}) + x.at({1, e, j}) + x.at({2, e, j})) / 3.0;
      EXPECT_NEAR(got.at({e, j}), m, 1e-12);
    }
}

TEST(Tag, BootstrapDegenerateSingleToken) {
  // One patch token per tap: each bootstrap layer adds exactly the projected
  // value of that token (single-key attention), then applies feed-forward.
  Rng rng(13);
  evl::CrossAttentionLayer<double> layer("boot", 8, 2, 16, rng);
  Td g = rand_tensor({5, 8}, rng);
  Td z = rand_tensor({1, 8}, rng);
  Td out = layer(g, z);
  EXPECT_EQ(out.shape(), g.shape());
  Td vproj = layer.att.o(layer.att.v(layer.kv_norm(z)));
  Td expect = layer.ffn(evl::add(g, evl::tile_leading(evl::reshape(vproj, {8}), 5)));
  for (std::size_t i = 0; i < out.values().size(); ++i)
    EXPECT_NEAR(out.values()[i], expect.values()[i], 1e-9);
}
