// Parameterized building blocks shared by all encoders: linear maps,
// layer norm wrappers, multi-head attention, feed-forward sublayers, and the
// divided space-time block.
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "evl/random.hpp"
#include "evl/tensor.hpp"

namespace evl {

template <class S>
struct Parameter {
  std::string name;
  Tensor<S> t;
  bool trainable = true;
};

template <class S>
using ParamRefs = std::vector<Parameter<S>*>;

template <class S>
Parameter<S> make_param(std::string name, Tensor<S> t) {
  t.set_requires_grad(true);
  return Parameter<S>{std::move(name), std::move(t), true};
}

template <class S>
Parameter<S> normal_param(const std::string& name, Shape shape, Rng& rng,
                          S stddev = S(0.02)) {
  return make_param(name, Tensor<S>::randn(std::move(shape), rng, stddev));
}

// ---------------------------------------------------------------------------

template <class S>
struct Linear {
  Parameter<S> w, b;

  Linear() = default;
  Linear(const std::string& prefix, std::int64_t in, std::int64_t out, Rng& rng)
      : w(normal_param<S>(prefix + ".w", {in, out}, rng)),
        b(make_param(prefix + ".b", Tensor<S>::zeros({out}))) {}

  Tensor<S> operator()(const Tensor<S>& x) const {
    Shape oshape = x.shape();
    oshape.back() = w.t.dim(1);
    Tensor<S> flat = x.rank() == 2 ? x : reshape(x, {x.numel() / x.dim(x.rank() - 1),
                                                     x.dim(x.rank() - 1)});
    Tensor<S> y = add_rowvec(matmul(flat, w.t), b.t);
    return y.shape() == oshape ? y : reshape(y, oshape);
  }

  void collect(ParamRefs<S>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

template <class S>
struct Norm {
  Parameter<S> gain, bias;

  Norm() = default;
  Norm(const std::string& prefix, std::int64_t d)
      : gain(make_param(prefix + ".gain", Tensor<S>::full({d}, S(1)))),
        bias(make_param(prefix + ".bias", Tensor<S>::zeros({d}))) {}

  Tensor<S> operator()(const Tensor<S>& x) const { return layer_norm(x, gain.t, bias.t); }

  void collect(ParamRefs<S>& out) {
    out.push_back(&gain);
    out.push_back(&bias);
  }
};

// Residual feed-forward sublayer: x + W2 relu(W1 ln(x)).
template <class S>
struct FeedForward {
  Norm<S> norm;
  Linear<S> up, down;

  FeedForward() = default;
  FeedForward(const std::string& prefix, std::int64_t d, std::int64_t hidden, Rng& rng)
      : norm(prefix + ".ln", d),
        up(prefix + ".up", d, hidden, rng),
        down(prefix + ".down", hidden, d, rng) {}

  Tensor<S> operator()(const Tensor<S>& x) const {
    return add(x, down(relu(up(norm(x)))));
  }

  void collect(ParamRefs<S>& out) {
    norm.collect(out);
    up.collect(out);
    down.collect(out);
  }
};

// ---------------------------------------------------------------------------
// Multi-head attention core. Query/key/value inputs are flat token matrices;
// callers shape the batching by passing explicit (batch, len) splits.

template <class S>
struct AttentionProj {
  Linear<S> q, k, v, o;
  std::int64_t heads = 1;
  std::int64_t head_dim = 1;

  AttentionProj() = default;
  AttentionProj(const std::string& prefix, std::int64_t d, std::int64_t n_heads, Rng& rng)
      : q(prefix + ".q", d, d, rng),
        k(prefix + ".k", d, d, rng),
        v(prefix + ".v", d, d, rng),
        o(prefix + ".o", d, d, rng),
        heads(n_heads),
        head_dim(d / n_heads) {
    check(d % n_heads == 0, "attention: width not divisible by heads");
  }

  void collect(ParamRefs<S>& out) {
    q.collect(out);
    k.collect(out);
    v.collect(out);
    o.collect(out);
  }
};

// (B, n, D) -> (B*heads, n, head_dim)
template <class S>
Tensor<S> split_heads(const Tensor<S>& x, std::int64_t heads, std::int64_t head_dim) {
  const std::int64_t b = x.dim(0), n = x.dim(1);
  Tensor<S> r = reshape(x, {b, n, heads, head_dim});
  Tensor<S> p = permute(r, {0, 2, 1, 3});
  return reshape(p, {b * heads, n, head_dim});
}

// inverse of split_heads
template <class S>
Tensor<S> merge_heads(const Tensor<S>& x, std::int64_t b, std::int64_t heads,
                      std::int64_t head_dim) {
  const std::int64_t n = x.dim(1);
  Tensor<S> r = reshape(x, {b, heads, n, head_dim});
  Tensor<S> p = permute(r, {0, 2, 1, 3});
  return reshape(p, {b, n, heads * head_dim});
}

// Batched multi-head attention: q_in (B, nq, D), kv_in (B, nk, D) -> (B, nq, D).
template <class S>
Tensor<S> mha(const AttentionProj<S>& proj, const Tensor<S>& q_in, const Tensor<S>& kv_in) {
  const std::int64_t b = q_in.dim(0);
  Tensor<S> q = split_heads(proj.q(q_in), proj.heads, proj.head_dim);
  Tensor<S> k = split_heads(proj.k(kv_in), proj.heads, proj.head_dim);
  Tensor<S> v = split_heads(proj.v(kv_in), proj.heads, proj.head_dim);
  Tensor<S> logits = scale(bmm(q, k, false, true),
                           S(1) / std::sqrt(static_cast<S>(proj.head_dim)));
  Tensor<S> att = softmax(logits, 2);
  Tensor<S> ctx = merge_heads(bmm(att, v), b, proj.heads, proj.head_dim);
  return proj.o(ctx);
}

// ---------------------------------------------------------------------------
// Divided space-time block.
//
// Operates on per-frame token grids z (T, K, D) plus an optional set of
// video-level tokens x (M, D) that skip time attention, join every frame's
// space attention, and average their per-frame updates. Pre-norm residual
// sublayers throughout.

template <class S>
struct DstBlock {
  Norm<S> time_norm, space_norm;
  AttentionProj<S> time_att, space_att;
  FeedForward<S> ffn;
  std::int64_t d = 0;

  DstBlock() = default;
  DstBlock(const std::string& prefix, std::int64_t d_model, std::int64_t heads,
           std::int64_t ffn_hidden, Rng& rng)
      : time_norm(prefix + ".time.ln", d_model),
        space_norm(prefix + ".space.ln", d_model),
        time_att(prefix + ".time", d_model, heads, rng),
        space_att(prefix + ".space", d_model, heads, rng),
        ffn(prefix + ".ffn", d_model, ffn_hidden, rng),
        d(d_model) {}

  // Time attention with residual: token (t, k) attends over (t', k).
  Tensor<S> time_mix(const Tensor<S>& grid) const {
    Tensor<S> zn = time_norm(grid);
    Tensor<S> z_kt = permute(zn, {1, 0, 2});              // (K, T, D)
    Tensor<S> t_out = mha(time_att, z_kt, z_kt);          // (K, T, D)
    return add(grid, permute(t_out, {1, 0, 2}));
  }

  // Space attention with residual: per frame over (t, k'). Video tokens
  // prepend to every frame's sequence; their T updates are averaged.
  std::pair<Tensor<S>, Tensor<S>> space_mix(const Tensor<S>& video_tokens,
                                            const Tensor<S>& grid) const {
    const std::int64_t t = grid.dim(0), k = grid.dim(1);
    Tensor<S> zn = space_norm(grid);
    Tensor<S> x1;
    Tensor<S> seq;
    std::int64_t m = 0;
    if (video_tokens.defined()) {
      m = video_tokens.dim(0);
      Tensor<S> xn = space_norm(video_tokens);            // (M, D)
      seq = concat<S>({tile_leading(xn, t), zn}, 1);      // (T, M+K, D)
    } else {
      seq = zn;
    }
    Tensor<S> s_out = mha(space_att, seq, seq);           // (T, M+K, D)
    Tensor<S> z2;
    if (video_tokens.defined()) {
      Tensor<S> x_upd = mean_axis(slice(s_out, 1, 0, m), 0);  // (M, D)
      x1 = add(video_tokens, x_upd);
      z2 = add(grid, slice(s_out, 1, m, k));
    } else {
      z2 = add(grid, s_out);
    }
    return {x1, z2};
  }

  // returns updated (video_tokens, grid); video_tokens may be undefined.
  std::pair<Tensor<S>, Tensor<S>> operator()(const Tensor<S>& video_tokens,
                                             const Tensor<S>& grid) const {
    Tensor<S> z1 = time_mix(grid);
    auto [x1, z2] = space_mix(video_tokens, z1);
    Tensor<S> z3 = ffn(z2);
    Tensor<S> x2 = x1.defined() ? ffn(x1) : Tensor<S>();
    return {x2, z3};
  }

  void collect(ParamRefs<S>& out) {
    time_norm.collect(out);
    space_norm.collect(out);
    time_att.collect(out);
    space_att.collect(out);
    ffn.collect(out);
  }
};

// Cross-attention layer used by the bootstrap stage: queries are video-level
// tokens, keys/values an arbitrary token matrix.
template <class S>
struct CrossAttentionLayer {
  Norm<S> q_norm, kv_norm;
  AttentionProj<S> att;
  FeedForward<S> ffn;

  CrossAttentionLayer() = default;
  CrossAttentionLayer(const std::string& prefix, std::int64_t d, std::int64_t heads,
                      std::int64_t ffn_hidden, Rng& rng)
      : q_norm(prefix + ".qln", d),
        kv_norm(prefix + ".kvln", d),
        att(prefix + ".att", d, heads, rng),
        ffn(prefix + ".ffn", d, ffn_hidden, rng) {}

  // queries (Q, D), keys/values (N, D)
  Tensor<S> operator()(const Tensor<S>& queries, const Tensor<S>& kv) const {
    const std::int64_t q = queries.dim(0), n = kv.dim(0), d = queries.dim(1);
    Tensor<S> qn = reshape(q_norm(queries), {1, q, d});
    Tensor<S> kn = reshape(kv_norm(kv), {1, n, d});
    Tensor<S> upd = reshape(mha(att, qn, kn), {q, d});
    return ffn(add(queries, upd));
  }

  void collect(ParamRefs<S>& out) {
    q_norm.collect(out);
    kv_norm.collect(out);
    att.collect(out);
    ffn.collect(out);
  }
};

}  // namespace evl
