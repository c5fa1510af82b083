// Small transformer over narration tokens; the begin-position output,
// projected to the shared width, is the text embedding. The same encoder
// embeds full narrations, single nouns, and verb phrases.
#pragma once

#include <string>
#include <vector>

#include "evl/config.hpp"
#include "evl/grammar.hpp"
#include "evl/nn.hpp"
#include "evl/tensor.hpp"

namespace evl {

template <class S>
struct TextBlock {
  Norm<S> att_norm;
  AttentionProj<S> att;
  FeedForward<S> ffn;

  TextBlock() = default;
  TextBlock(const std::string& prefix, std::int64_t d, std::int64_t heads,
            std::int64_t hidden, Rng& rng)
      : att_norm(prefix + ".ln", d),
        att(prefix + ".att", d, heads, rng),
        ffn(prefix + ".ffn", d, hidden, rng) {}

  Tensor<S> operator()(const Tensor<S>& x) const {
    const std::int64_t n = x.dim(0), d = x.dim(1);
    Tensor<S> xn = reshape(att_norm(x), {1, n, d});
    return ffn(add(x, reshape(mha(att, xn, xn), {n, d})));
  }

  void collect(ParamRefs<S>& out) {
    att_norm.collect(out);
    att.collect(out);
    ffn.collect(out);
  }
};

template <class S>
struct TextEncoder {
  ModelConfig cfg;
  Parameter<S> embed;      // (V, D)
  Parameter<S> pos;        // (text_len, D)
  std::vector<TextBlock<S>> blocks;
  Norm<S> out_norm;
  Linear<S> out_proj;

  TextEncoder() = default;
  TextEncoder(const ModelConfig& c, std::int64_t vocab_size, Rng& rng)
      : cfg(c),
        embed(normal_param<S>("text.embed", {vocab_size, c.d_model}, rng)),
        pos(normal_param<S>("text.pos", {c.text_len, c.d_model}, rng)),
        out_norm("text.out.ln", c.d_model),
        out_proj("text.out.proj", c.d_model, c.d_model, rng) {
    for (std::int64_t l = 0; l < c.text_layers; ++l)
      blocks.emplace_back("text.blk" + std::to_string(l), c.d_model, c.heads,
                          c.ffn_hidden(), rng);
  }

  // -> (D)
  Tensor<S> operator()(const std::vector<std::int64_t>& ids) const {
    check(!ids.empty(), "encode_text: empty id sequence");
    check(static_cast<std::int64_t>(ids.size()) <= cfg.text_len,
          "encode_text: sequence longer than position table");
    Tensor<S> x = gather_rows(embed.t, ids);
    x = add(x, slice(pos.t, 0, 0, static_cast<std::int64_t>(ids.size())));
    for (const auto& blk : blocks) x = blk(x);
    Tensor<S> begin = slice(out_norm(x), 0, 0, 1);  // (1, D)
    return reshape(out_proj(begin), {cfg.d_model});
  }

  void collect(ParamRefs<S>& out) {
    out.push_back(&embed);
    out.push_back(&pos);
    for (auto& b : blocks) b.collect(out);
    out_norm.collect(out);
    out_proj.collect(out);
  }
};

}  // namespace evl
