// Entity-aware decoder: hybrid attention blocks fusing entity tokens with
// final-layer patch tokens, pooled into the video embedding.
#pragma once

#include <string>
#include <vector>

#include "evl/nn.hpp"
#include "evl/tensor.hpp"

namespace evl {

template <class S>
struct HybridBlock {
  Norm<S> cross_qn, cross_kvn, self_n;
  AttentionProj<S> cross, self;
  FeedForward<S> ffn;

  HybridBlock() = default;
  HybridBlock(const std::string& prefix, std::int64_t d, std::int64_t heads,
              std::int64_t hidden, Rng& rng)
      : cross_qn(prefix + ".cq.ln", d),
        cross_kvn(prefix + ".ckv.ln", d),
        self_n(prefix + ".self.ln", d),
        cross(prefix + ".cross", d, heads, rng),
        self(prefix + ".self", d, heads, rng),
        ffn(prefix + ".ffn", d, hidden, rng) {}

  // e: (E, D), patches: (N, D)
  Tensor<S> operator()(const Tensor<S>& e, const Tensor<S>& patches) const {
    const std::int64_t ne = e.dim(0), np = patches.dim(0), d = e.dim(1);
    Tensor<S> q = reshape(cross_qn(e), {1, ne, d});
    Tensor<S> kv = reshape(cross_kvn(patches), {1, np, d});
    Tensor<S> e1 = add(e, reshape(mha(cross, q, kv), {ne, d}));
    Tensor<S> sn = reshape(self_n(e1), {1, ne, d});
    Tensor<S> e2 = add(e1, reshape(mha(self, sn, sn), {ne, d}));
    return ffn(e2);
  }

  void collect(ParamRefs<S>& out) {
    cross_qn.collect(out);
    cross_kvn.collect(out);
    self_n.collect(out);
    cross.collect(out);
    self.collect(out);
    ffn.collect(out);
  }
};

template <class S>
struct EntityAwareDecoder {
  std::vector<HybridBlock<S>> blocks;

  EntityAwareDecoder() = default;
  EntityAwareDecoder(std::int64_t depth, std::int64_t d, std::int64_t heads,
                     std::int64_t hidden, Rng& rng) {
    for (std::int64_t l = 0; l < depth; ++l)
      blocks.emplace_back("decoder.blk" + std::to_string(l), d, heads, hidden, rng);
  }

  // e: (E, D), patches: final global tap flattened to (N, D). Returns v: (D).
  Tensor<S> decode(const Tensor<S>& e, const Tensor<S>& patches) const {
    Tensor<S> cur = e;
    for (const auto& blk : blocks) cur = blk(cur, patches);
    return mean_axis(cur, 0);
  }

  void collect(ParamRefs<S>& out) {
    for (auto& b : blocks) b.collect(out);
  }
};

}  // namespace evl
