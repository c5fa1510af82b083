// Local entity encoder: bootstrap cross-attention against global taps, a
// grouping step into per-frame segments, an entity grouping stage with DST
// blocks, and temporal pooling into entity embeddings.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "evl/config.hpp"
#include "evl/global_encoder.hpp"
#include "evl/nn.hpp"
#include "evl/tag.hpp"
#include "evl/tensor.hpp"

namespace evl {

template <class S>
struct LocalOutputs {
  Tensor<S> entity_tokens;          // ê, (T, E, D)
  Tensor<S> pooled;                 // e,  (E, D)
  AssignmentRecord<S> boot_record;    // (T, G, K)
  AssignmentRecord<S> entity_record;  // (T, E, G)
};

// e[i] = mean over frames of ê[t, i].
template <class S>
Tensor<S> pool_entities(const Tensor<S>& entity_tokens) {
  check(entity_tokens.rank() == 3, "pool_entities: (T, E, D) required");
  return mean_axis(entity_tokens, 0);
}

template <class S>
struct LocalEntityEncoder {
  ModelConfig cfg;
  Parameter<S> boot_tokens;    // (G, D)
  Parameter<S> entity_tokens;  // (E, D)
  std::vector<CrossAttentionLayer<S>> boot_layers;
  TagLayer<S> boot_tag;
  std::vector<DstBlock<S>> entity_blocks;   // over [g_entity; s]
  TagLayer<S> entity_tag;
  std::vector<DstBlock<S>> refine_blocks;   // over ê alone

  LocalEntityEncoder() = default;
  LocalEntityEncoder(const ModelConfig& c, Rng& rng)
      : cfg(c),
        boot_tokens(normal_param<S>("local.boot_tokens", {c.boot_groups, c.d_model}, rng)),
        entity_tokens(normal_param<S>("local.entity_tokens", {c.entities, c.d_model}, rng)),
        boot_tag("local.boot_tag", "bootstrap", c.d_model, c.ffn_hidden(), rng,
                 static_cast<S>(c.tag_temperature)),
        entity_tag("local.entity_tag", "entity", c.d_model, c.ffn_hidden(), rng,
                   static_cast<S>(c.tag_temperature)) {
    for (std::int64_t l = 0; l < c.boot_layers; ++l)
      boot_layers.emplace_back("local.boot" + std::to_string(l), c.d_model, c.heads,
                               c.ffn_hidden(), rng);
    for (std::int64_t l = 0; l < c.entity_blocks; ++l)
      entity_blocks.emplace_back("local.ent" + std::to_string(l), c.d_model, c.heads,
                                 c.ffn_hidden(), rng);
    for (std::int64_t l = 0; l < c.entity_refine; ++l)
      refine_blocks.emplace_back("local.ref" + std::to_string(l), c.d_model, c.heads,
                                 c.ffn_hidden(), rng);
  }

  // Layer l of the bootstrap reads global tap l; output is video-level (G, D).
  Tensor<S> bootstrap_forward(const GlobalTaps<S>& taps) const {
    Tensor<S> g = boot_tokens.t;
    for (std::size_t l = 0; l < boot_layers.size(); ++l) {
      const Tensor<S>& z = taps.tap(l);  // (T, K, D)
      Tensor<S> flat = reshape(z, {z.dim(0) * z.dim(1), z.dim(2)});
      g = boot_layers[l](g, flat);
    }
    return g;
  }

  LocalOutputs<S> forward(const GlobalTaps<S>& taps, const TagOptions<S>& opt) const {
    LocalOutputs<S> out;
    Tensor<S> g_boot = bootstrap_forward(taps);

    // Grouping consumes the tap right after the bootstrapped layers.
    auto [segments, boot_rec] =
        boot_tag(g_boot, taps.tap(static_cast<std::size_t>(cfg.boot_layers)), opt);
    out.boot_record = boot_rec;

    Tensor<S> g_ent = entity_tokens.t;
    Tensor<S> s = segments;  // (T, G, D)
    for (const auto& blk : entity_blocks) {
      auto [g2, s2] = blk(g_ent, s);
      g_ent = g2;
      s = s2;
    }

    auto [ehat, ent_rec] = entity_tag(g_ent, s, opt);  // (T, E, D)
    out.entity_record = ent_rec;

    for (const auto& blk : refine_blocks) {
      auto [unused, e2] = blk(Tensor<S>(), ehat);
      ehat = e2;
    }
    out.entity_tokens = ehat;
    out.pooled = pool_entities(ehat);
    return out;
  }

  void collect(ParamRefs<S>& out) {
    out.push_back(&boot_tokens);
    out.push_back(&entity_tokens);
    for (auto& l : boot_layers) l.collect(out);
    boot_tag.collect(out);
    for (auto& b : entity_blocks) b.collect(out);
    entity_tag.collect(out);
    for (auto& b : refine_blocks) b.collect(out);
  }
};

}  // namespace evl
