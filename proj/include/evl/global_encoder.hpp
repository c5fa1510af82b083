// Global video encoder: patchify into tokens, then a stack of divided
// space-time blocks with one learnable video token. Exposes per-layer patch
// token taps for the bootstrap stage.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "evl/config.hpp"
#include "evl/nn.hpp"
#include "evl/tensor.hpp"

namespace evl {

template <class S>
struct GlobalTaps {
  std::vector<Tensor<S>> z;  // layer l -> (T, K, D), l = 0..L
  Tensor<S> video_token;     // final c, (1, D)

  const Tensor<S>& tap(std::size_t layer) const {
    check(layer < z.size(), "global tap " + std::to_string(layer) + " missing");
    return z[layer];
  }
  const Tensor<S>& last() const { return z.back(); }
};

template <class S>
struct GlobalEncoder {
  ModelConfig cfg;
  Linear<S> patch_embed;
  Parameter<S> pos_spatial;   // (K, D)
  Parameter<S> pos_temporal;  // (T, D)
  Parameter<S> video_token;   // (1, D)
  std::vector<DstBlock<S>> blocks;

  GlobalEncoder() = default;
  GlobalEncoder(const ModelConfig& c, Rng& rng)
      : cfg(c),
        patch_embed("global.patch", c.patch_dim(), c.d_model, rng),
        pos_spatial(normal_param<S>("global.pos_spatial", {c.patches(), c.d_model}, rng)),
        pos_temporal(normal_param<S>("global.pos_temporal", {c.frames, c.d_model}, rng)),
        video_token(normal_param<S>("global.video_token", {1, c.d_model}, rng)) {
    blocks.reserve(static_cast<std::size_t>(c.global_layers));
    for (std::int64_t l = 0; l < c.global_layers; ++l)
      blocks.emplace_back("global.blk" + std::to_string(l), c.d_model, c.heads,
                          c.ffn_hidden(), rng);
  }

  // clip: (T, 3, H, W) in [0,1] -> patch vectors (T*K, 3*P*P), plain data.
  Tensor<S> flatten_patches(const Tensor<S>& clip) const {
    const std::int64_t t = clip.dim(0), h = clip.dim(2), w = clip.dim(3);
    check(clip.dim(1) == 3, "clip must have 3 channels");
    check(h == cfg.image && w == cfg.image,
          "clip resolution " + std::to_string(h) + "x" + std::to_string(w) +
              " does not match configured " + std::to_string(cfg.image));
    if (h % cfg.patch != 0 || w % cfg.patch != 0)
      throw ConfigError("resolution not divisible by patch size");
    const std::int64_t g = cfg.grid(), p = cfg.patch;
    Tensor<S> out = Tensor<S>::zeros({t * g * g, 3 * p * p});
    const auto& src = clip.values();
    auto& dst = out.values();
    std::int64_t row = 0;
    for (std::int64_t ti = 0; ti < t; ++ti)
      for (std::int64_t gy = 0; gy < g; ++gy)
        for (std::int64_t gx = 0; gx < g; ++gx, ++row) {
          std::int64_t col = 0;
          for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t py = 0; py < p; ++py)
              for (std::int64_t px = 0; px < p; ++px, ++col)
                dst[static_cast<std::size_t>(row * 3 * p * p + col)] =
                    src[static_cast<std::size_t>(((ti * 3 + c) * h + gy * p + py) * w +
                                                 gx * p + px)];
        }
    return out;
  }

  // -> (T, K, D) with spatial + temporal position embeddings added.
  Tensor<S> patchify(const Tensor<S>& clip) const {
    const std::int64_t t = clip.dim(0);
    Tensor<S> tokens = patch_embed(flatten_patches(clip));          // (T*K, D)
    Tensor<S> z = reshape(tokens, {t, cfg.patches(), cfg.d_model});
    z = add(z, tile_leading(pos_spatial.t, t));                     // (T, K, D)
    Tensor<S> pt = permute(tile_leading(pos_temporal.t, cfg.patches()), {1, 0, 2});
    return add(z, pt);
  }

  GlobalTaps<S> forward(const Tensor<S>& clip) const {
    GlobalTaps<S> taps;
    Tensor<S> z = patchify(clip);
    Tensor<S> c = video_token.t;
    taps.z.push_back(z);
    for (const auto& blk : blocks) {
      auto [c2, z2] = blk(c, z);
      c = c2;
      z = z2;
      taps.z.push_back(z);
    }
    taps.video_token = c;
    return taps;
  }

  void collect(ParamRefs<S>& out) {
    patch_embed.collect(out);
    out.push_back(&pos_spatial);
    out.push_back(&pos_temporal);
    out.push_back(&video_token);
    for (auto& b : blocks) b.collect(out);
  }
};

}  // namespace evl
