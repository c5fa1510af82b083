// Full dual-encoder assembly: global encoder, local entity encoder,
// entity-aware decoder, and the text encoder, with a single parameter
// registry for optimization and checkpointing.
#pragma once

#include <string>
#include <unordered_set>
#include <vector>

#include "evl/config.hpp"
#include "evl/decoder.hpp"
#include "evl/global_encoder.hpp"
#include "evl/grammar.hpp"
#include "evl/local_encoder.hpp"
#include "evl/tag.hpp"
#include "evl/tensor.hpp"
#include "evl/text_encoder.hpp"

namespace evl {

template <class S>
struct VideoOutputs {
  Tensor<S> video_embedding;          // v, (D), unnormalized
  Tensor<S> entities;                 // e, (E, D), unnormalized
  Tensor<S> entity_tokens;            // ê, (T, E, D)
  AssignmentRecord<S> boot_record;    // (T, G, K)
  AssignmentRecord<S> entity_record;  // (T, E, G)
};

template <class S>
struct Model {
  ModelConfig cfg;
  Vocabulary vocab;
  GlobalEncoder<S> global_enc;
  LocalEntityEncoder<S> local_enc;
  EntityAwareDecoder<S> decoder;
  TextEncoder<S> text_enc;

  static const ModelConfig& validated(const ModelConfig& c) {
    c.validate();
    return c;
  }

  Model(const ModelConfig& c, Vocabulary v, Rng& rng)
      : cfg(validated(c)),
        vocab(std::move(v)),
        global_enc(c, rng),
        local_enc(c, rng),
        decoder(c.decoder_depth, c.d_model, c.heads, c.ffn_hidden(), rng),
        text_enc(c, vocab.size(), rng) {}

  static Model desk_init(std::uint64_t seed) {
    Rng rng(seed);
    return Model(ModelConfig::desk(), build_vocabulary(), rng);
  }

  VideoOutputs<S> video_forward(const Tensor<S>& clip, const TagOptions<S>& opt) const {
    VideoOutputs<S> out;
    GlobalTaps<S> taps = global_enc.forward(clip);
    LocalOutputs<S> local = local_enc.forward(taps, opt);
    const Tensor<S>& zf = taps.last();
    Tensor<S> patches = reshape(zf, {zf.dim(0) * zf.dim(1), zf.dim(2)});
    out.video_embedding = decoder.decode(local.pooled, patches);
    out.entities = local.pooled;
    out.entity_tokens = local.entity_tokens;
    out.boot_record = local.boot_record;
    out.entity_record = local.entity_record;
    return out;
  }

  Tensor<S> encode_text(const std::string& text) const {
    return text_enc(tokenize(text, vocab));
  }

  ParamRefs<S> params() {
    ParamRefs<S> out;
    global_enc.collect(out);
    local_enc.collect(out);
    decoder.collect(out);
    text_enc.collect(out);
    std::unordered_set<std::string> names;
    for (const auto* p : out)
      check(names.insert(p->name).second, "duplicate parameter name " + p->name);
    return out;
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    for (const auto* p : params()) n += p->t.numel();
    return n;
  }
};

}  // namespace evl
