// Temporal-aware grouping: Gumbel-rescaled similarity over group tokens,
// hard one-hot assignment with straight-through gradients, per-frame merging
// of the assigned tokens.
#pragma once

#include <string>
#include <utility>

#include "evl/nn.hpp"
#include "evl/tensor.hpp"

namespace evl {

// How the assignment matrix enters the merge. Hard is the trained behavior;
// Soft bypasses the straight-through construction so the whole network is
// differentiable for gradient-oracle runs.
enum class AssignMode { kHard, kSoft };

template <class S>
struct TagOptions {
  bool noise = true;            // Gumbel perturbation (training only)
  AssignMode mode = AssignMode::kHard;
  Rng* rng = nullptr;           // required when noise is on
};

template <class S>
struct AssignmentRecord {
  Tensor<S> similarity;  // A: (T, Q, I), softmax-normalized over the Q axis
  Tensor<S> assignment;  // Ã: (T, Q, I), forward-one-hot straight-through
  std::string stage;     // "bootstrap" or "entity"
};

template <class S>
struct TagLayer {
  Parameter<S> w_q, w_i;  // similarity projections, bias-free
  FeedForward<S> post;    // mixing projection on the merged tokens
  std::string stage;
  S temperature = S(1);
  bool with_projection = true;
  static constexpr S kMergeEps = S(1e-6);

  TagLayer() = default;
  TagLayer(const std::string& prefix, std::string stage_tag, std::int64_t d,
           std::int64_t hidden, Rng& rng, S temp)
      : w_q(normal_param<S>(prefix + ".wq", {d, d}, rng)),
        w_i(normal_param<S>(prefix + ".wi", {d, d}, rng)),
        post(prefix + ".post", d, hidden, rng),
        stage(std::move(stage_tag)),
        temperature(temp) {}

  // queries (Q, D) are video-level; inputs (T, I, D).
  std::pair<Tensor<S>, AssignmentRecord<S>> operator()(const Tensor<S>& queries,
                                                       const Tensor<S>& inputs,
                                                       const TagOptions<S>& opt) const {
    check(inputs.rank() == 3, "tag: inputs must be (T, I, D)");
    const std::int64_t t = inputs.dim(0), i = inputs.dim(1), d = inputs.dim(2);
    const std::int64_t q = queries.dim(0);
    check(queries.dim(1) == d, "tag: query width mismatch");

    Tensor<S> qp = matmul(queries, w_q.t);                       // (Q, D)
    Tensor<S> ip = reshape(matmul(reshape(inputs, {t * i, d}), w_i.t), {t, i, d});
    Tensor<S> logits = bmm(tile_leading(qp, t), ip, false, true);  // (T, Q, I)
    if (opt.noise) {
      check(opt.rng != nullptr, "tag: noise requested without rng");
      logits = add(logits, Tensor<S>::gumbel({t, q, i}, *opt.rng));
    }
    if (temperature != S(1)) logits = scale(logits, S(1) / temperature);

    AssignmentRecord<S> rec;
    rec.stage = stage;
    rec.similarity = softmax(logits, 1);  // normalize over groups
    if (opt.mode == AssignMode::kHard) {
      Tensor<S> hard = one_hot_argmax(logits, 1);
      rec.assignment =
          add(hard, sub(rec.similarity, stop_gradient(rec.similarity)));
    } else {
      rec.assignment = rec.similarity;
    }

    Tensor<S> merged = bmm(rec.assignment, inputs);            // (T, Q, D)
    Tensor<S> counts = sum_axis(rec.assignment, 2);            // (T, Q)
    Tensor<S> inv = recip(add_scalar(counts, kMergeEps));
    Tensor<S> grouped = scale_rows(merged, inv);
    Tensor<S> out = add(grouped, tile_leading(queries, t));    // (T, Q, D)
    if (with_projection) out = post(out);
    return {out, rec};
  }

  void collect(ParamRefs<S>& out) {
    out.push_back(&w_q);
    out.push_back(&w_i);
    post.collect(out);
  }
};

}  // namespace evl
