// Training objectives: the noun/verb-aware contrastive loss over the expanded
// batch, noun-entity and verb-entities contrastive terms, the box projection
// loss, and their weighted total.
#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "evl/hungarian.hpp"
#include "evl/tensor.hpp"

namespace evl {

inline constexpr double kDefaultTau = 0.07;

// ---------------------------------------------------------------------------
// Positive-set batch formation

struct SampleAnnotation {
  std::vector<std::string> nouns;
  std::vector<std::string> verbs;
  std::int64_t clip_id = -1;
  std::int64_t adjacent_id = -1;
};

inline bool shares_element(const std::vector<std::string>& a,
                           const std::vector<std::string>& b) {
  for (const auto& x : a)
    for (const auto& y : b)
      if (x == y) return true;
  return false;
}

// j is a positive of i iff they share at least one noun AND at least one
// verb; every sample is its own positive.
inline std::vector<std::vector<int>> build_positive_sets(
    const std::vector<SampleAnnotation>& batch) {
  const int n = static_cast<int>(batch.size());
  std::vector<std::vector<int>> positives(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j || (shares_element(batch[static_cast<std::size_t>(i)].nouns,
                                    batch[static_cast<std::size_t>(j)].nouns) &&
                     shares_element(batch[static_cast<std::size_t>(i)].verbs,
                                    batch[static_cast<std::size_t>(j)].verbs)))
        positives[static_cast<std::size_t>(i)].push_back(j);
    }
  }
  return positives;
}

// ---------------------------------------------------------------------------
// Video-narration contrastive loss (expanded batch)

namespace detail {

template <class S>
void check_unit_rows(const Tensor<S>& x, const char* what) {
  const std::int64_t d = x.dim(x.rank() - 1);
  const std::int64_t rows = x.numel() / d;
  for (std::int64_t r = 0; r < rows; ++r) {
    S n2 = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const S v = x.values()[static_cast<std::size_t>(r * d + j)];
      n2 += v * v;
    }
    if (std::abs(std::sqrt(static_cast<double>(n2)) - 1.0) > 1e-5)
      throw ShapeError(std::string(what) + ": embeddings must be unit-normalized");
  }
}

// logsumexp over the positive subset of each row via an additive mask.
template <class S>
Tensor<S> masked_lse(const Tensor<S>& logits,
                     const std::vector<std::vector<int>>& sets) {
  const std::int64_t n = logits.dim(0), m = logits.dim(1);
  Tensor<S> mask = Tensor<S>::full({n, m}, S(-1e9));
  for (std::int64_t i = 0; i < n; ++i)
    for (int j : sets[static_cast<std::size_t>(i)])
      mask.values()[static_cast<std::size_t>(i * m + j)] = S(0);
  return logsumexp(add(logits, mask), 1);
}

}  // namespace detail

// Layout: rows 0..B-1 are base samples, row B+i is the hard negative drawn
// from the clip adjacent to sample i. Positive sets index the full expanded
// batch. Returns {video-to-text, text-to-video}.
template <class S>
std::pair<Tensor<S>, Tensor<S>> egonce(const Tensor<S>& v_hat, const Tensor<S>& t_hat,
                                       const std::vector<std::vector<int>>& positives,
                                       S tau) {
  check(v_hat.rank() == 2 && t_hat.rank() == 2 && v_hat.shape() == t_hat.shape(),
        "egonce: embedding matrices must match");
  check(tau > S(0), "egonce: temperature must be positive");
  const std::int64_t n = v_hat.dim(0);
  check(static_cast<std::int64_t>(positives.size()) == n, "egonce: positive set count");
  for (std::int64_t i = 0; i < n; ++i) {
    bool self = false;
    for (int j : positives[static_cast<std::size_t>(i)]) self = self || j == i;
    check(self, "egonce: sample must be its own positive");
  }
  detail::check_unit_rows(v_hat, "egonce(v)");
  detail::check_unit_rows(t_hat, "egonce(t)");

  Tensor<S> sim_vt = scale(matmul(v_hat, t_hat, false, true), S(1) / tau);
  Tensor<S> v2t = mean_all(sub(logsumexp(sim_vt, 1), detail::masked_lse(sim_vt, positives)));

  Tensor<S> sim_tv = scale(matmul(t_hat, v_hat, false, true), S(1) / tau);
  Tensor<S> t2v = mean_all(sub(logsumexp(sim_tv, 1), detail::masked_lse(sim_tv, positives)));
  return {v2t, t2v};
}

// ---------------------------------------------------------------------------
// Noun-entity contrastive loss

// Match nouns to entities by cosine similarity (injective, optimal), then
// contrast each matched entity against the taxonomy dictionary. Returns the
// per-noun sum and the number of matched nouns.
template <class S>
std::pair<Tensor<S>, std::int64_t> nec_loss_sum(const Tensor<S>& entities,
                                                const Tensor<S>& noun_embeds,
                                                const Tensor<S>& taxonomy_embeds,
                                                S tau) {
  const std::int64_t e = entities.dim(0);
  std::int64_t n = noun_embeds.dim(0);
  if (n == 0) return {Tensor<S>::scalar(S(0)), 0};

  Tensor<S> ent_hat = l2_normalize(entities);
  Tensor<S> noun_hat = l2_normalize(noun_embeds);
  Tensor<S> tax_hat = l2_normalize(taxonomy_embeds);

  Tensor<S> sim = matmul(noun_hat, ent_hat, false, true);  // (N, E)
  std::vector<double> scores(sim.values().begin(), sim.values().end());

  std::vector<int> rows_kept;
  if (n > e) {
    // More nouns than entity slots: drop the weakest surplus nouns.
    std::fprintf(stderr, "nec_loss: %lld nouns exceed %lld entities; dropping surplus\n",
                 static_cast<long long>(n), static_cast<long long>(e));
    std::vector<std::pair<double, int>> ranked;
    for (std::int64_t i = 0; i < n; ++i) {
      double best = -1e300;
      for (std::int64_t j = 0; j < e; ++j)
        best = std::max(best, scores[static_cast<std::size_t>(i * e + j)]);
      ranked.emplace_back(-best, static_cast<int>(i));
    }
    std::sort(ranked.begin(), ranked.end());
    for (std::int64_t i = 0; i < e; ++i) rows_kept.push_back(ranked[static_cast<std::size_t>(i)].second);
    std::sort(rows_kept.begin(), rows_kept.end());
  } else {
    for (std::int64_t i = 0; i < n; ++i) rows_kept.push_back(static_cast<int>(i));
  }

  std::vector<double> kept_scores;
  for (int r : rows_kept)
    for (std::int64_t j = 0; j < e; ++j)
      kept_scores.push_back(scores[static_cast<std::size_t>(r * e + j)]);
  Assignment match = hungarian_match(kept_scores, static_cast<int>(rows_kept.size()),
                                     static_cast<int>(e), true);

  Tensor<S> total = Tensor<S>::scalar(S(0));
  for (const auto& [ri, ci] : match.pairs) {
    const int noun_row = rows_kept[static_cast<std::size_t>(ri)];
    Tensor<S> ent = slice(ent_hat, 0, ci, 1);                    // (1, D)
    Tensor<S> noun = slice(noun_hat, 0, noun_row, 1);            // (1, D)
    Tensor<S> pos = scale(sum_all(mul(ent, noun)), S(1) / tau);  // scalar
    Tensor<S> logits = scale(matmul(ent, tax_hat, false, true), S(1) / tau);  // (1, |D|)
    total = add(total, sub(reshape(logsumexp(logits, 1), {1}), pos));
  }
  return {total, static_cast<std::int64_t>(match.pairs.size())};
}

template <class S>
Tensor<S> nec_loss(const Tensor<S>& entities, const Tensor<S>& noun_embeds,
                   const Tensor<S>& taxonomy_embeds, S tau) {
  auto [total, n] = nec_loss_sum(entities, noun_embeds, taxonomy_embeds, tau);
  return n > 0 ? scale(total, S(1) / static_cast<S>(n)) : total;
}

// ---------------------------------------------------------------------------
// Verb-entities contrastive loss

// Softmax-normalized relevance of each entity to a verb phrase (cosine
// logits, temperature 1), then the relevance-weighted entity average.
template <class S>
Tensor<S> vec_entity_average(const Tensor<S>& entities, const Tensor<S>& verb_embeds) {
  Tensor<S> ent_hat = l2_normalize(entities);
  Tensor<S> verb_hat = l2_normalize(verb_embeds);
  Tensor<S> weights = softmax(matmul(verb_hat, ent_hat, false, true), 1);  // (Nv, E)
  return matmul(weights, entities);                                        // (Nv, D)
}

// Per-phrase sum of -log softmax of the aligned pair against every phrase in
// the batch context. own_range selects this clip's phrases inside
// all_phrase_embeds.
template <class S>
std::pair<Tensor<S>, std::int64_t> vec_loss_sum(const Tensor<S>& entities,
                                                const Tensor<S>& verb_embeds,
                                                const Tensor<S>& all_phrase_embeds,
                                                S tau) {
  const std::int64_t nv = verb_embeds.numel() == 0 ? 0 : verb_embeds.dim(0);
  if (nv == 0) return {Tensor<S>::scalar(S(0)), 0};

  Tensor<S> e_avg = l2_normalize(vec_entity_average(entities, verb_embeds));  // (Nv, D)
  Tensor<S> own_hat = l2_normalize(verb_embeds);
  Tensor<S> all_hat = l2_normalize(all_phrase_embeds);

  Tensor<S> pos = scale(sum_axis(mul(e_avg, own_hat), 1), S(1) / tau);       // (Nv)
  Tensor<S> logits = scale(matmul(e_avg, all_hat, false, true), S(1) / tau);  // (Nv, M)
  Tensor<S> lse = logsumexp(logits, 1);                                       // (Nv)
  return {sum_all(sub(lse, pos)), nv};
}

template <class S>
Tensor<S> vec_loss(const Tensor<S>& entities, const Tensor<S>& verb_embeds,
                   const Tensor<S>& all_phrase_embeds, S tau) {
  auto [total, n] = vec_loss_sum(entities, verb_embeds, all_phrase_embeds, tau);
  return n > 0 ? scale(total, S(1) / static_cast<S>(n)) : total;
}

// ---------------------------------------------------------------------------
// Dice and box projection losses

template <class S>
Tensor<S> dice_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  check(pred.shape() == target.shape(), "dice_loss: shape mismatch");
  const S eps = S(1e-6);
  Tensor<S> inter = scale(sum_all(mul(pred, target)), S(2));
  Tensor<S> denom = add(sum_all(pred), sum_all(target));
  return sub(Tensor<S>::scalar(S(1)),
             mul(add_scalar(inter, eps), recip(add_scalar(denom, eps))));
}

struct PixelBox {
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;  // inclusive pixel bounds
  bool empty() const { return x1 < x0 || y1 < y0; }
};

template <class S>
Tensor<S> rasterize_box(const PixelBox& b, std::int64_t h, std::int64_t w) {
  Tensor<S> m = Tensor<S>::zeros({h, w});
  if (!b.empty())
    for (int y = std::max(b.y0, 0); y <= std::min<int>(b.y1, static_cast<int>(h) - 1); ++y)
      for (int x = std::max(b.x0, 0); x <= std::min<int>(b.x1, static_cast<int>(w) - 1); ++x)
        m.values()[static_cast<std::size_t>(y * w + x)] = S(1);
  return m;
}

namespace detail {

inline double binary_iou(const std::vector<bool>& a, const std::vector<bool>& b) {
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    uni += (a[i] || b[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace detail

// Per-frame projection loss: boxes are matched to the masks of highest IoU
// (predictions binarized at 0.5), then vertical and horizontal max-profiles
// of each matched pair are compared with dice.
template <class S>
Tensor<S> projection_loss(const Tensor<S>& masks, const std::vector<PixelBox>& boxes) {
  check(masks.rank() == 3, "projection_loss: masks must be (E, H, W)");
  const std::int64_t e = masks.dim(0), h = masks.dim(1), w = masks.dim(2);
  const std::int64_t nb = static_cast<std::int64_t>(boxes.size());
  if (nb == 0) return Tensor<S>::scalar(S(0));

  std::vector<Tensor<S>> box_masks;
  for (const auto& b : boxes) box_masks.push_back(rasterize_box<S>(b, h, w));

  std::vector<std::vector<bool>> pred_bin(static_cast<std::size_t>(e));
  for (std::int64_t i = 0; i < e; ++i) {
    auto& bin = pred_bin[static_cast<std::size_t>(i)];
    bin.resize(static_cast<std::size_t>(h * w));
    for (std::int64_t px = 0; px < h * w; ++px)
      bin[static_cast<std::size_t>(px)] =
          masks.values()[static_cast<std::size_t>(i * h * w + px)] >= S(0.5);
  }
  std::vector<double> iou(static_cast<std::size_t>(nb * e));
  for (std::int64_t j = 0; j < nb; ++j) {
    std::vector<bool> bb(static_cast<std::size_t>(h * w));
    for (std::int64_t px = 0; px < h * w; ++px)
      bb[static_cast<std::size_t>(px)] = box_masks[static_cast<std::size_t>(j)].values()[static_cast<std::size_t>(px)] > S(0.5);
    for (std::int64_t i = 0; i < e; ++i)
      iou[static_cast<std::size_t>(j * e + i)] = detail::binary_iou(bb, pred_bin[static_cast<std::size_t>(i)]);
  }
  Assignment match = hungarian_match(iou, static_cast<int>(nb), static_cast<int>(e), true);

  Tensor<S> total = Tensor<S>::scalar(S(0));
  for (const auto& [bj, mi] : match.pairs) {
    Tensor<S> m = reshape(slice(masks, 0, mi, 1), {h, w});
    const Tensor<S>& bm = box_masks[static_cast<std::size_t>(bj)];
    Tensor<S> loss_y = dice_loss(max_axis(m, 0), max_axis(bm, 0));  // width-W profile
    Tensor<S> loss_x = dice_loss(max_axis(m, 1), max_axis(bm, 1));  // height-H profile
    total = add(total, add(loss_y, loss_x));
  }
  return scale(total, S(1) / static_cast<S>(nb));
}

// ---------------------------------------------------------------------------
// Weighted total

template <class S>
struct LossReport {
  Tensor<S> ego_v2t, ego_t2v, nec, vec, proj;
  Tensor<S> total;
  S lambda1 = S(0.5), lambda2 = S(0.5), lambda3 = S(1.0);

  bool finite() const {
    for (const Tensor<S>* t : {&ego_v2t, &ego_t2v, &nec, &vec, &proj, &total})
      if (!std::isfinite(static_cast<double>(t->item()))) return false;
    return true;
  }
};

template <class S>
LossReport<S> total_loss(Tensor<S> ego_v2t, Tensor<S> ego_t2v, Tensor<S> nec,
                         Tensor<S> vec, Tensor<S> proj, S lambda1 = S(0.5),
                         S lambda2 = S(0.5), S lambda3 = S(1.0)) {
  LossReport<S> r;
  r.ego_v2t = std::move(ego_v2t);
  r.ego_t2v = std::move(ego_t2v);
  r.nec = std::move(nec);
  r.vec = std::move(vec);
  r.proj = std::move(proj);
  r.lambda1 = lambda1;
  r.lambda2 = lambda2;
  r.lambda3 = lambda3;
  Tensor<S> t = add(r.ego_v2t, r.ego_t2v);
  t = add(t, scale(r.nec, lambda1));
  t = add(t, scale(r.vec, lambda2));
  r.total = add(t, scale(r.proj, lambda3));
  return r;
}

}  // namespace evl
