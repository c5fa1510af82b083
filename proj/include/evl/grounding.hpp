// Saliency maps from the two grouping stages' soft similarity arrays, their
// pixel-level form, and grounding scores / query answering built on them.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "evl/hungarian.hpp"
#include "evl/losses.hpp"
#include "evl/tag.hpp"
#include "evl/tensor.hpp"

namespace evl {

// M[t,k,e] = sum_g boot.A[t,g,k] * entity.A[t,e,g], then softmax over the
// patch axis. Soft similarities feed this, not the hard assignments.
template <class S>
Tensor<S> saliency_maps(const AssignmentRecord<S>& boot, const AssignmentRecord<S>& entity) {
  check(boot.stage == "bootstrap" && entity.stage == "entity",
        "saliency_maps: records from wrong grouping stages");
  const Tensor<S>& ab = boot.similarity;    // (T, G, K)
  const Tensor<S>& ae = entity.similarity;  // (T, E, G)
  check(ab.rank() == 3 && ae.rank() == 3 && ab.dim(0) == ae.dim(0) &&
            ab.dim(1) == ae.dim(2),
        "saliency_maps: record shapes do not compose");
  Tensor<S> m = bmm(permute(ab, {0, 2, 1}), permute(ae, {0, 2, 1}));  // (T, K, E)
  return softmax(m, 1);
}

// Expand patch scores to pixels (nearest neighbor), then min-max rescale each
// frame of each entity map to [0, 1]. Output: (E, T, H, W).
template <class S>
Tensor<S> upsample_to_pixels(const Tensor<S>& mhat, std::int64_t h, std::int64_t w,
                             std::int64_t p) {
  check(mhat.rank() == 3, "upsample_to_pixels: (T, K, E) required");
  const std::int64_t t = mhat.dim(0), k = mhat.dim(1), e = mhat.dim(2);
  const std::int64_t gh = h / p, gw = w / p;
  check(gh * p == h && gw * p == w && gh * gw == k,
        "upsample_to_pixels: K != (H/P)*(W/P)");
  const S eps = S(1e-6);

  Tensor<S> per_entity = permute(mhat, {2, 0, 1});  // (E, T, K)
  std::vector<Tensor<S>> maps;
  for (std::int64_t i = 0; i < e; ++i) {
    Tensor<S> grid = reshape(slice(per_entity, 0, i, 1), {t, gh, gw});
    Tensor<S> px = reshape(upsample_nearest(grid, p), {t, h * w});
    Tensor<S> mn = min_axis(px, 1);  // (T)
    Tensor<S> mx = max_axis(px, 1);
    Tensor<S> floor = scale_rows(Tensor<S>::full({t, h * w}, S(1)), mn);
    Tensor<S> shifted = sub(px, floor);
    Tensor<S> inv = recip(add_scalar(sub(mx, mn), eps));
    maps.push_back(reshape(scale_rows(shifted, inv), {1, t, h, w}));
  }
  return concat(maps, 0);
}

// Elementwise threshold; plain values, no gradient.
template <class S>
std::vector<std::uint8_t> binarize(const Tensor<S>& mask, double threshold = 0.5) {
  std::vector<std::uint8_t> out(mask.values().size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<double>(mask.values()[i]) >= threshold ? 1 : 0;
  return out;
}

// Mean IoU over aligned mask pairs; both-empty pairs score 1.
inline double miou(const std::vector<std::vector<std::uint8_t>>& pred,
                   const std::vector<std::vector<std::uint8_t>>& gt) {
  if (pred.size() != gt.size())
    throw ShapeError("miou: pair count mismatch");
  if (pred.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].size() != gt[i].size()) throw ShapeError("miou: mask shape mismatch");
    std::int64_t inter = 0, uni = 0;
    for (std::size_t px = 0; px < pred[i].size(); ++px) {
      const bool a = pred[i][px] != 0, b = gt[i][px] != 0;
      inter += (a && b) ? 1 : 0;
      uni += (a || b) ? 1 : 0;
    }
    total += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  }
  return total / static_cast<double>(pred.size());
}

// IoU-optimal pairing of predicted entity maps against ground-truth masks;
// returns mean IoU over the matched ground-truth entities.
inline double grounding_miou(const std::vector<std::vector<std::uint8_t>>& pred_masks,
                             const std::vector<std::vector<std::uint8_t>>& gt_masks) {
  if (gt_masks.empty()) return 1.0;
  if (pred_masks.empty()) return 0.0;
  const int rows = static_cast<int>(gt_masks.size());
  const int cols = static_cast<int>(pred_masks.size());
  std::vector<double> iou(static_cast<std::size_t>(rows * cols), 0.0);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      std::int64_t inter = 0, uni = 0;
      for (std::size_t px = 0; px < gt_masks[static_cast<std::size_t>(i)].size(); ++px) {
        const bool a = gt_masks[static_cast<std::size_t>(i)][px] != 0;
        const bool b = pred_masks[static_cast<std::size_t>(j)][px] != 0;
        inter += (a && b) ? 1 : 0;
        uni += (a || b) ? 1 : 0;
      }
      iou[static_cast<std::size_t>(i * cols + j)] =
          uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    }
  Assignment match = hungarian_match(iou, rows, cols, true);
  std::vector<std::vector<std::uint8_t>> p2, g2;
  for (const auto& [gi, pj] : match.pairs) {
    g2.push_back(gt_masks[static_cast<std::size_t>(gi)]);
    p2.push_back(pred_masks[static_cast<std::size_t>(pj)]);
  }
  return miou(p2, g2);
}

// ---------------------------------------------------------------------------
// Free-form query grounding

enum class QueryType { kNoun, kVerb };

template <class S>
struct GroundingResult {
  Tensor<S> mask;      // (T, H, W) in [0, 1]
  std::int64_t entity = 0;  // selected (noun) or dominant (verb) entity slot
};

// pixel_masks: (E, T, H, W) from upsample_to_pixels; entities: (E, D) pooled
// embeddings; query_embed: (D).
template <class S>
GroundingResult<S> ground_query(const Tensor<S>& pixel_masks, const Tensor<S>& entities,
                                const Tensor<S>& query_embed, QueryType type) {
  check(pixel_masks.rank() == 4, "ground_query: pixel masks must be (E,T,H,W)");
  const std::int64_t e = pixel_masks.dim(0), t = pixel_masks.dim(1);
  const std::int64_t h = pixel_masks.dim(2), w = pixel_masks.dim(3);

  Tensor<S> ent_hat = l2_normalize(entities);
  Tensor<S> q_hat = l2_normalize(reshape(query_embed, {1, query_embed.numel()}));
  Tensor<S> sims = matmul(q_hat, ent_hat, false, true);  // (1, E)

  GroundingResult<S> out;
  if (type == QueryType::kNoun) {
    std::int64_t best = 0;
    for (std::int64_t i = 1; i < e; ++i)
      if (sims.values()[static_cast<std::size_t>(i)] >
          sims.values()[static_cast<std::size_t>(best)])
        best = i;
    out.entity = best;
    out.mask = reshape(slice(pixel_masks, 0, best, 1), {t, h, w});
  } else {
    Tensor<S> weights = softmax(sims, 1);  // (1, E), the many-to-one weights
    Tensor<S> flat = reshape(pixel_masks, {e, t * h * w});
    Tensor<S> blended = matmul(weights, flat);  // (1, T*H*W)
    // per-frame rescale of the blend back to [0, 1]
    Tensor<S> frames = reshape(blended, {t, h * w});
    Tensor<S> mn = min_axis(frames, 1);
    Tensor<S> mx = max_axis(frames, 1);
    Tensor<S> floor = scale_rows(Tensor<S>::full({t, h * w}, S(1)), mn);
    Tensor<S> inv = recip(add_scalar(sub(mx, mn), S(1e-6)));
    out.mask = reshape(scale_rows(sub(frames, floor), inv), {t, h, w});
    std::int64_t best = 0;
    for (std::int64_t i = 1; i < e; ++i)
      if (weights.values()[static_cast<std::size_t>(i)] >
          weights.values()[static_cast<std::size_t>(best)])
        best = i;
    out.entity = best;
  }
  return out;
}

}  // namespace evl
