// Evaluation protocols: cosine retrieval with recall@k, five-way multiple
// choice with same-video and cross-video distractors, grounding mIoU, and
// loss-term averages on held-out batches.
#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "evl/grounding.hpp"
#include "evl/model.hpp"
#include "evl/synthworld.hpp"
#include "evl/trainer.hpp"

namespace evl {

struct EvalReport {
  std::string split;
  int pool = 0;
  double recall1 = 0, recall5 = 0;
  double mcq_inter = 0, mcq_intra = 0;
  double grounding = 0;  // mIoU
  double ego_v2t = 0, ego_t2v = 0, nec = 0, vec = 0, proj = 0, total = 0;
};

namespace detail {

template <class S>
TagOptions<S> eval_tag_options() {
  TagOptions<S> o;
  o.noise = false;
  o.mode = AssignMode::kHard;
  return o;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

// Unit video/text embeddings for a list of clips, no gradients.
template <class S>
void embed_split(const Model<S>& model, const Dataset& ds,
                 const std::vector<std::int64_t>& ids,
                 std::vector<std::vector<double>>* v_out,
                 std::vector<std::vector<double>>* t_out) {
  NoGradGuard ng;
  std::map<std::string, std::vector<double>> text_cache;
  for (auto id : ids) {
    const auto& clip = ds.clip(id);
    auto out = model.video_forward(clip_tensor<S>(clip), detail::eval_tag_options<S>());
    Tensor<S> v = l2_normalize(reshape(out.video_embedding, {1, model.cfg.d_model}));
    v_out->emplace_back(v.values().begin(), v.values().end());
    auto it = text_cache.find(clip.narration.text);
    if (it == text_cache.end()) {
      Tensor<S> t = l2_normalize(reshape(model.encode_text(clip.narration.text),
                                         {1, model.cfg.d_model}));
      it = text_cache.emplace(clip.narration.text,
                              std::vector<double>(t.values().begin(), t.values().end()))
               .first;
    }
    t_out->push_back(it->second);
  }
}

// Text-to-video retrieval over sampled candidate pools, plus the two 5-way
// multiple-choice protocols (distractors from the same scene / other scenes).
template <class S>
EvalReport eval_retrieval(const Model<S>& model, const Dataset& ds,
                          const std::string& split_name, int pool_size,
                          std::uint64_t seed) {
  const auto& ids = ds.split(split_name);
  const int n = static_cast<int>(ids.size());
  check(pool_size >= 1 && pool_size <= n, "eval_retrieval: pool larger than split");

  std::vector<std::vector<double>> v, t;
  embed_split(model, ds, ids, &v, &t);

  Rng rng(Rng(seed).fork(11).seed());
  EvalReport rep;
  rep.split = split_name;
  rep.pool = pool_size;

  int hit1 = 0, hit5 = 0;
  for (int i = 0; i < n; ++i) {
    // candidate pool: the query's own clip plus pool_size-1 sampled others
    std::vector<int> cands = {i};
    std::vector<bool> used(static_cast<std::size_t>(n), false);
    used[static_cast<std::size_t>(i)] = true;
    while (static_cast<int>(cands.size()) < pool_size) {
      int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
      if (used[static_cast<std::size_t>(j)]) continue;
      used[static_cast<std::size_t>(j)] = true;
      cands.push_back(j);
    }
    const double own = detail::dot(t[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(i)]);
    int rank = 1;
    for (int c : cands)
      if (c != i && detail::dot(t[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(c)]) > own) ++rank;
    hit1 += rank == 1 ? 1 : 0;
    hit5 += rank <= 5 ? 1 : 0;
  }
  rep.recall1 = static_cast<double>(hit1) / n;
  rep.recall5 = static_cast<double>(hit5) / n;

  // 5-way multiple choice
  auto mcq = [&](bool intra) {
    int hits = 0;
    for (int i = 0; i < n; ++i) {
      const auto& query = ds.clip(ids[static_cast<std::size_t>(i)]);
      std::vector<int> pool_same, pool_other;
      for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        const auto& c = ds.clip(ids[static_cast<std::size_t>(j)]);
        if (c.narration.text == query.narration.text) continue;  // ambiguous
        (c.scene_id == query.scene_id ? pool_same : pool_other).push_back(j);
      }
      auto draw = [&rng](std::vector<int>& from, int count, std::vector<int>* into) {
        for (std::size_t k = from.size(); k > 1; --k)
          std::swap(from[k - 1], from[rng.below(k)]);
        for (int k = 0; k < count && k < static_cast<int>(from.size()); ++k)
          into->push_back(from[static_cast<std::size_t>(k)]);
      };
      std::vector<int> cands;
      if (intra) {
        draw(pool_same, 4, &cands);
        if (cands.size() < 4) draw(pool_other, 4 - static_cast<int>(cands.size()), &cands);
      } else {
        draw(pool_other, 4, &cands);
      }
      int best = i;
      double best_sim = detail::dot(t[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(i)]);
      for (int c : cands) {
        const double s = detail::dot(t[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(c)]);
        if (s > best_sim) {
          best_sim = s;
          best = c;
        }
      }
      hits += best == i ? 1 : 0;
    }
    return static_cast<double>(hits) / n;
  };
  rep.mcq_intra = mcq(true);
  rep.mcq_inter = mcq(false);

  // loss-term averages on a few held-out batches, no grouping noise
  {
    NoGradGuard ng;
    Rng brng(Rng(seed).fork(23).seed());
    const int bs = std::min(16, n);
    const int rounds = std::min(4, n / std::max(1, bs));
    double sums[6] = {0, 0, 0, 0, 0, 0};
    for (int r = 0; r < rounds; ++r) {
      Batch b = make_batch(ds, split_name, bs, brng);
      LossReport<S> lr = batch_loss<S>(model, ds, b, S(kDefaultTau), S(0.5), S(0.5),
                                       S(1.0), detail::eval_tag_options<S>());
      sums[0] += lr.ego_v2t.item();
      sums[1] += lr.ego_t2v.item();
      sums[2] += lr.nec.item();
      sums[3] += lr.vec.item();
      sums[4] += lr.proj.item();
      sums[5] += lr.total.item();
    }
    if (rounds > 0) {
      rep.ego_v2t = sums[0] / rounds;
      rep.ego_t2v = sums[1] / rounds;
      rep.nec = sums[2] / rounds;
      rep.vec = sums[3] / rounds;
      rep.proj = sums[4] / rounds;
      rep.total = sums[5] / rounds;
    }
  }
  return rep;
}

// Predicted entity masks for one clip: saliency maps, pixel upsampling,
// binarization at 0.5. Returns one T*H*W mask per entity slot.
template <class S>
std::vector<std::vector<std::uint8_t>> predict_entity_masks(const Model<S>& model,
                                                            const AnnotatedClip& clip) {
  NoGradGuard ng;
  auto out = model.video_forward(clip_tensor<S>(clip), detail::eval_tag_options<S>());
  Tensor<S> mhat = saliency_maps(out.boot_record, out.entity_record);
  Tensor<S> pix = upsample_to_pixels(mhat, model.cfg.image, model.cfg.image,
                                     model.cfg.patch);  // (E,T,H,W)
  std::vector<std::vector<std::uint8_t>> masks;
  for (std::int64_t e = 0; e < model.cfg.entities; ++e)
    masks.push_back(binarize(slice(pix, 0, e, 1)));
  return masks;
}

// Hungarian-matched mean IoU between predicted and ground-truth entities.
template <class S>
EvalReport eval_grounding(const Model<S>& model, const Dataset& ds,
                          const std::string& split_name) {
  const auto& ids = ds.split(split_name);
  EvalReport rep;
  rep.split = split_name;
  double total = 0;
  for (auto id : ids) {
    const auto& clip = ds.clip(id);
    auto pred = predict_entity_masks(model, clip);
    std::vector<std::vector<std::uint8_t>> gt;
    for (const auto& e : clip.entities) gt.push_back(e.mask);
    total += grounding_miou(pred, gt);
  }
  rep.grounding = ids.empty() ? 0.0 : total / static_cast<double>(ids.size());
  return rep;
}

}  // namespace evl
