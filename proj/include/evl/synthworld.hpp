// Deterministic moving-shapes world. A scene is a chain of clips that share
// entities and continuous motion state; every entity re-rolls its motion at
// each clip boundary, so adjacent clips show the same things doing different
// things. Masks are exact rasterizations and boxes are their tight pixel
// rectangles.
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "evl/grammar.hpp"
#include "evl/losses.hpp"
#include "evl/random.hpp"
#include "evl/tensor.hpp"

#include "json.hpp"

namespace evl {

struct DatasetError : std::runtime_error {
  explicit DatasetError(const std::string& msg) : std::runtime_error(msg) {}
};

struct WorldConfig {
  std::int64_t image = 64;
  std::int64_t frames = 4;
  int min_entities = 1;
  int max_entities = 3;
  int segments = 8;  // clips per scene
  int scenes_train = 64;
  int scenes_val = 16;
  int scenes_test = 16;
};

struct EntityGroundTruth {
  std::string noun;
  MotionKind motion = MotionKind::kStay;
  std::string motion_phrase;            // empty for stationary entities
  std::vector<std::uint8_t> mask;       // T*H*W, {0,1}
  std::vector<PixelBox> boxes;          // per frame, tight around the mask
};

struct AnnotatedClip {
  std::int64_t id = -1;
  std::int64_t scene_id = -1;
  int segment = 0;
  std::int64_t adjacent_id = -1;
  std::int64_t frames_t = 0, height = 0, width = 0;
  std::vector<std::uint8_t> frames;  // T*3*H*W
  Narration narration;
  std::vector<EntityGroundTruth> entities;
};

// ---------------------------------------------------------------------------
// Geometry

namespace worldgen {

struct EntityState {
  ColorKind color = ColorKind::kRed;
  ShapeKind shape = ShapeKind::kCircle;
  double cx = 0, cy = 0, size = 0;
};

inline double circumradius(ShapeKind shape, double size) {
  switch (shape) {
    case ShapeKind::kCircle: return size;
    case ShapeKind::kSquare: return size * 1.4142135623730951;
    case ShapeKind::kTriangle: return size;
  }
  return size;
}

inline bool covers(const EntityState& e, double px, double py) {
  const double dx = px - e.cx, dy = py - e.cy;
  switch (e.shape) {
    case ShapeKind::kCircle:
      return dx * dx + dy * dy <= e.size * e.size;
    case ShapeKind::kSquare:
      return std::abs(dx) <= e.size && std::abs(dy) <= e.size;
    case ShapeKind::kTriangle: {
      // equilateral, apex up, vertices on the circumcircle of radius size
      const double ax = 0.0, ay = -e.size;
      const double bx = -0.8660254037844386 * e.size, by = 0.5 * e.size;
      const double cx2 = 0.8660254037844386 * e.size, cy2 = 0.5 * e.size;
      auto side = [&](double x1, double y1, double x2, double y2) {
        return (x2 - x1) * (dy - y1) - (y2 - y1) * (dx - x1);
      };
      const double s1 = side(ax, ay, bx, by);
      const double s2 = side(bx, by, cx2, cy2);
      const double s3 = side(cx2, cy2, ax, ay);
      return (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
    }
  }
  return false;
}

struct SizeRange {
  double lo, hi, min_cap, max_cap;
};

inline SizeRange size_range(ShapeKind s) {
  switch (s) {
    case ShapeKind::kCircle: return {5.5, 9.0, 4.0, 11.0};
    case ShapeKind::kSquare: return {4.5, 7.5, 3.5, 9.0};
    case ShapeKind::kTriangle: return {6.5, 10.0, 5.0, 12.0};
  }
  return {5.0, 8.0, 4.0, 10.0};
}

inline constexpr double kSlideSpeed = 2.5;
inline constexpr double kGrowRate = 0.7;
inline constexpr double kClearance = 1.5;

inline EntityState step(EntityState e, MotionKind m) {
  switch (m) {
    case MotionKind::kSlideLeft: e.cx -= kSlideSpeed; break;
    case MotionKind::kSlideRight: e.cx += kSlideSpeed; break;
    case MotionKind::kSlideUp: e.cy -= kSlideSpeed; break;
    case MotionKind::kSlideDown: e.cy += kSlideSpeed; break;
    case MotionKind::kGrow: e.size += kGrowRate; break;
    case MotionKind::kShrink: e.size -= kGrowRate; break;
    case MotionKind::kStay: break;
  }
  return e;
}

// positions of one entity over a segment: frames 0..T-1 plus the carried
// state after the final advance (start of the next segment)
inline std::vector<EntityState> roll(EntityState s, MotionKind m, std::int64_t t) {
  std::vector<EntityState> out;
  for (std::int64_t i = 0; i < t; ++i) {
    out.push_back(s);
    s = step(s, m);
  }
  out.push_back(s);
  return out;
}

inline bool in_bounds(const EntityState& e, std::int64_t image) {
  const double r = circumradius(e.shape, e.size);
  const SizeRange sr = size_range(e.shape);
  if (e.size < sr.min_cap || e.size > sr.max_cap) return false;
  return e.cx - r >= 1.0 && e.cx + r <= image - 1.0 && e.cy - r >= 1.0 &&
         e.cy + r <= image - 1.0;
}

inline bool tracks_clear(const std::vector<EntityState>& a, const std::vector<EntityState>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double dx = a[i].cx - b[i].cx, dy = a[i].cy - b[i].cy;
    const double need = circumradius(a[i].shape, a[i].size) +
                        circumradius(b[i].shape, b[i].size) + kClearance;
    if (dx * dx + dy * dy < need * need) return false;
  }
  return true;
}

}  // namespace worldgen

// ---------------------------------------------------------------------------
// Scene generation

// Generates one scene chain of `cfg.segments` clips. Ids are filled by the
// dataset builder; here they are local (0..segments-1, adjacent = successor,
// last points back at its predecessor).
inline std::vector<AnnotatedClip> generate_scene(std::uint64_t seed, const WorldConfig& cfg) {
  using worldgen::EntityState;
  const std::int64_t img = cfg.image, t = cfg.frames;

  for (std::uint64_t attempt = 0;; ++attempt) {
    // derived seed on unsatisfiable placement
    Rng rng = Rng(seed).fork(attempt);
    const int n = cfg.min_entities +
                  static_cast<int>(rng.below(static_cast<std::uint64_t>(
                      cfg.max_entities - cfg.min_entities + 1)));

    // distinct (color, shape) identities
    std::vector<std::pair<int, int>> identities;
    for (int c = 0; c < kNumColors; ++c)
      for (int s = 0; s < kNumShapes; ++s) identities.emplace_back(c, s);
    for (std::size_t i = identities.size(); i > 1; --i)
      std::swap(identities[i - 1], identities[rng.below(i)]);

    std::vector<EntityState> state(static_cast<std::size_t>(n));
    bool placed = true;
    for (int i = 0; i < n && placed; ++i) {
      auto& e = state[static_cast<std::size_t>(i)];
      e.color = static_cast<ColorKind>(identities[static_cast<std::size_t>(i)].first);
      e.shape = static_cast<ShapeKind>(identities[static_cast<std::size_t>(i)].second);
      const auto sr = worldgen::size_range(e.shape);
      bool ok = false;
      for (int tries = 0; tries < 100 && !ok; ++tries) {
        e.size = rng.uniform(sr.lo, sr.hi);
        const double r = worldgen::circumradius(e.shape, e.size) + 2.0;
        e.cx = rng.uniform(r, static_cast<double>(img) - r);
        e.cy = rng.uniform(r, static_cast<double>(img) - r);
        ok = true;
        for (int j = 0; j < i; ++j) {
          const auto& o = state[static_cast<std::size_t>(j)];
          const double dx = e.cx - o.cx, dy = e.cy - o.cy;
          const double need = worldgen::circumradius(e.shape, e.size) +
                              worldgen::circumradius(o.shape, o.size) + 6.0;
          if (dx * dx + dy * dy < need * need) ok = false;
        }
      }
      placed = ok;
    }
    if (!placed) continue;  // regenerate with derived seed

    // Per segment: choose motions (no immediate repeat per entity), simulate.
    std::vector<AnnotatedClip> clips;
    std::vector<MotionKind> prev(static_cast<std::size_t>(n), MotionKind::kStay);
    std::vector<bool> has_prev(static_cast<std::size_t>(n), false);
    bool scene_ok = true;

    for (int seg = 0; seg < cfg.segments && scene_ok; ++seg) {
      std::vector<MotionKind> chosen(static_cast<std::size_t>(n), MotionKind::kStay);
      std::vector<std::vector<EntityState>> tracks(static_cast<std::size_t>(n));
      bool seg_ok = false;
      for (int round = 0; round < 50 && !seg_ok; ++round) {
        bool all = true;
        for (int i = 0; i < n; ++i) {
          std::vector<MotionKind> cand;
          for (int m = 0; m < kNumMotions; ++m) {
            const auto mk = static_cast<MotionKind>(m);
            if (has_prev[static_cast<std::size_t>(i)] && mk == prev[static_cast<std::size_t>(i)]) continue;
            cand.push_back(mk);
          }
          for (std::size_t k = cand.size(); k > 1; --k)
            std::swap(cand[k - 1], cand[rng.below(k)]);

          bool found = false;
          for (MotionKind mk : cand) {
            auto track = worldgen::roll(state[static_cast<std::size_t>(i)], mk, t);
            bool ok = true;
            for (const auto& st : track) ok = ok && worldgen::in_bounds(st, img);
            for (int j = 0; j < i && ok; ++j)
              ok = worldgen::tracks_clear(track, tracks[static_cast<std::size_t>(j)]);
            for (int j = i + 1; j < n && ok; ++j) {
              auto still = worldgen::roll(state[static_cast<std::size_t>(j)], MotionKind::kStay, t);
              ok = worldgen::tracks_clear(track, still);
            }
            if (ok) {
              chosen[static_cast<std::size_t>(i)] = mk;
              tracks[static_cast<std::size_t>(i)] = std::move(track);
              found = true;
              break;
            }
          }
          if (!found) {
            all = false;
            break;
          }
        }
        if (!all) continue;
        // exact pairwise verification over the chosen trajectories
        seg_ok = true;
        for (int i = 0; i < n && seg_ok; ++i)
          for (int j = i + 1; j < n && seg_ok; ++j)
            seg_ok = worldgen::tracks_clear(tracks[static_cast<std::size_t>(i)], tracks[static_cast<std::size_t>(j)]);
      }
      if (!seg_ok) {
        // cornered: freeze everything for this segment
        for (int i = 0; i < n; ++i) {
          chosen[static_cast<std::size_t>(i)] = MotionKind::kStay;
          tracks[static_cast<std::size_t>(i)] =
              worldgen::roll(state[static_cast<std::size_t>(i)], MotionKind::kStay, t);
        }
      }

      // render
      AnnotatedClip clip;
      clip.scene_id = 0;
      clip.segment = seg;
      clip.frames_t = t;
      clip.height = img;
      clip.width = img;
      clip.frames.assign(static_cast<std::size_t>(t * 3 * img * img), 0);
      std::vector<ColorKind> colors;
      std::vector<ShapeKind> shapes;
      std::vector<MotionKind> motions;
      for (int i = 0; i < n; ++i) {
        colors.push_back(state[static_cast<std::size_t>(i)].color);
        shapes.push_back(state[static_cast<std::size_t>(i)].shape);
        motions.push_back(chosen[static_cast<std::size_t>(i)]);
      }
      clip.narration = make_narration(colors, shapes, motions);

      bool disjoint = true;
      std::vector<std::uint8_t> owner(static_cast<std::size_t>(t * img * img), 255);
      for (int i = 0; i < n; ++i) {
        EntityGroundTruth gt;
        gt.noun = noun_of(colors[static_cast<std::size_t>(i)], shapes[static_cast<std::size_t>(i)]);
        gt.motion = motions[static_cast<std::size_t>(i)];
        if (!motion_is_still(gt.motion)) gt.motion_phrase = motion_phrase(gt.motion);
        gt.mask.assign(static_cast<std::size_t>(t * img * img), 0);
        for (std::int64_t ti = 0; ti < t; ++ti) {
          const auto& st = tracks[static_cast<std::size_t>(i)][static_cast<std::size_t>(ti)];
          PixelBox box;
          box.x0 = static_cast<int>(img);
          box.y0 = static_cast<int>(img);
          box.x1 = -1;
          box.y1 = -1;
          for (std::int64_t y = 0; y < img; ++y)
            for (std::int64_t x = 0; x < img; ++x) {
              if (!worldgen::covers(st, x + 0.5, y + 0.5)) continue;
              const std::size_t px = static_cast<std::size_t>((ti * img + y) * img + x);
              gt.mask[px] = 1;
              if (owner[px] != 255) disjoint = false;
              owner[px] = static_cast<std::uint8_t>(i);
              const auto& rgb = color_rgb()[static_cast<std::size_t>(colors[static_cast<std::size_t>(i)])];
              for (int ch = 0; ch < 3; ++ch)
                clip.frames[static_cast<std::size_t>(((ti * 3 + ch) * img + y) * img + x)] = rgb[static_cast<std::size_t>(ch)];
              box.x0 = std::min(box.x0, static_cast<int>(x));
              box.y0 = std::min(box.y0, static_cast<int>(y));
              box.x1 = std::max(box.x1, static_cast<int>(x));
              box.y1 = std::max(box.y1, static_cast<int>(y));
            }
          gt.boxes.push_back(box);
          if (box.empty()) disjoint = false;  // degenerate: shape left frame
        }
        clip.entities.push_back(std::move(gt));
      }
      if (!disjoint) {
        scene_ok = false;
        break;
      }

      clips.push_back(std::move(clip));
      for (int i = 0; i < n; ++i) {
        state[static_cast<std::size_t>(i)] = tracks[static_cast<std::size_t>(i)].back();
        prev[static_cast<std::size_t>(i)] = chosen[static_cast<std::size_t>(i)];
        has_prev[static_cast<std::size_t>(i)] = true;
      }
    }
    if (!scene_ok) continue;

    for (int seg = 0; seg < cfg.segments; ++seg) {
      clips[static_cast<std::size_t>(seg)].id = seg;
      clips[static_cast<std::size_t>(seg)].adjacent_id =
          seg + 1 < cfg.segments ? seg + 1 : seg - 1;
    }
    return clips;
  }
}

// Single-clip view of the generator (first segment of the scene).
inline AnnotatedClip generate_clip(std::uint64_t seed, const WorldConfig& cfg) {
  return generate_scene(seed, cfg).front();
}

// ---------------------------------------------------------------------------
// Dataset on disk: manifest.json + frames.bin + masks.bin

struct Dataset {
  static constexpr int kFormatVersion = 1;
  WorldConfig world;
  Vocabulary vocab;
  std::vector<AnnotatedClip> clips;         // indexed by id
  std::vector<std::int64_t> train, val, test;

  const std::vector<std::int64_t>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw DatasetError("unknown split '" + name + "'");
  }

  const AnnotatedClip& clip(std::int64_t id) const {
    if (id < 0 || id >= static_cast<std::int64_t>(clips.size()))
      throw DatasetError("clip id out of range: " + std::to_string(id));
    return clips[static_cast<std::size_t>(id)];
  }
};

// Scenes are laid out consecutively: train scenes, then val, then test.
inline Dataset generate_dataset(std::uint64_t seed, const WorldConfig& cfg) {
  Dataset ds;
  ds.world = cfg;
  ds.vocab = build_vocabulary();
  const int total_scenes = cfg.scenes_train + cfg.scenes_val + cfg.scenes_test;
  for (int sc = 0; sc < total_scenes; ++sc) {
    auto scene = generate_scene(Rng(seed).fork(static_cast<std::uint64_t>(sc) + 1).seed(), cfg);
    const std::int64_t base = static_cast<std::int64_t>(ds.clips.size());
    for (auto& clip : scene) {
      clip.scene_id = sc;
      clip.adjacent_id += base;
      clip.id += base;
      std::vector<std::int64_t>* sp =
          sc < cfg.scenes_train
              ? &ds.train
              : (sc < cfg.scenes_train + cfg.scenes_val ? &ds.val : &ds.test);
      sp->push_back(clip.id);
      ds.clips.push_back(std::move(clip));
    }
  }
  return ds;
}

namespace detail {

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DatasetError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw DatasetError("cannot read " + path);
  const auto size = f.tellg();
  f.seekg(0);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
  f.read(reinterpret_cast<char*>(bytes.data()), size);
  return bytes;
}

}  // namespace detail

inline void write_dataset(const Dataset& ds, const std::string& dir) {
  nlohmann::json manifest;
  manifest["format_version"] = Dataset::kFormatVersion;
  manifest["image"] = ds.world.image;
  manifest["frames"] = ds.world.frames;
  manifest["segments"] = ds.world.segments;
  manifest["vocabulary"] = ds.vocab.words;
  manifest["taxonomy"] = ds.vocab.taxonomy;
  manifest["splits"] = {{"train", ds.train}, {"val", ds.val}, {"test", ds.test}};

  std::vector<std::uint8_t> frames_bin, masks_bin;
  nlohmann::json jclips = nlohmann::json::array();
  for (const auto& c : ds.clips) {
    nlohmann::json jc;
    jc["id"] = c.id;
    jc["scene"] = c.scene_id;
    jc["segment"] = c.segment;
    jc["adjacent"] = c.adjacent_id;
    jc["narration"] = c.narration.text;
    jc["frames_offset"] = frames_bin.size();
    jc["frames_len"] = c.frames.size();
    frames_bin.insert(frames_bin.end(), c.frames.begin(), c.frames.end());
    nlohmann::json jents = nlohmann::json::array();
    for (const auto& e : c.entities) {
      nlohmann::json je;
      je["noun"] = e.noun;
      je["motion"] = static_cast<int>(e.motion);
      je["motion_phrase"] = e.motion_phrase;
      je["mask_offset"] = masks_bin.size();
      je["mask_len"] = e.mask.size();
      masks_bin.insert(masks_bin.end(), e.mask.begin(), e.mask.end());
      nlohmann::json boxes = nlohmann::json::array();
      for (const auto& b : e.boxes) boxes.push_back({b.x0, b.y0, b.x1, b.y1});
      je["boxes"] = boxes;
      jents.push_back(std::move(je));
    }
    jc["entities"] = std::move(jents);
    jclips.push_back(std::move(jc));
  }
  manifest["clips"] = std::move(jclips);

  std::ofstream mf(dir + "/manifest.json", std::ios::trunc);
  if (!mf) throw DatasetError("cannot write " + dir + "/manifest.json");
  mf << manifest.dump(1) << "\n";
  detail::write_file(dir + "/frames.bin", frames_bin);
  detail::write_file(dir + "/masks.bin", masks_bin);
}

inline Dataset read_dataset(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw DatasetError("missing manifest: " + dir + "/manifest.json");
  nlohmann::json manifest;
  mf >> manifest;
  if (manifest.at("format_version").get<int>() != Dataset::kFormatVersion)
    throw DatasetError("dataset format version mismatch in " + dir);

  Dataset ds;
  ds.world.image = manifest.at("image").get<std::int64_t>();
  ds.world.frames = manifest.at("frames").get<std::int64_t>();
  ds.world.segments = manifest.value("segments", 1);
  ds.vocab = build_vocabulary();
  if (manifest.at("vocabulary").get<std::vector<std::string>>() != ds.vocab.words)
    throw DatasetError("vocabulary in manifest does not match the grammar");
  ds.train = manifest.at("splits").at("train").get<std::vector<std::int64_t>>();
  ds.val = manifest.at("splits").at("val").get<std::vector<std::int64_t>>();
  ds.test = manifest.at("splits").at("test").get<std::vector<std::int64_t>>();

  const auto frames_bin = detail::read_file(dir + "/frames.bin");
  const auto masks_bin = detail::read_file(dir + "/masks.bin");

  for (const auto& jc : manifest.at("clips")) {
    AnnotatedClip c;
    c.id = jc.at("id").get<std::int64_t>();
    c.scene_id = jc.at("scene").get<std::int64_t>();
    c.segment = jc.at("segment").get<int>();
    c.adjacent_id = jc.at("adjacent").get<std::int64_t>();
    c.frames_t = ds.world.frames;
    c.height = ds.world.image;
    c.width = ds.world.image;
    const auto off = jc.at("frames_offset").get<std::size_t>();
    const auto len = jc.at("frames_len").get<std::size_t>();
    if (off + len > frames_bin.size())
      throw DatasetError("frames blob out of range for clip " +
                         std::to_string(c.id));
    if (len != static_cast<std::size_t>(c.frames_t * 3 * c.height * c.width))
      throw DatasetError("frames blob length corrupt for clip " + std::to_string(c.id));
    c.frames.assign(frames_bin.begin() + static_cast<std::ptrdiff_t>(off),
                    frames_bin.begin() + static_cast<std::ptrdiff_t>(off + len));
    c.narration.text = jc.at("narration").get<std::string>();
    c.narration.nouns = extract_nouns(c.narration.text);
    c.narration.verb_phrases = extract_verb_phrases(c.narration.text);
    for (const auto& je : jc.at("entities")) {
      EntityGroundTruth e;
      e.noun = je.at("noun").get<std::string>();
      e.motion = static_cast<MotionKind>(je.at("motion").get<int>());
      e.motion_phrase = je.at("motion_phrase").get<std::string>();
      const auto moff = je.at("mask_offset").get<std::size_t>();
      const auto mlen = je.at("mask_len").get<std::size_t>();
      if (moff + mlen > masks_bin.size() ||
          mlen != static_cast<std::size_t>(c.frames_t * c.height * c.width))
        throw DatasetError("mask blob corrupt for clip " + std::to_string(c.id) +
                           " entity '" + e.noun + "'");
      e.mask.assign(masks_bin.begin() + static_cast<std::ptrdiff_t>(moff),
                    masks_bin.begin() + static_cast<std::ptrdiff_t>(moff + mlen));
      for (const auto& jb : je.at("boxes")) {
        PixelBox b;
        b.x0 = jb.at(0).get<int>();
        b.y0 = jb.at(1).get<int>();
        b.x1 = jb.at(2).get<int>();
        b.y1 = jb.at(3).get<int>();
        e.boxes.push_back(b);
      }
      c.entities.push_back(std::move(e));
    }
    ds.clips.push_back(std::move(c));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Batch formation

template <class S>
Tensor<S> clip_tensor(const AnnotatedClip& c) {
  Tensor<S> t = Tensor<S>::zeros({c.frames_t, 3, c.height, c.width});
  for (std::size_t i = 0; i < c.frames.size(); ++i)
    t.values()[i] = static_cast<S>(c.frames[i]) / S(255);
  return t;
}

struct Batch {
  // base clips first, then their hard negatives (adjacent clips)
  std::vector<std::int64_t> clip_ids;  // size 2B
  std::vector<SampleAnnotation> annotations;
  std::vector<std::vector<int>> positives;
  int base = 0;
};

inline Batch make_batch(const Dataset& ds, const std::string& split_name, int batch_size,
                        Rng& rng) {
  const auto& split = ds.split(split_name);
  check(batch_size <= static_cast<int>(split.size()),
        "make_batch: batch larger than split");
  // sampling pool: clips that have an adjacent partner
  std::vector<std::int64_t> pool;
  for (auto id : split)
    if (ds.clip(id).adjacent_id >= 0) pool.push_back(id);
  check(batch_size <= static_cast<int>(pool.size()), "make_batch: pool too small");

  Batch b;
  b.base = batch_size;
  std::vector<std::int64_t> chosen;
  std::vector<bool> used(pool.size(), false);
  for (int i = 0; i < batch_size; ++i) {
    std::uint64_t k = rng.below(pool.size());
    while (used[static_cast<std::size_t>(k)]) k = (k + 1) % pool.size();
    used[static_cast<std::size_t>(k)] = true;
    chosen.push_back(pool[static_cast<std::size_t>(k)]);
  }
  for (auto id : chosen) b.clip_ids.push_back(id);
  for (auto id : chosen) b.clip_ids.push_back(ds.clip(id).adjacent_id);

  for (auto id : b.clip_ids) {
    const auto& c = ds.clip(id);
    SampleAnnotation ann;
    ann.nouns = c.narration.nouns;
    ann.verbs = c.narration.verb_phrases;
    ann.clip_id = c.id;
    ann.adjacent_id = c.adjacent_id;
    b.annotations.push_back(std::move(ann));
  }
  b.positives = build_positive_sets(b.annotations);
  return b;
}

}  // namespace evl
