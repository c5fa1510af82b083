// Training loop: whole-batch loss graph over the expanded batch, AdamW with a
// fixed learning rate, per-step tab-separated logging, periodic checkpoints.
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "evl/checkpoint.hpp"
#include "evl/config.hpp"
#include "evl/grounding.hpp"
#include "evl/losses.hpp"
#include "evl/model.hpp"
#include "evl/optimizer.hpp"
#include "evl/synthworld.hpp"

#include "json.hpp"

namespace evl {

struct TrainingAbort : std::runtime_error {
  explicit TrainingAbort(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainConfig {
  ModelConfig model;
  std::string data_dir;
  std::string out_dir;
  double lr = 3e-4;
  double tau = kDefaultTau;
  double lambda1 = 0.5;
  double lambda2 = 0.5;
  double lambda3 = 1.0;
  double weight_decay = 0.01;
  int batch = 32;
  int steps = 300;
  int checkpoint_every = 0;  // 0: final checkpoint only
  std::uint64_t seed = 1;
  bool freeze_global = false;

  void validate() const {
    model.validate();
    if (lr <= 0 || tau <= 0 || batch <= 0 || steps <= 0)
      throw ConfigError("training config values must be positive");
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0)
      throw ConfigError("loss weights must be nonnegative");
  }
};

// Flat key=value file; '#' starts a comment.
inline void apply_config_file(const std::string& path, TrainConfig* cfg) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    auto as_i = [&] { return std::stoll(val); };
    auto as_d = [&] { return std::stod(val); };
    if (key == "lr") cfg->lr = as_d();
    else if (key == "tau") cfg->tau = as_d();
    else if (key == "lambda1") cfg->lambda1 = as_d();
    else if (key == "lambda2") cfg->lambda2 = as_d();
    else if (key == "lambda3") cfg->lambda3 = as_d();
    else if (key == "weight_decay") cfg->weight_decay = as_d();
    else if (key == "batch") cfg->batch = static_cast<int>(as_i());
    else if (key == "steps") cfg->steps = static_cast<int>(as_i());
    else if (key == "checkpoint_every") cfg->checkpoint_every = static_cast<int>(as_i());
    else if (key == "seed") cfg->seed = static_cast<std::uint64_t>(as_i());
    else if (key == "freeze_global") cfg->freeze_global = as_i() != 0;
    else if (key == "data") cfg->data_dir = val;
    else if (key == "out") cfg->out_dir = val;
    else if (key == "image") cfg->model.image = as_i();
    else if (key == "frames") cfg->model.frames = as_i();
    else if (key == "patch") cfg->model.patch = as_i();
    else if (key == "d_model") cfg->model.d_model = as_i();
    else if (key == "heads") cfg->model.heads = as_i();
    else if (key == "global_layers") cfg->model.global_layers = as_i();
    else if (key == "boot_layers") cfg->model.boot_layers = as_i();
    else if (key == "boot_groups") cfg->model.boot_groups = as_i();
    else if (key == "entity_blocks") cfg->model.entity_blocks = as_i();
    else if (key == "entity_refine") cfg->model.entity_refine = as_i();
    else if (key == "entities") cfg->model.entities = as_i();
    else if (key == "decoder_depth") cfg->model.decoder_depth = as_i();
    else if (key == "text_layers") cfg->model.text_layers = as_i();
    else if (key == "tag_temperature") cfg->model.tag_temperature = as_d();
    else throw ConfigError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
}

inline nlohmann::json model_config_json(const ModelConfig& m) {
  return {{"image", m.image},
          {"frames", m.frames},
          {"patch", m.patch},
          {"d_model", m.d_model},
          {"heads", m.heads},
          {"global_layers", m.global_layers},
          {"boot_layers", m.boot_layers},
          {"boot_groups", m.boot_groups},
          {"entity_blocks", m.entity_blocks},
          {"entity_refine", m.entity_refine},
          {"entities", m.entities},
          {"decoder_depth", m.decoder_depth},
          {"text_layers", m.text_layers},
          {"tag_temperature", m.tag_temperature}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.image = j.at("image").get<std::int64_t>();
  m.frames = j.at("frames").get<std::int64_t>();
  m.patch = j.at("patch").get<std::int64_t>();
  m.d_model = j.at("d_model").get<std::int64_t>();
  m.heads = j.at("heads").get<std::int64_t>();
  m.global_layers = j.at("global_layers").get<std::int64_t>();
  m.boot_layers = j.at("boot_layers").get<std::int64_t>();
  m.boot_groups = j.at("boot_groups").get<std::int64_t>();
  m.entity_blocks = j.at("entity_blocks").get<std::int64_t>();
  m.entity_refine = j.at("entity_refine").get<std::int64_t>();
  m.entities = j.at("entities").get<std::int64_t>();
  m.decoder_depth = j.at("decoder_depth").get<std::int64_t>();
  m.text_layers = j.at("text_layers").get<std::int64_t>();
  m.tag_temperature = j.at("tag_temperature").get<double>();
  return m;
}

// ---------------------------------------------------------------------------
// Batch graph

// Memoized text embedding within one graph: identical strings share a node.
template <class S>
struct TextMemo {
  const Model<S>* model;
  std::map<std::string, Tensor<S>> cache;

  explicit TextMemo(const Model<S>* m) : model(m) {}

  Tensor<S> row(const std::string& text) {
    auto it = cache.find(text);
    if (it == cache.end())
      it = cache.emplace(text, reshape(model->encode_text(text),
                                       {1, model->cfg.d_model})).first;
    return it->second;
  }
};

template <class S>
struct BatchLossInputs {
  std::vector<VideoOutputs<S>> videos;  // one per expanded-batch clip
};

// Builds the full loss over an expanded batch. Terms with zero weight are
// skipped and reported as exact zeros.
template <class S>
LossReport<S> batch_loss(const Model<S>& model, const Dataset& ds, const Batch& batch,
                         S tau, S lambda1, S lambda2, S lambda3,
                         const TagOptions<S>& tag_opt,
                         BatchLossInputs<S>* capture = nullptr) {
  const auto n = static_cast<std::int64_t>(batch.clip_ids.size());
  const ModelConfig& mc = model.cfg;

  std::vector<VideoOutputs<S>> outs;
  outs.reserve(static_cast<std::size_t>(n));
  for (auto id : batch.clip_ids)
    outs.push_back(model.video_forward(clip_tensor<S>(ds.clip(id)), tag_opt));

  TextMemo<S> memo(&model);
  std::vector<Tensor<S>> v_rows, t_rows;
  for (std::int64_t i = 0; i < n; ++i) {
    v_rows.push_back(reshape(outs[static_cast<std::size_t>(i)].video_embedding, {1, mc.d_model}));
    t_rows.push_back(memo.row(ds.clip(batch.clip_ids[static_cast<std::size_t>(i)]).narration.text));
  }
  Tensor<S> v_hat = l2_normalize(concat(v_rows, 0));
  Tensor<S> t_hat = l2_normalize(concat(t_rows, 0));
  auto [v2t, t2v] = egonce(v_hat, t_hat, batch.positives, tau);

  Tensor<S> nec = Tensor<S>::scalar(S(0));
  if (lambda1 > S(0)) {
    std::vector<Tensor<S>> tax_rows;
    for (const auto& noun : model.vocab.taxonomy) tax_rows.push_back(memo.row(noun));
    Tensor<S> taxonomy = concat(tax_rows, 0);
    Tensor<S> total = Tensor<S>::scalar(S(0));
    std::int64_t count = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const auto& clip = ds.clip(batch.clip_ids[static_cast<std::size_t>(i)]);
      std::vector<Tensor<S>> noun_rows;
      for (const auto& noun : clip.narration.nouns) noun_rows.push_back(memo.row(noun));
      auto [sum, matched] = nec_loss_sum(outs[static_cast<std::size_t>(i)].entities,
                                         concat(noun_rows, 0), taxonomy, tau);
      if (matched > 0) total = add(total, sum);
      count += matched;
    }
    if (count > 0) nec = scale(total, S(1) / static_cast<S>(count));
  }

  Tensor<S> vec = Tensor<S>::scalar(S(0));
  if (lambda2 > S(0)) {
    std::vector<Tensor<S>> all_rows;
    for (auto id : batch.clip_ids)
      for (const auto& ph : ds.clip(id).narration.verb_phrases)
        all_rows.push_back(memo.row(ph));
    if (!all_rows.empty()) {
      Tensor<S> all = concat(all_rows, 0);
      Tensor<S> total = Tensor<S>::scalar(S(0));
      std::int64_t count = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        const auto& clip = ds.clip(batch.clip_ids[static_cast<std::size_t>(i)]);
        if (clip.narration.verb_phrases.empty()) continue;
        std::vector<Tensor<S>> own_rows;
        for (const auto& ph : clip.narration.verb_phrases) own_rows.push_back(memo.row(ph));
        auto [sum, cnt] = vec_loss_sum(outs[static_cast<std::size_t>(i)].entities,
                                       concat(own_rows, 0), all, tau);
        total = add(total, sum);
        count += cnt;
      }
      if (count > 0) vec = scale(total, S(1) / static_cast<S>(count));
    }
  }

  Tensor<S> proj = Tensor<S>::scalar(S(0));
  if (lambda3 > S(0)) {
    Tensor<S> total = Tensor<S>::scalar(S(0));
    std::int64_t clips_counted = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const auto& clip = ds.clip(batch.clip_ids[static_cast<std::size_t>(i)]);
      const auto& out = outs[static_cast<std::size_t>(i)];
      Tensor<S> mhat = saliency_maps(out.boot_record, out.entity_record);
      Tensor<S> pix = upsample_to_pixels(mhat, mc.image, mc.image, mc.patch);  // (E,T,H,W)
      Tensor<S> clip_total = Tensor<S>::scalar(S(0));
      for (std::int64_t t = 0; t < mc.frames; ++t) {
        std::vector<PixelBox> boxes;
        for (const auto& e : clip.entities) boxes.push_back(e.boxes[static_cast<std::size_t>(t)]);
        Tensor<S> frame_masks = reshape(slice(pix, 1, t, 1), {mc.entities, mc.image, mc.image});
        clip_total = add(clip_total, projection_loss(frame_masks, boxes));
      }
      total = add(total, scale(clip_total, S(1) / static_cast<S>(mc.frames)));
      ++clips_counted;
    }
    if (clips_counted > 0) proj = scale(total, S(1) / static_cast<S>(clips_counted));
  }

  if (capture) capture->videos = std::move(outs);
  return total_loss(v2t, t2v, nec, vec, proj, lambda1, lambda2, lambda3);
}

// ---------------------------------------------------------------------------
// Two-pass training step
//
// A whole-batch graph at full batch size does not fit desk memory, so the
// video encoders run twice: once detached to produce the per-clip outputs the
// losses consume, and once per clip to backpropagate the cotangents those
// outputs received from the batch-level loss graph. Grouping noise is
// replayed from per-clip streams so both passes see identical samples.

template <class S>
struct ClipCut {
  Tensor<S> v;       // (D)
  Tensor<S> e;       // (E, D)
  Tensor<S> a_boot;  // (T, G, K) soft similarity
  Tensor<S> a_ent;   // (T, E, G) soft similarity
};

template <class S>
Rng clip_noise_stream(std::uint64_t seed, std::int64_t step, std::int64_t clip_index) {
  return Rng(seed).fork(static_cast<std::uint64_t>(step) + 1)
      .fork(static_cast<std::uint64_t>(clip_index) + 1);
}

// Builds the loss on detached per-clip outputs, backpropagates it, and replays
// each clip's encoder pass to push gradients into the video-side parameters.
// Text-encoder gradients accumulate during the batch-graph backward. Returns
// the loss report; if any term is non-finite, no backward work happens.
template <class S>
LossReport<S> training_step_backward(const Model<S>& model, const Dataset& ds,
                                     const Batch& batch, S tau, S lambda1, S lambda2,
                                     S lambda3, bool noise, std::uint64_t noise_seed,
                                     std::int64_t step_index) {
  const auto n = static_cast<std::int64_t>(batch.clip_ids.size());
  const ModelConfig& mc = model.cfg;

  // pass 1: detached clip outputs
  std::vector<ClipCut<S>> cuts;
  cuts.reserve(static_cast<std::size_t>(n));
  {
    NoGradGuard ng;
    for (std::int64_t i = 0; i < n; ++i) {
      Rng nrng = clip_noise_stream<S>(noise_seed, step_index, i);
      TagOptions<S> opt;
      opt.noise = noise;
      opt.rng = &nrng;
      auto out = model.video_forward(clip_tensor<S>(ds.clip(batch.clip_ids[static_cast<std::size_t>(i)])), opt);
      ClipCut<S> cut;
      cut.v = out.video_embedding.clone_detached(true);
      cut.e = out.entities.clone_detached(true);
      cut.a_boot = out.boot_record.similarity.clone_detached(true);
      cut.a_ent = out.entity_record.similarity.clone_detached(true);
      cuts.push_back(std::move(cut));
    }
  }

  // batch-level loss graph over the cut leaves
  TextMemo<S> memo(&model);
  std::vector<Tensor<S>> v_rows, t_rows;
  for (std::int64_t i = 0; i < n; ++i) {
    v_rows.push_back(reshape(cuts[static_cast<std::size_t>(i)].v, {1, mc.d_model}));
    t_rows.push_back(memo.row(ds.clip(batch.clip_ids[static_cast<std::size_t>(i)]).narration.text));
  }
  Tensor<S> v_hat = l2_normalize(concat(v_rows, 0));
  Tensor<S> t_hat = l2_normalize(concat(t_rows, 0));
  auto [v2t, t2v] = egonce(v_hat, t_hat, batch.positives, tau);

  Tensor<S> nec = Tensor<S>::scalar(S(0));
  if (lambda1 > S(0)) {
    std::vector<Tensor<S>> tax_rows;
    for (const auto& noun : model.vocab.taxonomy) tax_rows.push_back(memo.row(noun));
    Tensor<S> taxonomy = concat(tax_rows, 0);
    Tensor<S> total = Tensor<S>::scalar(S(0));
    std::int64_t count = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const auto& clip = ds.clip(batch.clip_ids[static_cast<std::size_t>(i)]);
      std::vector<Tensor<S>> noun_rows;
      for (const auto& noun : clip.narration.nouns) noun_rows.push_back(memo.row(noun));
      auto [sum, matched] = nec_loss_sum(cuts[static_cast<std::size_t>(i)].e,
                                         concat(noun_rows, 0), taxonomy, tau);
      if (matched > 0) total = add(total, sum);
      count += matched;
    }
    if (count > 0) nec = scale(total, S(1) / static_cast<S>(count));
  }

  Tensor<S> vec = Tensor<S>::scalar(S(0));
  if (lambda2 > S(0)) {
    std::vector<Tensor<S>> all_rows;
    for (auto id : batch.clip_ids)
      for (const auto& ph : ds.clip(id).narration.verb_phrases)
        all_rows.push_back(memo.row(ph));
    if (!all_rows.empty()) {
      Tensor<S> all = concat(all_rows, 0);
      Tensor<S> total = Tensor<S>::scalar(S(0));
      std::int64_t count = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        const auto& clip = ds.clip(batch.clip_ids[static_cast<std::size_t>(i)]);
        if (clip.narration.verb_phrases.empty()) continue;
        std::vector<Tensor<S>> own_rows;
        for (const auto& ph : clip.narration.verb_phrases) own_rows.push_back(memo.row(ph));
        auto [sum, cnt] = vec_loss_sum(cuts[static_cast<std::size_t>(i)].e,
                                       concat(own_rows, 0), all, tau);
        total = add(total, sum);
        count += cnt;
      }
      if (count > 0) vec = scale(total, S(1) / static_cast<S>(count));
    }
  }

  Tensor<S> proj = Tensor<S>::scalar(S(0));
  if (lambda3 > S(0)) {
    Tensor<S> total = Tensor<S>::scalar(S(0));
    for (std::int64_t i = 0; i < n; ++i) {
      const auto& clip = ds.clip(batch.clip_ids[static_cast<std::size_t>(i)]);
      AssignmentRecord<S> boot{cuts[static_cast<std::size_t>(i)].a_boot, Tensor<S>(), "bootstrap"};
      AssignmentRecord<S> ent{cuts[static_cast<std::size_t>(i)].a_ent, Tensor<S>(), "entity"};
      Tensor<S> mhat = saliency_maps(boot, ent);
      Tensor<S> pix = upsample_to_pixels(mhat, mc.image, mc.image, mc.patch);
      Tensor<S> clip_total = Tensor<S>::scalar(S(0));
      for (std::int64_t t = 0; t < mc.frames; ++t) {
        std::vector<PixelBox> boxes;
        for (const auto& e : clip.entities) boxes.push_back(e.boxes[static_cast<std::size_t>(t)]);
        Tensor<S> frame_masks = reshape(slice(pix, 1, t, 1), {mc.entities, mc.image, mc.image});
        clip_total = add(clip_total, projection_loss(frame_masks, boxes));
      }
      total = add(total, scale(clip_total, S(1) / static_cast<S>(mc.frames)));
    }
    proj = scale(total, S(1) / static_cast<S>(n));
  }

  LossReport<S> report = total_loss(v2t, t2v, nec, vec, proj, lambda1, lambda2, lambda3);
  if (!report.finite()) return report;

  backward(report.total);  // fills cut-leaf cotangents and text-encoder grads

  // pass 2: replay each clip with a graph and seed its outputs
  for (std::int64_t i = 0; i < n; ++i) {
    ClipCut<S>& cut = cuts[static_cast<std::size_t>(i)];
    Rng nrng = clip_noise_stream<S>(noise_seed, step_index, i);
    TagOptions<S> opt;
    opt.noise = noise;
    opt.rng = &nrng;
    auto out = model.video_forward(clip_tensor<S>(ds.clip(batch.clip_ids[static_cast<std::size_t>(i)])), opt);
    std::vector<std::pair<Tensor<S>, std::vector<S>>> seeds;
    auto seed_of = [](const Tensor<S>& leaf) {
      const auto& g = leaf.grad_view();
      return std::vector<S>(g.begin(), g.end());
    };
    if (!cut.v.grad_view().empty())
      seeds.emplace_back(out.video_embedding, seed_of(cut.v));
    if (!cut.e.grad_view().empty()) seeds.emplace_back(out.entities, seed_of(cut.e));
    if (!cut.a_boot.grad_view().empty())
      seeds.emplace_back(out.boot_record.similarity, seed_of(cut.a_boot));
    if (!cut.a_ent.grad_view().empty())
      seeds.emplace_back(out.entity_record.similarity, seed_of(cut.a_ent));
    backward_seeded(seeds);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Trainer

template <class S>
class Trainer {
 public:
  static TrainConfig validated(TrainConfig cfg) {
    cfg.validate();
    return cfg;
  }

  Trainer(TrainConfig cfg, Dataset ds)
      : cfg_(validated(std::move(cfg))),
        ds_(std::move(ds)),
        init_rng_(Rng(cfg_.seed).fork(7)),
        model_(cfg_.model, build_vocabulary(), init_rng_),
        opt_(static_cast<S>(cfg_.lr), static_cast<S>(cfg_.weight_decay)),
        batch_rng_(Rng(cfg_.seed).fork(101)),
        noise_seed_(Rng(cfg_.seed).fork(202).seed()) {
    params_ = model_.params();
    if (cfg_.freeze_global) {
      ParamRefs<S> g;
      model_.global_enc.collect(g);
      for (auto* p : g) p->trainable = false;
    }
  }

  Model<S>& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  const Dataset& dataset() const { return ds_; }

  // One optimization step; returns the pre-update loss report.
  LossReport<S> step() {
    Batch batch = make_batch(ds_, "train", cfg_.batch, batch_rng_);
    opt_.zero_grad(params_);
    LossReport<S> report = training_step_backward(
        model_, ds_, batch, static_cast<S>(cfg_.tau), static_cast<S>(cfg_.lambda1),
        static_cast<S>(cfg_.lambda2), static_cast<S>(cfg_.lambda3), /*noise=*/true,
        noise_seed_, step_index_);
    if (!report.finite())
      throw TrainingAbort("non-finite loss at step " + std::to_string(step_index_) +
                          "; last-good checkpoint retained");
    opt_.step(params_);
    ++step_index_;
    return report;
  }

  // Full run: logs one line per step and writes checkpoints under out_dir.
  void train() {
    namespace fs = std::filesystem;
    fs::create_directories(cfg_.out_dir);
    const std::string log_path = cfg_.out_dir + "/train_log.tsv";
    const std::string ckpt_path = cfg_.out_dir + "/checkpoint.hnsy";
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw ConfigError("cannot write " + log_path);

    write_run_metadata();
    for (int s = 0; s < cfg_.steps; ++s) {
      LossReport<S> r;
      try {
        r = step();
      } catch (const TrainingAbort&) {
        log.flush();
        throw;
      }
      char line[256];
      std::snprintf(line, sizeof(line),
                    "%d\t%.6e\t%.6e\t%.6e\t%.6e\t%.6e\t%.6e\t%.6e\n", s,
                    static_cast<double>(r.ego_v2t.item()),
                    static_cast<double>(r.ego_t2v.item()),
                    static_cast<double>(r.nec.item()),
                    static_cast<double>(r.vec.item()),
                    static_cast<double>(r.proj.item()),
                    static_cast<double>(r.total.item()), cfg_.lr);
      log << line;
      log.flush();
      if (cfg_.checkpoint_every > 0 && (s + 1) % cfg_.checkpoint_every == 0)
        save_checkpoint(ckpt_path, params_);
    }
    save_checkpoint(ckpt_path, params_);
  }

  void write_run_metadata() const {
    nlohmann::json j;
    j["model"] = model_config_json(cfg_.model);
    j["train"] = {{"lr", cfg_.lr},         {"tau", cfg_.tau},
                  {"lambda1", cfg_.lambda1}, {"lambda2", cfg_.lambda2},
                  {"lambda3", cfg_.lambda3}, {"weight_decay", cfg_.weight_decay},
                  {"batch", cfg_.batch},     {"steps", cfg_.steps},
                  {"seed", cfg_.seed},       {"freeze_global", cfg_.freeze_global}};
    std::ofstream f(cfg_.out_dir + "/run.json", std::ios::trunc);
    f << j.dump(1) << "\n";
  }

  ParamRefs<S>& params() { return params_; }

 private:
  TrainConfig cfg_;
  Dataset ds_;
  Rng init_rng_;  // consumed by model construction; declared before model_
  Model<S> model_;
  AdamW<S> opt_;
  Rng batch_rng_;
  std::uint64_t noise_seed_;
  ParamRefs<S> params_;
  int step_index_ = 0;
};

}  // namespace evl
