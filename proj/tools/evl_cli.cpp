// Command-line surface: dataset generation, training, retrieval and
// grounding evaluation, and free-form query grounding with overlay output.
#include <malloc.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "CLI11.hpp"

#include "evl/checkpoint.hpp"
#include "evl/eval.hpp"
#include "evl/grounding.hpp"
#include "evl/image_io.hpp"
#include "evl/model.hpp"
#include "evl/synthworld.hpp"
#include "evl/trainer.hpp"

namespace {

using Sf = float;

evl::ModelConfig model_config_for(const std::string& checkpoint_path) {
  namespace fs = std::filesystem;
  const fs::path run_json = fs::path(checkpoint_path).parent_path() / "run.json";
  if (fs::exists(run_json)) {
    std::ifstream f(run_json);
    nlohmann::json j;
    f >> j;
    return evl::model_config_from_json(j.at("model"));
  }
  return evl::ModelConfig::desk();
}

evl::Model<Sf> load_model(const std::string& checkpoint_path) {
  evl::ModelConfig mc = model_config_for(checkpoint_path);
  evl::Rng rng(0);
  evl::Model<Sf> model(mc, evl::build_vocabulary(), rng);
  auto params = model.params();
  evl::load_checkpoint(checkpoint_path, params);
  return model;
}

void print_retrieval(const evl::EvalReport& r) {
  std::printf("split\t%s\n", r.split.c_str());
  std::printf("pool\t%d\n", r.pool);
  std::printf("recall@1\t%.4f\n", r.recall1);
  std::printf("recall@5\t%.4f\n", r.recall5);
  std::printf("mcq_inter\t%.4f\n", r.mcq_inter);
  std::printf("mcq_intra\t%.4f\n", r.mcq_intra);
  std::printf("ego_v2t\t%.6f\n", r.ego_v2t);
  std::printf("ego_t2v\t%.6f\n", r.ego_t2v);
  std::printf("nec\t%.6f\n", r.nec);
  std::printf("vec\t%.6f\n", r.vec);
  std::printf("proj\t%.6f\n", r.proj);
  std::printf("total\t%.6f\n", r.total);
}

}  // namespace

int main(int argc, char** argv) {
  // keep gemm reductions single-threaded and deterministic
  setenv("OPENBLAS_NUM_THREADS", "1", 0);
  // graph buffers churn quickly; keep them on the heap instead of mmap
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"entity-assembly video-language model on a synthetic moving-shapes world"};
  app.require_subcommand(1);

  // ---- gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  std::string gen_out = "data";
  std::uint64_t gen_seed = 1;
  evl::WorldConfig world;
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--scenes-train", world.scenes_train, "training scenes");
  gen->add_option("--scenes-val", world.scenes_val, "validation scenes");
  gen->add_option("--scenes-test", world.scenes_test, "test scenes");
  gen->add_option("--segments", world.segments, "clips per scene");
  gen->add_option("--image", world.image, "frame resolution");
  gen->add_option("--frames", world.frames, "frames per clip");
  gen->add_option("--max-entities", world.max_entities, "max entities per scene");

  // ---- train
  auto* train = app.add_subcommand("train", "train a model");
  evl::TrainConfig tc;
  std::string train_config_path;
  train->add_option("--config", train_config_path, "key=value config file");
  train->add_option("--data", tc.data_dir, "dataset directory");
  train->add_option("--out", tc.out_dir, "output directory");
  auto* o_seed = train->add_option("--seed", tc.seed, "seed");
  auto* o_steps = train->add_option("--steps", tc.steps, "optimization steps");
  auto* o_batch = train->add_option("--batch", tc.batch, "base batch size");
  auto* o_lr = train->add_option("--lr", tc.lr, "learning rate");
  auto* o_tau = train->add_option("--tau", tc.tau, "contrastive temperature");
  auto* o_l1 = train->add_option("--lambda1", tc.lambda1, "noun-entity weight");
  auto* o_l2 = train->add_option("--lambda2", tc.lambda2, "verb-entities weight");
  auto* o_l3 = train->add_option("--lambda3", tc.lambda3, "projection weight");
  auto* o_wd = train->add_option("--weight-decay", tc.weight_decay, "decoupled weight decay");
  auto* o_ck = train->add_option("--checkpoint-every", tc.checkpoint_every,
                                 "steps between periodic checkpoints");
  bool freeze_global = false;
  auto* o_fg = train->add_flag("--freeze-global", freeze_global,
                               "do not update global encoder weights");

  // ---- eval-retrieval
  auto* evr = app.add_subcommand("eval-retrieval", "retrieval and multiple-choice metrics");
  std::string evr_data, evr_ckpt, evr_split = "val";
  int evr_pool = 64;
  std::uint64_t evr_seed = 1;
  evr->add_option("--data", evr_data, "dataset directory")->required();
  evr->add_option("--checkpoint", evr_ckpt, "checkpoint path")->required();
  evr->add_option("--split", evr_split, "split name");
  evr->add_option("--pool", evr_pool, "candidate pool size");
  evr->add_option("--seed", evr_seed, "pool sampling seed");

  // ---- eval-grounding
  auto* evg = app.add_subcommand("eval-grounding", "grounding mIoU");
  std::string evg_data, evg_ckpt, evg_split = "val";
  evg->add_option("--data", evg_data, "dataset directory")->required();
  evg->add_option("--checkpoint", evg_ckpt, "checkpoint path")->required();
  evg->add_option("--split", evg_split, "split name");

  // ---- ground
  auto* grd = app.add_subcommand("ground", "ground a text query on one clip");
  std::string grd_data, grd_ckpt, grd_query, grd_type = "noun", grd_out = "overlays";
  std::int64_t grd_clip = 0;
  grd->add_option("--data", grd_data, "dataset directory")->required();
  grd->add_option("--checkpoint", grd_ckpt, "checkpoint path")->required();
  grd->add_option("--clip", grd_clip, "clip id")->required();
  grd->add_option("--query", grd_query, "query text")->required();
  grd->add_option("--type", grd_type, "query type: noun|verb");
  grd->add_option("--out", grd_out, "overlay output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      evl::Dataset ds = evl::generate_dataset(gen_seed, world);
      std::filesystem::create_directories(gen_out);
      evl::write_dataset(ds, gen_out);
      std::printf("wrote %zu clips (train %zu, val %zu, test %zu) to %s\n",
                  ds.clips.size(), ds.train.size(), ds.val.size(), ds.test.size(),
                  gen_out.c_str());
      return 0;
    }

    if (*train) {
      if (!train_config_path.empty()) {
        evl::TrainConfig from_file;
        evl::apply_config_file(train_config_path, &from_file);
        // CLI flags override file values
        from_file.data_dir = tc.data_dir.empty() ? from_file.data_dir : tc.data_dir;
        from_file.out_dir = tc.out_dir.empty() ? from_file.out_dir : tc.out_dir;
        if (!o_seed->empty()) from_file.seed = tc.seed;
        if (!o_steps->empty()) from_file.steps = tc.steps;
        if (!o_batch->empty()) from_file.batch = tc.batch;
        if (!o_lr->empty()) from_file.lr = tc.lr;
        if (!o_tau->empty()) from_file.tau = tc.tau;
        if (!o_l1->empty()) from_file.lambda1 = tc.lambda1;
        if (!o_l2->empty()) from_file.lambda2 = tc.lambda2;
        if (!o_l3->empty()) from_file.lambda3 = tc.lambda3;
        if (!o_wd->empty()) from_file.weight_decay = tc.weight_decay;
        if (!o_ck->empty()) from_file.checkpoint_every = tc.checkpoint_every;
        if (!o_fg->empty()) from_file.freeze_global = freeze_global;
        tc = from_file;
      } else {
        tc.freeze_global = freeze_global;
      }
      if (tc.data_dir.empty() || tc.out_dir.empty()) {
        std::fprintf(stderr, "train: --data and --out are required\n");
        return 2;
      }
      evl::Dataset ds = evl::read_dataset(tc.data_dir);
      evl::Trainer<Sf> trainer(tc, std::move(ds));
      trainer.train();
      std::printf("trained %d steps; checkpoint at %s/checkpoint.hnsy\n", tc.steps,
                  tc.out_dir.c_str());
      return 0;
    }

    if (*evr) {
      evl::Dataset ds = evl::read_dataset(evr_data);
      evl::Model<Sf> model = load_model(evr_ckpt);
      evl::EvalReport rep = evl::eval_retrieval(model, ds, evr_split, evr_pool, evr_seed);
      print_retrieval(rep);
      return 0;
    }

    if (*evg) {
      evl::Dataset ds = evl::read_dataset(evg_data);
      evl::Model<Sf> model = load_model(evg_ckpt);
      evl::EvalReport rep = evl::eval_grounding(model, ds, evg_split);
      std::printf("split\t%s\n", rep.split.c_str());
      std::printf("miou\t%.4f\n", rep.grounding);
      return 0;
    }

    if (*grd) {
      if (grd_query.empty()) {
        std::fprintf(stderr, "ground: empty query\n");
        return 2;
      }
      evl::Dataset ds = evl::read_dataset(grd_data);
      evl::Model<Sf> model = load_model(grd_ckpt);
      const evl::AnnotatedClip& clip = ds.clip(grd_clip);

      evl::NoGradGuard ng;
      evl::TagOptions<Sf> opt;
      opt.noise = false;
      auto out = model.video_forward(evl::clip_tensor<Sf>(clip), opt);
      evl::Tensor<Sf> mhat = evl::saliency_maps(out.boot_record, out.entity_record);
      evl::Tensor<Sf> pix = evl::upsample_to_pixels(mhat, model.cfg.image,
                                                    model.cfg.image, model.cfg.patch);
      evl::Tensor<Sf> query = model.encode_text(grd_query);
      const auto qt = grd_type == "verb" ? evl::QueryType::kVerb : evl::QueryType::kNoun;
      auto result = evl::ground_query(pix, out.entities, query, qt);

      std::filesystem::create_directories(grd_out);
      const std::int64_t h = clip.height, w = clip.width;
      for (std::int64_t t = 0; t < clip.frames_t; ++t) {
        std::vector<std::uint8_t> frame(clip.frames.begin() + t * 3 * h * w,
                                        clip.frames.begin() + (t + 1) * 3 * h * w);
        std::vector<float> mask(static_cast<std::size_t>(h * w));
        for (std::int64_t px = 0; px < h * w; ++px)
          mask[static_cast<std::size_t>(px)] =
              static_cast<float>(result.mask.values()[static_cast<std::size_t>(t * h * w + px)]);
        auto rgb = evl::blend_overlay(frame, mask, h, w,
                                      static_cast<std::size_t>(result.entity));
        char name[128];
        std::snprintf(name, sizeof(name), "%s/clip_%lld_frame_%lld_entity_%lld.ppm",
                      grd_out.c_str(), static_cast<long long>(clip.id),
                      static_cast<long long>(t), static_cast<long long>(result.entity));
        evl::write_ppm(name, h, w, rgb);
      }
      std::printf("wrote %lld overlays to %s (entity slot %lld)\n",
                  static_cast<long long>(clip.frames_t), grd_out.c_str(),
                  static_cast<long long>(result.entity));
      return 0;
    }
  } catch (const evl::TrainingAbort& e) {
    std::fprintf(stderr, "training aborted: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
