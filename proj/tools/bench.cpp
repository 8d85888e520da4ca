// Wall-clock probe for the training loop's hot pieces. Not a test; used to
// size the default schedule against a single-core budget.

#include <chrono>
#include <cstdio>
#include <filesystem>

#include "afrcnn/cli.hpp"

using namespace afrcnn;
using Clock = std::chrono::steady_clock;

static double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

int main() {
  TrainConfig cfg;
  cfg.data_root = "/tmp/afrcnn_bench_data";
  cfg.out_dir = "/tmp/afrcnn_bench_out";
  cfg.train_images = 24;
  cfg.test_images = 8;
  cfg.seed = 11;
  std::filesystem::remove_all(cfg.data_root);
  std::filesystem::remove_all(cfg.out_dir);

  auto t0 = Clock::now();
  generate_dataset(cfg);
  std::printf("gen-data (%d+2x%d imgs): %.0f ms\n", cfg.train_images, cfg.test_images, ms_since(t0));

  cfg.mode = "full";
  Trainer tr(cfg);
  tr.init_params();
  t0 = Clock::now();
  tr.load_train_data();
  std::printf("prep train data: %.0f ms\n", ms_since(t0));

  const Tensor3<float>& img = tr.data[0].img;
  BackboneCache<float> bc;
  t0 = Clock::now();
  for (int i = 0; i < 50; ++i) extract_features(img, tr.backbone, bc);
  std::printf("backbone fwd 64x64: %.2f ms\n", ms_since(t0) / 50.0);

  Tensor3<float> dfeat(bc.a3.h, bc.a3.w, bc.a3.c, 0.01f);
  t0 = Clock::now();
  for (int i = 0; i < 50; ++i) backbone_backward(img, tr.backbone, bc, dfeat, &tr.g_backbone);
  std::printf("backbone bwd 64x64: %.2f ms\n", ms_since(t0) / 50.0);

  // stage 1 iterations
  t0 = Clock::now();
  for (int i = 0; i < 40; ++i) tr.joint_iteration(1);
  std::printf("stage-1 iteration: %.2f ms\n", ms_since(t0) / 40.0);

  // stage 2 (exhaustive window mining dominates)
  t0 = Clock::now();
  for (int i = 0; i < 20; ++i) tr.asdn_pretrain_iteration();
  std::printf("stage-2 iteration: %.2f ms\n", ms_since(t0) / 20.0);

  // stage 3, full mode
  tr.iter = tr.stage2_end();
  t0 = Clock::now();
  for (int i = 0; i < 40; ++i) tr.joint_iteration(3);
  std::printf("stage-3 full iteration: %.2f ms\n", ms_since(t0) / 40.0);

  const TrainConfig def;
  std::printf("default schedule: %d + %d + %d iterations\n", def.eff_warmup(),
              def.eff_asdn_pretrain(), def.eff_joint());
  return 0;
}
