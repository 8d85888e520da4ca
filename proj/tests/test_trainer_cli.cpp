#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "afrcnn/checkpoint.hpp"
#include "afrcnn/cli.hpp"
#include "afrcnn/config.hpp"
#include "afrcnn/datagen.hpp"
#include "afrcnn/trainer.hpp"

using namespace afrcnn;

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("afrcnn_run_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// One small dataset shared by the in-process trainer tests.
const std::string& shared_data_root() {
  static const std::string root = [] {
    const fs::path p = fs::temp_directory_path() / "afrcnn_trainer_data";
    fs::remove_all(p);
    TrainConfig cfg;
    cfg.data_root = p.string();
    cfg.train_images = 24;
    cfg.test_images = 4;
    cfg.seed = 7;
    generate_dataset(cfg);
    return p.string();
  }();
  return root;
}

TrainConfig small_cfg(const std::string& out_dir, const std::string& mode) {
  TrainConfig cfg;
  cfg.data_root = shared_data_root();
  cfg.train_images = 24;
  cfg.test_images = 4;
  cfg.seed = 7;
  cfg.out_dir = out_dir;
  cfg.mode = mode;
  cfg.scale = 1;
  cfg.warmup_iters = 40;
  cfg.asdn_pretrain_iters = 30;
  cfg.joint_iters = 60;
  cfg.lr_decay_point = 30;
  cfg.checkpoint_every = 25;
  cfg.proposals_per_batch = 16;
  return cfg;
}

std::uint64_t tensors_hash(const std::vector<NamedTensor<float>>& ts) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& t : ts) {
    h = fnv1a(t.name, h);
    h = fnv1a(t.data->data(), t.data->size() * sizeof(float), h);
  }
  return h;
}

std::string slurp(const std::string& path) { return read_file_text(path); }

int quiet_cli(const std::vector<std::string>& args) {
  std::ostringstream sink_out, sink_err;
  auto* out_buf = std::cout.rdbuf(sink_out.rdbuf());
  auto* err_buf = std::cerr.rdbuf(sink_err.rdbuf());
  const int rc = run_cli(args);
  std::cout.rdbuf(out_buf);
  std::cerr.rdbuf(err_buf);
  return rc;
}

}  // namespace

// ---------------------------------------------------------------------------
// Schedule and stage behavior
// ---------------------------------------------------------------------------

TEST_CASE("stages run in order with the configured lengths and learning rates") {
  const auto dir = fresh_dir("sched");
  TrainConfig cfg = small_cfg(dir.string(), "asdn");
  cfg.delta = 0;  // any positive score drop trains the adversary, visible at toy scale
  Trainer t(cfg);
  std::vector<IterationRecord> recs;
  std::vector<std::uint64_t> det_hash, asdn_hash;
  const auto art = t.run([&](const IterationRecord& r) {
    recs.push_back(r);
    det_hash.push_back(tensors_hash(t.detector_params()));
    asdn_hash.push_back(tensors_hash(t.asdn.tensors()));
  });
  REQUIRE(art.completed);
  REQUIRE(recs.size() == 130);  // 40 + 30 + 60

  for (std::size_t i = 0; i < recs.size(); ++i) {
    REQUIRE(recs[i].iter == i + 1);
    const int want_stage = i < 40 ? 1 : (i < 70 ? 2 : 3);
    REQUIRE(recs[i].stage == want_stage);
    // Base rate everywhere except the tail of the joint stage.
    const double want_lr = (want_stage == 3 && i - 70 >= 30) ? cfg.base_lr / 10.0 : cfg.base_lr;
    REQUIRE(recs[i].lr == Catch::Approx(want_lr).margin(1e-15));
  }

  // Pretraining the dropout adversary must not touch the detector.
  for (std::size_t i = 40; i < 70; ++i) REQUIRE(det_hash[i] == det_hash[39]);
  REQUIRE(asdn_hash[69] != asdn_hash[39]);
  // The joint stage updates both again.
  REQUIRE(det_hash[129] != det_hash[69]);
  REQUIRE(asdn_hash[129] != asdn_hash[69]);

  // Detection loss falls across the warm-up stage.
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += recs[static_cast<std::size_t>(i)].loss;
    tail += recs[static_cast<std::size_t>(30 + i)].loss;
  }
  REQUIRE(tail < head);

  // Mask-prediction loss falls across the pretraining stage.
  std::vector<double> s2;
  for (std::size_t i = 40; i < 70; ++i)
    if (!recs[i].skipped) s2.push_back(recs[i].loss);
  REQUIRE(s2.size() >= 10);
  double h2 = 0, t2 = 0;
  for (int i = 0; i < 5; ++i) {
    h2 += s2[static_cast<std::size_t>(i)];
    t2 += s2[s2.size() - 5 + static_cast<std::size_t>(i)];
  }
  REQUIRE(t2 < h2);
}

TEST_CASE("joint stage without an adversary continues warm-up training exactly") {
  const auto d1 = fresh_dir("none_split");
  const auto d2 = fresh_dir("none_merged");
  TrainConfig c1 = small_cfg(d1.string(), "none");
  c1.warmup_iters = 30;
  c1.joint_iters = 20;
  c1.lr_decay_point = 20;  // decay lands at the very end, so every step uses base_lr
  TrainConfig c2 = small_cfg(d2.string(), "none");
  c2.warmup_iters = 49;
  c2.joint_iters = 1;
  c2.lr_decay_point = 1;
  Trainer t1(c1), t2(c2);
  t1.run();
  t2.run();
  const auto p1 = t1.detector_params();
  const auto p2 = t2.detector_params();
  REQUIRE(tensors_hash(p1) == tensors_hash(p2));
}

TEST_CASE("adversarial iterations preserve labels and keep one image clean") {
  const auto dir = fresh_dir("quota");
  TrainConfig cfg = small_cfg(dir.string(), "full");
  Trainer t(cfg);
  int adv_iters = 0;
  t.run([&](const IterationRecord& r) {
    for (const ItemRecord& it : r.items) {
      REQUIRE(it.cls_used == it.cls_assigned);
      if (it.image_slot != 0) REQUIRE_FALSE(it.adversary_ran);
      if (it.adversary_ran) REQUIRE(it.foreground);
    }
    if (r.stage != 3) {
      for (const ItemRecord& it : r.items) REQUIRE_FALSE(it.adversary_ran);
      return;
    }
    REQUIRE(r.adversary_ran_per_image.size() == 2);
    REQUIRE(r.adversary_ran_per_image[1] == 0);
    if (r.adversary_ran_per_image[0] > 0) ++adv_iters;
  });
  REQUIRE(adv_iters > 30);  // the adversary genuinely fires in most joint iterations
}

TEST_CASE("a fixed dropout adversary is pretrained but frozen during joint training") {
  const auto dir = fresh_dir("fixed");
  TrainConfig cfg = small_cfg(dir.string(), "fixed_asdn");
  Trainer t(cfg);
  std::vector<std::uint64_t> asdn_hash;
  std::vector<int> stages;
  t.run([&](const IterationRecord& r) {
    asdn_hash.push_back(tensors_hash(t.asdn.tensors()));
    stages.push_back(r.stage);
  });
  REQUIRE(stages.front() == 1);
  REQUIRE(stages.back() == 3);
  std::uint64_t at_pretrain_end = 0;
  for (std::size_t i = 0; i < stages.size(); ++i)
    if (stages[i] == 2) at_pretrain_end = asdn_hash[i];
  REQUIRE(at_pretrain_end != 0);
  for (std::size_t i = 0; i < stages.size(); ++i)
    if (stages[i] == 3) REQUIRE(asdn_hash[i] == at_pretrain_end);
}

// ---------------------------------------------------------------------------
// Determinism, interruption, resumption
// ---------------------------------------------------------------------------

TEST_CASE("retraining from scratch reproduces artifacts bit for bit") {
  const auto dir = fresh_dir("deterministic");
  const TrainConfig cfg = small_cfg(dir.string(), "asdn");
  const auto a = Trainer(cfg).run();
  const std::uint64_t h1 = a.final_hash;
  const std::string m1 = slurp(a.metric_log);
  const std::string e1 = slurp(a.eval_log);
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto b = Trainer(cfg).run();
  REQUIRE(b.final_hash == h1);
  REQUIRE(slurp(b.metric_log) == m1);
  REQUIRE(slurp(b.eval_log) == e1);
  REQUIRE(h1 != 0);
}

TEST_CASE("a run interrupted twice resumes to the uninterrupted result") {
  const auto dir = fresh_dir("resume");
  const TrainConfig cfg = small_cfg(dir.string(), "full");
  const auto full = Trainer(cfg).run();
  const std::string metrics = slurp(full.metric_log);
  REQUIRE(full.completed);

  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto part1 = Trainer(cfg).run({}, 37);
  REQUIRE_FALSE(part1.completed);
  const auto part2 = Trainer(cfg).run({}, 110);
  REQUIRE_FALSE(part2.completed);
  const auto done = Trainer(cfg).run();
  REQUIRE(done.completed);
  REQUIRE(done.final_hash == full.final_hash);
  REQUIRE(slurp(done.metric_log) == metrics);

  // Running once more is a no-op on an already-finished directory.
  const auto again = Trainer(cfg).run();
  REQUIRE(again.completed);
  REQUIRE(again.final_hash == full.final_hash);
}

TEST_CASE("resuming under a different configuration is refused") {
  const auto dir = fresh_dir("refuse");
  TrainConfig cfg = small_cfg(dir.string(), "none");
  Trainer(cfg).run({}, 20);
  TrainConfig changed = cfg;
  changed.base_lr *= 2;
  REQUIRE_THROWS_WITH(Trainer(changed).run(),
                      Catch::Matchers::ContainsSubstring("resume refused"));
}

// ---------------------------------------------------------------------------
// Checkpoint contents
// ---------------------------------------------------------------------------

TEST_CASE("checkpoints hold exactly the tensors the mode trains") {
  const auto d_none = fresh_dir("ck_none");
  const auto d_asdn = fresh_dir("ck_asdn");
  TrainConfig c_none = small_cfg(d_none.string(), "none");
  TrainConfig c_asdn = small_cfg(d_asdn.string(), "asdn");
  c_none.joint_iters = 10;
  c_none.lr_decay_point = 10;
  c_asdn.warmup_iters = 10;
  c_asdn.asdn_pretrain_iters = 10;
  c_asdn.joint_iters = 10;
  c_asdn.lr_decay_point = 10;
  const auto a_none = Trainer(c_none).run();
  const auto a_asdn = Trainer(c_asdn).run();

  Trainer probe_none(c_none);
  REQUIRE_NOTHROW(load_checkpoint(a_none.final_checkpoint, probe_none.checkpoint_tensors()));
  Trainer probe_asdn(c_asdn);
  REQUIRE_NOTHROW(load_checkpoint(a_asdn.final_checkpoint, probe_asdn.checkpoint_tensors()));

  // A dropout-adversary checkpoint has tensors a plain-detector reader rejects,
  // and vice versa.
  REQUIRE_THROWS_WITH(load_checkpoint(a_asdn.final_checkpoint, probe_none.checkpoint_tensors()),
                      Catch::Matchers::ContainsSubstring("unknown tensor"));
  REQUIRE_THROWS_WITH(load_checkpoint(a_none.final_checkpoint, probe_asdn.checkpoint_tensors()),
                      Catch::Matchers::ContainsSubstring("missing tensor"));
}

TEST_CASE("corrupt checkpoint files are rejected with specific errors") {
  const auto dir = fresh_dir("corrupt");
  const std::string good = (dir / "good.bin").string();
  DetectorConfig dcfg = detector_config(TrainConfig{});
  BackboneParams<float> bb(dcfg);
  CheckpointMeta meta;
  meta.config_hash = 42;
  save_checkpoint(good, meta, bb.tensors());

  const std::string junk = (dir / "junk.bin").string();
  write_file_bytes(junk, "hello world", 11);
  REQUIRE_THROWS_WITH(peek_checkpoint(junk), Catch::Matchers::ContainsSubstring("bad magic"));

  auto bytes = read_file_bytes(good);
  auto bumped = bytes;
  bumped[4] = static_cast<std::uint8_t>(bumped[4] + 1);
  const std::string vpath = (dir / "version.bin").string();
  write_file_bytes(vpath, bumped.data(), bumped.size());
  REQUIRE_THROWS_WITH(peek_checkpoint(vpath),
                      Catch::Matchers::ContainsSubstring("unsupported checkpoint version"));

  auto cut = bytes;
  cut.resize(cut.size() - 64);
  const std::string tpath = (dir / "trunc.bin").string();
  write_file_bytes(tpath, cut.data(), cut.size());
  REQUIRE_THROWS_WITH(load_checkpoint(tpath, BackboneParams<float>(dcfg).tensors()),
                      Catch::Matchers::ContainsSubstring("truncated"));
}

// ---------------------------------------------------------------------------
// Command-line interface
// ---------------------------------------------------------------------------

TEST_CASE("cli generates reproducible datasets and validates its arguments") {
  const auto d1 = fresh_dir("cli_gen1");
  const auto d2 = fresh_dir("cli_gen2");
  const std::vector<std::string> common = {"--set", "train_images=8", "--set", "test_images=3",
                                           "--set", "seed=3"};
  auto with = [&](std::vector<std::string> head) {
    head.insert(head.end(), common.begin(), common.end());
    return head;
  };
  REQUIRE(quiet_cli(with({"gen-data", "--out", d1.string()})) == 0);
  REQUIRE(quiet_cli(with({"gen-data", "--out", d2.string()})) == 0);
  REQUIRE(slurp((d1 / "manifest.txt").string()) == slurp((d2 / "manifest.txt").string()));
  REQUIRE(quiet_cli({"gen-data"}) == 2);           // --out is required
  REQUIRE(quiet_cli({"no-such-command"}) == 2);
  REQUIRE(quiet_cli({"--help"}) == 0);
}

TEST_CASE("cli trains, evaluates, and enforces config consistency end to end") {
  const auto data = fresh_dir("cli_data");
  const auto run = fresh_dir("cli_run");
  const std::vector<std::string> dataset_flags = {"--set", "train_images=10", "--set",
                                                  "test_images=3", "--set", "seed=5"};
  const std::vector<std::string> train_flags = {
      "--set", "scale=1",          "--set", "warmup_iters=8", "--set", "asdn_pretrain_iters=6",
      "--set", "joint_iters=8",    "--set", "lr_decay_point=8",
      "--set", "proposals_per_batch=8"};
  auto args = [&](std::vector<std::string> head, bool with_train) {
    head.insert(head.end(), dataset_flags.begin(), dataset_flags.end());
    if (with_train) head.insert(head.end(), train_flags.begin(), train_flags.end());
    return head;
  };

  REQUIRE(quiet_cli(args({"gen-data", "--out", data.string()}, false)) == 0);
  REQUIRE(quiet_cli(args({"train", "--data", data.string(), "--out", run.string(), "--mode",
                          "asdn", "--quiet"},
                         true)) == 0);
  REQUIRE(fs::exists(run / "ckpt_final.bin"));

  REQUIRE(quiet_cli({"train", "--data", data.string(), "--out", run.string(), "--mode",
                     "definitely_not_a_mode"}) == 2);

  // Evaluation must repeat the training configuration; a bare config hashes
  // differently and is refused.
  REQUIRE(quiet_cli({"eval", "--data", data.string(), "--out", run.string(), "--split",
                     "test_clean"}) == 3);
  REQUIRE(quiet_cli(args({"eval", "--data", data.string(), "--out", run.string(), "--mode",
                          "asdn", "--split", "test_clean"},
                         true)) == 0);
  const std::string report = slurp((run / "report_test_clean.txt").string());
  REQUIRE(report.find("mAP ") != std::string::npos);

  // Missing checkpoint path surfaces as an I/O failure, not a crash.
  REQUIRE(quiet_cli(args({"eval", "--data", data.string(), "--out", run.string(), "--mode",
                          "asdn", "--ckpt", (run / "nope.bin").string()},
                         true)) == 1);

  // Mask visualization: two PGM files per rendered proposal, mask cells 1/3 dark.
  REQUIRE(quiet_cli(args({"viz-masks", "--data", data.string(), "--out", run.string(), "--mode",
                          "asdn", "--n", "3"},
                         true)) == 0);
  int masks_checked = 0;
  for (int k = 0; k < 3; ++k) {
    const fs::path heat = run / ("viz_" + std::to_string(k) + "_heat.pgm");
    const fs::path mask = run / ("viz_" + std::to_string(k) + "_mask.pgm");
    REQUIRE(fs::exists(heat));
    REQUIRE(fs::exists(mask));
    const auto bytes = read_file_bytes(mask.string());
    REQUIRE(bytes.size() > 36);
    int dark = 0, light = 0;
    for (std::size_t i = bytes.size() - 36; i < bytes.size(); ++i) {
      if (bytes[i] == 0) ++dark;
      if (bytes[i] == 255) ++light;
    }
    REQUIRE(dark == 12);
    REQUIRE(light == 24);
    ++masks_checked;
  }
  REQUIRE(masks_checked == 3);

  // A detector-only run has no adversary to visualize.
  const auto run2 = fresh_dir("cli_run_none");
  REQUIRE(quiet_cli(args({"train", "--data", data.string(), "--out", run2.string(), "--mode",
                          "none", "--quiet"},
                         true)) == 0);
  REQUIRE(quiet_cli(args({"viz-masks", "--data", data.string(), "--out", run2.string(), "--mode",
                          "none"},
                         true)) == 2);
}

TEST_CASE("cli training resumes across invocations via stop-after") {
  const auto data = fresh_dir("cli_rdata");
  const auto r1 = fresh_dir("cli_resume");
  const auto r2 = fresh_dir("cli_straight");
  const std::vector<std::string> flags = {
      "--set", "train_images=8",  "--set", "test_images=2",  "--set", "seed=11",
      "--set", "scale=1",         "--set", "warmup_iters=6", "--set", "asdn_pretrain_iters=0",
      "--set", "joint_iters=6",   "--set", "lr_decay_point=6",
      "--set", "proposals_per_batch=8"};
  auto args = [&](std::vector<std::string> head) {
    head.insert(head.end(), flags.begin(), flags.end());
    return head;
  };
  REQUIRE(quiet_cli(args({"gen-data", "--out", data.string()})) == 0);
  REQUIRE(quiet_cli(args({"train", "--data", data.string(), "--out", r1.string(), "--mode",
                          "none", "--quiet", "--stop-after", "5"})) == 0);
  REQUIRE(quiet_cli(args({"train", "--data", data.string(), "--out", r1.string(), "--mode",
                          "none", "--quiet"})) == 0);
  REQUIRE(quiet_cli(args({"train", "--data", data.string(), "--out", r2.string(), "--mode",
                          "none", "--quiet"})) == 0);
  REQUIRE(slurp((r1 / "metrics.txt").string()) == slurp((r2 / "metrics.txt").string()));

  // Same directory, different config: refused with the state-mismatch code.
  auto changed = args({"train", "--data", data.string(), "--out", r1.string(), "--mode", "none",
                       "--quiet"});
  changed.push_back("--set");
  changed.push_back("base_lr=0.002");
  REQUIRE(quiet_cli(changed) == 3);
}
