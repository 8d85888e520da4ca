#pragma once

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "afrcnn/trainer.hpp"

namespace afrcnn {

// Exit codes shared by every subcommand: 0 ok, 2 usage or config error,
// 3 persisted state does not match the config, 1 any other runtime failure.

namespace cli_detail {

// Flags shared by all subcommands. Precedence: built-in defaults, then
// --config file, then --set overrides, then direct flags.
struct CommonOpts {
  std::string config_path, out, data, mode;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  CLI::Option* o_config = nullptr;
  CLI::Option* o_out = nullptr;
  CLI::Option* o_data = nullptr;
  CLI::Option* o_mode = nullptr;
  CLI::Option* o_seed = nullptr;

  void attach(CLI::App* sub, bool out_required, const char* out_help, bool with_mode) {
    o_config = sub->add_option("--config", config_path, "flat `key = value` config file");
    sub->add_option("--set", sets, "override one config key, e.g. --set base_lr=0.002");
    o_seed = sub->add_option("--seed", seed, "experiment seed");
    o_out = sub->add_option("--out", out, out_help);
    if (out_required) o_out->required();
    o_data = sub->add_option("--data", data, "dataset root (overrides data_root)");
    if (with_mode)
      o_mode = sub->add_option(
          "--mode", mode,
          "adversary mode: none|random_dropout|hard_dropout|fixed_asdn|asdn|astn|random_jitter|full");
  }

  // out_is_data_root: gen-data's --out names the dataset directory, every
  // other command's --out names the run directory.
  TrainConfig build(bool out_is_data_root) const {
    TrainConfig cfg;
    if (o_config->count() > 0) cfg = parse_config(read_file_text(config_path));
    for (const std::string& kv : sets) {
      const std::size_t eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got: " + kv);
      set_config_key(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    if (o_seed->count() > 0) cfg.seed = seed;
    if (o_mode != nullptr && o_mode->count() > 0) cfg.mode = mode;
    if (o_data->count() > 0) cfg.data_root = data;
    if (o_out->count() > 0) {
      if (out_is_data_root) cfg.data_root = out;
      else cfg.out_dir = out;
    }
    cfg.validate();
    return cfg;
  }
};

inline std::string default_checkpoint(const TrainConfig& cfg) {
  namespace fs = std::filesystem;
  const std::string fin = (fs::path(cfg.out_dir) / "ckpt_final.bin").string();
  if (fs::exists(fin)) return fin;
  return (fs::path(cfg.out_dir) / "ckpt_latest.bin").string();
}

// Peek the header, refuse hash mismatches, then load into the trainer's
// mode-dependent tensor set.
inline CheckpointMeta load_into(Trainer& t, const std::string& ckpt) {
  if (!std::filesystem::exists(ckpt)) throw ConfigError("checkpoint not found: " + ckpt);
  const CheckpointMeta meta = peek_checkpoint(ckpt);
  const std::uint64_t want = config_hash(t.cfg);
  if (meta.config_hash != want)
    throw StateMismatchError("checkpoint " + ckpt + " was written with config hash " +
                             hex64(meta.config_hash) + ", current config hashes to " + hex64(want));
  return load_checkpoint(ckpt, t.checkpoint_tensors());
}

inline void require_dataset(const TrainConfig& cfg) {
  namespace fs = std::filesystem;
  const std::string manifest = (fs::path(cfg.data_root) / "manifest.txt").string();
  if (!fs::exists(manifest))
    throw std::runtime_error("no dataset under " + cfg.data_root + "; run gen-data first");
  std::istringstream is(read_file_text(manifest));
  std::string key, hash;
  is >> key >> hash;
  const std::string want = hex64(data_config_hash(cfg));
  if (key != "data_hash" || hash != want)
    throw StateMismatchError("dataset under " + cfg.data_root + " has data_hash " + hash +
                             ", config requires " + want + "; rerun gen-data");
}

inline int cmd_gen_data(const CommonOpts& common, const CLI::Option* o_images, int images) {
  TrainConfig cfg = common.build(true);
  if (o_images->count() > 0) {
    cfg.train_images = images;
    cfg.validate();
  }
  const GenResult res = generate_dataset(cfg);
  std::cout << "manifest " << res.manifest_path << '\n'
            << "manifest_hash " << hex64(res.manifest_hash) << '\n';
  return 0;
}

inline int cmd_train(const CommonOpts& common, std::uint64_t stop_after, bool quiet) {
  const TrainConfig cfg = common.build(false);
  require_dataset(cfg);
  Trainer t(cfg);
  IterObserver obs;
  if (!quiet) {
    obs = [](const IterationRecord& r) {
      if (r.iter % 100 == 0)
        std::cerr << "iter " << r.iter << " stage " << r.stage << " loss " << r.loss << " lr "
                  << r.lr << '\n';
    };
  }
  const RunArtifacts art = t.run(obs, stop_after);
  std::cout << "out_dir " << art.out_dir << '\n'
            << "metrics " << art.metric_log << '\n'
            << "completed " << (art.completed ? "true" : "false") << '\n';
  if (art.completed)
    std::cout << "final_checkpoint " << art.final_checkpoint << '\n'
              << "final_hash " << hex64(art.final_hash) << '\n';
  else
    std::cout << "latest_checkpoint " << art.latest_checkpoint << '\n';
  return 0;
}

inline int cmd_eval(const CommonOpts& common, std::string ckpt, const std::string& split_name,
                    const std::string& baseline_path, const std::string& report_path,
                    const std::string& plot_path, const std::string& dets_path) {
  const TrainConfig cfg = common.build(false);
  Trainer t(cfg);
  if (ckpt.empty()) ckpt = default_checkpoint(cfg);
  load_into(t, ckpt);
  const DatasetSplit split = load_split(cfg.data_root, split_name);
  EvalReport baseline;
  const bool has_baseline = !baseline_path.empty();
  if (has_baseline) baseline = parse_report(read_file_text(baseline_path));
  std::vector<Detection> dets;
  const EvalReport rep = evaluate_split(t.backbone, t.heads, cfg, split, split_name,
                                        has_baseline ? &baseline : nullptr, &dets);
  const std::string text = serialize_report(rep);
  std::cout << text;
  std::string out_report = report_path;
  if (out_report.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    out_report =
        (std::filesystem::path(cfg.out_dir) / ("report_" + split_name + ".txt")).string();
  }
  write_file_bytes(out_report, text.data(), text.size());
  if (!plot_path.empty()) write_ppm(plot_path, report_chart(rep));
  if (!dets_path.empty()) {
    std::ostringstream os;
    os.precision(9);
    for (const Detection& d : dets)
      os << d.image_id << ' ' << d.cls << ' ' << d.confidence << ' ' << d.box.x1 << ' ' << d.box.y1
         << ' ' << d.box.x2 << ' ' << d.box.y2 << '\n';
    const std::string s = os.str();
    write_file_bytes(dets_path, s.data(), s.size());
  }
  return 0;
}

inline int cmd_viz_masks(const CommonOpts& common, std::string ckpt, const std::string& split_name,
                         int n) {
  const TrainConfig cfg = common.build(false);
  if (!mode_uses_asdn(cfg.adversary_mode()))
    throw ConfigError("checkpoint has no occlusion-adversary weights: mode '" + cfg.mode +
                      "' never trains one (use a run with mode asdn, fixed_asdn, or full)");
  Trainer t(cfg);
  if (ckpt.empty()) ckpt = default_checkpoint(cfg);
  load_into(t, ckpt);
  const DatasetSplit split = load_split(cfg.data_root, split_name);
  const DetectorConfig dcfg = t.dcfg;
  Rng viz_rng(mix_seed(cfg.seed, fnv1a("viz-masks")));
  std::filesystem::create_directories(cfg.out_dir);
  int written = 0;
  for (std::size_t i = 0; i < split.items.size() && written < n; ++i) {
    const Tensor3<float> img = image_to_tensor<float>(load_image(split, i));
    Rng prng = proposal_stream(cfg, split_name, static_cast<std::uint64_t>(i));
    const std::vector<Box> props = propose(split.items[i].boxes, img.w, img.h, cfg, prng);
    const std::vector<DetectionLabel> labels =
        assign_labels(props, split.items[i].boxes, split.items[i].classes, cfg);
    BackboneCache<float> bc;
    const Tensor3<float>& feat = extract_features(img, t.backbone, bc);
    for (std::size_t p = 0; p < props.size() && written < n; ++p) {
      if (!labels[p].is_foreground()) continue;
      const RoiPooled<float> pooled = roi_pool(feat, dcfg.stride, props[p], dcfg.d);
      AsdnCache<float> cache;
      const Grid<float> heat = asdn_forward(pooled.x, t.asdn, cache);
      const OcclusionMask mask = sample_binary_mask(heat, viz_rng);
      const int d = heat.d;
      std::vector<std::uint8_t> hv(static_cast<std::size_t>(d) * d), mv(hv.size());
      for (std::size_t k = 0; k < hv.size(); ++k) {
        hv[k] = static_cast<std::uint8_t>(std::lround(std::clamp(heat.v[k], 0.0f, 1.0f) * 255.0f));
        mv[k] = mask.bits[k] != 0 ? 0 : 255;  // dark cell = dropped
      }
      std::ostringstream stem;
      stem << "viz_" << written;
      const std::filesystem::path dir(cfg.out_dir);
      write_pgm((dir / (stem.str() + "_heat.pgm")).string(), d, d, hv);
      write_pgm((dir / (stem.str() + "_mask.pgm")).string(), d, d, mv);
      ++written;
    }
  }
  std::cout << "wrote " << 2 * written << " files under " << cfg.out_dir << '\n';
  return 0;
}

}  // namespace cli_detail

// args excludes the program name. Returns the process exit code.
inline int run_cli(const std::vector<std::string>& args) {
  using namespace cli_detail;
  CLI::App app{"two-stage detector trained against feature-space occlusion/rotation adversaries "
               "on a synthetic shapes benchmark"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  CLI::App* gen = app.add_subcommand("gen-data", "generate the shapes dataset and its manifest");
  CommonOpts gen_c;
  gen_c.attach(gen, true, "dataset output directory (required)", false);
  int gen_images = 0;
  CLI::Option* o_images = gen->add_option("--images", gen_images, "training images to generate");

  CLI::App* train = app.add_subcommand("train", "run the staged training loop");
  CommonOpts train_c;
  train_c.attach(train, false, "run directory for checkpoints and logs", true);
  std::uint64_t stop_after = 0;
  train->add_option("--stop-after", stop_after,
                    "checkpoint and exit after this many iterations (0 = run to completion)");
  bool quiet = false;
  train->add_flag("--quiet", quiet, "suppress progress lines on stderr");

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  CommonOpts ev_c;
  ev_c.attach(ev, false, "run directory (locates default checkpoint and report)", true);
  std::string ev_ckpt, ev_split = "test_clean", ev_baseline, ev_report, ev_plot, ev_dets;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint file (default: ckpt_final.bin under --out)");
  ev->add_option("--split", ev_split, "dataset split name");
  ev->add_option("--baseline", ev_baseline, "earlier report; adds per-class delta rows");
  ev->add_option("--report", ev_report, "report output path");
  ev->add_option("--plot", ev_plot, "write a per-class AP/delta bar chart (PPM)");
  ev->add_option("--dets", ev_dets, "dump raw detections to this file");

  CLI::App* viz = app.add_subcommand("viz-masks", "render adversary heatmaps and sampled masks");
  CommonOpts viz_c;
  viz_c.attach(viz, false, "output directory for PGM files", true);
  std::string viz_ckpt, viz_split = "test_clean";
  int viz_n = 8;
  viz->add_option("--ckpt", viz_ckpt, "checkpoint file (default: ckpt_final.bin under --out)");
  viz->add_option("--split", viz_split, "dataset split name");
  viz->add_option("--n", viz_n, "number of foreground proposals to render");

  int rc = 0;
  gen->callback([&] { rc = cmd_gen_data(gen_c, o_images, gen_images); });
  train->callback([&] { rc = cmd_train(train_c, stop_after, quiet); });
  ev->callback([&] { rc = cmd_eval(ev_c, ev_ckpt, ev_split, ev_baseline, ev_report, ev_plot, ev_dets); });
  viz->callback([&] { rc = cmd_viz_masks(viz_c, viz_ckpt, viz_split, viz_n); });

  std::vector<std::string> argv_s;
  argv_s.reserve(args.size() + 1);
  argv_s.push_back("afrcnn");
  for (const std::string& a : args) argv_s.push_back(a);
  std::vector<char*> argv;
  for (std::string& s : argv_s) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const StateMismatchError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return rc;
}

}  // namespace afrcnn
