#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "afrcnn/checkpoint.hpp"
#include "afrcnn/config.hpp"
#include "afrcnn/datagen.hpp"
#include "afrcnn/detector.hpp"
#include "afrcnn/eval.hpp"
#include "afrcnn/fusion.hpp"

namespace afrcnn {

// Stage-wise schedule: (1) detector warm-up, (2) occlusion-adversary
// pretraining on exhaustively mined hard windows with the detector frozen,
// (3) joint optimization. Per joint iteration the batch holds two images:
// the first passes its foreground features through the adversary stage, the
// second stays clean; labels are never modified.

struct ItemRecord {
  int image_slot = 0;      // position of the owning image in the batch; 0 is the adversarial one
  int cls_assigned = 0;    // label from dataset assignment
  int cls_used = 0;        // label the loss actually saw
  bool foreground = false;
  bool adversary_ran = false;
};

struct IterationRecord {
  std::uint64_t iter = 0;  // global, 1-based
  int stage = 0;
  double loss = 0.0;
  double lr = 0.0;
  AdversaryMode mode = AdversaryMode::None;
  bool skipped = false;
  std::vector<ItemRecord> items;
  std::vector<int> adversary_ran_per_image;
};

using IterObserver = std::function<void(const IterationRecord&)>;

struct RunArtifacts {
  std::string out_dir;
  std::string metric_log;
  std::string eval_log;
  std::string latest_checkpoint;
  std::string final_checkpoint;
  std::uint64_t final_hash = 0;
  bool completed = false;
  int skipped_iters = 0;
};

struct PreppedImage {
  Tensor3<float> img;
  std::vector<Box> proposals;
  std::vector<DetectionLabel> labels;
  std::vector<int> fg_pool, bg_pool;
};

namespace detail {

inline std::vector<NamedTensor<float>> concat_groups(std::vector<NamedTensor<float>> a,
                                                     std::vector<NamedTensor<float>> b) {
  for (auto& t : b) a.push_back(std::move(t));
  return a;
}

inline std::vector<NamedTensor<float>> prefixed(const std::string& prefix,
                                                std::vector<NamedTensor<float>> ts) {
  for (auto& t : ts) t.name = prefix + t.name;
  return ts;
}

// Pool indices: without replacement while the pool lasts, then uniform with
// replacement.
inline std::vector<int> draw_from_pool(const std::vector<int>& pool, int count, Rng& rng) {
  std::vector<int> out;
  if (pool.empty() || count <= 0) return out;
  const int head = std::min<int>(count, static_cast<int>(pool.size()));
  for (const int i : rng.sample_without_replacement(static_cast<int>(pool.size()), head))
    out.push_back(pool[static_cast<std::size_t>(i)]);
  for (int k = head; k < count; ++k)
    out.push_back(pool[static_cast<std::size_t>(rng.uniform_index(static_cast<int>(pool.size())))]);
  return out;
}

}  // namespace detail

inline std::uint64_t hash_tensors(std::vector<NamedTensor<float>> ts) {
  std::uint64_t h = fnv1a("tensors");
  for (const auto& t : ts) {
    h = fnv1a(t.name, h);
    h = fnv1a(t.data->data(), t.data->size() * sizeof(float), h);
  }
  return h;
}

class Trainer {
 public:
  TrainConfig cfg;
  DetectorConfig dcfg;
  BackboneParams<float> backbone, g_backbone, m_backbone;
  HeadParams<float> heads, g_heads, m_heads;
  AsdnParams<float> asdn, g_asdn, m_asdn;
  AstnParams<float> astn, g_astn, m_astn;
  Rng rng{0};
  std::uint64_t iter = 0;  // completed iterations, global across stages
  int skipped_iters = 0;
  std::vector<PreppedImage> data;

  explicit Trainer(const TrainConfig& c)
      : cfg(c),
        dcfg(detector_config(c)),
        backbone(dcfg),
        g_backbone(dcfg),
        m_backbone(dcfg),
        heads(dcfg),
        g_heads(dcfg),
        m_heads(dcfg),
        asdn(c.pooled_feature_len(), c.pool_dim),
        g_asdn(c.pooled_feature_len(), c.pool_dim),
        m_asdn(c.pooled_feature_len(), c.pool_dim),
        astn(c.pooled_feature_len()),
        g_astn(c.pooled_feature_len()),
        m_astn(c.pooled_feature_len()) {
    cfg.validate();
  }

  // --- parameter groups ----------------------------------------------------

  std::vector<NamedTensor<float>> detector_params() {
    return detail::concat_groups(backbone.tensors(), heads.tensors());
  }
  std::vector<NamedTensor<float>> detector_grads() {
    return detail::concat_groups(g_backbone.tensors(), g_heads.tensors());
  }
  std::vector<NamedTensor<float>> detector_momenta() {
    return detail::concat_groups(m_backbone.tensors(), m_heads.tensors());
  }

  // Which modules count as training state depends on the mode; a baseline
  // checkpoint carries no adversary weights at all.
  std::vector<NamedTensor<float>> state_params() {
    std::vector<NamedTensor<float>> out = detector_params();
    const AdversaryMode m = cfg.adversary_mode();
    if (mode_uses_asdn(m)) out = detail::concat_groups(std::move(out), asdn.tensors());
    if (mode_uses_astn(m)) out = detail::concat_groups(std::move(out), astn.tensors());
    return out;
  }
  std::vector<NamedTensor<float>> state_momenta() {
    std::vector<NamedTensor<float>> out = detector_momenta();
    const AdversaryMode m = cfg.adversary_mode();
    if (mode_uses_asdn(m)) out = detail::concat_groups(std::move(out), m_asdn.tensors());
    if (mode_uses_astn(m)) out = detail::concat_groups(std::move(out), m_astn.tensors());
    return out;
  }
  std::vector<NamedTensor<float>> checkpoint_tensors() {
    return detail::concat_groups(state_params(), detail::prefixed("momentum.", state_momenta()));
  }

  void init_params() {
    Rng init_rng(mix_seed(cfg.seed, fnv1a("param-init")));
    init_backbone(backbone, init_rng);
    init_heads(heads, init_rng);
    init_asdn(asdn, init_rng);
    init_astn(astn, init_rng);
    for (auto& t : detail::concat_groups(detector_momenta(),
                                         detail::concat_groups(m_asdn.tensors(), m_astn.tensors())))
      std::fill(t.data->begin(), t.data->end(), 0.0f);
    rng = Rng(mix_seed(cfg.seed, fnv1a("train-loop")));
    iter = 0;
  }

  // --- data ----------------------------------------------------------------

  void load_train_data() {
    if (!data.empty()) return;
    const DatasetSplit split = load_split(cfg.data_root, "train");
    prep_data(split, "train");
  }

  void prep_data(const DatasetSplit& split, const std::string& split_name) {
    const int n = static_cast<int>(split.items.size());
    data.assign(static_cast<std::size_t>(n), {});
    parallel_for(n, [&](int i) {
      const std::size_t s = static_cast<std::size_t>(i);
      PreppedImage& pi = data[s];
      pi.img = image_to_tensor<float>(load_image(split, s));
      Rng prng = proposal_stream(cfg, split_name, static_cast<std::uint64_t>(i));
      pi.proposals = propose(split.items[s].boxes, pi.img.w, pi.img.h, cfg, prng);
      pi.labels = assign_labels(pi.proposals, split.items[s].boxes, split.items[s].classes, cfg);
      for (std::size_t p = 0; p < pi.labels.size(); ++p) {
        if (pi.labels[p].is_foreground()) pi.fg_pool.push_back(static_cast<int>(p));
        else if (pi.labels[p].is_background()) pi.bg_pool.push_back(static_cast<int>(p));
      }
    });
  }

  // --- schedule ------------------------------------------------------------

  int stage2_iters() const {
    return mode_uses_asdn(cfg.adversary_mode()) ? cfg.eff_asdn_pretrain() : 0;
  }
  std::uint64_t stage1_end() const { return static_cast<std::uint64_t>(cfg.eff_warmup()); }
  std::uint64_t stage2_end() const { return stage1_end() + static_cast<std::uint64_t>(stage2_iters()); }
  std::uint64_t total_iters() const { return stage2_end() + static_cast<std::uint64_t>(cfg.eff_joint()); }

  int stage_for(std::uint64_t it) const {
    if (it < stage1_end()) return 1;
    if (it < stage2_end()) return 2;
    if (it < total_iters()) return 3;
    return 4;
  }

  double current_lr(int stage) const {
    if (stage != 3) return cfg.base_lr;
    const std::uint64_t in_joint = iter - stage2_end();
    return in_joint < static_cast<std::uint64_t>(cfg.eff_lr_decay()) ? cfg.base_lr
                                                                     : cfg.base_lr / 10.0;
  }

  SgdOptions<float> sgd_options(double lr) const {
    SgdOptions<float> opt;
    opt.lr = static_cast<float>(lr);
    opt.momentum = static_cast<float>(cfg.momentum);
    opt.clip_norm = cfg.clip_gradients ? static_cast<float>(cfg.clip_norm) : -1.0f;
    return opt;
  }

  // --- iterations ----------------------------------------------------------

  IterationRecord run_iteration() {
    const int stage = stage_for(iter);
    IterationRecord rec = stage == 2 ? asdn_pretrain_iteration() : joint_iteration(stage);
    ++iter;
    rec.iter = iter;
    if (rec.skipped) ++skipped_iters;
    if (!std::isfinite(rec.loss))
      throw std::runtime_error("training diverged: non-finite loss at iteration " +
                               std::to_string(rec.iter) + ", lr " + std::to_string(rec.lr));
    return rec;
  }

  IterationRecord joint_iteration(int stage) {
    const AdversaryMode mode = stage == 3 ? cfg.adversary_mode() : AdversaryMode::None;
    const double lr = current_lr(stage);
    IterationRecord rec;
    rec.stage = stage;
    rec.lr = lr;
    rec.mode = mode;
    rec.adversary_ran_per_image.assign(static_cast<std::size_t>(cfg.images_per_batch), 0);

    struct AdvItem {
      Tensor3<float> pooled;
      AdversarialRecord<float> fwd;
      DetectionLabel label;
    };
    std::vector<AdvItem> adv_items;

    zero_grads(detector_grads());
    AdversaryStage<float> adv_stage{mode, &asdn, &astn, &heads, cfg.astn_single_angle};
    const int per_image = cfg.proposals_per_image();
    const int fg_want = std::max(1, static_cast<int>(std::lround(cfg.fg_fraction * per_image)));
    const float inv_n = 1.0f / static_cast<float>(cfg.proposals_per_batch);
    double total_loss = 0.0;
    std::vector<float> dlogits, dbbox, dx;
    HeadCache<float> hc;

    for (int s = 0; s < cfg.images_per_batch; ++s) {
      const int img_idx = rng.uniform_index(static_cast<int>(data.size()));
      PreppedImage& pi = data[static_cast<std::size_t>(img_idx)];
      const int n_fg = std::min<int>(fg_want, static_cast<int>(pi.fg_pool.size()));
      std::vector<int> chosen = detail::draw_from_pool(pi.fg_pool, n_fg, rng);
      const std::vector<int> bgs = detail::draw_from_pool(
          pi.bg_pool.empty() ? pi.fg_pool : pi.bg_pool, per_image - n_fg, rng);
      chosen.insert(chosen.end(), bgs.begin(), bgs.end());

      BackboneCache<float> bc;
      const Tensor3<float>& feat = extract_features(pi.img, backbone, bc);
      Tensor3<float> dfeat(feat.h, feat.w, feat.c);

      for (const int p : chosen) {
        const DetectionLabel label = pi.labels[static_cast<std::size_t>(p)];
        Box box = pi.proposals[static_cast<std::size_t>(p)];
        const bool on_adv_image = stage == 3 && s == 0 && label.is_foreground();
        bool ran = false;
        if (on_adv_image && mode == AdversaryMode::RandomJitter) {
          box = jitter_box(box, pi.img.w, pi.img.h, cfg.mode_jitter_frac, rng);
          ran = true;
        }
        RoiPooled<float> pooled = roi_pool(feat, dcfg.stride, box, dcfg.d);
        AdvItem item;
        const Tensor3<float>* used = &pooled.x;
        const bool through_stage = on_adv_image && mode != AdversaryMode::None &&
                                   mode != AdversaryMode::RandomJitter;
        if (through_stage) {
          item.fwd = adversarial_forward(pooled.x, adv_stage, label, rng);
          used = &item.fwd.out;
          ran = item.fwd.modified;
        }
        const DetectorOutput<float> out = forward_heads(*used, heads, hc);
        total_loss += static_cast<double>(detector_loss(out, label));
        detector_loss_grad(out, label, inv_n, dlogits, dbbox);
        dx.assign(static_cast<std::size_t>(dcfg.pooled_dim()), 0.0f);
        heads_backward(heads, hc, dlogits, dbbox, &dx, &g_heads);
        Tensor3<float> dused(dcfg.d, dcfg.d, dcfg.bb_c3);
        dused.v.assign(dx.begin(), dx.end());
        const Tensor3<float> dpooled =
            through_stage ? adversarial_backward_input(pooled.x, item.fwd, dused) : dused;
        roi_pool_backward(dpooled, pooled.argmax, dfeat);

        rec.items.push_back({s, pi.labels[static_cast<std::size_t>(p)].cls, label.cls,
                             label.is_foreground(), ran});
        if (ran) ++rec.adversary_ran_per_image[static_cast<std::size_t>(s)];
        if (through_stage && item.fwd.modified) {
          item.pooled = std::move(pooled.x);
          item.label = label;
          adv_items.push_back(std::move(item));
        }
      }
      backbone_backward(pi.img, backbone, bc, std::move(dfeat), &g_backbone);
    }

    rec.loss = total_loss / cfg.proposals_per_batch;
    sgd_step(detector_params(), detector_grads(), detector_momenta(), sgd_options(lr));

    if (stage == 3 && (mode == AdversaryMode::Asdn || mode == AdversaryMode::Full))
      asdn_online_step(adv_items, lr);
    if (stage == 3 && (mode == AdversaryMode::Astn || mode == AdversaryMode::Full))
      astn_step(adv_items, lr);
    return rec;
  }

  IterationRecord asdn_pretrain_iteration() {
    IterationRecord rec;
    rec.stage = 2;
    rec.lr = cfg.base_lr;
    rec.mode = cfg.adversary_mode();
    std::vector<Tensor3<float>> feats;
    std::vector<OcclusionMask> targets;
    for (int s = 0; s < cfg.images_per_batch &&
                    static_cast<int>(feats.size()) < cfg.asdn_pretrain_pairs;
         ++s) {
      const int img_idx = rng.uniform_index(static_cast<int>(data.size()));
      PreppedImage& pi = data[static_cast<std::size_t>(img_idx)];
      if (pi.fg_pool.empty()) continue;
      BackboneCache<float> bc;
      const Tensor3<float>& feat = extract_features(pi.img, backbone, bc);
      const int want = cfg.asdn_pretrain_pairs - static_cast<int>(feats.size());
      for (const int p : detail::draw_from_pool(pi.fg_pool, std::min<int>(want, static_cast<int>(pi.fg_pool.size())), rng)) {
        const DetectionLabel& label = pi.labels[static_cast<std::size_t>(p)];
        RoiPooled<float> pooled =
            roi_pool(feat, dcfg.stride, pi.proposals[static_cast<std::size_t>(p)], dcfg.d);
        targets.push_back(exhaustive_hard_window(pooled.x, label, heads));
        feats.push_back(std::move(pooled.x));
      }
    }
    if (feats.empty()) {
      rec.skipped = true;
      rec.loss = 0.0;
      return rec;
    }
    zero_grads(g_asdn.tensors());
    std::vector<AsdnCache<float>> caches(feats.size());
    std::vector<Grid<float>> heats;
    for (std::size_t i = 0; i < feats.size(); ++i)
      heats.push_back(asdn_forward(feats[i], asdn, caches[i]));
    const AsdnLossKind kind = cfg.asdn_loss_kind();
    rec.loss = static_cast<double>(asdn_loss(heats, targets, kind));
    const std::vector<Grid<float>> grads = asdn_loss_grad(heats, targets, kind);
    for (std::size_t i = 0; i < feats.size(); ++i)
      asdn_backward(asdn, caches[i], grads[i], g_asdn);
    sgd_step(asdn.tensors(), g_asdn.tensors(), m_asdn.tensors(), sgd_options(cfg.base_lr));
    return rec;
  }

 private:
  template <typename AdvItems>
  void asdn_online_step(const AdvItems& items, double lr) {
    if (items.empty()) return;
    std::vector<MaskCandidate<float>> cands;
    for (const auto& it : items) cands.push_back({&it.pooled, it.fwd.mask, it.label});
    const std::vector<HardMaskSelection> sel = select_hard_masks(cands, heads, cfg.delta);
    if (sel.empty()) return;
    std::vector<Grid<float>> heats;
    std::vector<OcclusionMask> targets;
    for (const auto& s : sel) {
      heats.push_back(items[static_cast<std::size_t>(s.index)].fwd.asdn_cache.heat);
      targets.push_back(items[static_cast<std::size_t>(s.index)].fwd.mask);
    }
    const AsdnLossKind kind = cfg.asdn_loss_kind();
    const std::vector<Grid<float>> grads = asdn_loss_grad(heats, targets, kind);
    zero_grads(g_asdn.tensors());
    for (std::size_t i = 0; i < sel.size(); ++i)
      asdn_backward(asdn, items[static_cast<std::size_t>(sel[i].index)].fwd.asdn_cache, grads[i],
                    g_asdn);
    sgd_step(asdn.tensors(), g_asdn.tensors(), m_asdn.tensors(), sgd_options(lr));
  }

  template <typename AdvItems>
  void astn_step(const AdvItems& items, double lr) {
    if (items.empty()) return;
    int n_rot = 0;
    for (const auto& it : items)
      if (it.fwd.has_rotation) ++n_rot;
    if (n_rot == 0) return;
    zero_grads(g_astn.tensors());
    const float scale = 1.0f / static_cast<float>(n_rot);
    HeadCache<float> hc;
    std::vector<float> dlogits, dx;
    const std::vector<float> dbbox(static_cast<std::size_t>(dcfg.num_classes) * 4, 0.0f);
    for (const auto& it : items) {
      if (!it.fwd.has_rotation) continue;
      const Tensor3<float>& rin = it.fwd.has_mask ? it.fwd.masked : it.pooled;
      const DetectorOutput<float> out = forward_heads(it.fwd.out, heads, hc);
      astn_adversarial_loss_grad(out, scale, dlogits);
      dx.assign(static_cast<std::size_t>(dcfg.pooled_dim()), 0.0f);
      heads_backward(heads, hc, dlogits, dbbox, &dx, static_cast<HeadParams<float>*>(nullptr));
      Tensor3<float> dout(dcfg.d, dcfg.d, dcfg.bb_c3);
      dout.v.assign(dx.begin(), dx.end());
      std::array<float, kNumBlocks> ddeg{};
      rotate_blocks_backward(rin, it.fwd.spec, dout, static_cast<Tensor3<float>*>(nullptr), &ddeg);
      localise_backward(astn, it.fwd.loc_cache, ddeg, g_astn);
    }
    sgd_step(astn.tensors(), g_astn.tensors(), m_astn.tensors(), sgd_options(lr));
  }

 public:
  // --- experiment driver ---------------------------------------------------

  RunArtifacts run(IterObserver obs = {}, std::uint64_t stop_after = 0) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    RunArtifacts art;
    art.out_dir = cfg.out_dir;
    art.metric_log = (fs::path(cfg.out_dir) / "metrics.txt").string();
    art.eval_log = (fs::path(cfg.out_dir) / "eval_log.txt").string();
    art.latest_checkpoint = (fs::path(cfg.out_dir) / "ckpt_latest.bin").string();
    art.final_checkpoint = (fs::path(cfg.out_dir) / "ckpt_final.bin").string();
    const std::uint64_t my_hash = config_hash(cfg);

    if (fs::exists(art.latest_checkpoint)) {
      const CheckpointMeta meta = peek_checkpoint(art.latest_checkpoint);
      if (meta.config_hash != my_hash)
        throw StateMismatchError("resume refused: checkpoint config hash " +
                                 hex64(meta.config_hash) + " does not match current config " +
                                 hex64(my_hash));
      load_checkpoint(art.latest_checkpoint, checkpoint_tensors());
      rng.load_state(meta.rng_state);
      iter = meta.iteration;
      if (meta.stage == 4 && fs::exists(art.final_checkpoint)) {
        art.completed = true;
        art.final_hash = file_hash(art.final_checkpoint);
        return art;
      }
    } else {
      init_params();
    }
    truncate_logs(art, iter);
    load_train_data();

    std::ofstream mlog(art.metric_log, std::ios::app);
    std::ofstream elog(art.eval_log, std::ios::app);
    if (!mlog || !elog) throw std::runtime_error("cannot open logs under " + cfg.out_dir);

    while (iter < total_iters()) {
      const IterationRecord rec = run_iteration();
      mlog << format_metric_line(rec) << '\n';
      if (obs) obs(rec);
      const bool boundary = iter == stage1_end() || iter == stage2_end() || iter == total_iters();
      if (boundary && rec.iter > 0) stage_end_eval(elog, rec.stage);
      const bool ckpt_due = iter % static_cast<std::uint64_t>(cfg.checkpoint_every) == 0 ||
                            iter == total_iters() || (stop_after > 0 && iter >= stop_after);
      if (ckpt_due) {
        mlog.flush();
        elog.flush();
        save_state(art.latest_checkpoint);
      }
      if (stop_after > 0 && iter >= stop_after && iter < total_iters()) {
        art.skipped_iters = skipped_iters;
        return art;  // interrupted; rerun resumes from the checkpoint just written
      }
    }
    save_state(art.latest_checkpoint);
    save_state(art.final_checkpoint);
    art.final_hash = file_hash(art.final_checkpoint);
    art.completed = true;
    art.skipped_iters = skipped_iters;
    return art;
  }

  void save_state(const std::string& path) {
    CheckpointMeta meta;
    meta.config_hash = config_hash(cfg);
    meta.iteration = iter;
    meta.stage = static_cast<std::uint32_t>(stage_for(iter));
    meta.rng_state = rng.save_state();
    save_checkpoint(path, meta, checkpoint_tensors());
  }

  std::string format_metric_line(const IterationRecord& rec) const {
    std::ostringstream os;
    os << rec.iter << ' ';
    os.precision(6);
    os.setf(std::ios::fixed);
    os << rec.loss << ' ';
    os.unsetf(std::ios::fixed);
    os.precision(10);
    os << rec.lr << ' ' << rec.stage << ' ' << mode_name(rec.mode);
    return os.str();
  }

 private:
  // Drops log lines past the resume iteration so an interrupted run replays
  // into the exact same logs.
  void truncate_logs(const RunArtifacts& art, std::uint64_t keep_upto) {
    for (const std::string& path : {art.metric_log, art.eval_log}) {
      std::string kept;
      if (std::filesystem::exists(path)) {
        std::istringstream is(read_file_text(path));
        std::string line;
        while (std::getline(is, line)) {
          if (line.empty()) continue;
          std::uint64_t it = 0;
          if (path == art.metric_log) {
            std::istringstream ls(line);
            ls >> it;
          } else {
            std::istringstream ls(line);
            std::string w;
            ls >> w >> w >> w >> it;  // "stage <s> iter <i> ..."
          }
          if (it <= keep_upto) kept += line + '\n';
        }
      }
      write_file_bytes(path, kept.data(), kept.size());
    }
  }

  void stage_end_eval(std::ofstream& elog, int finished_stage) {
    try {
      if (eval_split_.items.empty()) eval_split_ = load_split(cfg.data_root, "test_clean");
      const EvalReport rep = evaluate_split(backbone, heads, cfg, eval_split_, "test_clean");
      elog << "stage " << finished_stage << " iter " << iter << " split test_clean mAP ";
      elog.precision(6);
      elog.setf(std::ios::fixed);
      elog << rep.map << '\n';
      elog.unsetf(std::ios::fixed);
    } catch (const std::exception& e) {
      elog << "stage " << finished_stage << " iter " << iter << " eval_skipped " << e.what() << '\n';
    }
  }

  DatasetSplit eval_split_;
};

// Convenience wrapper: build a trainer and run the whole experiment.
inline RunArtifacts run_experiment(const TrainConfig& cfg, IterObserver obs = {},
                                   std::uint64_t stop_after = 0) {
  Trainer t(cfg);
  return t.run(std::move(obs), stop_after);
}

}  // namespace afrcnn
