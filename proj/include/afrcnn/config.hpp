#pragma once

#include <cctype>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

#include "afrcnn/common.hpp"
#include "afrcnn/fusion.hpp"

namespace afrcnn {

// Raised for malformed or inconsistent configuration; the CLI maps it to
// exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One flat config drives dataset generation, training and evaluation, so a
// run is fully described by a single diffable file. Schedule fields are
// paper-shaped counts; every stage length is divided by `scale` when used.
struct TrainConfig {
  // model
  int num_classes = 3;
  int image_size = 64;
  int pool_dim = 6;
  int stride = 4;
  int bb_c1 = 8;
  int bb_c2 = 16;
  int bb_c3 = 32;
  int head_hidden = 64;
  // schedule
  int scale = 10;
  int warmup_iters = 10000;
  int asdn_pretrain_iters = 10000;
  int joint_iters = 80000;
  int lr_decay_point = 60000;
  double base_lr = 0.001;
  double momentum = 0.9;
  double clip_norm = 10.0;
  bool clip_gradients = true;
  // batching
  int images_per_batch = 2;
  int proposals_per_batch = 32;
  double fg_fraction = 0.25;
  // adversary
  std::string mode = "none";
  double delta = 0.1;
  std::string asdn_loss = "agreement";
  int asdn_pretrain_pairs = 4;
  double mode_jitter_frac = 0.15;
  bool astn_single_angle = false;
  // label assignment
  double fg_thresh = 0.5;
  double bg_lo = 0.1;
  double bg_hi = 0.5;
  // dataset
  std::string data_root = "data";
  int train_images = 1000;
  int test_images = 300;
  double class_w1 = 0.4;
  double class_w2 = 0.3;
  double class_w3 = 0.3;
  int min_objects = 1;
  int max_objects = 4;
  double max_occlusion = 0.5;
  double occlude_prob = 0.75;
  int proposal_cap = 64;
  double jitter_frac = 0.25;
  // run
  std::uint64_t seed = 1;
  std::string out_dir = "runs/run";
  int checkpoint_every = 500;
  // eval
  double score_thresh = 0.05;
  double nms_thresh = 0.3;
  double eval_iou = 0.5;

  // Visits every field in declaration order; parse, serialize and hash all
  // walk the same list so they can never drift apart.
  template <typename F>
  void visit(F&& f) {
    f("num_classes", num_classes);
    f("image_size", image_size);
    f("pool_dim", pool_dim);
    f("stride", stride);
    f("bb_c1", bb_c1);
    f("bb_c2", bb_c2);
    f("bb_c3", bb_c3);
    f("head_hidden", head_hidden);
    f("scale", scale);
    f("warmup_iters", warmup_iters);
    f("asdn_pretrain_iters", asdn_pretrain_iters);
    f("joint_iters", joint_iters);
    f("lr_decay_point", lr_decay_point);
    f("base_lr", base_lr);
    f("momentum", momentum);
    f("clip_norm", clip_norm);
    f("clip_gradients", clip_gradients);
    f("images_per_batch", images_per_batch);
    f("proposals_per_batch", proposals_per_batch);
    f("fg_fraction", fg_fraction);
    f("mode", mode);
    f("delta", delta);
    f("asdn_loss", asdn_loss);
    f("asdn_pretrain_pairs", asdn_pretrain_pairs);
    f("mode_jitter_frac", mode_jitter_frac);
    f("astn_single_angle", astn_single_angle);
    f("fg_thresh", fg_thresh);
    f("bg_lo", bg_lo);
    f("bg_hi", bg_hi);
    f("data_root", data_root);
    f("train_images", train_images);
    f("test_images", test_images);
    f("class_w1", class_w1);
    f("class_w2", class_w2);
    f("class_w3", class_w3);
    f("min_objects", min_objects);
    f("max_objects", max_objects);
    f("max_occlusion", max_occlusion);
    f("occlude_prob", occlude_prob);
    f("proposal_cap", proposal_cap);
    f("jitter_frac", jitter_frac);
    f("seed", seed);
    f("out_dir", out_dir);
    f("checkpoint_every", checkpoint_every);
    f("score_thresh", score_thresh);
    f("nms_thresh", nms_thresh);
    f("eval_iou", eval_iou);
  }

  // Effective (desk-scale) iteration counts.
  int eff(int paper_iters) const { return paper_iters / scale; }
  int eff_warmup() const { return eff(warmup_iters); }
  int eff_asdn_pretrain() const { return eff(asdn_pretrain_iters); }
  int eff_joint() const { return eff(joint_iters); }
  int eff_lr_decay() const { return eff(lr_decay_point); }
  int proposals_per_image() const { return proposals_per_batch / images_per_batch; }
  int pooled_feature_len() const { return pool_dim * pool_dim * bb_c3; }

  AdversaryMode adversary_mode() const { return parse_mode(mode); }
  AsdnLossKind asdn_loss_kind() const {
    if (asdn_loss == "agreement") return AsdnLossKind::Agreement;
    if (asdn_loss == "bce") return AsdnLossKind::Bce;
    throw ConfigError("asdn_loss must be agreement or bce, got " + asdn_loss);
  }

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("config invariant violated: " + what);
    };
    need(num_classes >= 1, "num_classes >= 1");
    need(image_size >= 16, "image_size >= 16");
    need(pool_dim >= 3 && pool_dim % 3 == 0, "pool_dim >= 3 and divisible by 3");
    need(stride >= 1, "stride >= 1");
    need(bb_c1 >= 1 && bb_c2 >= 1 && bb_c3 >= 4, "backbone channel counts");
    need(bb_c3 % 4 == 0, "bb_c3 divisible by 4 (per-block rotation)");
    need(scale >= 1, "scale >= 1");
    need(warmup_iters >= 0 && asdn_pretrain_iters >= 0 && joint_iters >= 0,
         "iteration counts >= 0");
    need(lr_decay_point > 0 && lr_decay_point <= joint_iters,
         "0 < lr_decay_point <= joint_iters");
    need(base_lr > 0, "base_lr > 0");
    need(momentum >= 0 && momentum < 1, "momentum in [0, 1)");
    need(images_per_batch >= 1, "images_per_batch >= 1");
    need(proposals_per_batch >= images_per_batch &&
             proposals_per_batch % images_per_batch == 0,
         "proposals_per_batch divisible by images_per_batch");
    need(fg_fraction > 0 && fg_fraction <= 1, "fg_fraction in (0, 1]");
    need(delta >= 0 && delta < 1, "delta in [0, 1)");
    need(asdn_pretrain_pairs >= 1, "asdn_pretrain_pairs >= 1");
    need(bg_lo >= 0 && bg_lo < bg_hi && bg_hi <= fg_thresh && fg_thresh <= 1,
         "0 <= bg_lo < bg_hi <= fg_thresh <= 1");
    need(train_images >= 1 && test_images >= 1, "split sizes >= 1");
    need(class_w1 > 0 && class_w2 > 0 && class_w3 > 0, "class weights > 0");
    need(min_objects >= 1 && max_objects >= min_objects, "1 <= min_objects <= max_objects");
    need(max_occlusion >= 0 && max_occlusion <= 0.5, "max_occlusion in [0, 0.5]");
    need(occlude_prob >= 0 && occlude_prob <= 1, "occlude_prob in [0, 1]");
    need(proposal_cap >= 1, "proposal_cap >= 1");
    need(jitter_frac >= 0 && jitter_frac <= 0.5, "jitter_frac in [0, 0.5]");
    need(checkpoint_every >= 1, "checkpoint_every >= 1");
    need(score_thresh >= 0 && score_thresh < 1, "score_thresh in [0, 1)");
    need(nms_thresh >= 0 && nms_thresh <= 1, "nms_thresh in [0, 1]");
    need(eval_iou > 0 && eval_iou <= 1, "eval_iou in (0, 1]");
    try {
      parse_mode(mode);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    asdn_loss_kind();
  }
};

namespace detail {

inline std::string format_value(int v) { return std::to_string(v); }
inline std::string format_value(std::uint64_t v) { return std::to_string(v); }
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(const std::string& v) { return v; }
inline std::string format_value(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline void parse_value(const std::string& s, int& out) {
  std::size_t pos = 0;
  out = std::stoi(s, &pos);
  if (pos != s.size()) throw ConfigError("bad integer: " + s);
}
inline void parse_value(const std::string& s, std::uint64_t& out) {
  std::size_t pos = 0;
  out = std::stoull(s, &pos);
  if (pos != s.size()) throw ConfigError("bad integer: " + s);
}
inline void parse_value(const std::string& s, double& out) {
  std::size_t pos = 0;
  out = std::stod(s, &pos);
  if (pos != s.size()) throw ConfigError("bad number: " + s);
}
inline void parse_value(const std::string& s, bool& out) {
  if (s == "true" || s == "1") out = true;
  else if (s == "false" || s == "0") out = false;
  else throw ConfigError("bad boolean: " + s);
}
inline void parse_value(const std::string& s, std::string& out) { out = s; }

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace detail

inline std::string serialize_config(const TrainConfig& cfg) {
  std::ostringstream os;
  const_cast<TrainConfig&>(cfg).visit(
      [&os](const char* name, auto& field) { os << name << " = " << detail::format_value(field) << '\n'; });
  return os.str();
}

// Hash of the canonical serialization; stored in checkpoints so resume can
// refuse mismatched configs.
inline std::uint64_t config_hash(const TrainConfig& cfg) { return fnv1a(serialize_config(cfg)); }

inline void set_config_key(TrainConfig& cfg, const std::string& key, const std::string& value) {
  bool found = false;
  cfg.visit([&](const char* name, auto& field) {
    if (key == name) {
      detail::parse_value(value, field);
      found = true;
    }
  });
  if (!found) throw ConfigError("unknown config key: " + key);
}

// Flat `key = value` lines; '#' starts a comment; blank lines ignored.
inline TrainConfig parse_config(const std::string& text, TrainConfig base = TrainConfig{}) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    try {
      set_config_key(base, key, value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

}  // namespace afrcnn
