#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "afrcnn/boxes.hpp"
#include "afrcnn/config.hpp"
#include "afrcnn/datagen.hpp"
#include "afrcnn/detector.hpp"
#include "afrcnn/image.hpp"

namespace afrcnn {

struct Detection {
  int image_id = 0;
  Box box;
  int cls = 0;
  float confidence = 0;
};

struct GtInstance {
  int image_id = 0;
  Box box;
  int cls = 0;
};

inline const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names = {"disc", "triangle", "bar"};
  return names;
}

inline DetectorConfig detector_config(const TrainConfig& cfg) {
  DetectorConfig d;
  d.num_classes = cfg.num_classes;
  d.d = cfg.pool_dim;
  d.stride = cfg.stride;
  d.bb_c1 = cfg.bb_c1;
  d.bb_c2 = cfg.bb_c2;
  d.bb_c3 = cfg.bb_c3;
  d.head_hidden = cfg.head_hidden;
  return d;
}

// Greedy NMS: repeatedly keep the highest-confidence remaining detection and
// suppress same-class, same-image detections overlapping it above thresh.
// Confidence ties break by insertion order.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double thresh) {
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&dets](std::size_t a, std::size_t b) {
    return dets[a].confidence > dets[b].confidence;
  });
  std::vector<bool> suppressed(dets.size(), false);
  std::vector<Detection> kept;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    kept.push_back(dets[i]);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (suppressed[j] || dets[j].cls != dets[i].cls || dets[j].image_id != dets[i].image_id)
        continue;
      if (iou(dets[i].box, dets[j].box) > thresh) suppressed[j] = true;
    }
  }
  return kept;
}

// VOC-style AP with all-point interpolation. nullopt when the class appears
// in no ground truth (mAP excludes it and logs a note).
inline std::optional<double> average_precision(const std::vector<Detection>& dets,
                                               const std::vector<GtInstance>& gts, int cls,
                                               double iou_thresh = 0.5) {
  std::vector<std::size_t> gt_idx;
  for (std::size_t i = 0; i < gts.size(); ++i)
    if (gts[i].cls == cls) gt_idx.push_back(i);
  const std::size_t npos = gt_idx.size();
  if (npos == 0) return std::nullopt;

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (dets[i].cls == cls) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&dets](std::size_t a, std::size_t b) {
    return dets[a].confidence > dets[b].confidence;
  });
  if (order.empty()) return 0.0;

  std::vector<bool> matched(gt_idx.size(), false);
  std::vector<double> recall, precision;
  std::size_t tp = 0, fp = 0;
  for (const std::size_t di : order) {
    double best = 0.0;
    std::size_t best_g = gt_idx.size();
    for (std::size_t g = 0; g < gt_idx.size(); ++g) {
      if (matched[g] || gts[gt_idx[g]].image_id != dets[di].image_id) continue;
      const double v = iou(dets[di].box, gts[gt_idx[g]].box);
      if (v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best_g < gt_idx.size() && best >= iou_thresh) {
      matched[best_g] = true;
      ++tp;
    } else {
      ++fp;
    }
    recall.push_back(static_cast<double>(tp) / static_cast<double>(npos));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }

  // precision envelope from the right, then sum over recall steps
  std::vector<double> env = precision;
  for (std::size_t i = env.size(); i-- > 1;) env[i - 1] = std::max(env[i - 1], env[i]);
  double ap = 0.0;
  double prev_r = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_r) * env[i];
    prev_r = recall[i];
  }
  return ap;
}

struct EvalReport {
  std::vector<std::optional<double>> ap;  // index = class - 1
  double map = 0.0;
  std::vector<std::optional<double>> delta;  // vs baseline; empty when none given
  std::vector<std::string> notes;
};

inline double mean_defined_ap(const std::vector<std::optional<double>>& ap,
                              std::vector<std::string>* notes) {
  double sum = 0.0;
  int n = 0;
  for (std::size_t k = 0; k < ap.size(); ++k) {
    if (ap[k].has_value()) {
      sum += *ap[k];
      ++n;
    } else if (notes != nullptr) {
      notes->push_back("AP undefined for class " + class_names()[k] + ": no ground truth; excluded from mAP");
    }
  }
  return n > 0 ? sum / n : 0.0;
}

inline EvalReport make_report(const std::vector<Detection>& dets, const std::vector<GtInstance>& gts,
                              int num_classes, double iou_thresh, const EvalReport* baseline) {
  EvalReport rep;
  for (int k = 1; k <= num_classes; ++k) rep.ap.push_back(average_precision(dets, gts, k, iou_thresh));
  rep.map = mean_defined_ap(rep.ap, &rep.notes);
  if (baseline != nullptr) {
    for (int k = 0; k < num_classes; ++k) {
      if (rep.ap[static_cast<std::size_t>(k)].has_value() &&
          k < static_cast<int>(baseline->ap.size()) &&
          baseline->ap[static_cast<std::size_t>(k)].has_value())
        rep.delta.push_back(*rep.ap[static_cast<std::size_t>(k)] -
                            *baseline->ap[static_cast<std::size_t>(k)]);
      else
        rep.delta.push_back(std::nullopt);
    }
  }
  return rep;
}

inline std::string serialize_report(const EvalReport& rep) {
  std::ostringstream os;
  os.precision(6);
  os.setf(std::ios::fixed);
  for (std::size_t k = 0; k < rep.ap.size(); ++k) {
    os << class_names()[k] << ' ';
    if (rep.ap[k].has_value()) os << *rep.ap[k];
    else os << "undefined";
    os << '\n';
  }
  os << "mAP " << rep.map << '\n';
  for (std::size_t k = 0; k < rep.delta.size(); ++k) {
    if (!rep.delta[k].has_value()) continue;
    os << "delta_" << class_names()[k] << ' ' << *rep.delta[k] << '\n';
  }
  for (const auto& n : rep.notes) os << "note " << n << '\n';
  return os.str();
}

inline EvalReport parse_report(const std::string& text) {
  EvalReport rep;
  rep.ap.resize(class_names().size());
  rep.delta.clear();
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "mAP") {
      ls >> rep.map;
    } else if (key == "note") {
      std::string rest;
      std::getline(ls, rest);
      rep.notes.push_back(rest.empty() ? rest : rest.substr(1));
    } else if (key.rfind("delta_", 0) == 0) {
      const std::string name = key.substr(6);
      for (std::size_t k = 0; k < class_names().size(); ++k) {
        if (class_names()[k] == name) {
          if (rep.delta.size() < class_names().size()) rep.delta.resize(class_names().size());
          double v;
          ls >> v;
          rep.delta[k] = v;
        }
      }
    } else {
      for (std::size_t k = 0; k < class_names().size(); ++k) {
        if (class_names()[k] == key) {
          std::string v;
          ls >> v;
          if (v != "undefined") rep.ap[k] = std::stod(v);
        }
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Running the detector over a split
// ---------------------------------------------------------------------------

inline Rng proposal_stream(const TrainConfig& cfg, const std::string& split_name,
                           std::uint64_t index) {
  return Rng(mix_seed(cfg.seed, fnv1a("proposals:" + split_name), index));
}

template <typename T>
std::vector<Detection> detect_image(const Tensor3<T>& img, const std::vector<Box>& proposals,
                                    int image_id, const BackboneParams<T>& bb,
                                    const HeadParams<T>& heads, const DetectorConfig& dcfg,
                                    const TrainConfig& cfg) {
  BackboneCache<T> bc;
  const Tensor3<T>& feat = extract_features(img, bb, bc);
  std::vector<Detection> dets;
  HeadCache<T> hc;
  for (const Box& prop : proposals) {
    if (!prop.valid()) continue;
    const RoiPooled<T> pooled = roi_pool(feat, dcfg.stride, prop, dcfg.d);
    const DetectorOutput<T> out = forward_heads(pooled.x, heads, hc);
    for (int k = 1; k <= dcfg.num_classes; ++k) {
      const float score = static_cast<float>(out.cls_probs[static_cast<std::size_t>(k)]);
      if (score < cfg.score_thresh) continue;
      std::array<float, 4> t{};
      for (int j = 0; j < 4; ++j)
        t[static_cast<std::size_t>(j)] =
            static_cast<float>(out.bbox_pred[static_cast<std::size_t>((k - 1) * 4 + j)]);
      Box b = clip_box(decode_box(prop, t), img.w, img.h);
      if (!b.valid()) continue;
      dets.push_back({image_id, b, k, score});
    }
  }
  return nms(dets, cfg.nms_thresh);
}

template <typename T>
EvalReport evaluate_split(const BackboneParams<T>& bb, const HeadParams<T>& heads,
                          const TrainConfig& cfg, const DatasetSplit& split,
                          const std::string& split_name, const EvalReport* baseline = nullptr,
                          std::vector<Detection>* all_dets_out = nullptr) {
  const DetectorConfig dcfg = detector_config(cfg);
  const int n = static_cast<int>(split.items.size());
  std::vector<std::vector<Detection>> per_image(static_cast<std::size_t>(n));
  parallel_for(n, [&](int i) {
    const std::size_t slot = static_cast<std::size_t>(i);
    const ImageU8 raw = load_image(split, slot);
    const Tensor3<T> img = image_to_tensor<T>(raw);
    Rng prng = proposal_stream(cfg, split_name, static_cast<std::uint64_t>(i));
    const std::vector<Box> props =
        propose(split.items[slot].boxes, raw.w, raw.h, cfg, prng);
    per_image[slot] = detect_image(img, props, i, bb, heads, dcfg, cfg);
  });
  std::vector<Detection> dets;
  for (const auto& v : per_image) dets.insert(dets.end(), v.begin(), v.end());
  std::vector<GtInstance> gts;
  for (int i = 0; i < n; ++i) {
    const auto& item = split.items[static_cast<std::size_t>(i)];
    for (std::size_t j = 0; j < item.boxes.size(); ++j) {
      if (item.classes[j] < 1 || item.classes[j] > cfg.num_classes)
        throw ConfigError("dataset class id " + std::to_string(item.classes[j]) +
                          " outside the configured class count");
      gts.push_back({i, item.boxes[j], item.classes[j]});
    }
  }
  if (all_dets_out != nullptr) *all_dets_out = dets;
  return make_report(dets, gts, cfg.num_classes, cfg.eval_iou, baseline);
}

// Small bar chart of per-class AP (blue) or delta vs baseline (green up,
// red down), in the spirit of a per-class change plot.
inline ImageU8 report_chart(const EvalReport& rep) {
  const int W = 240, H = 160, axis = H / 2;
  ImageU8 img(W, H);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      auto* p = img.px(y, x);
      p[0] = p[1] = p[2] = 245;
    }
  for (int x = 0; x < W; ++x) {
    auto* p = img.px(axis, x);
    p[0] = p[1] = p[2] = 60;
  }
  const bool use_delta = !rep.delta.empty();
  const std::size_t k = rep.ap.size();
  const int bar_w = W / static_cast<int>(k * 2 + 1);
  for (std::size_t c = 0; c < k; ++c) {
    double v = 0.0;
    if (use_delta) v = rep.delta[c].value_or(0.0);
    else v = rep.ap[c].value_or(0.0);
    const double unit = use_delta ? 4.0 : 1.0;  // deltas are small; magnify
    int len = static_cast<int>(std::lround(std::min(1.0, std::abs(v) * unit) * (axis - 10)));
    const int x0 = bar_w * static_cast<int>(2 * c + 1);
    for (int x = x0; x < x0 + bar_w && x < W; ++x) {
      for (int d = 1; d <= len; ++d) {
        const int y = v >= 0 ? axis - d : axis + d;
        if (y < 0 || y >= H) continue;
        auto* p = img.px(y, x);
        if (!use_delta) {
          p[0] = 70;
          p[1] = 90;
          p[2] = 200;
        } else if (v >= 0) {
          p[0] = 60;
          p[1] = 170;
          p[2] = 60;
        } else {
          p[0] = 200;
          p[1] = 60;
          p[2] = 60;
        }
      }
    }
  }
  return img;
}

}  // namespace afrcnn
