#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "afrcnn/boxes.hpp"
#include "afrcnn/nn.hpp"
#include "afrcnn/tensor.hpp"

namespace afrcnn {

// Detector geometry. K foreground classes plus background at index 0; pooled
// features are d x d x c with c = bb_c3.
struct DetectorConfig {
  int num_classes = 3;
  int d = 6;
  int stride = 4;
  int bb_c1 = 8, bb_c2 = 16, bb_c3 = 32;
  int head_hidden = 64;

  int pooled_dim() const { return d * d * bb_c3; }
};

// Assignment sentinel for proposals that are neither foreground nor
// background; they never contribute to any loss.
inline constexpr int kIgnoreLabel = -1;

struct DetectionLabel {
  int cls = 0;                    // 0 = background, -1 = ignored
  std::array<double, 4> loc{};    // regression target, valid iff foreground

  bool is_foreground() const { return cls > 0; }
  bool is_background() const { return cls == 0; }
  bool is_ignored() const { return cls == kIgnoreLabel; }
};

template <typename T>
struct DetectorOutput {
  std::vector<T> cls_probs;  // K+1, softmax-normalized
  std::vector<T> bbox_pred;  // K x 4, row k-1 for foreground class k
};

// ---------------------------------------------------------------------------
// Backbone: conv-relu, pool, conv-relu, pool, conv-relu. Total stride 4.
// ---------------------------------------------------------------------------

template <typename T>
struct BackboneParams {
  ConvParams<T> c1, c2, c3;

  explicit BackboneParams(const DetectorConfig& cfg = {})
      : c1(3, cfg.bb_c1), c2(cfg.bb_c1, cfg.bb_c2), c3(cfg.bb_c2, cfg.bb_c3) {}

  std::vector<NamedTensor<T>> tensors() {
    std::vector<NamedTensor<T>> out;
    for (auto& t : c1.tensors("backbone.c1")) out.push_back(t);
    for (auto& t : c2.tensors("backbone.c2")) out.push_back(t);
    for (auto& t : c3.tensors("backbone.c3")) out.push_back(t);
    return out;
  }

  void zero() { c1.zero(); c2.zero(); c3.zero(); }
};

template <typename T>
void init_backbone(BackboneParams<T>& p, Rng& rng) {
  init_conv(p.c1, rng);
  init_conv(p.c2, rng);
  init_conv(p.c3, rng);
}

template <typename T>
struct BackboneCache {
  Tensor3<T> a1, p1, a2, p2, a3;  // post-relu / post-pool activations
  std::vector<int> arg1, arg2;
};

template <typename T>
bool all_finite(const std::vector<T>& v) {
  for (const T x : v) {
    if (!std::isfinite(static_cast<double>(x))) return false;
  }
  return true;
}

// Whole-image feature extraction. Output is ceil(H/stride) x ceil(W/stride) x c.
template <typename T>
const Tensor3<T>& extract_features(const Tensor3<T>& img, const BackboneParams<T>& p,
                                   BackboneCache<T>& cache) {
  require_finite(img, "extract_features: image");
  if (!all_finite(p.c1.w) || !all_finite(p.c2.w) || !all_finite(p.c3.w))
    throw std::invalid_argument("extract_features: non-finite backbone weights");
  conv3x3_same(img, p.c1, cache.a1);
  relu_inplace(cache.a1);
  maxpool2_ceil(cache.a1, cache.p1, cache.arg1);
  conv3x3_same(cache.p1, p.c2, cache.a2);
  relu_inplace(cache.a2);
  maxpool2_ceil(cache.a2, cache.p2, cache.arg2);
  conv3x3_same(cache.p2, p.c3, cache.a3);
  relu_inplace(cache.a3);
  return cache.a3;
}

template <typename T>
void backbone_backward(const Tensor3<T>& img, const BackboneParams<T>& p, const BackboneCache<T>& cache,
                       Tensor3<T> dfeat, BackboneParams<T>* grad) {
  relu_backward_inplace(cache.a3, dfeat);
  Tensor3<T> dp2(cache.p2.h, cache.p2.w, cache.p2.c);
  conv3x3_same_backward(cache.p2, p.c3, dfeat, &dp2, grad != nullptr ? &grad->c3 : nullptr);
  Tensor3<T> da2(cache.a2.h, cache.a2.w, cache.a2.c);
  maxpool2_backward(dp2, cache.arg2, da2);
  relu_backward_inplace(cache.a2, da2);
  Tensor3<T> dp1(cache.p1.h, cache.p1.w, cache.p1.c);
  conv3x3_same_backward(cache.p1, p.c2, da2, &dp1, grad != nullptr ? &grad->c2 : nullptr);
  Tensor3<T> da1(cache.a1.h, cache.a1.w, cache.a1.c);
  maxpool2_backward(dp1, cache.arg1, da1);
  relu_backward_inplace(cache.a1, da1);
  conv3x3_same_backward(img, p.c1, da1, static_cast<Tensor3<T>*>(nullptr), grad != nullptr ? &grad->c1 : nullptr);
}

// ---------------------------------------------------------------------------
// RoI max pooling with floor/ceil fractional binning.
// ---------------------------------------------------------------------------

template <typename T>
struct RoiPooled {
  Tensor3<T> x;             // d x d x c
  std::vector<int> argmax;  // flat index into the source feature map
};

template <typename T>
RoiPooled<T> roi_pool(const Tensor3<T>& fm, int stride, const Box& prop, int d) {
  // Project to feature cells; degenerate boxes clamp to at least one cell.
  int fx0 = static_cast<int>(std::floor(prop.x1 / static_cast<float>(stride)));
  int fy0 = static_cast<int>(std::floor(prop.y1 / static_cast<float>(stride)));
  int fx1 = static_cast<int>(std::ceil(prop.x2 / static_cast<float>(stride)));
  int fy1 = static_cast<int>(std::ceil(prop.y2 / static_cast<float>(stride)));
  fx0 = std::clamp(fx0, 0, fm.w - 1);
  fy0 = std::clamp(fy0, 0, fm.h - 1);
  fx1 = std::clamp(fx1, fx0 + 1, fm.w);
  fy1 = std::clamp(fy1, fy0 + 1, fm.h);

  RoiPooled<T> out;
  out.x = Tensor3<T>(d, d, fm.c);
  out.argmax.assign(out.x.size(), 0);
  const double bh = static_cast<double>(fy1 - fy0) / d;
  const double bw = static_cast<double>(fx1 - fx0) / d;
  for (int i = 0; i < d; ++i) {
    int h0 = fy0 + static_cast<int>(std::floor(i * bh));
    int h1 = fy0 + static_cast<int>(std::ceil((i + 1) * bh));
    h0 = std::clamp(h0, fy0, fy1 - 1);
    h1 = std::clamp(h1, h0 + 1, fy1);
    for (int j = 0; j < d; ++j) {
      int w0 = fx0 + static_cast<int>(std::floor(j * bw));
      int w1 = fx0 + static_cast<int>(std::ceil((j + 1) * bw));
      w0 = std::clamp(w0, fx0, fx1 - 1);
      w1 = std::clamp(w1, w0 + 1, fx1);
      T* o = out.x.cell(i, j);
      int* am = out.argmax.data() + (static_cast<std::size_t>(i) * d + j) * fm.c;
      for (int k = 0; k < fm.c; ++k) {
        T best = fm.at(h0, w0, k);
        int best_idx = (h0 * fm.w + w0) * fm.c + k;
        for (int yy = h0; yy < h1; ++yy) {
          for (int xx = w0; xx < w1; ++xx) {
            const T v = fm.at(yy, xx, k);
            if (v > best) {
              best = v;
              best_idx = (yy * fm.w + xx) * fm.c + k;
            }
          }
        }
        o[k] = best;
        am[k] = best_idx;
      }
    }
  }
  return out;
}

// Routes gradients to the argmax cells of the source map.
template <typename T>
void roi_pool_backward(const Tensor3<T>& dpooled, const std::vector<int>& argmax, Tensor3<T>& dfm) {
  for (std::size_t i = 0; i < dpooled.size(); ++i)
    dfm.v[static_cast<std::size_t>(argmax[i])] += dpooled.v[i];
}

// ---------------------------------------------------------------------------
// Heads: shared hidden layer, then class logits and per-class box offsets.
// ---------------------------------------------------------------------------

template <typename T>
struct HeadParams {
  DenseParams<T> fc1, cls, bbox;
  int num_classes = 0;

  explicit HeadParams(const DetectorConfig& cfg = {})
      : fc1(cfg.pooled_dim(), cfg.head_hidden),
        cls(cfg.head_hidden, cfg.num_classes + 1),
        bbox(cfg.head_hidden, cfg.num_classes * 4),
        num_classes(cfg.num_classes) {}

  std::vector<NamedTensor<T>> tensors() {
    std::vector<NamedTensor<T>> out;
    for (auto& t : fc1.tensors("heads.fc1")) out.push_back(t);
    for (auto& t : cls.tensors("heads.cls")) out.push_back(t);
    for (auto& t : bbox.tensors("heads.bbox")) out.push_back(t);
    return out;
  }

  void zero() { fc1.zero(); cls.zero(); bbox.zero(); }
};

template <typename T>
void init_heads(HeadParams<T>& p, Rng& rng) {
  init_dense(p.fc1, rng);
  for (auto& x : p.cls.w) x = static_cast<T>(0.01 * rng.normal());
  std::fill(p.cls.b.begin(), p.cls.b.end(), T(0));
  for (auto& x : p.bbox.w) x = static_cast<T>(0.001 * rng.normal());
  std::fill(p.bbox.b.begin(), p.bbox.b.end(), T(0));
}

template <typename T>
struct HeadCache {
  std::vector<T> x_flat, h1, logits;
};

template <typename T>
DetectorOutput<T> forward_heads(const Tensor3<T>& x, const HeadParams<T>& p, HeadCache<T>& cache) {
  require_finite(x, "forward_heads: feature");
  cache.x_flat.assign(x.v.begin(), x.v.end());
  cache.h1.resize(static_cast<std::size_t>(p.fc1.out_dim));
  dense_forward(p.fc1, cache.x_flat.data(), cache.h1.data());
  relu_vec(cache.h1);
  cache.logits.resize(static_cast<std::size_t>(p.cls.out_dim));
  dense_forward(p.cls, cache.h1.data(), cache.logits.data());
  DetectorOutput<T> out;
  softmax(cache.logits, out.cls_probs);
  out.bbox_pred.resize(static_cast<std::size_t>(p.bbox.out_dim));
  dense_forward(p.bbox, cache.h1.data(), out.bbox_pred.data());
  return out;
}

// dx (flattened pooled feature) and grad may each be null.
template <typename T>
void heads_backward(const HeadParams<T>& p, const HeadCache<T>& cache, const std::vector<T>& dlogits,
                    const std::vector<T>& dbbox, std::vector<T>* dx, HeadParams<T>* grad) {
  std::vector<T> dh1(static_cast<std::size_t>(p.fc1.out_dim), T(0));
  std::vector<T> tmp(static_cast<std::size_t>(p.fc1.out_dim));
  dense_backward(p.cls, cache.h1.data(), dlogits.data(), tmp.data(), grad != nullptr ? &grad->cls : nullptr);
  for (std::size_t i = 0; i < dh1.size(); ++i) dh1[i] += tmp[i];
  dense_backward(p.bbox, cache.h1.data(), dbbox.data(), tmp.data(), grad != nullptr ? &grad->bbox : nullptr);
  for (std::size_t i = 0; i < dh1.size(); ++i) dh1[i] += tmp[i];
  for (std::size_t i = 0; i < dh1.size(); ++i) {
    if (cache.h1[i] <= T(0)) dh1[i] = T(0);
  }
  if (dx != nullptr) dx->resize(static_cast<std::size_t>(p.fc1.in_dim));
  dense_backward(p.fc1, cache.x_flat.data(), dh1.data(), dx != nullptr ? dx->data() : nullptr,
                 grad != nullptr ? &grad->fc1 : nullptr);
}

// ---------------------------------------------------------------------------
// Detection loss: softmax cross entropy plus smooth-L1 box term for
// foreground labels.
// ---------------------------------------------------------------------------

template <typename T>
T smooth_l1(T x) {
  const T a = std::abs(x);
  return a < T(1) ? T(0.5) * x * x : a - T(0.5);
}

template <typename T>
T smooth_l1_grad(T x) {
  if (x > T(1)) return T(1);
  if (x < T(-1)) return T(-1);
  return x;
}

inline constexpr double kProbFloor = 1e-12;

template <typename T>
T detector_loss(const DetectorOutput<T>& out, const DetectionLabel& label) {
  const int k1 = static_cast<int>(out.cls_probs.size());
  if (label.cls < 0 || label.cls >= k1) throw std::invalid_argument("detector_loss: label class out of range");
  T loss = -std::log(std::max(out.cls_probs[static_cast<std::size_t>(label.cls)], static_cast<T>(kProbFloor)));
  if (label.is_foreground()) {
    const int row = (label.cls - 1) * 4;
    for (int i = 0; i < 4; ++i)
      loss += smooth_l1(out.bbox_pred[static_cast<std::size_t>(row + i)] - static_cast<T>(label.loc[static_cast<std::size_t>(i)]));
  }
  return loss;
}

// Gradients w.r.t. class logits and bbox outputs; scale multiplies both
// (used for batch averaging).
template <typename T>
void detector_loss_grad(const DetectorOutput<T>& out, const DetectionLabel& label, T scale,
                        std::vector<T>& dlogits, std::vector<T>& dbbox) {
  const std::size_t k1 = out.cls_probs.size();
  dlogits.resize(k1);
  for (std::size_t i = 0; i < k1; ++i) dlogits[i] = scale * out.cls_probs[i];
  dlogits[static_cast<std::size_t>(label.cls)] -= scale;
  dbbox.assign(out.bbox_pred.size(), T(0));
  if (label.is_foreground()) {
    const int row = (label.cls - 1) * 4;
    for (int i = 0; i < 4; ++i) {
      const T r = out.bbox_pred[static_cast<std::size_t>(row + i)] - static_cast<T>(label.loc[static_cast<std::size_t>(i)]);
      dbbox[static_cast<std::size_t>(row + i)] = scale * smooth_l1_grad(r);
    }
  }
}

// Classification-only loss, used by the hard-window search and the
// adversaries' score-drop bookkeeping.
template <typename T>
T softmax_loss(const DetectorOutput<T>& out, int cls) {
  return -std::log(std::max(out.cls_probs[static_cast<std::size_t>(cls)], static_cast<T>(kProbFloor)));
}

}  // namespace afrcnn
