#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "afrcnn/detector.hpp"
#include "afrcnn/nn.hpp"
#include "afrcnn/tensor.hpp"

namespace afrcnn {

// Adversarial spatial dropout network: predicts a d x d occlusion heatmap
// from a pooled feature, binarized by sampling. It trains on hard masks
// only; no gradient flows from the detector loss through the mask.

template <typename T>
struct AsdnParams {
  DenseParams<T> fc1, fc2;

  AsdnParams() = default;
  AsdnParams(int pooled_dim, int d, int hidden = 256) : fc1(pooled_dim, hidden), fc2(hidden, d * d) {}

  std::vector<NamedTensor<T>> tensors() {
    std::vector<NamedTensor<T>> out;
    for (auto& t : fc1.tensors("asdn.fc1")) out.push_back(t);
    for (auto& t : fc2.tensors("asdn.fc2")) out.push_back(t);
    return out;
  }

  void zero() { fc1.zero(); fc2.zero(); }
};

template <typename T>
void init_asdn(AsdnParams<T>& p, Rng& rng) {
  init_dense(p.fc1, rng);
  init_dense(p.fc2, rng, 0.1);
}

template <typename T>
struct AsdnCache {
  std::vector<T> x_flat, h1;
  Grid<T> heat;  // post-sigmoid
};

template <typename T>
Grid<T> asdn_forward(const Tensor3<T>& x, const AsdnParams<T>& p, AsdnCache<T>& cache) {
  require_finite(x, "asdn_forward: feature");
  const int d = x.h;
  cache.x_flat.assign(x.v.begin(), x.v.end());
  cache.h1.resize(static_cast<std::size_t>(p.fc1.out_dim));
  dense_forward(p.fc1, cache.x_flat.data(), cache.h1.data());
  relu_vec(cache.h1);
  std::vector<T> z(static_cast<std::size_t>(p.fc2.out_dim));
  dense_forward(p.fc2, cache.h1.data(), z.data());
  cache.heat = Grid<T>(d);
  for (std::size_t i = 0; i < z.size(); ++i) cache.heat.v[i] = sigmoid(z[i]);
  return cache.heat;
}

// dheat is the gradient w.r.t. the sigmoid output.
template <typename T>
void asdn_backward(const AsdnParams<T>& p, const AsdnCache<T>& cache, const Grid<T>& dheat,
                   AsdnParams<T>& grad) {
  std::vector<T> dz(dheat.v.size());
  for (std::size_t i = 0; i < dz.size(); ++i) {
    const T a = cache.heat.v[i];
    dz[i] = dheat.v[i] * a * (T(1) - a);
  }
  std::vector<T> dh1(static_cast<std::size_t>(p.fc1.out_dim));
  dense_backward(p.fc2, cache.h1.data(), dz.data(), dh1.data(), &grad.fc2);
  for (std::size_t i = 0; i < dh1.size(); ++i) {
    if (cache.h1[i] <= T(0)) dh1[i] = T(0);
  }
  dense_backward(p.fc1, cache.x_flat.data(), dh1.data(), static_cast<T*>(nullptr), &grad.fc1);
}

// ---------------------------------------------------------------------------
// Mask operations
// ---------------------------------------------------------------------------

template <typename T>
Tensor3<T> apply_mask(const Tensor3<T>& x, const OcclusionMask& m) {
  if (m.d != x.h || m.d != x.w) throw std::invalid_argument("apply_mask: mask/feature dims differ");
  Tensor3<T> out = x;
  for (int i = 0; i < m.d; ++i) {
    for (int j = 0; j < m.d; ++j) {
      if (m.at(i, j)) {
        T* cell = out.cell(i, j);
        for (int k = 0; k < x.c; ++k) cell[k] = T(0);
      }
    }
  }
  return out;
}

// Gradient w.r.t. the unmasked input: the complementary mask, broadcast over
// channels.
template <typename T>
Tensor3<T> apply_mask_backward(const Tensor3<T>& dout, const OcclusionMask& m) {
  return apply_mask(dout, m);
}

// Binarization by sampling: keep the top floor(d^2/2) heatmap cells
// (value ties broken by row-major index), then draw floor(d^2/3) of them
// uniformly without replacement.
template <typename T>
OcclusionMask sample_binary_mask(const Grid<T>& heat, Rng& rng) {
  const int d = heat.d;
  const int n = d * d;
  const int top = n / 2;
  const int k = n / 3;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&heat](int a, int b) {
    return heat.v[static_cast<std::size_t>(a)] > heat.v[static_cast<std::size_t>(b)];
  });
  OcclusionMask mask(d);
  const std::vector<int> pick = rng.sample_without_replacement(top, k);
  for (const int p : pick) mask.bits[static_cast<std::size_t>(order[static_cast<std::size_t>(p)])] = 1;
  return mask;
}

// ---------------------------------------------------------------------------
// Hard-window search: the single (d/3)x(d/3) occlusion maximizing the
// detector's softmax loss, enumerated at stride 1. Ties resolve to the
// smallest (row, col).
// ---------------------------------------------------------------------------

inline OcclusionMask window_mask(int d, int win, int row, int col) {
  OcclusionMask m(d);
  for (int i = row; i < row + win; ++i)
    for (int j = col; j < col + win; ++j) m.at(i, j) = 1;
  return m;
}

template <typename T>
OcclusionMask exhaustive_hard_window(const Tensor3<T>& x, const DetectionLabel& label,
                                     const HeadParams<T>& heads) {
  const int d = x.h;
  if (d % 3 != 0) throw std::invalid_argument("exhaustive_hard_window: d not divisible by 3");
  if (!label.is_foreground())
    throw std::invalid_argument("exhaustive_hard_window: background label");
  const int win = d / 3;
  HeadCache<T> cache;
  T best_loss = T(0);
  int best_row = 0, best_col = 0;
  bool first = true;
  for (int row = 0; row + win <= d; ++row) {
    for (int col = 0; col + win <= d; ++col) {
      const OcclusionMask m = window_mask(d, win, row, col);
      const DetectorOutput<T> out = forward_heads(apply_mask(x, m), heads, cache);
      const T loss = softmax_loss(out, label.cls);
      if (first || loss > best_loss) {
        first = false;
        best_loss = loss;
        best_row = row;
        best_col = col;
      }
    }
  }
  return window_mask(d, win, best_row, best_col);
}

// ---------------------------------------------------------------------------
// Mask training loss: negative mean agreement between heatmap and binary
// target, in [-d^2, 0]. The bce variant swaps in the log-based reading.
// ---------------------------------------------------------------------------

enum class AsdnLossKind { Agreement, Bce };

template <typename T>
T asdn_loss(const std::vector<Grid<T>>& heatmaps, const std::vector<OcclusionMask>& targets,
            AsdnLossKind kind = AsdnLossKind::Agreement) {
  if (heatmaps.empty() || heatmaps.size() != targets.size())
    throw std::invalid_argument("asdn_loss: empty or mismatched inputs");
  const double n = static_cast<double>(heatmaps.size());
  double total = 0.0;
  for (std::size_t p = 0; p < heatmaps.size(); ++p) {
    const auto& a = heatmaps[p];
    const auto& m = targets[p];
    if (a.d != m.d) throw std::invalid_argument("asdn_loss: dim mismatch");
    for (std::size_t i = 0; i < a.v.size(); ++i) {
      const double av = static_cast<double>(a.v[i]);
      const double mv = m.bits[i] ? 1.0 : 0.0;
      if (kind == AsdnLossKind::Agreement) {
        total += mv * av + (1.0 - mv) * (1.0 - av);
      } else {
        total += mv * std::log(std::max(av, kProbFloor)) +
                 (1.0 - mv) * std::log(std::max(1.0 - av, kProbFloor));
      }
    }
  }
  return static_cast<T>(-total / n);
}

// Gradient w.r.t. each heatmap entry.
template <typename T>
std::vector<Grid<T>> asdn_loss_grad(const std::vector<Grid<T>>& heatmaps,
                                    const std::vector<OcclusionMask>& targets,
                                    AsdnLossKind kind = AsdnLossKind::Agreement) {
  const T inv_n = T(1) / static_cast<T>(heatmaps.size());
  std::vector<Grid<T>> grads(heatmaps.size());
  for (std::size_t p = 0; p < heatmaps.size(); ++p) {
    grads[p] = Grid<T>(heatmaps[p].d);
    for (std::size_t i = 0; i < grads[p].v.size(); ++i) {
      const T mv = targets[p].bits[i] ? T(1) : T(0);
      if (kind == AsdnLossKind::Agreement) {
        grads[p].v[i] = -(T(2) * mv - T(1)) * inv_n;
      } else {
        const T a = heatmaps[p].v[i];
        const T ca = std::max(a, static_cast<T>(kProbFloor));
        const T cb = std::max(T(1) - a, static_cast<T>(kProbFloor));
        grads[p].v[i] = -(mv / ca - (T(1) - mv) / cb) * inv_n;
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Hard-mask selection: masks whose dropout cost the true class more than
// delta, hardest first, capped at half the batch.
// ---------------------------------------------------------------------------

template <typename T>
struct MaskCandidate {
  const Tensor3<T>* feature = nullptr;
  OcclusionMask mask;
  DetectionLabel label;
};

struct HardMaskSelection {
  int index = 0;
  double drop = 0.0;
};

template <typename T>
std::vector<HardMaskSelection> select_hard_masks(const std::vector<MaskCandidate<T>>& batch,
                                                 const HeadParams<T>& heads, double delta) {
  std::vector<HardMaskSelection> scored;
  HeadCache<T> cache;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& cand = batch[i];
    if (!cand.label.is_foreground())
      throw std::invalid_argument("select_hard_masks: background label");
    const auto c = static_cast<std::size_t>(cand.label.cls);
    const DetectorOutput<T> clean = forward_heads(*cand.feature, heads, cache);
    const DetectorOutput<T> masked = forward_heads(apply_mask(*cand.feature, cand.mask), heads, cache);
    const double drop = static_cast<double>(clean.cls_probs[c]) - static_cast<double>(masked.cls_probs[c]);
    if (drop > delta) scored.push_back({static_cast<int>(i), drop});
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const HardMaskSelection& a, const HardMaskSelection& b) { return a.drop > b.drop; });
  const std::size_t cap = (batch.size() + 1) / 2;
  if (scored.size() > cap) scored.resize(cap);
  return scored;
}

}  // namespace afrcnn
