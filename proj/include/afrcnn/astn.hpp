#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "afrcnn/detector.hpp"
#include "afrcnn/nn.hpp"
#include "afrcnn/tensor.hpp"

namespace afrcnn {

// Adversarial spatial transformer: a localiser predicts one rotation angle
// per channel block; features are resampled bilinearly on the rotated grid.
// Unlike the dropout adversary this path is differentiable end to end.

inline constexpr double kAngleBoundDeg = 10.0;
inline constexpr int kNumBlocks = 4;

template <typename T>
struct RotationSpec {
  std::array<T, kNumBlocks> deg{};
};

template <typename T>
struct AstnParams {
  DenseParams<T> fc1, fc2, fc3;

  AstnParams() = default;
  AstnParams(int pooled_dim, int h1 = 256, int h2 = 64)
      : fc1(pooled_dim, h1), fc2(h1, h2), fc3(h2, kNumBlocks) {}

  std::vector<NamedTensor<T>> tensors() {
    std::vector<NamedTensor<T>> out;
    for (auto& t : fc1.tensors("astn.fc1")) out.push_back(t);
    for (auto& t : fc2.tensors("astn.fc2")) out.push_back(t);
    for (auto& t : fc3.tensors("astn.fc3")) out.push_back(t);
    return out;
  }

  void zero() { fc1.zero(); fc2.zero(); fc3.zero(); }
};

// Final layer starts at zero so the transform begins as the identity.
template <typename T>
void init_astn(AstnParams<T>& p, Rng& rng) {
  init_dense(p.fc1, rng);
  init_dense(p.fc2, rng);
  p.fc3.zero();
}

template <typename T>
struct LocaliserCache {
  std::vector<T> x_flat, h1, h2;
  std::array<T, kNumBlocks> raw{};
  RotationSpec<T> spec;
  bool single_angle = false;
};

// single_angle broadcasts the first raw output to every block; the ablation
// probing whether independent per-block angles matter.
template <typename T>
RotationSpec<T> localise(const Tensor3<T>& x, const AstnParams<T>& p, LocaliserCache<T>& cache,
                         bool single_angle = false) {
  require_finite(x, "localise: feature");
  cache.single_angle = single_angle;
  cache.x_flat.assign(x.v.begin(), x.v.end());
  cache.h1.resize(static_cast<std::size_t>(p.fc1.out_dim));
  dense_forward(p.fc1, cache.x_flat.data(), cache.h1.data());
  relu_vec(cache.h1);
  cache.h2.resize(static_cast<std::size_t>(p.fc2.out_dim));
  dense_forward(p.fc2, cache.h1.data(), cache.h2.data());
  relu_vec(cache.h2);
  dense_forward(p.fc3, cache.h2.data(), cache.raw.data());
  // tanh saturates to exactly 1 in finite precision, which would put the
  // angle on the closed bound; clamp to the largest value strictly inside.
  const T cap = std::nextafter(static_cast<T>(kAngleBoundDeg), T(0));
  for (int b = 0; b < kNumBlocks; ++b) {
    const T raw = single_angle ? cache.raw[0] : cache.raw[b];
    const T deg = static_cast<T>(kAngleBoundDeg) * std::tanh(raw);
    cache.spec.deg[b] = std::clamp(deg, -cap, cap);
  }
  return cache.spec;
}

template <typename T>
void localise_backward(const AstnParams<T>& p, const LocaliserCache<T>& cache,
                       const std::array<T, kNumBlocks>& ddeg, AstnParams<T>& grad) {
  std::array<T, kNumBlocks> draw{};
  if (cache.single_angle) {
    T sum = T(0);
    for (int b = 0; b < kNumBlocks; ++b) sum += ddeg[b];
    const T th = std::tanh(cache.raw[0]);
    draw[0] = sum * static_cast<T>(kAngleBoundDeg) * (T(1) - th * th);
  } else {
    for (int b = 0; b < kNumBlocks; ++b) {
      const T th = std::tanh(cache.raw[b]);
      draw[b] = ddeg[b] * static_cast<T>(kAngleBoundDeg) * (T(1) - th * th);
    }
  }
  std::vector<T> dh2(cache.h2.size());
  dense_backward(p.fc3, cache.h2.data(), draw.data(), dh2.data(), &grad.fc3);
  for (std::size_t i = 0; i < dh2.size(); ++i)
    if (cache.h2[i] <= T(0)) dh2[i] = T(0);
  std::vector<T> dh1(cache.h1.size());
  dense_backward(p.fc2, cache.h1.data(), dh2.data(), dh1.data(), &grad.fc2);
  for (std::size_t i = 0; i < dh1.size(); ++i)
    if (cache.h1[i] <= T(0)) dh1[i] = T(0);
  dense_backward(p.fc1, cache.x_flat.data(), dh1.data(), static_cast<T*>(nullptr), &grad.fc1);
}

// ---------------------------------------------------------------------------
// Rotation grid and bilinear sampling
// ---------------------------------------------------------------------------

template <typename T>
struct SamplingGrid {
  int d = 0;
  std::vector<T> sx, sy;  // source coords per output cell, row-major

  SamplingGrid() = default;
  explicit SamplingGrid(int dim)
      : d(dim),
        sx(static_cast<std::size_t>(dim) * dim),
        sy(static_cast<std::size_t>(dim) * dim) {}
  std::size_t idx(int i, int j) const { return static_cast<std::size_t>(i) * d + j; }
};

// Output cell (i, j) reads the input at the point obtained by rotating
// (j, i) by -deg about the grid center ((d-1)/2, (d-1)/2), so the output
// image appears rotated by +deg.
template <typename T>
SamplingGrid<T> build_rotation_grid(T deg, int d) {
  SamplingGrid<T> g(d);
  const double th = static_cast<double>(deg) * kPi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double ctr = (d - 1) / 2.0;
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      const double dx = j - ctr, dy = i - ctr;
      g.sx[g.idx(i, j)] = static_cast<T>(c * dx + s * dy + ctr);
      g.sy[g.idx(i, j)] = static_cast<T>(-s * dx + c * dy + ctr);
    }
  }
  return g;
}

template <typename T>
struct Corner {
  int x0, y0;
  T tx, ty;
};

template <typename T>
Corner<T> corner_of(T x, T y) {
  const T fx = std::floor(x), fy = std::floor(y);
  return {static_cast<int>(fx), static_cast<int>(fy), x - fx, y - fy};
}

template <typename T>
T plane_at(const Grid<T>& p, int y, int x) {
  if (y < 0 || y >= p.d || x < 0 || x >= p.d) return T(0);
  return p.at(y, x);
}

// Bilinear interpolation with zero padding outside [0, d-1].
template <typename T>
Grid<T> bilinear_sample(const Grid<T>& plane, const SamplingGrid<T>& grid) {
  if (grid.d != plane.d) throw std::invalid_argument("bilinear_sample: dim mismatch");
  Grid<T> out(plane.d);
  for (std::size_t i = 0; i < out.v.size(); ++i) {
    const Corner<T> c = corner_of(grid.sx[i], grid.sy[i]);
    const T v00 = plane_at(plane, c.y0, c.x0);
    const T v01 = plane_at(plane, c.y0, c.x0 + 1);
    const T v10 = plane_at(plane, c.y0 + 1, c.x0);
    const T v11 = plane_at(plane, c.y0 + 1, c.x0 + 1);
    out.v[i] = (T(1) - c.ty) * ((T(1) - c.tx) * v00 + c.tx * v01) +
               c.ty * ((T(1) - c.tx) * v10 + c.tx * v11);
  }
  return out;
}

// Any of dplane / dsx / dsy may be null. dplane is accumulated into.
template <typename T>
void bilinear_sample_backward(const Grid<T>& plane, const SamplingGrid<T>& grid,
                              const Grid<T>& dout, Grid<T>* dplane, std::vector<T>* dsx,
                              std::vector<T>* dsy) {
  for (std::size_t i = 0; i < dout.v.size(); ++i) {
    const T g = dout.v[i];
    const Corner<T> c = corner_of(grid.sx[i], grid.sy[i]);
    const T v00 = plane_at(plane, c.y0, c.x0);
    const T v01 = plane_at(plane, c.y0, c.x0 + 1);
    const T v10 = plane_at(plane, c.y0 + 1, c.x0);
    const T v11 = plane_at(plane, c.y0 + 1, c.x0 + 1);
    if (dplane) {
      auto add = [&](int y, int x, T w) {
        if (y >= 0 && y < plane.d && x >= 0 && x < plane.d) dplane->at(y, x) += g * w;
      };
      add(c.y0, c.x0, (T(1) - c.ty) * (T(1) - c.tx));
      add(c.y0, c.x0 + 1, (T(1) - c.ty) * c.tx);
      add(c.y0 + 1, c.x0, c.ty * (T(1) - c.tx));
      add(c.y0 + 1, c.x0 + 1, c.ty * c.tx);
    }
    if (dsx) (*dsx)[i] += g * ((T(1) - c.ty) * (v01 - v00) + c.ty * (v11 - v10));
    if (dsy) (*dsy)[i] += g * ((T(1) - c.tx) * (v10 - v00) + c.tx * (v11 - v01));
  }
}

// ---------------------------------------------------------------------------
// Per-block rotation of a pooled feature
// ---------------------------------------------------------------------------

template <typename T>
struct RotateCache {
  std::array<SamplingGrid<T>, kNumBlocks> grids;
};

template <typename T>
Tensor3<T> rotate_blocks(const Tensor3<T>& x, const RotationSpec<T>& spec,
                         RotateCache<T>* cache = nullptr) {
  if (x.c % kNumBlocks != 0)
    throw std::invalid_argument("rotate_blocks: channels not divisible by block count");
  const int d = x.h;
  const int per = x.c / kNumBlocks;
  Tensor3<T> out(d, d, x.c);
  Grid<T> plane(d);
  for (int b = 0; b < kNumBlocks; ++b) {
    const SamplingGrid<T> g = build_rotation_grid(spec.deg[b], d);
    if (cache) cache->grids[b] = g;
    for (int k = b * per; k < (b + 1) * per; ++k) {
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) plane.at(i, j) = x.at(i, j, k);
      const Grid<T> r = bilinear_sample(plane, g);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) out.at(i, j, k) = r.at(i, j);
    }
  }
  return out;
}

// Backward through the sampler. dx (gradient w.r.t. the input feature, used
// when the detector trains through a fixed transform) and ddeg (gradient
// w.r.t. the block angles, used when the localiser trains) are independent.
template <typename T>
void rotate_blocks_backward(const Tensor3<T>& x, const RotationSpec<T>& spec,
                            const Tensor3<T>& dout, Tensor3<T>* dx,
                            std::array<T, kNumBlocks>* ddeg) {
  const int d = x.h;
  const int per = x.c / kNumBlocks;
  const double rad_per_deg = kPi / 180.0;
  const double ctr = (d - 1) / 2.0;
  Grid<T> plane(d), dplane(d), dout_plane(d);
  std::vector<T> dsx(static_cast<std::size_t>(d) * d), dsy(dsx.size());
  for (int b = 0; b < kNumBlocks; ++b) {
    const SamplingGrid<T> g = build_rotation_grid(spec.deg[b], d);
    std::fill(dsx.begin(), dsx.end(), T(0));
    std::fill(dsy.begin(), dsy.end(), T(0));
    for (int k = b * per; k < (b + 1) * per; ++k) {
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
          plane.at(i, j) = x.at(i, j, k);
          dout_plane.at(i, j) = dout.at(i, j, k);
        }
      dplane.zero();
      bilinear_sample_backward(plane, g, dout_plane, dx ? &dplane : nullptr,
                               ddeg ? &dsx : nullptr, ddeg ? &dsy : nullptr);
      if (dx)
        for (int i = 0; i < d; ++i)
          for (int j = 0; j < d; ++j) dx->at(i, j, k) += dplane.at(i, j);
    }
    if (ddeg) {
      const double th = static_cast<double>(spec.deg[b]) * rad_per_deg;
      const double c = std::cos(th), s = std::sin(th);
      double acc = 0.0;
      for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) {
          const double dxo = j - ctr, dyo = i - ctr;
          const std::size_t idx = static_cast<std::size_t>(i) * d + j;
          // d(sx)/d(deg) and d(sy)/d(deg) for sx = c*dx + s*dy + ctr,
          // sy = -s*dx + c*dy + ctr.
          const double gx = (-s * dxo + c * dyo) * rad_per_deg;
          const double gy = (-c * dxo - s * dyo) * rad_per_deg;
          acc += static_cast<double>(dsx[idx]) * gx + static_cast<double>(dsy[idx]) * gy;
        }
      }
      (*ddeg)[b] += static_cast<T>(acc);
    }
  }
}

// ---------------------------------------------------------------------------
// Adversarial objective: make the detector read the transformed foreground
// as background (class 0).
// ---------------------------------------------------------------------------

template <typename T>
T astn_adversarial_loss(const DetectorOutput<T>& out) {
  return -std::log(std::max(out.cls_probs[0], static_cast<T>(kProbFloor)));
}

// Gradient w.r.t. the class logits, scaled.
template <typename T>
void astn_adversarial_loss_grad(const DetectorOutput<T>& out, T scale, std::vector<T>& dlogits) {
  dlogits.assign(out.cls_probs.size(), T(0));
  for (std::size_t k = 0; k < out.cls_probs.size(); ++k) dlogits[k] = scale * out.cls_probs[k];
  dlogits[0] -= scale;
}

}  // namespace afrcnn
