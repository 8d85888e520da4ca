#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "afrcnn/common.hpp"
#include "afrcnn/tensor.hpp"

namespace afrcnn {

// ---------------------------------------------------------------------------
// Parameter containers. Every trainable module exposes tensors() so the
// optimizer, checkpoints and hashes can walk parameters in a fixed order.
// ---------------------------------------------------------------------------

template <typename T>
struct NamedTensor {
  std::string name;
  std::vector<T>* data;
  std::vector<int> dims;  // shape as stored in checkpoints; product equals data->size()
};

// 3x3 conv, zero-padded 'same'. Weights laid out [ky][kx][ic][oc] so the
// innermost loop runs over contiguous output channels.
template <typename T>
struct ConvParams {
  int ic = 0, oc = 0;
  std::vector<T> w;  // 3*3*ic*oc
  std::vector<T> b;  // oc

  ConvParams() = default;
  ConvParams(int ic_, int oc_)
      : ic(ic_), oc(oc_), w(static_cast<std::size_t>(9) * ic_ * oc_, T(0)), b(static_cast<std::size_t>(oc_), T(0)) {}

  const T* wrow(int ky, int kx, int ic_idx) const {
    return w.data() + ((static_cast<std::size_t>(ky) * 3 + kx) * ic + ic_idx) * oc;
  }
  T* wrow(int ky, int kx, int ic_idx) {
    return w.data() + ((static_cast<std::size_t>(ky) * 3 + kx) * ic + ic_idx) * oc;
  }

  void zero() {
    std::fill(w.begin(), w.end(), T(0));
    std::fill(b.begin(), b.end(), T(0));
  }

  std::vector<NamedTensor<T>> tensors(const std::string& prefix) {
    return {{prefix + ".w", &w, {3, 3, ic, oc}}, {prefix + ".b", &b, {oc}}};
  }
};

// Fully connected layer, weights row-major [out][in].
template <typename T>
struct DenseParams {
  int in_dim = 0, out_dim = 0;
  std::vector<T> w;
  std::vector<T> b;

  DenseParams() = default;
  DenseParams(int in_, int out_)
      : in_dim(in_), out_dim(out_), w(static_cast<std::size_t>(in_) * out_, T(0)), b(static_cast<std::size_t>(out_), T(0)) {}

  const T* row(int r) const { return w.data() + static_cast<std::size_t>(r) * in_dim; }
  T* row(int r) { return w.data() + static_cast<std::size_t>(r) * in_dim; }

  void zero() {
    std::fill(w.begin(), w.end(), T(0));
    std::fill(b.begin(), b.end(), T(0));
  }

  std::vector<NamedTensor<T>> tensors(const std::string& prefix) {
    return {{prefix + ".w", &w, {out_dim, in_dim}}, {prefix + ".b", &b, {out_dim}}};
  }
};

// He-style uniform init, fan-in scaled.
template <typename T>
void init_uniform_fan_in(std::vector<T>& w, int fan_in, Rng& rng, double gain = 1.0) {
  const double s = gain * std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& x : w) x = static_cast<T>(rng.uniform(-s, s));
}

template <typename T>
void init_conv(ConvParams<T>& p, Rng& rng) {
  init_uniform_fan_in(p.w, 9 * p.ic, rng);
  std::fill(p.b.begin(), p.b.end(), T(0));
}

template <typename T>
void init_dense(DenseParams<T>& p, Rng& rng, double gain = 1.0) {
  init_uniform_fan_in(p.w, p.in_dim, rng, gain);
  std::fill(p.b.begin(), p.b.end(), T(0));
}

// ---------------------------------------------------------------------------
// Forward / backward kernels
// ---------------------------------------------------------------------------

template <typename T>
void conv3x3_same(const Tensor3<T>& in, const ConvParams<T>& p, Tensor3<T>& out) {
  out = Tensor3<T>(in.h, in.w, p.oc);
  std::vector<T> acc(static_cast<std::size_t>(p.oc));
  for (int y = 0; y < in.h; ++y) {
    for (int x = 0; x < in.w; ++x) {
      for (int k = 0; k < p.oc; ++k) acc[static_cast<std::size_t>(k)] = p.b[static_cast<std::size_t>(k)];
      const int ky0 = y > 0 ? 0 : 1, ky1 = y < in.h - 1 ? 3 : 2;
      const int kx0 = x > 0 ? 0 : 1, kx1 = x < in.w - 1 ? 3 : 2;
      for (int ky = ky0; ky < ky1; ++ky) {
        for (int kx = kx0; kx < kx1; ++kx) {
          const T* cellv = in.cell(y + ky - 1, x + kx - 1);
          for (int ci = 0; ci < p.ic; ++ci) {
            const T v = cellv[ci];
            const T* wr = p.wrow(ky, kx, ci);
            for (int k = 0; k < p.oc; ++k) acc[static_cast<std::size_t>(k)] += v * wr[k];
          }
        }
      }
      T* o = out.cell(y, x);
      for (int k = 0; k < p.oc; ++k) o[k] = acc[static_cast<std::size_t>(k)];
    }
  }
}

// din and grad may be null to skip that part of the backward pass.
template <typename T>
void conv3x3_same_backward(const Tensor3<T>& in, const ConvParams<T>& p, const Tensor3<T>& dout,
                           Tensor3<T>* din, ConvParams<T>* grad) {
  if (din != nullptr && !din->same_shape(in)) *din = Tensor3<T>(in.h, in.w, in.c);
  for (int y = 0; y < in.h; ++y) {
    for (int x = 0; x < in.w; ++x) {
      const T* go = dout.cell(y, x);
      if (grad != nullptr) {
        for (int k = 0; k < p.oc; ++k) grad->b[static_cast<std::size_t>(k)] += go[k];
      }
      const int ky0 = y > 0 ? 0 : 1, ky1 = y < in.h - 1 ? 3 : 2;
      const int kx0 = x > 0 ? 0 : 1, kx1 = x < in.w - 1 ? 3 : 2;
      for (int ky = ky0; ky < ky1; ++ky) {
        for (int kx = kx0; kx < kx1; ++kx) {
          const int yy = y + ky - 1, xx = x + kx - 1;
          const T* cellv = in.cell(yy, xx);
          T* dcell = din != nullptr ? din->cell(yy, xx) : nullptr;
          for (int ci = 0; ci < p.ic; ++ci) {
            const T* wr = p.wrow(ky, kx, ci);
            if (grad != nullptr) {
              T* gw = grad->wrow(ky, kx, ci);
              const T v = cellv[ci];
              for (int k = 0; k < p.oc; ++k) gw[k] += v * go[k];
            }
            if (dcell != nullptr) {
              T s = T(0);
              for (int k = 0; k < p.oc; ++k) s += wr[k] * go[k];
              dcell[ci] += s;
            }
          }
        }
      }
    }
  }
}

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

// 2x2 max pool, stride 2, ceil mode: edge windows shrink to the valid cells.
// argmax stores the flat input index per output element for the backward pass.
template <typename T>
void maxpool2_ceil(const Tensor3<T>& in, Tensor3<T>& out, std::vector<int>& argmax) {
  const int oh = ceil_div(in.h, 2), ow = ceil_div(in.w, 2);
  out = Tensor3<T>(oh, ow, in.c);
  argmax.assign(out.size(), 0);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      const int y1 = std::min(2 * y + 2, in.h), x1 = std::min(2 * x + 2, in.w);
      T* o = out.cell(y, x);
      int* am = argmax.data() + (static_cast<std::size_t>(y) * ow + x) * in.c;
      for (int k = 0; k < in.c; ++k) {
        T best = in.at(2 * y, 2 * x, k);
        int best_idx = (2 * y * in.w + 2 * x) * in.c + k;
        for (int yy = 2 * y; yy < y1; ++yy) {
          for (int xx = 2 * x; xx < x1; ++xx) {
            const T v = in.at(yy, xx, k);
            if (v > best) {
              best = v;
              best_idx = (yy * in.w + xx) * in.c + k;
            }
          }
        }
        o[k] = best;
        am[k] = best_idx;
      }
    }
  }
}

template <typename T>
void maxpool2_backward(const Tensor3<T>& dout, const std::vector<int>& argmax, Tensor3<T>& din) {
  for (std::size_t i = 0; i < dout.size(); ++i) din.v[static_cast<std::size_t>(argmax[i])] += dout.v[i];
}

template <typename T>
void relu_inplace(Tensor3<T>& t) {
  for (auto& x : t.v) x = x > T(0) ? x : T(0);
}

// Backward through relu given the post-activation values.
template <typename T>
void relu_backward_inplace(const Tensor3<T>& post, Tensor3<T>& grad) {
  for (std::size_t i = 0; i < post.size(); ++i) {
    if (post.v[i] <= T(0)) grad.v[i] = T(0);
  }
}

template <typename T>
void dense_forward(const DenseParams<T>& p, const T* x, T* y) {
  for (int r = 0; r < p.out_dim; ++r) {
    const T* wr = p.row(r);
    T s = p.b[static_cast<std::size_t>(r)];
    for (int i = 0; i < p.in_dim; ++i) s += wr[i] * x[i];
    y[r] = s;
  }
}

template <typename T>
void dense_backward(const DenseParams<T>& p, const T* x, const T* dy, T* dx, DenseParams<T>* grad) {
  if (dx != nullptr) {
    for (int i = 0; i < p.in_dim; ++i) dx[i] = T(0);
  }
  for (int r = 0; r < p.out_dim; ++r) {
    const T g = dy[r];
    const T* wr = p.row(r);
    if (grad != nullptr) {
      grad->b[static_cast<std::size_t>(r)] += g;
      T* gw = grad->row(r);
      for (int i = 0; i < p.in_dim; ++i) gw[i] += g * x[i];
    }
    if (dx != nullptr) {
      for (int i = 0; i < p.in_dim; ++i) dx[i] += g * wr[i];
    }
  }
}

template <typename T>
void relu_vec(std::vector<T>& v) {
  for (auto& x : v) x = x > T(0) ? x : T(0);
}

template <typename T>
void softmax(const std::vector<T>& logits, std::vector<T>& probs) {
  probs.resize(logits.size());
  T mx = logits[0];
  for (const T z : logits) mx = std::max(mx, z);
  T sum = T(0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - mx);
    sum += probs[i];
  }
  for (auto& prob : probs) prob /= sum;
}

template <typename T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

// ---------------------------------------------------------------------------
// SGD with momentum over a named-tensor group, with optional global-norm
// gradient clipping. Grad and momentum mirror the parameter layout.
// ---------------------------------------------------------------------------

template <typename T>
struct SgdOptions {
  T lr = T(0.001);
  T momentum = T(0.9);
  T clip_norm = T(10);  // <= 0 disables clipping
};

template <typename T>
void sgd_step(std::vector<NamedTensor<T>> params, std::vector<NamedTensor<T>> grads,
              std::vector<NamedTensor<T>> momentum, const SgdOptions<T>& opt) {
  if (opt.clip_norm > T(0)) {
    double sq = 0.0;
    for (const auto& g : grads) {
      for (const T x : *g.data) sq += static_cast<double>(x) * static_cast<double>(x);
    }
    const double norm = std::sqrt(sq);
    if (norm > static_cast<double>(opt.clip_norm)) {
      const T scale = static_cast<T>(static_cast<double>(opt.clip_norm) / norm);
      for (auto& g : grads) {
        for (auto& x : *g.data) x *= scale;
      }
    }
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& w = *params[t].data;
    auto& g = *grads[t].data;
    auto& m = *momentum[t].data;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = opt.momentum * m[i] - opt.lr * g[i];
      w[i] += m[i];
    }
  }
}

template <typename T>
void zero_grads(std::vector<NamedTensor<T>> grads) {
  for (auto& g : grads) std::fill(g.data->begin(), g.data->end(), T(0));
}

}  // namespace afrcnn
