#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace afrcnn {

// Dense H x W x C block, channel-contiguous. The one array type every
// numeric kernel operates on; T is float in production and double in the
// finite-difference checks.
template <typename T>
struct Tensor3 {
  int h = 0, w = 0, c = 0;
  std::vector<T> v;

  Tensor3() = default;
  Tensor3(int h_, int w_, int c_, T fill = T(0))
      : h(h_), w(w_), c(c_), v(static_cast<std::size_t>(h_) * w_ * c_, fill) {}

  std::size_t size() const { return v.size(); }

  T& at(int y, int x, int k) { return v[(static_cast<std::size_t>(y) * w + x) * c + k]; }
  T at(int y, int x, int k) const { return v[(static_cast<std::size_t>(y) * w + x) * c + k]; }

  T* cell(int y, int x) { return v.data() + (static_cast<std::size_t>(y) * w + x) * c; }
  const T* cell(int y, int x) const { return v.data() + (static_cast<std::size_t>(y) * w + x) * c; }

  void zero() { std::fill(v.begin(), v.end(), T(0)); }

  bool same_shape(const Tensor3& o) const { return h == o.h && w == o.w && c == o.c; }

  bool all_finite() const {
    for (const T x : v) {
      if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
  }
};

using Tensor3f = Tensor3<float>;
using Tensor3d = Tensor3<double>;

// Single d x d plane used for heatmaps and sampling planes.
template <typename T>
struct Grid {
  int d = 0;
  std::vector<T> v;

  Grid() = default;
  explicit Grid(int d_, T fill = T(0)) : d(d_), v(static_cast<std::size_t>(d_) * d_, fill) {}

  T& at(int i, int j) { return v[static_cast<std::size_t>(i) * d + j]; }
  T at(int i, int j) const { return v[static_cast<std::size_t>(i) * d + j]; }

  void zero() { std::fill(v.begin(), v.end(), T(0)); }
};

// Binary d x d occlusion mask; bit 1 means all channels at that cell drop.
struct OcclusionMask {
  int d = 0;
  std::vector<std::uint8_t> bits;

  OcclusionMask() = default;
  explicit OcclusionMask(int d_) : d(d_), bits(static_cast<std::size_t>(d_) * d_, 0) {}

  std::uint8_t& at(int i, int j) { return bits[static_cast<std::size_t>(i) * d + j]; }
  std::uint8_t at(int i, int j) const { return bits[static_cast<std::size_t>(i) * d + j]; }

  int popcount() const {
    int n = 0;
    for (const auto b : bits) n += b ? 1 : 0;
    return n;
  }
};

template <typename T>
void require_finite(const Tensor3<T>& t, const char* what) {
  if (!t.all_finite()) throw std::invalid_argument(std::string(what) + ": non-finite values");
}

}  // namespace afrcnn
