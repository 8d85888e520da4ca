#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "afrcnn/common.hpp"

namespace afrcnn {

// Axis-aligned box in pixel coordinates, half-open-ish corner convention
// (x1,y1) top-left, (x2,y2) bottom-right, x1 < x2, y1 < y2.
struct Box {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  float width() const { return x2 - x1; }
  float height() const { return y2 - y1; }
  float area() const { return width() * height(); }
  float cx() const { return 0.5f * (x1 + x2); }
  float cy() const { return 0.5f * (y1 + y2); }

  bool valid() const { return x1 < x2 && y1 < y2; }
};

inline double iou(const Box& a, const Box& b) {
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = ix2 - ix1, ih = iy2 - iy1;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter;
  return inter / uni;
}

inline Box clip_box(const Box& b, int w, int h) {
  Box r = b;
  r.x1 = std::clamp(r.x1, 0.0f, static_cast<float>(w));
  r.y1 = std::clamp(r.y1, 0.0f, static_cast<float>(h));
  r.x2 = std::clamp(r.x2, 0.0f, static_cast<float>(w));
  r.y2 = std::clamp(r.y2, 0.0f, static_cast<float>(h));
  return r;
}

// Regression target: center offsets scaled by proposal size, log-space
// width/height ratios. Double precision so the encode/decode round trip
// stays well inside 1e-6 at image-scale coordinates.
inline std::array<double, 4> encode_box(const Box& proposal, const Box& gt) {
  const double pw = proposal.width(), ph = proposal.height();
  const double pcx = proposal.x1 + 0.5 * pw, pcy = proposal.y1 + 0.5 * ph;
  const double gw = static_cast<double>(gt.x2) - gt.x1, gh = static_cast<double>(gt.y2) - gt.y1;
  const double gcx = gt.x1 + 0.5 * gw, gcy = gt.y1 + 0.5 * gh;
  return {(gcx - pcx) / pw, (gcy - pcy) / ph, std::log(gw / pw), std::log(gh / ph)};
}

template <typename S>
Box decode_box(const Box& proposal, const std::array<S, 4>& t) {
  const double pw = proposal.width(), ph = proposal.height();
  const double cx = proposal.x1 + 0.5 * pw + static_cast<double>(t[0]) * pw;
  const double cy = proposal.y1 + 0.5 * ph + static_cast<double>(t[1]) * ph;
  const double w = pw * std::exp(static_cast<double>(t[2]));
  const double h = ph * std::exp(static_cast<double>(t[3]));
  return {static_cast<float>(cx - 0.5 * w), static_cast<float>(cy - 0.5 * h),
          static_cast<float>(cx + 0.5 * w), static_cast<float>(cy + 0.5 * h)};
}

// Random shift/scale within +-frac of the box size, clipped to the image.
inline Box jitter_box(const Box& b, int img_w, int img_h, double frac, Rng& rng) {
  const float w = b.width(), h = b.height();
  const float dx = static_cast<float>(rng.uniform(-frac, frac)) * w;
  const float dy = static_cast<float>(rng.uniform(-frac, frac)) * h;
  const float sw = static_cast<float>(1.0 + rng.uniform(-frac, frac));
  const float sh = static_cast<float>(1.0 + rng.uniform(-frac, frac));
  const float cx = b.cx() + dx, cy = b.cy() + dy;
  Box j{cx - 0.5f * w * sw, cy - 0.5f * h * sh, cx + 0.5f * w * sw, cy + 0.5f * h * sh};
  j = clip_box(j, img_w, img_h);
  if (j.width() < 2.0f) j.x2 = std::min(static_cast<float>(img_w), j.x1 + 2.0f);
  if (j.height() < 2.0f) j.y2 = std::min(static_cast<float>(img_h), j.y1 + 2.0f);
  return j;
}

}  // namespace afrcnn
