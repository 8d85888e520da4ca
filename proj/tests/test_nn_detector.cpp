#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "afrcnn/common.hpp"
#include "afrcnn/detector.hpp"
#include "afrcnn/nn.hpp"
#include "afrcnn/tensor.hpp"

using namespace afrcnn;

namespace {

template <typename T>
Tensor3<T> random_tensor(int h, int w, int c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor3<T> t(h, w, c);
  for (auto& x : t.v) x = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Plain per-pixel convolution with explicit zero padding, written
// independently of the production kernel's loop order and bounds tricks.
template <typename T>
Tensor3<T> conv_reference(const Tensor3<T>& in, const ConvParams<T>& p) {
  Tensor3<T> out(in.h, in.w, p.oc);
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < in.w; ++x)
      for (int k = 0; k < p.oc; ++k) {
        T s = p.b[static_cast<std::size_t>(k)];
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int yy = y + ky - 1, xx = x + kx - 1;
            if (yy < 0 || yy >= in.h || xx < 0 || xx >= in.w) continue;
            for (int ci = 0; ci < p.ic; ++ci)
              s += in.at(yy, xx, ci) *
                   p.w[(static_cast<std::size_t>(ky * 3 + kx) * p.ic + ci) * p.oc + k];
          }
        out.at(y, x, k) = s;
      }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Convolution / pooling kernels
// ---------------------------------------------------------------------------

TEST_CASE("conv3x3_same matches a naive zero-padded reference") {
  Rng rng(101);
  ConvParams<double> p(2, 3);
  for (auto& x : p.w) x = rng.uniform(-1.0, 1.0);
  for (auto& x : p.b) x = rng.uniform(-0.5, 0.5);
  const auto in = random_tensor<double>(5, 4, 2, rng);
  Tensor3<double> out;
  conv3x3_same(in, p, out);
  const auto want = conv_reference(in, p);
  REQUIRE(out.same_shape(want));
  for (std::size_t i = 0; i < out.size(); ++i)
    REQUIRE(out.v[i] == Catch::Approx(want.v[i]).margin(1e-12));
}

TEST_CASE("conv3x3_same with zero weights emits only the bias") {
  ConvParams<float> p(3, 4);
  p.b = {1.f, -2.f, 0.f, 3.5f};
  Rng rng(5);
  const auto in = random_tensor<float>(6, 6, 3, rng);
  Tensor3<float> out;
  conv3x3_same(in, p, out);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x)
      for (int k = 0; k < 4; ++k) REQUIRE(out.at(y, x, k) == p.b[static_cast<std::size_t>(k)]);
}

TEST_CASE("conv3x3_same_backward matches finite differences") {
  Rng rng(103);
  ConvParams<double> p(2, 2);
  for (auto& x : p.w) x = rng.uniform(-1.0, 1.0);
  for (auto& x : p.b) x = rng.uniform(-0.5, 0.5);
  const auto in = random_tensor<double>(4, 4, 2, rng);
  Tensor3<double> out;
  conv3x3_same(in, p, out);
  // Scalar objective: fixed random weighting of the output.
  std::vector<double> r(out.size());
  for (auto& x : r) x = rng.uniform(-1.0, 1.0);
  auto objective = [&](const Tensor3<double>& input, const ConvParams<double>& params) {
    Tensor3<double> o;
    conv3x3_same(input, params, o);
    double s = 0;
    for (std::size_t i = 0; i < o.size(); ++i) s += r[i] * o.v[i];
    return s;
  };
  Tensor3<double> dout(out.h, out.w, out.c);
  dout.v = r;
  Tensor3<double> din;
  ConvParams<double> grad(2, 2);
  conv3x3_same_backward(in, p, dout, &din, &grad);

  const double eps = 1e-6;
  for (const std::size_t i : {std::size_t(0), std::size_t(7), std::size_t(20), in.size() - 1}) {
    Tensor3<double> plus = in, minus = in;
    plus.v[i] += eps;
    minus.v[i] -= eps;
    const double fd = (objective(plus, p) - objective(minus, p)) / (2 * eps);
    REQUIRE(din.v[i] == Catch::Approx(fd).margin(1e-6));
  }
  for (const std::size_t i : {std::size_t(0), std::size_t(13), p.w.size() - 1}) {
    ConvParams<double> plus = p, minus = p;
    plus.w[i] += eps;
    minus.w[i] -= eps;
    const double fd = (objective(in, plus) - objective(in, minus)) / (2 * eps);
    REQUIRE(grad.w[i] == Catch::Approx(fd).margin(1e-6));
  }
  for (std::size_t i = 0; i < p.b.size(); ++i) {
    ConvParams<double> plus = p, minus = p;
    plus.b[i] += eps;
    minus.b[i] -= eps;
    const double fd = (objective(in, plus) - objective(in, minus)) / (2 * eps);
    REQUIRE(grad.b[i] == Catch::Approx(fd).margin(1e-6));
  }
}

TEST_CASE("maxpool2_ceil handles odd extents and routes argmax correctly") {
  Rng rng(107);
  const auto in = random_tensor<double>(5, 5, 2, rng);
  Tensor3<double> out;
  std::vector<int> argmax;
  maxpool2_ceil(in, out, argmax);
  REQUIRE(out.h == 3);
  REQUIRE(out.w == 3);
  REQUIRE(out.c == 2);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x)
      for (int k = 0; k < 2; ++k) {
        double want = -1e30;
        for (int yy = 2 * y; yy < std::min(2 * y + 2, 5); ++yy)
          for (int xx = 2 * x; xx < std::min(2 * x + 2, 5); ++xx) want = std::max(want, in.at(yy, xx, k));
        REQUIRE(out.at(y, x, k) == want);
        const int am = argmax[(static_cast<std::size_t>(y) * 3 + x) * 2 + k];
        REQUIRE(in.v[static_cast<std::size_t>(am)] == want);
      }
  // Backward: every output cell sends its gradient to exactly one input cell.
  Tensor3<double> dout(3, 3, 2, 1.0);
  Tensor3<double> din(5, 5, 2);
  maxpool2_backward(dout, argmax, din);
  double total = 0;
  for (const double g : din.v) {
    REQUIRE(g >= 0.0);
    total += g;
  }
  REQUIRE(total == Catch::Approx(3 * 3 * 2).margin(1e-12));
}

// ---------------------------------------------------------------------------
// Dense / activation kernels
// ---------------------------------------------------------------------------

TEST_CASE("dense_forward and dense_backward match hand math") {
  DenseParams<double> p(2, 2);
  // y0 = 1*x0 + 2*x1 + 0.5, y1 = -1*x0 + 3*x1 - 1
  p.w = {1, 2, -1, 3};
  p.b = {0.5, -1};
  const double x[2] = {2, -1};
  double y[2];
  dense_forward(p, x, y);
  REQUIRE(y[0] == Catch::Approx(0.5).margin(1e-15));
  REQUIRE(y[1] == Catch::Approx(-6.0).margin(1e-15));

  const double dy[2] = {1, -2};
  double dx[2];
  DenseParams<double> grad(2, 2);
  dense_backward(p, x, dy, dx, &grad);
  // dx = W^T dy
  REQUIRE(dx[0] == Catch::Approx(1 * 1 + (-1) * (-2)).margin(1e-15));
  REQUIRE(dx[1] == Catch::Approx(2 * 1 + 3 * (-2)).margin(1e-15));
  // dW = dy x^T, db = dy
  REQUIRE(grad.w == std::vector<double>{2, -1, -4, 2});
  REQUIRE(grad.b == std::vector<double>{1, -2});
}

TEST_CASE("softmax normalizes, is shift-invariant and overflow-safe") {
  std::vector<double> probs;
  softmax(std::vector<double>{0.0, std::log(3.0)}, probs);
  REQUIRE(probs[0] == Catch::Approx(0.25).margin(1e-12));
  REQUIRE(probs[1] == Catch::Approx(0.75).margin(1e-12));

  Rng rng(109);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> logits(4), shifted(4);
    const double c = rng.uniform(-5.0, 5.0);
    for (int i = 0; i < 4; ++i) {
      logits[static_cast<std::size_t>(i)] = rng.uniform(-10.0, 10.0);
      shifted[static_cast<std::size_t>(i)] = logits[static_cast<std::size_t>(i)] + c;
    }
    std::vector<double> pa, pb;
    softmax(logits, pa);
    softmax(shifted, pb);
    double sum = 0;
    for (int i = 0; i < 4; ++i) {
      REQUIRE(pa[static_cast<std::size_t>(i)] >= 0.0);
      REQUIRE(pa[static_cast<std::size_t>(i)] == Catch::Approx(pb[static_cast<std::size_t>(i)]).margin(1e-12));
      sum += pa[static_cast<std::size_t>(i)];
    }
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
  }

  softmax(std::vector<double>{1000.0, 999.0, -1000.0}, probs);
  REQUIRE(std::isfinite(probs[0]));
  REQUIRE(probs[0] + probs[1] == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("sigmoid midpoint, symmetry and saturation") {
  REQUIRE(sigmoid(0.0) == 0.5);
  for (const double x : {0.1, 1.0, 5.0, 30.0, 500.0}) {
    REQUIRE(sigmoid(x) + sigmoid(-x) == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(sigmoid(x) > 0.5);
    REQUIRE(std::isfinite(sigmoid(-x)));
  }
  REQUIRE(sigmoid(500.0) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("fan-in init stays inside its uniform bound") {
  Rng rng(111);
  DenseParams<float> p(100, 50);
  init_dense(p, rng);
  const double bound = std::sqrt(6.0 / 100.0);
  double mx = 0;
  for (const float x : p.w) {
    REQUIRE(std::abs(x) <= bound);
    mx = std::max(mx, static_cast<double>(std::abs(x)));
  }
  REQUIRE(mx > 0.8 * bound);  // actually fills the range
  for (const float b : p.b) REQUIRE(b == 0.0f);
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

TEST_CASE("sgd_step follows the momentum recurrence") {
  std::vector<float> w = {1.0f}, g = {0.5f}, m = {0.0f};
  std::vector<NamedTensor<float>> ws = {{"w", &w, {1}}}, gs = {{"w", &g, {1}}},
                                  ms = {{"w", &m, {1}}};
  SgdOptions<float> opt;
  opt.lr = 0.1f;
  opt.momentum = 0.9f;
  opt.clip_norm = -1.0f;
  sgd_step(ws, gs, ms, opt);
  REQUIRE(m[0] == Catch::Approx(-0.05).margin(1e-7));
  REQUIRE(w[0] == Catch::Approx(0.95).margin(1e-7));
  sgd_step(ws, gs, ms, opt);
  REQUIRE(m[0] == Catch::Approx(0.9 * -0.05 - 0.05).margin(1e-7));
  REQUIRE(w[0] == Catch::Approx(0.95 - 0.095).margin(1e-7));
}

TEST_CASE("sgd_step clips by global norm across all tensors") {
  std::vector<float> w1 = {0.f, 0.f}, g1 = {3.0f, 0.0f}, m1 = {0.f, 0.f};
  std::vector<float> w2 = {0.f}, g2 = {4.0f}, m2 = {0.f};
  std::vector<NamedTensor<float>> ws = {{"a", &w1, {2}}, {"b", &w2, {1}}};
  std::vector<NamedTensor<float>> gs = {{"a", &g1, {2}}, {"b", &g2, {1}}};
  std::vector<NamedTensor<float>> ms = {{"a", &m1, {2}}, {"b", &m2, {1}}};
  SgdOptions<float> opt;
  opt.lr = 1.0f;
  opt.momentum = 0.0f;
  opt.clip_norm = 1.0f;  // joint norm is 5, so everything scales by 1/5
  sgd_step(ws, gs, ms, opt);
  REQUIRE(w1[0] == Catch::Approx(-0.6).margin(1e-7));
  REQUIRE(w2[0] == Catch::Approx(-0.8).margin(1e-7));

  // Below the threshold nothing is scaled.
  g1 = {0.3f, 0.0f};
  g2 = {0.4f};
  w1 = {0.f, 0.f};
  w2 = {0.f};
  m1 = {0.f, 0.f};
  m2 = {0.f};
  sgd_step(ws, gs, ms, opt);
  REQUIRE(w1[0] == Catch::Approx(-0.3).margin(1e-7));
  REQUIRE(w2[0] == Catch::Approx(-0.4).margin(1e-7));
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

TEST_CASE("extract_features output is ceil(input/4) per side") {
  DetectorConfig cfg;
  Rng rng(113);
  BackboneParams<float> p(cfg);
  init_backbone(p, rng);
  BackboneCache<float> cache;
  const auto img = random_tensor<float>(64, 64, 3, rng, 0.0, 1.0);
  const auto& feat = extract_features(img, p, cache);
  REQUIRE(feat.h == 16);
  REQUIRE(feat.w == 16);
  REQUIRE(feat.c == 32);
  for (const float x : feat.v) REQUIRE(x >= 0.0f);  // post-relu

  const auto odd = random_tensor<float>(30, 22, 3, rng, 0.0, 1.0);
  BackboneCache<float> cache2;
  const auto& f2 = extract_features(odd, p, cache2);
  REQUIRE(f2.h == 8);   // ceil(ceil(30/2)/2)
  REQUIRE(f2.w == 6);   // ceil(ceil(22/2)/2)
}

TEST_CASE("extract_features rejects non-finite inputs and weights") {
  DetectorConfig cfg;
  Rng rng(115);
  BackboneParams<float> p(cfg);
  init_backbone(p, rng);
  BackboneCache<float> cache;
  auto img = random_tensor<float>(16, 16, 3, rng, 0.0, 1.0);
  img.at(3, 3, 0) = std::numeric_limits<float>::quiet_NaN();
  REQUIRE_THROWS_AS(extract_features(img, p, cache), std::invalid_argument);
  img.at(3, 3, 0) = 0.5f;
  p.c2.w[7] = std::numeric_limits<float>::infinity();
  REQUIRE_THROWS_AS(extract_features(img, p, cache), std::invalid_argument);
}

TEST_CASE("backbone_backward matches finite differences through conv/pool/relu") {
  DetectorConfig cfg;
  cfg.bb_c1 = 2;
  cfg.bb_c2 = 3;
  cfg.bb_c3 = 4;
  Rng rng(117);
  BackboneParams<double> p(cfg);
  init_backbone(p, rng);
  const auto img = random_tensor<double>(8, 8, 3, rng, 0.0, 1.0);

  BackboneCache<double> cache;
  const auto& feat = extract_features(img, p, cache);
  std::vector<double> r(feat.size());
  for (auto& x : r) x = rng.uniform(-1.0, 1.0);
  auto objective = [&](const BackboneParams<double>& params) {
    BackboneCache<double> c2;
    const auto& f = extract_features(img, params, c2);
    double s = 0;
    for (std::size_t i = 0; i < f.size(); ++i) s += r[i] * f.v[i];
    return s;
  };
  Tensor3<double> dfeat(feat.h, feat.w, feat.c);
  dfeat.v = r;
  BackboneParams<double> grad(cfg);
  grad.zero();
  backbone_backward(img, p, cache, dfeat, &grad);

  const double eps = 1e-6;
  auto check = [&](std::vector<double>& w, std::vector<double>& gw, std::size_t i) {
    const double keep = w[i];
    w[i] = keep + eps;
    const double up = objective(p);
    w[i] = keep - eps;
    const double dn = objective(p);
    w[i] = keep;
    const double fd = (up - dn) / (2 * eps);
    const double tol = std::max(1e-6, 1e-3 * std::abs(fd));
    REQUIRE(gw[i] == Catch::Approx(fd).margin(tol));
  };
  Rng pick(119);
  for (int t = 0; t < 10; ++t) check(p.c1.w, grad.c1.w, pick.uniform_index(p.c1.w.size()));
  for (int t = 0; t < 10; ++t) check(p.c2.w, grad.c2.w, pick.uniform_index(p.c2.w.size()));
  for (int t = 0; t < 10; ++t) check(p.c3.w, grad.c3.w, pick.uniform_index(p.c3.w.size()));
  for (int t = 0; t < 4; ++t) check(p.c1.b, grad.c1.b, pick.uniform_index(p.c1.b.size()));
  for (int t = 0; t < 4; ++t) check(p.c3.b, grad.c3.b, pick.uniform_index(p.c3.b.size()));
}

// ---------------------------------------------------------------------------
// RoI pooling
// ---------------------------------------------------------------------------

TEST_CASE("roi_pool on a constant map returns the constant everywhere") {
  Tensor3<float> fm(16, 16, 3, 2.5f);
  for (const auto& box : {Box{0, 0, 64, 64}, Box{5, 7, 23, 40}, Box{1, 1, 3, 3}}) {
    const auto out = roi_pool(fm, 4, box, 6);
    REQUIRE(out.x.h == 6);
    REQUIRE(out.x.w == 6);
    REQUIRE(out.x.c == 3);
    for (const float v : out.x.v) REQUIRE(v == 2.5f);
  }
}

TEST_CASE("roi_pool d=2 over a 4x4 region picks quadrant maxima") {
  Rng rng(121);
  auto fm = random_tensor<float>(4, 4, 1, rng);
  const auto out = roi_pool(fm, 1, Box{0, 0, 4, 4}, 2);
  for (int qi = 0; qi < 2; ++qi)
    for (int qj = 0; qj < 2; ++qj) {
      float want = -1e30f;
      for (int y = 2 * qi; y < 2 * qi + 2; ++y)
        for (int x = 2 * qj; x < 2 * qj + 2; ++x) want = std::max(want, fm.at(y, x, 0));
      REQUIRE(out.x.at(qi, qj, 0) == want);
    }
}

TEST_CASE("roi_pool brute force: every box on a 6x6 map, d in {2, 3}") {
  Rng rng(123);
  const auto fm = random_tensor<float>(6, 6, 2, rng);
  for (int y0 = 0; y0 < 6; ++y0)
    for (int y1 = y0 + 1; y1 <= 6; ++y1)
      for (int x0 = 0; x0 < 6; ++x0)
        for (int x1 = x0 + 1; x1 <= 6; ++x1)
          for (const int d : {2, 3}) {
            const Box box{static_cast<float>(x0), static_cast<float>(y0),
                          static_cast<float>(x1), static_cast<float>(y1)};
            const auto out = roi_pool(fm, 1, box, d);
            for (int k = 0; k < 2; ++k) {
              // Global max of the region survives pooling, and no bin exceeds it.
              float region_max = -1e30f;
              for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) region_max = std::max(region_max, fm.at(y, x, k));
              float produced_max = -1e30f;
              for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) {
                  const float v = out.x.at(i, j, k);
                  REQUIRE(v <= region_max);
                  produced_max = std::max(produced_max, v);
                  // argmax points at a region cell holding exactly this value
                  const int am = out.argmax[(static_cast<std::size_t>(i) * d + j) * 2 + k];
                  REQUIRE(fm.v[static_cast<std::size_t>(am)] == v);
                  const int cell = am / 2, cy = cell / 6, cx = cell % 6;
                  REQUIRE(cy >= y0);
                  REQUIRE(cy < y1);
                  REQUIRE(cx >= x0);
                  REQUIRE(cx < x1);
                }
              REQUIRE(produced_max == region_max);
            }
          }
}

TEST_CASE("roi_pool clamps degenerate and out-of-range boxes") {
  Rng rng(125);
  const auto fm = random_tensor<float>(8, 8, 1, rng);
  // Zero-area box collapses to one feature cell.
  const auto pt = roi_pool(fm, 4, Box{9, 9, 9, 9}, 6);
  for (const float v : pt.x.v) REQUIRE(v == fm.at(2, 2, 0));
  // Box far outside clamps into the map without throwing.
  REQUIRE_NOTHROW(roi_pool(fm, 4, Box{100, 100, 200, 200}, 6));
  const auto clamped = roi_pool(fm, 4, Box{-50, -50, -40, -40}, 6);
  for (const float v : clamped.x.v) REQUIRE(v == fm.at(0, 0, 0));
}

TEST_CASE("roi_pool_backward adds gradient only at argmax cells") {
  Rng rng(127);
  const auto fm = random_tensor<float>(6, 6, 2, rng);
  const auto out = roi_pool(fm, 1, Box{1, 1, 5, 5}, 2);
  Tensor3<float> dp(2, 2, 2);
  dp.at(1, 0, 1) = 3.0f;
  Tensor3<float> dfm(6, 6, 2);
  roi_pool_backward(dp, out.argmax, dfm);
  float total = 0.f;
  int nonzero = 0;
  for (const float g : dfm.v) {
    total += g;
    if (g != 0.f) ++nonzero;
  }
  REQUIRE(nonzero == 1);
  REQUIRE(total == 3.0f);
  REQUIRE(dfm.v[static_cast<std::size_t>(out.argmax[(2 + 0) * 2 + 1])] == 3.0f);
}

// ---------------------------------------------------------------------------
// Heads and detection loss
// ---------------------------------------------------------------------------

TEST_CASE("forward_heads at zero weights yields a uniform class posterior") {
  DetectorConfig cfg;
  HeadParams<float> p(cfg);  // all-zero params
  HeadCache<float> cache;
  Rng rng(129);
  const auto x = random_tensor<float>(6, 6, 32, rng);
  const auto out = forward_heads(x, p, cache);
  REQUIRE(out.cls_probs.size() == 4);
  REQUIRE(out.bbox_pred.size() == 12);
  for (const float pr : out.cls_probs) REQUIRE(pr == Catch::Approx(0.25).margin(1e-6));
  for (const float b : out.bbox_pred) REQUIRE(b == 0.0f);
}

TEST_CASE("forward_heads posterior is a distribution for random weights") {
  DetectorConfig cfg;
  Rng rng(131);
  HeadParams<float> p(cfg);
  init_heads(p, rng);
  HeadCache<float> cache;
  for (int t = 0; t < 50; ++t) {
    const auto x = random_tensor<float>(6, 6, 32, rng, 0.0, 2.0);
    const auto out = forward_heads(x, p, cache);
    double sum = 0;
    for (const float pr : out.cls_probs) {
      REQUIRE(pr >= 0.0f);
      sum += pr;
    }
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("smooth_l1 values, slopes and continuity at the knee") {
  REQUIRE(smooth_l1(0.0) == 0.0);
  REQUIRE(smooth_l1(0.5) == Catch::Approx(0.125).margin(1e-12));
  REQUIRE(smooth_l1(1.0) == Catch::Approx(0.5).margin(1e-12));
  REQUIRE(smooth_l1(2.0) == Catch::Approx(1.5).margin(1e-12));
  REQUIRE(smooth_l1(-2.0) == Catch::Approx(1.5).margin(1e-12));
  REQUIRE(smooth_l1(1.0 - 1e-9) == Catch::Approx(smooth_l1(1.0 + 1e-9)).margin(1e-8));
  REQUIRE(smooth_l1_grad(0.5) == 0.5);
  REQUIRE(smooth_l1_grad(3.0) == 1.0);
  REQUIRE(smooth_l1_grad(-3.0) == -1.0);
}

TEST_CASE("detector_loss hand-checked cases") {
  DetectorOutput<double> out;
  out.cls_probs = {0.5, 0.5, 0.0, 0.0};
  out.bbox_pred.assign(12, 0.0);

  DetectionLabel bg;  // background: pure cross entropy
  bg.cls = 0;
  REQUIRE(detector_loss(out, bg) == Catch::Approx(std::log(2.0)).margin(1e-12));

  DetectionLabel fg;  // foreground with one half-unit residual: + smooth_l1(0.5)
  fg.cls = 1;
  fg.loc = {0.5f, 0.0f, 0.0f, 0.0f};
  REQUIRE(detector_loss(out, fg) == Catch::Approx(0.8181).margin(5e-5));
  REQUIRE(detector_loss(out, fg) == Catch::Approx(std::log(2.0) + 0.125).margin(1e-9));

  // Perfect prediction costs nothing beyond -log 1 = 0.
  DetectorOutput<double> sure;
  sure.cls_probs = {0.0, 1.0, 0.0, 0.0};
  sure.bbox_pred.assign(12, 0.0);
  DetectionLabel exact;
  exact.cls = 1;
  exact.loc = {0, 0, 0, 0};
  REQUIRE(detector_loss(sure, exact) == 0.0);

  // Zero probability clamps instead of producing infinity.
  DetectionLabel impossible;
  impossible.cls = 2;
  const double clamped = detector_loss(out, impossible);
  REQUIRE(std::isfinite(clamped));
  REQUIRE(clamped == Catch::Approx(-std::log(1e-12)).margin(1e-9));

  DetectionLabel ignored;
  ignored.cls = kIgnoreLabel;
  REQUIRE_THROWS_AS(detector_loss(out, ignored), std::invalid_argument);
}

TEST_CASE("detector_loss decreases as the true-class probability rises") {
  DetectionLabel bg;
  bg.cls = 0;
  double prev = 1e30;
  for (double p = 0.1; p < 1.0; p += 0.1) {
    DetectorOutput<double> out;
    out.cls_probs = {p, 1.0 - p, 0.0, 0.0};
    out.bbox_pred.assign(12, 0.0);
    const double l = detector_loss(out, bg);
    REQUIRE(l < prev);
    prev = l;
  }
}

TEST_CASE("softmax_loss clamps and matches -log p") {
  DetectorOutput<double> out;
  out.cls_probs = {0.2, 0.8};
  REQUIRE(softmax_loss(out, 1) == Catch::Approx(-std::log(0.8)).margin(1e-12));
  out.cls_probs = {1.0, 0.0};
  REQUIRE(std::isfinite(softmax_loss(out, 1)));
}

TEST_CASE("detector loss gradient matches finite differences end to end") {
  DetectorConfig cfg;
  cfg.num_classes = 2;
  cfg.d = 2;
  cfg.bb_c3 = 4;
  cfg.head_hidden = 8;
  Rng rng(133);
  HeadParams<double> p(cfg);
  init_heads(p, rng);

  for (int instance = 0; instance < 10; ++instance) {
    const auto x = random_tensor<double>(2, 2, 4, rng);
    DetectionLabel label;
    label.cls = static_cast<int>(rng.uniform_int(3));  // 0..2: background or one of two classes
    for (auto& t : label.loc) t = static_cast<float>(rng.uniform(-0.4, 0.4));

    HeadCache<double> cache;
    const auto out = forward_heads(x, p, cache);
    std::vector<double> dlogits, dbbox;
    detector_loss_grad(out, label, 1.0, dlogits, dbbox);
    std::vector<double> dx;
    HeadParams<double> grad(cfg);
    grad.zero();
    heads_backward(p, cache, dlogits, dbbox, &dx, &grad);

    auto loss_at = [&](const HeadParams<double>& params, const Tensor3<double>& input) {
      HeadCache<double> c;
      return detector_loss(forward_heads(input, params, c), label);
    };
    const double eps = 1e-6;
    auto fd_check = [&](double got, double fd) {
      const double tol = std::max(1e-6, 1e-3 * std::abs(fd));
      REQUIRE(got == Catch::Approx(fd).margin(tol));
    };
    // Sampled weights from each head layer.
    for (int t = 0; t < 6; ++t) {
      const std::size_t i = rng.uniform_index(p.fc1.w.size());
      const double keep = p.fc1.w[i];
      p.fc1.w[i] = keep + eps;
      const double up = loss_at(p, x);
      p.fc1.w[i] = keep - eps;
      const double dn = loss_at(p, x);
      p.fc1.w[i] = keep;
      fd_check(grad.fc1.w[i], (up - dn) / (2 * eps));
    }
    for (int t = 0; t < 6; ++t) {
      const std::size_t i = rng.uniform_index(p.cls.w.size());
      const double keep = p.cls.w[i];
      p.cls.w[i] = keep + eps;
      const double up = loss_at(p, x);
      p.cls.w[i] = keep - eps;
      const double dn = loss_at(p, x);
      p.cls.w[i] = keep;
      fd_check(grad.cls.w[i], (up - dn) / (2 * eps));
    }
    for (int t = 0; t < 6; ++t) {
      const std::size_t i = rng.uniform_index(p.bbox.w.size());
      const double keep = p.bbox.w[i];
      p.bbox.w[i] = keep + eps;
      const double up = loss_at(p, x);
      p.bbox.w[i] = keep - eps;
      const double dn = loss_at(p, x);
      p.bbox.w[i] = keep;
      fd_check(grad.bbox.w[i], (up - dn) / (2 * eps));
    }
    // Gradient w.r.t. the pooled feature itself (the adversaries rely on it).
    for (int t = 0; t < 8; ++t) {
      const std::size_t i = rng.uniform_index(x.size());
      Tensor3<double> plus = x, minus = x;
      plus.v[i] += eps;
      minus.v[i] -= eps;
      fd_check(dx[i], (loss_at(p, plus) - loss_at(p, minus)) / (2 * eps));
    }
  }
}

TEST_CASE("detector_loss_grad scale multiplies both terms") {
  DetectorOutput<double> out;
  out.cls_probs = {0.7, 0.1, 0.1, 0.1};
  out.bbox_pred.assign(12, 0.3);
  DetectionLabel fg;
  fg.cls = 2;
  fg.loc = {0.1f, 0.1f, 0.1f, 0.1f};
  std::vector<double> d1, b1, d2, b2;
  detector_loss_grad(out, fg, 1.0, d1, b1);
  detector_loss_grad(out, fg, 0.25, d2, b2);
  for (std::size_t i = 0; i < d1.size(); ++i) REQUIRE(d2[i] == Catch::Approx(0.25 * d1[i]).margin(1e-12));
  for (std::size_t i = 0; i < b1.size(); ++i) REQUIRE(b2[i] == Catch::Approx(0.25 * b1[i]).margin(1e-12));
  // Softmax gradient sums to zero over classes.
  double s = 0;
  for (const double g : d1) s += g;
  REQUIRE(s == Catch::Approx(0.0).margin(1e-12));
}
