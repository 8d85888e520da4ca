#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "afrcnn/boxes.hpp"
#include "afrcnn/common.hpp"
#include "afrcnn/config.hpp"
#include "afrcnn/detector.hpp"
#include "afrcnn/image.hpp"

namespace afrcnn {

// Procedural shapes benchmark. Classes: 1 = disc, 2 = triangle, 3 = bar.
// Objects are bright with class-independent random colors (so class identity
// is carried by shape alone), clutter is mid-gray, occluders are
// background-colored strips that erase part of an object's silhouette. The
// three splits are train, test_clean and test_occluded; the two test splits
// share scene seeds, so they contain the same objects and differ only by
// occluders.

struct SceneObject {
  int cls = 1;
  double cx = 0, cy = 0, r = 1, rot = 0;
  std::array<double, 3> color{};
};

struct ScenePatch {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  std::array<double, 3> color{};
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int w = 0, h = 0;
  std::array<double, 3> bg{};
  std::vector<SceneObject> objects;
  std::vector<ScenePatch> clutter;
  std::vector<ScenePatch> occluders;
};

// Signed distance to the object boundary at a continuous point; negative
// inside. Rendering converts it to coverage with a one-pixel falloff.
inline double object_sdf(const SceneObject& o, double px, double py) {
  const double dx = px - o.cx, dy = py - o.cy;
  switch (o.cls) {
    case 1:
      return std::sqrt(dx * dx + dy * dy) - o.r;
    case 2: {
      double sd = -1e9;
      std::array<double, 3> vx{}, vy{};
      for (int k = 0; k < 3; ++k) {
        const double a = o.rot + k * (2.0 * kPi / 3.0);
        vx[static_cast<std::size_t>(k)] = o.cx + o.r * std::cos(a);
        vy[static_cast<std::size_t>(k)] = o.cy + o.r * std::sin(a);
      }
      for (int k = 0; k < 3; ++k) {
        const int k2 = (k + 1) % 3;
        const double ex = vx[static_cast<std::size_t>(k2)] - vx[static_cast<std::size_t>(k)];
        const double ey = vy[static_cast<std::size_t>(k2)] - vy[static_cast<std::size_t>(k)];
        const double len = std::sqrt(ex * ex + ey * ey);
        double nx = ey / len, ny = -ex / len;
        // orient the normal away from the centroid
        if ((o.cx - vx[static_cast<std::size_t>(k)]) * nx + (o.cy - vy[static_cast<std::size_t>(k)]) * ny > 0) {
          nx = -nx;
          ny = -ny;
        }
        const double d = (px - vx[static_cast<std::size_t>(k)]) * nx + (py - vy[static_cast<std::size_t>(k)]) * ny;
        sd = std::max(sd, d);
      }
      return sd;
    }
    default: {
      const double c = std::cos(o.rot), s = std::sin(o.rot);
      const double qx = c * dx + s * dy;
      const double qy = -s * dx + c * dy;
      const double hx = o.r;
      const double hy = std::max(1.5, 0.25 * o.r);
      return std::max(std::abs(qx) - hx, std::abs(qy) - hy);
    }
  }
}

inline double object_coverage(const SceneObject& o, double px, double py) {
  const double v = 0.5 - object_sdf(o, px, py);
  return v < 0 ? 0.0 : (v > 1 ? 1.0 : v);
}

inline Box object_box(const SceneObject& o, int img_w, int img_h) {
  double x1, y1, x2, y2;
  if (o.cls == 1) {
    x1 = o.cx - o.r;
    y1 = o.cy - o.r;
    x2 = o.cx + o.r;
    y2 = o.cy + o.r;
  } else if (o.cls == 2) {
    x1 = y1 = 1e9;
    x2 = y2 = -1e9;
    for (int k = 0; k < 3; ++k) {
      const double a = o.rot + k * (2.0 * kPi / 3.0);
      const double vx = o.cx + o.r * std::cos(a);
      const double vy = o.cy + o.r * std::sin(a);
      x1 = std::min(x1, vx);
      y1 = std::min(y1, vy);
      x2 = std::max(x2, vx);
      y2 = std::max(y2, vy);
    }
  } else {
    const double hx = o.r, hy = std::max(1.5, 0.25 * o.r);
    const double c = std::abs(std::cos(o.rot)), s = std::abs(std::sin(o.rot));
    const double ex = c * hx + s * hy;
    const double ey = s * hx + c * hy;
    x1 = o.cx - ex;
    y1 = o.cy - ey;
    x2 = o.cx + ex;
    y2 = o.cy + ey;
  }
  Box b{static_cast<float>(x1), static_cast<float>(y1), static_cast<float>(x2), static_cast<float>(y2)};
  return clip_box(b, img_w, img_h);
}

inline int pick_class(const TrainConfig& cfg, Rng& rng) {
  const double total = cfg.class_w1 + cfg.class_w2 + cfg.class_w3;
  const double u = rng.uniform01() * total;
  if (u < cfg.class_w1) return 1;
  if (u < cfg.class_w1 + cfg.class_w2) return 2;
  return 3;
}

// Objects and clutter, no occluders. Pure function of (config subset, seed).
inline SceneSpec build_scene(const TrainConfig& cfg, std::uint64_t scene_seed) {
  SceneSpec spec;
  spec.seed = scene_seed;
  spec.w = spec.h = cfg.image_size;
  Rng rng(scene_seed);
  for (auto& c : spec.bg) c = rng.uniform(0.08, 0.20);
  const int n_obj = cfg.min_objects + rng.uniform_index(cfg.max_objects - cfg.min_objects + 1);
  std::vector<Box> placed;
  for (int i = 0; i < n_obj; ++i) {
    SceneObject o;
    o.cls = pick_class(cfg, rng);
    o.r = rng.uniform(14.0, 20.0);
    o.rot = rng.uniform(0.0, 2.0 * kPi);
    for (auto& c : o.color) c = rng.uniform(0.60, 1.0);
    const double margin = o.r + 2.0;
    bool ok = false;
    for (int attempt = 0; attempt < 20 && !ok; ++attempt) {
      o.cx = rng.uniform(margin, spec.w - margin);
      o.cy = rng.uniform(margin, spec.h - margin);
      const Box b = object_box(o, spec.w, spec.h);
      ok = true;
      for (const Box& p : placed)
        if (iou(b, p) > 0.30) {
          ok = false;
          break;
        }
    }
    if (!ok) continue;  // crowded scene; keep what fits
    placed.push_back(object_box(o, spec.w, spec.h));
    spec.objects.push_back(o);
  }
  const int n_clutter = 2 + rng.uniform_index(6);
  for (int i = 0; i < n_clutter; ++i) {
    const double sz = rng.uniform(2.0, 5.0);
    const double x = rng.uniform(0.0, spec.w - sz);
    const double y = rng.uniform(0.0, spec.h - sz);
    const double g = rng.uniform(0.30, 0.50);
    ScenePatch p{x, y, x + sz, y + sz, {}};
    for (auto& c : p.color) c = g + rng.uniform(-0.04, 0.04);
    spec.clutter.push_back(p);
  }
  return spec;
}

namespace detail {

// Pixel centers (x + .5, y + .5) where the object covers most of the pixel.
struct ObjectPixels {
  std::vector<int> x, y;
};

inline bool in_patch(const ScenePatch& p, double px, double py) {
  return px >= p.x1 && px < p.x2 && py >= p.y1 && py < p.y2;
}

inline double covered_fraction(const ObjectPixels& pix, const std::vector<std::uint8_t>& occ, int w,
                               const ScenePatch* strip) {
  if (pix.x.empty()) return 0.0;
  int covered = 0;
  for (std::size_t i = 0; i < pix.x.size(); ++i) {
    const int x = pix.x[i], y = pix.y[i];
    if (occ[static_cast<std::size_t>(y) * w + x] ||
        (strip != nullptr && in_patch(*strip, x + 0.5, y + 0.5)))
      ++covered;
  }
  return static_cast<double>(covered) / static_cast<double>(pix.x.size());
}

}  // namespace detail

// Dark occlusion strips over a long-tail coverage distribution. By
// construction no object ever has more than max_occlusion of its rendered
// pixels covered, counting all strips together.
inline void add_occluders(SceneSpec& spec, const TrainConfig& cfg, std::uint64_t occ_seed) {
  Rng rng(occ_seed);
  const int w = spec.w, h = spec.h;
  std::vector<detail::ObjectPixels> pixels(spec.objects.size());
  std::vector<Box> bounds(spec.objects.size());
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const SceneObject& o = spec.objects[i];
    const Box b = object_box(o, w, h);
    bounds[i] = b;
    const int x0 = std::max(0, static_cast<int>(std::floor(b.x1)) - 1);
    const int y0 = std::max(0, static_cast<int>(std::floor(b.y1)) - 1);
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(b.x2)) + 1);
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(b.y2)) + 1);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (object_coverage(o, x + 0.5, y + 0.5) > 0.5) {
          pixels[i].x.push_back(x);
          pixels[i].y.push_back(y);
        }
  }
  std::vector<std::uint8_t> occ(static_cast<std::size_t>(w) * h, 0);
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    if (rng.uniform01() >= cfg.occlude_prob) continue;
    const double u = rng.uniform01();
    const double target = cfg.max_occlusion * u * u;  // long tail: mostly light occlusion
    const int side = rng.uniform_index(4);
    // Background-colored strips: occlusion erases object evidence instead of
    // introducing a new dark shape of its own.
    std::array<double, 3> color{};
    for (std::size_t c = 0; c < 3; ++c)
      color[c] = std::clamp(spec.bg[c] + rng.uniform(-0.02, 0.02), 0.0, 1.0);
    if (target < 0.02 || pixels[i].x.empty()) continue;
    const Box& b = bounds[i];
    const double bx1 = std::max(0.0, static_cast<double>(b.x1) - 2.0);
    const double by1 = std::max(0.0, static_cast<double>(b.y1) - 2.0);
    const double bx2 = std::min(static_cast<double>(w), static_cast<double>(b.x2) + 2.0);
    const double by2 = std::min(static_cast<double>(h), static_cast<double>(b.y2) + 2.0);
    const double extent = (side < 2) ? bx2 - bx1 : by2 - by1;
    auto strip_for = [&](double t) {
      ScenePatch p{bx1, by1, bx2, by2, color};
      if (side == 0) p.x2 = bx1 + t;
      else if (side == 1) p.x1 = bx2 - t;
      else if (side == 2) p.y2 = by1 + t;
      else p.y1 = by2 - t;
      return p;
    };
    auto feasible = [&](double t) {
      const ScenePatch strip = strip_for(t);
      for (std::size_t j = 0; j < spec.objects.size(); ++j) {
        const double limit = (j == i) ? target : cfg.max_occlusion;
        if (detail::covered_fraction(pixels[j], occ, w, &strip) > limit) return false;
      }
      return true;
    };
    if (!feasible(0.0)) continue;  // a neighbor's strip already used this object's budget
    double lo = 0.0, hi = extent;
    for (int it = 0; it < 30; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (feasible(mid)) lo = mid;
      else hi = mid;
    }
    if (lo < 1.0) continue;  // would be invisible
    const ScenePatch strip = strip_for(lo);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (detail::in_patch(strip, x + 0.5, y + 0.5)) occ[static_cast<std::size_t>(y) * w + x] = 1;
    spec.occluders.push_back(strip);
  }
}

inline ImageU8 render_scene(const SceneSpec& spec) {
  const int w = spec.w, h = spec.h;
  std::vector<double> buf(static_cast<std::size_t>(w) * h * 3);
  Rng noise(mix_seed(spec.seed, 9001));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double* px = buf.data() + (static_cast<std::size_t>(y) * w + x) * 3;
      for (int c = 0; c < 3; ++c)
        px[c] = spec.bg[static_cast<std::size_t>(c)] + noise.uniform(-0.015, 0.015);
    }
  auto paint_patch = [&](const ScenePatch& p) {
    const int x0 = std::max(0, static_cast<int>(std::floor(p.x1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(p.y1)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(p.x2)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(p.y2)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (detail::in_patch(p, x + 0.5, y + 0.5)) {
          double* px = buf.data() + (static_cast<std::size_t>(y) * w + x) * 3;
          for (int c = 0; c < 3; ++c) px[c] = p.color[static_cast<std::size_t>(c)];
        }
  };
  for (const ScenePatch& p : spec.clutter) paint_patch(p);
  for (const SceneObject& o : spec.objects) {
    const Box b = object_box(o, w, h);
    const int x0 = std::max(0, static_cast<int>(std::floor(b.x1)) - 1);
    const int y0 = std::max(0, static_cast<int>(std::floor(b.y1)) - 1);
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(b.x2)) + 1);
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(b.y2)) + 1);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double cov = object_coverage(o, x + 0.5, y + 0.5);
        if (cov <= 0) continue;
        double* px = buf.data() + (static_cast<std::size_t>(y) * w + x) * 3;
        for (int c = 0; c < 3; ++c)
          px[c] = px[c] * (1.0 - cov) + o.color[static_cast<std::size_t>(c)] * cov;
      }
  }
  for (const ScenePatch& p : spec.occluders) paint_patch(p);
  ImageU8 img(w, h);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const double v = buf[i] < 0 ? 0 : (buf[i] > 1 ? 1 : buf[i]);
    img.rgb[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

// ---------------------------------------------------------------------------
// Dataset on disk
// ---------------------------------------------------------------------------

struct AnnotatedImage {
  std::string rel_path;
  std::vector<Box> boxes;
  std::vector<int> classes;
};

struct DatasetSplit {
  std::string dir;  // absolute or cwd-relative split directory
  std::vector<AnnotatedImage> items;
};

// Hash over only the fields that determine dataset content, so retraining
// with a different mode or lr reuses the same generated data.
inline std::uint64_t data_config_hash(const TrainConfig& cfg) {
  static const char* keys[] = {"num_classes", "image_size", "train_images", "test_images",
                               "class_w1",    "class_w2",   "class_w3",     "min_objects",
                               "max_objects", "max_occlusion", "occlude_prob", "seed"};
  std::ostringstream os;
  const_cast<TrainConfig&>(cfg).visit([&](const char* name, auto& field) {
    for (const char* k : keys)
      if (std::string(name) == k) os << name << " = " << detail::format_value(field) << '\n';
  });
  return fnv1a(os.str());
}

namespace detail {

inline std::string image_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%05d.ppm", index);
  return buf;
}

inline std::string annotation_line(const std::string& rel, const std::vector<Box>& boxes,
                                   const std::vector<int>& classes) {
  std::ostringstream os;
  os << rel;
  os.setf(std::ios::fixed);
  os.precision(2);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Box& b = boxes[i];
    os << ' ' << b.x1 << ' ' << b.y1 << ' ' << b.x2 << ' ' << b.y2 << ' ' << classes[i];
  }
  return os.str();
}

}  // namespace detail

struct GeneratedSplit {
  std::string name;
  std::vector<std::string> annotation_lines;
  std::vector<std::uint64_t> image_hashes;
  std::vector<std::string> image_rel_paths;
};

struct GenResult {
  std::string manifest_path;
  std::uint64_t manifest_hash = 0;
};

// Scene stream ids; test_clean and test_occluded share the scene stream so
// their object layouts pair up image-for-image.
inline constexpr std::uint64_t kStreamTrain = 0;
inline constexpr std::uint64_t kStreamTest = 1;
inline constexpr std::uint64_t kStreamOccluders = 2;

inline GeneratedSplit generate_split(const TrainConfig& cfg, const std::string& root,
                                     const std::string& name, int count,
                                     std::uint64_t scene_stream, bool occluded) {
  namespace fs = std::filesystem;
  const fs::path split_dir = fs::path(root) / name;
  fs::create_directories(split_dir / "images");
  GeneratedSplit out;
  out.name = name;
  out.annotation_lines.resize(static_cast<std::size_t>(count));
  out.image_hashes.resize(static_cast<std::size_t>(count));
  out.image_rel_paths.resize(static_cast<std::size_t>(count));
  parallel_for(count, [&](int i) {
    SceneSpec spec = build_scene(cfg, mix_seed(cfg.seed, scene_stream, static_cast<std::uint64_t>(i)));
    if (occluded) add_occluders(spec, cfg, mix_seed(cfg.seed, kStreamOccluders, static_cast<std::uint64_t>(i)));
    const ImageU8 img = render_scene(spec);
    const std::vector<std::uint8_t> bytes = ppm_bytes(img);
    const std::string rel = "images/" + detail::image_name(i);
    write_file_bytes((split_dir / rel).string(), bytes.data(), bytes.size());
    std::vector<Box> boxes;
    std::vector<int> classes;
    for (const SceneObject& o : spec.objects) {
      boxes.push_back(object_box(o, spec.w, spec.h));
      classes.push_back(o.cls);
    }
    const std::size_t slot = static_cast<std::size_t>(i);
    out.annotation_lines[slot] = detail::annotation_line(rel, boxes, classes);
    out.image_hashes[slot] = fnv1a(bytes.data(), bytes.size());
    out.image_rel_paths[slot] = rel;
  });
  std::ostringstream ann;
  for (const auto& line : out.annotation_lines) ann << line << '\n';
  const std::string ann_text = ann.str();
  write_file_bytes((split_dir / "annotations.txt").string(), ann_text.data(), ann_text.size());
  return out;
}

inline GenResult generate_dataset(const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.num_classes != 3) throw ConfigError("the shapes benchmark defines exactly 3 classes");
  const std::string& root = cfg.data_root;
  std::vector<GeneratedSplit> splits;
  splits.push_back(generate_split(cfg, root, "train", cfg.train_images, kStreamTrain, false));
  splits.push_back(generate_split(cfg, root, "test_clean", cfg.test_images, kStreamTest, false));
  splits.push_back(generate_split(cfg, root, "test_occluded", cfg.test_images, kStreamTest, true));
  std::ostringstream mf;
  mf << "data_hash " << hex64(data_config_hash(cfg)) << '\n';
  for (const GeneratedSplit& s : splits) {
    const std::string ann_path = s.name + "/annotations.txt";
    mf << "file " << ann_path << ' '
       << hex64(fnv1a(read_file_text((std::filesystem::path(root) / ann_path).string()))) << '\n';
    for (std::size_t i = 0; i < s.image_rel_paths.size(); ++i)
      mf << "file " << s.name << '/' << s.image_rel_paths[i] << ' ' << hex64(s.image_hashes[i]) << '\n';
  }
  const std::string text = mf.str();
  GenResult res;
  res.manifest_path = (std::filesystem::path(root) / "manifest.txt").string();
  write_file_bytes(res.manifest_path, text.data(), text.size());
  res.manifest_hash = fnv1a(text);
  return res;
}

inline DatasetSplit load_split(const std::string& root, const std::string& name) {
  namespace fs = std::filesystem;
  DatasetSplit split;
  split.dir = (fs::path(root) / name).string();
  const std::string text = read_file_text((fs::path(split.dir) / "annotations.txt").string());
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    AnnotatedImage item;
    ls >> item.rel_path;
    float x1, y1, x2, y2;
    int cls;
    while (ls >> x1 >> y1 >> x2 >> y2 >> cls) {
      item.boxes.push_back({x1, y1, x2, y2});
      item.classes.push_back(cls);
    }
    split.items.push_back(std::move(item));
  }
  if (split.items.empty()) throw std::runtime_error("empty split: " + split.dir);
  return split;
}

inline ImageU8 load_image(const DatasetSplit& split, std::size_t index) {
  return read_ppm((std::filesystem::path(split.dir) / split.items[index].rel_path).string());
}

// ---------------------------------------------------------------------------
// Proposals and label assignment
// ---------------------------------------------------------------------------

// Jittered ground-truth copies plus a coarse two-scale grid. Every gt box is
// guaranteed a proposal with IoU >= 0.5; guarantee boxes sort first so the
// cap can only drop grid boxes.
inline std::vector<Box> propose(const std::vector<Box>& gt, int img_w, int img_h,
                                const TrainConfig& cfg, Rng& rng) {
  std::vector<Box> jittered;
  for (const Box& b : gt)
    for (int k = 0; k < 5; ++k) jittered.push_back(jitter_box(b, img_w, img_h, cfg.jitter_frac, rng));
  std::vector<Box> guarantees;
  for (const Box& b : gt) {
    double best = 0.0;
    for (const Box& p : jittered) best = std::max(best, iou(b, p));
    if (best < 0.5) guarantees.push_back(b);
  }
  std::vector<Box> out;
  out.reserve(static_cast<std::size_t>(cfg.proposal_cap));
  for (const Box& b : guarantees) out.push_back(b);
  for (const Box& b : jittered) out.push_back(b);
  const int s1 = std::max(8, img_w / 4);
  const int s2 = std::max(12, (img_w * 7) / 16);
  const int step = std::max(4, img_w / 4);
  for (const int size : {s1, s2}) {
    for (int y = 0; y + size <= img_h; y += step)
      for (int x = 0; x + size <= img_w; x += step)
        out.push_back({static_cast<float>(x), static_cast<float>(y), static_cast<float>(x + size),
                       static_cast<float>(y + size)});
  }
  if (out.size() > static_cast<std::size_t>(cfg.proposal_cap))
    out.resize(static_cast<std::size_t>(cfg.proposal_cap));
  return out;
}

inline std::vector<DetectionLabel> assign_labels(const std::vector<Box>& proposals,
                                                 const std::vector<Box>& gt,
                                                 const std::vector<int>& gt_classes,
                                                 const TrainConfig& cfg) {
  if (!(cfg.bg_lo >= 0 && cfg.bg_lo < cfg.bg_hi && cfg.bg_hi <= cfg.fg_thresh && cfg.fg_thresh <= 1))
    throw std::invalid_argument("assign_labels: threshold ordering violated");
  std::vector<DetectionLabel> labels(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    double best_iou = 0.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      const double v = iou(proposals[i], gt[j]);
      if (v > best_iou) {
        best_iou = v;
        best_j = j;
      }
    }
    DetectionLabel& lab = labels[i];
    if (!gt.empty() && best_iou >= cfg.fg_thresh) {
      lab.cls = gt_classes[best_j];
      lab.loc = encode_box(proposals[i], gt[best_j]);
    } else if (best_iou >= cfg.bg_lo && best_iou < cfg.bg_hi) {
      lab.cls = 0;
    } else {
      lab.cls = kIgnoreLabel;
    }
  }
  return labels;
}

}  // namespace afrcnn
