#pragma once

#include <stdexcept>
#include <string>

#include "afrcnn/asdn.hpp"
#include "afrcnn/astn.hpp"
#include "afrcnn/detector.hpp"

namespace afrcnn {

// Composition of the two adversaries into one stage between RoI pooling and
// the detector heads: occlusion first, then per-block rotation. Ablation
// variants run under the same dispatch so the training loop is mode-blind.

enum class AdversaryMode {
  None,
  Asdn,
  Astn,
  Full,
  RandomDropout,
  HardDropout,
  FixedAsdn,
  RandomJitter,
};

inline const char* mode_name(AdversaryMode m) {
  switch (m) {
    case AdversaryMode::None: return "none";
    case AdversaryMode::Asdn: return "asdn";
    case AdversaryMode::Astn: return "astn";
    case AdversaryMode::Full: return "full";
    case AdversaryMode::RandomDropout: return "random_dropout";
    case AdversaryMode::HardDropout: return "hard_dropout";
    case AdversaryMode::FixedAsdn: return "fixed_asdn";
    case AdversaryMode::RandomJitter: return "random_jitter";
  }
  return "none";
}

inline AdversaryMode parse_mode(const std::string& s) {
  for (const AdversaryMode m :
       {AdversaryMode::None, AdversaryMode::Asdn, AdversaryMode::Astn, AdversaryMode::Full,
        AdversaryMode::RandomDropout, AdversaryMode::HardDropout, AdversaryMode::FixedAsdn,
        AdversaryMode::RandomJitter}) {
    if (s == mode_name(m)) return m;
  }
  throw std::invalid_argument("unknown adversary mode: " + s);
}

inline bool mode_uses_asdn(AdversaryMode m) {
  return m == AdversaryMode::Asdn || m == AdversaryMode::Full || m == AdversaryMode::FixedAsdn;
}

inline bool mode_uses_astn(AdversaryMode m) {
  return m == AdversaryMode::Astn || m == AdversaryMode::Full;
}

template <typename T>
OcclusionMask random_dropout_mask(int d, Rng& rng) {
  if (d < 3) throw std::invalid_argument("random_dropout_mask: d < 3");
  OcclusionMask m(d);
  for (const int i : rng.sample_without_replacement(d * d, (d * d) / 3))
    m.bits[static_cast<std::size_t>(i)] = 1;
  return m;
}

template <typename T>
struct AdversaryStage {
  AdversaryMode mode = AdversaryMode::None;
  const AsdnParams<T>* asdn = nullptr;
  const AstnParams<T>* astn = nullptr;
  const HeadParams<T>* heads = nullptr;  // hard-window search needs the live heads
  bool astn_single_angle = false;
};

// Everything the backward pass and the adversary updates need to replay the
// stage: which sub-ops ran, their caches, and the intermediate tensor.
template <typename T>
struct AdversarialRecord {
  bool modified = false;
  bool has_mask = false;
  bool has_rotation = false;
  OcclusionMask mask;
  RotationSpec<T> spec;
  AsdnCache<T> asdn_cache;
  LocaliserCache<T> loc_cache;
  Tensor3<T> masked;  // input to the rotation when both sub-ops ran
  Tensor3<T> out;
};

template <typename T>
AdversarialRecord<T> adversarial_forward(const Tensor3<T>& x, const AdversaryStage<T>& stage,
                                         const DetectionLabel& label, Rng& rng) {
  AdversarialRecord<T> rec;
  if (!label.is_foreground() || stage.mode == AdversaryMode::None ||
      stage.mode == AdversaryMode::RandomJitter) {
    rec.out = x;
    return rec;
  }
  rec.modified = true;
  switch (stage.mode) {
    case AdversaryMode::Asdn:
    case AdversaryMode::FixedAsdn:
    case AdversaryMode::Full: {
      if (stage.asdn == nullptr) throw std::invalid_argument("adversarial_forward: asdn weights missing");
      const Grid<T> heat = asdn_forward(x, *stage.asdn, rec.asdn_cache);
      rec.mask = sample_binary_mask(heat, rng);
      rec.has_mask = true;
      break;
    }
    case AdversaryMode::RandomDropout:
      rec.mask = random_dropout_mask<T>(x.h, rng);
      rec.has_mask = true;
      break;
    case AdversaryMode::HardDropout: {
      if (stage.heads == nullptr) throw std::invalid_argument("adversarial_forward: heads missing");
      rec.mask = exhaustive_hard_window(x, label, *stage.heads);
      rec.has_mask = true;
      break;
    }
    default:
      break;
  }
  if (stage.mode == AdversaryMode::Full) {
    if (stage.astn == nullptr) throw std::invalid_argument("adversarial_forward: astn weights missing");
    rec.masked = apply_mask(x, rec.mask);
    rec.spec = localise(rec.masked, *stage.astn, rec.loc_cache, stage.astn_single_angle);
    rec.has_rotation = true;
    rec.out = rotate_blocks(rec.masked, rec.spec);
  } else if (stage.mode == AdversaryMode::Astn) {
    if (stage.astn == nullptr) throw std::invalid_argument("adversarial_forward: astn weights missing");
    rec.spec = localise(x, *stage.astn, rec.loc_cache, stage.astn_single_angle);
    rec.has_rotation = true;
    rec.out = rotate_blocks(x, rec.spec);
  } else {
    rec.out = apply_mask(x, rec.mask);
  }
  return rec;
}

// Gradient w.r.t. the stage input for the detector update. The mask and the
// angles are constants here: the mask path zeroes occluded cells, the
// rotation path routes through the sampler.
template <typename T>
Tensor3<T> adversarial_backward_input(const Tensor3<T>& x, const AdversarialRecord<T>& rec,
                                      const Tensor3<T>& dout) {
  if (!rec.modified) return dout;
  if (rec.has_rotation) {
    const Tensor3<T>& rin = rec.has_mask ? rec.masked : x;
    Tensor3<T> drin(rin.h, rin.w, rin.c);
    rotate_blocks_backward(rin, rec.spec, dout, &drin, static_cast<std::array<T, kNumBlocks>*>(nullptr));
    return rec.has_mask ? apply_mask_backward(drin, rec.mask) : drin;
  }
  return apply_mask_backward(dout, rec.mask);
}

}  // namespace afrcnn
