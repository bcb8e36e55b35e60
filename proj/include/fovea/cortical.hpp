#pragma once

#include "fovea/geometry.hpp"
#include "fovea/image_ops.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace fovea {

/// Concentric crop sizes for the scale-space fragments, ascending, each an
/// integer multiple of the smallest (the common target resolution).
struct ScaleSpec {
  std::vector<long> sizes;

  ScaleSpec() = default;
  explicit ScaleSpec(std::vector<long> s) : sizes(std::move(s)) { validate(); }

  static ScaleSpec for_side(long side) { return ScaleSpec(geom::cortical_sizes(side)); }

  long target() const { return sizes.front(); }
  long largest() const { return sizes.back(); }
  size_t count() const { return sizes.size(); }
  long factor(size_t i) const { return sizes[i] / target(); }
  double sigma(size_t i) const { return static_cast<double>(factor(i)) / 2.0; }

  /// Largest fixation offset for which every crop stays inside a side-S
  /// image.
  long max_offset(long side) const { return (side - largest()) / 2; }

  void validate() const {
    if (sizes.empty()) throw ConfigError("scale spec: empty");
    const long t = sizes.front();
    if (t < 2) throw ConfigError("scale spec: target size too small");
    for (size_t i = 0; i < sizes.size(); ++i) {
      if (i > 0 && sizes[i] <= sizes[i - 1]) throw ConfigError("scale spec: sizes must ascend");
      if (sizes[i] % t != 0)
        throw ConfigError("scale spec: size " + std::to_string(sizes[i]) +
                          " not a multiple of target " + std::to_string(t));
    }
  }

  void validate_fit(long side, long fix_range) const {
    if (largest() + 2 * fix_range > side)
      throw ConfigError("scale spec: largest crop " + std::to_string(largest()) +
                        " with offsets +-" + std::to_string(fix_range) +
                        " exceeds image side " + std::to_string(side));
  }
};

/// Scale-space fragments of one fixation: same-shape tensors on the tape,
/// fragment 0 being the raw innermost crop.
template <typename S>
struct FragmentSet {
  std::vector<Var<S>> fragments;
  FixationPoint fixation;
  const ScaleSpec* spec = nullptr;
};

/// Crops of ascending size centered on the fixation, each Gaussian blurred
/// (sigma = factor/2) and average-pooled down to the target resolution.
/// Integer crop alignment; every stage is differentiable w.r.t. the image.
/// identity_backward substitutes the identity for the blur's backward pass
/// only (the crop and pooling gradients stay exact).
template <typename S>
FragmentSet<S> extract_fragments(Var<S> image, FixationPoint fix, const ScaleSpec& spec,
                                 bool identity_backward = false) {
  const Tensor<S>& xv = image.value();
  check_shape(xv.rank() == 4, "extract_fragments: expects NCHW");
  const long H = xv.dim(2), W = xv.dim(3);
  check_shape(H == W, "extract_fragments: expects square images");
  const long ox = std::llround(fix.dx), oy = std::llround(fix.dy);
  const long range = spec.max_offset(H);
  if (std::abs(ox) > range || std::abs(oy) > range)
    throw RangeError("extract_fragments: fixation (" + std::to_string(ox) + "," +
                     std::to_string(oy) + ") violates crop fit (max +-" + std::to_string(range) +
                     ")");
  const long t = spec.target();
  FragmentSet<S> out;
  out.fixation = fix;
  out.spec = &spec;
  for (size_t i = 0; i < spec.count(); ++i) {
    const long s = spec.sizes[i];
    const long top = (H - s) / 2 + oy;
    const long left = (W - s) / 2 + ox;
    Var<S> frag = crop(image, top, left, s, s);
    const long f = s / t;
    if (f > 1) {
      frag = gaussian_blur(frag, spec.sigma(i), identity_backward);
      frag = avg_pool(frag, f);
    }
    out.fragments.push_back(frag);
  }
  return out;
}

}  // namespace fovea
