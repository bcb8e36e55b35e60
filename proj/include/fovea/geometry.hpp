#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

namespace fovea {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct RangeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Pixel offset of a fixation from the image center (positive = right/down).
/// Continuous values are allowed; crop-based mechanisms round to integers.
struct FixationPoint {
  double dx = 0.0;
  double dy = 0.0;
};

/// The five evaluation fixations for a mechanism with per-axis offset d:
/// center, then the four diagonal corners in the order used throughout.
inline std::vector<FixationPoint> eval_fixations(long d) {
  const double o = static_cast<double>(d);
  return {{0, 0}, {o, o}, {o, -o}, {-o, o}, {-o, -o}};
}

/// Geometry rules for side-S images. They reproduce the 320-pixel reference
/// geometry (coarse 224/±48, retinal ±80, cortical 40/80/160/240 with ±40)
/// and the 32-pixel one (coarse 24/±4, retinal ±8) under proportional
/// scaling.
namespace geom {

inline void require_side(long side) {
  if (side < 16 || side % 8 != 0) throw ConfigError("image side must be a multiple of 8, >= 16");
}

/// Total spatial reduction of the backbone that processes side-S inputs;
/// crop sides are rounded to this granularity so every pooling stage stays
/// exact.
inline long backbone_reduction(long side) { return side <= 64 ? 4 : 32; }

inline long coarse_crop_side(long side) {
  require_side(side);
  const long g = backbone_reduction(side);
  return g * static_cast<long>(std::llround(0.7 * static_cast<double>(side) / static_cast<double>(g)));
}

inline long coarse_offset(long side) { return (side - coarse_crop_side(side)) / 2; }

inline long retinal_offset(long side) {
  require_side(side);
  return side / 4;
}

inline long cortical_offset(long side) {
  require_side(side);
  return side / 8;
}

inline std::vector<long> cortical_sizes(long side) {
  require_side(side);
  return {side / 8, side / 4, side / 2, 3 * side / 4};
}

}  // namespace geom

}  // namespace fovea
