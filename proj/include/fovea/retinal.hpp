#pragma once

#include "fovea/geometry.hpp"
#include "fovea/grid.hpp"
#include "fovea/image_ops.hpp"

#include <cmath>
#include <map>
#include <memory>
#include <mutex>

namespace fovea {

/// Foveated resampling configuration. Output size always equals input size.
/// k tunes how steeply the sampling density falls off with eccentricity;
/// k -> 0 degenerates to the identity resampling.
struct RetinalWarpConfig {
  double k = 2.5;
  double max_offset_x = 0.0;
  double max_offset_y = 0.0;

  static RetinalWarpConfig for_side(long side) {
    RetinalWarpConfig c;
    c.max_offset_x = c.max_offset_y = static_cast<double>(geom::retinal_offset(side));
    return c;
  }
};

/// Radial map from output eccentricity to source eccentricity:
///   r_src = R * (exp(k*r/R) - 1) / (exp(k) - 1)
/// Fixes r=0 and r=R, is strictly increasing, and samples the source densely
/// at the fovea (g'(0) = k/(e^k - 1) < 1) and sparsely at the rim
/// (g'(R) = k e^k/(e^k - 1) > 1).
inline double radial_warp(double r_out, double R, double k) {
  if (k <= 0.0) throw ConfigError("radial_warp: k must be > 0");
  if (R <= 0.0) throw ConfigError("radial_warp: R must be > 0");
  return R * std::expm1(k * r_out / R) / std::expm1(k);
}

/// Grid of source coordinates for the warp re-centered on the fixation.
/// R is the distance from the fixation to the farthest image corner, so every
/// output pixel has eccentricity <= R; near-side overshoot past the image
/// border is left to the gather's clamp.
inline SamplingGrid build_retinal_grid(long H, long W, FixationPoint fix,
                                       const RetinalWarpConfig& cfg) {
  if (cfg.k <= 0.0) throw ConfigError("retinal grid: k must be > 0");
  if (std::abs(fix.dx) > cfg.max_offset_x || std::abs(fix.dy) > cfg.max_offset_y)
    throw RangeError("retinal grid: fixation (" + std::to_string(fix.dx) + "," +
                     std::to_string(fix.dy) + ") outside valid range");
  const double cy = 0.5 * static_cast<double>(H - 1), cx = 0.5 * static_cast<double>(W - 1);
  const double fy = cy + fix.dy, fx = cx + fix.dx;
  double R = 0.0;
  for (double ry : {0.0, static_cast<double>(H - 1)})
    for (double rx : {0.0, static_cast<double>(W - 1)})
      R = std::max(R, std::hypot(ry - fy, rx - fx));
  const double denom = std::expm1(cfg.k);
  SamplingGrid g(H, W);
  for (long i = 0; i < H; ++i)
    for (long j = 0; j < W; ++j) {
      const double dy = static_cast<double>(i) - fy;
      const double dx = static_cast<double>(j) - fx;
      const double r = std::hypot(dy, dx);
      double s = 1.0;
      if (r > 0.0) s = R * std::expm1(cfg.k * r / R) / denom / r;
      g.row[static_cast<size_t>(i * W + j)] = fy + dy * s;
      g.col[static_cast<size_t>(i * W + j)] = fx + dx * s;
    }
  return g;
}

/// Process-wide cache of built grids: the five evaluation grids per image
/// size are reused across every image and thread.
inline std::shared_ptr<const SamplingGrid> retinal_grid_cached(long H, long W, FixationPoint fix,
                                                               const RetinalWarpConfig& cfg) {
  struct Key {
    long h, w;
    double dx, dy, k;
    bool operator<(const Key& o) const {
      return std::tie(h, w, dx, dy, k) < std::tie(o.h, o.w, o.dx, o.dy, o.k);
    }
  };
  static std::mutex mu;
  static std::map<Key, std::shared_ptr<const SamplingGrid>> cache;
  const Key key{H, W, fix.dx, fix.dy, cfg.k};
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto g = std::make_shared<const SamplingGrid>(build_retinal_grid(H, W, fix, cfg));
  if (cache.size() > 4096) cache.clear();  // unbounded fixation sets (training draws)
  cache.emplace(key, g);
  return g;
}

/// Foveated resample about the fixation; same spatial size, differentiable
/// with respect to the image.
template <typename S>
Var<S> retinal_resample(Var<S> image, FixationPoint fix, const RetinalWarpConfig& cfg,
                        bool identity_backward = false) {
  const Tensor<S>& xv = image.value();
  check_shape(xv.rank() == 4, "retinal_resample: expects NCHW");
  auto grid = retinal_grid_cached(xv.dim(2), xv.dim(3), fix, cfg);
  return grid_sample_bilinear(image, std::move(grid), identity_backward);
}

}  // namespace fovea
