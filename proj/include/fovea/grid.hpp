#pragma once

#include <cmath>
#include <vector>

namespace fovea {

/// Per-output-pixel continuous source coordinates, row-major over the output.
/// Coordinates are in source pixel units and may lie outside the image; the
/// bilinear gather clamps to the border. Grids are immutable once built and
/// shared freely across threads.
struct SamplingGrid {
  long out_h = 0;
  long out_w = 0;
  std::vector<double> row;  // out_h*out_w source row coordinates
  std::vector<double> col;  // out_h*out_w source col coordinates

  SamplingGrid() = default;
  SamplingGrid(long h, long w)
      : out_h(h), out_w(w), row(static_cast<size_t>(h * w)), col(static_cast<size_t>(h * w)) {}

  long numel() const { return out_h * out_w; }

  static SamplingGrid identity(long h, long w) {
    SamplingGrid g(h, w);
    for (long i = 0; i < h; ++i)
      for (long j = 0; j < w; ++j) {
        g.row[static_cast<size_t>(i * w + j)] = static_cast<double>(i);
        g.col[static_cast<size_t>(i * w + j)] = static_cast<double>(j);
      }
    return g;
  }

  /// Resize grid mapping an out_h x out_w output onto a src_h x src_w source
  /// (half-pixel aligned, so equal sizes give the identity).
  static SamplingGrid resize(long src_h, long src_w, long dst_h, long dst_w) {
    SamplingGrid g(dst_h, dst_w);
    const double sy = static_cast<double>(src_h) / static_cast<double>(dst_h);
    const double sx = static_cast<double>(src_w) / static_cast<double>(dst_w);
    for (long i = 0; i < dst_h; ++i)
      for (long j = 0; j < dst_w; ++j) {
        g.row[static_cast<size_t>(i * dst_w + j)] = (static_cast<double>(i) + 0.5) * sy - 0.5;
        g.col[static_cast<size_t>(i * dst_w + j)] = (static_cast<double>(j) + 0.5) * sx - 0.5;
      }
    return g;
  }

  bool finite() const {
    for (double v : row)
      if (!std::isfinite(v)) return false;
    for (double v : col)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

}  // namespace fovea
