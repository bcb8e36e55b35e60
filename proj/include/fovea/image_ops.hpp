#pragma once

#include "fovea/grid.hpp"
#include "fovea/parallel.hpp"
#include "fovea/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

namespace fovea {

namespace detail {

// im2col for one image: col is [Cin*kh*kw, oh*ow] row-major.
template <typename S>
void im2col(const S* img, long C, long H, long W, long kh, long kw, long stride, long pad,
            long oh, long ow, S* col) {
  for (long c = 0; c < C; ++c)
    for (long u = 0; u < kh; ++u)
      for (long v = 0; v < kw; ++v) {
        S* dst = col + ((c * kh + u) * kw + v) * (oh * ow);
        for (long y = 0; y < oh; ++y) {
          const long iy = y * stride - pad + u;
          if (iy < 0 || iy >= H) {
            std::fill_n(dst + y * ow, ow, S(0));
            continue;
          }
          const S* src = img + (c * H + iy) * W;
          for (long x = 0; x < ow; ++x) {
            const long ix = x * stride - pad + v;
            dst[y * ow + x] = (ix >= 0 && ix < W) ? src[ix] : S(0);
          }
        }
      }
}

template <typename S>
void col2im_add(const S* col, long C, long H, long W, long kh, long kw, long stride, long pad,
                long oh, long ow, S* img) {
  for (long c = 0; c < C; ++c)
    for (long u = 0; u < kh; ++u)
      for (long v = 0; v < kw; ++v) {
        const S* src = col + ((c * kh + u) * kw + v) * (oh * ow);
        for (long y = 0; y < oh; ++y) {
          const long iy = y * stride - pad + u;
          if (iy < 0 || iy >= H) continue;
          S* dst = img + (c * H + iy) * W;
          for (long x = 0; x < ow; ++x) {
            const long ix = x * stride - pad + v;
            if (ix >= 0 && ix < W) dst[ix] += src[y * ow + x];
          }
        }
      }
}

// Fixed chunk count for batch-parallel kernels. Constant so that partial-sum
// boundaries (and therefore float accumulation order) do not depend on the
// worker count.
inline constexpr long kBatchChunks = 4;

inline std::pair<long, long> chunk_range(long n, long chunk) {
  const long per = (n + kBatchChunks - 1) / kBatchChunks;
  const long lo = std::min(n, chunk * per);
  return {lo, std::min(n, lo + per)};
}

}  // namespace detail

/// Cross-correlation with odd kernels. Output spatial size must divide
/// exactly: H' = (H + 2*pad - kh)/stride + 1.
template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, long stride, long pad) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  const Tensor<S>& wv = w.value();
  check_shape(xv.rank() == 4 && wv.rank() == 4, "conv2d: expects NCHW input and OIHW weight");
  const long B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const long Cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  check_shape(wv.dim(1) == C, "conv2d: weight " + shape_str(wv.shape) + " does not accept input " +
                                  shape_str(xv.shape));
  check_shape(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel sides must be odd");
  check_shape(stride >= 1 && pad >= 0, "conv2d: bad stride/padding");
  check_shape((H + 2 * pad - kh) >= 0 && (H + 2 * pad - kh) % stride == 0 &&
                  (W + 2 * pad - kw) % stride == 0,
              "conv2d: output size not exact for input " + shape_str(xv.shape));
  const long oh = (H + 2 * pad - kh) / stride + 1;
  const long ow = (W + 2 * pad - kw) / stride + 1;
  const long K = C * kh * kw, HW = oh * ow;

  Tensor<S> y({B, Cout, oh, ow});
  parallel_for(detail::kBatchChunks, [&](long chunk) {
    auto [lo, hi] = detail::chunk_range(B, chunk);
    if (lo >= hi) return;
    std::vector<S> col(static_cast<size_t>(K * HW));
    ConstMatMap<S> Wm(wv.ptr(), Cout, K);
    for (long b = lo; b < hi; ++b) {
      detail::im2col(xv.ptr() + b * C * H * W, C, H, W, kh, kw, stride, pad, oh, ow, col.data());
      ConstMatMap<S> Cm(col.data(), K, HW);
      MatMap<S> Ym(y.ptr() + b * Cout * HW, Cout, HW);
      Ym.noalias() = Wm * Cm;
    }
  });

  const int xid = x.id, wid = w.id;
  const bool ng = t.needs_grad(x) || t.needs_grad(w);
  return t.emit(
      std::move(y), ng,
      [xid, wid, B, C, H, W, Cout, kh, kw, stride, pad, oh, ow, K, HW](Tape<S>& tp, int out) {
        const Tensor<S>& g = tp.grad_slot(out);
        const Tensor<S>& xval = tp.value(xid);
        const Tensor<S>& wval = tp.value(wid);
        const bool need_x = tp.needs_grad(xid);
        const bool need_w = tp.needs_grad(wid);
        std::vector<Tensor<S>> wpart;
        if (need_w) wpart.assign(detail::kBatchChunks, Tensor<S>(wval.shape));
        Tensor<S>* gx = need_x ? &tp.grad_slot(xid) : nullptr;
        parallel_for(detail::kBatchChunks, [&](long chunk) {
          auto [lo, hi] = detail::chunk_range(B, chunk);
          if (lo >= hi) return;
          std::vector<S> col(static_cast<size_t>(K * HW));
          std::vector<S> dcol(need_x ? static_cast<size_t>(K * HW) : 0);
          ConstMatMap<S> Wm(wval.ptr(), Cout, K);
          for (long b = lo; b < hi; ++b) {
            ConstMatMap<S> Gm(g.ptr() + b * Cout * HW, Cout, HW);
            if (need_x) {
              MatMap<S> Dc(dcol.data(), K, HW);
              Dc.noalias() = Wm.transpose() * Gm;
              detail::col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, oh, ow,
                                 gx->ptr() + b * C * H * W);
            }
            if (need_w) {
              detail::im2col(xval.ptr() + b * C * H * W, C, H, W, kh, kw, stride, pad, oh, ow,
                             col.data());
              ConstMatMap<S> Cm(col.data(), K, HW);
              MatMap<S> Wp(wpart[static_cast<size_t>(chunk)].ptr(), Cout, K);
              Wp.noalias() += Gm * Cm.transpose();
            }
          }
        });
        if (need_w) {
          Tensor<S>& gw = tp.grad_slot(wid);
          for (long c = 0; c < detail::kBatchChunks; ++c) gw.array() += wpart[static_cast<size_t>(c)].array();
        }
      });
}

/// Bilinear gather at the grid's source coordinates, clamped to the border.
/// Differentiable with respect to the image only; the grid is constant
/// (fixations are sampled or fixed, never optimized). When identity_backward
/// is set the backward pass treats the op as the identity map (surrogate
/// gradient), which requires matching input/output sizes.
template <typename S>
Var<S> grid_sample_bilinear(Var<S> x, std::shared_ptr<const SamplingGrid> grid,
                            bool identity_backward = false) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  check_shape(xv.rank() == 4, "grid_sample: expects NCHW");
  const long B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const long oh = grid->out_h, ow = grid->out_w;
  if (identity_backward)
    check_shape(oh == H && ow == W, "grid_sample: identity backward needs equal sizes");

  // Integer cell + fractional weights per output pixel, shared with backward.
  struct Cell {
    int32_t r0, c0;
    S fr, fc;
  };
  auto cells = std::make_shared<std::vector<Cell>>(static_cast<size_t>(oh * ow));
  for (long i = 0; i < oh * ow; ++i) {
    double r = std::clamp(grid->row[static_cast<size_t>(i)], 0.0, static_cast<double>(H - 1));
    double c = std::clamp(grid->col[static_cast<size_t>(i)], 0.0, static_cast<double>(W - 1));
    double rf = std::floor(r), cf = std::floor(c);
    Cell& cl = (*cells)[static_cast<size_t>(i)];
    cl.r0 = static_cast<int32_t>(rf);
    cl.c0 = static_cast<int32_t>(cf);
    cl.fr = static_cast<S>(r - rf);
    cl.fc = static_cast<S>(c - cf);
  }

  Tensor<S> y({B, C, oh, ow});
  for (long b = 0; b < B; ++b)
    for (long c = 0; c < C; ++c) {
      const S* img = xv.ptr() + (b * C + c) * H * W;
      S* dst = y.ptr() + (b * C + c) * oh * ow;
      for (long i = 0; i < oh * ow; ++i) {
        const Cell& cl = (*cells)[static_cast<size_t>(i)];
        const long r1 = std::min<long>(cl.r0 + 1, H - 1);
        const long c1 = std::min<long>(cl.c0 + 1, W - 1);
        const S a = img[cl.r0 * W + cl.c0], bb = img[cl.r0 * W + c1];
        const S d = img[r1 * W + cl.c0], e = img[r1 * W + c1];
        const S top = a + (bb - a) * cl.fc;
        const S bot = d + (e - d) * cl.fc;
        dst[i] = top + (bot - top) * cl.fr;
      }
    }

  const int xid = x.id;
  return t.emit(std::move(y), t.needs_grad(x),
                [xid, cells, B, C, H, W, oh, ow, identity_backward](Tape<S>& tp, int out) {
                  if (!tp.needs_grad(xid)) return;
                  const Tensor<S>& g = tp.grad_slot(out);
                  Tensor<S>& gx = tp.grad_slot(xid);
                  if (identity_backward) {
                    gx.array() += g.array();
                    return;
                  }
                  for (long b = 0; b < B; ++b)
                    for (long c = 0; c < C; ++c) {
                      S* dst = gx.ptr() + (b * C + c) * H * W;
                      const S* gp = g.ptr() + (b * C + c) * oh * ow;
                      for (long i = 0; i < oh * ow; ++i) {
                        const Cell& cl = (*cells)[static_cast<size_t>(i)];
                        const long r1 = std::min<long>(cl.r0 + 1, H - 1);
                        const long c1 = std::min<long>(cl.c0 + 1, W - 1);
                        const S gv = gp[i];
                        dst[cl.r0 * W + cl.c0] += gv * (S(1) - cl.fr) * (S(1) - cl.fc);
                        dst[cl.r0 * W + c1] += gv * (S(1) - cl.fr) * cl.fc;
                        dst[r1 * W + cl.c0] += gv * cl.fr * (S(1) - cl.fc);
                        dst[r1 * W + c1] += gv * cl.fr * cl.fc;
                      }
                    }
                });
}

/// Normalized 1-d Gaussian taps with radius ceil(3*sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  if (sigma <= 0.0) return {1.0};
  const long r = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<size_t>(2 * r + 1));
  double sum = 0.0;
  for (long i = -r; i <= r; ++i) {
    const double v = std::exp(-0.5 * (static_cast<double>(i) / sigma) * (static_cast<double>(i) / sigma));
    k[static_cast<size_t>(i + r)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

namespace detail {

// One separable pass along an axis with edge replication; transpose of the
// same map is obtained by scatter-accumulating through identical indexing.
template <typename S>
void blur_axis(const S* src, S* dst, long B, long C, long H, long W, const std::vector<S>& k,
               bool horizontal) {
  const long r = (static_cast<long>(k.size()) - 1) / 2;
  for (long bc = 0; bc < B * C; ++bc) {
    const S* in = src + bc * H * W;
    S* out = dst + bc * H * W;
    if (horizontal) {
      for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x) {
          S acc = 0;
          for (long j = -r; j <= r; ++j)
            acc += k[static_cast<size_t>(j + r)] * in[y * W + std::clamp(x + j, 0L, W - 1)];
          out[y * W + x] = acc;
        }
    } else {
      for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x) {
          S acc = 0;
          for (long j = -r; j <= r; ++j)
            acc += k[static_cast<size_t>(j + r)] * in[std::clamp(y + j, 0L, H - 1) * W + x];
          out[y * W + x] = acc;
        }
    }
  }
}

template <typename S>
void blur_axis_adjoint(const S* gout, S* gin, long B, long C, long H, long W,
                       const std::vector<S>& k, bool horizontal) {
  const long r = (static_cast<long>(k.size()) - 1) / 2;
  for (long bc = 0; bc < B * C; ++bc) {
    const S* go = gout + bc * H * W;
    S* gi = gin + bc * H * W;
    if (horizontal) {
      for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x) {
          const S gv = go[y * W + x];
          for (long j = -r; j <= r; ++j)
            gi[y * W + std::clamp(x + j, 0L, W - 1)] += k[static_cast<size_t>(j + r)] * gv;
        }
    } else {
      for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x) {
          const S gv = go[y * W + x];
          for (long j = -r; j <= r; ++j)
            gi[std::clamp(y + j, 0L, H - 1) * W + x] += k[static_cast<size_t>(j + r)] * gv;
        }
    }
  }
}

}  // namespace detail

/// Separable Gaussian blur with edge replication; sigma 0 is the identity.
template <typename S>
Var<S> gaussian_blur(Var<S> x, double sigma, bool identity_backward = false) {
  check_shape(sigma >= 0.0, "gaussian_blur: sigma must be >= 0");
  if (sigma == 0.0) return x;
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  check_shape(xv.rank() == 4, "gaussian_blur: expects NCHW");
  const long B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  auto kd = gaussian_kernel(sigma);
  auto k = std::make_shared<std::vector<S>>(kd.begin(), kd.end());
  Tensor<S> tmp(xv.shape), y(xv.shape);
  detail::blur_axis(xv.ptr(), tmp.ptr(), B, C, H, W, *k, /*horizontal=*/true);
  detail::blur_axis(tmp.ptr(), y.ptr(), B, C, H, W, *k, /*horizontal=*/false);
  const int xid = x.id;
  return t.emit(std::move(y), t.needs_grad(x),
                [xid, k, B, C, H, W, identity_backward](Tape<S>& tp, int out) {
                  if (!tp.needs_grad(xid)) return;
                  const Tensor<S>& g = tp.grad_slot(out);
                  Tensor<S>& gx = tp.grad_slot(xid);
                  if (identity_backward) {
                    gx.array() += g.array();
                    return;
                  }
                  Tensor<S> tmp2(g.shape);
                  detail::blur_axis_adjoint(g.ptr(), tmp2.ptr(), B, C, H, W, *k,
                                            /*horizontal=*/false);
                  detail::blur_axis_adjoint(tmp2.ptr(), gx.ptr(), B, C, H, W, *k,
                                            /*horizontal=*/true);
                });
}

/// Non-overlapping average pooling, window == stride == f.
template <typename S>
Var<S> avg_pool(Var<S> x, long f) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  check_shape(xv.rank() == 4, "avg_pool: expects NCHW");
  const long B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  check_shape(f >= 1 && H % f == 0 && W % f == 0, "avg_pool: size not divisible by window");
  if (f == 1) return x;
  const long oh = H / f, ow = W / f;
  Tensor<S> y({B, C, oh, ow});
  const S inv = S(1) / S(f * f);
  for (long bc = 0; bc < B * C; ++bc) {
    const S* in = xv.ptr() + bc * H * W;
    S* out = y.ptr() + bc * oh * ow;
    for (long i = 0; i < oh; ++i)
      for (long j = 0; j < ow; ++j) {
        S acc = 0;
        for (long u = 0; u < f; ++u)
          for (long v = 0; v < f; ++v) acc += in[(i * f + u) * W + j * f + v];
        out[i * ow + j] = acc * inv;
      }
  }
  const int xid = x.id;
  return t.emit(std::move(y), t.needs_grad(x), [xid, B, C, H, W, f, oh, ow, inv](Tape<S>& tp, int out) {
    const Tensor<S>& g = tp.grad_slot(out);
    Tensor<S>& gx = tp.grad_slot(xid);
    for (long bc = 0; bc < B * C; ++bc) {
      const S* gp = g.ptr() + bc * oh * ow;
      S* gi = gx.ptr() + bc * H * W;
      for (long i = 0; i < oh; ++i)
        for (long j = 0; j < ow; ++j) {
          const S gv = gp[i * ow + j] * inv;
          for (long u = 0; u < f; ++u)
            for (long v = 0; v < f; ++v) gi[(i * f + u) * W + j * f + v] += gv;
        }
    }
  });
}

/// Differentiable window copy; backward scatters into the source region.
template <typename S>
Var<S> crop(Var<S> x, long top, long left, long oh, long ow) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  check_shape(xv.rank() == 4, "crop: expects NCHW");
  const long B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  check_shape(top >= 0 && left >= 0 && oh >= 1 && ow >= 1 && top + oh <= H && left + ow <= W,
              "crop: window out of bounds");
  Tensor<S> y({B, C, oh, ow});
  for (long bc = 0; bc < B * C; ++bc)
    for (long i = 0; i < oh; ++i)
      std::copy_n(xv.ptr() + bc * H * W + (top + i) * W + left, ow,
                  y.ptr() + bc * oh * ow + i * ow);
  const int xid = x.id;
  return t.emit(std::move(y), t.needs_grad(x),
                [xid, B, C, H, W, top, left, oh, ow](Tape<S>& tp, int out) {
                  const Tensor<S>& g = tp.grad_slot(out);
                  Tensor<S>& gx = tp.grad_slot(xid);
                  for (long bc = 0; bc < B * C; ++bc)
                    for (long i = 0; i < oh; ++i) {
                      const S* gp = g.ptr() + bc * oh * ow + i * ow;
                      S* gi = gx.ptr() + bc * H * W + (top + i) * W + left;
                      for (long j = 0; j < ow; ++j) gi[j] += gp[j];
                    }
                });
}

/// Bilinear resize as a grid gather (differentiable w.r.t. the image).
template <typename S>
Var<S> bilinear_resize(Var<S> x, long dst_h, long dst_w) {
  const Tensor<S>& xv = x.value();
  check_shape(xv.rank() == 4, "bilinear_resize: expects NCHW");
  if (xv.dim(2) == dst_h && xv.dim(3) == dst_w) return x;
  auto grid = std::make_shared<SamplingGrid>(
      SamplingGrid::resize(xv.dim(2), xv.dim(3), dst_h, dst_w));
  return grid_sample_bilinear(x, std::move(grid));
}

}  // namespace fovea
