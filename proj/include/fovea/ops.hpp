#pragma once

#include "fovea/rng.hpp"
#include "fovea/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

namespace fovea {

template <typename S>
Var<S> relu(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  Tensor<S> y(xv.shape);
  for (long i = 0; i < xv.numel(); ++i) y[i] = xv[i] > S(0) ? xv[i] : S(0);
  const int xid = x.id;
  return t.emit(std::move(y), t.needs_grad(x), [xid](Tape<S>& tp, int out) {
    const Tensor<S>& g = tp.grad_slot(out);
    const Tensor<S>& yv = tp.value(out);
    Tensor<S>& gx = tp.grad_slot(xid);
    for (long i = 0; i < g.numel(); ++i)
      if (yv[i] > S(0)) gx[i] += g[i];
  });
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  check_shape(a.value().same_shape(b.value()),
              "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<S> y(a.value().shape);
  y.array() = a.value().array() + b.value().array();
  const int aid = a.id, bid = b.id;
  return t.emit(std::move(y), t.needs_grad(a) || t.needs_grad(b),
                [aid, bid](Tape<S>& tp, int out) {
                  const Tensor<S>& g = tp.grad_slot(out);
                  if (tp.needs_grad(aid)) tp.grad_slot(aid).array() += g.array();
                  if (tp.needs_grad(bid)) tp.grad_slot(bid).array() += g.array();
                });
}

template <typename S>
Var<S> scale(Var<S> x, double c) {
  Tape<S>& t = *x.tape;
  Tensor<S> y(x.value().shape);
  y.array() = x.value().array() * S(c);
  const int xid = x.id;
  return t.emit(std::move(y), t.needs_grad(x), [xid, c](Tape<S>& tp, int out) {
    tp.grad_slot(xid).array() += tp.grad_slot(out).array() * S(c);
  });
}

/// y = x W^T + b with W laid out [out, in].
template <typename S>
Var<S> dense(Var<S> x, Var<S> w, Var<S> b) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  const Tensor<S>& wv = w.value();
  const Tensor<S>& bv = b.value();
  check_shape(xv.rank() == 2 && wv.rank() == 2 && bv.rank() == 1, "dense: rank");
  const long B = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
  check_shape(wv.dim(1) == in && bv.dim(0) == out_dim,
              "dense: got x" + shape_str(xv.shape) + " w" + shape_str(wv.shape));
  Tensor<S> y({B, out_dim});
  ConstMatMap<S> X(xv.ptr(), B, in), W(wv.ptr(), out_dim, in);
  MatMap<S> Y(y.ptr(), B, out_dim);
  Y.noalias() = X * W.transpose();
  for (long r = 0; r < B; ++r)
    for (long c = 0; c < out_dim; ++c) y[r * out_dim + c] += bv[c];
  const int xid = x.id, wid = w.id, bid = b.id;
  const bool ng = t.needs_grad(x) || t.needs_grad(w) || t.needs_grad(b);
  return t.emit(std::move(y), ng, [xid, wid, bid, B, in, out_dim](Tape<S>& tp, int out) {
    const Tensor<S>& g = tp.grad_slot(out);
    ConstMatMap<S> G(g.ptr(), B, out_dim);
    ConstMatMap<S> X(tp.value(xid).ptr(), B, in), W(tp.value(wid).ptr(), out_dim, in);
    if (tp.needs_grad(xid)) {
      MatMap<S> GX(tp.grad_slot(xid).ptr(), B, in);
      GX.noalias() += G * W;
    }
    if (tp.needs_grad(wid)) {
      MatMap<S> GW(tp.grad_slot(wid).ptr(), out_dim, in);
      GW.noalias() += G.transpose() * X;
    }
    if (tp.needs_grad(bid)) {
      Tensor<S>& gb = tp.grad_slot(bid);
      for (long r = 0; r < B; ++r)
        for (long c = 0; c < out_dim; ++c) gb[c] += g[r * out_dim + c];
    }
  });
}

template <typename S>
Var<S> global_average_pool(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  check_shape(xv.rank() == 4, "global_average_pool: expects NCHW");
  const long B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  Tensor<S> y({B, C});
  for (long b = 0; b < B; ++b)
    for (long c = 0; c < C; ++c) {
      const S* p = xv.ptr() + (b * C + c) * HW;
      S acc = 0;
      for (long i = 0; i < HW; ++i) acc += p[i];
      y[b * C + c] = acc / S(HW);
    }
  const int xid = x.id;
  return t.emit(std::move(y), t.needs_grad(x), [xid, B, C, HW](Tape<S>& tp, int out) {
    const Tensor<S>& g = tp.grad_slot(out);
    Tensor<S>& gx = tp.grad_slot(xid);
    for (long b = 0; b < B; ++b)
      for (long c = 0; c < C; ++c) {
        const S gv = g[b * C + c] / S(HW);
        S* p = gx.ptr() + (b * C + c) * HW;
        for (long i = 0; i < HW; ++i) p[i] += gv;
      }
  });
}

/// Running statistics owned by the network, updated by training-mode forward.
template <typename S>
struct BnStats {
  Tensor<S> mean;  // [C]
  Tensor<S> var;   // [C]
  explicit BnStats(long channels = 0)
      : mean({channels}), var(Tensor<S>({channels}, S(1))) {}
};

/// Batch normalization over NCHW. Training mode normalizes by batch
/// statistics and folds them into the running averages; evaluation mode is a
/// deterministic affine map using the frozen running statistics.
template <typename S>
Var<S> batch_norm(Var<S> x, Var<S> gamma, Var<S> beta, BnStats<S>& stats, bool training,
                  double momentum = 0.9, double eps = 1e-5) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  check_shape(xv.rank() == 4, "batch_norm: expects NCHW");
  const long B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  check_shape(gamma.value().numel() == C && beta.value().numel() == C && stats.mean.numel() == C,
              "batch_norm: channel mismatch");
  const long N = B * HW;

  auto mu = std::make_shared<std::vector<S>>(C);
  auto invstd = std::make_shared<std::vector<S>>(C);
  if (training) {
    for (long c = 0; c < C; ++c) {
      S sum = 0, sq = 0;
      for (long b = 0; b < B; ++b) {
        const S* p = xv.ptr() + (b * C + c) * HW;
        for (long i = 0; i < HW; ++i) {
          sum += p[i];
          sq += p[i] * p[i];
        }
      }
      const S m = sum / S(N);
      S v = sq / S(N) - m * m;
      if (v < S(0)) v = S(0);
      (*mu)[c] = m;
      (*invstd)[c] = S(1) / std::sqrt(v + S(eps));
      stats.mean[c] = S(momentum) * stats.mean[c] + S(1 - momentum) * m;
      stats.var[c] = S(momentum) * stats.var[c] + S(1 - momentum) * v;
    }
  } else {
    for (long c = 0; c < C; ++c) {
      (*mu)[c] = stats.mean[c];
      (*invstd)[c] = S(1) / std::sqrt(stats.var[c] + S(eps));
    }
  }

  const Tensor<S>& gv = gamma.value();
  const Tensor<S>& bv = beta.value();
  Tensor<S> y(xv.shape);
  for (long b = 0; b < B; ++b)
    for (long c = 0; c < C; ++c) {
      const S* p = xv.ptr() + (b * C + c) * HW;
      S* q = y.ptr() + (b * C + c) * HW;
      const S a = gv[c] * (*invstd)[c];
      const S d = bv[c] - a * (*mu)[c];
      for (long i = 0; i < HW; ++i) q[i] = a * p[i] + d;
    }

  const int xid = x.id, gid = gamma.id, bid = beta.id;
  const bool ng = t.needs_grad(x) || t.needs_grad(gamma) || t.needs_grad(beta);
  return t.emit(std::move(y), ng,
                [xid, gid, bid, mu, invstd, B, C, HW, N, training](Tape<S>& tp, int out) {
                  const Tensor<S>& g = tp.grad_slot(out);
                  const Tensor<S>& xval = tp.value(xid);
                  const Tensor<S>& gammav = tp.value(gid);
                  for (long c = 0; c < C; ++c) {
                    const S m = (*mu)[c], inv = (*invstd)[c];
                    S dbeta = 0, dgamma = 0;
                    for (long b = 0; b < B; ++b) {
                      const S* gp = g.ptr() + (b * C + c) * HW;
                      const S* xp = xval.ptr() + (b * C + c) * HW;
                      for (long i = 0; i < HW; ++i) {
                        dbeta += gp[i];
                        dgamma += gp[i] * (xp[i] - m) * inv;
                      }
                    }
                    if (tp.needs_grad(gid)) tp.grad_slot(gid)[c] += dgamma;
                    if (tp.needs_grad(bid)) tp.grad_slot(bid)[c] += dbeta;
                    if (tp.needs_grad(xid)) {
                      Tensor<S>& gx = tp.grad_slot(xid);
                      const S a = gammav[c] * inv;
                      if (training) {
                        // d/dx through the batch statistics
                        for (long b = 0; b < B; ++b) {
                          const S* gp = g.ptr() + (b * C + c) * HW;
                          const S* xp = xval.ptr() + (b * C + c) * HW;
                          S* gxp = gx.ptr() + (b * C + c) * HW;
                          for (long i = 0; i < HW; ++i) {
                            const S xhat = (xp[i] - m) * inv;
                            gxp[i] += a / S(N) * (S(N) * gp[i] - dbeta - xhat * dgamma);
                          }
                        }
                      } else {
                        for (long b = 0; b < B; ++b) {
                          const S* gp = g.ptr() + (b * C + c) * HW;
                          S* gxp = gx.ptr() + (b * C + c) * HW;
                          for (long i = 0; i < HW; ++i) gxp[i] += a * gp[i];
                        }
                      }
                    }
                  }
                });
}

/// Concatenation along axis 1 (channels for NCHW, features for [B,F]).
template <typename S>
Var<S> concat(const std::vector<Var<S>>& xs) {
  check_shape(!xs.empty(), "concat: empty input list");
  Tape<S>& t = *xs[0].tape;
  const Shape& s0 = xs[0].value().shape;
  check_shape(s0.size() >= 2, "concat: rank must be >= 2");
  long total_c = 0;
  bool ng = false;
  for (const auto& x : xs) {
    const Shape& s = x.value().shape;
    check_shape(s.size() == s0.size(), "concat: rank mismatch");
    for (size_t d = 0; d < s.size(); ++d)
      if (d != 1)
        check_shape(s[d] == s0[d], "concat: non-concat dimension mismatch " + shape_str(s) +
                                       " vs " + shape_str(s0));
    total_c += s[1];
    ng = ng || t.needs_grad(x);
  }
  Shape os = s0;
  os[1] = total_c;
  const long B = s0[0];
  long inner = 1;
  for (size_t d = 2; d < s0.size(); ++d) inner *= s0[d];
  Tensor<S> y(os);
  std::vector<int> ids;
  std::vector<long> chans;
  for (const auto& x : xs) {
    ids.push_back(x.id);
    chans.push_back(x.value().shape[1]);
  }
  for (long b = 0; b < B; ++b) {
    long off = 0;
    for (size_t k = 0; k < xs.size(); ++k) {
      const long ck = chans[k] * inner;
      std::copy_n(xs[k].value().ptr() + b * ck, ck, y.ptr() + (b * total_c + off) * inner);
      off += chans[k];
    }
  }
  return t.emit(std::move(y), ng, [ids, chans, B, inner, total_c](Tape<S>& tp, int out) {
    const Tensor<S>& g = tp.grad_slot(out);
    for (long b = 0; b < B; ++b) {
      long off = 0;
      for (size_t k = 0; k < ids.size(); ++k) {
        const long ck = chans[k] * inner;
        if (tp.needs_grad(ids[k])) {
          S* dst = tp.grad_slot(ids[k]).ptr() + b * ck;
          const S* src = g.ptr() + (b * total_c + off) * inner;
          for (long i = 0; i < ck; ++i) dst[i] += src[i];
        }
        off += chans[k];
      }
    }
  });
}

/// Training-mode dropout: keeps each element with probability 1-rate and
/// scales survivors by 1/(1-rate).
template <typename S>
Var<S> dropout(Var<S> x, double rate, Rng& rng) {
  check_shape(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1)");
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  const S keep_scale = S(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<uint8_t>>(xv.numel());
  Tensor<S> y(xv.shape);
  for (long i = 0; i < xv.numel(); ++i) {
    const bool keep = rng.next_unit() >= rate;
    (*mask)[static_cast<size_t>(i)] = keep;
    y[i] = keep ? xv[i] * keep_scale : S(0);
  }
  const int xid = x.id;
  return t.emit(std::move(y), t.needs_grad(x), [xid, mask, keep_scale](Tape<S>& tp, int out) {
    const Tensor<S>& g = tp.grad_slot(out);
    Tensor<S>& gx = tp.grad_slot(xid);
    for (long i = 0; i < g.numel(); ++i)
      if ((*mask)[static_cast<size_t>(i)]) gx[i] += g[i] * keep_scale;
  });
}

/// Row-wise softmax over [B,K].
template <typename S>
Var<S> softmax(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  check_shape(xv.rank() == 2, "softmax: expects [B,K]");
  const long B = xv.dim(0), K = xv.dim(1);
  Tensor<S> y(xv.shape);
  for (long b = 0; b < B; ++b) {
    const S* p = xv.ptr() + b * K;
    S* q = y.ptr() + b * K;
    S mx = p[0];
    for (long k = 1; k < K; ++k) mx = std::max(mx, p[k]);
    S z = 0;
    for (long k = 0; k < K; ++k) {
      q[k] = std::exp(p[k] - mx);
      z += q[k];
    }
    for (long k = 0; k < K; ++k) q[k] /= z;
  }
  const int xid = x.id;
  return t.emit(std::move(y), t.needs_grad(x), [xid, B, K](Tape<S>& tp, int out) {
    const Tensor<S>& g = tp.grad_slot(out);
    const Tensor<S>& yv = tp.value(out);
    Tensor<S>& gx = tp.grad_slot(xid);
    for (long b = 0; b < B; ++b) {
      const S* gp = g.ptr() + b * K;
      const S* yp = yv.ptr() + b * K;
      S dot = 0;
      for (long k = 0; k < K; ++k) dot += gp[k] * yp[k];
      for (long k = 0; k < K; ++k) gx[b * K + k] += yp[k] * (gp[k] - dot);
    }
  });
}

/// Elementwise mean over a set of same-shape tensors (fixation logit
/// averaging).
template <typename S>
Var<S> mean_of(const std::vector<Var<S>>& xs) {
  check_shape(!xs.empty(), "mean_of: empty input list");
  Tape<S>& t = *xs[0].tape;
  Tensor<S> y(xs[0].value().shape);
  bool ng = false;
  for (const auto& x : xs) {
    check_shape(x.value().same_shape(xs[0].value()), "mean_of: shape mismatch");
    y.array() += x.value().array();
    ng = ng || t.needs_grad(x);
  }
  const S inv = S(1) / S(xs.size());
  y.array() *= inv;
  std::vector<int> ids;
  for (const auto& x : xs) ids.push_back(x.id);
  return t.emit(std::move(y), ng, [ids, inv](Tape<S>& tp, int out) {
    const Tensor<S>& g = tp.grad_slot(out);
    for (int id : ids)
      if (tp.needs_grad(id)) tp.grad_slot(id).array() += g.array() * inv;
  });
}

/// Elementwise max over a set of same-shape tensors; ties go to the earliest
/// input so the subgradient choice is deterministic.
template <typename S>
Var<S> max_of(const std::vector<Var<S>>& xs) {
  check_shape(!xs.empty(), "max_of: empty input list");
  Tape<S>& t = *xs[0].tape;
  const long n = xs[0].value().numel();
  Tensor<S> y = xs[0].value();
  auto arg = std::make_shared<std::vector<uint8_t>>(n, 0);
  bool ng = t.needs_grad(xs[0]);
  for (size_t k = 1; k < xs.size(); ++k) {
    check_shape(xs[k].value().same_shape(xs[0].value()), "max_of: shape mismatch");
    const Tensor<S>& v = xs[k].value();
    for (long i = 0; i < n; ++i)
      if (v[i] > y[i]) {
        y[i] = v[i];
        (*arg)[static_cast<size_t>(i)] = static_cast<uint8_t>(k);
      }
    ng = ng || t.needs_grad(xs[k]);
  }
  std::vector<int> ids;
  for (const auto& x : xs) ids.push_back(x.id);
  return t.emit(std::move(y), ng, [ids, arg, n](Tape<S>& tp, int out) {
    const Tensor<S>& g = tp.grad_slot(out);
    for (long i = 0; i < n; ++i) {
      const int id = ids[(*arg)[static_cast<size_t>(i)]];
      if (tp.needs_grad(id)) tp.grad_slot(id)[i] += g[i];
    }
  });
}

/// Mean over the batch of -log softmax(logits)[target], stabilized by
/// max-subtraction. Targets as class indices.
template <typename S>
Var<S> softmax_cross_entropy(Var<S> logits, const std::vector<long>& targets) {
  Tape<S>& t = *logits.tape;
  const Tensor<S>& lv = logits.value();
  check_shape(lv.rank() == 2, "cross_entropy: expects [B,K]");
  const long B = lv.dim(0), K = lv.dim(1);
  check_shape(K >= 2, "cross_entropy: needs K >= 2");
  check_shape(static_cast<long>(targets.size()) == B, "cross_entropy: target count");
  for (long y : targets)
    check_shape(y >= 0 && y < K, "cross_entropy: target index " + std::to_string(y) +
                                     " out of range for K=" + std::to_string(K));
  auto probs = std::make_shared<Tensor<S>>(Shape{B, K});
  S loss = 0;
  for (long b = 0; b < B; ++b) {
    const S* p = lv.ptr() + b * K;
    S* q = probs->ptr() + b * K;
    S mx = p[0];
    for (long k = 1; k < K; ++k) mx = std::max(mx, p[k]);
    S z = 0;
    for (long k = 0; k < K; ++k) {
      q[k] = std::exp(p[k] - mx);
      z += q[k];
    }
    for (long k = 0; k < K; ++k) q[k] /= z;
    loss -= std::log(std::max(q[targets[static_cast<size_t>(b)]], S(1e-30)));
  }
  loss /= S(B);
  const int lid = logits.id;
  auto tgts = std::make_shared<std::vector<long>>(targets);
  return t.emit(Tensor<S>::scalar(loss), t.needs_grad(logits),
                [lid, probs, tgts, B, K](Tape<S>& tp, int out) {
                  const S g = tp.grad_slot(out)[0] / S(B);
                  Tensor<S>& gx = tp.grad_slot(lid);
                  for (long b = 0; b < B; ++b)
                    for (long k = 0; k < K; ++k) {
                      S d = (*probs)[b * K + k];
                      if (k == (*tgts)[static_cast<size_t>(b)]) d -= S(1);
                      gx[b * K + k] += g * d;
                    }
                });
}

/// Distribution-target variant; rows of target must sum to 1.
template <typename S>
Var<S> softmax_cross_entropy(Var<S> logits, const Tensor<S>& target) {
  Tape<S>& t = *logits.tape;
  const Tensor<S>& lv = logits.value();
  check_shape(lv.rank() == 2 && target.same_shape(lv), "cross_entropy: target distribution shape");
  const long B = lv.dim(0), K = lv.dim(1);
  auto probs = std::make_shared<Tensor<S>>(Shape{B, K});
  auto tgt = std::make_shared<Tensor<S>>(target);
  S loss = 0;
  for (long b = 0; b < B; ++b) {
    const S* p = lv.ptr() + b * K;
    S* q = probs->ptr() + b * K;
    S mx = p[0];
    for (long k = 1; k < K; ++k) mx = std::max(mx, p[k]);
    S z = 0;
    for (long k = 0; k < K; ++k) {
      q[k] = std::exp(p[k] - mx);
      z += q[k];
    }
    S logz = std::log(z) + mx;
    for (long k = 0; k < K; ++k) {
      q[k] /= z;
      loss -= target[b * K + k] * (p[k] - logz);
    }
  }
  loss /= S(B);
  const int lid = logits.id;
  return t.emit(Tensor<S>::scalar(loss), t.needs_grad(logits),
                [lid, probs, tgt, B, K](Tape<S>& tp, int out) {
                  const S g = tp.grad_slot(out)[0] / S(B);
                  Tensor<S>& gx = tp.grad_slot(lid);
                  for (long i = 0; i < B * K; ++i)
                    gx[i] += g * ((*probs)[i] - (*tgt)[i]);
                });
}

}  // namespace fovea
