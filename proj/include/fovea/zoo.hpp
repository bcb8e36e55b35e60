#pragma once

#include "fovea/cortical.hpp"
#include "fovea/ops.hpp"
#include "fovea/retinal.hpp"
#include "fovea/rng.hpp"

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace fovea {

enum class Family {
  Standard,
  Coarse,
  Retinal,
  Cortical,
  UniformResampling,
  GaussianBlur,
  GaussianDownsample,
  Ensembling,
  CorticalMaxpool,
  CorticalAvgpool,
  CorticalDropout75,
  CombinedRetinalCortical,
};

inline const char* family_name(Family f) {
  switch (f) {
    case Family::Standard: return "standard";
    case Family::Coarse: return "coarse";
    case Family::Retinal: return "retinal";
    case Family::Cortical: return "cortical";
    case Family::UniformResampling: return "uniform-resampling";
    case Family::GaussianBlur: return "gaussian-blur";
    case Family::GaussianDownsample: return "gaussian-downsample";
    case Family::Ensembling: return "ensembling";
    case Family::CorticalMaxpool: return "cortical-maxpool";
    case Family::CorticalAvgpool: return "cortical-avgpool";
    case Family::CorticalDropout75: return "cortical-dropout75";
    case Family::CombinedRetinalCortical: return "combined-retinal-cortical";
  }
  return "?";
}

Family family_from_name(const std::string& s);

inline bool family_uses_cortical(Family f) {
  return f == Family::Cortical || f == Family::CorticalMaxpool || f == Family::CorticalAvgpool ||
         f == Family::CorticalDropout75 || f == Family::CombinedRetinalCortical ||
         f == Family::Ensembling;
}

inline bool family_fixation_independent(Family f) {
  return f == Family::Standard || f == Family::Ensembling;
}

enum class Fusion { Concat, Max, Avg, ConcatDropout };

/// Architecture + input geometry for one classifier. Geometry defaults are
/// the S-proportional rules in geom::; everything can be overridden from the
/// run config.
struct ModelSpec {
  Family family = Family::Standard;
  long side = 32;
  long classes = 10;
  long base_width = 16;
  // coarse-crop families
  long crop_side = 0;
  // retinal families
  RetinalWarpConfig warp;
  // cortical families
  ScaleSpec scales;
  double aux_weight = 0.3;
  double dropout_rate = 0.75;
  // gaussian-blur ablation
  double blur_sigma = 2.0;
  // ensembling ablation: trunks on the identical full input
  long ensemble_branches = 4;
  // max |offset| per axis: training fixations are drawn uniformly from the
  // integer square, evaluation uses the 5-point set at the corners
  long fix_range = 0;

  static ModelSpec make(Family f, long side, long classes = 10, long base_width = 16) {
    ModelSpec m;
    m.family = f;
    m.side = side;
    m.classes = classes;
    m.base_width = base_width;
    switch (f) {
      case Family::Standard:
      case Family::Ensembling:
        m.fix_range = 0;
        break;
      case Family::Coarse:
      case Family::UniformResampling:
      case Family::GaussianBlur:
        m.crop_side = geom::coarse_crop_side(side);
        m.fix_range = geom::coarse_offset(side);
        break;
      case Family::Retinal:
        m.warp = RetinalWarpConfig::for_side(side);
        m.fix_range = geom::retinal_offset(side);
        break;
      case Family::Cortical:
      case Family::CorticalMaxpool:
      case Family::CorticalAvgpool:
      case Family::CorticalDropout75:
      case Family::GaussianDownsample:
      case Family::CombinedRetinalCortical:
        m.scales = ScaleSpec::for_side(side);
        m.fix_range = geom::cortical_offset(side);
        if (f == Family::CombinedRetinalCortical) m.warp = RetinalWarpConfig::for_side(side);
        break;
    }
    m.validate();
    return m;
  }

  Fusion fusion() const {
    switch (family) {
      case Family::CorticalMaxpool: return Fusion::Max;
      case Family::CorticalAvgpool: return Fusion::Avg;
      case Family::CorticalDropout75: return Fusion::ConcatDropout;
      default: return Fusion::Concat;
    }
  }

  long branch_count() const {
    if (family == Family::Ensembling) return ensemble_branches;
    return family_uses_cortical(family) ? static_cast<long>(scales.count()) : 1;
  }

  /// FLOP-parity width rule: round(n_std / sqrt(B)).
  long branch_width() const {
    return static_cast<long>(std::llround(static_cast<double>(base_width) /
                                          std::sqrt(static_cast<double>(branch_count()))));
  }

  std::vector<FixationPoint> eval_points() const { return eval_fixations(fix_range); }

  void validate() const {
    geom::require_side(side);
    if (classes < 2) throw ConfigError("model spec: needs >= 2 classes");
    if (base_width < 1) throw ConfigError("model spec: base width");
    switch (family) {
      case Family::Coarse:
      case Family::UniformResampling:
      case Family::GaussianBlur:
        if (crop_side < 8 || crop_side > side) throw ConfigError("model spec: bad crop side");
        if (fix_range > (side - crop_side) / 2)
          throw ConfigError("model spec: coarse fixation range exceeds crop fit");
        break;
      case Family::Retinal:
        if (warp.k <= 0) throw ConfigError("model spec: warp k must be > 0");
        break;
      case Family::Cortical:
      case Family::CorticalMaxpool:
      case Family::CorticalAvgpool:
      case Family::CorticalDropout75:
      case Family::GaussianDownsample:
      case Family::CombinedRetinalCortical:
        scales.validate();
        scales.validate_fit(side, fix_range);
        break;
      default: break;
    }
  }
};

// ---------------------------------------------------------------------------
// Layers

template <typename S>
struct ConvLayer {
  Param<S> w;
  long stride = 1, pad = 1;
};

template <typename S>
struct BnLayer {
  Param<S> gamma, beta;
  BnStats<S> stats;
};

template <typename S>
struct DenseLayer {
  Param<S> w, b;
};

template <typename S>
struct ResBlock {
  bool pool = false;  // halve spatial size at block entry (both paths)
  ConvLayer<S> c1, c2;
  BnLayer<S> b1, b2;
  std::optional<ConvLayer<S>> proj;
  std::optional<BnLayer<S>> proj_bn;
};

/// Convolutional trunk: stem conv/bn, residual stages, global average pool.
/// Downsampling is avg-pool(2) + stride-1 convs so every spatial size is
/// exact; cost and parameter count match the classic strided blocks.
template <typename S>
struct Trunk {
  bool stem_pool = false;
  ConvLayer<S> stem;
  BnLayer<S> stem_bn;
  std::vector<std::vector<ResBlock<S>>> stages;
  long embed_dim = 0;
  long input_side = 0;
};

/// Stage layout of a trunk: width, block count and entry downsample per
/// stage.
struct TrunkPlan {
  long input_side = 0;
  long in_channels = 3;
  long stem_width = 0;
  bool stem_pool = false;
  std::vector<long> widths;
  std::vector<long> blocks;
  std::vector<bool> pools;

  /// Every downsample must land on an even size.
  void validate() const {
    long s = input_side;
    if (stem_pool) {
      if (s % 2) throw ConfigError("trunk: stem pool on odd side " + std::to_string(s));
      s /= 2;
    }
    for (size_t i = 0; i < pools.size(); ++i)
      if (pools[i]) {
        if (s % 2)
          throw ConfigError("trunk: stage " + std::to_string(i) + " pool on odd side " +
                            std::to_string(s));
        s /= 2;
      }
  }
};

/// Standard backbone for a full image: the 20-layer 3-stage CIFAR-class
/// ResNet at small sides, a 4-stage 18-layer-class net with a downsampling
/// stem at large sides.
inline TrunkPlan backbone_plan(long side, long width) {
  TrunkPlan p;
  p.input_side = side;
  p.stem_width = width;
  if (side <= 64) {
    p.stem_pool = false;
    p.widths = {width, 2 * width, 4 * width};
    p.blocks = {3, 3, 3};
    p.pools = {false, true, true};
  } else {
    p.stem_pool = true;
    p.widths = {width, 2 * width, 4 * width, 8 * width};
    p.blocks = {2, 2, 2, 2};
    p.pools = {true, true, true, true};
  }
  return p;
}

/// Branch trunk for a t x t scale-space fragment: stride-1 stem, no initial
/// pooling, downsampling deferred to the later stages.
inline TrunkPlan branch_plan(long frag_side, long width) {
  TrunkPlan p;
  p.input_side = frag_side;
  p.stem_width = width;
  p.stem_pool = false;
  p.widths = {width, 2 * width, 4 * width};
  p.blocks = {2, 2, 2};
  p.pools = {false, true, true};
  return p;
}

/// Multiply-accumulate count of a trunk's convolutions on its input side
/// (the analytic budget check).
long trunk_macs(const TrunkPlan& p);

// ---------------------------------------------------------------------------
// Network

template <typename S>
struct Network {
  ModelSpec spec;
  std::vector<Trunk<S>> trunks;           // 1 for single-trunk families, B for branched
  DenseLayer<S> head;
  std::vector<DenseLayer<S>> aux_heads;   // branched families only
  bool training = false;
  bool bpda_identity = false;

  std::vector<Param<S>*> params();
  /// (name, tensor) pairs for checkpointing: parameters plus BN running
  /// statistics.
  std::vector<std::pair<std::string, Tensor<S>*>> state_entries();
  long param_count();
};

template <typename S>
struct ForwardOut {
  Var<S> main;
  std::vector<Var<S>> aux;
};

template <typename S>
Network<S> build(const ModelSpec& spec, uint64_t seed);

template <typename S>
ForwardOut<S> forward_single_fixation(Network<S>& net, Tape<S>& tape, Var<S> image,
                                      FixationPoint fix, Rng* dropout_rng = nullptr);

/// Mean of the main logits over the family's 5 evaluation fixations;
/// fixation-independent families reduce to a single pass. Differentiable
/// (attacks back-propagate through all branches of the average).
template <typename S>
Var<S> predict_fixation_ensemble(Network<S>& net, Tape<S>& tape, Var<S> image);

/// One training fixation drawn uniformly from the family's integer range.
inline FixationPoint sample_fixation(const ModelSpec& spec, Rng& rng) {
  if (spec.fix_range == 0) return {0, 0};
  const long r = spec.fix_range;
  return {static_cast<double>(rng.uniform_int(-r, r)), static_cast<double>(rng.uniform_int(-r, r))};
}

/// Cross-entropy at a sampled fixation, plus the per-branch auxiliary terms
/// for branched families.
template <typename S>
Var<S> training_loss(Network<S>& net, Tape<S>& tape, Var<S> image,
                     const std::vector<long>& labels, Rng& rng);

long count_macs_single_fixation(const ModelSpec& spec);

// ---------------------------------------------------------------------------
// Implementation

namespace detail {

template <typename S>
ConvLayer<S> make_conv(const std::string& name, long cout, long cin, long k, long stride, long pad,
                       Rng& rng) {
  ConvLayer<S> c;
  c.stride = stride;
  c.pad = pad;
  Tensor<S> w({cout, cin, k, k});
  const double stddev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
  for (long i = 0; i < w.numel(); ++i) w[i] = static_cast<S>(rng.normal() * stddev);
  c.w = Param<S>(name + ".w", std::move(w), /*decay=*/true);
  return c;
}

template <typename S>
BnLayer<S> make_bn(const std::string& name, long channels) {
  BnLayer<S> b;
  b.gamma = Param<S>(name + ".gamma", Tensor<S>({channels}, S(1)), /*decay=*/false);
  b.beta = Param<S>(name + ".beta", Tensor<S>({channels}, S(0)), /*decay=*/false);
  b.stats = BnStats<S>(channels);
  return b;
}

template <typename S>
DenseLayer<S> make_dense(const std::string& name, long out, long in, Rng& rng) {
  DenseLayer<S> d;
  Tensor<S> w({out, in});
  const double stddev = std::sqrt(2.0 / static_cast<double>(in));
  for (long i = 0; i < w.numel(); ++i) w[i] = static_cast<S>(rng.normal() * stddev);
  d.w = Param<S>(name + ".w", std::move(w), /*decay=*/true);
  d.b = Param<S>(name + ".b", Tensor<S>({out}), /*decay=*/false);
  return d;
}

template <typename S>
Trunk<S> make_trunk(const std::string& name, const TrunkPlan& plan, Rng& rng) {
  plan.validate();
  Trunk<S> t;
  t.input_side = plan.input_side;
  t.stem_pool = plan.stem_pool;
  t.stem = make_conv<S>(name + ".stem", plan.stem_width, plan.in_channels, 3, 1, 1, rng);
  t.stem_bn = make_bn<S>(name + ".stem_bn", plan.stem_width);
  long in_ch = plan.stem_width;
  for (size_t s = 0; s < plan.widths.size(); ++s) {
    std::vector<ResBlock<S>> stage;
    for (long b = 0; b < plan.blocks[s]; ++b) {
      const std::string bn = name + ".s" + std::to_string(s) + ".b" + std::to_string(b);
      const long width = plan.widths[s];
      ResBlock<S> blk;
      blk.pool = (b == 0) && plan.pools[s];
      blk.c1 = make_conv<S>(bn + ".conv1", width, in_ch, 3, 1, 1, rng);
      blk.b1 = make_bn<S>(bn + ".bn1", width);
      blk.c2 = make_conv<S>(bn + ".conv2", width, width, 3, 1, 1, rng);
      blk.b2 = make_bn<S>(bn + ".bn2", width);
      if (blk.pool || in_ch != width) {
        blk.proj = make_conv<S>(bn + ".proj", width, in_ch, 1, 1, 0, rng);
        blk.proj_bn = make_bn<S>(bn + ".proj_bn", width);
      }
      stage.push_back(std::move(blk));
      in_ch = width;
    }
    t.stages.push_back(std::move(stage));
  }
  t.embed_dim = plan.widths.back();
  return t;
}

template <typename S>
Var<S> run_trunk(Trunk<S>& t, Tape<S>& tape, Var<S> x, bool training) {
  auto bn = [&](BnLayer<S>& l, Var<S> v) {
    return batch_norm(v, tape.param(l.gamma), tape.param(l.beta), l.stats, training);
  };
  Var<S> h = x;
  if (t.stem_pool) h = avg_pool(h, 2);
  h = relu(bn(t.stem_bn, conv2d(h, tape.param(t.stem.w), 1L, 1L)));
  for (auto& stage : t.stages)
    for (auto& blk : stage) {
      if (blk.pool) h = avg_pool(h, 2);
      Var<S> shortcut = h;
      if (blk.proj)
        shortcut = bn(*blk.proj_bn, conv2d(h, tape.param(blk.proj->w), 1L, 0L));
      Var<S> y = relu(bn(blk.b1, conv2d(h, tape.param(blk.c1.w), 1L, 1L)));
      y = bn(blk.b2, conv2d(y, tape.param(blk.c2.w), 1L, 1L));
      h = relu(add(y, shortcut));
    }
  return global_average_pool(h);
}

template <typename S>
void collect_trunk(Trunk<S>& t, std::vector<Param<S>*>& out) {
  out.push_back(&t.stem.w);
  out.push_back(&t.stem_bn.gamma);
  out.push_back(&t.stem_bn.beta);
  for (auto& stage : t.stages)
    for (auto& blk : stage) {
      out.push_back(&blk.c1.w);
      out.push_back(&blk.b1.gamma);
      out.push_back(&blk.b1.beta);
      out.push_back(&blk.c2.w);
      out.push_back(&blk.b2.gamma);
      out.push_back(&blk.b2.beta);
      if (blk.proj) {
        out.push_back(&blk.proj->w);
        out.push_back(&blk.proj_bn->gamma);
        out.push_back(&blk.proj_bn->beta);
      }
    }
}

template <typename S>
void collect_trunk_stats(Trunk<S>& t,
                         std::vector<std::pair<std::string, Tensor<S>*>>& out) {
  auto add = [&](BnLayer<S>& b) {
    out.emplace_back(b.gamma.name.substr(0, b.gamma.name.size() - 6) + ".running_mean",
                     &b.stats.mean);
    out.emplace_back(b.gamma.name.substr(0, b.gamma.name.size() - 6) + ".running_var",
                     &b.stats.var);
  };
  add(t.stem_bn);
  for (auto& stage : t.stages)
    for (auto& blk : stage) {
      add(blk.b1);
      add(blk.b2);
      if (blk.proj_bn) add(*blk.proj_bn);
    }
}

}  // namespace detail

template <typename S>
std::vector<Param<S>*> Network<S>::params() {
  std::vector<Param<S>*> out;
  for (auto& t : trunks) detail::collect_trunk(t, out);
  out.push_back(&head.w);
  out.push_back(&head.b);
  for (auto& a : aux_heads) {
    out.push_back(&a.w);
    out.push_back(&a.b);
  }
  return out;
}

template <typename S>
std::vector<std::pair<std::string, Tensor<S>*>> Network<S>::state_entries() {
  std::vector<std::pair<std::string, Tensor<S>*>> out;
  for (Param<S>* p : params()) out.emplace_back(p->name, &p->value);
  for (auto& t : trunks) detail::collect_trunk_stats(t, out);
  return out;
}

template <typename S>
long Network<S>::param_count() {
  long n = 0;
  for (Param<S>* p : params()) n += p->value.numel();
  return n;
}

template <typename S>
Network<S> build(const ModelSpec& spec, uint64_t seed) {
  spec.validate();
  Network<S> net;
  net.spec = spec;
  Rng rng = Rng(seed).substream(0x6e65740ull);
  const bool branched = family_uses_cortical(spec.family);
  if (branched) {
    const long B = spec.branch_count();
    const long wb = spec.branch_width();
    for (long i = 0; i < B; ++i) {
      const std::string nm = "branch" + std::to_string(i);
      TrunkPlan plan = (spec.family == Family::Ensembling)
                           ? backbone_plan(spec.side, wb)
                           : branch_plan(spec.scales.target(), wb);
      net.trunks.push_back(detail::make_trunk<S>(nm, plan, rng));
    }
    const long emb = net.trunks[0].embed_dim;
    const long fused = (spec.fusion() == Fusion::Max || spec.fusion() == Fusion::Avg)
                           ? emb
                           : emb * B;
    net.head = detail::make_dense<S>("head", spec.classes, fused, rng);
    for (long i = 0; i < B; ++i)
      net.aux_heads.push_back(
          detail::make_dense<S>("aux" + std::to_string(i), spec.classes, emb, rng));
  } else {
    long in_side = spec.side;
    if (spec.family == Family::Coarse || spec.family == Family::GaussianBlur)
      in_side = spec.crop_side;
    if (spec.family == Family::GaussianDownsample) in_side = spec.scales.target();
    TrunkPlan plan = backbone_plan(spec.side, spec.base_width);
    if (spec.family == Family::GaussianDownsample)
      plan = branch_plan(spec.scales.target(), spec.base_width);
    else
      plan.input_side = in_side;
    net.trunks.push_back(detail::make_trunk<S>("trunk", plan, rng));
    net.head = detail::make_dense<S>("head", spec.classes, net.trunks[0].embed_dim, rng);
  }
  return net;
}

template <typename S>
ForwardOut<S> forward_single_fixation(Network<S>& net, Tape<S>& tape, Var<S> image,
                                      FixationPoint fix, Rng* dropout_rng) {
  const ModelSpec& spec = net.spec;
  const Tensor<S>& xv = image.value();
  check_shape(xv.rank() == 4 && xv.dim(2) == spec.side && xv.dim(3) == spec.side,
              "forward: image " + shape_str(xv.shape) + " does not match model side " +
                  std::to_string(spec.side));
  if (!family_fixation_independent(spec.family) &&
      (std::abs(fix.dx) > static_cast<double>(spec.fix_range) ||
       std::abs(fix.dy) > static_cast<double>(spec.fix_range)))
    throw RangeError("forward: fixation outside the family's valid range");

  auto head_of = [&](Var<S> emb) {
    return dense(emb, tape.param(net.head.w), tape.param(net.head.b));
  };

  auto coarse_crop = [&](Var<S> img) {
    const long c = spec.crop_side, Ssz = spec.side;
    const long top = (Ssz - c) / 2 + std::llround(fix.dy);
    const long left = (Ssz - c) / 2 + std::llround(fix.dx);
    return crop(img, top, left, c, c);
  };

  auto branched_forward = [&](Var<S> img) {
    ForwardOut<S> out;
    std::vector<Var<S>> embs;
    if (spec.family == Family::Ensembling) {
      for (auto& t : net.trunks) embs.push_back(detail::run_trunk(t, tape, img, net.training));
    } else {
      FragmentSet<S> frags = extract_fragments(img, fix, spec.scales, net.bpda_identity);
      for (size_t i = 0; i < net.trunks.size(); ++i)
        embs.push_back(detail::run_trunk(net.trunks[i], tape, frags.fragments[i], net.training));
    }
    Var<S> fused;
    switch (spec.fusion()) {
      case Fusion::Max: fused = max_of(embs); break;
      case Fusion::Avg: fused = mean_of(embs); break;
      case Fusion::ConcatDropout: {
        fused = concat(embs);
        if (net.training) {
          check_shape(dropout_rng != nullptr, "forward: dropout variant needs a training rng");
          fused = dropout(fused, spec.dropout_rate, *dropout_rng);
        }
        break;
      }
      case Fusion::Concat: fused = concat(embs); break;
    }
    out.main = head_of(fused);
    for (size_t i = 0; i < net.aux_heads.size(); ++i)
      out.aux.push_back(dense(embs[i], tape.param(net.aux_heads[i].w),
                              tape.param(net.aux_heads[i].b)));
    return out;
  };

  switch (spec.family) {
    case Family::Standard:
      return {head_of(detail::run_trunk(net.trunks[0], tape, image, net.training)), {}};
    case Family::Coarse:
      return {head_of(detail::run_trunk(net.trunks[0], tape, coarse_crop(image), net.training)),
              {}};
    case Family::Retinal: {
      Var<S> warped = retinal_resample(image, fix, spec.warp, net.bpda_identity);
      return {head_of(detail::run_trunk(net.trunks[0], tape, warped, net.training)), {}};
    }
    case Family::UniformResampling: {
      Var<S> up = bilinear_resize(coarse_crop(image), spec.side, spec.side);
      return {head_of(detail::run_trunk(net.trunks[0], tape, up, net.training)), {}};
    }
    case Family::GaussianBlur: {
      Var<S> blurred = gaussian_blur(coarse_crop(image), spec.blur_sigma, net.bpda_identity);
      return {head_of(detail::run_trunk(net.trunks[0], tape, blurred, net.training)), {}};
    }
    case Family::GaussianDownsample: {
      // the largest-receptive-field branch of the cortical model, alone
      FragmentSet<S> frags = extract_fragments(image, fix, spec.scales, net.bpda_identity);
      Var<S> frag = frags.fragments.back();
      return {head_of(detail::run_trunk(net.trunks[0], tape, frag, net.training)), {}};
    }
    case Family::CombinedRetinalCortical: {
      Var<S> warped = retinal_resample(image, fix, spec.warp, net.bpda_identity);
      return branched_forward(warped);
    }
    default:
      return branched_forward(image);
  }
}

template <typename S>
Var<S> predict_fixation_ensemble(Network<S>& net, Tape<S>& tape, Var<S> image) {
  if (family_fixation_independent(net.spec.family))
    return forward_single_fixation(net, tape, image, {0, 0}).main;
  std::vector<Var<S>> logits;
  for (const FixationPoint& f : net.spec.eval_points())
    logits.push_back(forward_single_fixation(net, tape, image, f).main);
  return mean_of(logits);
}

template <typename S>
Var<S> training_loss(Network<S>& net, Tape<S>& tape, Var<S> image,
                     const std::vector<long>& labels, Rng& rng) {
  check_shape(net.training, "training_loss: network must be in training mode");
  const FixationPoint fix = sample_fixation(net.spec, rng);
  ForwardOut<S> out = forward_single_fixation(net, tape, image, fix, &rng);
  Var<S> loss = softmax_cross_entropy(out.main, labels);
  if (!out.aux.empty() && net.spec.aux_weight != 0.0) {
    std::vector<Var<S>> terms;
    for (auto& a : out.aux) terms.push_back(softmax_cross_entropy(a, labels));
    Var<S> aux_sum = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) aux_sum = add(aux_sum, terms[i]);
    loss = add(loss, scale(aux_sum, net.spec.aux_weight));
  }
  return loss;
}

}  // namespace fovea
