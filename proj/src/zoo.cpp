#include "fovea/zoo.hpp"

namespace fovea {

Family family_from_name(const std::string& s) {
  for (Family f : {Family::Standard, Family::Coarse, Family::Retinal, Family::Cortical,
                   Family::UniformResampling, Family::GaussianBlur, Family::GaussianDownsample,
                   Family::Ensembling, Family::CorticalMaxpool, Family::CorticalAvgpool,
                   Family::CorticalDropout75, Family::CombinedRetinalCortical})
    if (s == family_name(f)) return f;
  throw ConfigError("unknown model family '" + s + "'");
}

long trunk_macs(const TrunkPlan& p) {
  long side = p.input_side;
  if (p.stem_pool) side /= 2;
  long macs = p.stem_width * p.in_channels * 9 * side * side;
  long in_ch = p.stem_width;
  for (size_t s = 0; s < p.widths.size(); ++s) {
    const long w = p.widths[s];
    for (long b = 0; b < p.blocks[s]; ++b) {
      const bool pool = (b == 0) && p.pools[s];
      if (pool) side /= 2;
      const long hw = side * side;
      macs += w * in_ch * 9 * hw;  // conv1
      macs += w * w * 9 * hw;      // conv2
      if (pool || in_ch != w) macs += w * in_ch * hw;  // 1x1 projection
      in_ch = w;
    }
  }
  return macs;
}

long count_macs_single_fixation(const ModelSpec& spec) {
  long macs = 0;
  const long B = spec.branch_count();
  if (family_uses_cortical(spec.family)) {
    for (long i = 0; i < B; ++i) {
      TrunkPlan plan = (spec.family == Family::Ensembling)
                           ? backbone_plan(spec.side, spec.branch_width())
                           : branch_plan(spec.scales.target(), spec.branch_width());
      macs += trunk_macs(plan);
    }
    const long emb = (spec.family == Family::Ensembling)
                         ? backbone_plan(spec.side, spec.branch_width()).widths.back()
                         : branch_plan(spec.scales.target(), spec.branch_width()).widths.back();
    const long fused = (spec.fusion() == Fusion::Max || spec.fusion() == Fusion::Avg) ? emb : emb * B;
    macs += fused * spec.classes;
    macs += B * emb * spec.classes;  // auxiliary heads
  } else {
    long in_side = spec.side;
    if (spec.family == Family::Coarse || spec.family == Family::GaussianBlur)
      in_side = spec.crop_side;
    TrunkPlan plan = backbone_plan(spec.side, spec.base_width);
    if (spec.family == Family::GaussianDownsample)
      plan = branch_plan(spec.scales.target(), spec.base_width);
    else
      plan.input_side = in_side;
    macs += trunk_macs(plan);
    macs += plan.widths.back() * spec.classes;
  }
  return macs;
}

}  // namespace fovea
