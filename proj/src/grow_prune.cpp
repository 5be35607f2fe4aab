#include "dyrep/grow_prune.hpp"

#include <cmath>

namespace dyrep {

namespace {

// Adds sign * (F_k, b_k) of a collapsed branch into the block's original
// path. With a BN on the original path the conv edit is rescaled per channel
// by sigma/gamma and the bias lands in the BN's beta, so the eval-mode
// composition (conv -> BN) + branch stays exactly equal.
template <typename T>
void absorb_conv(DyRepBlock<T>& block, const ConvParams<T>& fused, double sign) {
  require(fused.weight.shape == block.conv.weight.shape,
          "absorb: collapsed branch weight " + shape_str(fused.weight.shape) +
              " does not match original conv " + shape_str(block.conv.weight.shape));
  const int d_out = block.conv.out_channels();
  const int64_t per_out = block.conv.weight.numel() / d_out;
  if (block.bn) {
    for (int d = 0; d < d_out; ++d) {
      const double gamma = static_cast<double>(block.bn->gamma.data[d]);
      require(std::abs(gamma) > 1e-12,
              "absorb: original BN gamma is ~0 on channel " + std::to_string(d) + " of block " +
                  block.id + "; the function-preserving edit is undefined");
      const double sigma = std::sqrt(static_cast<double>(block.bn->running_var.data[d]) +
                                     static_cast<double>(block.bn->eps));
      const double factor = sign * sigma / gamma;
      T* w = block.conv.weight.ptr() + d * per_out;
      const T* f = fused.weight.ptr() + d * per_out;
      for (int64_t i = 0; i < per_out; ++i)
        w[i] = static_cast<T>(static_cast<double>(w[i]) + factor * static_cast<double>(f[i]));
      if (fused.has_bias)
        block.bn->beta.data[d] = static_cast<T>(static_cast<double>(block.bn->beta.data[d]) +
                                                sign * static_cast<double>(fused.bias.data[d]));
    }
  } else {
    for (int64_t i = 0; i < block.conv.weight.numel(); ++i)
      block.conv.weight.data[i] = static_cast<T>(static_cast<double>(block.conv.weight.data[i]) +
                                                 sign * static_cast<double>(fused.weight.data[i]));
    if (fused.has_bias) {
      if (!block.conv.has_bias) {
        block.conv.bias = Tensor<T>({d_out});
        block.conv.has_bias = true;
      }
      for (int d = 0; d < d_out; ++d)
        block.conv.bias.data[d] = static_cast<T>(static_cast<double>(block.conv.bias.data[d]) +
                                                 sign * static_cast<double>(fused.bias.data[d]));
    }
  }
}

template <typename T>
BnParams<T> fresh_bn(int channels, double gamma) {
  BnParams<T> bn = make_bn<T>(channels, static_cast<T>(gamma));
  return bn;
}

// Where an expansion target lives: either an existing (empty) block or a
// conv stage that still needs wrapping.
template <typename T>
struct ExpandPoint {
  DyRepBlock<T>* block = nullptr;
  BranchStage<T>* stage = nullptr;
  int parent_depth = 0;
};

template <typename T>
void find_point(DyRepBlock<T>& block, const std::string& id, ExpandPoint<T>& out) {
  if (block.id == id) {
    out.block = &block;
    return;
  }
  for (auto& branch : block.branches)
    for (size_t j = 0; j < branch.stages.size(); ++j) {
      auto& stage = branch.stages[j];
      const std::string sid =
          block.id + "/" + branch_kind_name(branch.kind) + ".s" + std::to_string(j);
      if (stage.kind == StageKind::Conv && sid == id) {
        out.stage = &stage;
        out.parent_depth = block.depth;
        return;
      }
      if (stage.kind == StageKind::Block) {
        find_point(*stage.block, id, out);
        if (out.block || out.stage) return;
      }
    }
}

}  // namespace

template <typename T>
Branch<T> make_branch(BranchKind kind, int in_c, int out_c, int k, int stride, int pad,
                      double gamma_init, const SplitRng* init_rng) {
  require(pad <= (k - 1) / 2, "make_branch: site padding exceeds (K-1)/2");
  const int crop = (k - 1) / 2 - pad;
  Branch<T> br;
  br.kind = kind;
  br.calibrating = true;

  auto add_conv = [&](int oc, int ic, int kh, int kw, int s, int ph, int pw, double bn_gamma) {
    BranchStage<T> st;
    st.kind = StageKind::Conv;
    st.conv = make_conv<T>(oc, ic, kh, kw, s, ph, pw);
    if (init_rng) {
      SplitRng r = init_rng->split(std::to_string(br.stages.size()));
      const double fan_in = static_cast<double>(ic) * kh * kw;
      r.fill_normal(st.conv.weight.data, std::sqrt(2.0 / fan_in));
    }
    st.bn = fresh_bn<T>(oc, bn_gamma);
    br.stages.push_back(std::move(st));
  };

  switch (kind) {
    case BranchKind::KxK:
      add_conv(out_c, in_c, k, k, stride, pad, pad, gamma_init);
      break;
    case BranchKind::Conv1x1:
      br.pre_crop_h = br.pre_crop_w = crop;
      add_conv(out_c, in_c, 1, 1, stride, 0, 0, gamma_init);
      break;
    case BranchKind::Conv1x1KxK:
      br.pre_pad = pad;
      add_conv(in_c, in_c, 1, 1, 1, 0, 0, 1.0);
      add_conv(out_c, in_c, k, k, stride, 0, 0, gamma_init);
      break;
    case BranchKind::Conv1x1Avg: {
      br.pre_pad = pad;
      add_conv(out_c, in_c, 1, 1, 1, 0, 0, 1.0);
      BranchStage<T> st;
      st.kind = StageKind::AvgPool;
      st.pool = AvgPoolSpec{k, stride, 0};
      st.bn = fresh_bn<T>(out_c, gamma_init);
      br.stages.push_back(std::move(st));
      break;
    }
    case BranchKind::Conv1xK:
      br.pre_crop_h = crop;
      add_conv(out_c, in_c, 1, k, stride, 0, pad, gamma_init);
      break;
    case BranchKind::ConvKx1:
      br.pre_crop_w = crop;
      add_conv(out_c, in_c, k, 1, stride, pad, 0, gamma_init);
      break;
    case BranchKind::Residual: {
      require(in_c == out_c && stride == 1,
              "residual branch needs matching channels and stride 1");
      br.pre_crop_h = br.pre_crop_w = crop;
      BranchStage<T> st;
      st.kind = StageKind::Identity;
      st.bn = fresh_bn<T>(out_c, gamma_init);
      br.stages.push_back(std::move(st));
      break;
    }
  }
  return br;
}

template <typename T>
ExpandInfo expand(Model<T>& model, const std::string& target_id, const GrowConfig& cfg,
                  const BatchSource<T>& calib, const SplitRng& rng) {
  cfg.validate();
  ExpandPoint<T> point;
  for (auto& site : model.sites) {
    find_point(site, target_id, point);
    if (point.block || point.stage) break;
  }
  require(point.block || point.stage, "expand: no such rep target: " + target_id);

  DyRepBlock<T>* block = point.block;
  bool wrapped = false;
  if (point.stage) {
    require(point.parent_depth + 1 <= cfg.max_rep_depth,
            "expand: depth cap reached for target " + target_id);
    auto nested = std::make_unique<DyRepBlock<T>>();
    nested->id = target_id;
    nested->depth = point.parent_depth + 1;
    nested->conv = std::move(point.stage->conv);
    require(point.stage->bn.has_value(), "expand: branch conv stage is missing its BN");
    nested->bn = std::move(point.stage->bn);
    point.stage->bn.reset();
    point.stage->conv = ConvParams<T>{};
    point.stage->kind = StageKind::Block;
    point.stage->block = std::move(nested);
    block = point.stage->block.get();
    wrapped = true;
  } else {
    require(!block->expanded(), "expand: target already expanded: " + target_id);
    require(block->depth <= cfg.max_rep_depth, "expand: depth cap reached for " + target_id);
  }

  const ConvParams<T>& conv = block->conv;
  require(conv.kh() == conv.kw() && conv.kh() > 1,
          "expand: target must be a square K>1 conv, got " + shape_str(conv.weight.shape));
  require(conv.pad_h == conv.pad_w, "expand: target padding must be symmetric");
  const int k = conv.kh(), stride = conv.stride, pad = conv.pad_h;
  const int in_c = conv.in_channels(), out_c = conv.out_channels();

  ExpandInfo info;
  info.id = target_id;
  SplitRng grow_rng = rng.split("grow").split(target_id);
  for (BranchKind kind : cfg.branch_kinds) {
    if (kind == BranchKind::Residual && (in_c != out_c || stride != 1)) continue;
    SplitRng kr = grow_rng.split(branch_kind_name(kind));
    block->branches.push_back(
        make_branch<T>(kind, in_c, out_c, k, stride, pad, cfg.gamma_init, &kr));
    info.kinds.push_back(branch_kind_name(kind));
  }

  // Calibrate the fresh BN statistics: forward-only passes where everything
  // already in the model stays frozen in eval mode.
  try {
    for (int i = 0; i < cfg.calib_batches; ++i) {
      auto batch = calib();
      require(batch.has_value(), "expand: calibration stream exhausted after " +
                                     std::to_string(i) + " of " +
                                     std::to_string(cfg.calib_batches) + " batches");
      model.forward(*batch, RunMode::Calib);
    }
  } catch (...) {
    // Leave the model exactly as it was.
    if (wrapped) {
      auto nested = std::move(point.stage->block);
      point.stage->kind = StageKind::Conv;
      point.stage->conv = std::move(nested->conv);
      point.stage->bn = std::move(nested->bn);
      point.stage->block.reset();
    } else {
      block->branches.clear();
    }
    throw;
  }

  for (auto& branch : block->branches) branch.calibrating = false;
  for (auto& branch : block->branches) {
    ConvParams<T> fused = branch_to_conv(branch, k, stride, pad);
    absorb_conv(*block, fused, -1.0);
  }
  return info;
}

template <typename T>
double branch_importance(const Branch<T>& branch) {
  require(!branch.stages.empty(), "branch_importance: branch has no stages");
  const auto& last = branch.stages.back();
  const BnParams<T>* bn = nullptr;
  if (last.bn)
    bn = &*last.bn;
  else if (last.kind == StageKind::Block && last.block->bn)
    bn = &*last.block->bn;
  require(bn != nullptr, "branch_importance: branch has no final BN");
  double acc = 0.0;
  for (T g : bn->gamma.data) acc += std::abs(static_cast<double>(g));
  return acc / static_cast<double>(bn->channels());
}

template <typename T>
std::vector<size_t> dep_select(const DyRepBlock<T>& block, const DepConfig& cfg) {
  cfg.validate();
  const size_t n = block.branches.size();
  if (n < 2) return {};
  std::vector<double> s(n);
  for (size_t j = 0; j < n; ++j) s[j] = branch_importance(block.branches[j]);
  double mean = 0.0;
  for (double v : s) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : s) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);  // population variance
  if (std::sqrt(var) <= cfg.lambda) return {};
  std::vector<size_t> cut;
  for (size_t j = 0; j < n; ++j)
    if (s[j] < mean) cut.push_back(j);
  return cut;
}

template <typename T>
void remove_branch(DyRepBlock<T>& block, size_t index) {
  require(index < block.branches.size(),
          "remove_branch: index " + std::to_string(index) + " out of range in block " + block.id);
  ConvParams<T> fused = branch_to_conv(block.branches[index], block.target_k(),
                                       block.conv.stride, block.conv.pad_h);
  absorb_conv(block, fused, +1.0);
  block.branches.erase(block.branches.begin() + static_cast<std::ptrdiff_t>(index));
}

template <typename T>
void deploy(Model<T>& model) {
  for (auto& site : model.sites)
    while (!site.branches.empty()) remove_branch(site, site.branches.size() - 1);
}

#define DYREP_INSTANTIATE_GROW(T)                                                            \
  template Branch<T> make_branch<T>(BranchKind, int, int, int, int, int, double,             \
                                    const SplitRng*);                                        \
  template ExpandInfo expand<T>(Model<T>&, const std::string&, const GrowConfig&,            \
                                const BatchSource<T>&, const SplitRng&);                     \
  template double branch_importance<T>(const Branch<T>&);                                    \
  template std::vector<size_t> dep_select<T>(const DyRepBlock<T>&, const DepConfig&);        \
  template void remove_branch<T>(DyRepBlock<T>&, size_t);                                    \
  template void deploy<T>(Model<T>&);

DYREP_INSTANTIATE_GROW(float)
DYREP_INSTANTIATE_GROW(double)

#undef DYREP_INSTANTIATE_GROW

}  // namespace dyrep
