#include "dyrep/block.hpp"

namespace dyrep {

const char* branch_kind_name(BranchKind k) {
  switch (k) {
    case BranchKind::KxK: return "kxk";
    case BranchKind::Conv1x1: return "1x1";
    case BranchKind::Conv1x1KxK: return "1x1_kxk";
    case BranchKind::Conv1x1Avg: return "1x1_avg";
    case BranchKind::Conv1xK: return "1xk";
    case BranchKind::ConvKx1: return "kx1";
    case BranchKind::Residual: return "residual";
  }
  return "?";
}

BranchKind branch_kind_from_name(const std::string& name) {
  for (BranchKind k : kAllBranchKinds)
    if (name == branch_kind_name(k)) return k;
  fail("unknown branch kind: " + name);
}

namespace {

template <typename T>
BnMode bn_mode_for(RunMode mode, bool calibrating_branch) {
  if (mode == RunMode::Train) return BnMode::Train;
  if (mode == RunMode::Calib && calibrating_branch) return BnMode::Train;
  return BnMode::Eval;
}

}  // namespace

template <typename T>
Value<T> branch_forward(Branch<T>& branch, const Value<T>& x, RunMode mode) {
  const bool track = mode == RunMode::Train;
  Value<T> h = x;
  if (branch.pre_pad > 0) h = pad2d_op(h, branch.pre_pad, branch.pre_pad);
  if (branch.pre_crop_h > 0 || branch.pre_crop_w > 0)
    h = crop2d_op(h, branch.pre_crop_h, branch.pre_crop_w);
  for (auto& stage : branch.stages) {
    switch (stage.kind) {
      case StageKind::Conv: h = conv2d_op(h, stage.conv, track); break;
      case StageKind::AvgPool: h = avgpool2d_op(h, stage.pool); break;
      case StageKind::Identity: break;
      case StageKind::Block: h = block_forward(*stage.block, h, mode); break;
    }
    if (stage.bn)
      h = batchnorm_op(h, *stage.bn, bn_mode_for<T>(mode, branch.calibrating), track);
  }
  return h;
}

template <typename T>
Value<T> block_forward(DyRepBlock<T>& block, const Value<T>& x, RunMode mode) {
  const bool track = mode == RunMode::Train;
  Value<T> out = conv2d_op(x, block.conv, track);
  if (block.bn) out = batchnorm_op(out, *block.bn, bn_mode_for<T>(mode, false), track);
  for (auto& branch : block.branches) {
    Value<T> b = branch_forward(branch, x, mode);
    require(b.shape() == out.shape(),
            "branch output shape " + shape_str(b.shape()) + " drifted from original path " +
                shape_str(out.shape()) + " in block " + block.id);
    out = add_op(out, b);
  }
  return out;
}

template <typename T>
void enumerate_block_targets(const DyRepBlock<T>& block, int max_rep_depth,
                             std::vector<RepTarget>& out) {
  if (!block.expanded()) {
    // Bare conv (a never-expanded site or a fully de-parameterized block):
    // re-expansion keeps its current depth, so only square K>1 matters.
    if (block.conv.kh() == block.conv.kw() && block.conv.kh() > 1 &&
        block.conv.pad_h == block.conv.pad_w && block.conv.pad_h <= (block.conv.kh() - 1) / 2)
      out.push_back({block.id, "conv", block.conv.kh()});
    return;
  }
  for (const auto& branch : block.branches) {
    for (size_t j = 0; j < branch.stages.size(); ++j) {
      const auto& stage = branch.stages[j];
      const std::string sid = block.id + "/" + branch_kind_name(branch.kind) + ".s" +
                              std::to_string(j);
      if (stage.kind == StageKind::Conv && block.depth < max_rep_depth &&
          stage.conv.kh() == stage.conv.kw() && stage.conv.kh() > 1 &&
          stage.conv.pad_h == stage.conv.pad_w && stage.conv.pad_h <= (stage.conv.kh() - 1) / 2)
        out.push_back({sid, branch_kind_name(branch.kind), stage.conv.kh()});
      if (stage.kind == StageKind::Block)
        enumerate_block_targets(*stage.block, max_rep_depth, out);
    }
  }
}

template <typename T>
void visit_block_params(DyRepBlock<T>& block, const TensorVisitor<T>& fn) {
  fn(block.id + ".conv.weight", block.conv.weight);
  if (block.conv.has_bias) fn(block.id + ".conv.bias", block.conv.bias);
  if (block.bn) {
    fn(block.id + ".bn.gamma", block.bn->gamma);
    fn(block.id + ".bn.beta", block.bn->beta);
  }
  for (auto& branch : block.branches) {
    for (size_t j = 0; j < branch.stages.size(); ++j) {
      auto& stage = branch.stages[j];
      const std::string sid = block.id + "/" + branch_kind_name(branch.kind) + ".s" +
                              std::to_string(j);
      if (stage.kind == StageKind::Conv) {
        fn(sid + ".conv.weight", stage.conv.weight);
        if (stage.conv.has_bias) fn(sid + ".conv.bias", stage.conv.bias);
      } else if (stage.kind == StageKind::Block) {
        visit_block_params(*stage.block, fn);
      }
      if (stage.bn) {
        fn(sid + ".bn.gamma", stage.bn->gamma);
        fn(sid + ".bn.beta", stage.bn->beta);
      }
    }
  }
}

template <typename T>
void visit_block_buffers(DyRepBlock<T>& block, const TensorVisitor<T>& fn) {
  if (block.bn) {
    fn(block.id + ".bn.running_mean", block.bn->running_mean);
    fn(block.id + ".bn.running_var", block.bn->running_var);
  }
  for (auto& branch : block.branches) {
    for (size_t j = 0; j < branch.stages.size(); ++j) {
      auto& stage = branch.stages[j];
      const std::string sid = block.id + "/" + branch_kind_name(branch.kind) + ".s" +
                              std::to_string(j);
      if (stage.kind == StageKind::Block) visit_block_buffers(*stage.block, fn);
      if (stage.bn) {
        fn(sid + ".bn.running_mean", stage.bn->running_mean);
        fn(sid + ".bn.running_var", stage.bn->running_var);
      }
    }
  }
}

template <typename T>
void visit_blocks(DyRepBlock<T>& block, const std::function<void(DyRepBlock<T>&)>& fn) {
  fn(block);
  for (auto& branch : block.branches)
    for (auto& stage : branch.stages)
      if (stage.kind == StageKind::Block) visit_blocks(*stage.block, fn);
}

template <typename T>
int64_t block_param_count(const DyRepBlock<T>& block) {
  int64_t n = 0;
  visit_block_params(const_cast<DyRepBlock<T>&>(block),
                     TensorVisitor<T>([&](const std::string&, Tensor<T>& t) { n += t.numel(); }));
  return n;
}

template <typename T>
Branch<T> clone_branch(const Branch<T>& branch) {
  Branch<T> out;
  out.kind = branch.kind;
  out.pre_pad = branch.pre_pad;
  out.pre_crop_h = branch.pre_crop_h;
  out.pre_crop_w = branch.pre_crop_w;
  out.calibrating = branch.calibrating;
  for (const auto& stage : branch.stages) {
    BranchStage<T> s;
    s.kind = stage.kind;
    s.conv = stage.conv;
    s.pool = stage.pool;
    s.bn = stage.bn;
    if (stage.block) s.block = std::make_unique<DyRepBlock<T>>(clone_block(*stage.block));
    out.stages.push_back(std::move(s));
  }
  return out;
}

template <typename T>
DyRepBlock<T> clone_block(const DyRepBlock<T>& block) {
  DyRepBlock<T> out;
  out.id = block.id;
  out.depth = block.depth;
  out.conv = block.conv;
  out.bn = block.bn;
  for (const auto& branch : block.branches) out.branches.push_back(clone_branch(branch));
  return out;
}

#define DYREP_INSTANTIATE_BLOCK(T)                                                          \
  template Value<T> branch_forward<T>(Branch<T>&, const Value<T>&, RunMode);                \
  template Value<T> block_forward<T>(DyRepBlock<T>&, const Value<T>&, RunMode);             \
  template void enumerate_block_targets<T>(const DyRepBlock<T>&, int, std::vector<RepTarget>&); \
  template void visit_block_params<T>(DyRepBlock<T>&, const TensorVisitor<T>&);             \
  template void visit_block_buffers<T>(DyRepBlock<T>&, const TensorVisitor<T>&);            \
  template void visit_blocks<T>(DyRepBlock<T>&, const std::function<void(DyRepBlock<T>&)>&); \
  template int64_t block_param_count<T>(const DyRepBlock<T>&);                              \
  template Branch<T> clone_branch<T>(const Branch<T>&);                                     \
  template DyRepBlock<T> clone_block<T>(const DyRepBlock<T>&);

DYREP_INSTANTIATE_BLOCK(float)
DYREP_INSTANTIATE_BLOCK(double)

#undef DYREP_INSTANTIATE_BLOCK

}  // namespace dyrep
