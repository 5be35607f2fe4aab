#pragma once

#include <memory>
#include <optional>
#include <string>

#include "dyrep/autodiff.hpp"
#include "dyrep/params.hpp"

namespace dyrep {

// The seven branch shapes of the DyRep operation space.
enum class BranchKind { KxK, Conv1x1, Conv1x1KxK, Conv1x1Avg, Conv1xK, ConvKx1, Residual };

constexpr BranchKind kAllBranchKinds[] = {
    BranchKind::KxK,       BranchKind::Conv1x1, BranchKind::Conv1x1KxK, BranchKind::Conv1x1Avg,
    BranchKind::Conv1xK,   BranchKind::ConvKx1, BranchKind::Residual};

const char* branch_kind_name(BranchKind k);
BranchKind branch_kind_from_name(const std::string& name);

enum class StageKind { Conv, AvgPool, Identity, Block };

template <typename T>
struct DyRepBlock;

// One stage of a branch: an op plus its trailing BN ("OP-BN"). When the
// stage's conv has itself been expanded, the (conv, bn) pair is replaced by a
// nested block that owns both, and `bn` here is empty.
template <typename T>
struct BranchStage {
  StageKind kind = StageKind::Conv;
  ConvParams<T> conv;
  AvgPoolSpec pool;
  std::unique_ptr<DyRepBlock<T>> block;
  std::optional<BnParams<T>> bn;
};

template <typename T>
struct Branch {
  BranchKind kind = BranchKind::KxK;
  std::vector<BranchStage<T>> stages;
  // Spatial adjustment applied to the block input before stage 0 so the
  // branch reproduces the original conv's output shape at any site padding.
  int pre_pad = 0;
  int pre_crop_h = 0;
  int pre_crop_w = 0;
  // Set while the branch's fresh BN statistics are being calibrated.
  bool calibrating = false;
};

// An expandable convolution site: the original conv (plus its BN when the
// source layer had one) and any number of live parallel branches. A block
// with no branches behaves exactly like its plain conv.
template <typename T>
struct DyRepBlock {
  std::string id;
  int depth = 1;  // nesting level; model-level sites are depth 1
  ConvParams<T> conv;
  std::optional<BnParams<T>> bn;
  std::vector<Branch<T>> branches;

  int target_k() const { return conv.kh(); }
  bool expanded() const { return !branches.empty(); }
};

enum class RunMode { Train, Eval, Calib };

template <typename T>
Value<T> block_forward(DyRepBlock<T>& block, const Value<T>& x, RunMode mode);

template <typename T>
Value<T> branch_forward(Branch<T>& branch, const Value<T>& x, RunMode mode);

struct RepTarget {
  std::string id;
  std::string kind;  // "conv" for a standalone conv, else the branch kind
  int k = 0;
};

// Collects expansion targets inside one block tree: the block itself when it
// has no branches yet, otherwise every square in-branch conv with K > 1 whose
// containing block sits above the depth cap, recursing into nested blocks.
template <typename T>
void enumerate_block_targets(const DyRepBlock<T>& block, int max_rep_depth,
                             std::vector<RepTarget>& out);

// Deterministic traversal of trainable tensors / statistic buffers. Names are
// stable across structural edits: "<block id>.conv.weight", "<block
// id>/kxk.s0.bn.gamma", ...
template <typename T>
using TensorVisitor = std::function<void(const std::string&, Tensor<T>&)>;

template <typename T>
void visit_block_params(DyRepBlock<T>& block, const TensorVisitor<T>& fn);
template <typename T>
void visit_block_buffers(DyRepBlock<T>& block, const TensorVisitor<T>& fn);

// Visits every block in the tree (the block itself plus nested ones).
template <typename T>
void visit_blocks(DyRepBlock<T>& block, const std::function<void(DyRepBlock<T>&)>& fn);

template <typename T>
int64_t block_param_count(const DyRepBlock<T>& block);

template <typename T>
DyRepBlock<T> clone_block(const DyRepBlock<T>& block);
template <typename T>
Branch<T> clone_branch(const Branch<T>& branch);

}  // namespace dyrep
