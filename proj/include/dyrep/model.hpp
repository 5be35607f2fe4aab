#pragma once

#include <array>

#include "dyrep/block.hpp"
#include "dyrep/rng.hpp"

namespace dyrep {

struct ModelSpec {
  std::string family = "vgg_like";  // "vgg_like" | "resnet_like"
  std::vector<int> widths = {8, 16};
  std::vector<int> blocks = {1, 1};  // per stage
  int num_classes = 10;
  std::array<int, 3> input_shape = {3, 16, 16};  // C,H,W

  void validate() const;
};

// A reference model: an ordered list of expandable conv sites plus family
// wiring and a dense head. vgg_like stacks conv-BN-ReLU groups with a 3x3/2
// average pool between stages; resnet_like uses two-conv basic blocks with
// identity or 1x1-conv shortcuts.
template <typename T>
class Model {
 public:
  ModelSpec spec;
  std::vector<DyRepBlock<T>> sites;
  DenseParams<T> head;

  // vgg wiring: one entry per stage, value = one-past-last site index.
  std::vector<int> stage_end;
  // resnet wiring: site indices per basic block (-1 when the shortcut is an
  // identity). Site 0 is the stem.
  struct ResUnit {
    int c1 = -1;
    int c2 = -1;
    int down = -1;
  };
  std::vector<ResUnit> units;

  Value<T> forward(const Tensor<T>& input, RunMode mode);
  Tensor<T> eval_logits(const Tensor<T>& input);

  void visit_params(const TensorVisitor<T>& fn);
  void visit_buffers(const TensorVisitor<T>& fn);
  // Every block in the model, sites first then nested, in traversal order.
  void visit_all_blocks(const std::function<void(DyRepBlock<T>&)>& fn);
  DyRepBlock<T>* find_block(const std::string& id);

  std::vector<RepTarget> rep_targets(int max_rep_depth) const;
  int64_t param_count() const;
  // Forward multiply-add based estimate for one input image.
  uint64_t flops_estimate() const;

  Model<T> clone() const;
};

template <typename T>
Model<T> build_model(const ModelSpec& spec, const SplitRng& rng);

}  // namespace dyrep
