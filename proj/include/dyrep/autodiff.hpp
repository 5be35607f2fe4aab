#pragma once

#include <functional>
#include <memory>

#include "dyrep/ops.hpp"

namespace dyrep {

// Dynamic reverse-mode tape. A forward pass builds a graph of shared nodes;
// backward(loss) runs one reverse topological sweep, accumulating additively
// across fan-out. Leaf nodes wrapping parameters write into the parameter's
// persistent grad buffer; everything else uses node-local storage released
// with the graph.
namespace detail {

template <typename T>
struct Node {
  Tensor<T> owned;                 // storage for op outputs and input copies
  const Tensor<T>* val = nullptr;  // points at owned or at an external parameter
  std::vector<T> grad_local;
  std::vector<T>* grad = nullptr;  // param grad buffer or &grad_local
  bool requires_grad = false;
  bool is_param = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> back;

  const Tensor<T>& v() const { return *val; }
  std::vector<T>& g() {
    if (grad->size() != val->data.size()) grad->assign(val->data.size(), T(0));
    return *grad;
  }
};

}  // namespace detail

template <typename T>
class Value {
 public:
  Value() = default;
  explicit Value(std::shared_ptr<detail::Node<T>> n) : node_(std::move(n)) {}

  const Tensor<T>& tensor() const { return node_->v(); }
  const std::vector<int64_t>& shape() const { return node_->v().shape; }
  bool defined() const { return node_ != nullptr; }

  std::shared_ptr<detail::Node<T>> node_;
};

// Leaf holding a copy of `x`; never receives gradient.
template <typename T>
Value<T> make_input(Tensor<T> x);

// Leaf bound to a persistent parameter; gradients accumulate into p.grad.
// When track_grad is false the parameter is treated as a constant.
template <typename T>
Value<T> make_param(Tensor<T>& p, bool track_grad = true);

template <typename T>
Value<T> conv2d(const Value<T>& x, Value<T> w, Value<T> b, int stride, int pad_h, int pad_w);

// Convenience overload binding the ConvParams tensors as parameters.
template <typename T>
Value<T> conv2d_op(const Value<T>& x, ConvParams<T>& p, bool track_grad);

// Train mode uses batch statistics and updates bn's running buffers in place.
template <typename T>
Value<T> batchnorm_op(const Value<T>& x, BnParams<T>& bn, BnMode mode, bool track_grad);

template <typename T>
Value<T> avgpool2d_op(const Value<T>& x, const AvgPoolSpec& spec);
template <typename T>
Value<T> pad2d_op(const Value<T>& x, int pad_h, int pad_w);
template <typename T>
Value<T> crop2d_op(const Value<T>& x, int crop_h, int crop_w);
template <typename T>
Value<T> relu_op(const Value<T>& x);
template <typename T>
Value<T> add_op(const Value<T>& a, const Value<T>& b);
template <typename T>
Value<T> global_avgpool_op(const Value<T>& x);
template <typename T>
Value<T> dense_op(const Value<T>& x, DenseParams<T>& p, bool track_grad);
// Scalar mean cross-entropy; result shape is [1].
template <typename T>
Value<T> softmax_ce_op(const Value<T>& logits, std::vector<int> labels);
// Sum of all elements; result shape is [1].
template <typename T>
Value<T> sum_op(const Value<T>& x);

// Reverse sweep from a scalar tail. Rejects a second sweep over the same tail
// unless a new forward pass rebuilt the graph.
template <typename T>
void backward(const Value<T>& loss);

}  // namespace dyrep
