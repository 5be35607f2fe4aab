#pragma once

#include <optional>

#include "dyrep/params.hpp"
#include "dyrep/tensor.hpp"

namespace dyrep {

// Raw layer kernels. All reductions accumulate in double regardless of the
// stored scalar type, with a fixed iteration order.

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const ConvParams<T>& p);

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;  // empty when the conv has no bias
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                             const ConvParams<T>& p);

enum class BnMode { Train, Eval };

template <typename T>
struct BnForward {
  Tensor<T> out;
  // Batch statistics saved for the train-mode backward pass.
  std::vector<double> mean;
  std::vector<double> var;
};

// Train mode normalizes by batch statistics (biased variance) and updates the
// running buffers in place: running <- (1-momentum)*running + momentum*batch.
template <typename T>
BnForward<T> batchnorm_forward(const Tensor<T>& input, BnParams<T>& bn, BnMode mode);

template <typename T>
struct BnGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
BnGrads<T> batchnorm_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                              const BnParams<T>& bn, BnMode mode,
                              const std::vector<double>& saved_mean,
                              const std::vector<double>& saved_var);

template <typename T>
Tensor<T> avgpool2d_forward(const Tensor<T>& input, const AvgPoolSpec& spec);
template <typename T>
Tensor<T> avgpool2d_backward(const Tensor<T>& grad_out, const std::vector<int64_t>& in_shape,
                             const AvgPoolSpec& spec);

template <typename T>
Tensor<T> pad2d_forward(const Tensor<T>& input, int pad_h, int pad_w);
template <typename T>
Tensor<T> pad2d_backward(const Tensor<T>& grad_out, int pad_h, int pad_w);

template <typename T>
Tensor<T> crop2d_forward(const Tensor<T>& input, int crop_h, int crop_w);
template <typename T>
Tensor<T> crop2d_backward(const Tensor<T>& grad_out, int crop_h, int crop_w);

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& input);
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& input);

template <typename T>
Tensor<T> add_forward(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> global_avgpool_forward(const Tensor<T>& input);  // [N,C,H,W] -> [N,C]
template <typename T>
Tensor<T> global_avgpool_backward(const Tensor<T>& grad_out, const std::vector<int64_t>& in_shape);

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& input, const DenseParams<T>& p);  // [N,F] -> [N,O]
template <typename T>
struct DenseGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};
template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                             const DenseParams<T>& p);

// Mean softmax cross-entropy over the batch; returns the scalar loss and the
// softmax probabilities needed for the backward pass.
template <typename T>
struct CeForward {
  double loss;
  Tensor<T> probs;
};
template <typename T>
CeForward<T> softmax_ce_forward(const Tensor<T>& logits, const std::vector<int>& labels);
template <typename T>
Tensor<T> softmax_ce_backward(const Tensor<T>& probs, const std::vector<int>& labels,
                              double grad_scale);

}  // namespace dyrep
