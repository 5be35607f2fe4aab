#pragma once

#include "dyrep/tensor.hpp"

namespace dyrep {

// Convolution parameters. Weight layout is [out, in, kh, kw]; kernel extents
// are odd and padding is symmetric per axis with zero fill. `bias` is only
// meaningful when has_bias is set (convs feeding a BN are bias-free, the bias
// appears when the BN is fused).
template <typename T>
struct ConvParams {
  Tensor<T> weight;
  Tensor<T> bias;
  bool has_bias = false;
  int stride = 1;
  int pad_h = 0;
  int pad_w = 0;

  int out_channels() const { return static_cast<int>(weight.shape[0]); }
  int in_channels() const { return static_cast<int>(weight.shape[1]); }
  int kh() const { return static_cast<int>(weight.shape[2]); }
  int kw() const { return static_cast<int>(weight.shape[3]); }

  void validate() const {
    require(weight.ndim() == 4, "conv weight must be 4-d, got " + shape_str(weight.shape));
    require(kh() % 2 == 1 && kw() % 2 == 1,
            "conv kernel extents must be odd, got " + shape_str(weight.shape));
    require(stride >= 1 && pad_h >= 0 && pad_w >= 0, "conv stride/padding out of range");
    if (has_bias)
      require(bias.numel() == out_channels(), "conv bias length mismatch: " + shape_str(bias.shape));
  }
};

template <typename T>
ConvParams<T> make_conv(int out_c, int in_c, int kh, int kw, int stride, int pad_h, int pad_w,
                        bool with_bias = false) {
  ConvParams<T> c;
  c.weight = Tensor<T>({out_c, in_c, kh, kw});
  c.bias = Tensor<T>({out_c});
  c.has_bias = with_bias;
  c.stride = stride;
  c.pad_h = pad_h;
  c.pad_w = pad_w;
  c.validate();
  return c;
}

// Batch-norm parameters: learnable per-channel scale/shift plus running
// statistics. Normalization and the running update both use the biased
// (divide by n) batch variance.
template <typename T>
struct BnParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T eps = static_cast<T>(1e-5);
  T momentum = static_cast<T>(0.1);

  int channels() const { return static_cast<int>(gamma.numel()); }

  void validate() const {
    require(eps > T(0), "bn eps must be positive");
    require(gamma.numel() == beta.numel() && gamma.numel() == running_mean.numel() &&
                gamma.numel() == running_var.numel(),
            "bn parameter lengths disagree");
    for (T v : running_var.data) require(v >= T(0), "bn running variance must be non-negative");
  }
};

template <typename T>
BnParams<T> make_bn(int channels, T gamma_init = T(1)) {
  BnParams<T> bn;
  bn.gamma = Tensor<T>({channels}, gamma_init);
  bn.beta = Tensor<T>({channels});
  bn.running_mean = Tensor<T>({channels});
  bn.running_var = Tensor<T>({channels}, T(1));
  return bn;
}

struct AvgPoolSpec {
  int k = 3;
  int stride = 1;
  int pad = 0;
};

template <typename T>
struct DenseParams {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]
};

template <typename T>
DenseParams<T> make_dense(int out_f, int in_f) {
  DenseParams<T> d;
  d.weight = Tensor<T>({out_f, in_f});
  d.bias = Tensor<T>({out_f});
  return d;
}

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace dyrep
