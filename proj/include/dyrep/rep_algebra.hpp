#pragma once

#include "dyrep/block.hpp"
#include "dyrep/params.hpp"

namespace dyrep {

// Equivalence transforms: each converts an OP(-BN) construct into a single
// convolution with the identical eval-mode input->output function, and
// parallel convolutions merge by kernel additivity. All arithmetic runs in
// double regardless of the stored scalar type.

// Folds an eval-mode BN into the conv: F'_j = (gamma_j/sigma_j) F_j,
// b'_j = (b_j - mu_j) gamma_j/sigma_j + beta_j with sigma_j = sqrt(var_j+eps).
template <typename T>
ConvParams<T> fuse_conv_bn(const ConvParams<T>& conv, const BnParams<T>& bn);

// Zero-pads the kernel to target_k x target_k (centered; 1xK/Kx1 kernels land
// on the middle row/column) and sets the padding to (target_k-1)/2 relative
// to the conv's effective placement. Requires kh,kw <= target_k.
template <typename T>
ConvParams<T> pad_kernel_to(const ConvParams<T>& conv, int target_k);

// Sums same-configuration convs after padding every kernel to target_k.
template <typename T>
ConvParams<T> merge_parallel(const std::vector<ConvParams<T>>& convs, int target_k);

// Merges a 1x1 (stride 1) conv followed by a KxK conv into one KxK conv:
// F'[d,c] = sum_m second.F[d,m] * first.F[m,c,0,0];
// b'_d = second.b_d + sum_{m,i,j} second.F[d,m,i,j] * first.b_m.
// Assumes the spatial zero padding for the pair is applied before the 1x1
// stage and the second conv runs with padding 0.
template <typename T>
ConvParams<T> merge_sequential(const ConvParams<T>& first, const ConvParams<T>& second);

// KxK average pooling as a conv: F[d,c,i,j] = 1/K^2 iff d == c.
template <typename T>
ConvParams<T> avgpool_to_conv(int channels, int k, int stride, int pad);

// Identity as a conv: 1 at the kernel center of the diagonal channel planes.
template <typename T>
ConvParams<T> identity_to_conv(int channels, int target_k);

// Collapses one branch to a single conv equivalent at the site configuration
// (target_k kernel, site stride/padding). Rejects branches whose BN running
// stats were never calibrated.
template <typename T>
ConvParams<T> branch_to_conv(const Branch<T>& branch, int target_k, int site_stride,
                             int site_pad);

// Collapses a whole block (original conv, its BN when present, and every
// branch, recursing into nested blocks) into one conv.
template <typename T>
ConvParams<T> collapse_block(const DyRepBlock<T>& block);

}  // namespace dyrep
