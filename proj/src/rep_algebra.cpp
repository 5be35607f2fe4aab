#include "dyrep/rep_algebra.hpp"

#include <cmath>

namespace dyrep {

template <typename T>
ConvParams<T> fuse_conv_bn(const ConvParams<T>& conv, const BnParams<T>& bn) {
  require(bn.channels() == conv.out_channels(),
          "fuse_conv_bn: BN has " + std::to_string(bn.channels()) + " channels but conv has " +
              std::to_string(conv.out_channels()) + " outputs");
  ConvParams<T> out = conv;
  out.has_bias = true;
  out.bias = Tensor<T>({conv.out_channels()});
  const int64_t per_out = conv.weight.numel() / conv.out_channels();
  for (int d = 0; d < conv.out_channels(); ++d) {
    const double sigma = std::sqrt(static_cast<double>(bn.running_var.data[d]) +
                                   static_cast<double>(bn.eps));
    const double scale = static_cast<double>(bn.gamma.data[d]) / sigma;
    T* w = out.weight.ptr() + d * per_out;
    for (int64_t i = 0; i < per_out; ++i) w[i] = static_cast<T>(scale * static_cast<double>(w[i]));
    const double b = conv.has_bias ? static_cast<double>(conv.bias.data[d]) : 0.0;
    out.bias.data[d] = static_cast<T>((b - static_cast<double>(bn.running_mean.data[d])) * scale +
                                      static_cast<double>(bn.beta.data[d]));
  }
  return out;
}

template <typename T>
ConvParams<T> pad_kernel_to(const ConvParams<T>& conv, int target_k) {
  require(conv.kh() <= target_k && conv.kw() <= target_k,
          "pad_kernel_to: kernel " + shape_str(conv.weight.shape) + " larger than target " +
              std::to_string(target_k));
  if (conv.kh() == target_k && conv.kw() == target_k) return conv;
  ConvParams<T> out;
  out.weight = Tensor<T>({conv.out_channels(), conv.in_channels(), target_k, target_k});
  out.bias = conv.bias;
  out.has_bias = conv.has_bias;
  out.stride = conv.stride;
  const int oy = (target_k - conv.kh()) / 2;
  const int ox = (target_k - conv.kw()) / 2;
  out.pad_h = conv.pad_h + oy;
  out.pad_w = conv.pad_w + ox;
  for (int d = 0; d < conv.out_channels(); ++d)
    for (int c = 0; c < conv.in_channels(); ++c)
      for (int y = 0; y < conv.kh(); ++y)
        for (int x = 0; x < conv.kw(); ++x)
          out.weight.data[((static_cast<int64_t>(d) * conv.in_channels() + c) * target_k + y + oy) *
                              target_k +
                          x + ox] =
              conv.weight.data[((static_cast<int64_t>(d) * conv.in_channels() + c) * conv.kh() + y) *
                                   conv.kw() +
                               x];
  return out;
}

template <typename T>
ConvParams<T> merge_parallel(const std::vector<ConvParams<T>>& convs, int target_k) {
  require(!convs.empty(), "merge_parallel: no convs given");
  std::vector<ConvParams<T>> padded;
  padded.reserve(convs.size());
  for (const auto& c : convs) padded.push_back(pad_kernel_to(c, target_k));
  const auto& head = padded.front();
  for (const auto& c : padded) {
    require(c.stride == head.stride && c.in_channels() == head.in_channels() &&
                c.out_channels() == head.out_channels() && c.pad_h == head.pad_h &&
                c.pad_w == head.pad_w,
            "merge_parallel: conv configurations disagree");
  }
  if (padded.size() == 1) return padded.front();

  ConvParams<T> out = head;
  out.has_bias = false;
  std::vector<double> wacc(static_cast<size_t>(head.weight.numel()), 0.0);
  std::vector<double> bacc(static_cast<size_t>(head.out_channels()), 0.0);
  for (const auto& c : padded) {
    for (int64_t i = 0; i < c.weight.numel(); ++i)
      wacc[static_cast<size_t>(i)] += static_cast<double>(c.weight.data[i]);
    if (c.has_bias) {
      out.has_bias = true;
      for (int d = 0; d < c.out_channels(); ++d)
        bacc[static_cast<size_t>(d)] += static_cast<double>(c.bias.data[d]);
    }
  }
  for (int64_t i = 0; i < out.weight.numel(); ++i)
    out.weight.data[i] = static_cast<T>(wacc[static_cast<size_t>(i)]);
  out.bias = Tensor<T>({head.out_channels()});
  if (out.has_bias)
    for (int d = 0; d < head.out_channels(); ++d)
      out.bias.data[d] = static_cast<T>(bacc[static_cast<size_t>(d)]);
  return out;
}

template <typename T>
ConvParams<T> merge_sequential(const ConvParams<T>& first, const ConvParams<T>& second) {
  require(first.kh() == 1 && first.kw() == 1, "merge_sequential: first conv must be 1x1, got " +
                                                  shape_str(first.weight.shape));
  require(first.stride == 1 && first.pad_h == 0 && first.pad_w == 0,
          "merge_sequential: first conv must be stride 1 with no padding");
  require(second.in_channels() == first.out_channels(),
          "merge_sequential: channel mismatch between " + shape_str(first.weight.shape) +
              " and " + shape_str(second.weight.shape));
  const int d_out = second.out_channels();
  const int mid = second.in_channels();
  const int c_in = first.in_channels();
  const int kh = second.kh(), kw = second.kw();

  ConvParams<T> out;
  out.weight = Tensor<T>({d_out, c_in, kh, kw});
  out.bias = Tensor<T>({d_out});
  out.has_bias = first.has_bias || second.has_bias;
  out.stride = second.stride;
  out.pad_h = second.pad_h;
  out.pad_w = second.pad_w;

  for (int d = 0; d < d_out; ++d) {
    for (int c = 0; c < c_in; ++c) {
      for (int y = 0; y < kh; ++y)
        for (int x = 0; x < kw; ++x) {
          double acc = 0.0;
          for (int m = 0; m < mid; ++m)
            acc += static_cast<double>(
                       second.weight.data[((static_cast<int64_t>(d) * mid + m) * kh + y) * kw + x]) *
                   static_cast<double>(first.weight.data[static_cast<int64_t>(m) * c_in + c]);
          out.weight.data[((static_cast<int64_t>(d) * c_in + c) * kh + y) * kw + x] =
              static_cast<T>(acc);
        }
    }
    double b = second.has_bias ? static_cast<double>(second.bias.data[d]) : 0.0;
    if (first.has_bias) {
      for (int m = 0; m < mid; ++m) {
        double wsum = 0.0;
        for (int y = 0; y < kh; ++y)
          for (int x = 0; x < kw; ++x)
            wsum += static_cast<double>(
                second.weight.data[((static_cast<int64_t>(d) * mid + m) * kh + y) * kw + x]);
        b += wsum * static_cast<double>(first.bias.data[m]);
      }
    }
    out.bias.data[d] = static_cast<T>(b);
  }
  return out;
}

template <typename T>
ConvParams<T> avgpool_to_conv(int channels, int k, int stride, int pad) {
  require(k % 2 == 1, "avgpool_to_conv: kernel size must be odd, got " + std::to_string(k));
  ConvParams<T> out = make_conv<T>(channels, channels, k, k, stride, pad, pad);
  const T v = static_cast<T>(1.0 / (static_cast<double>(k) * static_cast<double>(k)));
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < k * k; ++i)
      out.weight.data[(static_cast<int64_t>(c) * channels + c) * k * k + i] = v;
  return out;
}

template <typename T>
ConvParams<T> identity_to_conv(int channels, int target_k) {
  require(target_k % 2 == 1, "identity_to_conv: kernel size must be odd");
  ConvParams<T> out =
      make_conv<T>(channels, channels, target_k, target_k, 1, (target_k - 1) / 2, (target_k - 1) / 2);
  const int center = (target_k / 2) * target_k + target_k / 2;
  for (int c = 0; c < channels; ++c)
    out.weight.data[(static_cast<int64_t>(c) * channels + c) * target_k * target_k + center] = T(1);
  return out;
}

namespace {

template <typename T>
ConvParams<T> stage_to_conv(const BranchStage<T>& stage, int in_channels) {
  switch (stage.kind) {
    case StageKind::Conv:
      require(stage.bn.has_value(), "branch conv stage is missing its BN");
      return fuse_conv_bn(stage.conv, *stage.bn);
    case StageKind::AvgPool: {
      require(stage.bn.has_value(), "branch pooling stage is missing its BN");
      ConvParams<T> eq =
          avgpool_to_conv<T>(in_channels, stage.pool.k, stage.pool.stride, stage.pool.pad);
      return fuse_conv_bn(eq, *stage.bn);
    }
    case StageKind::Identity: {
      require(stage.bn.has_value(), "residual stage is missing its BN");
      ConvParams<T> eq = identity_to_conv<T>(in_channels, 1);
      return fuse_conv_bn(eq, *stage.bn);
    }
    case StageKind::Block:
      return collapse_block(*stage.block);
  }
  fail("unreachable stage kind");
}

}  // namespace

template <typename T>
ConvParams<T> branch_to_conv(const Branch<T>& branch, int target_k, int site_stride,
                             int site_pad) {
  require(!branch.calibrating,
          "branch BN statistics are not calibrated yet; run the calibration batches before "
          "collapsing");
  require(!branch.stages.empty(), "branch has no stages");

  int channels = 0;
  for (const auto& stage : branch.stages)
    if (stage.kind == StageKind::Conv) {
      channels = stage.conv.in_channels();
      break;
    } else if (stage.kind == StageKind::Block) {
      channels = stage.block->conv.in_channels();
      break;
    } else if (stage.kind == StageKind::Identity || stage.kind == StageKind::AvgPool) {
      require(stage.bn.has_value(), "stage missing BN");
      channels = stage.bn->channels();
      break;
    }

  ConvParams<T> merged = stage_to_conv(branch.stages[0], channels);
  for (size_t j = 1; j < branch.stages.size(); ++j) {
    ConvParams<T> next = stage_to_conv(branch.stages[j], merged.out_channels());
    merged = merge_sequential(merged, next);
  }
  merged = pad_kernel_to(merged, target_k);
  // The branch's pre-pad/pre-crop placement lines its kernel up with the
  // site's own padding, so the collapsed conv runs at the site configuration.
  merged.stride = site_stride;
  merged.pad_h = site_pad;
  merged.pad_w = site_pad;
  return merged;
}

template <typename T>
ConvParams<T> collapse_block(const DyRepBlock<T>& block) {
  require(block.conv.pad_h == block.conv.pad_w,
          "collapse_block: site padding must be symmetric");
  if (block.branches.empty() && !block.bn) return block.conv;
  ConvParams<T> base = block.bn ? fuse_conv_bn(block.conv, *block.bn) : block.conv;
  if (block.branches.empty()) return base;
  std::vector<ConvParams<T>> parts;
  parts.reserve(block.branches.size() + 1);
  parts.push_back(std::move(base));
  for (const auto& branch : block.branches)
    parts.push_back(
        branch_to_conv(branch, block.target_k(), block.conv.stride, block.conv.pad_h));
  return merge_parallel(parts, block.target_k());
}

#define DYREP_INSTANTIATE_REP(T)                                                           \
  template ConvParams<T> fuse_conv_bn<T>(const ConvParams<T>&, const BnParams<T>&);        \
  template ConvParams<T> pad_kernel_to<T>(const ConvParams<T>&, int);                      \
  template ConvParams<T> merge_parallel<T>(const std::vector<ConvParams<T>>&, int);        \
  template ConvParams<T> merge_sequential<T>(const ConvParams<T>&, const ConvParams<T>&);  \
  template ConvParams<T> avgpool_to_conv<T>(int, int, int, int);                           \
  template ConvParams<T> identity_to_conv<T>(int, int);                                    \
  template ConvParams<T> branch_to_conv<T>(const Branch<T>&, int, int, int);               \
  template ConvParams<T> collapse_block<T>(const DyRepBlock<T>&);

DYREP_INSTANTIATE_REP(float)
DYREP_INSTANTIATE_REP(double)

#undef DYREP_INSTANTIATE_REP

}  // namespace dyrep
