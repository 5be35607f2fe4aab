#include "dyrep/ops.hpp"

#include <algorithm>
#include <cmath>

namespace dyrep {

namespace {

template <typename T>
void check_nchw(const Tensor<T>& t, const char* what) {
  require(t.ndim() == 4, std::string(what) + " expects a 4-d [N,C,H,W] tensor, got " +
                             shape_str(t.shape));
}

// Output index range [lo, hi) for which in = out*stride + k - pad lands in
// [0, extent); keeps the hot conv loops free of per-pixel bounds checks.
inline void valid_range(int64_t extent, int64_t out_extent, int stride, int k, int pad,
                        int64_t& lo, int64_t& hi) {
  const int64_t off = static_cast<int64_t>(k) - pad;
  lo = off < 0 ? (-off + stride - 1) / stride : 0;
  // largest o with o*stride + off <= extent-1
  hi = off > extent - 1 ? 0 : (extent - 1 - off) / stride + 1;
  if (lo > out_extent) lo = out_extent;
  if (hi > out_extent) hi = out_extent;
  if (hi < lo) hi = lo;
}

}  // namespace

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const ConvParams<T>& p) {
  check_nchw(input, "conv2d");
  p.validate();
  const int64_t n_batch = input.shape[0], c_in = input.shape[1];
  const int64_t h = input.shape[2], w = input.shape[3];
  require(c_in == p.in_channels(),
          "conv2d: input channels " + shape_str(input.shape) + " do not match weight " +
              shape_str(p.weight.shape));
  require(h + 2 * p.pad_h >= p.kh() && w + 2 * p.pad_w >= p.kw(),
          "conv2d: padded input " + shape_str(input.shape) + " smaller than kernel " +
              shape_str(p.weight.shape));
  const int64_t d_out = p.out_channels();
  const int64_t oh = conv_out_extent(static_cast<int>(h), p.kh(), p.stride, p.pad_h);
  const int64_t ow = conv_out_extent(static_cast<int>(w), p.kw(), p.stride, p.pad_w);

  Tensor<T> out({n_batch, d_out, oh, ow});
  std::vector<double> acc(static_cast<size_t>(oh * ow));
  for (int64_t n = 0; n < n_batch; ++n) {
    for (int64_t d = 0; d < d_out; ++d) {
      const double b = p.has_bias ? static_cast<double>(p.bias.data[d]) : 0.0;
      std::fill(acc.begin(), acc.end(), b);
      for (int64_t c = 0; c < c_in; ++c) {
        const T* in_plane = input.ptr() + input.off4(n, c, 0, 0);
        for (int ky = 0; ky < p.kh(); ++ky) {
          int64_t y_lo, y_hi;
          valid_range(h, oh, p.stride, ky, p.pad_h, y_lo, y_hi);
          for (int kx = 0; kx < p.kw(); ++kx) {
            const double wv =
                static_cast<double>(p.weight.data[((d * c_in + c) * p.kh() + ky) * p.kw() + kx]);
            if (wv == 0.0) continue;
            int64_t x_lo, x_hi;
            valid_range(w, ow, p.stride, kx, p.pad_w, x_lo, x_hi);
            for (int64_t y = y_lo; y < y_hi; ++y) {
              const int64_t iy = y * p.stride + ky - p.pad_h;
              double* arow = acc.data() + y * ow;
              const T* irow = in_plane + iy * w + kx - p.pad_w;
              if (p.stride == 1) {
                for (int64_t x = x_lo; x < x_hi; ++x)
                  arow[x] += wv * static_cast<double>(irow[x]);
              } else {
                for (int64_t x = x_lo; x < x_hi; ++x)
                  arow[x] += wv * static_cast<double>(irow[x * p.stride]);
              }
            }
          }
        }
      }
      T* orow = out.ptr() + out.off4(n, d, 0, 0);
      for (int64_t i = 0; i < oh * ow; ++i) orow[i] = static_cast<T>(acc[static_cast<size_t>(i)]);
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                             const ConvParams<T>& p) {
  check_nchw(grad_out, "conv2d_backward");
  const int64_t n_batch = input.shape[0], c_in = input.shape[1];
  const int64_t h = input.shape[2], w = input.shape[3];
  const int64_t d_out = p.out_channels();
  const int64_t oh = conv_out_extent(static_cast<int>(h), p.kh(), p.stride, p.pad_h);
  const int64_t ow = conv_out_extent(static_cast<int>(w), p.kw(), p.stride, p.pad_w);
  require(grad_out.shape == std::vector<int64_t>({n_batch, d_out, oh, ow}),
          "conv2d_backward: grad shape " + shape_str(grad_out.shape) + " does not match output " +
              shape_str({n_batch, d_out, oh, ow}));

  ConvGrads<T> g;
  g.input = Tensor<T>(input.shape);
  g.weight = Tensor<T>(p.weight.shape);
  if (p.has_bias) g.bias = Tensor<T>(p.bias.shape);

  // grad wrt input: scatter per sample into a double plane buffer.
  std::vector<double> gin(static_cast<size_t>(c_in * h * w));
  for (int64_t n = 0; n < n_batch; ++n) {
    std::fill(gin.begin(), gin.end(), 0.0);
    for (int64_t d = 0; d < d_out; ++d) {
      const T* go = grad_out.ptr() + grad_out.off4(n, d, 0, 0);
      for (int64_t c = 0; c < c_in; ++c) {
        double* gplane = gin.data() + c * h * w;
        for (int ky = 0; ky < p.kh(); ++ky) {
          int64_t y_lo, y_hi;
          valid_range(h, oh, p.stride, ky, p.pad_h, y_lo, y_hi);
          for (int kx = 0; kx < p.kw(); ++kx) {
            const double wv =
                static_cast<double>(p.weight.data[((d * c_in + c) * p.kh() + ky) * p.kw() + kx]);
            if (wv == 0.0) continue;
            int64_t x_lo, x_hi;
            valid_range(w, ow, p.stride, kx, p.pad_w, x_lo, x_hi);
            for (int64_t y = y_lo; y < y_hi; ++y) {
              const int64_t iy = y * p.stride + ky - p.pad_h;
              const T* grow = go + y * ow;
              double* gr = gplane + iy * w + kx - p.pad_w;
              if (p.stride == 1) {
                for (int64_t x = x_lo; x < x_hi; ++x)
                  gr[x] += wv * static_cast<double>(grow[x]);
              } else {
                for (int64_t x = x_lo; x < x_hi; ++x)
                  gr[x * p.stride] += wv * static_cast<double>(grow[x]);
              }
            }
          }
        }
      }
    }
    T* gi = g.input.ptr() + g.input.off4(n, 0, 0, 0);
    for (size_t i = 0; i < gin.size(); ++i) gi[i] = static_cast<T>(gin[i]);
  }

  // grad wrt weight and bias.
  for (int64_t d = 0; d < d_out; ++d) {
    double bacc = 0.0;
    for (int64_t c = 0; c < c_in; ++c) {
      for (int ky = 0; ky < p.kh(); ++ky) {
        int64_t y_lo, y_hi;
        valid_range(h, oh, p.stride, ky, p.pad_h, y_lo, y_hi);
        for (int kx = 0; kx < p.kw(); ++kx) {
          int64_t x_lo, x_hi;
          valid_range(w, ow, p.stride, kx, p.pad_w, x_lo, x_hi);
          double acc = 0.0;
          for (int64_t n = 0; n < n_batch; ++n) {
            const T* go = grad_out.ptr() + grad_out.off4(n, d, 0, 0);
            const T* in_plane = input.ptr() + input.off4(n, c, 0, 0);
            for (int64_t y = y_lo; y < y_hi; ++y) {
              const int64_t iy = y * p.stride + ky - p.pad_h;
              const T* grow = go + y * ow;
              const T* irow = in_plane + iy * w + kx - p.pad_w;
              if (p.stride == 1) {
                for (int64_t x = x_lo; x < x_hi; ++x)
                  acc += static_cast<double>(grow[x]) * static_cast<double>(irow[x]);
              } else {
                for (int64_t x = x_lo; x < x_hi; ++x)
                  acc += static_cast<double>(grow[x]) * static_cast<double>(irow[x * p.stride]);
              }
            }
          }
          g.weight.data[((d * c_in + c) * p.kh() + ky) * p.kw() + kx] = static_cast<T>(acc);
        }
      }
    }
    if (p.has_bias) {
      for (int64_t n = 0; n < n_batch; ++n) {
        const T* go = grad_out.ptr() + grad_out.off4(n, d, 0, 0);
        for (int64_t i = 0; i < oh * ow; ++i) bacc += static_cast<double>(go[i]);
      }
      g.bias.data[d] = static_cast<T>(bacc);
    }
  }
  return g;
}

template <typename T>
BnForward<T> batchnorm_forward(const Tensor<T>& input, BnParams<T>& bn, BnMode mode) {
  check_nchw(input, "batchnorm");
  bn.validate();
  const int64_t n_batch = input.shape[0], c = input.shape[1];
  const int64_t h = input.shape[2], w = input.shape[3];
  require(c == bn.channels(), "batchnorm: channel count " + shape_str(input.shape) +
                                  " does not match parameters of " +
                                  std::to_string(bn.channels()) + " channels");
  const int64_t m = n_batch * h * w;

  BnForward<T> r;
  r.out = Tensor<T>(input.shape);
  r.mean.assign(static_cast<size_t>(c), 0.0);
  r.var.assign(static_cast<size_t>(c), 0.0);

  if (mode == BnMode::Train) {
    require(m > 1, "batchnorm train mode needs more than one value per channel (got N*H*W == 1)");
    for (int64_t ch = 0; ch < c; ++ch) {
      double s = 0.0, s2 = 0.0;
      for (int64_t n = 0; n < n_batch; ++n) {
        const T* plane = input.ptr() + input.off4(n, ch, 0, 0);
        for (int64_t i = 0; i < h * w; ++i) {
          const double v = static_cast<double>(plane[i]);
          s += v;
          s2 += v * v;
        }
      }
      const double mean = s / static_cast<double>(m);
      double var = s2 / static_cast<double>(m) - mean * mean;
      if (var < 0.0) var = 0.0;
      r.mean[static_cast<size_t>(ch)] = mean;
      r.var[static_cast<size_t>(ch)] = var;
      const double mom = static_cast<double>(bn.momentum);
      bn.running_mean.data[ch] =
          static_cast<T>((1.0 - mom) * static_cast<double>(bn.running_mean.data[ch]) + mom * mean);
      bn.running_var.data[ch] =
          static_cast<T>((1.0 - mom) * static_cast<double>(bn.running_var.data[ch]) + mom * var);
    }
  } else {
    for (int64_t ch = 0; ch < c; ++ch) {
      r.mean[static_cast<size_t>(ch)] = static_cast<double>(bn.running_mean.data[ch]);
      r.var[static_cast<size_t>(ch)] = static_cast<double>(bn.running_var.data[ch]);
    }
  }

  for (int64_t ch = 0; ch < c; ++ch) {
    const double inv = 1.0 / std::sqrt(r.var[static_cast<size_t>(ch)] + static_cast<double>(bn.eps));
    const double a = static_cast<double>(bn.gamma.data[ch]) * inv;
    const double b = static_cast<double>(bn.beta.data[ch]) - r.mean[static_cast<size_t>(ch)] * a;
    for (int64_t n = 0; n < n_batch; ++n) {
      const T* in_plane = input.ptr() + input.off4(n, ch, 0, 0);
      T* out_plane = r.out.ptr() + r.out.off4(n, ch, 0, 0);
      for (int64_t i = 0; i < h * w; ++i)
        out_plane[i] = static_cast<T>(a * static_cast<double>(in_plane[i]) + b);
    }
  }
  return r;
}

template <typename T>
BnGrads<T> batchnorm_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                              const BnParams<T>& bn, BnMode mode,
                              const std::vector<double>& saved_mean,
                              const std::vector<double>& saved_var) {
  const int64_t n_batch = input.shape[0], c = input.shape[1];
  const int64_t h = input.shape[2], w = input.shape[3];
  const int64_t m = n_batch * h * w;

  BnGrads<T> g;
  g.input = Tensor<T>(input.shape);
  g.gamma = Tensor<T>(bn.gamma.shape);
  g.beta = Tensor<T>(bn.beta.shape);

  for (int64_t ch = 0; ch < c; ++ch) {
    const double mean = saved_mean[static_cast<size_t>(ch)];
    const double inv = 1.0 / std::sqrt(saved_var[static_cast<size_t>(ch)] + static_cast<double>(bn.eps));
    const double gamma = static_cast<double>(bn.gamma.data[ch]);

    double sum_g = 0.0, sum_gx = 0.0;
    for (int64_t n = 0; n < n_batch; ++n) {
      const T* go = grad_out.ptr() + grad_out.off4(n, ch, 0, 0);
      const T* in_plane = input.ptr() + input.off4(n, ch, 0, 0);
      for (int64_t i = 0; i < h * w; ++i) {
        const double gv = static_cast<double>(go[i]);
        sum_g += gv;
        sum_gx += gv * (static_cast<double>(in_plane[i]) - mean) * inv;
      }
    }
    g.gamma.data[ch] = static_cast<T>(sum_gx);
    g.beta.data[ch] = static_cast<T>(sum_g);

    if (mode == BnMode::Train) {
      const double km = 1.0 / static_cast<double>(m);
      for (int64_t n = 0; n < n_batch; ++n) {
        const T* go = grad_out.ptr() + grad_out.off4(n, ch, 0, 0);
        const T* in_plane = input.ptr() + input.off4(n, ch, 0, 0);
        T* gi = g.input.ptr() + g.input.off4(n, ch, 0, 0);
        for (int64_t i = 0; i < h * w; ++i) {
          const double xh = (static_cast<double>(in_plane[i]) - mean) * inv;
          const double gv = static_cast<double>(go[i]);
          gi[i] = static_cast<T>(gamma * inv * (gv - km * sum_g - xh * km * sum_gx));
        }
      }
    } else {
      const double a = gamma * inv;
      for (int64_t n = 0; n < n_batch; ++n) {
        const T* go = grad_out.ptr() + grad_out.off4(n, ch, 0, 0);
        T* gi = g.input.ptr() + g.input.off4(n, ch, 0, 0);
        for (int64_t i = 0; i < h * w; ++i) gi[i] = static_cast<T>(a * static_cast<double>(go[i]));
      }
    }
  }
  return g;
}

template <typename T>
Tensor<T> avgpool2d_forward(const Tensor<T>& input, const AvgPoolSpec& spec) {
  check_nchw(input, "avgpool2d");
  require(spec.k % 2 == 1, "avgpool kernel size must be odd, got " + std::to_string(spec.k));
  const int64_t n_batch = input.shape[0], c = input.shape[1];
  const int64_t h = input.shape[2], w = input.shape[3];
  const int64_t oh = conv_out_extent(static_cast<int>(h), spec.k, spec.stride, spec.pad);
  const int64_t ow = conv_out_extent(static_cast<int>(w), spec.k, spec.stride, spec.pad);
  Tensor<T> out({n_batch, c, oh, ow});
  // Padded window cells count toward the divisor (always k*k), which is what
  // makes the pooling equal to its fixed-weight conv equivalent.
  const double inv = 1.0 / (static_cast<double>(spec.k) * static_cast<double>(spec.k));
  for (int64_t n = 0; n < n_batch; ++n) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* in_plane = input.ptr() + input.off4(n, ch, 0, 0);
      T* out_plane = out.ptr() + out.off4(n, ch, 0, 0);
      for (int64_t y = 0; y < oh; ++y) {
        for (int64_t x = 0; x < ow; ++x) {
          double acc = 0.0;
          for (int ky = 0; ky < spec.k; ++ky) {
            const int64_t iy = y * spec.stride + ky - spec.pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < spec.k; ++kx) {
              const int64_t ix = x * spec.stride + kx - spec.pad;
              if (ix < 0 || ix >= w) continue;
              acc += static_cast<double>(in_plane[iy * w + ix]);
            }
          }
          out_plane[y * ow + x] = static_cast<T>(acc * inv);
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> avgpool2d_backward(const Tensor<T>& grad_out, const std::vector<int64_t>& in_shape,
                             const AvgPoolSpec& spec) {
  Tensor<T> gi(in_shape);
  const int64_t n_batch = in_shape[0], c = in_shape[1], h = in_shape[2], w = in_shape[3];
  const int64_t oh = grad_out.shape[2], ow = grad_out.shape[3];
  const double inv = 1.0 / (static_cast<double>(spec.k) * static_cast<double>(spec.k));
  std::vector<double> acc(static_cast<size_t>(h * w));
  for (int64_t n = 0; n < n_batch; ++n) {
    for (int64_t ch = 0; ch < c; ++ch) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const T* go = grad_out.ptr() + grad_out.off4(n, ch, 0, 0);
      for (int64_t y = 0; y < oh; ++y) {
        for (int64_t x = 0; x < ow; ++x) {
          const double gv = static_cast<double>(go[y * ow + x]) * inv;
          for (int ky = 0; ky < spec.k; ++ky) {
            const int64_t iy = y * spec.stride + ky - spec.pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < spec.k; ++kx) {
              const int64_t ix = x * spec.stride + kx - spec.pad;
              if (ix < 0 || ix >= w) continue;
              acc[static_cast<size_t>(iy * w + ix)] += gv;
            }
          }
        }
      }
      T* gip = gi.ptr() + gi.off4(n, ch, 0, 0);
      for (size_t i = 0; i < acc.size(); ++i) gip[i] = static_cast<T>(acc[i]);
    }
  }
  return gi;
}

template <typename T>
Tensor<T> pad2d_forward(const Tensor<T>& input, int pad_h, int pad_w) {
  check_nchw(input, "pad2d");
  if (pad_h == 0 && pad_w == 0) return input;
  const int64_t n_batch = input.shape[0], c = input.shape[1];
  const int64_t h = input.shape[2], w = input.shape[3];
  Tensor<T> out({n_batch, c, h + 2 * pad_h, w + 2 * pad_w});
  for (int64_t n = 0; n < n_batch; ++n)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* ip = input.ptr() + input.off4(n, ch, 0, 0);
      T* op = out.ptr() + out.off4(n, ch, 0, 0);
      for (int64_t y = 0; y < h; ++y)
        std::copy(ip + y * w, ip + (y + 1) * w, op + (y + pad_h) * (w + 2 * pad_w) + pad_w);
    }
  return out;
}

template <typename T>
Tensor<T> pad2d_backward(const Tensor<T>& grad_out, int pad_h, int pad_w) {
  if (pad_h == 0 && pad_w == 0) return grad_out;
  return crop2d_forward(grad_out, pad_h, pad_w);
}

template <typename T>
Tensor<T> crop2d_forward(const Tensor<T>& input, int crop_h, int crop_w) {
  check_nchw(input, "crop2d");
  if (crop_h == 0 && crop_w == 0) return input;
  const int64_t n_batch = input.shape[0], c = input.shape[1];
  const int64_t h = input.shape[2], w = input.shape[3];
  require(h > 2 * crop_h && w > 2 * crop_w,
          "crop2d: crop larger than input " + shape_str(input.shape));
  Tensor<T> out({n_batch, c, h - 2 * crop_h, w - 2 * crop_w});
  const int64_t ow = w - 2 * crop_w;
  for (int64_t n = 0; n < n_batch; ++n)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* ip = input.ptr() + input.off4(n, ch, 0, 0);
      T* op = out.ptr() + out.off4(n, ch, 0, 0);
      for (int64_t y = 0; y < h - 2 * crop_h; ++y)
        std::copy(ip + (y + crop_h) * w + crop_w, ip + (y + crop_h) * w + crop_w + ow, op + y * ow);
    }
  return out;
}

template <typename T>
Tensor<T> crop2d_backward(const Tensor<T>& grad_out, int crop_h, int crop_w) {
  return pad2d_forward(grad_out, crop_h, crop_w);
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& input) {
  Tensor<T> out(input.shape);
  for (size_t i = 0; i < input.data.size(); ++i) {
    const T v = input.data[i];
    // NaN propagates so a diverged forward is caught at the loss check.
    out.data[i] = v > T(0) ? v : (v == v ? T(0) : v);
  }
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& input) {
  Tensor<T> gi(input.shape);
  for (size_t i = 0; i < input.data.size(); ++i)
    gi.data[i] = input.data[i] > T(0) ? grad_out.data[i] : T(0);
  return gi;
}

template <typename T>
Tensor<T> add_forward(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape == b.shape,
          "add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor<T> out(a.shape);
  for (size_t i = 0; i < a.data.size(); ++i)
    out.data[i] = static_cast<T>(static_cast<double>(a.data[i]) + static_cast<double>(b.data[i]));
  return out;
}

template <typename T>
Tensor<T> global_avgpool_forward(const Tensor<T>& input) {
  check_nchw(input, "global_avgpool");
  const int64_t n_batch = input.shape[0], c = input.shape[1];
  const int64_t hw = input.shape[2] * input.shape[3];
  Tensor<T> out({n_batch, c});
  for (int64_t n = 0; n < n_batch; ++n)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* plane = input.ptr() + input.off4(n, ch, 0, 0);
      double acc = 0.0;
      for (int64_t i = 0; i < hw; ++i) acc += static_cast<double>(plane[i]);
      out.data[n * c + ch] = static_cast<T>(acc / static_cast<double>(hw));
    }
  return out;
}

template <typename T>
Tensor<T> global_avgpool_backward(const Tensor<T>& grad_out, const std::vector<int64_t>& in_shape) {
  Tensor<T> gi(in_shape);
  const int64_t n_batch = in_shape[0], c = in_shape[1];
  const int64_t hw = in_shape[2] * in_shape[3];
  for (int64_t n = 0; n < n_batch; ++n)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T g = static_cast<T>(static_cast<double>(grad_out.data[n * c + ch]) /
                                 static_cast<double>(hw));
      T* plane = gi.ptr() + gi.off4(n, ch, 0, 0);
      for (int64_t i = 0; i < hw; ++i) plane[i] = g;
    }
  return gi;
}

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& input, const DenseParams<T>& p) {
  require(input.ndim() == 2, "dense expects [N,F] input, got " + shape_str(input.shape));
  const int64_t n_batch = input.shape[0], f = input.shape[1];
  const int64_t o = p.weight.shape[0];
  require(f == p.weight.shape[1], "dense: feature count " + shape_str(input.shape) +
                                      " does not match weight " + shape_str(p.weight.shape));
  Tensor<T> out({n_batch, o});
  for (int64_t n = 0; n < n_batch; ++n)
    for (int64_t j = 0; j < o; ++j) {
      double acc = static_cast<double>(p.bias.data[j]);
      const T* wrow = p.weight.ptr() + j * f;
      const T* irow = input.ptr() + n * f;
      for (int64_t i = 0; i < f; ++i)
        acc += static_cast<double>(wrow[i]) * static_cast<double>(irow[i]);
      out.data[n * o + j] = static_cast<T>(acc);
    }
  return out;
}

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                             const DenseParams<T>& p) {
  const int64_t n_batch = input.shape[0], f = input.shape[1];
  const int64_t o = p.weight.shape[0];
  DenseGrads<T> g;
  g.input = Tensor<T>(input.shape);
  g.weight = Tensor<T>(p.weight.shape);
  g.bias = Tensor<T>(p.bias.shape);
  for (int64_t j = 0; j < o; ++j) {
    double bacc = 0.0;
    for (int64_t n = 0; n < n_batch; ++n) bacc += static_cast<double>(grad_out.data[n * o + j]);
    g.bias.data[j] = static_cast<T>(bacc);
    for (int64_t i = 0; i < f; ++i) {
      double acc = 0.0;
      for (int64_t n = 0; n < n_batch; ++n)
        acc += static_cast<double>(grad_out.data[n * o + j]) *
               static_cast<double>(input.data[n * f + i]);
      g.weight.data[j * f + i] = static_cast<T>(acc);
    }
  }
  for (int64_t n = 0; n < n_batch; ++n)
    for (int64_t i = 0; i < f; ++i) {
      double acc = 0.0;
      for (int64_t j = 0; j < o; ++j)
        acc += static_cast<double>(grad_out.data[n * o + j]) *
               static_cast<double>(p.weight.data[j * f + i]);
      g.input.data[n * f + i] = static_cast<T>(acc);
    }
  return g;
}

template <typename T>
CeForward<T> softmax_ce_forward(const Tensor<T>& logits, const std::vector<int>& labels) {
  require(logits.ndim() == 2, "softmax_ce expects [N,K] logits, got " + shape_str(logits.shape));
  const int64_t n_batch = logits.shape[0], k = logits.shape[1];
  require(static_cast<int64_t>(labels.size()) == n_batch,
          "softmax_ce: label count does not match batch");
  CeForward<T> r;
  r.probs = Tensor<T>(logits.shape);
  double loss = 0.0;
  for (int64_t n = 0; n < n_batch; ++n) {
    const T* row = logits.ptr() + n * k;
    double mx = static_cast<double>(row[0]);
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (int64_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    const int y = labels[static_cast<size_t>(n)];
    require(y >= 0 && y < k, "softmax_ce: label out of range");
    loss += std::log(z) - (static_cast<double>(row[y]) - mx);
    for (int64_t j = 0; j < k; ++j)
      r.probs.data[n * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - mx) / z);
  }
  r.loss = loss / static_cast<double>(n_batch);
  return r;
}

template <typename T>
Tensor<T> softmax_ce_backward(const Tensor<T>& probs, const std::vector<int>& labels,
                              double grad_scale) {
  const int64_t n_batch = probs.shape[0], k = probs.shape[1];
  Tensor<T> g(probs.shape);
  const double inv = grad_scale / static_cast<double>(n_batch);
  for (int64_t n = 0; n < n_batch; ++n)
    for (int64_t j = 0; j < k; ++j) {
      double v = static_cast<double>(probs.data[n * k + j]);
      if (j == labels[static_cast<size_t>(n)]) v -= 1.0;
      g.data[n * k + j] = static_cast<T>(v * inv);
    }
  return g;
}

#define DYREP_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> conv2d_forward<T>(const Tensor<T>&, const ConvParams<T>&);                   \
  template ConvGrads<T> conv2d_backward<T>(const Tensor<T>&, const Tensor<T>&,                    \
                                           const ConvParams<T>&);                                 \
  template BnForward<T> batchnorm_forward<T>(const Tensor<T>&, BnParams<T>&, BnMode);             \
  template BnGrads<T> batchnorm_backward<T>(const Tensor<T>&, const Tensor<T>&,                   \
                                            const BnParams<T>&, BnMode,                           \
                                            const std::vector<double>&,                           \
                                            const std::vector<double>&);                          \
  template Tensor<T> avgpool2d_forward<T>(const Tensor<T>&, const AvgPoolSpec&);                  \
  template Tensor<T> avgpool2d_backward<T>(const Tensor<T>&, const std::vector<int64_t>&,         \
                                           const AvgPoolSpec&);                                   \
  template Tensor<T> pad2d_forward<T>(const Tensor<T>&, int, int);                                \
  template Tensor<T> pad2d_backward<T>(const Tensor<T>&, int, int);                               \
  template Tensor<T> crop2d_forward<T>(const Tensor<T>&, int, int);                               \
  template Tensor<T> crop2d_backward<T>(const Tensor<T>&, int, int);                              \
  template Tensor<T> relu_forward<T>(const Tensor<T>&);                                           \
  template Tensor<T> relu_backward<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> add_forward<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> global_avgpool_forward<T>(const Tensor<T>&);                                 \
  template Tensor<T> global_avgpool_backward<T>(const Tensor<T>&, const std::vector<int64_t>&);   \
  template Tensor<T> dense_forward<T>(const Tensor<T>&, const DenseParams<T>&);                   \
  template DenseGrads<T> dense_backward<T>(const Tensor<T>&, const Tensor<T>&,                    \
                                           const DenseParams<T>&);                                \
  template CeForward<T> softmax_ce_forward<T>(const Tensor<T>&, const std::vector<int>&);         \
  template Tensor<T> softmax_ce_backward<T>(const Tensor<T>&, const std::vector<int>&, double);

DYREP_INSTANTIATE_OPS(float)
DYREP_INSTANTIATE_OPS(double)

#undef DYREP_INSTANTIATE_OPS

}  // namespace dyrep
