#include "dyrep/model.hpp"

#include <cmath>

namespace dyrep {

void ModelSpec::validate() const {
  require(family == "vgg_like" || family == "resnet_like", "unknown model family: " + family);
  require(!widths.empty() && widths.size() == blocks.size(),
          "model widths and blocks-per-stage must be non-empty and the same length");
  for (int w : widths) require(w > 0, "model widths must be positive");
  for (int b : blocks) require(b > 0, "blocks per stage must be positive");
  require(num_classes >= 2, "need at least two classes");
  for (int d : input_shape) require(d > 0, "input shape extents must be positive");
}

namespace {

constexpr AvgPoolSpec kStagePool{3, 2, 1};

template <typename T>
void init_conv(ConvParams<T>& conv, const SplitRng& rng, const std::string& name) {
  const double fan_in =
      static_cast<double>(conv.in_channels()) * conv.kh() * conv.kw();
  SplitRng r = rng.split(name);
  r.fill_normal(conv.weight.data, std::sqrt(2.0 / fan_in));
}

template <typename T>
DyRepBlock<T> make_site(const std::string& id, int out_c, int in_c, int k, int stride,
                        const SplitRng& rng) {
  DyRepBlock<T> b;
  b.id = id;
  b.depth = 1;
  b.conv = make_conv<T>(out_c, in_c, k, k, stride, (k - 1) / 2, (k - 1) / 2);
  init_conv(b.conv, rng, id + ".conv.weight");
  b.bn = make_bn<T>(out_c);
  return b;
}

}  // namespace

template <typename T>
Model<T> build_model(const ModelSpec& spec, const SplitRng& rng) {
  spec.validate();
  Model<T> m;
  m.spec = spec;
  SplitRng init = rng.split("init");

  if (spec.family == "vgg_like") {
    int in_c = spec.input_shape[0];
    int idx = 0;
    for (size_t s = 0; s < spec.widths.size(); ++s) {
      for (int b = 0; b < spec.blocks[s]; ++b) {
        m.sites.push_back(
            make_site<T>("features." + std::to_string(idx), spec.widths[s], in_c, 3, 1, init));
        in_c = spec.widths[s];
        ++idx;
      }
      m.stage_end.push_back(idx);
    }
  } else {
    int in_c = spec.input_shape[0];
    m.sites.push_back(make_site<T>("stem", spec.widths[0], in_c, 3, 1, init));
    in_c = spec.widths[0];
    for (size_t s = 0; s < spec.widths.size(); ++s) {
      for (int b = 0; b < spec.blocks[s]; ++b) {
        const int stride = (s > 0 && b == 0) ? 2 : 1;
        const std::string base = "layer" + std::to_string(s) + "." + std::to_string(b);
        typename Model<T>::ResUnit u;
        u.c1 = static_cast<int>(m.sites.size());
        m.sites.push_back(make_site<T>(base + ".conv1", spec.widths[s], in_c, 3, stride, init));
        u.c2 = static_cast<int>(m.sites.size());
        m.sites.push_back(make_site<T>(base + ".conv2", spec.widths[s], spec.widths[s], 3, 1, init));
        if (stride != 1 || in_c != spec.widths[s]) {
          u.down = static_cast<int>(m.sites.size());
          m.sites.push_back(make_site<T>(base + ".down", spec.widths[s], in_c, 1, stride, init));
        }
        m.units.push_back(u);
        in_c = spec.widths[s];
      }
    }
  }

  m.head = make_dense<T>(spec.num_classes, spec.widths.back());
  SplitRng r = init.split("head.weight");
  r.fill_normal(m.head.weight.data, std::sqrt(1.0 / spec.widths.back()));
  return m;
}

template <typename T>
Value<T> Model<T>::forward(const Tensor<T>& input, RunMode mode) {
  require(input.ndim() == 4 && input.shape[1] == spec.input_shape[0],
          "model expects [N," + std::to_string(spec.input_shape[0]) + ",H,W] input, got " +
              shape_str(input.shape));
  const bool track = mode == RunMode::Train;
  Value<T> x = make_input(input);

  if (spec.family == "vgg_like") {
    int idx = 0;
    for (size_t s = 0; s < stage_end.size(); ++s) {
      for (; idx < stage_end[s]; ++idx) x = relu_op(block_forward(sites[idx], x, mode));
      if (s + 1 < stage_end.size()) x = avgpool2d_op(x, kStagePool);
    }
  } else {
    x = relu_op(block_forward(sites[0], x, mode));
    for (const auto& u : units) {
      Value<T> skip = x;
      Value<T> y = relu_op(block_forward(sites[u.c1], x, mode));
      y = block_forward(sites[u.c2], y, mode);
      if (u.down >= 0) skip = block_forward(sites[u.down], skip, mode);
      x = relu_op(add_op(y, skip));
    }
  }

  x = global_avgpool_op(x);
  return dense_op(x, head, track);
}

template <typename T>
Tensor<T> Model<T>::eval_logits(const Tensor<T>& input) {
  return forward(input, RunMode::Eval).tensor();
}

template <typename T>
void Model<T>::visit_params(const TensorVisitor<T>& fn) {
  for (auto& site : sites) visit_block_params(site, fn);
  fn("head.weight", head.weight);
  fn("head.bias", head.bias);
}

template <typename T>
void Model<T>::visit_buffers(const TensorVisitor<T>& fn) {
  for (auto& site : sites) visit_block_buffers(site, fn);
}

template <typename T>
void Model<T>::visit_all_blocks(const std::function<void(DyRepBlock<T>&)>& fn) {
  for (auto& site : sites) visit_blocks(site, fn);
}

template <typename T>
DyRepBlock<T>* Model<T>::find_block(const std::string& id) {
  DyRepBlock<T>* found = nullptr;
  visit_all_blocks([&](DyRepBlock<T>& b) {
    if (b.id == id) found = &b;
  });
  return found;
}

template <typename T>
std::vector<RepTarget> Model<T>::rep_targets(int max_rep_depth) const {
  std::vector<RepTarget> out;
  for (const auto& site : sites) enumerate_block_targets(site, max_rep_depth, out);
  return out;
}

template <typename T>
int64_t Model<T>::param_count() const {
  int64_t n = 0;
  auto* self = const_cast<Model<T>*>(this);
  self->visit_params(TensorVisitor<T>([&](const std::string&, Tensor<T>& t) { n += t.numel(); }));
  n += 0;
  return n;
}

namespace {

struct Hw {
  int64_t h, w;
};

template <typename T>
uint64_t conv_flops(const ConvParams<T>& c, Hw in, Hw& out) {
  out.h = conv_out_extent(static_cast<int>(in.h), c.kh(), c.stride, c.pad_h);
  out.w = conv_out_extent(static_cast<int>(in.w), c.kw(), c.stride, c.pad_w);
  uint64_t macs = static_cast<uint64_t>(c.weight.numel()) * out.h * out.w;
  return 2 * macs + (c.has_bias ? static_cast<uint64_t>(c.out_channels()) * out.h * out.w : 0);
}

template <typename T>
uint64_t block_flops(const DyRepBlock<T>& b, Hw in, Hw& out);

template <typename T>
uint64_t branch_flops(const Branch<T>& br, int in_channels, Hw in, Hw& out) {
  uint64_t f = 0;
  Hw cur = in;
  cur.h += 2 * br.pre_pad - 2 * br.pre_crop_h;
  cur.w += 2 * br.pre_pad - 2 * br.pre_crop_w;
  int ch = in_channels;
  for (const auto& stage : br.stages) {
    Hw next = cur;
    switch (stage.kind) {
      case StageKind::Conv:
        f += conv_flops(stage.conv, cur, next);
        ch = stage.conv.out_channels();
        break;
      case StageKind::AvgPool:
        next.h = conv_out_extent(static_cast<int>(cur.h), stage.pool.k, stage.pool.stride,
                                 stage.pool.pad);
        next.w = conv_out_extent(static_cast<int>(cur.w), stage.pool.k, stage.pool.stride,
                                 stage.pool.pad);
        f += static_cast<uint64_t>(ch) * next.h * next.w * stage.pool.k * stage.pool.k;
        break;
      case StageKind::Identity:
        break;
      case StageKind::Block:
        f += block_flops(*stage.block, cur, next);
        ch = stage.block->conv.out_channels();
        break;
    }
    if (stage.bn) f += 2 * static_cast<uint64_t>(ch) * next.h * next.w;
    cur = next;
  }
  out = cur;
  return f;
}

template <typename T>
uint64_t block_flops(const DyRepBlock<T>& b, Hw in, Hw& out) {
  uint64_t f = conv_flops(b.conv, in, out);
  if (b.bn) f += 2 * static_cast<uint64_t>(b.conv.out_channels()) * out.h * out.w;
  for (const auto& br : b.branches) {
    Hw bout{};
    f += branch_flops(br, b.conv.in_channels(), in, bout);
    f += static_cast<uint64_t>(b.conv.out_channels()) * out.h * out.w;  // the add
  }
  return f;
}

}  // namespace

template <typename T>
uint64_t Model<T>::flops_estimate() const {
  Hw cur{spec.input_shape[1], spec.input_shape[2]};
  uint64_t f = 0;
  auto pool_between = [&](Hw& hw) {
    Hw next;
    next.h = conv_out_extent(static_cast<int>(hw.h), kStagePool.k, kStagePool.stride, kStagePool.pad);
    next.w = conv_out_extent(static_cast<int>(hw.w), kStagePool.k, kStagePool.stride, kStagePool.pad);
    hw = next;
  };
  if (spec.family == "vgg_like") {
    int idx = 0;
    for (size_t s = 0; s < stage_end.size(); ++s) {
      for (; idx < stage_end[s]; ++idx) {
        Hw out{};
        f += block_flops(sites[static_cast<size_t>(idx)], cur, out);
        f += static_cast<uint64_t>(sites[static_cast<size_t>(idx)].conv.out_channels()) * out.h *
             out.w;  // relu
        cur = out;
      }
      if (s + 1 < stage_end.size()) {
        f += static_cast<uint64_t>(spec.widths[s]) * cur.h * cur.w * kStagePool.k * kStagePool.k;
        pool_between(cur);
      }
    }
  } else {
    Hw out{};
    f += block_flops(sites[0], cur, out);
    cur = out;
    for (const auto& u : units) {
      Hw o1{}, o2{};
      f += block_flops(sites[static_cast<size_t>(u.c1)], cur, o1);
      f += block_flops(sites[static_cast<size_t>(u.c2)], o1, o2);
      if (u.down >= 0) {
        Hw od{};
        f += block_flops(sites[static_cast<size_t>(u.down)], cur, od);
      }
      f += 2 * static_cast<uint64_t>(sites[static_cast<size_t>(u.c2)].conv.out_channels()) * o2.h *
           o2.w;  // add + relu
      cur = o2;
    }
  }
  f += static_cast<uint64_t>(spec.widths.back()) * cur.h * cur.w;  // global average pool
  f += 2 * static_cast<uint64_t>(head.weight.numel());
  return f;
}

template <typename T>
Model<T> Model<T>::clone() const {
  Model<T> out;
  out.spec = spec;
  out.stage_end = stage_end;
  out.units = units;
  out.head.weight = head.weight;
  out.head.bias = head.bias;
  out.sites.reserve(sites.size());
  for (const auto& s : sites) out.sites.push_back(clone_block(s));
  return out;
}

#define DYREP_INSTANTIATE_MODEL(T)                                        \
  template class Model<T>;                                                \
  template Model<T> build_model<T>(const ModelSpec&, const SplitRng&);

DYREP_INSTANTIATE_MODEL(float)
DYREP_INSTANTIATE_MODEL(double)

#undef DYREP_INSTANTIATE_MODEL

}  // namespace dyrep
