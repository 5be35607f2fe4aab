#include "dyrep/autodiff.hpp"

#include <algorithm>
#include <unordered_set>

namespace dyrep {

namespace {

template <typename T>
using NodeP = std::shared_ptr<detail::Node<T>>;

template <typename T>
NodeP<T> new_op_node(Tensor<T> out, std::vector<NodeP<T>> parents) {
  auto n = std::make_shared<detail::Node<T>>();
  n->owned = std::move(out);
  n->val = &n->owned;
  n->grad = &n->grad_local;
  for (auto& p : parents)
    if (p && p->requires_grad) n->requires_grad = true;
  n->parents = std::move(parents);
  return n;
}

template <typename T>
void accumulate(std::vector<T>& dst, const Tensor<T>& src) {
  for (size_t i = 0; i < src.data.size(); ++i) dst[i] += src.data[i];
}

template <typename T>
Tensor<T> grad_tensor(detail::Node<T>& n) {
  Tensor<T> g(n.v().shape);
  g.data = n.g();
  return g;
}

}  // namespace

template <typename T>
Value<T> make_input(Tensor<T> x) {
  auto n = std::make_shared<detail::Node<T>>();
  n->owned = std::move(x);
  n->val = &n->owned;
  n->grad = &n->grad_local;
  return Value<T>(std::move(n));
}

template <typename T>
Value<T> make_param(Tensor<T>& p, bool track_grad) {
  auto n = std::make_shared<detail::Node<T>>();
  n->val = &p;
  if (track_grad) {
    p.alloc_grad();
    n->grad = &p.grad;
    n->requires_grad = true;
    n->is_param = true;
  } else {
    n->grad = &n->grad_local;
  }
  return Value<T>(std::move(n));
}

template <typename T>
Value<T> conv2d(const Value<T>& x, Value<T> w, Value<T> b, int stride, int pad_h, int pad_w) {
  ConvParams<T> view;
  view.weight = w.tensor();
  view.has_bias = b.defined();
  if (b.defined()) view.bias = b.tensor();
  view.stride = stride;
  view.pad_h = pad_h;
  view.pad_w = pad_w;
  Tensor<T> out = conv2d_forward(x.tensor(), view);

  std::vector<NodeP<T>> parents{x.node_, w.node_};
  if (b.defined()) parents.push_back(b.node_);
  auto n = new_op_node<T>(std::move(out), std::move(parents));
  if (n->requires_grad) {
    n->back = [stride, pad_h, pad_w](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      auto& wn = *self.parents[1];
      ConvParams<T> p;
      p.weight = wn.v();
      p.stride = stride;
      p.pad_h = pad_h;
      p.pad_w = pad_w;
      p.has_bias = self.parents.size() > 2;
      if (p.has_bias) p.bias = self.parents[2]->v();
      ConvGrads<T> g = conv2d_backward(grad_tensor(self), xn.v(), p);
      if (xn.requires_grad) accumulate(xn.g(), g.input);
      if (wn.requires_grad) accumulate(wn.g(), g.weight);
      if (p.has_bias && self.parents[2]->requires_grad) accumulate(self.parents[2]->g(), g.bias);
    };
  }
  return Value<T>(std::move(n));
}

template <typename T>
Value<T> conv2d_op(const Value<T>& x, ConvParams<T>& p, bool track_grad) {
  Value<T> w = make_param(p.weight, track_grad);
  Value<T> b;
  if (p.has_bias) b = make_param(p.bias, track_grad);
  return conv2d(x, w, b, p.stride, p.pad_h, p.pad_w);
}

template <typename T>
Value<T> batchnorm_op(const Value<T>& x, BnParams<T>& bn, BnMode mode, bool track_grad) {
  Value<T> gamma = make_param(bn.gamma, track_grad);
  Value<T> beta = make_param(bn.beta, track_grad);
  BnForward<T> f = batchnorm_forward(x.tensor(), bn, mode);
  auto n = new_op_node<T>(std::move(f.out), {x.node_, gamma.node_, beta.node_});
  if (n->requires_grad) {
    BnParams<T> frozen;  // snapshot of what the forward used
    frozen.gamma = bn.gamma;
    frozen.beta = bn.beta;
    frozen.eps = bn.eps;
    n->back = [mode, frozen = std::move(frozen), mean = std::move(f.mean),
               var = std::move(f.var)](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      BnGrads<T> g = batchnorm_backward(grad_tensor(self), xn.v(), frozen, mode, mean, var);
      if (xn.requires_grad) accumulate(xn.g(), g.input);
      if (self.parents[1]->requires_grad) accumulate(self.parents[1]->g(), g.gamma);
      if (self.parents[2]->requires_grad) accumulate(self.parents[2]->g(), g.beta);
    };
  }
  return Value<T>(std::move(n));
}

template <typename T>
Value<T> avgpool2d_op(const Value<T>& x, const AvgPoolSpec& spec) {
  auto n = new_op_node<T>(avgpool2d_forward(x.tensor(), spec), {x.node_});
  if (n->requires_grad)
    n->back = [spec](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      accumulate(xn.g(), avgpool2d_backward(grad_tensor(self), xn.v().shape, spec));
    };
  return Value<T>(std::move(n));
}

template <typename T>
Value<T> pad2d_op(const Value<T>& x, int pad_h, int pad_w) {
  if (pad_h == 0 && pad_w == 0) return x;
  auto n = new_op_node<T>(pad2d_forward(x.tensor(), pad_h, pad_w), {x.node_});
  if (n->requires_grad)
    n->back = [pad_h, pad_w](detail::Node<T>& self) {
      accumulate(self.parents[0]->g(), pad2d_backward(grad_tensor(self), pad_h, pad_w));
    };
  return Value<T>(std::move(n));
}

template <typename T>
Value<T> crop2d_op(const Value<T>& x, int crop_h, int crop_w) {
  if (crop_h == 0 && crop_w == 0) return x;
  auto n = new_op_node<T>(crop2d_forward(x.tensor(), crop_h, crop_w), {x.node_});
  if (n->requires_grad)
    n->back = [crop_h, crop_w](detail::Node<T>& self) {
      accumulate(self.parents[0]->g(), crop2d_backward(grad_tensor(self), crop_h, crop_w));
    };
  return Value<T>(std::move(n));
}

template <typename T>
Value<T> relu_op(const Value<T>& x) {
  auto n = new_op_node<T>(relu_forward(x.tensor()), {x.node_});
  if (n->requires_grad)
    n->back = [](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      accumulate(xn.g(), relu_backward(grad_tensor(self), xn.v()));
    };
  return Value<T>(std::move(n));
}

template <typename T>
Value<T> add_op(const Value<T>& a, const Value<T>& b) {
  auto n = new_op_node<T>(add_forward(a.tensor(), b.tensor()), {a.node_, b.node_});
  if (n->requires_grad)
    n->back = [](detail::Node<T>& self) {
      Tensor<T> g = grad_tensor(self);
      if (self.parents[0]->requires_grad) accumulate(self.parents[0]->g(), g);
      if (self.parents[1]->requires_grad) accumulate(self.parents[1]->g(), g);
    };
  return Value<T>(std::move(n));
}

template <typename T>
Value<T> global_avgpool_op(const Value<T>& x) {
  auto n = new_op_node<T>(global_avgpool_forward(x.tensor()), {x.node_});
  if (n->requires_grad)
    n->back = [](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      accumulate(xn.g(), global_avgpool_backward(grad_tensor(self), xn.v().shape));
    };
  return Value<T>(std::move(n));
}

template <typename T>
Value<T> dense_op(const Value<T>& x, DenseParams<T>& p, bool track_grad) {
  Value<T> w = make_param(p.weight, track_grad);
  Value<T> b = make_param(p.bias, track_grad);
  auto n = new_op_node<T>(dense_forward(x.tensor(), p), {x.node_, w.node_, b.node_});
  if (n->requires_grad)
    n->back = [](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      DenseParams<T> p2;
      p2.weight = self.parents[1]->v();
      p2.bias = self.parents[2]->v();
      DenseGrads<T> g = dense_backward(grad_tensor(self), xn.v(), p2);
      if (xn.requires_grad) accumulate(xn.g(), g.input);
      if (self.parents[1]->requires_grad) accumulate(self.parents[1]->g(), g.weight);
      if (self.parents[2]->requires_grad) accumulate(self.parents[2]->g(), g.bias);
    };
  return Value<T>(std::move(n));
}

template <typename T>
Value<T> softmax_ce_op(const Value<T>& logits, std::vector<int> labels) {
  CeForward<T> f = softmax_ce_forward(logits.tensor(), labels);
  Tensor<T> out({1});
  out.data[0] = static_cast<T>(f.loss);
  auto n = new_op_node<T>(std::move(out), {logits.node_});
  if (n->requires_grad) {
    n->back = [probs = std::move(f.probs), labels = std::move(labels)](detail::Node<T>& self) {
      accumulate(self.parents[0]->g(),
                 softmax_ce_backward(probs, labels, static_cast<double>(self.g()[0])));
    };
  }
  return Value<T>(std::move(n));
}

template <typename T>
Value<T> sum_op(const Value<T>& x) {
  double acc = 0.0;
  for (const T v : x.tensor().data) acc += static_cast<double>(v);
  Tensor<T> out({1});
  out.data[0] = static_cast<T>(acc);
  auto n = new_op_node<T>(std::move(out), {x.node_});
  if (n->requires_grad)
    n->back = [](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      if (!xn.requires_grad) return;
      auto& g = xn.g();
      const T gv = self.g()[0];
      for (auto& v : g) v += gv;
    };
  return Value<T>(std::move(n));
}

template <typename T>
void backward(const Value<T>& loss) {
  require(loss.defined() && loss.tensor().numel() == 1, "backward expects a scalar loss");
  auto tail = loss.node_;
  require(!tail->backward_done, "backward called twice without a new forward pass");
  tail->backward_done = true;

  // Iterative post-order topological sort over the parent DAG.
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, size_t>> stack;
  stack.emplace_back(tail.get(), 0);
  seen.insert(tail.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node<T>* p = node->parents[next++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  tail->g().assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* n = *it;
    if (n->back && n->requires_grad) n->back(*n);
  }
}

#define DYREP_INSTANTIATE_AD(T)                                                              \
  template Value<T> make_input<T>(Tensor<T>);                                                \
  template Value<T> make_param<T>(Tensor<T>&, bool);                                         \
  template Value<T> conv2d<T>(const Value<T>&, Value<T>, Value<T>, int, int, int);           \
  template Value<T> conv2d_op<T>(const Value<T>&, ConvParams<T>&, bool);                     \
  template Value<T> batchnorm_op<T>(const Value<T>&, BnParams<T>&, BnMode, bool);            \
  template Value<T> avgpool2d_op<T>(const Value<T>&, const AvgPoolSpec&);                    \
  template Value<T> pad2d_op<T>(const Value<T>&, int, int);                                  \
  template Value<T> crop2d_op<T>(const Value<T>&, int, int);                                 \
  template Value<T> relu_op<T>(const Value<T>&);                                             \
  template Value<T> add_op<T>(const Value<T>&, const Value<T>&);                             \
  template Value<T> global_avgpool_op<T>(const Value<T>&);                                   \
  template Value<T> dense_op<T>(const Value<T>&, DenseParams<T>&, bool);                     \
  template Value<T> softmax_ce_op<T>(const Value<T>&, std::vector<int>);                     \
  template Value<T> sum_op<T>(const Value<T>&);                                              \
  template void backward<T>(const Value<T>&);

DYREP_INSTANTIATE_AD(float)
DYREP_INSTANTIATE_AD(double)

#undef DYREP_INSTANTIATE_AD

}  // namespace dyrep
