#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "dyrep/autodiff.hpp"
#include "test_util.hpp"

using namespace dyrep;
using namespace dyrep::test;

TEST_CASE("loss = sum(input) gives an all-ones input gradient") {
  SplitRng rng(5);
  Tensor<double> x = random_tensor<double>({2, 3, 4, 4}, rng);
  x.alloc_grad();
  Value<double> xv = make_param(x);
  backward(sum_op(xv));
  for (double g : x.grad) CHECK(g == 1.0);
}

TEST_CASE("a parameter disconnected from the loss gets exactly zero gradient") {
  SplitRng rng(7);
  Tensor<double> x = random_tensor<double>({1, 2, 5, 5}, rng);
  ConvParams<double> used = make_conv<double>(2, 2, 3, 3, 1, 1, 1);
  ConvParams<double> unused = make_conv<double>(2, 2, 3, 3, 1, 1, 1);
  rng.fill_normal(used.weight.data, 1.0);
  rng.fill_normal(unused.weight.data, 1.0);
  used.weight.alloc_grad();
  unused.weight.alloc_grad();

  Value<double> out = conv2d_op(make_input(x), used, true);
  (void)make_param(unused.weight);  // wrapped but never used in the graph
  backward(sum_op(out));
  double used_norm = 0.0;
  for (double g : used.weight.grad) used_norm += std::abs(g);
  CHECK(used_norm > 0.0);
  for (double g : unused.weight.grad) CHECK(g == 0.0);
}

TEST_CASE("backward twice without a new forward is rejected") {
  SplitRng rng(9);
  Tensor<double> x = random_tensor<double>({1, 1, 3, 3}, rng);
  x.alloc_grad();
  Value<double> loss = sum_op(make_param(x));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), std::invalid_argument);
}

TEST_CASE("fan-out accumulates additively") {
  SplitRng rng(11);
  Tensor<double> x = random_tensor<double>({1, 2, 4, 4}, rng);
  x.alloc_grad();
  Value<double> xv = make_param(x);
  // y = x + x => dL/dx = 2 for L = sum(y)
  backward(sum_op(add_op(xv, xv)));
  for (double g : x.grad) CHECK(g == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("3-layer conv-BN-ReLU network passes a full finite-difference check") {
  SplitRng rng(13);
  const int widths[4] = {3, 4, 5, 6};
  Tensor<double> x = random_tensor<double>({2, 3, 7, 7}, rng);
  std::vector<int> labels{1, 3};

  std::vector<ConvParams<double>> convs;
  std::vector<BnParams<double>> bns;
  for (int l = 0; l < 3; ++l) {
    ConvParams<double> c = make_conv<double>(widths[l + 1], widths[l], 3, 3, 1, 1, 1);
    rng.fill_normal(c.weight.data, std::sqrt(2.0 / (widths[l] * 9.0)));
    convs.push_back(std::move(c));
    BnParams<double> bn = make_bn<double>(widths[l + 1]);
    rng.fill_uniform(bn.gamma.data, 0.6, 1.4);
    rng.fill_normal(bn.beta.data, 0.1);
    bns.push_back(std::move(bn));
  }
  DenseParams<double> head = make_dense<double>(4, widths[3]);
  rng.fill_normal(head.weight.data, 0.4);
  rng.fill_normal(head.bias.data, 0.1);

  // Train-mode BN normalizes by batch statistics, so the repeated forward
  // passes of the finite-difference probe leave the loss unaffected by the
  // running-stat updates they cause.
  auto forward = [&](bool track) {
    Value<double> h = make_input(x);
    for (int l = 0; l < 3; ++l) {
      h = conv2d_op(h, convs[static_cast<size_t>(l)], track);
      h = batchnorm_op(h, bns[static_cast<size_t>(l)], BnMode::Train, track);
      h = relu_op(h);
    }
    h = global_avgpool_op(h);
    h = dense_op(h, head, track);
    return softmax_ce_op(h, labels);
  };

  Value<double> loss = forward(true);
  backward(loss);

  auto loss_fn = [&] { return forward(false).tensor().data[0]; };
  for (int l = 0; l < 3; ++l) {
    CHECK(fd_check_tensor(convs[static_cast<size_t>(l)].weight,
                          convs[static_cast<size_t>(l)].weight.grad, loss_fn) <= 1e-5);
    CHECK(fd_check_tensor(bns[static_cast<size_t>(l)].gamma,
                          bns[static_cast<size_t>(l)].gamma.grad, loss_fn) <= 1e-5);
    CHECK(fd_check_tensor(bns[static_cast<size_t>(l)].beta, bns[static_cast<size_t>(l)].beta.grad,
                          loss_fn) <= 1e-5);
  }
  CHECK(fd_check_tensor(head.weight, head.weight.grad, loss_fn) <= 1e-5);
  CHECK(fd_check_tensor(head.bias, head.bias.grad, loss_fn) <= 1e-5);
}

TEST_CASE("residual wiring (add of two paths) gets correct gradients") {
  SplitRng rng(15);
  Tensor<double> x = random_tensor<double>({2, 3, 5, 5}, rng);
  ConvParams<double> c = make_conv<double>(3, 3, 3, 3, 1, 1, 1);
  rng.fill_normal(c.weight.data, 0.5);

  auto forward = [&](bool track) {
    Value<double> in = make_input(x);
    Value<double> y = relu_op(add_op(conv2d_op(in, c, track), in));
    return sum_op(y);
  };
  Value<double> loss = forward(true);
  backward(loss);
  CHECK(fd_check_tensor(c.weight, c.weight.grad, [&] { return forward(false).tensor().data[0]; }) <=
        1e-5);
}

TEST_CASE("grad buffers accumulate across two forward passes") {
  SplitRng rng(21);
  Tensor<double> x = random_tensor<double>({1, 2, 4, 4}, rng);
  ConvParams<double> c = make_conv<double>(2, 2, 3, 3, 1, 1, 1);
  rng.fill_normal(c.weight.data, 0.5);

  backward(sum_op(conv2d_op(make_input(x), c, true)));
  std::vector<double> once = c.weight.grad;
  backward(sum_op(conv2d_op(make_input(x), c, true)));
  for (size_t i = 0; i < once.size(); ++i)
    CHECK(c.weight.grad[i] == doctest::Approx(2.0 * once[i]).epsilon(1e-12));
}
