#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "dyrep/grow_prune.hpp"
#include "dyrep/model.hpp"
#include "dyrep/rep_algebra.hpp"
#include "test_util.hpp"

using namespace dyrep;
using namespace dyrep::test;

namespace {

void randomize_branch(Branch<double>& br, SplitRng& rng) {
  for (auto& stage : br.stages) {
    if (stage.kind == StageKind::Conv) rng.fill_normal(stage.conv.weight.data, 0.6);
    if (stage.bn) {
      rng.fill_uniform(stage.bn->gamma.data, -1.0, 1.0);
      rng.fill_normal(stage.bn->beta.data, 0.5);
      rng.fill_normal(stage.bn->running_mean.data, 0.5);
      rng.fill_uniform(stage.bn->running_var.data, 0.4, 2.0);
    }
  }
  br.calibrating = false;
}

DyRepBlock<double> random_block(SplitRng& rng, bool with_bn, int branches) {
  DyRepBlock<double> b;
  b.id = "blk";
  b.depth = 1;
  b.conv = make_conv<double>(4, 4, 3, 3, 1, 1, 1, !with_bn);
  rng.fill_normal(b.conv.weight.data, 0.5);
  if (!with_bn) rng.fill_normal(b.conv.bias.data, 0.5);
  if (with_bn) {
    b.bn = make_bn<double>(4);
    rng.fill_uniform(b.bn->gamma.data, 0.5, 1.5);
    rng.fill_normal(b.bn->beta.data, 0.3);
    rng.fill_normal(b.bn->running_mean.data, 0.3);
    rng.fill_uniform(b.bn->running_var.data, 0.5, 2.0);
  }
  int i = 0;
  for (BranchKind kind : kAllBranchKinds) {
    if (i++ >= branches) break;
    Branch<double> br = make_branch<double>(kind, 4, 4, 3, 1, 1, 0.01, nullptr);
    randomize_branch(br, rng);
    b.branches.push_back(std::move(br));
  }
  return b;
}

}  // namespace

TEST_CASE("block with zero branches behaves exactly like its conv") {
  SplitRng rng(201);
  DyRepBlock<double> b = random_block(rng, false, 0);
  Tensor<double> x = random_tensor<double>({2, 4, 6, 6}, rng);
  Tensor<double> got = block_forward(b, make_input(x), RunMode::Eval).tensor();
  CHECK(max_abs_diff(got, conv2d_forward(x, b.conv)) == 0.0);
}

TEST_CASE("a gamma=0 beta=0 branch is silent") {
  SplitRng rng(203);
  DyRepBlock<double> b = random_block(rng, false, 1);
  auto& bn = *b.branches[0].stages.back().bn;
  bn.gamma.data.assign(bn.gamma.data.size(), 0.0);
  bn.beta.data.assign(bn.beta.data.size(), 0.0);
  Tensor<double> x = random_tensor<double>({2, 4, 6, 6}, rng);
  Tensor<double> got = block_forward(b, make_input(x), RunMode::Eval).tensor();
  CHECK(max_abs_diff(got, conv2d_forward(x, b.conv)) <= 1e-15);
}

TEST_CASE("7-branch block in eval mode equals its collapsed conv") {
  SplitRng rng(207);
  for (bool with_bn : {false, true}) {
    DyRepBlock<double> b = random_block(rng, with_bn, 7);
    ConvParams<double> c = collapse_block(b);
    for (int r = 0; r < 3; ++r) {
      Tensor<double> x = random_tensor<double>({2, 4, 7, 7}, rng);
      Tensor<double> got = block_forward(b, make_input(x), RunMode::Eval).tensor();
      CHECK(max_abs_diff(got, conv2d_forward(x, c)) <= 1e-9);
    }
  }
}

TEST_CASE("train mode differs from eval only through BN statistics") {
  SplitRng rng(209);
  DyRepBlock<double> b = random_block(rng, true, 3);
  Tensor<double> x = random_tensor<double>({4, 4, 6, 6}, rng);

  // Run train once to capture batch statistics, then copy them into the
  // running buffers: eval must now reproduce the train output.
  DyRepBlock<double> b2 = clone_block(b);
  Tensor<double> train_out = block_forward(b2, make_input(x), RunMode::Train).tensor();

  auto set_stats = [&](BnParams<double>& bn, const Tensor<double>& input) {
    BnForward<double> f = batchnorm_forward(input, bn, BnMode::Train);
    for (int c = 0; c < bn.channels(); ++c) {
      bn.running_mean.data[c] = f.mean[static_cast<size_t>(c)];
      bn.running_var.data[c] = f.var[static_cast<size_t>(c)];
    }
  };
  // Original path.
  set_stats(*b.bn, conv2d_forward(x, b.conv));
  // Branches (single-stage ones here; recompute their pre-BN activations).
  for (auto& br : b.branches) {
    Tensor<double> h = x;
    if (br.pre_pad) h = pad2d_forward(h, br.pre_pad, br.pre_pad);
    if (br.pre_crop_h || br.pre_crop_w) h = crop2d_forward(h, br.pre_crop_h, br.pre_crop_w);
    for (auto& stage : br.stages) {
      if (stage.kind == StageKind::Conv) h = conv2d_forward(h, stage.conv);
      if (stage.kind == StageKind::AvgPool) h = avgpool2d_forward(h, stage.pool);
      set_stats(*stage.bn, h);
      h = batchnorm_forward(h, *stage.bn, BnMode::Eval).out;
    }
  }
  Tensor<double> eval_out = block_forward(b, make_input(x), RunMode::Eval).tensor();
  CHECK(max_abs_diff(eval_out, train_out) <= 1e-9);
}

TEST_CASE("block parameter count equals original params plus branch params") {
  SplitRng rng(211);
  DyRepBlock<double> b = random_block(rng, true, 7);
  // Independent counter, written out by hand from the construction rules.
  int64_t expect = 4 * 4 * 3 * 3 + 2 * 4;  // original conv + bn gamma/beta
  for (const auto& br : b.branches) {
    for (const auto& stage : br.stages) {
      if (stage.kind == StageKind::Conv) expect += stage.conv.weight.numel();
      if (stage.bn) expect += 2 * 4;
    }
  }
  CHECK(block_param_count(b) == expect);
}

TEST_CASE("enumerate_rep_targets") {
  SplitRng rng(213);
  ModelSpec spec;
  spec.family = "vgg_like";
  spec.widths = {4, 6};
  spec.blocks = {2, 1};
  spec.input_shape = {3, 8, 8};
  Model<double> m = build_model<double>(spec, SplitRng(1));

  SUBCASE("plain model lists every 3x3 conv site") {
    auto targets = m.rep_targets(2);
    REQUIRE(targets.size() == 3);
    CHECK(targets[0].id == "features.0");
    CHECK(targets[1].id == "features.1");
    CHECK(targets[2].id == "features.2");
    for (const auto& t : targets) CHECK(t.kind == "conv");
  }

  SUBCASE("after one expansion the expanded site is replaced by its in-branch convs") {
    DyRepBlock<double>* site = m.find_block("features.1");
    REQUIRE(site != nullptr);
    for (BranchKind kind : kAllBranchKinds) {
      Branch<double> br = make_branch<double>(kind, 4, 4, 3, 1, 1, 0.01, nullptr);
      randomize_branch(br, rng);
      site->branches.push_back(std::move(br));
    }
    auto targets = m.rep_targets(2);
    std::vector<std::string> ids;
    for (const auto& t : targets) ids.push_back(t.id);
    // site 1 is gone; its square K>1 branch convs joined.
    CHECK(std::find(ids.begin(), ids.end(), "features.1") == ids.end());
    CHECK(std::count(ids.begin(), ids.end(), "features.0") == 1);
    CHECK(std::count(ids.begin(), ids.end(), "features.2") == 1);
    CHECK(std::count(ids.begin(), ids.end(), "features.1/kxk.s0") == 1);
    CHECK(std::count(ids.begin(), ids.end(), "features.1/1x1_kxk.s1") == 1);
    // 1xK / Kx1 / 1x1 convs are not square K>1 targets.
    CHECK(ids.size() == 4);

    SUBCASE("at the depth cap only unexpanded sites remain") {
      auto capped = m.rep_targets(1);
      std::vector<std::string> cids;
      for (const auto& t : capped) cids.push_back(t.id);
      CHECK(cids == std::vector<std::string>({"features.0", "features.2"}));
    }
  }
}

TEST_CASE("block forward rejects branch shape drift") {
  SplitRng rng(217);
  DyRepBlock<double> b = random_block(rng, false, 1);
  // Sabotage: make the branch produce a different spatial size.
  b.branches[0].stages[0].conv.stride = 2;
  Tensor<double> x = random_tensor<double>({1, 4, 6, 6}, rng);
  CHECK_THROWS_AS(block_forward(b, make_input(x), RunMode::Eval), std::invalid_argument);
}
