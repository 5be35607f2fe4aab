#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "dyrep/trainer.hpp"
#include "test_util.hpp"

using namespace dyrep;
using namespace dyrep::test;

namespace {

ModelSpec tiny_spec(int classes = 4) {
  ModelSpec spec;
  spec.family = "vgg_like";
  spec.widths = {4, 6};
  spec.blocks = {1, 1};
  spec.num_classes = classes;
  spec.input_shape = {3, 8, 8};
  return spec;
}

TrainConfig tiny_cfg() {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.update_interval = 100;
  cfg.rep_enabled = false;
  cfg.augment = false;
  cfg.batch_size = 8;
  cfg.eval_batch_size = 16;
  cfg.lr = 0.1;
  cfg.seed = 5;
  cfg.precision = "double";
  cfg.grow.calib_batches = 3;
  return cfg;
}

template <typename T>
std::map<std::string, std::vector<T>> snapshot_params(Model<T>& m) {
  std::map<std::string, std::vector<T>> out;
  m.visit_params(TensorVisitor<T>(
      [&](const std::string& name, Tensor<T>& t) { out[name] = t.data; }));
  return out;
}

}  // namespace

TEST_CASE("sgd_step") {
  SUBCASE("zero gradient and zero weight decay leave parameters unchanged") {
    Tensor<double> p({3});
    p.data = {1.0, -2.0, 3.0};
    p.alloc_grad();
    Sgd<double> opt;
    opt.momentum = 0.9;
    opt.weight_decay = 0.0;
    std::vector<ParamRef<double>> reg{{"p", &p}};
    opt.step(reg, 0.1);
    CHECK(p.data == std::vector<double>({1.0, -2.0, 3.0}));
  }

  SUBCASE("one step from zero velocity: theta' = theta - lr (g + wd theta)") {
    Tensor<double> p({2});
    p.data = {1.0, -2.0};
    p.alloc_grad();
    p.grad = {0.5, 0.25};
    Sgd<double> opt;
    opt.momentum = 0.9;
    opt.weight_decay = 0.01;
    std::vector<ParamRef<double>> reg{{"p", &p}};
    opt.step(reg, 0.1);
    CHECK(p.data[0] == doctest::Approx(1.0 - 0.1 * (0.5 + 0.01 * 1.0)).epsilon(1e-15));
    CHECK(p.data[1] == doctest::Approx(-2.0 - 0.1 * (0.25 + 0.01 * -2.0)).epsilon(1e-15));
  }

  SUBCASE("three steps match the hand-computed momentum recurrence") {
    Tensor<double> p({1});
    p.data = {0.7};
    p.alloc_grad();
    Sgd<double> opt;
    opt.momentum = 0.9;
    opt.weight_decay = 0.05;
    std::vector<ParamRef<double>> reg{{"p", &p}};
    const double grads[3] = {0.3, -0.1, 0.2};
    double theta = 0.7, v = 0.0;
    for (int i = 0; i < 3; ++i) {
      p.grad[0] = grads[i];
      opt.step(reg, 0.2);
      v = 0.9 * v + (grads[i] + 0.05 * theta);
      theta = theta - 0.2 * v;
      CHECK(std::abs(p.data[0] - theta) <= 1e-12);
    }
  }
}

TEST_CASE("cosine_lr") {
  CHECK(cosine_lr(0, 40, 0.1) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(cosine_lr(40, 40, 0.1) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(cosine_lr(20, 40, 0.1) == doctest::Approx(0.05).epsilon(1e-12));
}

TEST_CASE("evaluate") {
  Dataset<double> ds = synthetic_dataset<double>(3, 20, 4, {3, 8, 8}, 1.0);
  Model<double> m = build_model<double>(tiny_spec(), SplitRng(7));

  SUBCASE("same model and data give identical results twice") {
    EvalResult<double> a = evaluate(m, ds, 8);
    EvalResult<double> b = evaluate(m, ds, 8);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.mean_loss == b.mean_loss);
    CHECK(a.predictions == b.predictions);
  }

  SUBCASE("batch size does not change the result") {
    EvalResult<double> a = evaluate(m, ds, 3);
    EvalResult<double> b = evaluate(m, ds, 20);
    CHECK(a.accuracy == b.accuracy);
    CHECK(std::abs(a.mean_loss - b.mean_loss) <= 1e-12);
  }

  SUBCASE("uniform logits predict class 0, hitting the balanced base rate") {
    // Zero head weights and bias give identical logits; argmax picks index 0.
    for (auto& v : m.head.weight.data) v = 0.0;
    for (auto& v : m.head.bias.data) v = 0.0;
    Dataset<double> big = synthetic_dataset<double>(5, 400, 4, {3, 8, 8}, 1.0);
    EvalResult<double> r = evaluate(m, big, 64);
    for (int pred : r.predictions) CHECK(pred == 0);
    CHECK(r.accuracy == doctest::Approx(0.25).epsilon(0.01));  // balanced classes
  }

  SUBCASE("single correct sample gives accuracy 1") {
    Dataset<double> one = synthetic_dataset<double>(3, 1, 4, {3, 8, 8}, 1.0);
    EvalResult<double> r = evaluate(m, one, 1);
    one.labels[0] = r.predictions[0];
    EvalResult<double> r2 = evaluate(m, one, 1);
    CHECK(r2.accuracy == 1.0);
  }
}

TEST_CASE("train loop matches an independently written reference loop") {
  Dataset<double> ds = synthetic_dataset<double>(13, 48, 4, {3, 8, 8}, 1.0);
  TrainConfig cfg = tiny_cfg();

  TrainState<double> state;
  state.model = build_model<double>(tiny_spec(), SplitRng(cfg.seed));
  TrainResult got = train(state, ds, ds, cfg);

  // Reference loop: same public pieces, independent bookkeeping.
  Model<double> model = build_model<double>(tiny_spec(), SplitRng(cfg.seed));
  std::map<std::string, std::vector<double>> velocity;
  std::vector<double> ref_losses;
  const int64_t batches = ds.size() / cfg.batch_size;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr =
        cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / cfg.epochs));
    auto perm =
        SplitRng(cfg.seed).split("shuffle").split(static_cast<uint64_t>(epoch)).permutation(
            ds.size());
    for (int64_t it = 0; it < batches; ++it) {
      std::vector<int> labels;
      Tensor<double> batch = gather_batch(
          ds,
          std::span<const int64_t>(perm.data() + it * cfg.batch_size,
                                   static_cast<size_t>(cfg.batch_size)),
          &labels);
      std::vector<std::pair<std::string, Tensor<double>*>> params;
      model.visit_params(TensorVisitor<double>(
          [&](const std::string& n, Tensor<double>& t) { params.emplace_back(n, &t); }));
      for (auto& [n, t] : params) {
        t->alloc_grad();
        t->zero_grad();
      }
      Value<double> loss = softmax_ce_op(model.forward(batch, RunMode::Train), labels);
      ref_losses.push_back(loss.tensor().data[0]);
      backward(loss);
      for (auto& [n, t] : params) {
        auto& v = velocity[n];
        if (v.size() != t->data.size()) v.assign(t->data.size(), 0.0);
        for (size_t i = 0; i < v.size(); ++i) {
          v[i] = cfg.momentum * v[i] + (t->grad[i] + cfg.weight_decay * t->data[i]);
          t->data[i] -= lr * v[i];
        }
      }
    }
  }

  REQUIRE(got.step_losses.size() == ref_losses.size());
  for (size_t i = 0; i < ref_losses.size(); ++i)
    CHECK(std::abs(got.step_losses[i] - ref_losses[i]) <= 1e-10);

  auto a = snapshot_params(state.model);
  auto b = snapshot_params(model);
  for (const auto& [name, va] : a) {
    double worst = 0.0;
    for (size_t i = 0; i < va.size(); ++i) worst = std::max(worst, std::abs(va[i] - b[name][i]));
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("interval counting") {
  Dataset<double> ds = synthetic_dataset<double>(17, 64, 4, {3, 8, 8}, 1.0);

  SUBCASE("t larger than the epoch count never fires") {
    TrainConfig cfg = tiny_cfg();
    cfg.epochs = 3;
    cfg.rep_enabled = true;
    cfg.update_interval = 4;
    TrainState<double> state;
    state.model = build_model<double>(tiny_spec(), SplitRng(cfg.seed));
    state.ledger = SaliencyLedger(cfg.metric);
    TrainResult r = train(state, ds, ds, cfg);
    CHECK(r.events.empty());
    CHECK(r.scores.empty());
  }

  SUBCASE("4 epochs with t=2 raise exactly 2 REP events") {
    TrainConfig cfg = tiny_cfg();
    cfg.epochs = 4;
    cfg.rep_enabled = true;
    cfg.update_interval = 2;
    cfg.grow.calib_batches = 2;
    TrainState<double> state;
    state.model = build_model<double>(tiny_spec(), SplitRng(cfg.seed));
    state.ledger = SaliencyLedger(cfg.metric);
    TrainResult r = train(state, ds, ds, cfg);
    int expands = 0;
    for (const auto& e : r.events)
      if (e.event == "expand") ++expands;
    CHECK(expands == 2);
  }
}

TEST_CASE("with t > E_tr DyRep training is bit-identical to the plain baseline") {
  Dataset<double> ds = synthetic_dataset<double>(19, 48, 4, {3, 8, 8}, 1.0);
  for (Metric metric : {Metric::Synflow, Metric::Grasp}) {
    TrainConfig base_cfg = tiny_cfg();
    base_cfg.epochs = 2;
    base_cfg.augment = true;  // exercise the augmentation stream too
    TrainConfig dyrep_cfg = base_cfg;
    dyrep_cfg.rep_enabled = true;
    dyrep_cfg.update_interval = 99;
    dyrep_cfg.metric = metric;

    TrainState<double> a, b;
    a.model = build_model<double>(tiny_spec(), SplitRng(base_cfg.seed));
    b.model = build_model<double>(tiny_spec(), SplitRng(base_cfg.seed));
    b.ledger = SaliencyLedger(metric);
    TrainResult ra = train(a, ds, ds, base_cfg);
    TrainResult rb = train(b, ds, ds, dyrep_cfg);

    REQUIRE(ra.step_losses.size() == rb.step_losses.size());
    for (size_t i = 0; i < ra.step_losses.size(); ++i)
      CHECK(ra.step_losses[i] == rb.step_losses[i]);  // bitwise

    auto pa = snapshot_params(a.model);
    auto pb = snapshot_params(b.model);
    for (const auto& [name, va] : pa) {
      REQUIRE(pb.count(name) == 1);
      CHECK(va == pb[name]);  // bitwise
    }
  }
}

TEST_CASE("training with structural updates keeps improving and stays functional") {
  Dataset<double> tr = synthetic_dataset<double>(23, 96, 4, {3, 8, 8}, 1.2);
  Dataset<double> te = synthetic_dataset<double>(24, 32, 4, {3, 8, 8}, 1.2);
  TrainConfig cfg = tiny_cfg();
  cfg.epochs = 4;
  cfg.update_interval = 2;
  cfg.rep_enabled = true;
  cfg.batch_size = 16;
  cfg.grow.calib_batches = 2;
  TrainState<double> state;
  state.model = build_model<double>(tiny_spec(), SplitRng(cfg.seed));
  state.ledger = SaliencyLedger(cfg.metric);
  TrainResult r = train(state, tr, te, cfg);
  REQUIRE(r.epochs.size() == 4);
  // Parameter count strictly increases across each expand event.
  CHECK(r.epochs[1].params > r.epochs[0].params);
  CHECK(r.epochs[3].params > r.epochs[2].params);
  // Scores were dumped for both intervals with a chosen target.
  CHECK(!r.scores.empty());
  for (const auto& s : r.scores) CHECK(!s.chosen.empty());
  // FLOPs estimate grows along with the structure.
  CHECK(r.epochs[3].flops > r.epochs[0].flops);
}

TEST_CASE("divergence aborts with a diagnostic save") {
  Dataset<double> ds = synthetic_dataset<double>(29, 32, 4, {3, 8, 8}, 1.0);
  TrainConfig cfg = tiny_cfg();
  cfg.lr = 1e18;  // guarantees a non-finite loss within a few steps
  cfg.epochs = 3;
  TrainState<double> state;
  state.model = build_model<double>(tiny_spec(), SplitRng(cfg.seed));
  bool saved_diverged = false;
  TrainHooks<double> hooks;
  hooks.save = [&](TrainState<double>&, bool diverged) { saved_diverged |= diverged; };
  CHECK_THROWS_WITH_AS(train(state, ds, ds, cfg, &hooks), doctest::Contains("diverged"),
                       std::invalid_argument);
  CHECK(saved_diverged);
}
