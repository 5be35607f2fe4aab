#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>

#include "doctest.h"
#include "dyrep/saliency.hpp"
#include "test_util.hpp"

using namespace dyrep;
using namespace dyrep::test;

namespace {

Tensor<double> with_grad(std::vector<double> vals, std::vector<double> grads) {
  Tensor<double> t({static_cast<int64_t>(vals.size())});
  t.data = std::move(vals);
  t.grad = std::move(grads);
  return t;
}

}  // namespace

TEST_CASE("synflow, snip and grad_norm formulas") {
  Tensor<double> t = with_grad({2.0, -1.0}, {0.5, 3.0});
  std::vector<const Tensor<double>*> params{&t};

  CHECK(score_synflow(params) == doctest::Approx(-2.0));    // 0.5*2 + 3*(-1)
  CHECK(score_synflow(params, true) == doctest::Approx(4.0));
  CHECK(score_snip(params) == doctest::Approx(4.0));        // |1| + |-3|
  Tensor<double> g34 = with_grad({1.0, 1.0}, {3.0, 4.0});
  std::vector<const Tensor<double>*> p2{&g34};
  CHECK(score_grad_norm(p2) == doctest::Approx(5.0));

  SUBCASE("zero gradients give zero synflow/snip/grad_norm") {
    Tensor<double> z = with_grad({1.0, 2.0, 3.0}, {0.0, 0.0, 0.0});
    std::vector<const Tensor<double>*> pz{&z};
    CHECK(score_synflow(pz) == 0.0);
    CHECK(score_snip(pz) == 0.0);
    CHECK(score_grad_norm(pz) == 0.0);
  }

  SUBCASE("all-zero parameters give zero synflow and snip") {
    Tensor<double> z = with_grad({0.0, 0.0}, {1.5, -2.5});
    std::vector<const Tensor<double>*> pz{&z};
    CHECK(score_synflow(pz) == 0.0);
    CHECK(score_snip(pz) == 0.0);
    CHECK(score_grad_norm(pz) == doctest::Approx(std::sqrt(1.5 * 1.5 + 2.5 * 2.5)));
  }

  SUBCASE("missing gradient is rejected") {
    Tensor<double> no_grad({2});
    std::vector<const Tensor<double>*> pn{&no_grad};
    CHECK_THROWS_AS(score_synflow(pn), std::invalid_argument);
  }

  SUBCASE("conv-sized tensor matches an independent elementwise recomputation") {
    SplitRng rng(5);
    Tensor<double> w({4, 3, 3, 3});
    rng.fill_normal(w.data, 1.0);
    w.alloc_grad();
    rng.fill_normal(w.grad, 1.0);
    double synflow = 0.0, snip = 0.0, sq = 0.0;
    for (size_t i = 0; i < w.data.size(); ++i) {
      synflow += w.grad[i] * w.data[i];
      snip += std::abs(w.grad[i] * w.data[i]);
      sq += w.grad[i] * w.grad[i];
    }
    std::vector<const Tensor<double>*> pw{&w};
    CHECK(score_synflow(pw) == synflow);
    CHECK(score_snip(pw) == snip);
    CHECK(score_grad_norm(pw) == std::sqrt(sq));
  }
}

TEST_CASE("grasp against the analytic quadratic oracle") {
  // L = 0.5 theta^T A theta with symmetric A: grad = A theta, H = A,
  // Hg = A A theta. The finite-difference HVP of a quadratic is exact up to
  // roundoff.
  SplitRng rng(7);
  const int n = 6;
  std::vector<double> a(static_cast<size_t>(n * n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) {
      const double v = rng.normal();
      a[static_cast<size_t>(i * n + j)] = v;
      a[static_cast<size_t>(j * n + i)] = v;
    }
  auto matvec = [&](const std::vector<double>& x) {
    std::vector<double> y(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        y[static_cast<size_t>(i)] += a[static_cast<size_t>(i * n + j)] * x[static_cast<size_t>(j)];
    return y;
  };

  std::vector<double> theta(static_cast<size_t>(n));
  for (auto& v : theta) v = rng.normal();
  std::vector<double> g = matvec(theta);

  std::vector<double> hg;
  REQUIRE(central_hvp([&](const std::vector<double>& th,
                          std::vector<double>& out) { out = matvec(th); },
                      theta, g, hg));
  std::vector<double> want = matvec(g);  // A (A theta)
  for (int i = 0; i < n; ++i)
    CHECK(rel_err(hg[static_cast<size_t>(i)], want[static_cast<size_t>(i)]) <= 1e-8);

  Tensor<double> t({n});
  t.data = theta;
  t.grad = g;
  std::vector<const Tensor<double>*> params{&t};
  double want_score = 0.0;
  for (int i = 0; i < n; ++i) want_score += -want[static_cast<size_t>(i)] * theta[static_cast<size_t>(i)];
  const double got = score_grasp(params, {hg});
  CHECK(rel_err(got, want_score) <= 1e-8);

  SUBCASE("sign flip of theta flips the score sign (score is linear in theta)") {
    Tensor<double> t2 = t;
    for (auto& v : t2.data) v = -v;
    std::vector<const Tensor<double>*> p2{&t2};
    CHECK(rel_err(score_grasp(p2, {hg}), -got) <= 1e-8);
  }

  SUBCASE("all-zero Hg gives zero score") {
    std::vector<double> zeros(static_cast<size_t>(n), 0.0);
    CHECK(score_grasp(params, {zeros}) == 0.0);
  }

  SUBCASE("zero gradient makes the HVP unavailable") {
    std::vector<double> zero_g(static_cast<size_t>(n), 0.0), out;
    CHECK_FALSE(central_hvp([&](const std::vector<double>& th,
                                std::vector<double>& o) { o = matvec(th); },
                            theta, zero_g, out));
  }
}

TEST_CASE("score_random is reproducible with independent per-id streams") {
  SplitRng base = SplitRng(42).split("rand");
  CHECK(score_random(base, "op.a") == score_random(base, "op.a"));
  CHECK(score_random(base, "op.a") != score_random(base, "op.b"));
  CHECK(score_random(SplitRng(43).split("rand"), "op.a") != score_random(base, "op.a"));

  SUBCASE("draws are uniform on [0,1) by Kolmogorov-Smirnov") {
    const int n = 10000;
    std::vector<double> draws;
    draws.reserve(n);
    for (int i = 0; i < n; ++i)
      draws.push_back(score_random(SplitRng(42).split("rand").split(static_cast<uint64_t>(i)),
                                   "op.a"));
    std::sort(draws.begin(), draws.end());
    double d = 0.0;
    for (int i = 0; i < n; ++i) {
      const double f = draws[static_cast<size_t>(i)];
      d = std::max(d, std::abs(f - static_cast<double>(i) / n));
      d = std::max(d, std::abs(static_cast<double>(i + 1) / n - f));
    }
    // K-S critical value at alpha = 0.01 for n = 1e4.
    CHECK(d <= 1.63 / std::sqrt(static_cast<double>(n)));
  }
}

TEST_CASE("ledger averaging and target selection") {
  SaliencyLedger ledger(Metric::Synflow);
  ledger.ensure_targets({{"a", "conv", 3}, {"b", "conv", 3}, {"c", "conv", 3}});
  ledger.add("a", Metric::Synflow, 1.0);
  ledger.add("b", Metric::Synflow, 3.0);
  ledger.add("c", Metric::Synflow, 0.0);
  ledger.finish_iteration();
  ledger.add("a", Metric::Synflow, 1.0);
  ledger.add("b", Metric::Synflow, 1.0);
  ledger.add("c", Metric::Synflow, 1.0);
  ledger.finish_iteration();

  auto avg = ledger.averaged(Metric::Synflow);
  CHECK(avg["a"] == doctest::Approx(1.0));
  CHECK(avg["b"] == doctest::Approx(2.0));
  CHECK(avg["c"] == doctest::Approx(0.5));
  CHECK(ledger.select_target() == std::string("b"));

  SUBCASE("argmax is invariant to shifting and positive scaling") {
    SaliencyLedger shifted(Metric::Synflow);
    shifted.ensure_targets({{"a", "conv", 3}, {"b", "conv", 3}, {"c", "conv", 3}});
    for (const auto& [id, v] : avg) shifted.add(id, Metric::Synflow, 5.0 + 3.0 * v);
    shifted.finish_iteration();
    CHECK(shifted.select_target() == ledger.select_target());
  }

  SUBCASE("ties break to the lowest id deterministically") {
    SaliencyLedger tie(Metric::Synflow);
    tie.add("z", Metric::Synflow, 2.0);
    tie.add("m", Metric::Synflow, 2.0);
    tie.add("q", Metric::Synflow, 2.0);
    tie.finish_iteration();
    CHECK(tie.select_target() == std::string("m"));
  }

  SUBCASE("single target selects itself; empty ledger selects nothing") {
    SaliencyLedger one(Metric::Synflow);
    one.add("only", Metric::Synflow, -3.0);
    one.finish_iteration();
    CHECK(one.select_target() == std::string("only"));
    SaliencyLedger empty(Metric::Synflow);
    CHECK_FALSE(empty.select_target().has_value());
  }

  SUBCASE("averaging before any iteration is rejected") {
    SaliencyLedger fresh(Metric::Synflow);
    fresh.add("a", Metric::Synflow, 1.0);
    CHECK_THROWS_AS(fresh.averaged(Metric::Synflow), std::invalid_argument);
  }
}

TEST_CASE("vote nominates per-metric argmaxes and picks the most nominated id") {
  SaliencyLedger ledger(Metric::Vote);
  CHECK(ledger.tracks(Metric::Synflow));
  CHECK(ledger.tracks(Metric::Random));
  // random -> a, grad_norm -> b, snip -> a, grasp -> c, synflow -> a.
  ledger.add("a", Metric::Random, 1.0);
  ledger.add("b", Metric::Random, 0.0);
  ledger.add("c", Metric::Random, 0.0);
  ledger.add("a", Metric::GradNorm, 0.0);
  ledger.add("b", Metric::GradNorm, 1.0);
  ledger.add("c", Metric::GradNorm, 0.0);
  ledger.add("a", Metric::Snip, 1.0);
  ledger.add("b", Metric::Snip, 0.0);
  ledger.add("c", Metric::Snip, 0.0);
  ledger.add("a", Metric::Grasp, 0.0);
  ledger.add("b", Metric::Grasp, 0.0);
  ledger.add("c", Metric::Grasp, 1.0);
  ledger.add("a", Metric::Synflow, 1.0);
  ledger.add("b", Metric::Synflow, 0.0);
  ledger.add("c", Metric::Synflow, 0.0);
  ledger.finish_iteration();
  CHECK(ledger.select_target() == std::string("a"));

  SUBCASE("rows cover all five base metrics") {
    auto rows = ledger.rows();
    CHECK(rows.size() == 15);
  }
}
