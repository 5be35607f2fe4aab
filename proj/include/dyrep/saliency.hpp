#pragma once

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dyrep/block.hpp"
#include "dyrep/rng.hpp"
#include "dyrep/tensor.hpp"

namespace dyrep {

enum class Metric { Random, GradNorm, Snip, Grasp, Synflow, Vote };

constexpr Metric kBaseMetrics[] = {Metric::Random, Metric::GradNorm, Metric::Snip, Metric::Grasp,
                                   Metric::Synflow};
constexpr size_t kNumBaseMetrics = 5;

const char* metric_name(Metric m);
Metric metric_from_name(const std::string& name);
size_t metric_slot(Metric m);

// Per-parameter saliency summed over one operation's parameter tensors.
// Gradients must be populated (a tensor without a grad buffer is rejected).
template <typename T>
double score_synflow(const std::vector<const Tensor<T>*>& params, bool absolute = false);
template <typename T>
double score_snip(const std::vector<const Tensor<T>*>& params);
template <typename T>
double score_grad_norm(const std::vector<const Tensor<T>*>& params);
// hvp holds (H g) for the same tensors, flattened per tensor.
template <typename T>
double score_grasp(const std::vector<const Tensor<T>*>& params,
                   const std::vector<std::vector<double>>& hvp);

// Reproducible uniform draw on [0,1): independent stream per op id.
double score_random(const SplitRng& base, const std::string& op_id);

// Central-difference Hessian-vector product of a gradient oracle:
// Hg ~= [grad(theta + eps g) - grad(theta - eps g)] / (2 eps),
// eps = 1e-3 * ||theta|| / ||g||. Returns false when ||g|| == 0.
bool central_hvp(
    const std::function<void(const std::vector<double>&, std::vector<double>&)>& grad_fn,
    const std::vector<double>& theta, const std::vector<double>& g, std::vector<double>& hg);

// Accumulated per-operation scores over one update interval. For Vote, all
// five base metrics accumulate side by side.
class SaliencyLedger {
 public:
  explicit SaliencyLedger(Metric metric = Metric::Synflow) : metric_(metric) {}

  Metric metric() const { return metric_; }
  bool tracks(Metric m) const;
  int iterations() const { return iters_; }

  // Guarantees every enumerated target has an entry (zero-initialized).
  void ensure_targets(const std::vector<RepTarget>& targets);
  void add(const std::string& id, Metric m, double value);
  void finish_iteration() { ++iters_; }

  // Sum / iteration count for one metric.
  std::map<std::string, double> averaged(Metric m) const;

  // Argmax per Algorithm 1: ties break to the lowest id; Vote takes the id
  // with the most per-metric nominations. Empty ledger -> nullopt.
  std::optional<std::string> select_target() const;

  struct Row {
    std::string id;
    Metric metric;
    double score;
  };
  std::vector<Row> rows() const;

  void reset();

  const std::map<std::string, std::array<double, kNumBaseMetrics>>& sums() const { return sums_; }
  void restore(std::map<std::string, std::array<double, kNumBaseMetrics>> sums, int iters);

 private:
  Metric metric_;
  int iters_ = 0;
  std::map<std::string, std::array<double, kNumBaseMetrics>> sums_;
};

}  // namespace dyrep
