#pragma once

#include <functional>
#include <optional>

#include "dyrep/model.hpp"
#include "dyrep/rep_algebra.hpp"

namespace dyrep {

struct GrowConfig {
  double gamma_init = 0.01;
  int calib_batches = 20;
  std::vector<BranchKind> branch_kinds{std::begin(kAllBranchKinds), std::end(kAllBranchKinds)};
  int max_rep_depth = 2;

  void validate() const {
    require(gamma_init > 0.0, "grow.gamma_init must be positive");
    require(calib_batches >= 1, "grow.calib_batches must be >= 1");
    require(max_rep_depth >= 1, "grow.max_rep_depth must be >= 1");
    require(!branch_kinds.empty(), "grow.branch_kinds must not be empty");
  }
};

struct DepConfig {
  double lambda = 0.02;

  void validate() const { require(lambda > 0.0, "dep.lambda must be positive"); }
};

// Yields the next calibration batch, or nullopt when exhausted.
template <typename T>
using BatchSource = std::function<std::optional<Tensor<T>>()>;

struct ExpandInfo {
  std::string id;
  std::vector<std::string> kinds;
};

// Training-aware re-parameterization: expands the target conv into a DyRep
// block (branches initialized with gamma_init BNs), calibrates the fresh BN
// statistics on calib_batches forward passes, then edits the original weights
// so the eval-mode network function is unchanged. Throws without modifying
// the model when the target is invalid, the depth cap is reached, or the
// calibration stream runs dry.
template <typename T>
ExpandInfo expand(Model<T>& model, const std::string& target_id, const GrowConfig& cfg,
                  const BatchSource<T>& calib, const SplitRng& rng);

// Builds one fresh branch for a conv site configuration (used by expand and
// by the checkpoint loader to rebuild structure skeletons).
template <typename T>
Branch<T> make_branch(BranchKind kind, int in_c, int out_c, int k, int stride, int pad,
                      double gamma_init, const SplitRng* init_rng);

// Mean absolute gamma of the branch's last BN (s_j).
template <typename T>
double branch_importance(const Branch<T>& branch);

// The de-parameterization rule: cut every branch with s_j below the mean once
// the population std of {s_j} exceeds lambda. The original path is never a
// candidate; blocks with fewer than two branches are left alone.
template <typename T>
std::vector<size_t> dep_select(const DyRepBlock<T>& block, const DepConfig& cfg);

// Removes one branch, absorbing its collapsed conv into the original weights
// so the eval-mode function is preserved.
template <typename T>
void remove_branch(DyRepBlock<T>& block, size_t index);

// Collapses every branch of every block back into the original convs
// (Algorithm 1's final deployment step).
template <typename T>
void deploy(Model<T>& model);

}  // namespace dyrep
