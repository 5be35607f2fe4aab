#include "dyrep/saliency.hpp"

#include <algorithm>
#include <cmath>

namespace dyrep {

const char* metric_name(Metric m) {
  switch (m) {
    case Metric::Random: return "random";
    case Metric::GradNorm: return "grad_norm";
    case Metric::Snip: return "snip";
    case Metric::Grasp: return "grasp";
    case Metric::Synflow: return "synflow";
    case Metric::Vote: return "vote";
  }
  return "?";
}

Metric metric_from_name(const std::string& name) {
  for (Metric m : {Metric::Random, Metric::GradNorm, Metric::Snip, Metric::Grasp, Metric::Synflow,
                   Metric::Vote})
    if (name == metric_name(m)) return m;
  fail("unknown scoring metric: " + name);
}

size_t metric_slot(Metric m) {
  switch (m) {
    case Metric::Random: return 0;
    case Metric::GradNorm: return 1;
    case Metric::Snip: return 2;
    case Metric::Grasp: return 3;
    case Metric::Synflow: return 4;
    case Metric::Vote: break;
  }
  fail("vote has no accumulator slot of its own");
}

namespace {

template <typename T>
void require_grads(const std::vector<const Tensor<T>*>& params) {
  for (const auto* t : params)
    require(t->has_grad(), "saliency: parameter tensor of shape " + shape_str(t->shape) +
                               " has no gradient populated");
}

}  // namespace

template <typename T>
double score_synflow(const std::vector<const Tensor<T>*>& params, bool absolute) {
  require_grads(params);
  double acc = 0.0;
  for (const auto* t : params)
    for (size_t i = 0; i < t->data.size(); ++i) {
      const double v = static_cast<double>(t->grad[i]) * static_cast<double>(t->data[i]);
      acc += absolute ? std::abs(v) : v;
    }
  return acc;
}

template <typename T>
double score_snip(const std::vector<const Tensor<T>*>& params) {
  require_grads(params);
  double acc = 0.0;
  for (const auto* t : params)
    for (size_t i = 0; i < t->data.size(); ++i)
      acc += std::abs(static_cast<double>(t->grad[i]) * static_cast<double>(t->data[i]));
  return acc;
}

template <typename T>
double score_grad_norm(const std::vector<const Tensor<T>*>& params) {
  require_grads(params);
  double acc = 0.0;
  for (const auto* t : params)
    for (size_t i = 0; i < t->grad.size(); ++i)
      acc += static_cast<double>(t->grad[i]) * static_cast<double>(t->grad[i]);
  return std::sqrt(acc);
}

template <typename T>
double score_grasp(const std::vector<const Tensor<T>*>& params,
                   const std::vector<std::vector<double>>& hvp) {
  require(params.size() == hvp.size(), "grasp: HVP block count does not match parameters");
  double acc = 0.0;
  for (size_t k = 0; k < params.size(); ++k) {
    require(hvp[k].size() == params[k]->data.size(), "grasp: HVP length mismatch");
    for (size_t i = 0; i < hvp[k].size(); ++i)
      acc += -hvp[k][i] * static_cast<double>(params[k]->data[i]);
  }
  return acc;
}

double score_random(const SplitRng& base, const std::string& op_id) {
  SplitRng s = base.split(op_id);
  return s.uniform();
}

bool central_hvp(
    const std::function<void(const std::vector<double>&, std::vector<double>&)>& grad_fn,
    const std::vector<double>& theta, const std::vector<double>& g, std::vector<double>& hg) {
  double tn = 0.0, gn = 0.0;
  for (double v : theta) tn += v * v;
  for (double v : g) gn += v * v;
  if (gn == 0.0) return false;
  const double eps = 1e-3 * std::sqrt(tn) / std::sqrt(gn);
  if (eps == 0.0 || !std::isfinite(eps)) return false;

  std::vector<double> shifted(theta.size());
  std::vector<double> gplus(theta.size()), gminus(theta.size());
  for (size_t i = 0; i < theta.size(); ++i) shifted[i] = theta[i] + eps * g[i];
  grad_fn(shifted, gplus);
  for (size_t i = 0; i < theta.size(); ++i) shifted[i] = theta[i] - eps * g[i];
  grad_fn(shifted, gminus);

  hg.resize(theta.size());
  for (size_t i = 0; i < theta.size(); ++i) hg[i] = (gplus[i] - gminus[i]) / (2.0 * eps);
  return true;
}

bool SaliencyLedger::tracks(Metric m) const {
  if (metric_ == Metric::Vote) return m != Metric::Vote;
  return m == metric_;
}

void SaliencyLedger::ensure_targets(const std::vector<RepTarget>& targets) {
  for (const auto& t : targets) sums_.try_emplace(t.id);
}

void SaliencyLedger::add(const std::string& id, Metric m, double value) {
  sums_[id][metric_slot(m)] += value;
}

std::map<std::string, double> SaliencyLedger::averaged(Metric m) const {
  require(iters_ >= 1, "saliency ledger averaged before any iteration");
  std::map<std::string, double> out;
  const size_t slot = metric_slot(m);
  for (const auto& [id, acc] : sums_) out[id] = acc[slot] / static_cast<double>(iters_);
  return out;
}

namespace {

std::optional<std::string> argmax_id(const std::map<std::string, double>& scores) {
  std::optional<std::string> best;
  double best_v = 0.0;
  for (const auto& [id, v] : scores) {
    if (!best || v > best_v) {
      best = id;
      best_v = v;
    }
  }
  return best;
}

}  // namespace

std::optional<std::string> SaliencyLedger::select_target() const {
  if (sums_.empty()) return std::nullopt;
  if (metric_ != Metric::Vote) return argmax_id(averaged(metric_));
  // Each base metric nominates its argmax; most nominations wins, ties to the
  // lowest id (map order is ascending).
  std::map<std::string, int> votes;
  for (Metric m : kBaseMetrics) {
    auto nominee = argmax_id(averaged(m));
    if (nominee) votes[*nominee] += 1;
  }
  std::optional<std::string> best;
  int best_votes = 0;
  for (const auto& [id, n] : votes) {
    if (!best || n > best_votes) {
      best = id;
      best_votes = n;
    }
  }
  return best;
}

std::vector<SaliencyLedger::Row> SaliencyLedger::rows() const {
  std::vector<Row> out;
  if (iters_ < 1) return out;
  std::vector<Metric> tracked;
  if (metric_ == Metric::Vote)
    tracked.assign(std::begin(kBaseMetrics), std::end(kBaseMetrics));
  else
    tracked.push_back(metric_);
  for (Metric m : tracked)
    for (const auto& [id, score] : averaged(m)) out.push_back({id, m, score});
  return out;
}

void SaliencyLedger::reset() {
  sums_.clear();
  iters_ = 0;
}

void SaliencyLedger::restore(std::map<std::string, std::array<double, kNumBaseMetrics>> sums,
                             int iters) {
  sums_ = std::move(sums);
  iters_ = iters;
}

#define DYREP_INSTANTIATE_SALIENCY(T)                                                      \
  template double score_synflow<T>(const std::vector<const Tensor<T>*>&, bool);            \
  template double score_snip<T>(const std::vector<const Tensor<T>*>&);                     \
  template double score_grad_norm<T>(const std::vector<const Tensor<T>*>&);                \
  template double score_grasp<T>(const std::vector<const Tensor<T>*>&,                     \
                                 const std::vector<std::vector<double>>&);

DYREP_INSTANTIATE_SALIENCY(float)
DYREP_INSTANTIATE_SALIENCY(double)

#undef DYREP_INSTANTIATE_SALIENCY

}  // namespace dyrep
