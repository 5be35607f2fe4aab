#pragma once

#include <set>

#include "dyrep/data.hpp"
#include "dyrep/grow_prune.hpp"
#include "dyrep/model.hpp"
#include "dyrep/saliency.hpp"

namespace dyrep {

double cosine_lr(int epoch, int total_epochs, double lr0);

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T>
std::vector<ParamRef<T>> collect_params(Model<T>& model);

// SGD with momentum: v <- momentum*v + (g + wd*theta); theta <- theta - lr*v.
// Velocity buffers are keyed by parameter name so structural edits keep the
// surviving state; new parameters start from zero velocity.
template <typename T>
class Sgd {
 public:
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::map<std::string, std::vector<T>> velocity;

  void zero_grad(const std::vector<ParamRef<T>>& params);
  void step(const std::vector<ParamRef<T>>& params, double lr);
  // Drops velocity buffers whose parameter no longer exists.
  void prune(const std::vector<ParamRef<T>>& params);
};

struct TrainConfig {
  int epochs = 40;
  int update_interval = 5;  // t
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 128;
  int eval_batch_size = 256;
  uint64_t seed = 1;
  Metric metric = Metric::Synflow;
  bool synflow_abs = false;
  bool rep_enabled = true;
  bool augment = true;
  std::string precision = "single";
  GrowConfig grow;
  DepConfig dep;

  void validate() const;
};

struct EpochRow {
  int epoch = 0;
  double train_loss = 0.0;
  double eval_acc = 0.0;
  double eval_loss = 0.0;
  int64_t params = 0;
  uint64_t flops = 0;
  std::vector<std::string> events;  // "expand:<id>" / "remove:<id>:<kind>"
};

struct StructEvent {
  int epoch = 0;
  std::string event;  // "expand" | "remove"
  std::string id;
  std::vector<std::string> kinds;
  std::vector<double> importances;  // s_j of the block at decision time (remove only)
};

struct ScoreRow {
  int interval = 0;
  std::string id;
  std::string metric;
  double score = 0.0;
  std::string chosen;
};

struct TrainResult {
  std::vector<EpochRow> epochs;
  std::vector<StructEvent> events;
  std::vector<ScoreRow> scores;
  std::vector<double> step_losses;  // every iteration, in order
};

template <typename T>
struct TrainState {
  Model<T> model;
  Sgd<T> opt;
  SaliencyLedger ledger{Metric::Synflow};
  int epoch = 0;  // completed epochs
};

template <typename T>
struct TrainHooks {
  // Called after each completed epoch (and once more on divergence with
  // diverged=true) so the caller can persist checkpoints.
  std::function<void(TrainState<T>&, bool diverged)> save;
};

// Algorithm 1: per-iteration SGD + scoring, REP/DEP every update_interval
// epochs, score ledger reset after each structural update. Throws on
// non-finite loss after invoking the save hook.
template <typename T>
TrainResult train(TrainState<T>& state, const Dataset<T>& train_ds, const Dataset<T>& test_ds,
                  const TrainConfig& cfg, const TrainHooks<T>* hooks = nullptr);

template <typename T>
struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::vector<int> predictions;
};

template <typename T>
EvalResult<T> evaluate(Model<T>& model, const Dataset<T>& ds, int batch_size);

}  // namespace dyrep
