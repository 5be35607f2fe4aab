#pragma once

#include "dyrep/config.hpp"
#include "dyrep/trainer.hpp"

namespace dyrep {

struct RunSummary {
  TrainResult result;
  double final_train_loss = 0.0;
  double final_eval_acc = 0.0;
  int64_t final_params = 0;
  std::string run_dir;
};

// Full `train` command: builds data and model per the resolved config, trains,
// and writes the run directory (manifest.json, metrics.jsonl, structure.jsonl,
// scores.csv, checkpoints/).
RunSummary run_train(const ResolvedConfig& cfg, const std::string& run_dir);

// Loads a checkpoint, deploys it back to the original topology and writes the
// inference-model container.
void run_export(const std::string& ckpt_path, const std::string& out_path);

struct VerifyReport {
  struct Entry {
    std::string id;
    double deviation = 0.0;
  };
  std::vector<Entry> blocks;
  double tolerance = 0.0;
  bool pass = true;
};

// Collapse-equivalence check of every live block on random probe inputs.
VerifyReport run_verify(const std::string& ckpt_path);

std::string run_score_report(const std::string& run_dir);

}  // namespace dyrep
