#pragma once

#include <string>
#include <vector>

#include "dyrep/config.hpp"
#include "dyrep/trainer.hpp"

namespace dyrep {

inline constexpr const char* kArtifactVersion = "0.1.0";

// Run directory layout: manifest.json, metrics.jsonl, structure.jsonl,
// scores.csv, checkpoints/.
struct RunPaths {
  std::string root;
  std::string manifest() const { return root + "/manifest.json"; }
  std::string metrics() const { return root + "/metrics.jsonl"; }
  std::string structure() const { return root + "/structure.jsonl"; }
  std::string scores() const { return root + "/scores.csv"; }
  std::string checkpoints() const { return root + "/checkpoints"; }
  std::string last_checkpoint() const { return checkpoints() + "/last.ckpt"; }
  std::string final_checkpoint() const { return checkpoints() + "/final.ckpt"; }
  std::string diverged_checkpoint() const { return checkpoints() + "/diverged.ckpt"; }

  void prepare() const;  // creates root and checkpoints/
};

void write_manifest(const ResolvedConfig& cfg, const RunPaths& paths);
void write_metrics(const std::vector<EpochRow>& rows, const std::string& path);
void write_structure(const std::vector<StructEvent>& events, const std::string& path);
void write_scores(const std::vector<ScoreRow>& rows, const std::string& path);

struct ScoreTableRow {
  int interval = 0;
  std::string id;
  std::string metric;
  double score = 0.0;
};
std::vector<ScoreTableRow> read_scores(const std::string& path);

// Plain-text table of per-interval scores with the argmax target per metric.
std::string render_score_report(const std::vector<ScoreTableRow>& rows);

}  // namespace dyrep
