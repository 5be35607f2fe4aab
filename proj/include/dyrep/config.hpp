#pragma once

#include <map>
#include <string>

#include "dyrep/data.hpp"
#include "dyrep/model.hpp"
#include "dyrep/trainer.hpp"

namespace dyrep {

// Flat key=value configuration with dotted keys; '#' starts a comment.
// Precedence: CLI override > config file > default.
class FlatConfig {
 public:
  static FlatConfig parse_text(const std::string& text);
  static FlatConfig parse_file(const std::string& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

struct DataConfig {
  std::string kind = "synthetic";  // "synthetic" | "cifar10"
  std::string path;
  int64_t subset = 5000;
  int64_t test_subset = 1000;
  int classes = 10;
  int image_size = 16;  // synthetic H = W (cifar10 is always 32)
  double snr = 1.0;
  uint64_t seed = 7;
  Normalization norm;
};

struct ResolvedConfig {
  std::string run_name = "run";
  TrainConfig train;
  ModelSpec model;
  DataConfig data;

  // All keys materialized with defaults, sorted, one per line.
  std::string canonical_text() const;
  std::string hash() const;  // fnv-1a of the canonical text, hex
};

// Validates every key, applies aliases ("t" -> train.update_interval) and
// returns the fully materialized configuration. Unknown keys are rejected by
// name.
ResolvedConfig resolve_config(const FlatConfig& cfg);

template <typename T>
std::pair<Dataset<T>, Dataset<T>> make_datasets(const DataConfig& cfg);

}  // namespace dyrep
