#pragma once

#include "dyrep/config.hpp"
#include "dyrep/trainer.hpp"

namespace dyrep {

inline constexpr uint32_t kCheckpointMajor = 1;
inline constexpr uint32_t kCheckpointMinor = 0;

// Versioned container: magic + version words, a JSON header (structure tree,
// canonical config text, epoch, saliency ledger, array directory), then the
// raw little-endian arrays in directory order. Same state in, same bytes out.
// Every live block's collapsed conv is sealed into the file at save time so
// `verify` can later prove the stored state still matches its single-conv
// equivalent.
template <typename T>
void save_checkpoint(TrainState<T>& state, const ResolvedConfig& cfg, const std::string& path);

// Reads just enough of the header to learn the stored precision.
std::string checkpoint_precision(const std::string& path);

template <typename T>
struct CheckpointData {
  TrainState<T> state;
  // Sealed collapse references: "<block id>.weight" / "<block id>.bias".
  std::map<std::string, std::vector<T>> collapsed;
};

template <typename T>
CheckpointData<T> load_checkpoint_full(const std::string& path, ResolvedConfig* cfg_out);

template <typename T>
TrainState<T> load_checkpoint(const std::string& path, ResolvedConfig* cfg_out);

}  // namespace dyrep
