#pragma once

#include "dyrep/config.hpp"
#include "dyrep/model.hpp"

namespace dyrep {

inline constexpr uint32_t kModelFileMajor = 1;
inline constexpr uint32_t kModelFileMinor = 0;

// Inference-model container written by `dyrep export`: magic + version, a
// JSON header (model spec, data normalization, array directory with declared
// lengths), then little-endian float32 arrays. The model must already be
// deployed (no live branches).
template <typename T>
void write_model_file(Model<T>& model, const DataConfig& data, const std::string& path);

struct LoadedModel {
  Model<float> model;
  DataConfig data;
};

LoadedModel read_model_file(const std::string& path);

}  // namespace dyrep
