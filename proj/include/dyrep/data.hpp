#pragma once

#include <array>
#include <span>
#include <string>

#include "dyrep/rng.hpp"
#include "dyrep/tensor.hpp"

namespace dyrep {

template <typename T>
struct Dataset {
  std::array<int, 3> shape{3, 32, 32};  // C,H,W per image
  std::vector<T> images;                // n * C*H*W, normalized
  std::vector<int> labels;
  int num_classes = 10;

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  int64_t image_elems() const {
    return static_cast<int64_t>(shape[0]) * shape[1] * shape[2];
  }
};

struct Normalization {
  std::array<double, 3> mean{0.4914, 0.4822, 0.4465};
  std::array<double, 3> stdev{0.2470, 0.2435, 0.2616};
};

// CIFAR-10 binary records: 1 label byte + 3*1024 pixel bytes (channel-major
// R,G,B, row-major inside a channel). `path` may be a single .bin file or the
// directory holding data_batch_*.bin / test_batch.bin. Pixels map to
// ((v/255) - mean) / std per channel. `subset` 0 keeps everything.
template <typename T>
Dataset<T> load_cifar10(const std::string& path, int64_t subset, bool train,
                        const Normalization& norm);

void write_cifar10_file(const std::string& path, const std::vector<uint8_t>& labels,
                        const std::vector<uint8_t>& pixels);  // test fixture helper

// Class-conditional Gaussian blobs: image = snr * template[class] + noise,
// template and noise standard normal; labels cycle 0..classes-1 so the class
// histogram is balanced to +-1. Deterministic under seed. Disjoint splits of
// the same distribution come from the same seed with different sample
// offsets (the templates depend on the seed alone).
template <typename T>
Dataset<T> synthetic_dataset(uint64_t seed, int64_t n, int classes, std::array<int, 3> shape,
                             double snr, uint64_t sample_offset = 0);

template <typename T>
Tensor<T> gather_batch(const Dataset<T>& ds, std::span<const int64_t> indices,
                       std::vector<int>* labels_out);

// Random pad-4 crop plus horizontal flip, one decision per image, drawn from
// `rng` in batch order.
template <typename T>
void augment_batch(Tensor<T>& batch, SplitRng& rng, int pad = 4);

template <typename T>
void flip_horizontal(Tensor<T>& batch, int64_t n);  // flips one image in place

template <typename T>
void normalize_image(std::span<T> chw, std::array<int, 3> shape, const Normalization& norm);
template <typename T>
void denormalize_image(std::span<T> chw, std::array<int, 3> shape, const Normalization& norm);

}  // namespace dyrep
