#include "dyrep/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

namespace dyrep {

namespace fs = std::filesystem;

namespace {

constexpr int64_t kCifarRecord = 3073;
constexpr int64_t kCifarPixels = 3072;

template <typename T>
void append_cifar_file(Dataset<T>& ds, const std::string& file, int64_t limit,
                       const Normalization& norm) {
  std::ifstream in(file, std::ios::binary);
  require(in.good(), "cannot open CIFAR-10 file: " + file);
  std::vector<char> rec(static_cast<size_t>(kCifarRecord));
  int64_t offset = 0;
  while (limit != 0) {
    in.read(rec.data(), kCifarRecord);
    const auto got = in.gcount();
    if (got == 0) break;
    require(got == kCifarRecord, "truncated CIFAR-10 record in " + file + " at byte offset " +
                                     std::to_string(offset) + " (got " + std::to_string(got) +
                                     " of 3073 bytes)");
    const int label = static_cast<unsigned char>(rec[0]);
    require(label < 10, "CIFAR-10 label byte out of range in " + file + " at byte offset " +
                            std::to_string(offset));
    ds.labels.push_back(label);
    const size_t base = ds.images.size();
    ds.images.resize(base + kCifarPixels);
    for (int64_t i = 0; i < kCifarPixels; ++i)
      ds.images[base + static_cast<size_t>(i)] =
          static_cast<T>(static_cast<unsigned char>(rec[1 + i]) / 255.0);
    normalize_image(std::span<T>(ds.images.data() + base, kCifarPixels), ds.shape, norm);
    offset += kCifarRecord;
    if (limit > 0) --limit;
  }
}

}  // namespace

template <typename T>
Dataset<T> load_cifar10(const std::string& path, int64_t subset, bool train,
                        const Normalization& norm) {
  Dataset<T> ds;
  ds.shape = {3, 32, 32};
  ds.num_classes = 10;
  int64_t remaining = subset > 0 ? subset : -1;

  std::vector<std::string> files;
  if (fs::is_directory(path)) {
    if (train) {
      for (int i = 1; i <= 5; ++i)
        files.push_back((fs::path(path) / ("data_batch_" + std::to_string(i) + ".bin")).string());
    } else {
      files.push_back((fs::path(path) / "test_batch.bin").string());
    }
  } else {
    files.push_back(path);
  }
  for (const auto& f : files) {
    if (remaining == 0) break;
    append_cifar_file(ds, f, remaining, norm);
    if (remaining > 0) remaining = std::max<int64_t>(0, subset - ds.size());
  }
  require(ds.size() > 0, "no CIFAR-10 records read from " + path);
  return ds;
}

void write_cifar10_file(const std::string& path, const std::vector<uint8_t>& labels,
                        const std::vector<uint8_t>& pixels) {
  require(pixels.size() == labels.size() * static_cast<size_t>(kCifarPixels),
          "write_cifar10_file: pixel buffer does not match label count");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "cannot write CIFAR-10 file: " + path);
  for (size_t i = 0; i < labels.size(); ++i) {
    out.put(static_cast<char>(labels[i]));
    out.write(reinterpret_cast<const char*>(pixels.data() + i * kCifarPixels), kCifarPixels);
  }
}

template <typename T>
Dataset<T> synthetic_dataset(uint64_t seed, int64_t n, int classes, std::array<int, 3> shape,
                             double snr, uint64_t sample_offset) {
  require(n > 0 && classes >= 2, "synthetic_dataset: need n > 0 and >= 2 classes");
  Dataset<T> ds;
  ds.shape = shape;
  ds.num_classes = classes;
  const int64_t elems = ds.image_elems();

  SplitRng root(seed);
  std::vector<std::vector<double>> templates(static_cast<size_t>(classes));
  for (int c = 0; c < classes; ++c) {
    SplitRng r = root.split("template").split(static_cast<uint64_t>(c));
    templates[static_cast<size_t>(c)].resize(static_cast<size_t>(elems));
    for (auto& v : templates[static_cast<size_t>(c)]) v = r.normal();
  }

  ds.images.resize(static_cast<size_t>(n * elems));
  ds.labels.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % classes);
    ds.labels[static_cast<size_t>(i)] = label;
    SplitRng r = root.split("noise").split(sample_offset + static_cast<uint64_t>(i));
    T* img = ds.images.data() + i * elems;
    const auto& tpl = templates[static_cast<size_t>(label)];
    for (int64_t j = 0; j < elems; ++j)
      img[j] = static_cast<T>(snr * tpl[static_cast<size_t>(j)] + r.normal());
  }
  return ds;
}

template <typename T>
Tensor<T> gather_batch(const Dataset<T>& ds, std::span<const int64_t> indices,
                       std::vector<int>* labels_out) {
  const int64_t elems = ds.image_elems();
  Tensor<T> batch({static_cast<int64_t>(indices.size()), ds.shape[0], ds.shape[1], ds.shape[2]});
  if (labels_out) labels_out->resize(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) {
    const int64_t idx = indices[i];
    require(idx >= 0 && idx < ds.size(), "batch index out of range");
    std::copy(ds.images.begin() + idx * elems, ds.images.begin() + (idx + 1) * elems,
              batch.data.begin() + static_cast<int64_t>(i) * elems);
    if (labels_out) (*labels_out)[i] = ds.labels[static_cast<size_t>(idx)];
  }
  return batch;
}

template <typename T>
void flip_horizontal(Tensor<T>& batch, int64_t n) {
  const int64_t c = batch.shape[1], h = batch.shape[2], w = batch.shape[3];
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h; ++y) {
      T* row = batch.ptr() + batch.off4(n, ch, y, 0);
      std::reverse(row, row + w);
    }
}

template <typename T>
void augment_batch(Tensor<T>& batch, SplitRng& rng, int pad) {
  const int64_t n_batch = batch.shape[0], c = batch.shape[1];
  const int64_t h = batch.shape[2], w = batch.shape[3];
  std::vector<T> img(static_cast<size_t>(c * (h + 2 * pad) * (w + 2 * pad)), T(0));
  const int64_t ph = h + 2 * pad, pw = w + 2 * pad;
  for (int64_t n = 0; n < n_batch; ++n) {
    const int64_t dy = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(2 * pad + 1)));
    const int64_t dx = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(2 * pad + 1)));
    const bool flip = rng.coin();
    std::fill(img.begin(), img.end(), T(0));
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t y = 0; y < h; ++y)
        std::copy(batch.ptr() + batch.off4(n, ch, y, 0), batch.ptr() + batch.off4(n, ch, y, 0) + w,
                  img.data() + (ch * ph + y + pad) * pw + pad);
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t y = 0; y < h; ++y)
        std::copy(img.data() + (ch * ph + y + dy) * pw + dx,
                  img.data() + (ch * ph + y + dy) * pw + dx + w,
                  batch.ptr() + batch.off4(n, ch, y, 0));
    if (flip) flip_horizontal(batch, n);
  }
}

template <typename T>
void normalize_image(std::span<T> chw, std::array<int, 3> shape, const Normalization& norm) {
  const int64_t hw = static_cast<int64_t>(shape[1]) * shape[2];
  for (int c = 0; c < shape[0]; ++c) {
    const double mean = norm.mean[static_cast<size_t>(c % 3)];
    const double stdev = norm.stdev[static_cast<size_t>(c % 3)];
    for (int64_t i = 0; i < hw; ++i) {
      T& v = chw[static_cast<size_t>(c * hw + i)];
      v = static_cast<T>((static_cast<double>(v) - mean) / stdev);
    }
  }
}

template <typename T>
void denormalize_image(std::span<T> chw, std::array<int, 3> shape, const Normalization& norm) {
  const int64_t hw = static_cast<int64_t>(shape[1]) * shape[2];
  for (int c = 0; c < shape[0]; ++c) {
    const double mean = norm.mean[static_cast<size_t>(c % 3)];
    const double stdev = norm.stdev[static_cast<size_t>(c % 3)];
    for (int64_t i = 0; i < hw; ++i) {
      T& v = chw[static_cast<size_t>(c * hw + i)];
      v = static_cast<T>(static_cast<double>(v) * stdev + mean);
    }
  }
}

#define DYREP_INSTANTIATE_DATA(T)                                                             \
  template Dataset<T> load_cifar10<T>(const std::string&, int64_t, bool, const Normalization&); \
  template Dataset<T> synthetic_dataset<T>(uint64_t, int64_t, int, std::array<int, 3>, double, \
                                           uint64_t);                                     \
  template Tensor<T> gather_batch<T>(const Dataset<T>&, std::span<const int64_t>,             \
                                     std::vector<int>*);                                      \
  template void augment_batch<T>(Tensor<T>&, SplitRng&, int);                                 \
  template void flip_horizontal<T>(Tensor<T>&, int64_t);                                      \
  template void normalize_image<T>(std::span<T>, std::array<int, 3>, const Normalization&);   \
  template void denormalize_image<T>(std::span<T>, std::array<int, 3>, const Normalization&);

DYREP_INSTANTIATE_DATA(float)
DYREP_INSTANTIATE_DATA(double)

#undef DYREP_INSTANTIATE_DATA

}  // namespace dyrep
