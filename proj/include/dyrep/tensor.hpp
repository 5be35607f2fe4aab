#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dyrep {

std::string shape_str(const std::vector<int64_t>& shape);

[[noreturn]] void fail(const std::string& msg);

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

// Dense row-major tensor. `grad` is an optional buffer of the same length as
// `data`; parameters keep one allocated across steps, intermediate values get
// one only during a backward sweep.
template <typename T>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<T> data;
  std::vector<T> grad;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s, T fill = T(0)) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), fill);
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      require(d > 0, "tensor extents must be positive, got shape " + shape_str(s));
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  int ndim() const { return static_cast<int>(shape.size()); }

  bool has_grad() const { return !grad.empty(); }
  void alloc_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
  void zero_grad() {
    if (!grad.empty()) grad.assign(grad.size(), T(0));
  }

  // Flat offset for a 4-d tensor [N,C,H,W].
  int64_t off4(int64_t n, int64_t c, int64_t y, int64_t x) const {
    return ((n * shape[1] + c) * shape[2] + y) * shape[3] + x;
  }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>(t.shape);
}

template <typename T, typename U>
Tensor<T> cast_tensor(const Tensor<U>& t) {
  Tensor<T> out(t.shape);
  for (size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<T>(t.data[i]);
  return out;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape == b.shape, "max_abs_diff: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    double d = std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]));
    if (d > m) m = d;
  }
  return m;
}

}  // namespace dyrep
