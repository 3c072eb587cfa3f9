#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <vector>

#include "cdnet/common.hpp"

namespace cdnet {

// Dense row-major tensor, rank <= 5. Keeps shape and flat storage together;
// all the layer math below works on raw pointers into it.
template <typename T>
struct TensorT {
  std::vector<int> shape;
  std::vector<T> v;

  TensorT() = default;
  explicit TensorT(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
    v.assign(count(), fill);
  }

  size_t count() const {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
  }

  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  T& operator[](size_t i) { return v[i]; }
  const T& operator[](size_t i) const { return v[i]; }

  // (n, c, h, w) accessor for rank-4 tensors
  T& at4(int n, int c, int h, int w) {
    return v[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  const T& at4(int n, int c, int h, int w) const {
    return v[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  void zero() { std::fill(v.begin(), v.end(), T(0)); }
};

using Tensor = TensorT<float>;

template <typename T>
bool tensor_equal(const TensorT<T>& a, const TensorT<T>& b) {
  return a.shape == b.shape && a.v == b.v;
}

}  // namespace cdnet
