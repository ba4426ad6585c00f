#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "syn2real/errors.hpp"

namespace s2r {

// Dense row-major tensor. Images are {C,H,W} in [0,1], batches {N,C,H,W},
// label maps are TensorT<int32_t> of shape {H,W}.
template <typename T>
struct TensorT {
  std::vector<int> dims;
  std::vector<T> data;

  TensorT() = default;
  explicit TensorT(std::vector<int> d, T fill = T(0))
      : dims(std::move(d)), data(count(dims), fill) {}

  static TensorT zeros_like(const TensorT& o) { return TensorT(o.dims); }

  static std::int64_t count(const std::vector<int>& d) {
    std::int64_t n = 1;
    for (int x : d) n *= x;
    return n;
  }

  std::int64_t numel() const { return std::int64_t(data.size()); }
  int ndim() const { return int(dims.size()); }
  int dim(int i) const { return dims[size_t(i)]; }

  bool same_shape(const TensorT& o) const { return dims == o.dims; }

  T& operator[](std::int64_t i) { return data[size_t(i)]; }
  const T& operator[](std::int64_t i) const { return data[size_t(i)]; }

  T& at2(int a, int b) { return data[size_t(std::int64_t(a) * dims[1] + b)]; }
  const T& at2(int a, int b) const {
    return data[size_t(std::int64_t(a) * dims[1] + b)];
  }
  T& at3(int a, int b, int c) {
    return data[size_t((std::int64_t(a) * dims[1] + b) * dims[2] + c)];
  }
  const T& at3(int a, int b, int c) const {
    return data[size_t((std::int64_t(a) * dims[1] + b) * dims[2] + c)];
  }
  T& at4(int a, int b, int c, int d) {
    return data[size_t(((std::int64_t(a) * dims[1] + b) * dims[2] + c) *
                           dims[3] +
                       d)];
  }
  const T& at4(int a, int b, int c, int d) const {
    return data[size_t(((std::int64_t(a) * dims[1] + b) * dims[2] + c) *
                           dims[3] +
                       d)];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  void axpy(T alpha, const TensorT& x) {
    assert(same_shape(x));
    for (std::int64_t i = 0; i < numel(); ++i) data[size_t(i)] += alpha * x[i];
  }

  void scale(T alpha) {
    for (auto& v : data) v *= alpha;
  }

  T min_value() const {
    T m = data.empty() ? T(0) : data[0];
    for (T v : data) m = std::min(m, v);
    return m;
  }
  T max_value() const {
    T m = data.empty() ? T(0) : data[0];
    for (T v : data) m = std::max(m, v);
    return m;
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "{";
    for (size_t i = 0; i < dims.size(); ++i)
      os << (i ? "," : "") << dims[i];
    os << "}";
    return os.str();
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(dims);
    for (std::int64_t i = 0; i < numel(); ++i) out[i] = U(data[size_t(i)]);
    return out;
  }
};

using TensorF = TensorT<float>;
using TensorD = TensorT<double>;
using LabelMap = TensorT<std::int32_t>;

template <typename T>
inline void require_shape(const TensorT<T>& t, const std::vector<int>& dims,
                          const char* what) {
  if (t.dims != dims) {
    throw ShapeError(std::string(what) + ": expected shape mismatch, got " +
                     t.shape_str());
  }
}

// RMS difference between two equal-shape tensors.
template <typename T>
inline double rms_diff(const TensorT<T>& a, const TensorT<T>& b) {
  assert(a.same_shape(b));
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    acc += d * d;
  }
  return std::sqrt(acc / double(std::max<std::int64_t>(1, a.numel())));
}

}  // namespace s2r
