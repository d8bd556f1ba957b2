#pragma once

// Dense NCHW tensors and learnable parameters for the hand-written network
// layers. Vector-like data uses h = 1 (e.g. tokens are N x E x 1 x M).

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace qup::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
struct Tensor {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, T fill = T(0))
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t sample_size() const { return static_cast<std::size_t>(c) * plane(); }
  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }

  T* sample(int i) { return data.data() + sample_size() * static_cast<std::size_t>(i); }
  const T* sample(int i) const { return data.data() + sample_size() * static_cast<std::size_t>(i); }
  T* channel(int i, int ch) { return sample(i) + plane() * static_cast<std::size_t>(ch); }
  const T* channel(int i, int ch) const {
    return sample(i) + plane() * static_cast<std::size_t>(ch);
  }
  T& at(int i, int ch, int y, int x) {
    return channel(i, ch)[static_cast<std::size_t>(y) * w + x];
  }
  T at(int i, int ch, int y, int x) const {
    return channel(i, ch)[static_cast<std::size_t>(y) * w + x];
  }

  /// Sample i viewed as a (c x h*w) row-major matrix.
  MapMat<T> mat(int i) { return MapMat<T>(sample(i), c, static_cast<Eigen::Index>(plane())); }
  ConstMapMat<T> mat(int i) const {
    return ConstMapMat<T>(sample(i), c, static_cast<Eigen::Index>(plane()));
  }

  Tensor& operator+=(const Tensor& o) {
    if (!same_shape(o)) throw std::invalid_argument("tensor +=: shape mismatch");
    for (std::size_t k = 0; k < data.size(); ++k) data[k] += o.data[k];
    return *this;
  }
};

template <typename T>
Tensor<T> operator+(Tensor<T> a, const Tensor<T>& b) {
  a += b;
  return a;
}

/// A learnable array with its gradient accumulator.
template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;

  Param() = default;
  Param(std::string name_, std::vector<int> shape_) : name(std::move(name_)), shape(std::move(shape_)) {
    std::size_t n = 1;
    for (int s : shape) n *= static_cast<std::size_t>(s);
    value.assign(n, T(0));
    grad.assign(n, T(0));
  }
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
  /// U(-bound, bound) with bound = 1/sqrt(fan_in).
  void init_uniform(std::mt19937_64& rng, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : value) v = static_cast<T>(dist(rng));
  }
};

/// Concatenate along channels: result has a.c + b.c channels.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// Split channel-wise: first `first` channels into `a`, rest into `b`.
template <typename T>
void split_channels(const Tensor<T>& x, int first, Tensor<T>& a, Tensor<T>& b);

/// Zero-pad at the bottom/right to (h, w).
template <typename T>
Tensor<T> pad_to(const Tensor<T>& x, int h, int w);

/// Top-left crop to (h, w).
template <typename T>
Tensor<T> crop_to(const Tensor<T>& x, int h, int w);

}  // namespace qup::nn
