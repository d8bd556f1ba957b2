#pragma once

// Layers with explicit forward/backward passes. Each layer caches what its
// backward pass needs from the most recent forward call, so a layer instance
// is single-writer: forward then backward, in order. Gradients accumulate
// into Param::grad until zeroed.

#include "qup/nn/tensor.hpp"

#include <vector>

namespace qup::nn {

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in, int out, int kernel, int stride, int pad);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);

  int out_height(int h) const { return (h + 2 * pad_ - kernel_) / stride_ + 1; }
  int out_width(int w) const { return (w + 2 * pad_ - kernel_) / stride_ + 1; }
  int kernel() const { return kernel_; }
  int stride() const { return stride_; }

  void init(std::mt19937_64& rng);
  std::vector<Param<T>*> params() { return {&weight_, &bias_}; }
  Param<T>& weight() { return weight_; }

 private:
  void im2col(const T* src, int h, int w, T* cols) const;
  void col2im(const T* cols, int h, int w, T* dst) const;

  int in_ = 0, out_ = 0, kernel_ = 1, stride_ = 1, pad_ = 0;
  Param<T> weight_;  // out x (in * k * k), row-major
  Param<T> bias_;
  Tensor<T> input_;
  std::vector<T> cols_;
};

/// y = W x + b applied to every column of each sample, where a sample of the
/// (n, in, 1, m) input is an (in x m) matrix.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in, int out, bool bias = true);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);

  void init(std::mt19937_64& rng);
  std::vector<Param<T>*> params();
  Param<T>& weight() { return weight_; }

 private:
  int in_ = 0, out_ = 0;
  bool has_bias_ = true;
  Param<T> weight_;
  Param<T> bias_;
  Tensor<T> input_;
};

template <typename T>
class SiLU {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy) const;

 private:
  Tensor<T> input_;
};

template <typename T>
class LeakyReLU {
 public:
  explicit LeakyReLU(T slope = T(0.2)) : slope_(slope) {}
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy) const;

 private:
  T slope_;
  Tensor<T> input_;
};

/// Nearest-neighbour 2x upsampling.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x);
/// Adjoint of upsample2x: sums each 2x2 block.
template <typename T>
Tensor<T> upsample2x_backward(const Tensor<T>& dy);

/// Adds a per-sample, per-channel bias (shape n x c x 1 x 1) to a feature map.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias);
/// Gradient w.r.t. the bias: per-channel sums over pixels.
template <typename T>
Tensor<T> channel_bias_grad(const Tensor<T>& dy);

/// Cross-attention of per-pixel image features onto a small token set:
///   Attn(H, E) = softmax((W_Q H)^T (W_K E) / sqrt(d_k)) applied to W_V E,
/// queries per pixel (channels -> d_k), keys/values per token
/// (token width -> d_k and -> channels). Returns only the attention term; the
/// residual is added by the caller. No biases, so W_V = 0 silences the layer.
template <typename T>
class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(std::string name, int channels, int token_dim, int key_dim);

  /// x: (n, channels, h, w); tokens: (n, token_dim, 1, m).
  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& tokens);
  /// Returns dL/dx; dL/dtokens is accumulated into `dtokens` (resized on
  /// first use).
  Tensor<T> backward(const Tensor<T>& dy, Tensor<T>& dtokens);

  /// Softmax weights of the last forward call: per sample an (m x pixels)
  /// matrix, each column summing to one.
  const std::vector<RowMat<T>>& attention() const { return attn_; }

  void init(std::mt19937_64& rng);
  std::vector<Param<T>*> params() { return {&wq_, &wk_, &wv_}; }
  Param<T>& wq() { return wq_; }
  Param<T>& wk() { return wk_; }
  Param<T>& wv() { return wv_; }

 private:
  int channels_ = 0, token_dim_ = 0, key_dim_ = 0;
  Param<T> wq_;  // key_dim x channels
  Param<T> wk_;  // key_dim x token_dim
  Param<T> wv_;  // channels x token_dim
  Tensor<T> input_;
  Tensor<T> tokens_;
  std::vector<RowMat<T>> q_, k_, v_, attn_;
};

/// Sinusoidal embedding of integer steps: [sin(t f_i), cos(t f_i)],
/// f_i = 10000^(-i/half). Output (n, dim, 1, 1).
template <typename T>
Tensor<T> timestep_embedding(const std::vector<int>& steps, int dim);

}  // namespace qup::nn
