#include "qup/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <type_traits>

namespace qup::nn {

namespace {

// dst (+)= a * b. Eigen switches to matrix-vector or coefficient kernels when
// a dimension is 1 or the product is tiny, and those kernels round
// differently depending on buffer alignment; a plain loop keeps every
// product reproducible regardless of where the tensor lives.
template <typename D, typename A, typename B>
void matmul(D&& dst, const A& a, const B& b, bool accumulate = false) {
  using T = typename std::decay_t<D>::Scalar;
  const Eigen::Index rows = a.rows(), cols = b.cols(), depth = a.cols();
  if (rows == 1 || cols == 1 || rows + cols + depth < 20) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) {
        T sum = accumulate ? dst(i, j) : T(0);
        for (Eigen::Index k = 0; k < depth; ++k) sum += a(i, k) * b(k, j);
        dst(i, j) = sum;
      }
    }
  } else if (accumulate) {
    dst.noalias() += a * b;
  } else {
    dst.noalias() = a * b;
  }
}

template <typename T>
void add_row_sums(const ConstMapMat<T>& m, T* out) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    T sum = T(0);
    for (Eigen::Index c = 0; c < m.cols(); ++c) sum += m(r, c);
    out[r] += sum;
  }
}

}  // namespace

// ---- tensor helpers -------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n != b.n || a.h != b.h || a.w != b.w) {
    throw std::invalid_argument("concat_channels: shape mismatch");
  }
  Tensor<T> out(a.n, a.c + b.c, a.h, a.w);
  for (int i = 0; i < a.n; ++i) {
    std::copy(a.sample(i), a.sample(i) + a.sample_size(), out.sample(i));
    std::copy(b.sample(i), b.sample(i) + b.sample_size(), out.sample(i) + a.sample_size());
  }
  return out;
}

template <typename T>
void split_channels(const Tensor<T>& x, int first, Tensor<T>& a, Tensor<T>& b) {
  a = Tensor<T>(x.n, first, x.h, x.w);
  b = Tensor<T>(x.n, x.c - first, x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    std::copy(x.sample(i), x.sample(i) + a.sample_size(), a.sample(i));
    std::copy(x.sample(i) + a.sample_size(), x.sample(i) + x.sample_size(), b.sample(i));
  }
}

template <typename T>
Tensor<T> pad_to(const Tensor<T>& x, int h, int w) {
  if (h == x.h && w == x.w) return x;
  Tensor<T> out(x.n, x.c, h, w);
  for (int i = 0; i < x.n; ++i) {
    for (int ch = 0; ch < x.c; ++ch) {
      for (int y = 0; y < x.h; ++y) {
        std::copy(x.channel(i, ch) + static_cast<std::size_t>(y) * x.w,
                  x.channel(i, ch) + static_cast<std::size_t>(y + 1) * x.w,
                  out.channel(i, ch) + static_cast<std::size_t>(y) * w);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> crop_to(const Tensor<T>& x, int h, int w) {
  if (h == x.h && w == x.w) return x;
  Tensor<T> out(x.n, x.c, h, w);
  for (int i = 0; i < x.n; ++i) {
    for (int ch = 0; ch < x.c; ++ch) {
      for (int y = 0; y < h; ++y) {
        std::copy(x.channel(i, ch) + static_cast<std::size_t>(y) * x.w,
                  x.channel(i, ch) + static_cast<std::size_t>(y) * x.w + w,
                  out.channel(i, ch) + static_cast<std::size_t>(y) * w);
      }
    }
  }
  return out;
}

// ---- Conv2d ---------------------------------------------------------------

template <typename T>
Conv2d<T>::Conv2d(std::string name, int in, int out, int kernel, int stride, int pad)
    : in_(in),
      out_(out),
      kernel_(kernel),
      stride_(stride),
      pad_(pad),
      weight_(name + ".weight", {out, in, kernel, kernel}),
      bias_(name + ".bias", {out}) {}

template <typename T>
void Conv2d<T>::init(std::mt19937_64& rng) {
  const int fan_in = in_ * kernel_ * kernel_;
  weight_.init_uniform(rng, fan_in);
  bias_.init_uniform(rng, fan_in);
}

template <typename T>
void Conv2d<T>::im2col(const T* src, int h, int w, T* cols) const {
  const int oh = out_height(h);
  const int ow = out_width(w);
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < in_; ++ci) {
    const T* plane = src + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx) {
        T* row = cols + ((static_cast<std::size_t>(ci) * kernel_ + ky) * kernel_ + kx) * p;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride_ - pad_ + ky;
          T* dst = row + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* line = plane + static_cast<std::size_t>(iy) * w;
          if (stride_ == 1) {
            const int shift = kx - pad_;
            const int lo = std::clamp(-shift, 0, ow);
            const int hi = std::clamp(w - shift, lo, ow);
            std::fill(dst, dst + lo, T(0));
            std::copy(line + lo + shift, line + hi + shift, dst + lo);
            std::fill(dst + hi, dst + ow, T(0));
          } else {
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              dst[ox] = (ix >= 0 && ix < w) ? line[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void Conv2d<T>::col2im(const T* cols, int h, int w, T* dst) const {
  const int oh = out_height(h);
  const int ow = out_width(w);
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < in_; ++ci) {
    T* plane = dst + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx) {
        const T* row = cols + ((static_cast<std::size_t>(ci) * kernel_ + ky) * kernel_ + kx) * p;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride_ - pad_ + ky;
          if (iy < 0 || iy >= h) continue;
          T* line = plane + static_cast<std::size_t>(iy) * w;
          const T* src = row + static_cast<std::size_t>(oy) * ow;
          if (stride_ == 1) {
            const int shift = kx - pad_;
            const int lo = std::clamp(-shift, 0, ow);
            const int hi = std::clamp(w - shift, lo, ow);
            for (int ox = lo; ox < hi; ++ox) line[ox + shift] += src[ox];
          } else {
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < w) line[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) {
  if (x.c != in_) throw std::invalid_argument(weight_.name + ": input channel mismatch");
  input_ = x;
  const int oh = out_height(x.h);
  const int ow = out_width(x.w);
  const auto k = static_cast<Eigen::Index>(in_) * kernel_ * kernel_;
  const auto p = static_cast<Eigen::Index>(oh) * ow;
  Tensor<T> y(x.n, out_, oh, ow);
  cols_.resize(static_cast<std::size_t>(k * p));
  ConstMapMat<T> wmat(weight_.value.data(), out_, k);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(bias_.value.data(), out_);
  for (int i = 0; i < x.n; ++i) {
    im2col(x.sample(i), x.h, x.w, cols_.data());
    ConstMapMat<T> cols(cols_.data(), k, p);
    auto ym = y.mat(i);
    matmul(ym, wmat, cols);
    ym.colwise() += bias;
  }
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& dy) {
  const Tensor<T>& x = input_;
  const auto k = static_cast<Eigen::Index>(in_) * kernel_ * kernel_;
  const auto p = static_cast<Eigen::Index>(dy.h) * dy.w;
  Tensor<T> dx(x.n, x.c, x.h, x.w);
  cols_.resize(static_cast<std::size_t>(k * p));
  std::vector<T> dcols(static_cast<std::size_t>(k * p));
  ConstMapMat<T> wmat(weight_.value.data(), out_, k);
  MapMat<T> dw(weight_.grad.data(), out_, k);
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(bias_.grad.data(), out_);
  for (int i = 0; i < x.n; ++i) {
    im2col(x.sample(i), x.h, x.w, cols_.data());
    ConstMapMat<T> cols(cols_.data(), k, p);
    auto dym = dy.mat(i);
    matmul(dw, dym, cols.transpose(), true);
    add_row_sums<T>(dym, bias_.grad.data());
    MapMat<T> dc(dcols.data(), k, p);
    matmul(dc, wmat.transpose(), dym);
    col2im(dcols.data(), x.h, x.w, dx.sample(i));
  }
  return dx;
}

// ---- Linear ---------------------------------------------------------------

template <typename T>
Linear<T>::Linear(std::string name, int in, int out, bool bias)
    : in_(in),
      out_(out),
      has_bias_(bias),
      weight_(name + ".weight", {out, in}),
      bias_(name + ".bias", {bias ? out : 0}) {}

template <typename T>
void Linear<T>::init(std::mt19937_64& rng) {
  weight_.init_uniform(rng, in_);
  if (has_bias_) bias_.init_uniform(rng, in_);
}

template <typename T>
std::vector<Param<T>*> Linear<T>::params() {
  if (has_bias_) return {&weight_, &bias_};
  return {&weight_};
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) {
  if (x.c != in_ || x.h != 1) throw std::invalid_argument(weight_.name + ": input shape mismatch");
  input_ = x;
  Tensor<T> y(x.n, out_, 1, x.w);
  ConstMapMat<T> wmat(weight_.value.data(), out_, in_);
  for (int i = 0; i < x.n; ++i) {
    auto ym = y.mat(i);
    matmul(ym, wmat, x.mat(i));
    if (has_bias_) {
      ym.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias_.value.data(), out_);
    }
  }
  return y;
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& dy) {
  const Tensor<T>& x = input_;
  Tensor<T> dx(x.n, x.c, x.h, x.w);
  ConstMapMat<T> wmat(weight_.value.data(), out_, in_);
  MapMat<T> dw(weight_.grad.data(), out_, in_);
  for (int i = 0; i < x.n; ++i) {
    auto dym = dy.mat(i);
    matmul(dw, dym, x.mat(i).transpose(), true);
    if (has_bias_) {
      add_row_sums<T>(dym, bias_.grad.data());
    }
    matmul(dx.mat(i), wmat.transpose(), dym);
  }
  return dx;
}

// ---- activations ----------------------------------------------------------


template <typename T>
Tensor<T> SiLU<T>::forward(const Tensor<T>& x) {
  input_ = x;
  Tensor<T> y(x.n, x.c, x.h, x.w);
  // Scalar exp: Eigen's packet exp differs in the last bit from the scalar
  // path used for unaligned ends, which would tie results to buffer layout.
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] / (T(1) + std::exp(-x.data[i]));
  return y;
}

template <typename T>
Tensor<T> SiLU<T>::backward(const Tensor<T>& dy) const {
  Tensor<T> dx(dy.n, dy.c, dy.h, dy.w);
  for (std::size_t i = 0; i < dy.size(); ++i) {
    const T in = input_.data[i];
    const T s = T(1) / (T(1) + std::exp(-in));
    dx.data[i] = dy.data[i] * s * (T(1) + in * (T(1) - s));
  }
  return dx;
}

template <typename T>
Tensor<T> LeakyReLU<T>::forward(const Tensor<T>& x) {
  input_ = x;
  Tensor<T> y = x;
  for (auto& v : y.data) v = v > T(0) ? v : slope_ * v;
  return y;
}

template <typename T>
Tensor<T> LeakyReLU<T>::backward(const Tensor<T>& dy) const {
  Tensor<T> dx = dy;
  for (std::size_t k = 0; k < dx.data.size(); ++k) {
    if (!(input_.data[k] > T(0))) dx.data[k] *= slope_;
  }
  return dx;
}

// ---- resampling and biases ------------------------------------------------

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  Tensor<T> y(x.n, x.c, 2 * x.h, 2 * x.w);
  for (int i = 0; i < x.n; ++i) {
    for (int ch = 0; ch < x.c; ++ch) {
      const T* src = x.channel(i, ch);
      T* dst = y.channel(i, ch);
      for (int yy = 0; yy < y.h; ++yy) {
        const T* line = src + static_cast<std::size_t>(yy / 2) * x.w;
        T* out = dst + static_cast<std::size_t>(yy) * y.w;
        for (int xx = 0; xx < y.w; ++xx) out[xx] = line[xx / 2];
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> upsample2x_backward(const Tensor<T>& dy) {
  Tensor<T> dx(dy.n, dy.c, dy.h / 2, dy.w / 2);
  for (int i = 0; i < dy.n; ++i) {
    for (int ch = 0; ch < dy.c; ++ch) {
      const T* src = dy.channel(i, ch);
      T* dst = dx.channel(i, ch);
      for (int yy = 0; yy < dy.h; ++yy) {
        const T* line = src + static_cast<std::size_t>(yy) * dy.w;
        T* out = dst + static_cast<std::size_t>(yy / 2) * dx.w;
        for (int xx = 0; xx < dy.w; ++xx) out[xx / 2] += line[xx];
      }
    }
  }
  return dx;
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.n != x.n || bias.c != x.c || bias.h * bias.w != 1) {
    throw std::invalid_argument("add_channel_bias: shape mismatch");
  }
  Tensor<T> y = x;
  for (int i = 0; i < x.n; ++i) {
    for (int ch = 0; ch < x.c; ++ch) {
      const T b = bias.data[static_cast<std::size_t>(i) * x.c + ch];
      T* p = y.channel(i, ch);
      for (std::size_t k = 0; k < y.plane(); ++k) p[k] += b;
    }
  }
  return y;
}

template <typename T>
Tensor<T> channel_bias_grad(const Tensor<T>& dy) {
  Tensor<T> g(dy.n, dy.c, 1, 1);
  for (int i = 0; i < dy.n; ++i) {
    for (int ch = 0; ch < dy.c; ++ch) {
      const T* p = dy.channel(i, ch);
      T s = T(0);
      for (std::size_t k = 0; k < dy.plane(); ++k) s += p[k];
      g.data[static_cast<std::size_t>(i) * dy.c + ch] = s;
    }
  }
  return g;
}

// ---- CrossAttention -------------------------------------------------------

template <typename T>
CrossAttention<T>::CrossAttention(std::string name, int channels, int token_dim, int key_dim)
    : channels_(channels),
      token_dim_(token_dim),
      key_dim_(key_dim),
      wq_(name + ".wq", {key_dim, channels}),
      wk_(name + ".wk", {key_dim, token_dim}),
      wv_(name + ".wv", {channels, token_dim}) {}

template <typename T>
void CrossAttention<T>::init(std::mt19937_64& rng) {
  wq_.init_uniform(rng, channels_);
  wk_.init_uniform(rng, token_dim_);
  wv_.init_uniform(rng, token_dim_);
}

template <typename T>
Tensor<T> CrossAttention<T>::forward(const Tensor<T>& x, const Tensor<T>& tokens) {
  if (x.c != channels_ || tokens.c != token_dim_ || tokens.n != x.n || tokens.h != 1) {
    throw std::invalid_argument(wq_.name + ": input shape mismatch");
  }
  input_ = x;
  tokens_ = tokens;
  const T scale = T(1) / std::sqrt(static_cast<T>(key_dim_));
  ConstMapMat<T> wq(wq_.value.data(), key_dim_, channels_);
  ConstMapMat<T> wk(wk_.value.data(), key_dim_, token_dim_);
  ConstMapMat<T> wv(wv_.value.data(), channels_, token_dim_);
  q_.resize(x.n);
  k_.resize(x.n);
  v_.resize(x.n);
  attn_.resize(x.n);
  Tensor<T> y(x.n, x.c, x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    auto e = tokens.mat(i);
    q_[i].resize(key_dim_, x.mat(i).cols());
    k_[i].resize(key_dim_, e.cols());
    v_[i].resize(channels_, e.cols());
    matmul(q_[i], wq, x.mat(i));
    matmul(k_[i], wk, e);
    matmul(v_[i], wv, e);
    RowMat<T>& a = attn_[i];
    a.resize(k_[i].cols(), q_[i].cols());  // m x pixels
    matmul(a, k_[i].transpose(), q_[i]);
    a *= scale;
    // Column-wise softmax over the tokens.
    const Eigen::Matrix<T, 1, Eigen::Dynamic> mx = a.colwise().maxCoeff();
    a.rowwise() -= mx;
    for (Eigen::Index k = 0; k < a.size(); ++k) a.data()[k] = std::exp(a.data()[k]);
    const Eigen::Matrix<T, 1, Eigen::Dynamic> sum = a.colwise().sum();
    a.array().rowwise() /= sum.array();
    matmul(y.mat(i), v_[i], a);
  }
  return y;
}

template <typename T>
Tensor<T> CrossAttention<T>::backward(const Tensor<T>& dy, Tensor<T>& dtokens) {
  const Tensor<T>& x = input_;
  if (!(dtokens.n == tokens_.n && dtokens.c == tokens_.c && dtokens.w == tokens_.w)) {
    dtokens = Tensor<T>(tokens_.n, tokens_.c, 1, tokens_.w);
  }
  const T scale = T(1) / std::sqrt(static_cast<T>(key_dim_));
  ConstMapMat<T> wq(wq_.value.data(), key_dim_, channels_);
  ConstMapMat<T> wk(wk_.value.data(), key_dim_, token_dim_);
  ConstMapMat<T> wv(wv_.value.data(), channels_, token_dim_);
  MapMat<T> dwq(wq_.grad.data(), key_dim_, channels_);
  MapMat<T> dwk(wk_.grad.data(), key_dim_, token_dim_);
  MapMat<T> dwv(wv_.grad.data(), channels_, token_dim_);
  Tensor<T> dx(x.n, x.c, x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    auto dym = dy.mat(i);
    auto e = tokens_.mat(i);
    const RowMat<T>& a = attn_[i];
    RowMat<T> dv(channels_, a.rows());  // channels x m
    matmul(dv, dym, a.transpose());
    RowMat<T> ds(a.rows(), a.cols());  // m x pixels (dA)
    matmul(ds, v_[i].transpose(), dym);
    const Eigen::Matrix<T, 1, Eigen::Dynamic> dot = (ds.array() * a.array()).colwise().sum();
    ds = (a.array() * (ds.array().rowwise() - dot.array())).matrix() * scale;
    RowMat<T> dq(key_dim_, ds.cols());  // key x pixels
    matmul(dq, k_[i], ds);
    RowMat<T> dk(key_dim_, ds.rows());  // key x m
    matmul(dk, q_[i], ds.transpose());
    matmul(dwq, dq, x.mat(i).transpose(), true);
    matmul(dx.mat(i), wq.transpose(), dq);
    matmul(dwk, dk, e.transpose(), true);
    matmul(dwv, dv, e.transpose(), true);
    matmul(dtokens.mat(i), wk.transpose(), dk, true);
    matmul(dtokens.mat(i), wv.transpose(), dv, true);
  }
  return dx;
}

template <typename T>
Tensor<T> timestep_embedding(const std::vector<int>& steps, int dim) {
  const int half = dim / 2;
  Tensor<T> out(static_cast<int>(steps.size()), dim, 1, 1);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / std::max(1, half));
      const double arg = static_cast<double>(steps[i]) * freq;
      out.data[i * dim + k] = static_cast<T>(std::sin(arg));
      out.data[i * dim + half + k] = static_cast<T>(std::cos(arg));
    }
  }
  return out;
}

#define QUP_INSTANTIATE(T)                                                        \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);         \
  template void split_channels(const Tensor<T>&, int, Tensor<T>&, Tensor<T>&);    \
  template Tensor<T> pad_to(const Tensor<T>&, int, int);                          \
  template Tensor<T> crop_to(const Tensor<T>&, int, int);                         \
  template class Conv2d<T>;                                                       \
  template class Linear<T>;                                                       \
  template class SiLU<T>;                                                         \
  template class LeakyReLU<T>;                                                    \
  template Tensor<T> upsample2x(const Tensor<T>&);                                \
  template Tensor<T> upsample2x_backward(const Tensor<T>&);                       \
  template Tensor<T> add_channel_bias(const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> channel_bias_grad(const Tensor<T>&);                         \
  template class CrossAttention<T>;                                               \
  template Tensor<T> timestep_embedding<T>(const std::vector<int>&, int);

QUP_INSTANTIATE(float)
QUP_INSTANTIATE(double)

}  // namespace qup::nn
