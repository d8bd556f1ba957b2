#pragma once

// Cross-attention U-Net. Each block computes
//   H1 = FF(H0) + H0,   H2 = Attn(H1, b) + H1
// where FF is a two-convolution feed-forward branch and Attn attends from
// every pixel to the embedded gradient rows b = [b_g, b_1, ..., b_R].
// Decoder blocks additionally take the skip connection of the matching
// encoder level (concatenated on channels). A sinusoidal step embedding is
// added to the input of every block.

#include "qup/nn/layers.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace qup::denoiser {

struct DenoiserConfig {
  std::vector<int> channels{32, 32, 64};
  int res_blocks_per_level = 1;
  int references = 3;
  /// Width of the embedded gradient tokens and of the attention keys (d_k).
  int token_dim = 16;
  int time_dim = 32;

  int in_channels() const { return references + 1; }
  int levels() const { return static_cast<int>(channels.size()); }
  /// Spatial sizes are padded to a multiple of this.
  int size_multiple() const { return 1 << (levels() - 1); }

  void validate() const;
  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);

  /// [16, 16, 32]: smoke-test scale.
  static DenoiserConfig small(int references = 3);
  /// [32, 32, 64]: desk-scale default for 64x64 slices.
  static DenoiserConfig desk(int references = 3);
  /// [128, 128, 256] with one residual block per level.
  static DenoiserConfig paper(int references = 3);
  static DenoiserConfig preset(const std::string& name, int references);
};

template <typename T>
class AttentionBlock {
 public:
  AttentionBlock(const std::string& name, int in, int out, int time_dim, int token_dim);

  nn::Tensor<T> forward(const nn::Tensor<T>& x, const nn::Tensor<T>& temb,
                        const nn::Tensor<T>& tokens);
  /// Returns dL/dx; accumulates into dtemb and dtokens.
  nn::Tensor<T> backward(const nn::Tensor<T>& dy, nn::Tensor<T>& dtemb, nn::Tensor<T>& dtokens);

  void init(std::mt19937_64& rng);
  std::vector<nn::Param<T>*> params();
  nn::CrossAttention<T>& attention() { return attn_; }

 private:
  int in_, out_;
  nn::Linear<T> time_proj_;
  nn::SiLU<T> act1_, act2_;
  nn::Conv2d<T> conv1_, conv2_;
  std::unique_ptr<nn::Conv2d<T>> skip_;
  nn::CrossAttention<T> attn_;
};

template <typename T>
class CrossAttentionUNet {
 public:
  CrossAttentionUNet(const DenoiserConfig& config, std::uint64_t seed);

  /// x: (n, R+1, h, w); steps: n step indices; bmatrix: (n, 3, 1, R+1) with
  /// column 0 the target direction. Returns (n, 1, h, w).
  nn::Tensor<T> forward(const nn::Tensor<T>& x, const std::vector<int>& steps,
                        const nn::Tensor<T>& bmatrix);
  /// Backpropagates dL/doutput; parameter gradients accumulate, returns dL/dx.
  nn::Tensor<T> backward(const nn::Tensor<T>& dy);

  std::vector<nn::Param<T>*> params();
  void zero_grad();
  std::size_t parameter_count();
  const DenoiserConfig& config() const { return config_; }

  std::vector<nn::CrossAttention<T>*> attention_layers();
  nn::Linear<T>& token_embedding() { return token_embed_; }
  /// dL/dbmatrix from the last backward call.
  const nn::Tensor<T>& bmatrix_grad() const { return dbmatrix_; }

 private:
  DenoiserConfig config_;
  nn::Linear<T> token_embed_;
  nn::Linear<T> time_mlp_;
  nn::SiLU<T> time_act_;
  nn::Conv2d<T> conv_in_;
  std::vector<std::vector<std::unique_ptr<AttentionBlock<T>>>> enc_, dec_;
  std::vector<nn::Conv2d<T>> down_, up_;
  nn::SiLU<T> out_act_;
  nn::Conv2d<T> conv_out_;

  int in_h_ = 0, in_w_ = 0;
  nn::Tensor<T> temb_, tokens_;
  nn::Tensor<T> dbmatrix_;
};

}  // namespace qup::denoiser
