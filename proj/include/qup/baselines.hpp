#pragma once

// Comparison methods: linear-coefficient interpolation between reference
// slices, and a conditional GAN whose generator is the denoiser U-Net and
// whose discriminator is a PatchGAN with cross-attention on the gradients.

#include "qup/common.hpp"
#include "qup/denoiser.hpp"
#include "qup/diffusion.hpp"
#include "qup/nn/adam.hpp"
#include "qup/nn/layers.hpp"
#include "qup/volume.hpp"

#include <nlohmann/json.hpp>

#include <span>
#include <vector>

namespace qup::baselines {

struct InterpOptions {
  /// Rescale coefficients to sum to one.
  bool renormalize = false;
  /// Use -b_i for references on the far hemisphere from the target.
  bool antipodal_flip = false;
};

/// Solves sum_i c_i b_i = target exactly (R = 3) or in the minimum-norm
/// least-squares sense (R > 3).
std::vector<double> interp_coefficients(const Vec3& target, std::span<const Vec3> refs,
                                        const InterpOptions& options = {});

/// sum_i c_i X_i with negative pixels clipped to zero.
DWISlice interp_slice(std::span<const double> coefficients,
                      std::span<const DWISlice* const> refs);

struct GANConfig {
  double lambda_G = 1.0;
  double lambda_V = 100.0;
  /// Discriminator updates per two generator updates.
  int disc_updates_per_two_gen = 1;
  nn::AdamConfig generator_optimizer;
  nn::AdamConfig discriminator_optimizer;
  /// Step index fed to the generator network (the U-Net needs one).
  int generator_step = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static GANConfig from_json(const nlohmann::json& j);
};

struct PatchGanConfig {
  int references = 3;
  int base_channels = 16;
  /// Number of stride-2 convolutions; 1 gives a 16x16 receptive field,
  /// 3 gives 70x70.
  int strided_layers = 1;
  int token_dim = 16;

  int in_channels() const { return references + 1; }
  int receptive_field() const;
  /// Patch-grid side for an input side of `size` pixels.
  int output_size(int size) const;

  void validate() const;
  nlohmann::json to_json() const;
  static PatchGanConfig from_json(const nlohmann::json& j);
  static PatchGanConfig desk(int references = 3);
  static PatchGanConfig paper(int references = 3);
};

/// Patch discriminator: 4x4 convolutions with LeakyReLU(0.2), a residual
/// cross-attention layer after the first convolution, logits per patch.
template <typename T>
class PatchDiscriminator {
 public:
  PatchDiscriminator(const PatchGanConfig& config, std::uint64_t seed);

  /// x: (n, R+1, h, w) = [slice, references]; bmatrix: (n, 3, 1, R+1).
  nn::Tensor<T> forward(const nn::Tensor<T>& x, const nn::Tensor<T>& bmatrix);
  nn::Tensor<T> backward(const nn::Tensor<T>& dlogits);

  std::vector<nn::Param<T>*> params();
  void zero_grad();
  const PatchGanConfig& config() const { return config_; }

 private:
  PatchGanConfig config_;
  nn::Linear<T> token_embed_;
  std::vector<nn::Conv2d<T>> convs_;
  std::vector<nn::LeakyReLU<T>> acts_;
  nn::CrossAttention<T> attn_;
  nn::Tensor<T> tokens_;
};

/// Mean of softplus(-l) when `real`, softplus(l) otherwise (binary cross
/// entropy with logits); `grad` receives dLoss/dlogits.
double bce_with_logits(const nn::Tensor<float>& logits, bool real, nn::Tensor<float>* grad);

/// Mean |a - b|; `grad` receives dLoss/da.
double l1_loss(const nn::Tensor<float>& a, const nn::Tensor<float>& b, nn::Tensor<float>* grad);

struct GanStepResult {
  double generator_loss = 0.0;
  double adversarial = 0.0;
  double l1 = 0.0;
  /// Real + fake discriminator terms on this batch.
  double discriminator_loss = 0.0;
  bool discriminator_updated = false;
};

/// Generator and discriminator with their optimizers and update counters.
class CGanModel {
 public:
  CGanModel(const denoiser::DenoiserConfig& generator, const PatchGanConfig& discriminator,
            const GANConfig& config, std::uint64_t seed);

  /// Generator input: a zero target channel followed by the references.
  nn::Tensor<float> generate(const nn::Tensor<float>& references_input,
                             const nn::Tensor<float>& bmatrix);

  denoiser::CrossAttentionUNet<float>& generator() { return generator_; }
  PatchDiscriminator<float>& discriminator() { return discriminator_; }
  nn::Adam<float>& generator_optimizer() { return gen_opt_; }
  nn::Adam<float>& discriminator_optimizer() { return disc_opt_; }
  const GANConfig& config() const { return config_; }
  long long generator_updates() const { return generator_updates_; }
  long long discriminator_updates() const { return discriminator_updates_; }
  void set_counters(long long generator_updates, long long discriminator_updates) {
    generator_updates_ = generator_updates;
    discriminator_updates_ = discriminator_updates;
  }

 private:
  friend GanStepResult cgan_train_step(std::span<const diffusion::ConditioningSample> batch,
                                       CGanModel& model);
  GANConfig config_;
  denoiser::CrossAttentionUNet<float> generator_;
  PatchDiscriminator<float> discriminator_;
  nn::Adam<float> gen_opt_;
  nn::Adam<float> disc_opt_;
  long long generator_updates_ = 0;
  long long discriminator_updates_ = 0;
};

/// One generator update, followed by discriminator updates on every second
/// generator update.
GanStepResult cgan_train_step(std::span<const diffusion::ConditioningSample> batch,
                              CGanModel& model);

/// Packs [zeros, references...] for the generator.
nn::Tensor<float> pack_generator_input(std::span<const diffusion::ConditioningSample> batch);

}  // namespace qup::baselines
