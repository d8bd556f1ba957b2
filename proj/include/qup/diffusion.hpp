#pragma once

// Denoising diffusion core: noise schedule, closed-form forward corruption,
// epsilon-prediction training loss and the conditional reverse sampler.
// Only the target channel is ever noised; reference slices are concatenated
// unchanged at every step.

#include "qup/common.hpp"
#include "qup/nn/tensor.hpp"
#include "qup/volume.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <random>
#include <span>
#include <vector>

namespace qup::diffusion {

/// Tables indexed by step t = 1..T (use the accessors; storage is 0-based).
struct NoiseSchedule {
  int steps = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> beta, alpha, alpha_bar, sigma;

  double beta_at(int t) const { return beta[static_cast<std::size_t>(t - 1)]; }
  double alpha_at(int t) const { return alpha[static_cast<std::size_t>(t - 1)]; }
  double alpha_bar_at(int t) const { return alpha_bar[static_cast<std::size_t>(t - 1)]; }
  double sigma_at(int t) const { return sigma[static_cast<std::size_t>(t - 1)]; }

  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);
};

/// Linear beta from beta_start to beta_end over T steps, sigma_t = sqrt(beta_t).
NoiseSchedule make_schedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);

/// A target slice, its R reference slices and the (R+1) x 3 gradient matrix
/// (row 0 the target direction, then the references in order).
struct ConditioningSample {
  DWISlice target;
  std::vector<DWISlice> references;
  std::vector<Vec3> bmatrix;

  std::size_t reference_count() const { return references.size(); }
  void validate() const;
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
DWISlice forward_noise(const DWISlice& x0, int t, std::span<const double> eps,
                       const NoiseSchedule& schedule);

/// Noise predictor: (n, R+1, h, w) input, per-sample steps and (n, 3, 1, R+1)
/// gradient matrices -> (n, 1, h, w) predicted noise.
using NoisePredictor = std::function<nn::Tensor<float>(
    const nn::Tensor<float>& x, const std::vector<int>& steps, const nn::Tensor<float>& bmatrix)>;

/// Packs gradient rows into a (n, 3, 1, R+1) tensor.
nn::Tensor<float> pack_bmatrix(std::span<const std::vector<Vec3>> rows);

/// Packs [target-channel, references...] per sample.
nn::Tensor<float> pack_input(std::span<const std::vector<double>> target_channels,
                             std::span<const std::vector<const DWISlice*>> references, int height,
                             int width);

struct TrainingBatch {
  nn::Tensor<float> input;    // noisy target + references
  std::vector<int> steps;
  nn::Tensor<float> bmatrix;
  nn::Tensor<float> noise;    // the epsilon each target was corrupted with
};

/// Draws t ~ U{1..T} and eps ~ N(0, I) per sample and corrupts the target
/// channel only.
TrainingBatch make_training_batch(std::span<const ConditioningSample> samples,
                                  const NoiseSchedule& schedule, std::mt19937_64& rng);

/// Mean squared error; if `grad` is given it receives dLoss/dpred.
double noise_mse(const nn::Tensor<float>& pred, const nn::Tensor<float>& noise,
                 nn::Tensor<float>* grad = nullptr);

/// Single-sample epsilon-matching loss.
double training_loss(const ConditioningSample& sample, const NoisePredictor& predictor,
                     const NoiseSchedule& schedule, std::mt19937_64& rng);

struct SampleRequest {
  std::vector<const DWISlice*> references;
  std::vector<Vec3> bmatrix;
  std::uint64_t seed = 0;
};

/// Optional hook, called with the denoiser input of every reverse step.
using StepObserver = std::function<void(int t, const nn::Tensor<float>& input)>;

/// Reverse process, x_{t-1} = mu(x_t) + sigma_t z with mu recovered from the
/// predicted noise; no noise at t = 1. Each request has its own RNG stream
/// so results do not depend on batch composition.
std::vector<DWISlice> sample_batch(std::span<const SampleRequest> requests,
                                   const NoisePredictor& predictor, const NoiseSchedule& schedule,
                                   const StepObserver& observer = {});

DWISlice sample(const std::vector<DWISlice>& references, const std::vector<Vec3>& bmatrix,
                const NoisePredictor& predictor, const NoiseSchedule& schedule,
                std::uint64_t seed);

}  // namespace qup::diffusion
