#pragma once

// Training orchestration for the diffusion model and the cGAN baseline, and
// the checkpoint format shared by both:
//   "QUPCKPT1" | u64 header length | JSON header | parameter and optimizer blocks

#include "qup/baselines.hpp"
#include "qup/denoiser.hpp"
#include "qup/diffusion.hpp"
#include "qup/nn/adam.hpp"
#include "qup/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace qup::training {

struct TrainConfig {
  std::string method = "diffusion";  // "diffusion" or "cgan"
  std::string preset = "small";
  denoiser::DenoiserConfig denoiser = denoiser::DenoiserConfig::small();
  int schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  nn::AdamConfig optimizer;
  baselines::GANConfig gan;
  baselines::PatchGanConfig discriminator;
  int steps = 2000;
  int batch_size = 8;
  std::uint64_t seed = 0;
  pipeline::AugmentOptions augment;
  int log_every = 10;
  int validate_every = 0;
  int validation_samples = 4;
  int checkpoint_every = 0;

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys take defaults; the denoiser comes from `preset` with any
  /// "denoiser" keys layered on top. `references` fills in R when absent.
  static TrainConfig from_json(const nlohmann::json& j, int references);
};

/// Per-slice normalized slices of one subject, indexed [full-scheme entry][z].
class SliceBank {
 public:
  SliceBank(const DwiSet& set, const pipeline::DatasetManifest& manifest);
  diffusion::ConditioningSample sample(const pipeline::SampleRecord& record) const;

 private:
  const qspace::GradientScheme* scheme_;
  std::vector<std::vector<DWISlice>> slices_;
};

/// Loads every subject of `split`; relative paths resolve against `base`.
std::vector<DwiSet> load_split(const pipeline::DatasetManifest& manifest, const std::string& split,
                               const std::filesystem::path& base);

struct StepLog {
  long long step = 0;
  double loss = 0.0;
  /// cGAN only.
  double discriminator_loss = 0.0;
  bool discriminator_updated = false;
};

class Trainer {
 public:
  Trainer(TrainConfig config, pipeline::DatasetManifest manifest, const std::vector<DwiSet>& train,
          const std::vector<DwiSet>& val = {});

  StepLog step();
  /// Runs until `config.steps` total steps; writes one JSON line per
  /// `log_every` steps to `log` and checkpoints every `checkpoint_every`.
  std::vector<StepLog> run(std::ostream* log = nullptr, const std::filesystem::path& checkpoint = {});
  /// Mean SSIM (normalized space) of generated vs true validation slices.
  double validate();

  void save(const std::filesystem::path& path) const;
  /// Restores weights, optimizer moments, counters and the RNG stream.
  void resume(const std::filesystem::path& path);

  long long current_step() const { return step_; }
  const TrainConfig& config() const { return config_; }
  const pipeline::DatasetManifest& manifest() const { return manifest_; }
  std::unique_ptr<pipeline::SliceGenerator> generator() const;
  std::shared_ptr<denoiser::CrossAttentionUNet<float>> network() const;

 private:
  std::vector<diffusion::ConditioningSample> draw_batch();

  TrainConfig config_;
  pipeline::DatasetManifest manifest_;
  std::vector<SliceBank> train_, val_;
  std::vector<std::pair<std::size_t, std::size_t>> pool_;  // (subject, record)
  std::mt19937_64 rng_;
  long long step_ = 0;
  diffusion::NoiseSchedule schedule_;
  std::shared_ptr<denoiser::CrossAttentionUNet<float>> net_;
  std::unique_ptr<nn::Adam<float>> optimizer_;
  std::unique_ptr<baselines::CGanModel> gan_;
};

struct LoadedModel {
  nlohmann::json header;
  std::unique_ptr<pipeline::SliceGenerator> generator;
};

/// Reads the header and generator weights of a checkpoint.
LoadedModel load_generator(const std::filesystem::path& path);
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace qup::training
