#pragma once

// Dataset construction, slice normalization and augmentation, output masking,
// volume up-sampling with any slice generator, and set-level evaluation.

#include "qup/baselines.hpp"
#include "qup/denoiser.hpp"
#include "qup/diffusion.hpp"
#include "qup/metrics.hpp"
#include "qup/qspace.hpp"
#include "qup/volume.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace qup::pipeline {

/// Min-max scaling to [0, 1]; constant slices become zeros with
/// norm_min = norm_max.
DWISlice normalize_slice(const DWISlice& slice);
DWISlice denormalize_slice(const DWISlice& slice);

/// Zeroes pixels where every reference is zero.
DWISlice mask_output(const DWISlice& generated, std::span<const DWISlice* const> references);

struct AugmentOptions {
  bool enabled = true;
  double max_angle_deg = 15.0;
  double scale_min = 0.9;
  double scale_max = 1.1;
  /// Co-rotate the in-plane gradient components with the image.
  bool rotate_bvecs = true;

  nlohmann::json to_json() const;
  static AugmentOptions from_json(const nlohmann::json& j);
};

struct AugmentParams {
  double angle = 0.0;  // radians
  double scale = 1.0;
};

/// Rotates and scales every slice about its centre (bilinear, zero fill).
diffusion::ConditioningSample apply_transform(const diffusion::ConditioningSample& sample,
                                              const AugmentParams& params, bool rotate_bvecs);

/// Draws one angle and one scale and applies them to the whole sample.
diffusion::ConditioningSample augment(const diffusion::ConditioningSample& sample,
                                      std::mt19937_64& rng, const AugmentOptions& options = {},
                                      AugmentParams* drawn = nullptr);

struct SampleRecord {
  std::size_t target = 0;                 // index into the full scheme
  std::vector<std::size_t> references;    // indices into the full scheme, nearest first
  int slice = 0;

  bool operator==(const SampleRecord&) const = default;
};

struct SubjectEntry {
  std::string id;
  std::string path;
  std::string split;  // "train", "val" or "test"

  bool operator==(const SubjectEntry&) const = default;
};

struct SplitRatios {
  int train = 8;
  int val = 1;
  int test = 1;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  int k_low = 0;
  int references = 0;
  int slices = 0;
  bool antipodal_references = false;
  qspace::GradientScheme full;
  std::vector<std::size_t> low;      // indices into full
  std::vector<std::size_t> targets;  // indices into full
  std::vector<SampleRecord> samples;
  std::vector<SubjectEntry> subjects;

  qspace::GradientScheme low_scheme() const { return full.subset(low); }
  qspace::GradientScheme target_scheme() const { return full.subset(targets); }
  std::vector<const SubjectEntry*> subjects_in(const std::string& split) const;

  void validate() const;
  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

/// Splits `full` into k_low evenly spread directions and the remaining
/// targets; one record per (target, slice) with its R nearest low-set
/// references.
DatasetManifest build_dataset(const qspace::GradientScheme& full, int slices, int k_low,
                              int references, std::uint64_t seed, bool antipodal_references = false);

/// Appends subjects in order: the first share of them goes to train, then
/// val, then test, in proportion to `ratios`.
void assign_subjects(DatasetManifest& manifest,
                     const std::vector<std::pair<std::string, std::string>>& subjects,
                     const SplitRatios& ratios = {});

DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// One slice to synthesize: references nearest first, bmatrix row 0 the
/// target direction.
struct GenerationRequest {
  std::vector<const DWISlice*> references;
  std::vector<Vec3> bmatrix;
  std::uint64_t seed = 0;
};

class SliceGenerator {
 public:
  virtual ~SliceGenerator() = default;
  virtual std::string method() const = 0;
  virtual int references() const = 0;
  /// Whether inputs and outputs live in per-slice normalized space.
  virtual bool normalized() const { return true; }
  virtual std::vector<DWISlice> generate(std::span<const GenerationRequest> requests) = 0;
};

class InterpGenerator final : public SliceGenerator {
 public:
  explicit InterpGenerator(int references = 3, baselines::InterpOptions options = {})
      : references_(references), options_(options) {}
  std::string method() const override { return "interp"; }
  int references() const override { return references_; }
  /// Works on raw intensities so a coincident reference is copied exactly.
  bool normalized() const override { return false; }
  std::vector<DWISlice> generate(std::span<const GenerationRequest> requests) override;

 private:
  int references_;
  baselines::InterpOptions options_;
};

class DiffusionGenerator final : public SliceGenerator {
 public:
  DiffusionGenerator(std::shared_ptr<denoiser::CrossAttentionUNet<float>> net,
                     diffusion::NoiseSchedule schedule);
  std::string method() const override { return "diffusion"; }
  int references() const override { return net_->config().references; }
  std::vector<DWISlice> generate(std::span<const GenerationRequest> requests) override;

 private:
  std::shared_ptr<denoiser::CrossAttentionUNet<float>> net_;
  diffusion::NoiseSchedule schedule_;
};

class CGanGenerator final : public SliceGenerator {
 public:
  CGanGenerator(std::shared_ptr<denoiser::CrossAttentionUNet<float>> net, int step);
  std::string method() const override { return "cgan"; }
  int references() const override { return net_->config().references; }
  std::vector<DWISlice> generate(std::span<const GenerationRequest> requests) override;

 private:
  std::shared_ptr<denoiser::CrossAttentionUNet<float>> net_;
  int step_;
};

struct UpsampleOptions {
  std::uint64_t seed = 0;
  /// Slices per generator call; results do not depend on it.
  int batch = 16;
  bool antipodal_references = false;
  std::function<void(const std::string&)> warn;
  std::function<void(std::size_t done, std::size_t total)> progress;
};

/// Synthesizes one volume per target direction from the acquired set. The
/// slice seed is derive_seed(seed, target position, z).
std::vector<DWIVolume> generate_volumes(const DwiSet& low, const qspace::GradientScheme& targets,
                                        SliceGenerator& generator, const UpsampleOptions& options);

/// The acquired set plus generated volumes for every target not already
/// acquired (those are reported through `warn` and passed through).
DwiSet upsample_volume(const DwiSet& low, const qspace::GradientScheme& targets,
                       SliceGenerator& generator, const UpsampleOptions& options = {});

/// Index of the volume in `set.dwi` with the same direction and b-value, or -1.
long find_direction(const DwiSet& set, const Vec3& direction, double bvalue);

/// Fits tensors on every (pred, truth) pair and scores generated volumes
/// slice by slice against the matching truth volume.
metrics::EvaluationReport evaluate(std::span<const DwiSet> preds, std::span<const DwiSet> truths,
                                   const std::string& method = "", int references = 0);

}  // namespace qup::pipeline
