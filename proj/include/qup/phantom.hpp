#pragma once

// Synthetic single-tensor phantoms with known ground truth.

#include "qup/common.hpp"
#include "qup/qspace.hpp"
#include "qup/volume.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace qup::phantom {

/// Per-voxel diffusion tensors (mm^2/s), baseline signal and mask.
struct TensorField {
  Dims dims;
  std::vector<Mat3> tensors;
  std::vector<double> s0;
  std::vector<unsigned char> mask;

  bool in_mask(std::size_t i) const { return mask[i] != 0; }
  /// Symmetry within 1e-12, PSD within -1e-12, s0 >= 0.
  void validate() const;
};

struct Region {
  std::string name;
  std::function<bool(int x, int y, int z)> contains;
  Vec3 direction = Vec3::UnitX();
  /// Principal eigenvalue first; the two perpendicular eigenvalues follow.
  Vec3 eigenvalues = Vec3::Constant(1e-3);
  double s0 = 1.0;
};

struct FieldOptions {
  /// Relative amplitude of the seeded low-frequency S0 texture; 0 disables it.
  double s0_texture = 0.0;
};

/// Tensor with principal eigenvector `direction`; the two perpendicular
/// eigenvectors are a fixed basis of the orthogonal plane.
Mat3 tensor_from_eigen(const Vec3& direction, const Vec3& eigenvalues);

/// Voxels claimed by a region get its tensor; others are out of mask.
/// Throws ValidationError naming the regions that overlap.
TensorField generate_tensor_field(const Dims& dims, const std::vector<Region>& regions,
                                  std::uint64_t seed, const FieldOptions& options = {});

/// Two non-overlapping orthogonal anisotropic bars inside an isotropic disk.
std::vector<Region> two_bar_regions(const Dims& dims);

/// The default two-bar phantom field with S0 texture enabled.
TensorField two_bar_phantom(const Dims& dims, std::uint64_t seed);

/// S = S0 exp(-b g^T D g). With an SNR, Rician noise of sigma = mean in-mask
/// S0 / snr is applied, seeded per volume from (seed, volume index).
/// Out-of-mask voxels are 0.
std::vector<DWIVolume> simulate_dwi(const TensorField& field, const qspace::GradientScheme& scheme,
                                    std::optional<double> snr, std::uint64_t seed);

/// `count` b=0 volumes, noise streams keyed after the diffusion volumes.
std::vector<DWIVolume> simulate_b0(const TensorField& field, std::size_t count,
                                   std::optional<double> snr, std::uint64_t seed);

}  // namespace qup::phantom
