#pragma once

// Single-tensor estimation by log-linear least squares and FA maps.

#include "qup/phantom.hpp"
#include "qup/qspace.hpp"
#include "qup/volume.hpp"

#include <array>
#include <filesystem>
#include <vector>

namespace qup::tensorfit {

using phantom::TensorField;

/// Fits ln S = ln S0 - b g^T D g per voxel, with ln S0 as a seventh unknown.
/// Non-positive signals are dropped from a voxel's fit; voxels left with fewer
/// than 7 usable measurements (or a rank-deficient subset) are out of mask.
/// Throws ValidationError if the full design is rank deficient.
TensorField fit_tensor(const std::vector<DWIVolume>& volumes,
                       const qspace::GradientScheme& scheme,
                       const std::vector<DWIVolume>& s0_volumes);

TensorField fit_tensor(const DwiSet& set);

/// sqrt(3/2) |lambda - mean| / |lambda|, eigenvalues clamped at 0; 0 when all
/// are zero.
double fa(const Vec3& eigenvalues);

struct Eigen3 {
  Vec3 values;     // descending
  Vec3 principal;  // unit eigenvector of values[0]
};

/// Eigen-decomposition; among eigenvectors sharing the largest eigenvalue
/// (within 1e-12 relative) the one with lexicographically largest absolute
/// components wins.
Eigen3 decompose(const Mat3& tensor);

struct FAMap {
  Dims dims;
  std::vector<double> values;
  std::vector<std::array<double, 3>> color;
  std::vector<unsigned char> mask;
};

FAMap colored_fa(const TensorField& field);

/// Writes axial slice z of the colored FA map as an 8-bit RGB PNG.
void write_color_png(const std::filesystem::path& path, const FAMap& map, int z);

/// FA values as a volume in the toolkit format (out of mask = 0).
DWIVolume fa_volume(const FAMap& map);

}  // namespace qup::tensorfit
