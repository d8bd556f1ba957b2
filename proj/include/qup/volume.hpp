#pragma once

// Volume and slice containers plus the on-disk volume format: a raw
// little-endian float32 `.bin` (x fastest, then y, then z) next to a JSON
// sidecar {dims, voxel_size, bvalue, direction, dtype: "f32le"}.

#include "qup/common.hpp"
#include "qup/qspace.hpp"

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace qup {

struct Dims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t voxels() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  std::size_t slice_pixels() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny);
  }
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny) * z);
  }
  bool operator==(const Dims&) const = default;
};

/// Parses "64x64x9".
Dims parse_dims(const std::string& text);
std::string to_string(const Dims& d);

/// One diffusion-weighted (or b=0) volume. The direction must be unit norm
/// whenever bvalue > 0.
struct DWIVolume {
  Dims dims;
  std::vector<double> data;
  Vec3 direction = Vec3::UnitZ();
  double bvalue = 0.0;
  std::array<double, 3> voxel_size{1.25, 1.25, 1.25};
  /// Provenance tag written to the sidecar: "acquired" or "generated:<method>".
  std::string source = "acquired";

  void validate() const;
};

/// One 2D axial slice with the min-max statistics of its normalization.
/// Pixels are stored row-major (x fastest).
struct DWISlice {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;
  int slice_index = 0;
  double norm_min = 0.0;
  double norm_max = 1.0;

  bool same_shape(const DWISlice& o) const { return height == o.height && width == o.width; }
};

DWISlice extract_slice(const DWIVolume& vol, int z);
void insert_slice(DWIVolume& vol, const DWISlice& slice);

/// A full acquisition: b=0 volumes plus diffusion-weighted volumes whose
/// directions and b-values form `scheme`.
struct DwiSet {
  std::vector<DWIVolume> b0;
  std::vector<DWIVolume> dwi;

  qspace::GradientScheme scheme() const;
  Dims dims() const;
  void validate() const;
};

void write_volume(const std::filesystem::path& stem, const DWIVolume& vol);
DWIVolume read_volume(const std::filesystem::path& stem);

/// Directory layout: b0_NNN.{bin,json}, dwi_NNN.{bin,json}, plus bvals/bvecs
/// for the diffusion-weighted entries.
void write_dwi_set(const std::filesystem::path& dir, const DwiSet& set);
DwiSet read_dwi_set(const std::filesystem::path& dir);

}  // namespace qup
