#pragma once

// Gradient schemes, geodesic geometry on the unit sphere, uniform subsampling
// and nearest-reference selection.

#include "qup/common.hpp"

#include <cstddef>
#include <filesystem>
#include <vector>

namespace qup::qspace {

/// Diffusion-weighted sampling of q-space: one unit direction and one b-value
/// (s/mm^2) per entry.
struct GradientScheme {
  std::vector<Vec3> directions;
  std::vector<double> bvalues;

  std::size_t size() const { return directions.size(); }
  bool empty() const { return directions.empty(); }

  /// Throws ValidationError on length mismatch, non-unit directions or
  /// negative b-values.
  void validate() const;

  GradientScheme subset(const std::vector<std::size_t>& indices) const;
};

/// arccos(a . b) with the dot product clamped to [-1, 1]; both inputs must be
/// unit norm within 1e-6.
double geodesic_distance(const Vec3& a, const Vec3& b);

/// min(d, pi - d): distance between the undirected axes through a and b.
double antipodal_distance(const Vec3& a, const Vec3& b);

/// The R entries of `low` closest to `target`, ascending by distance, ties by
/// ascending index. With `antipodal` set the axis distance is used instead.
std::vector<std::size_t> select_references(const GradientScheme& low, const Vec3& target,
                                           std::size_t count, bool antipodal = false);

struct Subsample {
  GradientScheme subset;
  std::vector<std::size_t> selected;    // indices into the source scheme, selection order
  std::vector<std::size_t> complement;  // remaining indices, ascending
};

/// Greedy farthest-point selection of k entries under the antipodally
/// symmetric distance. The seed picks the first point; the rest is
/// deterministic (ties to the lowest index).
Subsample subsample_even(const GradientScheme& scheme, std::size_t k, std::uint64_t seed);

/// Minimum pairwise antipodal distance over the given entries.
double min_antipodal_separation(const GradientScheme& scheme,
                                const std::vector<std::size_t>& indices);

/// n near-uniform directions on the upper hemisphere (z >= 0), obtained by
/// antipodally symmetric electrostatic repulsion from a Fibonacci start.
/// Deterministic.
GradientScheme uniform_shell(std::size_t n, double bvalue, int iterations = 400);

// bvals: one line of space-separated decimals. bvecs: three lines holding the
// x, y and z components.
void write_bvals(const std::filesystem::path& path, const std::vector<double>& bvalues);
void write_bvecs(const std::filesystem::path& path, const std::vector<Vec3>& directions);
std::vector<double> read_bvals(const std::filesystem::path& path);
std::vector<Vec3> read_bvecs(const std::filesystem::path& path);

void write_scheme(const std::filesystem::path& bvals, const std::filesystem::path& bvecs,
                  const GradientScheme& scheme);
GradientScheme read_scheme(const std::filesystem::path& bvals,
                           const std::filesystem::path& bvecs);

}  // namespace qup::qspace
