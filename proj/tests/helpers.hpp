#pragma once

#include "qup/common.hpp"
#include "qup/phantom.hpp"
#include "qup/qspace.hpp"
#include "qup/volume.hpp"

#include <cmath>
#include <filesystem>
#include <optional>
#include <random>
#include <string>

namespace testing {

inline qup::Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  qup::Vec3 v;
  do {
    v = qup::Vec3(n(rng), n(rng), n(rng));
  } while (v.norm() < 1e-6);
  return v.normalized();
}

// Fresh scratch directory under the system temp path.
inline std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("qup_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Two-bar phantom acquisition on an n-direction shell plus one b0.
inline qup::DwiSet phantom_set(const qup::Dims& dims, const qup::qspace::GradientScheme& scheme,
                               std::uint64_t seed, std::optional<double> snr = 20.0) {
  const auto field = qup::phantom::two_bar_phantom(dims, seed);
  qup::DwiSet set;
  set.b0 = qup::phantom::simulate_b0(field, 1, snr, seed);
  set.dwi = qup::phantom::simulate_dwi(field, scheme, snr, seed);
  return set;
}

}  // namespace testing
