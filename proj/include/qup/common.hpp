#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace qup {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Raised when an input violates a documented precondition.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised on malformed or incompatible files (volumes, manifests, checkpoints).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kUnitTolerance = 1e-6;

inline bool is_unit(const Vec3& v, double tol = kUnitTolerance) {
  return std::abs(v.norm() - 1.0) <= tol;
}

std::string format_vec(const Vec3& v);

/// Derives an independent 64-bit seed from a base seed and up to three keys
/// (splitmix64 mixing), so RNG streams depend only on their identity.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t k0, std::uint64_t k1 = 0,
                          std::uint64_t k2 = 0);

}  // namespace qup
