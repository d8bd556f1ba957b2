#include "qup/phantom.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <set>

namespace qup::phantom {

void TensorField::validate() const {
  const std::size_t n = dims.voxels();
  if (tensors.size() != n || s0.size() != n || mask.size() != n) {
    throw ValidationError("tensor field: array sizes do not match dims " + to_string(dims));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!(s0[i] >= 0.0)) throw ValidationError("tensor field: negative S0");
    if (!in_mask(i)) continue;
    const Mat3& d = tensors[i];
    if ((d - d.transpose()).cwiseAbs().maxCoeff() > 1e-12) {
      throw ValidationError("tensor field: asymmetric tensor at voxel " + std::to_string(i));
    }
    Eigen::SelfAdjointEigenSolver<Mat3> es(d, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-12) {
      throw ValidationError("tensor field: tensor not PSD at voxel " + std::to_string(i));
    }
  }
}

Mat3 tensor_from_eigen(const Vec3& direction, const Vec3& eigenvalues) {
  if (!is_unit(direction)) {
    throw ValidationError("tensor_from_eigen: non-unit direction " + format_vec(direction));
  }
  if (eigenvalues.minCoeff() < 0.0) throw ValidationError("tensor_from_eigen: negative eigenvalue");
  const Vec3 v1 = direction.normalized();
  const Vec3 helper = std::abs(v1.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  const Vec3 v2 = v1.cross(helper).normalized();
  const Vec3 v3 = v1.cross(v2);
  Mat3 d = eigenvalues[0] * v1 * v1.transpose() + eigenvalues[1] * v2 * v2.transpose() +
           eigenvalues[2] * v3 * v3.transpose();
  return 0.5 * (d + d.transpose());
}

namespace {

struct Wave {
  double kx, ky, kz, phase, weight;
};

std::vector<Wave> texture_waves(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 0x7e47));
  std::uniform_real_distribution<double> wavelength(6.0, 16.0);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::vector<Wave> waves;
  for (int i = 0; i < 6; ++i) {
    const double k = 2.0 * std::numbers::pi / wavelength(rng);
    const double theta = angle(rng);
    waves.push_back({k * std::cos(theta), k * std::sin(theta), 0.15 * k * std::cos(angle(rng)),
                     angle(rng), 1.0 / 6.0});
  }
  return waves;
}

}  // namespace

TensorField generate_tensor_field(const Dims& dims, const std::vector<Region>& regions,
                                  std::uint64_t seed, const FieldOptions& options) {
  if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) {
    throw ValidationError("generate_tensor_field: shape must be positive");
  }
  std::vector<Mat3> region_tensors;
  for (const auto& r : regions) {
    if (!r.contains) throw ValidationError("region '" + r.name + "' has no predicate");
    region_tensors.push_back(tensor_from_eigen(r.direction, r.eigenvalues));
  }
  TensorField f;
  f.dims = dims;
  f.tensors.assign(dims.voxels(), Mat3::Zero());
  f.s0.assign(dims.voxels(), 0.0);
  f.mask.assign(dims.voxels(), 0);

  const auto waves = texture_waves(seed);
  std::set<std::pair<std::size_t, std::size_t>> conflicts;
  for (int z = 0; z < dims.nz; ++z) {
    for (int y = 0; y < dims.ny; ++y) {
      for (int x = 0; x < dims.nx; ++x) {
        const std::size_t i = dims.index(x, y, z);
        std::size_t owner = regions.size();
        for (std::size_t r = 0; r < regions.size(); ++r) {
          if (!regions[r].contains(x, y, z)) continue;
          if (owner != regions.size()) {
            conflicts.insert({owner, r});
            continue;
          }
          owner = r;
        }
        if (owner == regions.size()) continue;
        double texture = 0.0;
        for (const auto& w : waves) {
          texture += w.weight * std::cos(w.kx * x + w.ky * y + w.kz * z + w.phase);
        }
        f.tensors[i] = region_tensors[owner];
        f.s0[i] = regions[owner].s0 * (1.0 + options.s0_texture * texture);
        f.mask[i] = 1;
      }
    }
  }
  if (!conflicts.empty()) {
    std::string msg = "generate_tensor_field: overlapping regions:";
    for (const auto& [a, b] : conflicts) {
      msg += " '" + regions[a].name + "'/'" + regions[b].name + "'";
    }
    throw ValidationError(msg);
  }
  f.validate();
  return f;
}

std::vector<Region> two_bar_regions(const Dims& dims) {
  const double cx = (dims.nx - 1) / 2.0;
  const double cy = (dims.ny - 1) / 2.0;
  const double radius = 0.44 * std::min(dims.nx, dims.ny);
  const int bar = std::max(2, dims.nx / 8);
  // Horizontal bar in the upper half, vertical bar below it; they never touch.
  const int h_y0 = static_cast<int>(cy - radius * 0.55);
  const int h_x0 = static_cast<int>(cx - radius * 0.7);
  const int h_x1 = static_cast<int>(cx + radius * 0.7);
  const int v_x0 = static_cast<int>(cx + radius * 0.15);
  const int v_y0 = h_y0 + bar + std::max(2, bar / 2);
  const int v_y1 = static_cast<int>(cy + radius * 0.75);

  auto horizontal = [=](int x, int y, int) {
    return x >= h_x0 && x < h_x1 && y >= h_y0 && y < h_y0 + bar;
  };
  auto vertical = [=](int x, int y, int) {
    return x >= v_x0 && x < v_x0 + bar && y >= v_y0 && y < v_y1;
  };
  auto disk = [=](int x, int y, int z) {
    const double dx = x - cx;
    const double dy = y - cy;
    return dx * dx + dy * dy <= radius * radius && !horizontal(x, y, z) && !vertical(x, y, z);
  };
  const Vec3 bar_eigen(1.7e-3, 0.2e-3, 0.2e-3);
  return {
      {"background", disk, Vec3::UnitX(), Vec3::Constant(0.8e-3), 1.0},
      {"bar_x", horizontal, Vec3::UnitX(), bar_eigen, 1.0},
      {"bar_y", vertical, Vec3::UnitY(), bar_eigen, 1.0},
  };
}

TensorField two_bar_phantom(const Dims& dims, std::uint64_t seed) {
  return generate_tensor_field(dims, two_bar_regions(dims), seed, FieldOptions{0.35});
}

namespace {

void add_rician(std::vector<double>& data, const std::vector<unsigned char>& mask, double sigma,
                std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double re = data[i] + normal(rng);
    const double im = normal(rng);
    if (mask[i]) data[i] = std::hypot(re, im);
  }
}

double noise_sigma(const TensorField& field, double snr) {
  if (!(snr > 0.0)) throw ValidationError("simulate_dwi: snr must be positive");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < field.s0.size(); ++i) {
    if (field.in_mask(i)) {
      sum += field.s0[i];
      ++count;
    }
  }
  if (count == 0) throw ValidationError("simulate_dwi: empty mask");
  return sum / static_cast<double>(count) / snr;
}

}  // namespace

std::vector<DWIVolume> simulate_dwi(const TensorField& field, const qspace::GradientScheme& scheme,
                                    std::optional<double> snr, std::uint64_t seed) {
  if (scheme.empty()) throw ValidationError("simulate_dwi: empty gradient scheme");
  scheme.validate();
  const double sigma = snr ? noise_sigma(field, *snr) : 0.0;
  std::vector<DWIVolume> out(scheme.size());
  for (std::size_t v = 0; v < scheme.size(); ++v) {
    auto& vol = out[v];
    vol.dims = field.dims;
    vol.direction = scheme.directions[v];
    vol.bvalue = scheme.bvalues[v];
    vol.data.assign(field.dims.voxels(), 0.0);
    const Vec3& g = scheme.directions[v];
    for (std::size_t i = 0; i < vol.data.size(); ++i) {
      if (!field.in_mask(i)) continue;
      vol.data[i] = field.s0[i] * std::exp(-vol.bvalue * g.dot(field.tensors[i] * g));
    }
    if (snr) add_rician(vol.data, field.mask, sigma, derive_seed(seed, v));
  }
  return out;
}

std::vector<DWIVolume> simulate_b0(const TensorField& field, std::size_t count,
                                   std::optional<double> snr, std::uint64_t seed) {
  const double sigma = snr ? noise_sigma(field, *snr) : 0.0;
  std::vector<DWIVolume> out(count);
  for (std::size_t v = 0; v < count; ++v) {
    auto& vol = out[v];
    vol.dims = field.dims;
    vol.bvalue = 0.0;
    vol.data = field.s0;
    for (std::size_t i = 0; i < vol.data.size(); ++i) {
      if (!field.in_mask(i)) vol.data[i] = 0.0;
    }
    if (snr) add_rician(vol.data, field.mask, sigma, derive_seed(seed, 0xB0, v));
  }
  return out;
}

}  // namespace qup::phantom
