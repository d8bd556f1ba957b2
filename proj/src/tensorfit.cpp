#include "qup/tensorfit.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace qup::tensorfit {

namespace {

using Design = Eigen::Matrix<double, Eigen::Dynamic, 7>;
using Params = Eigen::Matrix<double, 7, 1>;

// Columns: ln S0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz.
Eigen::Matrix<double, 1, 7> design_row(const Vec3& g, double b) {
  Eigen::Matrix<double, 1, 7> row;
  row << 1.0, -b * g.x() * g.x(), -b * g.y() * g.y(), -b * g.z() * g.z(),
      -2.0 * b * g.x() * g.y(), -2.0 * b * g.x() * g.z(), -2.0 * b * g.y() * g.z();
  return row;
}

Mat3 tensor_from_params(const Params& p) {
  Mat3 d;
  d << p[1], p[4], p[5], p[4], p[2], p[6], p[5], p[6], p[3];
  return d;
}

}  // namespace

TensorField fit_tensor(const std::vector<DWIVolume>& volumes,
                       const qspace::GradientScheme& scheme,
                       const std::vector<DWIVolume>& s0_volumes) {
  scheme.validate();
  if (volumes.size() != scheme.size()) {
    throw ValidationError("fit_tensor: " + std::to_string(volumes.size()) + " volumes but " +
                          std::to_string(scheme.size()) + " scheme entries");
  }
  const std::size_t weighted =
      std::count_if(scheme.bvalues.begin(), scheme.bvalues.end(), [](double b) { return b > 0; });
  if (weighted < 6) {
    throw ValidationError("fit_tensor: need at least 6 diffusion-weighted directions, got " +
                          std::to_string(weighted));
  }
  const bool has_b0 = !s0_volumes.empty() || std::any_of(scheme.bvalues.begin(),
                                                         scheme.bvalues.end(),
                                                         [](double b) { return b == 0.0; });
  if (!has_b0) throw ValidationError("fit_tensor: no b=0 volume and no explicit S0");

  std::vector<const DWIVolume*> all;
  Design design(static_cast<Eigen::Index>(volumes.size() + s0_volumes.size()), 7);
  Eigen::Index row = 0;
  for (const auto& v : s0_volumes) {
    design.row(row++) = design_row(Vec3::UnitZ(), 0.0);
    all.push_back(&v);
  }
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    design.row(row++) = design_row(scheme.directions[i], scheme.bvalues[i]);
    all.push_back(&volumes[i]);
  }
  const Dims dims = all.front()->dims;
  for (const auto* v : all) {
    if (!(v->dims == dims) || v->data.size() != dims.voxels()) {
      throw ValidationError("fit_tensor: volumes have mismatched dims");
    }
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> full_qr(design);
  if (full_qr.rank() < 7) {
    throw ValidationError(
        "fit_tensor: design matrix has rank " + std::to_string(full_qr.rank()) +
        " < 7; the scheme needs 6 directions with linearly independent g g^T plus S0");
  }
  const Eigen::MatrixXd full_pinv = full_qr.solve(Eigen::MatrixXd::Identity(design.rows(),
                                                                           design.rows()));

  TensorField field;
  field.dims = dims;
  field.tensors.assign(dims.voxels(), Mat3::Zero());
  field.s0.assign(dims.voxels(), 0.0);
  field.mask.assign(dims.voxels(), 0);

  const Eigen::Index m = design.rows();
  Eigen::VectorXd logs(m);
  std::vector<Eigen::Index> usable;
  for (std::size_t i = 0; i < dims.voxels(); ++i) {
    usable.clear();
    for (Eigen::Index r = 0; r < m; ++r) {
      const double s = all[static_cast<std::size_t>(r)]->data[i];
      if (s > 0.0) {
        usable.push_back(r);
        logs[r] = std::log(s);
      }
    }
    if (usable.size() < 7) continue;
    Params p;
    if (static_cast<Eigen::Index>(usable.size()) == m) {
      p = full_pinv * logs;
    } else {
      Eigen::MatrixXd sub(static_cast<Eigen::Index>(usable.size()), 7);
      Eigen::VectorXd rhs(static_cast<Eigen::Index>(usable.size()));
      for (std::size_t k = 0; k < usable.size(); ++k) {
        sub.row(static_cast<Eigen::Index>(k)) = design.row(usable[k]);
        rhs[static_cast<Eigen::Index>(k)] = logs[usable[k]];
      }
      Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(sub);
      if (qr.rank() < 7) continue;
      p = qr.solve(rhs);
    }
    field.tensors[i] = tensor_from_params(p);
    field.s0[i] = std::exp(p[0]);
    field.mask[i] = 1;
  }
  return field;
}

TensorField fit_tensor(const DwiSet& set) {
  return fit_tensor(set.dwi, set.scheme(), set.b0);
}

double fa(const Vec3& eigenvalues) {
  const Vec3 l = eigenvalues.cwiseMax(0.0);
  const double norm = l.norm();
  if (norm == 0.0) return 0.0;
  const Vec3 dev = l.array() - l.mean();
  return std::min(1.0, std::sqrt(1.5) * dev.norm() / norm);
}

Eigen3 decompose(const Mat3& tensor) {
  Eigen::SelfAdjointEigenSolver<Mat3> es(tensor);
  // Eigen returns ascending eigenvalues.
  Eigen3 out;
  out.values = es.eigenvalues().reverse();
  const double top = out.values[0];
  const double tol = 1e-12 * std::max(1.0, std::abs(top));
  bool have = false;
  Vec3 best = Vec3::Zero();
  for (int k = 2; k >= 0; --k) {
    if (std::abs(es.eigenvalues()[k] - top) > tol) continue;
    const Vec3 cand = es.eigenvectors().col(k).cwiseAbs();
    const bool better = !have || std::lexicographical_compare(best.data(), best.data() + 3,
                                                              cand.data(), cand.data() + 3);
    if (better) {
      best = cand;
      out.principal = es.eigenvectors().col(k).normalized();
      have = true;
    }
  }
  return out;
}

FAMap colored_fa(const TensorField& field) {
  FAMap map;
  map.dims = field.dims;
  const std::size_t n = field.dims.voxels();
  map.values.assign(n, 0.0);
  map.color.assign(n, {0.0, 0.0, 0.0});
  map.mask = field.mask;
  for (std::size_t i = 0; i < n; ++i) {
    if (!field.in_mask(i)) continue;
    const auto e = decompose(field.tensors[i]);
    const double f = fa(e.values);
    map.values[i] = f;
    for (int c = 0; c < 3; ++c) map.color[i][c] = std::min(1.0, std::abs(e.principal[c]) * f);
  }
  return map;
}

void write_color_png(const std::filesystem::path& path, const FAMap& map, int z) {
  if (z < 0 || z >= map.dims.nz) throw ValidationError("write_color_png: slice out of range");
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw FormatError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("libpng error writing " + path.string());
  }
  png_init_io(png, fp.get());
  const int w = map.dims.nx;
  const int h = map.dims.ny;
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<std::size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto& c = map.color[map.dims.index(x, y, z)];
      for (int k = 0; k < 3; ++k) {
        row[static_cast<std::size_t>(3 * x + k)] =
            static_cast<png_byte>(std::lround(std::clamp(c[k], 0.0, 1.0) * 255.0));
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

DWIVolume fa_volume(const FAMap& map) {
  DWIVolume v;
  v.dims = map.dims;
  v.data = map.values;
  v.bvalue = 0.0;
  v.source = "fa";
  return v;
}

}  // namespace qup::tensorfit
