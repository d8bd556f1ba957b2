#include "helpers.hpp"

#include "qup/phantom.hpp"
#include "qup/tensorfit.hpp"

#include <doctest.h>

#include <algorithm>
#include <fstream>

using namespace qup;

namespace {

phantom::TensorField uniform_field(const Dims& dims, const Mat3& d, double s0 = 1.0) {
  phantom::TensorField f;
  f.dims = dims;
  f.tensors.assign(dims.voxels(), d);
  f.s0.assign(dims.voxels(), s0);
  f.mask.assign(dims.voxels(), 1);
  return f;
}

// Closed form straight from the definition, without clamping.
double fa_oracle(double a, double b, double c) {
  const double m = (a + b + c) / 3.0;
  const double num = std::sqrt((a - m) * (a - m) + (b - m) * (b - m) + (c - m) * (c - m));
  return std::sqrt(1.5) * num / std::sqrt(a * a + b * b + c * c);
}

Mat3 random_rotation(std::mt19937_64& rng) {
  const Vec3 axis = testing::random_unit(rng);
  std::uniform_real_distribution<double> ang(0.0, 6.28);
  return Eigen::AngleAxisd(ang(rng), axis).toRotationMatrix();
}

}  // namespace

TEST_SUITE("tensorfit") {

TEST_CASE("FA closed forms") {
  CHECK(tensorfit::fa(Vec3(1, 1, 1)) == doctest::Approx(0.0));
  CHECK(tensorfit::fa(Vec3(1, 0, 0)) == doctest::Approx(1.0));
  CHECK(tensorfit::fa(Vec3(2, 1, 1)) == doctest::Approx(0.4082).epsilon(1e-4));
  CHECK(tensorfit::fa(Vec3(2, 1, 1)) == doctest::Approx(fa_oracle(2, 1, 1)).epsilon(1e-14));
  CHECK(tensorfit::fa(Vec3(0, 0, 0)) == 0.0);
  // Negative eigenvalues are clamped: (1, -1, 0) behaves as (1, 0, 0).
  CHECK(tensorfit::fa(Vec3(1, -1, 0)) == doctest::Approx(1.0));
}

TEST_CASE("FA is scale and permutation invariant") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 3e-3);
  for (int i = 0; i < 500; ++i) {
    const Vec3 l(u(rng), u(rng), u(rng));
    const double f = tensorfit::fa(l);
    CHECK(f >= 0.0);
    CHECK(f <= 1.0 + 1e-12);
    CHECK(f == doctest::Approx(fa_oracle(l.x(), l.y(), l.z())).epsilon(1e-12));
    CHECK(std::abs(tensorfit::fa(l * 37.5) - f) <= 1e-12);
    CHECK(std::abs(tensorfit::fa(Vec3(l.z(), l.x(), l.y())) - f) <= 1e-12);
    CHECK(std::abs(tensorfit::fa(Vec3(l.y(), l.x(), l.z())) - f) <= 1e-12);
  }
}

TEST_CASE("noiseless round trip recovers the tensor") {
  const Mat3 d = Vec3(1.5e-3, 0.5e-3, 0.5e-3).asDiagonal();
  const auto f = uniform_field({2, 2, 1}, d, 3.0);
  const auto s = qspace::uniform_shell(30, 1000.0);
  const auto dwi = phantom::simulate_dwi(f, s, std::nullopt, 0);
  const auto b0 = phantom::simulate_b0(f, 1, std::nullopt, 0);
  const auto fit = tensorfit::fit_tensor(dwi, s, b0);
  for (std::size_t i = 0; i < fit.tensors.size(); ++i) {
    CHECK(fit.in_mask(i));
    CHECK((fit.tensors[i] - d).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK(fit.s0[i] == doctest::Approx(3.0).epsilon(1e-9));
  }
}

TEST_CASE("round trip on random tensors and minimal schemes") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> ev(0.1e-3, 2.5e-3);
  for (int n : {6, 7, 12, 64}) {
    const auto s = qspace::uniform_shell(static_cast<std::size_t>(n), 1000.0);
    phantom::TensorField f = uniform_field({5, 1, 1}, Mat3::Zero());
    for (auto& t : f.tensors) {
      const Mat3 r = random_rotation(rng);
      t = r * Vec3(ev(rng), ev(rng), ev(rng)).asDiagonal() * r.transpose();
    }
    const auto fit = tensorfit::fit_tensor(phantom::simulate_dwi(f, s, std::nullopt, 0), s,
                                           phantom::simulate_b0(f, 1, std::nullopt, 0));
    for (std::size_t i = 0; i < f.tensors.size(); ++i) {
      CHECK((fit.tensors[i] - f.tensors[i]).cwiseAbs().maxCoeff() <= 1e-9);
      CHECK(tensorfit::decompose(fit.tensors[i]).values.minCoeff() >= -1e-9);
    }
  }
}

TEST_CASE("no attenuation gives a zero tensor") {
  const auto s = qspace::uniform_shell(20, 1000.0);
  std::vector<DWIVolume> vols;
  for (std::size_t k = 0; k < s.size(); ++k) {
    DWIVolume v;
    v.dims = {3, 1, 1};
    v.data = {2.0, 2.0, 2.0};
    v.direction = s.directions[k];
    v.bvalue = 1000.0;
    vols.push_back(v);
  }
  DWIVolume b0 = vols[0];
  b0.bvalue = 0.0;
  const auto fit = tensorfit::fit_tensor(vols, s, {b0});
  for (const auto& t : fit.tensors) CHECK(t.cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("rank-deficient scheme is rejected") {
  qspace::GradientScheme s;
  for (int k = 0; k < 10; ++k) {
    const double a = 0.3 * k;
    s.directions.emplace_back(std::cos(a), std::sin(a), 0.0);
  }
  s.bvalues.assign(10, 1000.0);
  const auto f = uniform_field({1, 1, 1}, Mat3::Identity() * 1e-3);
  CHECK_THROWS_AS(tensorfit::fit_tensor(phantom::simulate_dwi(f, s, std::nullopt, 0), s,
                                        phantom::simulate_b0(f, 1, std::nullopt, 0)),
                  ValidationError);
}

TEST_CASE("non-positive signals are dropped; too few leaves the voxel out of mask") {
  const Mat3 d = Vec3(1.2e-3, 0.4e-3, 0.3e-3).asDiagonal();
  const auto f = uniform_field({3, 1, 1}, d);
  const auto s = qspace::uniform_shell(12, 1000.0);
  auto dwi = phantom::simulate_dwi(f, s, std::nullopt, 0);
  const auto b0 = phantom::simulate_b0(f, 1, std::nullopt, 0);
  // Voxel 1 loses two measurements (still 11 usable); voxel 2 keeps 5 plus b0, one short of 7.
  dwi[0].data[1] = 0.0;
  dwi[5].data[1] = -1.0;
  for (int k = 0; k < 7; ++k) dwi[static_cast<std::size_t>(k)].data[2] = 0.0;
  for (auto& v : dwi) v.data[1] = std::max(v.data[1], -1.0);
  const auto fit = tensorfit::fit_tensor(dwi, s, b0);
  CHECK(fit.in_mask(0));
  CHECK(fit.in_mask(1));
  CHECK((fit.tensors[1] - d).cwiseAbs().maxCoeff() <= 1e-9);
  CHECK_FALSE(fit.in_mask(2));
}

TEST_CASE("more directions give a better noisy fit") {
  // 100 voxels with random orientation, Rician SNR 20.
  std::mt19937_64 rng(21);
  phantom::TensorField f = uniform_field({10, 10, 1}, Mat3::Zero());
  for (auto& t : f.tensors) {
    const Mat3 r = random_rotation(rng);
    t = r * Vec3(1.7e-3, 0.3e-3, 0.3e-3).asDiagonal() * r.transpose();
  }
  auto median_error = [&](std::size_t n) {
    const auto s = qspace::uniform_shell(n, 1000.0);
    const auto fit = tensorfit::fit_tensor(phantom::simulate_dwi(f, s, 20.0, 4), s, phantom::simulate_b0(f, 1, 20.0, 4));
    std::vector<double> err;
    for (std::size_t i = 0; i < f.tensors.size(); ++i) {
      for (int a = 0; a < 3; ++a)
        for (int b = a; b < 3; ++b) err.push_back(std::abs(fit.tensors[i](a, b) - f.tensors[i](a, b)));
    }
    std::nth_element(err.begin(), err.begin() + static_cast<long>(err.size() / 2), err.end());
    return err[err.size() / 2];
  };
  CHECK(median_error(90) < median_error(30));
}

TEST_CASE("colored FA: isotropic, axis-aligned and rotated tensors") {
  // Solve (1 - b)^2 = 0.64 (1 + 2 b^2) for the perpendicular eigenvalue b that gives FA 0.8.
  const double b = (-2.0 + std::sqrt(4.0 + 4 * 0.28 * 0.36)) / (2 * 0.28);
  const Mat3 aniso = Vec3(1.0, b, b).asDiagonal();
  REQUIRE(fa_oracle(1.0, b, b) == doctest::Approx(0.8).epsilon(1e-12));

  phantom::TensorField f = uniform_field({2, 1, 1}, Mat3::Identity());
  f.tensors[1] = aniso * 1e-3;
  auto map = tensorfit::colored_fa(f);
  CHECK(map.values[0] == doctest::Approx(0.0));
  CHECK(map.color[0] == std::array<double, 3>{0.0, 0.0, 0.0});
  CHECK(map.values[1] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(map.color[1][0] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(map.color[1][1] == doctest::Approx(0.0));
  CHECK(map.color[1][2] == doctest::Approx(0.0));

  std::mt19937_64 rng(4);
  for (int i = 0; i < 50; ++i) {
    const Mat3 r = random_rotation(rng);
    f.tensors[1] = r * aniso * r.transpose() * 1e-3;
    map = tensorfit::colored_fa(f);
    const Vec3 v = (r * Vec3::UnitX()).cwiseAbs();
    for (int c = 0; c < 3; ++c) CHECK(map.color[1][static_cast<std::size_t>(c)] == doctest::Approx(0.8 * v(c)).epsilon(1e-9));
    for (double c : map.color[1]) {
      CHECK(c >= 0.0);
      CHECK(c <= 1.0);
    }
  }
}

TEST_CASE("eigen tie-break picks the lexicographically largest absolute vector") {
  // Oblate tensor: principal plane spanned by x and y.
  const auto e = tensorfit::decompose(Vec3(2e-3, 2e-3, 1e-3).asDiagonal());
  CHECK(e.values(0) == doctest::Approx(2e-3));
  CHECK(std::abs(e.principal.x()) == doctest::Approx(1.0));
}

TEST_CASE("colored FA PNG export") {
  const auto dir = testing::scratch("png");
  const auto f = phantom::two_bar_phantom({16, 16, 2}, 0);
  const auto map = tensorfit::colored_fa(f);
  tensorfit::write_color_png(dir / "cfa.png", map, 1);
  std::ifstream in(dir / "cfa.png", std::ios::binary);
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  const unsigned char png[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  CHECK(std::equal(sig, sig + 8, png));
  CHECK_THROWS(tensorfit::write_color_png(dir / "bad.png", map, 5));
  const auto vol = tensorfit::fa_volume(map);
  CHECK(vol.dims == f.dims);
}

}
