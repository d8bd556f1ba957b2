#include "helpers.hpp"

#include "qup/metrics.hpp"

#include <doctest.h>

#include <random>

using namespace qup;
using metrics::ImageView;

namespace {

struct Image {
  int h, w;
  std::vector<double> px;
  ImageView view() const { return {h, w, px}; }
};

Image random_image(std::mt19937_64& rng, int h, int w, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Image im{h, w, std::vector<double>(static_cast<std::size_t>(h) * w)};
  for (auto& v : im.px) v = u(rng);
  return im;
}

// Direct evaluation: for every pixel, loop over the clipped 7x7 window.
std::vector<double> naive_ssim_map(const Image& a, const Image& b, double range) {
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);
  std::vector<double> out(a.px.size());
  for (int y = 0; y < a.h; ++y)
    for (int x = 0; x < a.w; ++x) {
      double sa = 0, sb = 0, n = 0;
      for (int yy = std::max(0, y - 3); yy <= std::min(a.h - 1, y + 3); ++yy)
        for (int xx = std::max(0, x - 3); xx <= std::min(a.w - 1, x + 3); ++xx) {
          sa += a.px[static_cast<std::size_t>(yy * a.w + xx)];
          sb += b.px[static_cast<std::size_t>(yy * a.w + xx)];
          n += 1;
        }
      const double ma = sa / n, mb = sb / n;
      double va = 0, vb = 0, cov = 0;
      for (int yy = std::max(0, y - 3); yy <= std::min(a.h - 1, y + 3); ++yy)
        for (int xx = std::max(0, x - 3); xx <= std::min(a.w - 1, x + 3); ++xx) {
          const double da = a.px[static_cast<std::size_t>(yy * a.w + xx)] - ma;
          const double db = b.px[static_cast<std::size_t>(yy * a.w + xx)] - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      va /= n;
      vb /= n;
      cov /= n;
      out[static_cast<std::size_t>(y * a.w + x)] =
          ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
  return out;
}

tensorfit::FAMap fa_map(const Dims& dims, std::vector<double> values, std::vector<unsigned char> mask = {}) {
  tensorfit::FAMap m;
  m.dims = dims;
  m.values = std::move(values);
  m.color.assign(m.values.size(), {0.0, 0.0, 0.0});
  m.mask = mask.empty() ? std::vector<unsigned char>(m.values.size(), 1) : std::move(mask);
  return m;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("ssim matches the direct windowed oracle") {
  std::mt19937_64 rng(1);
  for (auto [h, w] : {std::pair{5, 4}, std::pair{17, 23}, std::pair{32, 32}}) {
    const auto a = random_image(rng, h, w, 0.0, 2.0);
    auto b = a;
    std::normal_distribution<double> n(0.0, 0.3);
    for (auto& v : b.px) v += n(rng);
    const auto lib = metrics::ssim_map(a.view(), b.view(), 2.0);
    const auto ref = naive_ssim_map(a, b, 2.0);
    double mean = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      CHECK(lib[i] == doctest::Approx(ref[i]).epsilon(1e-9));
      mean += ref[i];
    }
    CHECK(metrics::ssim(a.view(), b.view(), 2.0) == doctest::Approx(mean / static_cast<double>(ref.size())).epsilon(1e-9));
  }
}

TEST_CASE("ssim identity, symmetry and range") {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 20; ++i) {
    const auto a = random_image(rng, 20, 20);
    const auto b = random_image(rng, 20, 20);
    CHECK(metrics::ssim(a.view(), a.view(), 1.0) == doctest::Approx(1.0).epsilon(1e-12));
    const double ab = metrics::ssim(a.view(), b.view(), 1.0);
    CHECK(std::abs(ab - metrics::ssim(b.view(), a.view(), 1.0)) <= 1e-12);
    CHECK(ab >= -1.0);
    CHECK(ab <= 1.0);
  }
}

TEST_CASE("ssim of an inverted checkerboard approaches -1") {
  Image a{21, 21, std::vector<double>(21 * 21)};
  for (int y = 0; y < 21; ++y)
    for (int x = 0; x < 21; ++x) a.px[static_cast<std::size_t>(y * 21 + x)] = ((x + y) % 2) ? 1.0 : 0.0;
  Image b = a;
  for (auto& v : b.px) v = 1.0 - v;
  const auto map = metrics::ssim_map(a.view(), b.view(), 1.0);
  const auto ref = naive_ssim_map(a, b, 1.0);
  // Interior windows hold 25 vs 24 pixels of each colour.
  CHECK(map[10 * 21 + 10] < -0.99);
  CHECK(map[10 * 21 + 10] == doctest::Approx(ref[10 * 21 + 10]).epsilon(1e-12));
}

TEST_CASE("constant images reduce to the luminance term") {
  const double range = 1.0, c1 = 1e-4;
  for (double d : {0.0, 0.05, 0.3}) {
    Image a{9, 9, std::vector<double>(81, 0.4)};
    Image b{9, 9, std::vector<double>(81, 0.4 + d)};
    const double expected = (2 * 0.4 * (0.4 + d) + c1) / (0.4 * 0.4 + (0.4 + d) * (0.4 + d) + c1);
    CHECK(metrics::ssim(a.view(), b.view(), range) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("ssim averages over the mask only") {
  std::mt19937_64 rng(3);
  const auto a = random_image(rng, 12, 12);
  const auto b = random_image(rng, 12, 12);
  std::vector<unsigned char> mask(144, 0);
  for (std::size_t i = 0; i < 144; i += 3) mask[i] = 1;
  const auto ref = naive_ssim_map(a, b, 1.0);
  double sum = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < 144; ++i)
    if (mask[i]) sum += ref[i], ++n;
  CHECK(metrics::ssim(a.view(), b.view(), 1.0, mask) == doctest::Approx(sum / n).epsilon(1e-9));
}

TEST_CASE("ssim input errors") {
  Image a{4, 4, std::vector<double>(16)}, b{4, 5, std::vector<double>(20)};
  CHECK_THROWS_AS(metrics::ssim(a.view(), b.view(), 1.0), ValidationError);
  CHECK_THROWS_AS(metrics::ssim(a.view(), a.view(), 0.0), ValidationError);
}

TEST_CASE("fa_error examples") {
  const Dims dims{4, 4, 2};
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.1, 0.8);
  std::vector<double> t(dims.voxels());
  for (auto& v : t) v = u(rng);
  const auto truth = fa_map(dims, t);
  CHECK(metrics::fa_error(truth, truth) == 0.0);
  std::vector<double> shifted = t;
  for (auto& v : shifted) v += 0.1;
  CHECK(metrics::fa_error(fa_map(dims, shifted), truth) == doctest::Approx(0.1).epsilon(1e-12));
  std::vector<double> checker = t;
  for (std::size_t i = 0; i < checker.size(); i += 2) checker[i] += 0.2;
  CHECK(metrics::fa_error(fa_map(dims, checker), truth) == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("fa_error is a metric over intersected masks") {
  const Dims dims{3, 3, 3};
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(dims.voxels()), b(dims.voxels()), c(dims.voxels());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = u(rng), b[i] = u(rng), c[i] = u(rng);
    const auto ma = fa_map(dims, a), mb = fa_map(dims, b), mc = fa_map(dims, c);
    const double ab = metrics::fa_error(ma, mb);
    CHECK(ab == metrics::fa_error(mb, ma));
    CHECK(ab >= 0.0);
    CHECK(ab <= metrics::fa_error(ma, mc) + metrics::fa_error(mc, mb) + 1e-12);
  }
  std::vector<unsigned char> left(dims.voxels(), 0), right(dims.voxels(), 0);
  left[0] = 1;
  right[1] = 1;
  CHECK_THROWS_AS(metrics::fa_error(fa_map(dims, std::vector<double>(27, 0.5), left),
                                    fa_map(dims, std::vector<double>(27, 0.5), right)),
                  ValidationError);
  // Only the overlap counts.
  std::vector<unsigned char> both = left;
  both[1] = 1;
  std::vector<double> p(27, 0.0), q(27, 0.0);
  p[0] = 0.3;
  p[1] = 0.9;
  CHECK(metrics::fa_error(fa_map(dims, p, left), fa_map(dims, q, both)) == doctest::Approx(0.3));
}

TEST_CASE("FA map SSIM of identical maps is 1") {
  const Dims dims{10, 10, 3};
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(dims.voxels());
  for (auto& x : v) x = u(rng);
  const auto m = fa_map(dims, v);
  CHECK(metrics::fa_map_ssim(m, m) == doctest::Approx(1.0));
}

TEST_CASE("report aggregation and serialization") {
  metrics::EvaluationReport r;
  r.method = "diffusion";
  r.references = 3;
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 37; ++i) r.slice_ssim.push_back(u(rng));
  r.fa_errors = {0.03, 0.025, 0.031};
  r.fa_map_ssims = {0.9, 0.91};
  double sum = 0.0;
  for (double v : r.slice_ssim) sum += v;
  CHECK(std::abs(r.image_ssim().mean - sum / 37.0) <= 1e-12);
  CHECK(std::abs(r.fa_error_summary().mean - (0.03 + 0.025 + 0.031) / 3.0) <= 1e-12);
  const auto s = metrics::summarize(std::vector<double>{1.0, 3.0});
  CHECK(s.mean == 2.0);
  CHECK(s.std == 1.0);
  CHECK(s.count == 2);

  const auto j = r.to_json();
  CHECK(j.at("metadata").at("ssim_mode") == "per-slice-then-averaged");
  CHECK(j.at("fid").is_null());
  const auto back = metrics::EvaluationReport::from_json(j);
  CHECK(back.slice_ssim == r.slice_ssim);
  CHECK(back.fa_errors == r.fa_errors);
  CHECK(back.method == "diffusion");
  const auto table = r.to_table();
  for (const char* col : {"Method", "Image FID", "Image SSIM", "FA Error", "FA Map SSIM"}) {
    CHECK(table.find(col) != std::string::npos);
  }
}

}
