#include "helpers.hpp"

#include "qup/baselines.hpp"

#include <doctest.h>

#include <cmath>

using namespace qup;
using baselines::InterpOptions;

namespace {

Vec3 combine(const std::vector<double>& c, const std::vector<Vec3>& refs) {
  Vec3 v = Vec3::Zero();
  for (std::size_t i = 0; i < refs.size(); ++i) v += c[i] * refs[i];
  return v;
}

DWISlice slice_of(std::vector<double> px, int h, int w) {
  DWISlice s;
  s.height = h;
  s.width = w;
  s.pixels = std::move(px);
  return s;
}

diffusion::ConditioningSample tiny_sample(std::mt19937_64& rng, int size) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  diffusion::ConditioningSample s;
  s.target = slice_of(std::vector<double>(static_cast<std::size_t>(size * size)), size, size);
  for (auto& p : s.target.pixels) p = u(rng);
  s.bmatrix.push_back(testing::random_unit(rng));
  for (int r = 0; r < 3; ++r) {
    s.references.push_back(s.target);
    for (auto& p : s.references.back().pixels) p = u(rng);
    s.bmatrix.push_back(testing::random_unit(rng));
  }
  return s;
}

denoiser::DenoiserConfig tiny_unet() {
  denoiser::DenoiserConfig c;
  c.channels = {4, 4};
  c.token_dim = 4;
  c.time_dim = 8;
  return c;
}

baselines::PatchGanConfig tiny_disc() { return {3, 4, 1, 4}; }

}  // namespace

TEST_SUITE("baselines") {

TEST_CASE("interp coefficients: diagonal target on the axes") {
  const std::vector<Vec3> refs{Vec3::UnitX(), Vec3::UnitY(), Vec3::UnitZ()};
  const Vec3 g = Vec3(1, 1, 0).normalized();
  const auto c = baselines::interp_coefficients(g, refs);
  CHECK(c[0] == doctest::Approx(0.70710678).epsilon(1e-8));
  CHECK(c[1] == doctest::Approx(0.70710678).epsilon(1e-8));
  CHECK(std::abs(c[2]) <= 1e-15);
}

TEST_CASE("interp coefficients reproduce the target") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const int r = 3 + trial % 4;
    std::vector<Vec3> refs;
    for (int i = 0; i < r; ++i) refs.push_back(testing::random_unit(rng));
    const Vec3 g = testing::random_unit(rng);
    const auto c = baselines::interp_coefficients(g, refs);
    CHECK((combine(c, refs) - g).norm() <= 1e-10);
  }
}

TEST_CASE("interp for R > 3 returns the minimum-norm solution") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Vec3> refs;
    for (int i = 0; i < 5; ++i) refs.push_back(testing::random_unit(rng));
    const Vec3 g = testing::random_unit(rng);
    const auto c = baselines::interp_coefficients(g, refs);
    Eigen::MatrixXd B(3, 5);
    for (int i = 0; i < 5; ++i) B.col(i) = refs[static_cast<std::size_t>(i)];
    const Eigen::VectorXd cv = Eigen::Map<const Eigen::VectorXd>(c.data(), 5);
    // Minimum norm <=> c lies in the row space of B: no component in ker(B).
    const Eigen::MatrixXd ker = B.fullPivLu().kernel();
    CHECK((ker.transpose() * cv).norm() <= 1e-10);
    // Oracle: pseudo-inverse via the normal equations of B B^T.
    const Eigen::VectorXd oracle = B.transpose() * (B * B.transpose()).inverse() * g;
    CHECK((cv - oracle).norm() <= 1e-9);
  }
}

TEST_CASE("interp rejects degenerate reference sets") {
  const std::vector<Vec3> coplanar{Vec3::UnitX(), Vec3::UnitY(), Vec3(1, 1, 0).normalized()};
  CHECK_THROWS_AS(baselines::interp_coefficients(Vec3::UnitZ(), coplanar), ValidationError);
  const std::vector<Vec3> two{Vec3::UnitX(), Vec3::UnitY()};
  CHECK_THROWS_AS(baselines::interp_coefficients(Vec3::UnitZ(), two), ValidationError);
  const std::vector<Vec3> bad{Vec3(2, 0, 0), Vec3::UnitY(), Vec3::UnitZ()};
  CHECK_THROWS_AS(baselines::interp_coefficients(Vec3::UnitZ(), bad), ValidationError);
}

TEST_CASE("interp: target equal to a reference selects it") {
  std::mt19937_64 rng(3);
  std::vector<Vec3> refs;
  for (int i = 0; i < 4; ++i) refs.push_back(testing::random_unit(rng));
  const auto c = baselines::interp_coefficients(refs[2], refs);
  CHECK(c == std::vector<double>{0.0, 0.0, 1.0, 0.0});
}

TEST_CASE("interp options") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Vec3> refs;
    for (int i = 0; i < 3; ++i) refs.push_back(testing::random_unit(rng));
    const Vec3 g = testing::random_unit(rng);
    const auto plain = baselines::interp_coefficients(g, refs);
    double sum = 0.0;
    for (double v : plain) sum += v;
    if (std::abs(sum) < 1e-3) continue;
    const auto renorm = baselines::interp_coefficients(g, refs, {.renormalize = true});
    double rs = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      rs += renorm[i];
      CHECK(renorm[i] == doctest::Approx(plain[i] / sum).epsilon(1e-12));
    }
    CHECK(rs == doctest::Approx(1.0).epsilon(1e-12));

    // Flipping references towards the target negates their coefficients.
    const auto flipped = baselines::interp_coefficients(g, refs, {.antipodal_flip = true});
    for (std::size_t i = 0; i < 3; ++i) {
      const double s = refs[i].dot(g) < 0.0 ? -1.0 : 1.0;
      CHECK(flipped[i] == doctest::Approx(s * plain[i]).epsilon(1e-9));
    }
  }
}

TEST_CASE("interp_slice is the clipped weighted sum") {
  const auto a = slice_of({1, 2, 3, 4}, 2, 2);
  const auto b = slice_of({0, 1, 0, 1}, 2, 2);
  const auto c = slice_of({5, 0, 0, 0}, 2, 2);
  const std::vector<const DWISlice*> refs{&a, &b, &c};
  const std::vector<double> coef{0.5, 2.0, -1.0};
  const auto out = baselines::interp_slice(coef, refs);
  CHECK(out.pixels == std::vector<double>{0.0, 3.0, 1.5, 4.0});
  CHECK_THROWS_AS(baselines::interp_slice(std::vector<double>{1.0}, refs), ValidationError);
  const auto wrong = slice_of({1, 2}, 1, 2);
  const std::vector<const DWISlice*> mixed{&a, &wrong};
  CHECK_THROWS_AS(baselines::interp_slice(std::vector<double>{1.0, 1.0}, mixed), ValidationError);
}

TEST_CASE("interp_slice is linear on non-negative combinations") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<DWISlice> s(3, slice_of(std::vector<double>(12), 3, 4));
  for (auto& x : s)
    for (auto& p : x.pixels) p = u(rng);
  const std::vector<const DWISlice*> refs{&s[0], &s[1], &s[2]};
  const std::vector<double> c1{0.2, 0.3, 0.1}, c2{0.5, 0.0, 0.4}, c12{0.7, 0.3, 0.5};
  const auto a = baselines::interp_slice(c1, refs);
  const auto b = baselines::interp_slice(c2, refs);
  const auto ab = baselines::interp_slice(c12, refs);
  for (std::size_t p = 0; p < 12; ++p) CHECK(ab.pixels[p] == doctest::Approx(a.pixels[p] + b.pixels[p]).epsilon(1e-12));
}

TEST_CASE("gan defaults and config round trip") {
  const baselines::GANConfig g;
  CHECK(g.lambda_G == 1.0);
  CHECK(g.lambda_V == 100.0);
  CHECK(g.disc_updates_per_two_gen == 1);
  nlohmann::json j = {{"lambda_V", 10.0}, {"generator_optimizer", {{"lr", 1e-3}}}};
  const auto c = baselines::GANConfig::from_json(j);
  CHECK(c.lambda_G == 1.0);
  CHECK(c.lambda_V == 10.0);
  CHECK(c.discriminator_optimizer.lr == 1e-3);
  CHECK(baselines::GANConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK_THROWS_AS(baselines::GANConfig::from_json({{"lambda_G", -1.0}}), ValidationError);
}

TEST_CASE("patchgan output size formula matches the network") {
  for (const auto& cfg : {baselines::PatchGanConfig{3, 4, 1, 4}, baselines::PatchGanConfig{3, 4, 2, 4},
                          baselines::PatchGanConfig{3, 2, 3, 4}}) {
    baselines::PatchDiscriminator<float> d(cfg, 1);
    for (int size : {24, 31, 40}) {
      nn::Tensor<float> x(1, 4, size, size + 3, 0.5f);
      nn::Tensor<float> b(1, 3, 1, 4, 0.5f);
      const auto y = d.forward(x, b);
      CHECK(y.c == 1);
      CHECK(y.h == cfg.output_size(size));
      CHECK(y.w == cfg.output_size(size + 3));
    }
  }
  CHECK(baselines::PatchGanConfig::desk().output_size(64) == 30);
  CHECK(baselines::PatchGanConfig::paper().output_size(256) == 30);
}

TEST_CASE("patchgan receptive field matches an impulse backward pass") {
  auto extent = [](const baselines::PatchGanConfig& cfg, int size) {
    baselines::PatchDiscriminator<float> d(cfg, 7);
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    nn::Tensor<float> x(1, 4, size, size);
    for (auto& v : x.data) v = u(rng);
    nn::Tensor<float> b(1, 3, 1, 4);
    for (auto& v : b.data) v = u(rng);
    const auto y = d.forward(x, b);
    nn::Tensor<float> dy(1, 1, y.h, y.w);
    dy.at(0, 0, y.h / 2, y.w / 2) = 1.0f;
    const auto dx = d.backward(dy);
    int lo = size, hi = -1;
    for (int yy = 0; yy < size; ++yy) {
      for (int xx = 0; xx < size; ++xx) {
        bool any = false;
        for (int ch = 0; ch < 4; ++ch) any = any || dx.at(0, ch, yy, xx) != 0.0f;
        if (any) {
          lo = std::min(lo, xx);
          hi = std::max(hi, xx);
        }
      }
    }
    return hi - lo + 1;
  };
  CHECK(baselines::PatchGanConfig::desk().receptive_field() == 16);
  CHECK(baselines::PatchGanConfig::paper().receptive_field() == 70);
  CHECK(extent(baselines::PatchGanConfig::desk(), 48) == 16);
  baselines::PatchGanConfig paper_thin = baselines::PatchGanConfig::paper();
  paper_thin.base_channels = 4;  // same geometry, cheaper
  CHECK(extent(paper_thin, 128) == 70);
}

TEST_CASE("discriminator gradients match central differences") {
  baselines::PatchDiscriminator<double> d(tiny_disc(), 3);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  nn::Tensor<double> x(2, 4, 12, 12), b(2, 3, 1, 4);
  for (auto& v : x.data) v = n(rng);
  for (auto& v : b.data) v = n(rng);
  const auto y0 = d.forward(x, b);
  nn::Tensor<double> w(y0.n, y0.c, y0.h, y0.w);
  for (auto& v : w.data) v = n(rng);
  auto objective = [&] {
    const auto y = d.forward(x, b);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += w.data[i] * y.data[i];
    return s;
  };
  d.zero_grad();
  objective();
  const auto dx = d.backward(w);
  const double h = 1e-6;
  for (auto* p : d.params()) {
    for (std::size_t k = 0; k < p->size(); k += std::max<std::size_t>(1, p->size() / 7)) {
      const double orig = p->value[k];
      p->value[k] = orig + h;
      const double up = objective();
      p->value[k] = orig - h;
      const double down = objective();
      p->value[k] = orig;
      const double fd = (up - down) / (2 * h);
      CHECK_MESSAGE(std::abs(fd - p->grad[k]) <= 1e-6 * std::max(1.0, std::abs(fd)), p->name);
    }
  }
  for (std::size_t k = 0; k < x.size(); k += 37) {
    const double orig = x.data[k];
    x.data[k] = orig + h;
    const double up = objective();
    x.data[k] = orig - h;
    const double down = objective();
    x.data[k] = orig;
    CHECK(std::abs((up - down) / (2 * h) - dx.data[k]) <= 1e-6);
  }
}

TEST_CASE("discriminator rejects bad shapes") {
  baselines::PatchDiscriminator<float> d(tiny_disc(), 1);
  CHECK_THROWS_AS(d.forward(nn::Tensor<float>(1, 3, 16, 16), nn::Tensor<float>(1, 3, 1, 4)), ValidationError);
  CHECK_THROWS_AS(d.forward(nn::Tensor<float>(1, 4, 16, 16), nn::Tensor<float>(1, 3, 1, 3)), ValidationError);
  CHECK_THROWS_AS(d.forward(nn::Tensor<float>(1, 4, 4, 4), nn::Tensor<float>(1, 3, 1, 4)), ValidationError);
}

TEST_CASE("bce and l1 losses") {
  nn::Tensor<float> z(1, 1, 3, 3), g;
  CHECK(baselines::bce_with_logits(z, true, &g) + baselines::bce_with_logits(z, false, nullptr) ==
        doctest::Approx(2 * std::log(2.0)).epsilon(1e-12));
  CHECK(g.data[0] == doctest::Approx(-0.5 / 9));
  nn::Tensor<float> big(1, 1, 1, 2);
  big.data = {80.0f, -80.0f};
  const double l = baselines::bce_with_logits(big, true, nullptr);
  CHECK(std::isfinite(l));
  CHECK(l == doctest::Approx(40.0).epsilon(1e-6));
  // Oracle: -log(sigmoid(l)).
  nn::Tensor<float> one(1, 1, 1, 1, 0.3f);
  CHECK(baselines::bce_with_logits(one, true, nullptr) == doctest::Approx(-std::log(1 / (1 + std::exp(-0.3)))).epsilon(1e-7));

  nn::Tensor<float> a(1, 1, 2, 2), b(1, 1, 2, 2);
  a.data = {1, 2, 3, 4};
  b.data = a.data;
  CHECK(baselines::l1_loss(a, b, &g) == 0.0);
  for (float v : g.data) CHECK(v == 0.0f);
  b.data = {0, 2, 5, 4};
  CHECK(baselines::l1_loss(a, b, &g) == doctest::Approx(0.75));
  CHECK(g.data == std::vector<float>{0.25f, 0.0f, -0.25f, 0.0f});
}

TEST_CASE("cgan generator input zeroes the target channel") {
  std::mt19937_64 rng(10);
  std::vector<diffusion::ConditioningSample> batch{tiny_sample(rng, 8)};
  const auto in = baselines::pack_generator_input(batch);
  REQUIRE(in.c == 4);
  for (std::size_t p = 0; p < in.plane(); ++p) {
    CHECK(in.channel(0, 0)[p] == 0.0f);
    CHECK(in.channel(0, 2)[p] == static_cast<float>(batch[0].references[1].pixels[p]));
  }
}

TEST_CASE("cgan update bookkeeping") {
  std::mt19937_64 rng(11);
  std::vector<diffusion::ConditioningSample> batch{tiny_sample(rng, 16), tiny_sample(rng, 16)};
  baselines::GANConfig cfg;
  cfg.generator_optimizer.lr = cfg.discriminator_optimizer.lr = 1e-3;
  baselines::CGanModel model(tiny_unet(), tiny_disc(), cfg, 1);
  int updated = 0;
  for (int i = 1; i <= 100; ++i) {
    const auto r = baselines::cgan_train_step(batch, model);
    CHECK(r.discriminator_updated == (i % 2 == 0));
    CHECK(std::isfinite(r.generator_loss));
    CHECK(r.generator_loss == doctest::Approx(r.adversarial + 100.0 * r.l1));
    updated += r.discriminator_updated;
    if (i == 4) {
      CHECK(model.generator_updates() == 4);
      CHECK(model.discriminator_updates() == 2);
    }
  }
  CHECK(model.generator_updates() == 100);
  CHECK(model.discriminator_updates() == 50);
  CHECK(updated == 50);
  CHECK(model.generator_optimizer().steps() == 100);
  CHECK(model.discriminator_optimizer().steps() == 50);

  baselines::GANConfig twice = cfg;
  twice.disc_updates_per_two_gen = 3;
  baselines::CGanModel m2(tiny_unet(), tiny_disc(), twice, 2);
  for (int i = 0; i < 10; ++i) baselines::cgan_train_step(batch, m2);
  CHECK(m2.discriminator_updates() == 15);
}

TEST_CASE("cgan L1 training reduces the reconstruction error") {
  std::mt19937_64 rng(12);
  std::vector<diffusion::ConditioningSample> batch{tiny_sample(rng, 8)};
  baselines::GANConfig cfg;
  cfg.generator_optimizer.lr = cfg.discriminator_optimizer.lr = 3e-3;
  cfg.lambda_G = 0.0;
  baselines::CGanModel model(tiny_unet(), tiny_disc(), cfg, 3);
  const double first = baselines::cgan_train_step(batch, model).l1;
  double last = first;
  for (int i = 0; i < 150; ++i) last = baselines::cgan_train_step(batch, model).l1;
  CHECK(last < 0.5 * first);
}

TEST_CASE("cgan rejects mismatched reference counts") {
  auto d = tiny_disc();
  d.references = 4;
  CHECK_THROWS_AS(baselines::CGanModel(tiny_unet(), d, {}, 1), ValidationError);
}

}
