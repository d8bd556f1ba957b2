#include "qup/baselines.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace qup::baselines {

namespace {

std::string describe(std::span<const Vec3> refs) {
  std::ostringstream os;
  os << "{";
  for (std::size_t i = 0; i < refs.size(); ++i) os << (i ? ", " : "") << format_vec(refs[i]);
  os << "}";
  return os.str();
}

}  // namespace

std::vector<double> interp_coefficients(const Vec3& target, std::span<const Vec3> refs,
                                        const InterpOptions& options) {
  if (refs.size() < 3) throw ValidationError("interp: need at least 3 references");
  if (!is_unit(target)) throw ValidationError("interp: target " + format_vec(target) + " is not unit norm");
  const Eigen::Index r = static_cast<Eigen::Index>(refs.size());
  Eigen::MatrixXd basis(3, r);
  std::vector<double> sign(refs.size(), 1.0);
  for (Eigen::Index i = 0; i < r; ++i) {
    const Vec3& b = refs[static_cast<std::size_t>(i)];
    if (!is_unit(b)) throw ValidationError("interp: reference " + format_vec(b) + " is not unit norm");
    if (options.antipodal_flip && b.dot(target) < 0.0) sign[static_cast<std::size_t>(i)] = -1.0;
    basis.col(i) = sign[static_cast<std::size_t>(i)] * b;
  }

  std::vector<double> c(refs.size(), 0.0);
  bool exact = false;
  for (Eigen::Index i = 0; i < r && !exact; ++i) {
    if ((basis.col(i) - target).norm() <= 1e-12) {
      c[static_cast<std::size_t>(i)] = 1.0;
      exact = true;
    }
  }
  if (!exact) {
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(basis);
    cod.setThreshold(1e-10);
    if (cod.rank() < 3) {
      throw ValidationError("interp: reference set " + describe(refs) + " spans fewer than 3 dimensions");
    }
    Eigen::VectorXd x;
    if (r == 3) {
      x = basis.fullPivLu().solve(target);
    } else {
      x = cod.solve(target);
    }
    for (Eigen::Index i = 0; i < r; ++i) c[static_cast<std::size_t>(i)] = x(i);
  }
  if (options.renormalize) {
    double sum = 0.0;
    for (double v : c) sum += v;
    if (std::abs(sum) < 1e-12) throw ValidationError("interp: coefficients sum to zero, cannot renormalize");
    for (double& v : c) v /= sum;
  }
  // The signal is even in the gradient, so a flipped reference uses the same image.
  return c;
}

DWISlice interp_slice(std::span<const double> coefficients, std::span<const DWISlice* const> refs) {
  if (coefficients.size() != refs.size() || refs.empty()) {
    throw ValidationError("interp: " + std::to_string(coefficients.size()) + " coefficients for " +
                          std::to_string(refs.size()) + " references");
  }
  DWISlice out = *refs[0];
  std::fill(out.pixels.begin(), out.pixels.end(), 0.0);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (!refs[i]->same_shape(out)) throw ValidationError("interp: reference slice shapes differ");
    const double c = coefficients[i];
    const auto& px = refs[i]->pixels;
    for (std::size_t p = 0; p < px.size(); ++p) out.pixels[p] += c * px[p];
  }
  for (double& v : out.pixels) v = std::max(v, 0.0);
  return out;
}

// GAN configuration.

void GANConfig::validate() const {
  if (lambda_G < 0.0 || lambda_V < 0.0) throw ValidationError("gan: lambda_G and lambda_V must be >= 0");
  if (disc_updates_per_two_gen < 0) throw ValidationError("gan: disc_updates_per_two_gen must be >= 0");
}

nlohmann::json GANConfig::to_json() const {
  return {{"lambda_G", lambda_G},
          {"lambda_V", lambda_V},
          {"disc_updates_per_two_gen", disc_updates_per_two_gen},
          {"generator_step", generator_step},
          {"generator_optimizer", generator_optimizer.to_json()},
          {"discriminator_optimizer", discriminator_optimizer.to_json()}};
}

GANConfig GANConfig::from_json(const nlohmann::json& j) {
  GANConfig c;
  c.lambda_G = j.value("lambda_G", c.lambda_G);
  c.lambda_V = j.value("lambda_V", c.lambda_V);
  c.disc_updates_per_two_gen = j.value("disc_updates_per_two_gen", c.disc_updates_per_two_gen);
  c.generator_step = j.value("generator_step", c.generator_step);
  if (j.contains("generator_optimizer")) c.generator_optimizer = nn::AdamConfig::from_json(j["generator_optimizer"]);
  // Shared learning rate unless the discriminator has its own block.
  c.discriminator_optimizer = j.contains("discriminator_optimizer")
                                  ? nn::AdamConfig::from_json(j["discriminator_optimizer"])
                                  : c.generator_optimizer;
  c.validate();
  return c;
}

int PatchGanConfig::receptive_field() const {
  int rf = 1;
  rf = rf + 3;  // output conv, stride 1
  rf = rf + 3;  // stride-1 conv
  for (int i = 0; i < strided_layers; ++i) rf = rf * 2 + 2;
  return rf;
}

int PatchGanConfig::output_size(int size) const {
  for (int i = 0; i < strided_layers; ++i) size = (size + 2 - 4) / 2 + 1;
  size = size - 1;
  size = size - 1;
  return size;
}

void PatchGanConfig::validate() const {
  if (references < 1 || base_channels < 1 || strided_layers < 1 || token_dim < 1) {
    throw ValidationError("patchgan: references, base_channels, strided_layers and token_dim must be positive");
  }
}

nlohmann::json PatchGanConfig::to_json() const {
  return {{"references", references},
          {"base_channels", base_channels},
          {"strided_layers", strided_layers},
          {"token_dim", token_dim}};
}

PatchGanConfig PatchGanConfig::from_json(const nlohmann::json& j) {
  PatchGanConfig c;
  c.references = j.value("references", c.references);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.strided_layers = j.value("strided_layers", c.strided_layers);
  c.token_dim = j.value("token_dim", c.token_dim);
  c.validate();
  return c;
}

PatchGanConfig PatchGanConfig::desk(int references) { return {references, 16, 1, 16}; }
PatchGanConfig PatchGanConfig::paper(int references) { return {references, 64, 3, 32}; }

// Discriminator.

template <typename T>
PatchDiscriminator<T>::PatchDiscriminator(const PatchGanConfig& config, std::uint64_t seed)
    : config_(config),
      token_embed_("disc.tokens", 3, config.token_dim),
      attn_("disc.attn", config.base_channels, config.token_dim, config.token_dim) {
  config_.validate();
  const int cap = 8 * config.base_channels;
  int ch = config.base_channels;
  convs_.emplace_back("disc.conv0", config.in_channels(), ch, 4, 2, 1);
  for (int i = 1; i < config.strided_layers; ++i) {
    const int next = std::min(2 * ch, cap);
    convs_.emplace_back("disc.conv" + std::to_string(i), ch, next, 4, 2, 1);
    ch = next;
  }
  const int next = std::min(2 * ch, cap);
  convs_.emplace_back("disc.conv" + std::to_string(config.strided_layers), ch, next, 4, 1, 1);
  convs_.emplace_back("disc.out", next, 1, 4, 1, 1);
  acts_.assign(convs_.size() - 1, nn::LeakyReLU<T>(T(0.2)));

  std::mt19937_64 rng(derive_seed(seed, 0xD15C));
  token_embed_.init(rng);
  for (auto& c : convs_) c.init(rng);
  attn_.init(rng);
}

template <typename T>
nn::Tensor<T> PatchDiscriminator<T>::forward(const nn::Tensor<T>& x, const nn::Tensor<T>& bmatrix) {
  if (x.c != config_.in_channels()) {
    throw ValidationError("discriminator: input has " + std::to_string(x.c) + " channels, expected " +
                          std::to_string(config_.in_channels()));
  }
  if (bmatrix.n != x.n || bmatrix.c != 3 || bmatrix.w != config_.in_channels()) {
    throw ValidationError("discriminator: bmatrix has " + std::to_string(bmatrix.w) + " rows, expected R+1 = " +
                          std::to_string(config_.in_channels()));
  }
  if (config_.output_size(x.h) < 1 || config_.output_size(x.w) < 1) {
    throw ValidationError("discriminator: input " + std::to_string(x.h) + "x" + std::to_string(x.w) +
                          " is smaller than one patch");
  }
  tokens_ = token_embed_.forward(bmatrix);
  nn::Tensor<T> h = acts_[0].forward(convs_[0].forward(x));
  h += attn_.forward(h, tokens_);
  for (std::size_t i = 1; i < convs_.size(); ++i) {
    h = convs_[i].forward(h);
    if (i < acts_.size()) h = acts_[i].forward(h);
  }
  return h;
}

template <typename T>
nn::Tensor<T> PatchDiscriminator<T>::backward(const nn::Tensor<T>& dlogits) {
  nn::Tensor<T> d = dlogits;
  for (std::size_t i = convs_.size() - 1; i >= 1; --i) {
    if (i < acts_.size()) d = acts_[i].backward(d);
    d = convs_[i].backward(d);
  }
  nn::Tensor<T> dtokens(tokens_.n, tokens_.c, tokens_.h, tokens_.w);
  d += attn_.backward(d, dtokens);
  token_embed_.backward(dtokens);
  return convs_[0].backward(acts_[0].backward(d));
}

template <typename T>
std::vector<nn::Param<T>*> PatchDiscriminator<T>::params() {
  std::vector<nn::Param<T>*> out = token_embed_.params();
  for (auto& c : convs_) {
    for (auto* p : c.params()) out.push_back(p);
  }
  for (auto* p : attn_.params()) out.push_back(p);
  return out;
}

template <typename T>
void PatchDiscriminator<T>::zero_grad() {
  for (auto* p : params()) p->zero_grad();
}

template class PatchDiscriminator<float>;
template class PatchDiscriminator<double>;

// Losses.

double bce_with_logits(const nn::Tensor<float>& logits, bool real, nn::Tensor<float>* grad) {
  if (grad) *grad = nn::Tensor<float>(logits.n, logits.c, logits.h, logits.w);
  const double inv = 1.0 / static_cast<double>(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double l = real ? -static_cast<double>(logits.data[i]) : static_cast<double>(logits.data[i]);
    // softplus(l) = max(l, 0) + log1p(exp(-|l|))
    sum += std::max(l, 0.0) + std::log1p(std::exp(-std::abs(l)));
    if (grad) {
      const double s = 1.0 / (1.0 + std::exp(-l));
      grad->data[i] = static_cast<float>((real ? -s : s) * inv);
    }
  }
  return sum * inv;
}

double l1_loss(const nn::Tensor<float>& a, const nn::Tensor<float>& b, nn::Tensor<float>* grad) {
  if (!a.same_shape(b)) throw ValidationError("l1: shape mismatch");
  if (grad) *grad = nn::Tensor<float>(a.n, a.c, a.h, a.w);
  const double inv = 1.0 / static_cast<double>(a.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    sum += std::abs(d);
    if (grad) grad->data[i] = static_cast<float>((d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) * inv);
  }
  return sum * inv;
}

// cGAN.

nn::Tensor<float> pack_generator_input(std::span<const diffusion::ConditioningSample> batch) {
  if (batch.empty()) throw ValidationError("cgan: empty batch");
  std::vector<std::vector<double>> zeros;
  std::vector<std::vector<const DWISlice*>> refs;
  for (const auto& s : batch) {
    s.validate();
    zeros.emplace_back(s.target.pixels.size(), 0.0);
    std::vector<const DWISlice*> r;
    for (const auto& ref : s.references) r.push_back(&ref);
    refs.push_back(std::move(r));
  }
  return diffusion::pack_input(zeros, refs, batch[0].target.height, batch[0].target.width);
}

CGanModel::CGanModel(const denoiser::DenoiserConfig& generator, const PatchGanConfig& discriminator,
                     const GANConfig& config, std::uint64_t seed)
    : config_(config),
      generator_(generator, derive_seed(seed, 1)),
      discriminator_(discriminator, derive_seed(seed, 2)),
      gen_opt_(generator_.params(), config.generator_optimizer),
      disc_opt_(discriminator_.params(), config.discriminator_optimizer) {
  config_.validate();
  if (generator.references != discriminator.references) {
    throw ValidationError("cgan: generator and discriminator disagree on the reference count");
  }
}

nn::Tensor<float> CGanModel::generate(const nn::Tensor<float>& references_input,
                                      const nn::Tensor<float>& bmatrix) {
  const std::vector<int> steps(static_cast<std::size_t>(references_input.n), config_.generator_step);
  return generator_.forward(references_input, steps, bmatrix);
}

GanStepResult cgan_train_step(std::span<const diffusion::ConditioningSample> batch, CGanModel& model) {
  const nn::Tensor<float> input = pack_generator_input(batch);
  std::vector<std::vector<Vec3>> rows;
  std::vector<std::vector<double>> targets;
  for (const auto& s : batch) {
    rows.push_back(s.bmatrix);
    targets.push_back(s.target.pixels);
  }
  const nn::Tensor<float> bm = diffusion::pack_bmatrix(rows);
  nn::Tensor<float> zero_target, refs;
  nn::split_channels(input, 1, zero_target, refs);
  nn::Tensor<float> real(input.n, 1, input.h, input.w);
  for (int i = 0; i < input.n; ++i) {
    std::transform(targets[static_cast<std::size_t>(i)].begin(), targets[static_cast<std::size_t>(i)].end(),
                   real.channel(i, 0), [](double v) { return static_cast<float>(v); });
  }

  auto& gen = model.generator_;
  auto& disc = model.discriminator_;
  const GANConfig& cfg = model.config_;
  GanStepResult result;

  // Generator update.
  nn::Tensor<float> fake = model.generate(input, bm);
  nn::Tensor<float> dlogits, dl1;
  const nn::Tensor<float> logits = disc.forward(nn::concat_channels(fake, refs), bm);
  result.adversarial = bce_with_logits(logits, true, &dlogits);
  result.l1 = l1_loss(fake, real, &dl1);
  result.generator_loss = cfg.lambda_G * result.adversarial + cfg.lambda_V * result.l1;
  for (auto& v : dlogits.data) v *= static_cast<float>(cfg.lambda_G);
  const nn::Tensor<float> dx = disc.backward(dlogits);
  disc.zero_grad();
  nn::Tensor<float> dfake, drest;
  nn::split_channels(dx, 1, dfake, drest);
  for (std::size_t i = 0; i < dfake.size(); ++i) dfake.data[i] += static_cast<float>(cfg.lambda_V) * dl1.data[i];
  gen.backward(dfake);
  model.gen_opt_.step();
  ++model.generator_updates_;

  // Discriminator: once per two generator updates (times the configured count).
  const bool update = model.generator_updates_ % 2 == 0 && cfg.disc_updates_per_two_gen > 0;
  const int rounds = update ? cfg.disc_updates_per_two_gen : 1;
  for (int k = 0; k < rounds; ++k) {
    fake = model.generate(input, bm);
    nn::Tensor<float> g;
    const double lr = bce_with_logits(disc.forward(nn::concat_channels(real, refs), bm), true, &g);
    if (update) disc.backward(g);
    const double lf = bce_with_logits(disc.forward(nn::concat_channels(fake, refs), bm), false, &g);
    if (update) {
      disc.backward(g);
      model.disc_opt_.step();
      ++model.discriminator_updates_;
    }
    result.discriminator_loss = lr + lf;
  }
  result.discriminator_updated = update;
  gen.zero_grad();
  return result;
}

}  // namespace qup::baselines
