#include "qup/training.hpp"

#include "qup/metrics.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace qup::training {

namespace {

constexpr char kMagic[8] = {'Q', 'U', 'P', 'C', 'K', 'P', 'T', '1'};

std::shared_ptr<denoiser::CrossAttentionUNet<float>> clone(denoiser::CrossAttentionUNet<float>& net) {
  auto copy = std::make_shared<denoiser::CrossAttentionUNet<float>>(net.config(), 0);
  auto src = net.params();
  auto dst = copy->params();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
  return copy;
}

void write_header(std::ostream& out, const nlohmann::json& header) {
  const std::string text = header.dump();
  out.write(kMagic, sizeof(kMagic));
  std::uint64_t n = text.size();
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((n >> (8 * i)) & 0xFF);
  out.write(b, 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

nlohmann::json read_header(std::istream& in, const std::filesystem::path& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || !std::equal(magic, magic + 8, kMagic)) {
    throw FormatError("checkpoint: " + path.string() + " is not a checkpoint file");
  }
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw FormatError("checkpoint: truncated header");
  std::uint64_t n = 0;
  for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  if (n > (1u << 26)) throw FormatError("checkpoint: implausible header size");
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  if (!in) throw FormatError("checkpoint: truncated header");
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }
}

}  // namespace

// Configuration.

void TrainConfig::validate() const {
  if (method != "diffusion" && method != "cgan") {
    throw ValidationError("train: method must be 'diffusion' or 'cgan', got '" + method + "'");
  }
  denoiser.validate();
  if (steps < 0 || batch_size < 1) throw ValidationError("train: steps must be >= 0 and batch_size >= 1");
  if (log_every < 1) throw ValidationError("train: log_every must be >= 1");
  gan.validate();
  discriminator.validate();
  (void)diffusion::make_schedule(schedule_steps, beta_start, beta_end);
}

nlohmann::json TrainConfig::to_json() const {
  return {{"method", method},
          {"preset", preset},
          {"denoiser", denoiser.to_json()},
          {"schedule", {{"T", schedule_steps}, {"beta_start", beta_start}, {"beta_end", beta_end}}},
          {"optimizer", optimizer.to_json()},
          {"gan", gan.to_json()},
          {"discriminator", discriminator.to_json()},
          {"steps", steps},
          {"batch_size", batch_size},
          {"seed", seed},
          {"augment", augment.to_json()},
          {"log_every", log_every},
          {"validate_every", validate_every},
          {"validation_samples", validation_samples},
          {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, int references) {
  TrainConfig c;
  try {
    c.method = j.value("method", c.method);
    c.preset = j.value("preset", c.preset);
    nlohmann::json net = denoiser::DenoiserConfig::preset(c.preset, references).to_json();
    if (j.contains("denoiser")) net.merge_patch(j["denoiser"]);
    c.denoiser = denoiser::DenoiserConfig::from_json(net);
    if (j.contains("schedule")) {
      const auto& s = j["schedule"];
      c.schedule_steps = s.value("T", c.schedule_steps);
      c.beta_start = s.value("beta_start", c.beta_start);
      c.beta_end = s.value("beta_end", c.beta_end);
    }
    if (j.contains("optimizer")) c.optimizer = nn::AdamConfig::from_json(j["optimizer"]);
    nlohmann::json gan = j.value("gan", nlohmann::json::object());
    if (!gan.contains("generator_optimizer")) gan["generator_optimizer"] = c.optimizer.to_json();
    c.gan = baselines::GANConfig::from_json(gan);
    nlohmann::json disc = (c.preset == "paper" ? baselines::PatchGanConfig::paper(c.denoiser.references)
                                               : baselines::PatchGanConfig::desk(c.denoiser.references))
                              .to_json();
    if (j.contains("discriminator")) disc.merge_patch(j["discriminator"]);
    c.discriminator = baselines::PatchGanConfig::from_json(disc);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    if (j.contains("augment")) c.augment = pipeline::AugmentOptions::from_json(j["augment"]);
    c.log_every = j.value("log_every", c.log_every);
    c.validate_every = j.value("validate_every", c.validate_every);
    c.validation_samples = j.value("validation_samples", c.validation_samples);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// Data.

SliceBank::SliceBank(const DwiSet& set, const pipeline::DatasetManifest& manifest) : scheme_(&manifest.full) {
  if (set.dwi.size() != manifest.full.size()) {
    throw ValidationError("dataset: subject has " + std::to_string(set.dwi.size()) + " volumes, manifest expects " +
                          std::to_string(manifest.full.size()));
  }
  for (std::size_t i = 0; i < set.dwi.size(); ++i) {
    if ((set.dwi[i].direction - manifest.full.directions[i]).norm() > 1e-6) {
      throw ValidationError("dataset: volume " + std::to_string(i) + " direction does not match the manifest");
    }
  }
  if (set.dims().nz != manifest.slices) throw ValidationError("dataset: slice count does not match the manifest");
  slices_.resize(set.dwi.size());
  for (std::size_t i = 0; i < set.dwi.size(); ++i) {
    for (int z = 0; z < manifest.slices; ++z) {
      slices_[i].push_back(pipeline::normalize_slice(extract_slice(set.dwi[i], z)));
    }
  }
}

diffusion::ConditioningSample SliceBank::sample(const pipeline::SampleRecord& record) const {
  diffusion::ConditioningSample s;
  const auto z = static_cast<std::size_t>(record.slice);
  s.target = slices_[record.target][z];
  s.bmatrix.push_back(scheme_->directions[record.target]);
  for (auto r : record.references) {
    s.references.push_back(slices_[r][z]);
    s.bmatrix.push_back(scheme_->directions[r]);
  }
  return s;
}

std::vector<DwiSet> load_split(const pipeline::DatasetManifest& manifest, const std::string& split,
                               const std::filesystem::path& base) {
  std::vector<DwiSet> out;
  for (const auto* s : manifest.subjects_in(split)) {
    std::filesystem::path p(s->path);
    if (p.is_relative()) p = base / p;
    out.push_back(read_dwi_set(p));
  }
  return out;
}

// Trainer.

Trainer::Trainer(TrainConfig config, pipeline::DatasetManifest manifest, const std::vector<DwiSet>& train,
                 const std::vector<DwiSet>& val)
    : config_(std::move(config)), manifest_(std::move(manifest)), rng_(config_.seed) {
  config_.validate();
  manifest_.validate();
  if (config_.denoiser.references != manifest_.references) {
    throw ValidationError("train: config expects R = " + std::to_string(config_.denoiser.references) +
                          ", manifest has R = " + std::to_string(manifest_.references));
  }
  if (train.empty()) throw ValidationError("train: the training split is empty");
  for (const auto& s : train) train_.emplace_back(s, manifest_);
  for (const auto& s : val) val_.emplace_back(s, manifest_);
  for (std::size_t s = 0; s < train_.size(); ++s) {
    for (std::size_t r = 0; r < manifest_.samples.size(); ++r) pool_.emplace_back(s, r);
  }
  if (pool_.empty()) throw ValidationError("train: manifest has no samples");
  schedule_ = diffusion::make_schedule(config_.schedule_steps, config_.beta_start, config_.beta_end);
  if (config_.method == "diffusion") {
    net_ = std::make_shared<denoiser::CrossAttentionUNet<float>>(config_.denoiser, derive_seed(config_.seed, 1));
    optimizer_ = std::make_unique<nn::Adam<float>>(net_->params(), config_.optimizer);
  } else {
    gan_ = std::make_unique<baselines::CGanModel>(config_.denoiser, config_.discriminator, config_.gan,
                                                  derive_seed(config_.seed, 2));
  }
}

std::vector<diffusion::ConditioningSample> Trainer::draw_batch() {
  std::uniform_int_distribution<std::size_t> pick(0, pool_.size() - 1);
  std::vector<diffusion::ConditioningSample> batch;
  for (int i = 0; i < config_.batch_size; ++i) {
    const auto [s, r] = pool_[pick(rng_)];
    auto sample = train_[s].sample(manifest_.samples[r]);
    if (config_.augment.enabled) sample = pipeline::augment(sample, rng_, config_.augment);
    batch.push_back(std::move(sample));
  }
  return batch;
}

StepLog Trainer::step() {
  const auto batch = draw_batch();
  StepLog log;
  if (net_) {
    const auto tb = diffusion::make_training_batch(batch, schedule_, rng_);
    const auto pred = net_->forward(tb.input, tb.steps, tb.bmatrix);
    nn::Tensor<float> grad;
    log.loss = diffusion::noise_mse(pred, tb.noise, &grad);
    net_->backward(grad);
    optimizer_->step();
  } else {
    const auto r = baselines::cgan_train_step(batch, *gan_);
    log.loss = r.generator_loss;
    log.discriminator_loss = r.discriminator_loss;
    log.discriminator_updated = r.discriminator_updated;
  }
  log.step = ++step_;
  return log;
}

std::vector<StepLog> Trainer::run(std::ostream* log, const std::filesystem::path& checkpoint) {
  std::vector<StepLog> out;
  while (step_ < config_.steps) {
    const StepLog s = step();
    out.push_back(s);
    if (log && (s.step % config_.log_every == 0 || s.step == config_.steps)) {
      nlohmann::json line = {{"step", s.step}, {"loss", s.loss}};
      if (gan_) line["discriminator_loss"] = s.discriminator_loss;
      *log << line.dump() << "\n" << std::flush;
    }
    if (config_.validate_every > 0 && s.step % config_.validate_every == 0 && !val_.empty()) {
      const double v = validate();
      if (log) *log << nlohmann::json{{"step", s.step}, {"val_ssim", v}}.dump() << "\n" << std::flush;
    }
    if (!checkpoint.empty() && config_.checkpoint_every > 0 && s.step % config_.checkpoint_every == 0) {
      save(checkpoint);
    }
  }
  return out;
}

std::unique_ptr<pipeline::SliceGenerator> Trainer::generator() const {
  if (net_) return std::make_unique<pipeline::DiffusionGenerator>(net_, schedule_);
  return std::make_unique<pipeline::CGanGenerator>(clone(gan_->generator()), config_.gan.generator_step);
}

std::shared_ptr<denoiser::CrossAttentionUNet<float>> Trainer::network() const {
  return net_ ? net_ : clone(gan_->generator());
}

double Trainer::validate() {
  if (val_.empty() || config_.validation_samples < 1) return std::nan("");
  const std::size_t total = val_.size() * manifest_.samples.size();
  const std::size_t count = std::min<std::size_t>(total, static_cast<std::size_t>(config_.validation_samples));
  std::vector<diffusion::ConditioningSample> samples;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t k = i * total / count;
    samples.push_back(val_[k / manifest_.samples.size()].sample(manifest_.samples[k % manifest_.samples.size()]));
  }
  std::vector<pipeline::GenerationRequest> reqs;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    pipeline::GenerationRequest r;
    for (const auto& ref : samples[i].references) r.references.push_back(&ref);
    r.bmatrix = samples[i].bmatrix;
    r.seed = derive_seed(config_.seed, 0x7A1, i);
    reqs.push_back(std::move(r));
  }
  auto gen = generator();
  const auto out = gen->generate(reqs);
  double sum = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto g = pipeline::mask_output(out[i], reqs[i].references);
    for (double& v : g.pixels) v = std::clamp(v, 0.0, 1.0);
    const auto& t = samples[i].target;
    std::vector<unsigned char> mask(t.pixels.size());
    bool any = false;
    for (std::size_t p = 0; p < mask.size(); ++p) any |= (mask[p] = t.pixels[p] != 0.0) != 0;
    if (!any) std::fill(mask.begin(), mask.end(), 1);
    sum += metrics::ssim({t.height, t.width, g.pixels}, {t.height, t.width, t.pixels}, 1.0, mask);
  }
  return sum / static_cast<double>(samples.size());
}

void Trainer::save(const std::filesystem::path& path) const {
  std::ostringstream rng_state;
  rng_state << rng_;
  nlohmann::json header = {{"format", "qup-checkpoint"},
                           {"version", 1},
                           {"method", config_.method},
                           {"denoiser", config_.denoiser.to_json()},
                           {"schedule", schedule_.to_json()},
                           {"train", config_.to_json()},
                           {"step", step_},
                           {"rng", rng_state.str()}};
  if (gan_) {
    header["gan"] = config_.gan.to_json();
    header["discriminator"] = config_.discriminator.to_json();
    header["generator_updates"] = gan_->generator_updates();
    header["discriminator_updates"] = gan_->discriminator_updates();
  }
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw FormatError("checkpoint: cannot write " + tmp.string());
    write_header(out, header);
    if (net_) {
      nn::write_params(out, net_->params());
      optimizer_->save(out);
    } else {
      nn::write_params(out, gan_->generator().params());
      nn::write_params(out, gan_->discriminator().params());
      gan_->generator_optimizer().save(out);
      gan_->discriminator_optimizer().save(out);
    }
    if (!out) throw FormatError("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void Trainer::resume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + path.string());
  const auto header = read_header(in, path);
  if (header.at("method").get<std::string>() != config_.method) {
    throw ValidationError("resume: checkpoint method '" + header.at("method").get<std::string>() +
                          "' differs from the configured '" + config_.method + "'");
  }
  if (denoiser::DenoiserConfig::from_json(header.at("denoiser")).to_json() != config_.denoiser.to_json()) {
    throw ValidationError("resume: checkpoint denoiser config differs from the configured one");
  }
  if (net_) {
    nn::read_params(in, net_->params());
    optimizer_->load(in);
  } else {
    nn::read_params(in, gan_->generator().params());
    nn::read_params(in, gan_->discriminator().params());
    gan_->generator_optimizer().load(in);
    gan_->discriminator_optimizer().load(in);
    gan_->set_counters(header.at("generator_updates").get<long long>(),
                       header.at("discriminator_updates").get<long long>());
  }
  step_ = header.at("step").get<long long>();
  std::istringstream rng_state(header.at("rng").get<std::string>());
  rng_state >> rng_;
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + path.string());
  return read_header(in, path);
}

LoadedModel load_generator(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + path.string());
  LoadedModel m;
  m.header = read_header(in, path);
  try {
    const auto method = m.header.at("method").get<std::string>();
    const auto config = denoiser::DenoiserConfig::from_json(m.header.at("denoiser"));
    auto net = std::make_shared<denoiser::CrossAttentionUNet<float>>(config, 0);
    nn::read_params(in, net->params());
    if (method == "diffusion") {
      m.generator = std::make_unique<pipeline::DiffusionGenerator>(
          net, diffusion::NoiseSchedule::from_json(m.header.at("schedule")));
    } else if (method == "cgan") {
      const auto gan = baselines::GANConfig::from_json(m.header.at("gan"));
      m.generator = std::make_unique<pipeline::CGanGenerator>(net, gan.generator_step);
    } else {
      throw FormatError("checkpoint: unknown method '" + method + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  return m;
}

}  // namespace qup::training
