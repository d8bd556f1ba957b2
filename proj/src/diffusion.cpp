#include "qup/diffusion.hpp"

#include <cmath>

namespace qup::diffusion {

nlohmann::json NoiseSchedule::to_json() const {
  return {{"T", steps}, {"beta_start", beta_start}, {"beta_end", beta_end}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  return make_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(),
                       j.at("beta_end").get<double>());
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ValidationError("make_schedule: T must be positive");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ValidationError("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    const double a = 1.0 - b;
    prod *= a;
    s.beta.push_back(b);
    s.alpha.push_back(a);
    s.alpha_bar.push_back(prod);
    s.sigma.push_back(std::sqrt(b));
  }
  return s;
}

void ConditioningSample::validate() const {
  if (references.empty()) throw ValidationError("conditioning sample: no references");
  for (const auto& r : references) {
    if (!r.same_shape(target)) {
      throw ValidationError("conditioning sample: reference shape differs from target");
    }
  }
  if (bmatrix.size() != references.size() + 1) {
    throw ValidationError("conditioning sample: bmatrix must have R+1 rows");
  }
  for (const auto& b : bmatrix) {
    if (!is_unit(b)) {
      throw ValidationError("conditioning sample: non-unit bmatrix row " + format_vec(b));
    }
  }
}

DWISlice forward_noise(const DWISlice& x0, int t, std::span<const double> eps,
                       const NoiseSchedule& schedule) {
  if (eps.size() != x0.pixels.size()) throw ValidationError("forward_noise: eps shape mismatch");
  if (t < 1 || t > schedule.steps) throw ValidationError("forward_noise: t out of range");
  const double a = std::sqrt(schedule.alpha_bar_at(t));
  const double s = std::sqrt(1.0 - schedule.alpha_bar_at(t));
  DWISlice out = x0;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = a * x0.pixels[i] + s * eps[i];
  return out;
}

nn::Tensor<float> pack_bmatrix(std::span<const std::vector<Vec3>> rows) {
  if (rows.empty()) return {};
  const int m = static_cast<int>(rows.front().size());
  nn::Tensor<float> b(static_cast<int>(rows.size()), 3, 1, m);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (static_cast<int>(rows[i].size()) != m) {
      throw ValidationError("pack_bmatrix: samples have different reference counts");
    }
    for (int r = 0; r < m; ++r) {
      for (int k = 0; k < 3; ++k) b.at(static_cast<int>(i), k, 0, r) = static_cast<float>(rows[i][r][k]);
    }
  }
  return b;
}

nn::Tensor<float> pack_input(std::span<const std::vector<double>> target_channels,
                             std::span<const std::vector<const DWISlice*>> references, int height,
                             int width) {
  const int n = static_cast<int>(target_channels.size());
  const int r = n > 0 ? static_cast<int>(references.front().size()) : 0;
  nn::Tensor<float> x(n, r + 1, height, width);
  const std::size_t plane = x.plane();
  for (int i = 0; i < n; ++i) {
    if (target_channels[i].size() != plane) throw ValidationError("pack_input: target shape");
    if (static_cast<int>(references[i].size()) != r) {
      throw ValidationError("pack_input: samples have different reference counts");
    }
    float* dst = x.channel(i, 0);
    for (std::size_t k = 0; k < plane; ++k) dst[k] = static_cast<float>(target_channels[i][k]);
    for (int c = 0; c < r; ++c) {
      const auto& px = references[i][c]->pixels;
      if (px.size() != plane) throw ValidationError("pack_input: reference shape");
      float* d = x.channel(i, c + 1);
      for (std::size_t k = 0; k < plane; ++k) d[k] = static_cast<float>(px[k]);
    }
  }
  return x;
}

TrainingBatch make_training_batch(std::span<const ConditioningSample> samples,
                                  const NoiseSchedule& schedule, std::mt19937_64& rng) {
  if (samples.empty()) throw ValidationError("make_training_batch: empty batch");
  const int h = samples.front().target.height;
  const int w = samples.front().target.width;
  std::uniform_int_distribution<int> step(1, schedule.steps);
  std::normal_distribution<double> normal(0.0, 1.0);
  TrainingBatch batch;
  std::vector<std::vector<double>> noisy;
  std::vector<std::vector<const DWISlice*>> refs;
  std::vector<std::vector<Vec3>> rows;
  batch.noise = nn::Tensor<float>(static_cast<int>(samples.size()), 1, h, w);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    s.validate();
    if (s.target.height != h || s.target.width != w) {
      throw ValidationError("make_training_batch: samples differ in shape");
    }
    const int t = step(rng);
    std::vector<double> eps(s.target.pixels.size());
    for (auto& e : eps) e = normal(rng);
    noisy.push_back(forward_noise(s.target, t, eps, schedule).pixels);
    float* dst = batch.noise.channel(static_cast<int>(i), 0);
    for (std::size_t k = 0; k < eps.size(); ++k) dst[k] = static_cast<float>(eps[k]);
    batch.steps.push_back(t);
    std::vector<const DWISlice*> r;
    for (const auto& ref : s.references) r.push_back(&ref);
    refs.push_back(std::move(r));
    rows.push_back(s.bmatrix);
  }
  batch.input = pack_input(noisy, refs, h, w);
  batch.bmatrix = pack_bmatrix(rows);
  return batch;
}

double noise_mse(const nn::Tensor<float>& pred, const nn::Tensor<float>& noise,
                 nn::Tensor<float>* grad) {
  if (!pred.same_shape(noise)) throw ValidationError("noise_mse: shape mismatch");
  double sum = 0.0;
  const double inv = 1.0 / static_cast<double>(pred.size());
  if (grad) *grad = nn::Tensor<float>(pred.n, pred.c, pred.h, pred.w);
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double d = static_cast<double>(pred.data[k]) - noise.data[k];
    sum += d * d;
    if (grad) grad->data[k] = static_cast<float>(2.0 * d * inv);
  }
  return sum * inv;
}

double training_loss(const ConditioningSample& sample, const NoisePredictor& predictor,
                     const NoiseSchedule& schedule, std::mt19937_64& rng) {
  const auto batch = make_training_batch(std::span<const ConditioningSample>(&sample, 1), schedule,
                                         rng);
  return noise_mse(predictor(batch.input, batch.steps, batch.bmatrix), batch.noise);
}

std::vector<DWISlice> sample_batch(std::span<const SampleRequest> requests,
                                   const NoisePredictor& predictor, const NoiseSchedule& schedule,
                                   const StepObserver& observer) {
  if (requests.empty()) return {};
  const auto& first = requests.front();
  if (first.references.empty()) throw ValidationError("sample: no reference slices");
  const int h = first.references.front()->height;
  const int w = first.references.front()->width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const int n = static_cast<int>(requests.size());

  // One generator and one distribution per request: normal_distribution
  // caches values, so sharing it would couple the streams.
  std::vector<std::mt19937_64> rngs;
  std::vector<std::normal_distribution<double>> normals(requests.size());
  std::vector<std::vector<double>> x(requests.size(), std::vector<double>(plane));
  std::vector<std::vector<const DWISlice*>> refs;
  std::vector<std::vector<Vec3>> rows;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    const auto& r = requests[i];
    if (r.bmatrix.size() != r.references.size() + 1) {
      throw ValidationError("sample: bmatrix must have R+1 rows");
    }
    for (const auto* ref : r.references) {
      if (ref->height != h || ref->width != w) throw ValidationError("sample: reference shape");
    }
    rngs.emplace_back(r.seed);
    for (auto& v : x[i]) v = normals[i](rngs.back());
    refs.push_back(r.references);
    rows.push_back(r.bmatrix);
  }
  const nn::Tensor<float> bmatrix = pack_bmatrix(rows);
  nn::Tensor<float> input = pack_input(x, refs, h, w);

  for (int t = schedule.steps; t >= 1; --t) {
    for (int i = 0; i < n; ++i) {
      float* dst = input.channel(i, 0);
      for (std::size_t k = 0; k < plane; ++k) dst[k] = static_cast<float>(x[i][k]);
    }
    if (observer) observer(t, input);
    const nn::Tensor<float> eps = predictor(input, std::vector<int>(n, t), bmatrix);
    if (eps.n != n || eps.c != 1 || eps.h != h || eps.w != w) {
      throw ValidationError("sample: predictor returned the wrong shape");
    }
    const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha_at(t));
    const double coef = schedule.beta_at(t) / std::sqrt(1.0 - schedule.alpha_bar_at(t));
    const double sigma = schedule.sigma_at(t);
    for (int i = 0; i < n; ++i) {
      const float* e = eps.channel(i, 0);
      for (std::size_t k = 0; k < plane; ++k) {
        double v = inv_sqrt_alpha * (x[i][k] - coef * e[k]);
        if (t > 1) v += sigma * normals[i](rngs[i]);
        x[i][k] = v;
      }
    }
  }
  std::vector<DWISlice> out(requests.size());
  for (std::size_t i = 0; i < requests.size(); ++i) {
    out[i].height = h;
    out[i].width = w;
    out[i].pixels = std::move(x[i]);
    out[i].slice_index = requests[i].references.front()->slice_index;
  }
  return out;
}

DWISlice sample(const std::vector<DWISlice>& references, const std::vector<Vec3>& bmatrix,
                const NoisePredictor& predictor, const NoiseSchedule& schedule,
                std::uint64_t seed) {
  SampleRequest req;
  for (const auto& r : references) req.references.push_back(&r);
  req.bmatrix = bmatrix;
  req.seed = seed;
  return sample_batch(std::span<const SampleRequest>(&req, 1), predictor, schedule).front();
}

}  // namespace qup::diffusion
