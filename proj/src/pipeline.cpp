#include "qup/pipeline.hpp"

#include "qup/tensorfit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace qup::pipeline {

DWISlice normalize_slice(const DWISlice& slice) {
  DWISlice out = slice;
  if (slice.pixels.empty()) {
    out.norm_min = out.norm_max = 0.0;
    return out;
  }
  const auto [lo, hi] = std::minmax_element(slice.pixels.begin(), slice.pixels.end());
  out.norm_min = *lo;
  out.norm_max = *hi;
  const double range = out.norm_max - out.norm_min;
  for (double& v : out.pixels) v = range > 0.0 ? (v - out.norm_min) / range : 0.0;
  return out;
}

DWISlice denormalize_slice(const DWISlice& slice) {
  DWISlice out = slice;
  const double range = slice.norm_max - slice.norm_min;
  for (double& v : out.pixels) v = slice.norm_min + v * range;
  out.norm_min = 0.0;
  out.norm_max = 1.0;
  return out;
}

DWISlice mask_output(const DWISlice& generated, std::span<const DWISlice* const> references) {
  DWISlice out = generated;
  std::vector<unsigned char> keep(generated.pixels.size(), 0);
  for (const auto* ref : references) {
    if (!ref->same_shape(generated)) throw ValidationError("mask_output: reference shape differs from output");
    for (std::size_t p = 0; p < keep.size(); ++p) keep[p] |= ref->pixels[p] != 0.0;
  }
  for (std::size_t p = 0; p < keep.size(); ++p) {
    if (!keep[p]) out.pixels[p] = 0.0;
  }
  return out;
}

// Augmentation.

nlohmann::json AugmentOptions::to_json() const {
  return {{"enabled", enabled},
          {"max_angle_deg", max_angle_deg},
          {"scale_min", scale_min},
          {"scale_max", scale_max},
          {"rotate_bvecs", rotate_bvecs}};
}

AugmentOptions AugmentOptions::from_json(const nlohmann::json& j) {
  AugmentOptions o;
  o.enabled = j.value("enabled", o.enabled);
  o.max_angle_deg = j.value("max_angle_deg", o.max_angle_deg);
  o.scale_min = j.value("scale_min", o.scale_min);
  o.scale_max = j.value("scale_max", o.scale_max);
  o.rotate_bvecs = j.value("rotate_bvecs", o.rotate_bvecs);
  if (o.max_angle_deg < 0.0 || !(o.scale_min > 0.0) || o.scale_max < o.scale_min) {
    throw ValidationError("augment: invalid angle or scale range");
  }
  return o;
}

namespace {

DWISlice warp(const DWISlice& in, double c, double s, double scale) {
  DWISlice out = in;
  const double cx = (in.width - 1) / 2.0;
  const double cy = (in.height - 1) / 2.0;
  auto px = [&](int x, int y) {
    return (x < 0 || y < 0 || x >= in.width || y >= in.height)
               ? 0.0
               : in.pixels[static_cast<std::size_t>(y) * in.width + x];
  };
  for (int y = 0; y < in.height; ++y) {
    for (int x = 0; x < in.width; ++x) {
      // Inverse map: output point -> source point.
      const double dx = (x - cx) / scale;
      const double dy = (y - cy) / scale;
      const double sx = cx + c * dx + s * dy;
      const double sy = cy - s * dx + c * dy;
      const double fx = std::floor(sx);
      const double fy = std::floor(sy);
      const double ax = sx - fx;
      const double ay = sy - fy;
      const int x0 = static_cast<int>(fx);
      const int y0 = static_cast<int>(fy);
      double v = (1 - ax) * (1 - ay) * px(x0, y0);
      if (ax != 0.0) v += ax * (1 - ay) * px(x0 + 1, y0);
      if (ay != 0.0) v += (1 - ax) * ay * px(x0, y0 + 1);
      if (ax != 0.0 && ay != 0.0) v += ax * ay * px(x0 + 1, y0 + 1);
      out.pixels[static_cast<std::size_t>(y) * in.width + x] = v;
    }
  }
  return out;
}

}  // namespace

diffusion::ConditioningSample apply_transform(const diffusion::ConditioningSample& sample,
                                              const AugmentParams& params, bool rotate_bvecs) {
  if (!(params.scale > 0.0)) throw ValidationError("augment: scale must be positive");
  diffusion::ConditioningSample out = sample;
  if (params.angle == 0.0 && params.scale == 1.0) return out;
  const double c = std::cos(params.angle);
  const double s = std::sin(params.angle);
  out.target = warp(sample.target, c, s, params.scale);
  for (std::size_t i = 0; i < sample.references.size(); ++i) {
    out.references[i] = warp(sample.references[i], c, s, params.scale);
  }
  if (rotate_bvecs) {
    for (auto& b : out.bmatrix) {
      const Vec3 r(c * b.x() - s * b.y(), s * b.x() + c * b.y(), b.z());
      b = r.normalized();
    }
  }
  return out;
}

diffusion::ConditioningSample augment(const diffusion::ConditioningSample& sample,
                                      std::mt19937_64& rng, const AugmentOptions& options,
                                      AugmentParams* drawn) {
  const double max_angle = options.max_angle_deg * std::numbers::pi / 180.0;
  std::uniform_real_distribution<double> angle(-max_angle, max_angle);
  std::uniform_real_distribution<double> scale(options.scale_min, options.scale_max);
  AugmentParams p;
  p.angle = angle(rng);
  p.scale = scale(rng);
  if (drawn) *drawn = p;
  return apply_transform(sample, p, options.rotate_bvecs);
}

// Dataset manifest.

std::vector<const SubjectEntry*> DatasetManifest::subjects_in(const std::string& split) const {
  std::vector<const SubjectEntry*> out;
  for (const auto& s : subjects) {
    if (s.split == split) out.push_back(&s);
  }
  return out;
}

void DatasetManifest::validate() const {
  full.validate();
  if (references < 1 || references > k_low) {
    throw ValidationError("manifest: references (" + std::to_string(references) + ") must be in [1, k_low = " +
                          std::to_string(k_low) + "]");
  }
  if (low.size() != static_cast<std::size_t>(k_low) || low.size() + targets.size() != full.size()) {
    throw ValidationError("manifest: low and target sets do not partition the full scheme");
  }
  std::vector<int> seen(full.size(), 0);
  for (auto i : low) {
    if (i >= full.size()) throw ValidationError("manifest: low index out of range");
    seen[i] |= 1;
  }
  for (auto i : targets) {
    if (i >= full.size()) throw ValidationError("manifest: target index out of range");
    seen[i] |= 2;
  }
  for (int s : seen) {
    if (s != 1 && s != 2) throw ValidationError("manifest: low and target sets overlap or miss an entry");
  }
  for (const auto& r : samples) {
    if (r.target >= full.size() || seen[r.target] != 2) throw ValidationError("manifest: sample target is not a target");
    if (r.references.size() != static_cast<std::size_t>(references)) {
      throw ValidationError("manifest: sample has the wrong number of references");
    }
    for (auto i : r.references) {
      if (i >= full.size() || seen[i] != 1) throw ValidationError("manifest: sample reference is not in the low set");
    }
    if (r.slice < 0 || r.slice >= slices) throw ValidationError("manifest: sample slice out of range");
  }
  for (const auto& s : subjects) {
    if (s.split != "train" && s.split != "val" && s.split != "test") {
      throw ValidationError("manifest: subject '" + s.id + "' has unknown split '" + s.split + "'");
    }
  }
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json dirs = nlohmann::json::array();
  for (const auto& d : full.directions) dirs.push_back({d.x(), d.y(), d.z()});
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : samples) {
    recs.push_back({{"target", r.target}, {"references", r.references}, {"slice", r.slice}});
  }
  nlohmann::json subs = nlohmann::json::array();
  for (const auto& s : subjects) subs.push_back({{"id", s.id}, {"path", s.path}, {"split", s.split}});
  return {{"seed", seed},
          {"k_low", k_low},
          {"references", references},
          {"slices", slices},
          {"antipodal_references", antipodal_references},
          {"directions", dirs},
          {"bvalues", full.bvalues},
          {"low", low},
          {"targets", targets},
          {"subjects", subs},
          {"samples", recs}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    m.k_low = j.at("k_low").get<int>();
    m.references = j.at("references").get<int>();
    m.slices = j.at("slices").get<int>();
    m.antipodal_references = j.value("antipodal_references", false);
    for (const auto& d : j.at("directions")) m.full.directions.emplace_back(d.at(0), d.at(1), d.at(2));
    m.full.bvalues = j.at("bvalues").get<std::vector<double>>();
    m.low = j.at("low").get<std::vector<std::size_t>>();
    m.targets = j.at("targets").get<std::vector<std::size_t>>();
    for (const auto& s : j.at("subjects")) {
      m.subjects.push_back({s.at("id").get<std::string>(), s.at("path").get<std::string>(),
                            s.at("split").get<std::string>()});
    }
    for (const auto& r : j.at("samples")) {
      m.samples.push_back({r.at("target").get<std::size_t>(),
                           r.at("references").get<std::vector<std::size_t>>(), r.at("slice").get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  m.validate();
  return m;
}

DatasetManifest build_dataset(const qspace::GradientScheme& full, int slices, int k_low, int references,
                              std::uint64_t seed, bool antipodal_references) {
  full.validate();
  if (k_low < 1 || static_cast<std::size_t>(k_low) >= full.size()) {
    throw ValidationError("dataset: k_low must be in [1, " + std::to_string(full.size() - 1) + "]");
  }
  if (references < 1 || references > k_low) {
    throw ValidationError("dataset: R = " + std::to_string(references) + " exceeds k_low = " + std::to_string(k_low));
  }
  if (slices < 1) throw ValidationError("dataset: need at least one slice");
  DatasetManifest m;
  m.seed = seed;
  m.k_low = k_low;
  m.references = references;
  m.slices = slices;
  m.antipodal_references = antipodal_references;
  m.full = full;
  const auto sub = qspace::subsample_even(full, static_cast<std::size_t>(k_low), seed);
  m.low = sub.selected;
  std::sort(m.low.begin(), m.low.end());
  m.targets = sub.complement;
  const auto low_scheme = full.subset(m.low);
  for (auto t : m.targets) {
    const auto nearest = qspace::select_references(low_scheme, full.directions[t],
                                                   static_cast<std::size_t>(references), antipodal_references);
    std::vector<std::size_t> refs;
    for (auto i : nearest) refs.push_back(m.low[i]);
    for (int z = 0; z < slices; ++z) m.samples.push_back({t, refs, z});
  }
  return m;
}

void assign_subjects(DatasetManifest& manifest, const std::vector<std::pair<std::string, std::string>>& subjects,
                     const SplitRatios& ratios) {
  const int total = ratios.train + ratios.val + ratios.test;
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 || total <= 0) {
    throw ValidationError("dataset: split ratios must be non-negative with a positive sum");
  }
  const auto n = static_cast<long>(subjects.size());
  const long n_val = std::lround(static_cast<double>(n) * ratios.val / total);
  const long n_test = std::lround(static_cast<double>(n) * ratios.test / total);
  const long n_train = std::max(0L, n - n_val - n_test);
  for (long i = 0; i < n; ++i) {
    const char* split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
    manifest.subjects.push_back({subjects[static_cast<std::size_t>(i)].first,
                                 subjects[static_cast<std::size_t>(i)].second, split});
  }
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("manifest: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest: " + path.string() + ": " + e.what());
  }
  return DatasetManifest::from_json(j);
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw FormatError("manifest: cannot write " + path.string());
  out << manifest.to_json().dump(1) << "\n";
}

// Generators.

std::vector<DWISlice> InterpGenerator::generate(std::span<const GenerationRequest> requests) {
  std::vector<DWISlice> out;
  out.reserve(requests.size());
  for (const auto& r : requests) {
    const std::vector<Vec3> refs(r.bmatrix.begin() + 1, r.bmatrix.end());
    const auto c = baselines::interp_coefficients(r.bmatrix.front(), refs, options_);
    out.push_back(baselines::interp_slice(c, r.references));
  }
  return out;
}

DiffusionGenerator::DiffusionGenerator(std::shared_ptr<denoiser::CrossAttentionUNet<float>> net,
                                       diffusion::NoiseSchedule schedule)
    : net_(std::move(net)), schedule_(std::move(schedule)) {}

std::vector<DWISlice> DiffusionGenerator::generate(std::span<const GenerationRequest> requests) {
  std::vector<diffusion::SampleRequest> reqs;
  for (const auto& r : requests) reqs.push_back({r.references, r.bmatrix, r.seed});
  auto predictor = [this](const nn::Tensor<float>& x, const std::vector<int>& steps,
                          const nn::Tensor<float>& b) { return net_->forward(x, steps, b); };
  return diffusion::sample_batch(reqs, predictor, schedule_);
}

CGanGenerator::CGanGenerator(std::shared_ptr<denoiser::CrossAttentionUNet<float>> net, int step)
    : net_(std::move(net)), step_(step) {}

std::vector<DWISlice> CGanGenerator::generate(std::span<const GenerationRequest> requests) {
  if (requests.empty()) return {};
  const int h = requests.front().references.front()->height;
  const int w = requests.front().references.front()->width;
  std::vector<std::vector<double>> zeros;
  std::vector<std::vector<const DWISlice*>> refs;
  std::vector<std::vector<Vec3>> rows;
  for (const auto& r : requests) {
    zeros.emplace_back(static_cast<std::size_t>(h) * w, 0.0);
    refs.push_back(r.references);
    rows.push_back(r.bmatrix);
  }
  const auto y = net_->forward(diffusion::pack_input(zeros, refs, h, w),
                               std::vector<int>(requests.size(), step_), diffusion::pack_bmatrix(rows));
  std::vector<DWISlice> out;
  for (int i = 0; i < y.n; ++i) {
    DWISlice s = *requests[static_cast<std::size_t>(i)].references.front();
    std::transform(y.channel(i, 0), y.channel(i, 0) + y.plane(), s.pixels.begin(),
                   [](float v) { return static_cast<double>(v); });
    out.push_back(std::move(s));
  }
  return out;
}

// Up-sampling.

long find_direction(const DwiSet& set, const Vec3& direction, double bvalue) {
  for (std::size_t i = 0; i < set.dwi.size(); ++i) {
    const auto& v = set.dwi[i];
    if (std::abs(v.bvalue - bvalue) <= 1e-6 * std::max(1.0, bvalue) && (v.direction - direction).norm() <= 1e-6) {
      return static_cast<long>(i);
    }
  }
  return -1;
}

std::vector<DWIVolume> generate_volumes(const DwiSet& low, const qspace::GradientScheme& targets,
                                        SliceGenerator& generator, const UpsampleOptions& options) {
  low.validate();
  targets.validate();
  const auto scheme = low.scheme();
  const auto r = static_cast<std::size_t>(generator.references());
  if (r > scheme.size()) {
    throw ValidationError("upsample: generator needs " + std::to_string(r) + " references, only " +
                          std::to_string(scheme.size()) + " acquired");
  }
  const Dims dims = low.dims();
  const bool normalized = generator.normalized();

  // Slices of every acquired volume, in the generator's space.
  std::vector<std::vector<DWISlice>> slices(low.dwi.size());
  for (std::size_t v = 0; v < low.dwi.size(); ++v) {
    for (int z = 0; z < dims.nz; ++z) {
      auto s = extract_slice(low.dwi[v], z);
      slices[v].push_back(normalized ? normalize_slice(s) : std::move(s));
    }
  }

  struct Job {
    std::size_t target;
    int z;
    std::vector<std::size_t> refs;
  };
  std::vector<Job> jobs;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const auto refs = qspace::select_references(scheme, targets.directions[k], r, options.antipodal_references);
    for (int z = 0; z < dims.nz; ++z) jobs.push_back({k, z, refs});
  }

  std::vector<DWIVolume> out(targets.size());
  for (std::size_t k = 0; k < targets.size(); ++k) {
    out[k].dims = dims;
    out[k].data.assign(dims.voxels(), 0.0);
    out[k].direction = targets.directions[k];
    out[k].bvalue = targets.bvalues[k];
    out[k].voxel_size = low.dwi.front().voxel_size;
    out[k].source = "generated:" + generator.method();
  }

  const std::size_t batch = static_cast<std::size_t>(std::max(1, options.batch));
  for (std::size_t start = 0; start < jobs.size(); start += batch) {
    const std::size_t end = std::min(jobs.size(), start + batch);
    std::vector<GenerationRequest> reqs;
    for (std::size_t j = start; j < end; ++j) {
      const auto& job = jobs[j];
      GenerationRequest req;
      req.bmatrix.push_back(targets.directions[job.target]);
      for (auto i : job.refs) {
        req.references.push_back(&slices[i][static_cast<std::size_t>(job.z)]);
        req.bmatrix.push_back(scheme.directions[i]);
      }
      req.seed = derive_seed(options.seed, job.target, static_cast<std::uint64_t>(job.z));
      reqs.push_back(std::move(req));
    }
    auto generated = generator.generate(reqs);
    for (std::size_t j = start; j < end; ++j) {
      const auto& job = jobs[j];
      const auto& req = reqs[j - start];
      DWISlice g = std::move(generated[j - start]);
      g.slice_index = job.z;
      if (normalized) {
        double lo = 0.0, hi = 0.0;
        for (const auto* ref : req.references) {
          lo += ref->norm_min;
          hi += ref->norm_max;
        }
        g.norm_min = lo / static_cast<double>(req.references.size());
        g.norm_max = hi / static_cast<double>(req.references.size());
        for (double& v : g.pixels) v = std::clamp(v, 0.0, 1.0);
        g = denormalize_slice(g);
      }
      for (double& v : g.pixels) v = std::max(v, 0.0);
      g = mask_output(g, req.references);
      insert_slice(out[job.target], g);
    }
    if (options.progress) options.progress(end, jobs.size());
  }
  return out;
}

DwiSet upsample_volume(const DwiSet& low, const qspace::GradientScheme& targets, SliceGenerator& generator,
                       const UpsampleOptions& options) {
  targets.validate();
  std::vector<std::size_t> todo;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    if (find_direction(low, targets.directions[k], targets.bvalues[k]) >= 0) {
      if (options.warn) {
        options.warn("target " + format_vec(targets.directions[k]) + " is already acquired; passing it through");
      }
      continue;
    }
    todo.push_back(k);
  }
  DwiSet out = low;
  if (todo.empty()) return out;
  auto generated = generate_volumes(low, targets.subset(todo), generator, options);
  for (auto& v : generated) out.dwi.push_back(std::move(v));
  return out;
}

// Evaluation.

metrics::EvaluationReport evaluate(std::span<const DwiSet> preds, std::span<const DwiSet> truths,
                                   const std::string& method, int references) {
  if (preds.size() != truths.size() || preds.empty()) {
    throw ValidationError("evaluate: need matching, non-empty prediction and truth lists");
  }
  metrics::EvaluationReport report;
  report.method = method;
  report.references = references;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    const DwiSet& pred = preds[s];
    const DwiSet& truth = truths[s];
    if (pred.dims() != truth.dims()) throw ValidationError("evaluate: prediction and truth dims differ");
    const Dims dims = truth.dims();
    for (const auto& v : pred.dwi) {
      if (v.source.rfind("generated", 0) != 0) continue;
      if (report.method.empty()) {
        const auto colon = v.source.find(':');
        report.method = colon == std::string::npos ? "generated" : v.source.substr(colon + 1);
      }
      const long t = find_direction(truth, v.direction, v.bvalue);
      if (t < 0) throw ValidationError("evaluate: no truth volume for direction " + format_vec(v.direction));
      for (int z = 0; z < dims.nz; ++z) {
        const auto a = extract_slice(v, z);
        const auto b = extract_slice(truth.dwi[static_cast<std::size_t>(t)], z);
        std::vector<unsigned char> mask(b.pixels.size());
        double hi = 0.0;
        bool any = false;
        for (std::size_t p = 0; p < mask.size(); ++p) {
          mask[p] = b.pixels[p] != 0.0;
          any |= mask[p] != 0;
          hi = std::max(hi, b.pixels[p]);
        }
        if (!any || !(hi > 0.0)) continue;
        report.slice_ssim.push_back(metrics::ssim({b.height, b.width, a.pixels}, {b.height, b.width, b.pixels}, hi, mask));
      }
    }
    const auto fa_pred = tensorfit::colored_fa(tensorfit::fit_tensor(pred));
    const auto fa_truth = tensorfit::colored_fa(tensorfit::fit_tensor(truth));
    report.fa_errors.push_back(metrics::fa_error(fa_pred, fa_truth));
    report.fa_map_ssims.push_back(metrics::fa_map_ssim(fa_pred, fa_truth));
  }
  return report;
}

}  // namespace qup::pipeline
