// qup command-line interface.

#include "qup/metrics.hpp"
#include "qup/phantom.hpp"
#include "qup/pipeline.hpp"
#include "qup/tensorfit.hpp"
#include "qup/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw qup::FormatError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw qup::FormatError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw qup::FormatError(path.string() + ": " + e.what());
  }
}

qup::pipeline::SplitRatios parse_split(const std::string& text) {
  qup::pipeline::SplitRatios r;
  char a = 0, b = 0;
  std::istringstream in(text);
  if (!(in >> r.train >> a >> r.val >> b >> r.test) || a != '/' || b != '/') {
    throw qup::ValidationError("split must look like 8/1/1, got '" + text + "'");
  }
  return r;
}

struct PhantomArgs {
  fs::path out;
  std::string shape = "64x64x9";
  double snr = 20.0;
  bool noiseless = false;
  std::uint64_t seed = 0;
  int directions = 90;
  int b0 = 2;
  double bvalue = 1000.0;
};

void run_phantom(const PhantomArgs& a) {
  using namespace qup;
  const Dims dims = parse_dims(a.shape);
  const auto field = phantom::two_bar_phantom(dims, a.seed);
  const auto scheme = qspace::uniform_shell(static_cast<std::size_t>(a.directions), a.bvalue);
  const std::optional<double> snr = a.noiseless ? std::nullopt : std::optional<double>(a.snr);
  DwiSet set;
  set.b0 = phantom::simulate_b0(field, static_cast<std::size_t>(a.b0), snr, a.seed);
  set.dwi = phantom::simulate_dwi(field, scheme, snr, a.seed);
  write_dwi_set(a.out, set);
  const auto fa = tensorfit::colored_fa(field);
  write_volume(a.out / "fa_truth", tensorfit::fa_volume(fa));
  write_json(a.out / "run.json", {{"command", "phantom"},
                                  {"shape", to_string(dims)},
                                  {"snr", snr ? json(*snr) : json(nullptr)},
                                  {"seed", a.seed},
                                  {"directions", a.directions},
                                  {"b0", a.b0},
                                  {"bvalue", a.bvalue}});
}

struct DatasetArgs {
  std::vector<fs::path> dwi;
  int k_low = 30;
  int refs = 3;
  std::uint64_t seed = 0;
  fs::path out;
  std::string split = "8/1/1";
  bool antipodal = false;
};

void run_dataset_build(const DatasetArgs& a) {
  using namespace qup;
  std::vector<std::pair<std::string, std::string>> subjects;
  qspace::GradientScheme full;
  int slices = 0;
  for (const auto& dir : a.dwi) {
    const auto set = read_dwi_set(dir);
    const auto scheme = set.scheme();
    if (full.empty()) {
      full = scheme;
      slices = set.dims().nz;
    } else if (scheme.directions.size() != full.size() || set.dims().nz != slices) {
      throw ValidationError("subject " + dir.string() + " does not share the first subject's scheme and shape");
    }
    subjects.emplace_back(dir.filename().string(), fs::absolute(dir).string());
  }
  auto manifest = pipeline::build_dataset(full, slices, a.k_low, a.refs, a.seed, a.antipodal);
  pipeline::assign_subjects(manifest, subjects, parse_split(a.split));
  pipeline::write_manifest(a.out, manifest);
  write_json(fs::path(a.out.string() + ".run.json"), {{"command", "dataset build"},
                                                      {"k_low", a.k_low},
                                                      {"refs", a.refs},
                                                      {"seed", a.seed},
                                                      {"split", a.split},
                                                      {"antipodal", a.antipodal}});
}

struct ExtractArgs {
  fs::path dwi;
  fs::path manifest;
  fs::path out;
};

void run_dataset_extract(const ExtractArgs& a) {
  using namespace qup;
  const auto manifest = pipeline::read_manifest(a.manifest);
  const auto set = read_dwi_set(a.dwi);
  if (set.dwi.size() != manifest.full.size()) {
    throw ValidationError(a.dwi.string() + " has " + std::to_string(set.dwi.size()) + " volumes, manifest expects " +
                          std::to_string(manifest.full.size()));
  }
  DwiSet low;
  low.b0 = set.b0;
  for (auto i : manifest.low) low.dwi.push_back(set.dwi[i]);
  write_dwi_set(a.out, low);
  qspace::write_scheme(a.out / "targets.bvals", a.out / "targets.bvecs", manifest.target_scheme());
}

struct TrainArgs {
  std::string method = "diffusion";
  fs::path manifest;
  fs::path config;
  fs::path out;
  fs::path resume;
  int steps = -1;
};

void run_train(const TrainArgs& a) {
  using namespace qup;
  const auto manifest = pipeline::read_manifest(a.manifest);
  json cfg = a.config.empty() ? json::object() : read_json(a.config);
  cfg["method"] = a.method;
  if (a.steps >= 0) cfg["steps"] = a.steps;
  const auto config = training::TrainConfig::from_json(cfg, manifest.references);
  const fs::path base = fs::absolute(a.manifest).parent_path();
  const auto train = training::load_split(manifest, "train", base);
  const auto val = training::load_split(manifest, "val", base);
  fs::create_directories(a.out);
  write_json(a.out / "config.resolved.json", config.to_json());
  training::Trainer trainer(config, manifest, train, val);
  if (!a.resume.empty()) trainer.resume(a.resume);
  const fs::path ckpt = a.out / "checkpoint.qup";
  std::ofstream log(a.out / "train_log.jsonl", a.resume.empty() ? std::ios::trunc : std::ios::app);
  trainer.run(&log, ckpt);
  if (!val.empty()) {
    log << json{{"step", trainer.current_step()}, {"val_ssim", trainer.validate()}}.dump() << "\n";
  }
  trainer.save(ckpt);
}

struct GenerateArgs {
  fs::path checkpoint;
  std::string method;
  fs::path low;
  fs::path targets;
  fs::path target_bvals;
  std::uint64_t seed = 0;
  fs::path out;
  int refs = 3;
  int batch = 16;
  bool antipodal = false;
  bool renormalize = false;
  bool flip = false;
  bool quiet = false;
};

void run_generate(const GenerateArgs& a) {
  using namespace qup;
  if (a.checkpoint.empty() == a.method.empty()) {
    throw ValidationError("generate needs exactly one of --checkpoint or --method interp");
  }
  std::unique_ptr<pipeline::SliceGenerator> gen;
  json header;
  if (!a.checkpoint.empty()) {
    auto loaded = training::load_generator(a.checkpoint);
    gen = std::move(loaded.generator);
    header = loaded.header;
  } else if (a.method == "interp") {
    gen = std::make_unique<pipeline::InterpGenerator>(a.refs, baselines::InterpOptions{a.renormalize, a.flip});
  } else {
    throw ValidationError("unknown method '" + a.method + "' (only interp runs without a checkpoint)");
  }
  const auto low = read_dwi_set(a.low);
  qspace::GradientScheme targets;
  targets.directions = qspace::read_bvecs(a.targets);
  if (!a.target_bvals.empty()) {
    targets.bvalues = qspace::read_bvals(a.target_bvals);
  } else {
    if (low.dwi.empty()) throw ValidationError("low set has no diffusion-weighted volumes");
    targets.bvalues.assign(targets.directions.size(), low.dwi.front().bvalue);
  }
  pipeline::UpsampleOptions opts;
  opts.seed = a.seed;
  opts.batch = a.batch;
  opts.antipodal_references = a.antipodal;
  opts.warn = [](const std::string& m) { std::cerr << "warning: " << m << "\n"; };
  if (!a.quiet) {
    opts.progress = [](std::size_t done, std::size_t total) {
      std::cerr << "\rgenerated " << done << "/" << total << " slices" << std::flush;
      if (done == total) std::cerr << "\n";
    };
  }
  const auto out = pipeline::upsample_volume(low, targets, *gen, opts);
  write_dwi_set(a.out, out);
  json run = {{"command", "generate"},
              {"method", gen->method()},
              {"references", gen->references()},
              {"seed", a.seed},
              {"antipodal_references", a.antipodal},
              {"low", fs::absolute(a.low).string()},
              {"targets", fs::absolute(a.targets).string()}};
  if (!a.checkpoint.empty()) {
    run["checkpoint"] = fs::absolute(a.checkpoint).string();
    run["model"] = {{"denoiser", header["denoiser"]}, {"schedule", header["schedule"]}};
  } else {
    run["interp"] = {{"renormalize", a.renormalize}, {"antipodal_flip", a.flip}};
  }
  write_json(a.out / "run.json", run);
}

struct EvaluateArgs {
  std::vector<fs::path> pred;
  std::vector<fs::path> truth;
  fs::path report;
  fs::path png_dir;
  std::string method;
  int refs = 0;
};

void run_evaluate(const EvaluateArgs& a) {
  using namespace qup;
  if (a.pred.size() != a.truth.size()) throw ValidationError("--pred and --truth must be given the same number of times");
  std::vector<DwiSet> preds, truths;
  for (const auto& p : a.pred) preds.push_back(read_dwi_set(p));
  for (const auto& t : a.truth) truths.push_back(read_dwi_set(t));
  int refs = a.refs;
  if (refs == 0 && fs::exists(a.pred.front() / "run.json")) {
    refs = read_json(a.pred.front() / "run.json").value("references", 0);
  }
  const auto report = pipeline::evaluate(preds, truths, a.method, refs);
  write_json(a.report, report.to_json());
  std::cout << report.to_table();
  if (!a.png_dir.empty()) {
    fs::create_directories(a.png_dir);
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const auto fa = tensorfit::colored_fa(tensorfit::fit_tensor(preds[i]));
      for (int z = 0; z < fa.dims.nz; ++z) {
        tensorfit::write_color_png(a.png_dir / ("cfa_" + std::to_string(i) + "_z" + std::to_string(z) + ".png"), fa, z);
      }
    }
  }
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const qup::ValidationError*>(&e)) return "validation";
  if (dynamic_cast<const qup::FormatError*>(&e)) return "format";
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return "io";
  return "internal";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"q-space up-sampling toolkit"};
  app.require_subcommand(1);

  PhantomArgs ph;
  auto* phantom = app.add_subcommand("phantom", "Simulate a two-bar DWI phantom");
  phantom->add_option("--out", ph.out, "Output directory")->required();
  phantom->add_option("--shape", ph.shape, "Volume shape NXxNYxNZ")->capture_default_str();
  phantom->add_option("--snr", ph.snr, "Rician SNR (mean in-mask S0 / sigma)")->capture_default_str();
  phantom->add_flag("--noiseless", ph.noiseless, "Disable noise");
  phantom->add_option("--seed", ph.seed)->capture_default_str();
  phantom->add_option("--directions", ph.directions, "Gradient directions on the shell")->capture_default_str();
  phantom->add_option("--b0", ph.b0, "Number of b=0 volumes")->capture_default_str();
  phantom->add_option("--bvalue", ph.bvalue)->capture_default_str();

  auto* dataset = app.add_subcommand("dataset", "Dataset manifests");
  dataset->require_subcommand(1);
  DatasetArgs ds;
  auto* build = dataset->add_subcommand("build", "Split directions and record samples");
  build->add_option("--dwi", ds.dwi, "Full-resolution DWI directory (repeat per subject)")->required();
  build->add_option("--k-low", ds.k_low)->capture_default_str();
  build->add_option("--refs", ds.refs)->capture_default_str();
  build->add_option("--seed", ds.seed)->capture_default_str();
  build->add_option("--out", ds.out, "Manifest JSON")->required();
  build->add_option("--split", ds.split, "train/val/test ratios")->capture_default_str();
  build->add_flag("--antipodal", ds.antipodal, "Axis distance for reference selection");
  ExtractArgs ex;
  auto* extract = dataset->add_subcommand("extract", "Write the low set and target scheme of one subject");
  extract->add_option("--dwi", ex.dwi)->required();
  extract->add_option("--manifest", ex.manifest)->required();
  extract->add_option("--out", ex.out)->required();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train a diffusion or cGAN model");
  train->add_option("--method", tr.method)->check(CLI::IsMember({"diffusion", "cgan"}))->capture_default_str();
  train->add_option("--manifest", tr.manifest)->required();
  train->add_option("--config", tr.config, "Training config JSON");
  train->add_option("--out", tr.out, "Checkpoint directory")->required();
  train->add_option("--resume", tr.resume, "Checkpoint to resume from");
  train->add_option("--steps", tr.steps, "Override the total step count");

  GenerateArgs gn;
  auto* generate = app.add_subcommand("generate", "Up-sample a low angular resolution set");
  generate->add_option("--checkpoint", gn.checkpoint);
  generate->add_option("--method", gn.method, "Baseline without a checkpoint (interp)");
  generate->add_option("--low", gn.low)->required();
  generate->add_option("--targets", gn.targets, "Target bvecs file")->required();
  generate->add_option("--target-bvals", gn.target_bvals, "Target bvals (default: the low set's b-value)");
  generate->add_option("--seed", gn.seed)->capture_default_str();
  generate->add_option("--out", gn.out)->required();
  generate->add_option("--refs", gn.refs, "References for interp")->capture_default_str();
  generate->add_option("--batch", gn.batch)->capture_default_str();
  generate->add_flag("--antipodal", gn.antipodal, "Axis distance for reference selection");
  generate->add_flag("--interp-renormalize", gn.renormalize);
  generate->add_flag("--interp-antipodal-flip", gn.flip);
  generate->add_flag("--quiet", gn.quiet);

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "Score generated sets against ground truth");
  evaluate->add_option("--pred", ev.pred)->required();
  evaluate->add_option("--truth", ev.truth)->required();
  evaluate->add_option("--report", ev.report)->required();
  evaluate->add_option("--png-dir", ev.png_dir, "Write colored FA slices of the predictions");
  evaluate->add_option("--method", ev.method);
  evaluate->add_option("--refs", ev.refs);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (phantom->parsed()) run_phantom(ph);
    else if (build->parsed()) run_dataset_build(ds);
    else if (extract->parsed()) run_dataset_extract(ex);
    else if (train->parsed()) run_train(tr);
    else if (generate->parsed()) run_generate(gn);
    else if (evaluate->parsed()) run_evaluate(ev);
  } catch (const std::exception& e) {
    std::cerr << json{{"error", error_kind(e)}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
