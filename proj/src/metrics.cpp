#include "qup/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace qup::metrics {

namespace {

void check_pair(const ImageView& a, const ImageView& b) {
  if (a.height != b.height || a.width != b.width) {
    throw ValidationError("ssim: shape mismatch (" + std::to_string(a.height) + "x" +
                          std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                          std::to_string(b.width) + ")");
  }
  const auto n = static_cast<std::size_t>(a.height) * static_cast<std::size_t>(a.width);
  if (a.pixels.size() != n || b.pixels.size() != n) {
    throw ValidationError("ssim: pixel count does not match shape");
  }
}

// Summed-area table with a zero border: (h+1) x (w+1).
std::vector<double> integral(int h, int w, const std::vector<double>& v) {
  std::vector<double> s(static_cast<std::size_t>(h + 1) * (w + 1), 0.0);
  for (int y = 0; y < h; ++y) {
    double row = 0.0;
    for (int x = 0; x < w; ++x) {
      row += v[static_cast<std::size_t>(y) * w + x];
      s[static_cast<std::size_t>(y + 1) * (w + 1) + x + 1] =
          s[static_cast<std::size_t>(y) * (w + 1) + x + 1] + row;
    }
  }
  return s;
}

}  // namespace

std::vector<double> ssim_map(const ImageView& a, const ImageView& b, double data_range) {
  check_pair(a, b);
  if (!(data_range > 0.0)) throw ValidationError("ssim: data_range must be positive");
  const int h = a.height;
  const int w = a.width;
  const std::size_t n = a.pixels.size();
  std::vector<double> x(a.pixels.begin(), a.pixels.end());
  std::vector<double> y(b.pixels.begin(), b.pixels.end());
  std::vector<double> xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto sx = integral(h, w, x);
  const auto sy = integral(h, w, y);
  const auto sxx = integral(h, w, xx);
  const auto syy = integral(h, w, yy);
  const auto sxy = integral(h, w, xy);
  const double c1 = std::pow(0.01 * data_range, 2);
  const double c2 = std::pow(0.03 * data_range, 2);
  const int half = kSsimWindow / 2;
  std::vector<double> out(n);
  for (int r = 0; r < h; ++r) {
    const int y0 = std::max(0, r - half);
    const int y1 = std::min(h, r + half + 1);
    for (int c = 0; c < w; ++c) {
      const int x0 = std::max(0, c - half);
      const int x1 = std::min(w, c + half + 1);
      auto box = [&](const std::vector<double>& s) {
        const auto at = [&](int yy_, int xx_) {
          return s[static_cast<std::size_t>(yy_) * (w + 1) + xx_];
        };
        return at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0);
      };
      const double count = static_cast<double>((y1 - y0) * (x1 - x0));
      const double mx = box(sx) / count;
      const double my = box(sy) / count;
      // Clamp tiny negative variances from cancellation.
      const double vx = std::max(0.0, box(sxx) / count - mx * mx);
      const double vy = std::max(0.0, box(syy) / count - my * my);
      const double cxy = box(sxy) / count - mx * my;
      const double v = ((2 * mx * my + c1) * (2 * cxy + c2)) /
                       ((mx * mx + my * my + c1) * (vx + vy + c2));
      out[static_cast<std::size_t>(r) * w + c] = std::clamp(v, -1.0, 1.0);
    }
  }
  return out;
}

double ssim(const ImageView& a, const ImageView& b, double data_range,
            std::span<const unsigned char> mask) {
  const auto map = ssim_map(a, b, data_range);
  if (!mask.empty() && mask.size() != map.size()) {
    throw ValidationError("ssim: mask size does not match image");
  }
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    sum += map[i];
    ++count;
  }
  if (count == 0) throw ValidationError("ssim: empty evaluation mask");
  return sum / static_cast<double>(count);
}

double fa_error(const tensorfit::FAMap& pred, const tensorfit::FAMap& truth) {
  if (!(pred.dims == truth.dims)) throw ValidationError("fa_error: shape mismatch");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    if (!pred.mask[i] || !truth.mask[i]) continue;
    sum += std::abs(pred.values[i] - truth.values[i]);
    ++count;
  }
  if (count == 0) throw ValidationError("fa_error: empty mask intersection");
  return sum / static_cast<double>(count);
}

double fa_map_ssim(const tensorfit::FAMap& pred, const tensorfit::FAMap& truth) {
  if (!(pred.dims == truth.dims)) throw ValidationError("fa_map_ssim: shape mismatch");
  const Dims d = truth.dims;
  const std::size_t n = d.slice_pixels();
  std::vector<double> per_slice;
  for (int z = 0; z < d.nz; ++z) {
    const auto off = n * static_cast<std::size_t>(z);
    std::span<const unsigned char> mask(truth.mask.data() + off, n);
    if (std::none_of(mask.begin(), mask.end(), [](unsigned char m) { return m != 0; })) continue;
    ImageView a{d.ny, d.nx, std::span<const double>(pred.values.data() + off, n)};
    ImageView b{d.ny, d.nx, std::span<const double>(truth.values.data() + off, n)};
    per_slice.push_back(ssim(a, b, 1.0, mask));
  }
  if (per_slice.empty()) throw ValidationError("fa_map_ssim: empty truth mask");
  return summarize(per_slice).mean;
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(sq / static_cast<double>(values.size()));
  return s;
}

namespace {
nlohmann::json summary_json(const Summary& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"count", s.count}};
}
}  // namespace

nlohmann::json EvaluationReport::to_json() const {
  nlohmann::json j;
  j["method"] = method;
  j["references"] = references;
  j["image_ssim"] = summary_json(image_ssim());
  j["image_ssim"]["per_slice"] = slice_ssim;
  j["fa_error"] = summary_json(fa_error_summary());
  j["fa_error"]["per_subject"] = fa_errors;
  j["fa_map_ssim"] = summary_json(fa_map_ssim_summary());
  j["fa_map_ssim"]["per_subject"] = fa_map_ssims;
  j["fid"] = fid ? nlohmann::json(*fid) : nlohmann::json(nullptr);
  j["metadata"] = {{"ssim_mode", "per-slice-then-averaged"},
                   {"ssim_window", "uniform 7x7"},
                   {"evaluation_mask", "ground-truth nonzero"}};
  return j;
}

EvaluationReport EvaluationReport::from_json(const nlohmann::json& j) {
  EvaluationReport r;
  r.method = j.at("method").get<std::string>();
  r.references = j.at("references").get<int>();
  r.slice_ssim = j.at("image_ssim").at("per_slice").get<std::vector<double>>();
  r.fa_errors = j.at("fa_error").at("per_subject").get<std::vector<double>>();
  r.fa_map_ssims = j.at("fa_map_ssim").at("per_subject").get<std::vector<double>>();
  if (j.contains("fid") && !j["fid"].is_null()) r.fid = j["fid"].get<double>();
  return r;
}

std::string EvaluationReport::to_table() const {
  auto cell = [](const Summary& s) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3f +/- %.3f", s.mean, s.std);
    return std::string(buf);
  };
  std::ostringstream os;
  const std::string label = method + " (R=" + std::to_string(references) + ")";
  char line[256];
  std::snprintf(line, sizeof line, "%-22s | %-9s | %-17s | %-17s | %-17s\n", "Method", "Image FID",
                "Image SSIM", "FA Error", "FA Map SSIM");
  os << line;
  os << std::string(95, '-') << '\n';
  std::snprintf(line, sizeof line, "%-22s | %-9s | %-17s | %-17s | %-17s\n", label.c_str(),
                fid ? std::to_string(*fid).c_str() : "n/a", cell(image_ssim()).c_str(),
                cell(fa_error_summary()).c_str(), cell(fa_map_ssim_summary()).c_str());
  os << line;
  return os.str();
}

}  // namespace qup::metrics
