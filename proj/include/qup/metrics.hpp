#pragma once

// Image and FA evaluation metrics plus the evaluation report.

#include "qup/tensorfit.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qup::metrics {

/// Row-major 2D image view.
struct ImageView {
  int height = 0;
  int width = 0;
  std::span<const double> pixels;
};

inline constexpr int kSsimWindow = 7;

/// Mean SSIM with a 7x7 uniform window (clipped at the borders),
/// C1 = (0.01 range)^2, C2 = (0.03 range)^2. When a mask is given the SSIM
/// map is averaged over its nonzero pixels only.
double ssim(const ImageView& a, const ImageView& b, double data_range,
            std::span<const unsigned char> mask = {});

/// Per-pixel SSIM map (same shape as the inputs).
std::vector<double> ssim_map(const ImageView& a, const ImageView& b, double data_range);

/// Mean |pred - truth| over the intersection of the two masks.
double fa_error(const tensorfit::FAMap& pred, const tensorfit::FAMap& truth);

/// Mean over axial slices of the FA-map SSIM (range 1), masked by the truth
/// mask; slices with an empty mask are skipped.
double fa_map_ssim(const tensorfit::FAMap& pred, const tensorfit::FAMap& truth);

struct Summary {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

/// Population mean and standard deviation.
Summary summarize(std::span<const double> values);

struct EvaluationReport {
  std::string method;
  int references = 0;
  std::vector<double> slice_ssim;
  std::vector<double> fa_errors;     // one per subject/phantom
  std::vector<double> fa_map_ssims;  // one per subject/phantom
  std::optional<double> fid;         // reserved, never computed here

  Summary image_ssim() const { return summarize(slice_ssim); }
  Summary fa_error_summary() const { return summarize(fa_errors); }
  Summary fa_map_ssim_summary() const { return summarize(fa_map_ssims); }

  nlohmann::json to_json() const;
  static EvaluationReport from_json(const nlohmann::json& j);
  /// Plain-text table: Method | Image SSIM | FA Error | FA Map SSIM.
  std::string to_table() const;
};

}  // namespace qup::metrics
