#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gridfill/dataset.hpp"

namespace gridfill {

/// Reported for zero-error comparisons.
inline constexpr double psnr_cap = 99.0;

/// 10 log10(1 / MSE) over all pixels, or over pixels where region is nonzero.
double psnr(const Image& a, const Image& b, const Mask<float>* region = nullptr);

/// Mean local SSIM of the Rec. 601 luma over valid 11x11 Gaussian windows
/// (sigma 1.5, K1 0.01, K2 0.03, unit range). With a region, only windows
/// centred on region pixels are averaged.
double ssim(const Image& a, const Image& b, const Mask<float>* region = nullptr);

/// Per-window SSIM map of size (H - 10) x (W - 10).
Plane<double> ssim_map(const Image& a, const Image& b);

struct ViewMetrics {
  int view = 0;
  double psnr = 0;
  double ssim = 0;
  /// Unset when the view has no unknown pixels.
  std::optional<double> psnr_unknown;
  std::optional<double> ssim_unknown;
};

struct MetricReport {
  std::vector<ViewMetrics> views;
  double psnr = 0;
  double ssim = 0;
  std::optional<double> psnr_unknown;
  std::optional<double> ssim_unknown;
  std::optional<double> consistency;
  nlohmann::json config = nlohmann::json::object();

  /// Recomputes the aggregates as means of the per-view values.
  void aggregate();
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

struct EvalConfig {
  /// Evaluation rays start this far from the camera; unset means 5% of the
  /// scene diagonal.
  std::optional<double> near_offset;
  int samples = 128;
};

double default_near_offset(const MultiViewDataset& data);

/// Renders every view with the near-plane offset and compares against the
/// current dataset images, whole image and unknown region.
MetricReport eval_dataset_consistency(const RadianceField<float>& field, const MultiViewDataset& data,
                                      const EvalConfig& cfg = {});

struct ConsistencyConfig {
  int samples_per_view = 256;
  /// A reprojected point counts as visible when its distance matches the
  /// target view's depth within this fraction.
  double depth_tolerance = 0.02;
  std::uint64_t seed = 0;
};

struct ConsistencyResult {
  double mean_abs_diff = 0;
  long correspondences = 0;
};

/// Samples unknown pixels of every view, lifts them to 3D with the ground-truth
/// depth, and compares colors with every other view that sees the point.
/// Images may be an integer factor smaller than the cameras.
ConsistencyResult cross_view_consistency(const std::vector<Image>& images, const std::vector<Mask<float>>& masks,
                                         const MultiViewDataset& data, const std::vector<Plane<float>>& gt_depth,
                                         const ConsistencyConfig& cfg = {});

}  // namespace gridfill
