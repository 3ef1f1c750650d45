#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace gmsrm {

// All metrics take C x H x W tensors already mapped to [0, 1]. The optional
// `region` is an H x W tensor whose nonzero entries select the evaluated
// pixels (hole-only evaluation); when undefined the full image is used.

inline constexpr double kPsnrCap = 100.0;

double psnr(const torch::Tensor& pred, const torch::Tensor& gt, const torch::Tensor& region = {});

// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
// dynamic range 1, valid windows only, mean over the map and channels. With a
// region, only windows centered on selected pixels are averaged.
double ssim(const torch::Tensor& pred, const torch::Tensor& gt, const torch::Tensor& region = {});

// Cosine form sum(xy)/sqrt(sum(x^2) sum(y^2)) per channel, averaged over
// channels; `mean_removed` subtracts per-channel means first.
double ncc(const torch::Tensor& pred, const torch::Tensor& gt, bool mean_removed = false,
           const torch::Tensor& region = {});

// Local scale-invariant MSE over window x window patches at `stride`:
// sum_w min_a ||a pred_w - gt_w||^2 / sum_w ||gt_w||^2, pooled over channels.
double lmse(const torch::Tensor& pred, const torch::Tensor& gt, int64_t window = 20, int64_t stride = 10,
            const torch::Tensor& region = {});

// "(0.2,0.3]" style decile label for the hole fraction of a mask.
std::string ratio_bucket_label(int64_t holes, int64_t total);

struct MetricValues {
  double psnr = 0.0;
  double ssim = 0.0;
  double ncc = 0.0;
  double lmse = 0.0;
  std::optional<double> lpips;
};

struct ImageMetrics {
  std::string file;
  std::string bucket;
  double ratio = 0.0;
  MetricValues values;
};

struct MetricsReport {
  MetricValues mean;
  int64_t n_images = 0;
  std::string region = "full";
  std::map<std::string, MetricValues> buckets;
  std::map<std::string, int64_t> bucket_counts;
  std::vector<ImageMetrics> per_image;

  nlohmann::json to_json() const;
};

enum class EvalRegion { kFull, kHole };

struct EvalOptions {
  EvalRegion region = EvalRegion::kFull;
  bool ncc_mean_removed = false;
  // LPIPS plugin slot; empty by default.
  std::function<double(const torch::Tensor&, const torch::Tensor&)> lpips;
};

MetricValues evaluate_pair(const torch::Tensor& pred, const torch::Tensor& gt, const torch::Tensor& mask,
                           const EvalOptions& opts);

// Pairs files by name across the three directories, averages the per-pair
// metrics, and groups them by the corruption-ratio bucket of each mask.
MetricsReport evaluate_dirs(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                            const std::filesystem::path& mask_dir, const EvalOptions& opts = {});

void write_report_json(const MetricsReport& report, const std::filesystem::path& path);
void write_report_csv(const MetricsReport& report, const std::filesystem::path& path);

// 8-bit image file -> C x H x W double tensor in [0, 1] (no resizing).
torch::Tensor read_image_unit(const std::filesystem::path& path);

}  // namespace gmsrm
