#include "gmsrm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "gmsrm/errors.hpp"
#include "gmsrm/imaging.hpp"

namespace gmsrm {

namespace F = torch::nn::functional;

namespace {

constexpr int64_t kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

void check_pair(const torch::Tensor& pred, const torch::Tensor& gt, const char* what) {
  if (pred.dim() != 3 || pred.sizes() != gt.sizes()) {
    throw InvalidInput(std::string(what) + ": pred/gt must be C x H x W with equal shapes");
  }
}

torch::Tensor region_mask(const torch::Tensor& region, const torch::Tensor& like) {
  if (!region.defined()) return {};
  if (region.dim() != 2 || region.size(0) != like.size(1) || region.size(1) != like.size(2)) {
    throw InvalidInput("metric region must be H x W matching the images");
  }
  return (region != 0).to(torch::kFloat64);
}

torch::Tensor gaussian_window() {
  auto coords = torch::arange(kSsimWindow, torch::kFloat64) - static_cast<double>(kSsimWindow / 2);
  auto g = torch::exp(-coords.pow(2) / (2.0 * kSsimSigma * kSsimSigma));
  g = g / g.sum();
  return torch::outer(g, g);
}

bool is_image_file(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

std::set<std::string> list_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::set<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) names.insert(e.path().filename().string());
  }
  return names;
}

nlohmann::json values_json(const MetricValues& v) {
  nlohmann::json j = {{"psnr", v.psnr}, {"ssim", v.ssim}, {"ncc", v.ncc}, {"lmse", v.lmse}};
  if (v.lpips) j["lpips"] = *v.lpips;
  return j;
}

void accumulate(MetricValues& acc, const MetricValues& v) {
  acc.psnr += v.psnr;
  acc.ssim += v.ssim;
  acc.ncc += v.ncc;
  acc.lmse += v.lmse;
  if (v.lpips) acc.lpips = acc.lpips.value_or(0.0) + *v.lpips;
}

MetricValues scaled(MetricValues v, double s) {
  v.psnr *= s;
  v.ssim *= s;
  v.ncc *= s;
  v.lmse *= s;
  if (v.lpips) *v.lpips *= s;
  return v;
}

}  // namespace

double psnr(const torch::Tensor& pred, const torch::Tensor& gt, const torch::Tensor& region) {
  check_pair(pred, gt, "psnr");
  auto sq = (pred.to(torch::kFloat64) - gt.to(torch::kFloat64)).pow(2);
  double mse = 0.0;
  if (auto r = region_mask(region, pred); r.defined()) {
    const double n = r.sum().item<double>() * static_cast<double>(pred.size(0));
    if (n == 0.0) return kPsnrCap;
    mse = (sq * r.unsqueeze(0)).sum().item<double>() / n;
  } else {
    mse = sq.mean().item<double>();
  }
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const torch::Tensor& pred, const torch::Tensor& gt, const torch::Tensor& region) {
  check_pair(pred, gt, "ssim");
  if (pred.size(1) < kSsimWindow || pred.size(2) < kSsimWindow) {
    throw InvalidInput("ssim: image smaller than the 11x11 window");
  }
  const int64_t c = pred.size(0);
  auto x = pred.to(torch::kFloat64).unsqueeze(0);
  auto y = gt.to(torch::kFloat64).unsqueeze(0);
  auto w = gaussian_window().view({1, 1, kSsimWindow, kSsimWindow}).repeat({c, 1, 1, 1});
  auto filt = [&](const torch::Tensor& t) { return F::conv2d(t, w, F::Conv2dFuncOptions().groups(c)); };
  auto mx = filt(x);
  auto my = filt(y);
  auto vx = filt(x * x) - mx * mx;
  auto vy = filt(y * y) - my * my;
  auto cxy = filt(x * y) - mx * my;
  auto map = ((2.0 * mx * my + kSsimC1) * (2.0 * cxy + kSsimC2)) /
             ((mx * mx + my * my + kSsimC1) * (vx + vy + kSsimC2));
  map = map.squeeze(0);  // C x (H-10) x (W-10)
  if (auto r = region_mask(region, pred); r.defined()) {
    const int64_t half = kSsimWindow / 2;
    using torch::indexing::Slice;
    auto centers = r.index({Slice(half, r.size(0) - half), Slice(half, r.size(1) - half)});
    const double n = centers.sum().item<double>();
    if (n == 0.0) return 1.0;
    return (map * centers.unsqueeze(0)).sum().item<double>() / (n * static_cast<double>(c));
  }
  return map.mean().item<double>();
}

double ncc(const torch::Tensor& pred, const torch::Tensor& gt, bool mean_removed, const torch::Tensor& region) {
  check_pair(pred, gt, "ncc");
  auto x = pred.to(torch::kFloat64).reshape({pred.size(0), -1});
  auto y = gt.to(torch::kFloat64).reshape({gt.size(0), -1});
  torch::Tensor sel;
  if (auto r = region_mask(region, pred); r.defined()) {
    sel = r.reshape({-1}).nonzero().squeeze(1);
    if (sel.numel() == 0) return 1.0;
    x = x.index_select(1, sel);
    y = y.index_select(1, sel);
  }
  if (mean_removed) {
    x = x - x.mean(1, true);
    y = y - y.mean(1, true);
  }
  auto energy_y = (y * y).sum(1);
  if ((energy_y == 0).any().item<bool>()) throw InvalidInput("ncc: ground truth has zero energy");
  auto energy_x = (x * x).sum(1);
  auto num = (x * y).sum(1);
  auto den = torch::sqrt(energy_x * energy_y);
  // A zero-energy prediction correlates with nothing.
  auto per_channel = torch::where(den > 0, num / den.clamp_min(1e-300), torch::zeros_like(num));
  return per_channel.mean().item<double>();
}

double lmse(const torch::Tensor& pred, const torch::Tensor& gt, int64_t window, int64_t stride,
            const torch::Tensor& region) {
  check_pair(pred, gt, "lmse");
  if (window < 1 || stride < 1) throw InvalidInput("lmse: window and stride must be positive");
  const int64_t c = pred.size(0);
  const int64_t h = pred.size(1);
  const int64_t w = pred.size(2);
  if (h < window || w < window) throw InvalidInput("lmse: image smaller than the window");

  // Zero-padded integral images of p^2, p*g and g^2 per channel.
  auto p = pred.to(torch::kFloat64);
  auto g = gt.to(torch::kFloat64);
  auto integral = [](const torch::Tensor& t) {
    return F::pad(t.cumsum(1).cumsum(2), F::PadFuncOptions({1, 0, 1, 0})).contiguous();
  };
  auto ipp = integral(p * p);
  auto ipg = integral(p * g);
  auto igg = integral(g * g);
  torch::Tensor ireg;
  if (auto r = region_mask(region, pred); r.defined()) ireg = integral(r.unsqueeze(0)).squeeze(0);

  auto app = ipp.accessor<double, 3>();
  auto apg = ipg.accessor<double, 3>();
  auto agg = igg.accessor<double, 3>();
  auto box = [&](const auto& a, int64_t ch, int64_t y0, int64_t x0) {
    const int64_t y1 = y0 + window;
    const int64_t x1 = x0 + window;
    return a[ch][y1][x1] - a[ch][y0][x1] - a[ch][y1][x0] + a[ch][y0][x0];
  };

  double err = 0.0;
  double energy = 0.0;
  for (int64_t y0 = 0; y0 + window <= h; y0 += stride) {
    for (int64_t x0 = 0; x0 + window <= w; x0 += stride) {
      if (ireg.defined()) {
        auto ar = ireg.accessor<double, 2>();
        const double cover = ar[y0 + window][x0 + window] - ar[y0][x0 + window] - ar[y0 + window][x0] + ar[y0][x0];
        if (cover <= 0.0) continue;
      }
      for (int64_t ch = 0; ch < c; ++ch) {
        const double spp = box(app, ch, y0, x0);
        const double spg = box(apg, ch, y0, x0);
        const double sgg = box(agg, ch, y0, x0);
        // min_a ||a p - g||^2 = sgg - spg^2 / spp (a = 0 when p is zero).
        const double e = spp > 0.0 ? sgg - spg * spg / spp : sgg;
        err += std::max(0.0, e);
        energy += sgg;
      }
    }
  }
  if (energy == 0.0) return err == 0.0 ? 0.0 : err;
  return err / energy;
}

std::string ratio_bucket_label(int64_t holes, int64_t total) {
  if (total <= 0) throw InvalidInput("ratio_bucket_label: empty mask");
  if (holes <= 0) return "0";
  // Smallest k with holes/total <= k/10, computed in integers.
  const int64_t k = (holes * 10 + total - 1) / total;
  auto label = [](int64_t tenths) {
    if (tenths == 0) return std::string("0");
    if (tenths == 10) return std::string("1");
    return "0." + std::to_string(tenths);
  };
  return "(" + label(k - 1) + "," + label(k) + "]";
}

MetricValues evaluate_pair(const torch::Tensor& pred, const torch::Tensor& gt, const torch::Tensor& mask,
                           const EvalOptions& opts) {
  torch::Tensor region;
  if (opts.region == EvalRegion::kHole) {
    if (!mask.defined()) throw InvalidInput("hole-region evaluation needs a mask");
    region = (mask == 0);
  }
  MetricValues v;
  v.psnr = psnr(pred, gt, region);
  v.ssim = ssim(pred, gt, region);
  v.ncc = ncc(pred, gt, opts.ncc_mean_removed, region);
  v.lmse = lmse(pred, gt, 20, 10, region);
  if (opts.lpips) v.lpips = opts.lpips(pred, gt);
  return v;
}

torch::Tensor read_image_unit(const std::filesystem::path& path) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw IoError("cannot read image: " + path.string());
  cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(img.data, {img.rows, img.cols, 3}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).to(torch::kFloat64).div(255.0).contiguous();
}

MetricsReport evaluate_dirs(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                            const std::filesystem::path& mask_dir, const EvalOptions& opts) {
  const auto pred_names = list_images(pred_dir);
  const auto gt_names = list_images(gt_dir);
  const auto mask_names = list_images(mask_dir);
  if (pred_names != gt_names) throw InvalidInput("prediction and ground-truth file sets differ");
  for (const auto& name : gt_names) {
    if (!mask_names.count(name)) throw InvalidInput("no mask for " + name);
  }
  if (gt_names.empty()) throw InvalidInput("no images to evaluate");

  MetricsReport report;
  report.region = opts.region == EvalRegion::kHole ? "hole" : "full";
  for (const auto& name : gt_names) {
    auto pred = read_image_unit(pred_dir / name);
    auto gt = read_image_unit(gt_dir / name);
    auto mask = load_mask(mask_dir / name).data();
    if (pred.sizes() != gt.sizes()) throw InvalidInput("image size mismatch for " + name);
    if (mask.size(0) != gt.size(1) || mask.size(1) != gt.size(2)) throw InvalidInput("mask size mismatch for " + name);

    ImageMetrics row;
    row.file = name;
    const int64_t holes = (mask == 0).sum().item<int64_t>();
    row.ratio = static_cast<double>(holes) / static_cast<double>(mask.numel());
    row.bucket = ratio_bucket_label(holes, mask.numel());
    row.values = evaluate_pair(pred, gt, mask, opts);
    report.per_image.push_back(row);
  }

  report.n_images = static_cast<int64_t>(report.per_image.size());
  for (const auto& row : report.per_image) {
    accumulate(report.mean, row.values);
    accumulate(report.buckets[row.bucket], row.values);
    ++report.bucket_counts[row.bucket];
  }
  report.mean = scaled(report.mean, 1.0 / static_cast<double>(report.n_images));
  for (auto& [bucket, v] : report.buckets) v = scaled(v, 1.0 / static_cast<double>(report.bucket_counts[bucket]));
  return report;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json metrics = nlohmann::json::object();
  auto put = [&](const std::string& bucket, const MetricValues& v) {
    const auto vj = values_json(v);
    for (auto& [name, value] : vj.items()) metrics[name][bucket] = value;
  };
  put("all", mean);
  for (const auto& [bucket, v] : buckets) put(bucket, v);
  return {{"format", "gmsrm-metrics/1"},
          {"n_images", n_images},
          {"region", region},
          {"metrics", metrics},
          {"counts", bucket_counts}};
}

void write_report_json(const MetricsReport& report, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write report: " + path.string());
  f << report.to_json().dump(2) << "\n";
}

void write_report_csv(const MetricsReport& report, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write report: " + path.string());
  f.precision(10);
  f << "file,bucket,ratio,psnr,ssim,ncc,lmse\n";
  for (const auto& r : report.per_image) {
    f << r.file << "," << r.bucket << "," << r.ratio << "," << r.values.psnr << "," << r.values.ssim << ","
      << r.values.ncc << "," << r.values.lmse << "\n";
  }
}

}  // namespace gmsrm
