#include "gmsrm/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "gmsrm/errors.hpp"

namespace gmsrm {

namespace {

constexpr double kRangeSlack = 1e-6;
constexpr int kMaxStrokeAttempts = 1000;

void check_same_spatial(int64_t h0, int64_t w0, int64_t h1, int64_t w1, const char* what) {
  if (h0 != h1 || w0 != w1) {
    throw InvalidInput(std::string(what) + ": spatial shape mismatch (" + std::to_string(h0) +
                       "x" + std::to_string(w0) + " vs " + std::to_string(h1) + "x" +
                       std::to_string(w1) + ")");
  }
}

// BGR(A)/gray 8-bit cv::Mat -> float C x H x W in [-1, 1] (RGB order).
torch::Tensor mat_to_tensor(const cv::Mat& bgr) {
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  rgb.convertTo(rgb, CV_32FC3, 2.0 / 255.0, -1.0);
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kFloat32).clone();
  return t.permute({2, 0, 1}).contiguous().clamp(-1.0, 1.0);
}

cv::Mat read_color(const std::filesystem::path& path) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty()) {
    throw IoError("cannot read image: " + path.string());
  }
  if (img.rows < 8 || img.cols < 8) {
    throw InvalidInput("image smaller than 8px: " + path.string());
  }
  return img;
}

cv::Mat resize_shorter(const cv::Mat& img, int64_t shorter) {
  const int64_t cur = std::min(img.rows, img.cols);
  if (cur == shorter) return img;
  const double scale = static_cast<double>(shorter) / static_cast<double>(cur);
  int rows = static_cast<int>(std::lround(img.rows * scale));
  int cols = static_cast<int>(std::lround(img.cols * scale));
  if (img.rows <= img.cols) rows = static_cast<int>(shorter);
  if (img.cols <= img.rows) cols = static_cast<int>(shorter);
  cv::Mat out;
  cv::resize(img, out, cv::Size(cols, rows), 0, 0, shorter < cur ? cv::INTER_AREA : cv::INTER_LINEAR);
  return out;
}

// Uniform double in [0, 1) from the top 53 bits of a 64-bit draw. Keeps masks
// identical across standard libraries, unlike std::uniform_real_distribution.
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * unit(rng); }

int64_t count_holes(const cv::Mat& holes) { return cv::countNonZero(holes); }

}  // namespace

ImageTensor::ImageTensor(torch::Tensor data) : data_(std::move(data)) {
  if (data_.dim() != 3) throw InvalidInput("ImageTensor must be C x H x W");
  if (data_.size(0) != 1 && data_.size(0) != 3) throw InvalidInput("ImageTensor needs C = 1 or 3");
  if (data_.size(1) < 8 || data_.size(2) < 8) throw InvalidInput("ImageTensor must be at least 8x8");
  if (!torch::isfinite(data_).all().item<bool>()) throw InvalidInput("ImageTensor has non-finite values");
  const double lo = data_.min().item<double>();
  const double hi = data_.max().item<double>();
  if (lo < -1.0 - kRangeSlack || hi > 1.0 + kRangeSlack) {
    throw InvalidInput("ImageTensor values outside [-1, 1]");
  }
}

Mask::Mask(torch::Tensor data) : data_(std::move(data)) {
  if (data_.dim() != 2) throw InvalidInput("Mask must be H x W");
  data_ = data_.to(torch::kFloat32).contiguous();
  if (!((data_ == 0) | (data_ == 1)).all().item<bool>()) {
    throw InvalidInput("Mask entries must be exactly 0 or 1");
  }
}

Mask Mask::ones(int64_t h, int64_t w) { return Mask(torch::ones({h, w})); }
Mask Mask::zeros(int64_t h, int64_t w) { return Mask(torch::zeros({h, w})); }

bool Mask::operator==(const Mask& other) const {
  return data_.sizes() == other.data_.sizes() && torch::equal(data_, other.data_);
}

MaskKind parse_mask_kind(const std::string& name) {
  if (name == "center") return MaskKind::kCenter;
  if (name == "irregular") return MaskKind::kIrregular;
  throw InvalidInput("unknown mask kind: " + name);
}

std::string to_string(MaskKind kind) { return kind == MaskKind::kCenter ? "center" : "irregular"; }

ImageTensor load_image(const std::filesystem::path& path, int64_t target_side, double resize_ratio) {
  if (target_side < 8) throw InvalidInput("target_side must be >= 8");
  cv::Mat img = read_color(path);
  const auto shorter = std::max<int64_t>(target_side, std::llround(target_side * resize_ratio));
  img = resize_shorter(img, shorter);
  const int y0 = (img.rows - static_cast<int>(target_side)) / 2;
  const int x0 = (img.cols - static_cast<int>(target_side)) / 2;
  cv::Mat crop = img(cv::Rect(x0, y0, static_cast<int>(target_side), static_cast<int>(target_side))).clone();
  return ImageTensor(mat_to_tensor(crop));
}

torch::Tensor load_image_resized(const std::filesystem::path& path, int64_t shorter_side) {
  if (shorter_side < 8) throw InvalidInput("shorter_side must be >= 8");
  return mat_to_tensor(resize_shorter(read_color(path), shorter_side));
}

void save_image(const ImageTensor& img, const std::filesystem::path& path) {
  auto t = img.data().detach().to(torch::kFloat32).clamp(-1.0, 1.0);
  if (t.size(0) == 1) t = t.expand({3, t.size(1), t.size(2)});
  // [-1,1] -> [0,255] with round-half-up.
  auto bytes = ((t + 1.0) * 127.5 + 0.5).floor().clamp(0, 255).to(torch::kUInt8);
  bytes = bytes.permute({1, 2, 0}).contiguous();
  cv::Mat rgb(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)), CV_8UC3, bytes.data_ptr());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) throw IoError("cannot write image: " + path.string());
}

Mask load_mask(const std::filesystem::path& path) {
  cv::Mat g = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (g.empty()) throw IoError("cannot read mask: " + path.string());
  auto t = torch::from_blob(g.data, {g.rows, g.cols}, torch::kUInt8).clone();
  return Mask((t > 127).to(torch::kFloat32));
}

void save_mask(const Mask& m, const std::filesystem::path& path) {
  auto bytes = (m.data() * 255.0).to(torch::kUInt8).contiguous();
  cv::Mat g(static_cast<int>(m.height()), static_cast<int>(m.width()), CV_8UC1, bytes.data_ptr());
  if (!cv::imwrite(path.string(), g)) throw IoError("cannot write mask: " + path.string());
}

Mask generate_center_mask(int64_t h, int64_t w, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw InvalidInput("center mask ratio must lie in (0, 1)");
  if (h < 1 || w < 1) throw InvalidInput("mask dimensions must be positive");
  const auto side = std::clamp<int64_t>(std::llround(std::min(h, w) * std::sqrt(ratio)), 1, std::min(h, w));
  const int64_t top = (h - side) / 2;
  const int64_t left = (w - side) / 2;
  auto m = torch::ones({h, w});
  using torch::indexing::Slice;
  m.index_put_({Slice(top, top + side), Slice(left, left + side)}, 0.0);
  return Mask(m);
}

Mask generate_irregular_mask(int64_t h, int64_t w, const MaskSpec& spec) {
  if (spec.kind != MaskKind::kIrregular) throw InvalidInput("generate_irregular_mask needs kind=irregular");
  if (!(spec.ratio_lo >= 0.0 && spec.ratio_lo < spec.ratio_hi && spec.ratio_hi <= 1.0)) {
    throw InvalidInput("irregular mask needs 0 <= ratio_lo < ratio_hi <= 1");
  }
  if (h < 8 || w < 8) throw InvalidInput("irregular mask needs at least 8x8");

  std::mt19937_64 rng(spec.seed);
  const double total = static_cast<double>(h * w);
  // Evaluated exactly as corruption_ratio computes it.
  auto above_lo = [&](int64_t holes) { return static_cast<double>(holes) / total > spec.ratio_lo; };
  auto within_hi = [&](int64_t holes) { return static_cast<double>(holes) / total <= spec.ratio_hi; };

  // Brush thickness 5..40 px at 256 px, scaled to the mask size.
  const double scale = static_cast<double>(std::min(h, w)) / 256.0;
  const double min_thick = std::max(1.0, 5.0 * scale);
  const double max_thick = std::max(min_thick + 1.0, 40.0 * scale);
  const double min_len = std::max(2.0, std::min(h, w) / 16.0);
  const double max_len = std::max(min_len + 1.0, std::min(h, w) / 4.0);

  cv::Mat holes = cv::Mat::zeros(static_cast<int>(h), static_cast<int>(w), CV_8UC1);
  int64_t filled = 0;

  int vertices_left = 0;
  cv::Point cursor;
  double angle = 0.0;
  double thickness = min_thick;

  for (int attempt = 0; attempt < kMaxStrokeAttempts; ++attempt) {
    if (above_lo(filled)) break;
    if (vertices_left == 0) {
      // New stroke: fresh start point, brush width and vertex budget.
      cursor = cv::Point(static_cast<int>(unit(rng) * w), static_cast<int>(unit(rng) * h));
      angle = uniform(rng, 0.0, 2.0 * M_PI);
      thickness = uniform(rng, min_thick, max_thick);
      vertices_left = 4 + static_cast<int>(unit(rng) * 7.0);
    }
    angle += uniform(rng, -M_PI / 3.0, M_PI / 3.0);
    double length = uniform(rng, min_len, max_len);
    double thick = thickness;

    // Shrink the segment until it no longer overshoots the bucket.
    bool placed = false;
    for (int shrink = 0; shrink < 12 && !placed; ++shrink) {
      cv::Point next(static_cast<int>(std::lround(cursor.x + length * std::cos(angle))),
                     static_cast<int>(std::lround(cursor.y + length * std::sin(angle))));
      next.x = std::clamp(next.x, 0, static_cast<int>(w) - 1);
      next.y = std::clamp(next.y, 0, static_cast<int>(h) - 1);
      const int t = std::max(1, static_cast<int>(std::lround(thick)));
      const int pad = t + 2;
      cv::Rect box(std::min(cursor.x, next.x) - pad, std::min(cursor.y, next.y) - pad,
                   std::abs(cursor.x - next.x) + 2 * pad + 1, std::abs(cursor.y - next.y) + 2 * pad + 1);
      box &= cv::Rect(0, 0, static_cast<int>(w), static_cast<int>(h));
      cv::Mat roi = holes(box);
      cv::Mat stroke = roi.clone();
      cv::line(stroke, cursor - box.tl(), next - box.tl(), cv::Scalar(255), t, cv::LINE_8);
      const int64_t added = count_holes(stroke) - count_holes(roi);
      if (within_hi(filled + added)) {
        stroke.copyTo(roi);
        filled += added;
        cursor = next;
        placed = true;
      } else {
        length = std::max(1.0, length * 0.5);
        thick = std::max(1.0, thick * 0.5);
      }
    }
    --vertices_left;
    if (!placed) vertices_left = 0;
  }
  if (!above_lo(filled) || !within_hi(filled)) {
    throw GenerationFailure("irregular mask did not reach its ratio bucket within " +
                            std::to_string(kMaxStrokeAttempts) + " stroke attempts");
  }

  auto t = torch::from_blob(holes.data, {h, w}, torch::kUInt8).clone();
  return Mask((t == 0).to(torch::kFloat32));
}

Mask generate_mask(int64_t h, int64_t w, const MaskSpec& spec) {
  if (spec.kind == MaskKind::kIrregular) return generate_irregular_mask(h, w, spec);
  const double ratio = spec.ratio_hi > spec.ratio_lo ? 0.5 * (spec.ratio_lo + spec.ratio_hi) : spec.ratio_hi;
  return generate_center_mask(h, w, ratio);
}

ImageTensor apply_mask(const ImageTensor& img, const Mask& m) {
  check_same_spatial(img.height(), img.width(), m.height(), m.width(), "apply_mask");
  return ImageTensor(img.data() * m.data().unsqueeze(0).to(img.data().dtype()));
}

ImageTensor composite(const ImageTensor& pred, const ImageTensor& input, const Mask& m) {
  check_same_spatial(pred.height(), pred.width(), m.height(), m.width(), "composite");
  if (pred.data().sizes() != input.data().sizes()) throw InvalidInput("composite: pred/input shape mismatch");
  auto mm = m.data().unsqueeze(0).to(pred.data().dtype());
  return ImageTensor(mm * input.data() + (1.0 - mm) * pred.data());
}

double corruption_ratio(const Mask& m) {
  const auto zeros = (m.data() == 0).sum().item<int64_t>();
  return static_cast<double>(zeros) / static_cast<double>(m.data().numel());
}

torch::Tensor apply_mask(const torch::Tensor& images, const torch::Tensor& masks) {
  if (images.dim() != 4 || masks.dim() != 4) throw InvalidInput("batched apply_mask expects 4-D tensors");
  check_same_spatial(images.size(2), images.size(3), masks.size(2), masks.size(3), "apply_mask");
  return images * masks;
}

torch::Tensor composite(const torch::Tensor& pred, const torch::Tensor& input, const torch::Tensor& masks) {
  if (pred.sizes() != input.sizes()) throw InvalidInput("composite: pred/input shape mismatch");
  check_same_spatial(pred.size(2), pred.size(3), masks.size(2), masks.size(3), "composite");
  return masks * input + (1.0 - masks) * pred;
}

}  // namespace gmsrm
