#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <torch/torch.h>

namespace gmsrm {

// C x H x W float tensor with values in [-1, 1].
class ImageTensor {
 public:
  ImageTensor() = default;
  // Validates shape (C in {1,3}, H,W >= 8), finiteness and range.
  explicit ImageTensor(torch::Tensor data);

  const torch::Tensor& data() const { return data_; }
  int64_t channels() const { return data_.size(0); }
  int64_t height() const { return data_.size(1); }
  int64_t width() const { return data_.size(2); }

 private:
  torch::Tensor data_;
};

// H x W float tensor of {0, 1}; 1 = known pixel, 0 = missing pixel.
class Mask {
 public:
  Mask() = default;
  explicit Mask(torch::Tensor data);

  static Mask ones(int64_t h, int64_t w);
  static Mask zeros(int64_t h, int64_t w);

  const torch::Tensor& data() const { return data_; }
  int64_t height() const { return data_.size(0); }
  int64_t width() const { return data_.size(1); }

  bool operator==(const Mask& other) const;

 private:
  torch::Tensor data_;
};

enum class MaskKind { kCenter, kIrregular };

struct MaskSpec {
  MaskKind kind = MaskKind::kIrregular;
  double ratio_lo = 0.2;
  double ratio_hi = 0.3;
  uint64_t seed = 0;
};

MaskKind parse_mask_kind(const std::string& name);
std::string to_string(MaskKind kind);

// Shorter side is scaled to round(target_side * resize_ratio), then a centered
// target_side x target_side crop is taken. resize_ratio defaults to 320/256.
ImageTensor load_image(const std::filesystem::path& path, int64_t target_side,
                       double resize_ratio = 1.25);

// Loads an image resized so that its shorter side is `shorter_side`, without
// cropping. Used by the training data pipeline, which crops later.
torch::Tensor load_image_resized(const std::filesystem::path& path, int64_t shorter_side);

void save_image(const ImageTensor& img, const std::filesystem::path& path);

// 8-bit grayscale PNG, 255 = known, 0 = missing.
Mask load_mask(const std::filesystem::path& path);
void save_mask(const Mask& m, const std::filesystem::path& path);

Mask generate_center_mask(int64_t h, int64_t w, double ratio);
Mask generate_irregular_mask(int64_t h, int64_t w, const MaskSpec& spec);
// Dispatches on spec.kind; center masks use the midpoint of the range, or
// ratio_hi when the range is degenerate.
Mask generate_mask(int64_t h, int64_t w, const MaskSpec& spec);

ImageTensor apply_mask(const ImageTensor& img, const Mask& m);
ImageTensor composite(const ImageTensor& pred, const ImageTensor& input, const Mask& m);
double corruption_ratio(const Mask& m);

// Batched forms used by training: images [B,C,H,W], masks [B,1,H,W].
torch::Tensor apply_mask(const torch::Tensor& images, const torch::Tensor& masks);
torch::Tensor composite(const torch::Tensor& pred, const torch::Tensor& input,
                        const torch::Tensor& masks);

}  // namespace gmsrm
