#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include <torch/torch.h>

#include "gmsrm/blocks.hpp"
#include "gmsrm/imaging.hpp"
#include "gmsrm/model.hpp"

namespace gmsrm {

struct LossWeights {
  double gamma = 10.0;  // hole-region L1 weight inside L_rec
  double lambda_rec = 1.0;
  double lambda_perc = 0.1;
  double lambda_adv = 0.01;
  double lambda_kl = 0.01;
  std::vector<double> scale_weights;  // KL weight per sampled scale

  // Defaults with w_i = 1 / (n_scales - 1).
  static LossWeights defaults(int64_t n_scales);
  void validate() const;
};

// Images [B, C, H, W], masks [B, 1, H, W] (1 = known). Region terms are
// per-pixel means over each region; an empty region contributes 0.
Tensor reconstruction_loss(const Tensor& pred, const Tensor& gt, const Tensor& masks, double gamma);
double reconstruction_loss(const ImageTensor& pred, const ImageTensor& gt, const Mask& m, double gamma);

// Perceptual feature source; each layer maps images [B, C, H, W] to a feature map.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<Tensor> extract(const Tensor& images) = 0;
  virtual size_t num_layers() const = 0;
};

// Returns the images themselves as the single layer.
class IdentityExtractor final : public FeatureExtractor {
 public:
  std::vector<Tensor> extract(const Tensor& images) override { return {images}; }
  size_t num_layers() const override { return 1; }
};

// Frozen stack of conv + ReLU layers; every layer output is a feature level.
class ConvStackExtractor final : public FeatureExtractor {
 public:
  struct Layer {
    Tensor weight;  // [O, I, k, k]
    Tensor bias;    // [O]
    int64_t stride = 1;
  };

  explicit ConvStackExtractor(std::vector<Layer> layers);

  // 3 -> 16 -> 32 -> 64 channels, strides 1, 2, 2, weights drawn from `seed`.
  static ConvStackExtractor default_stack(uint64_t seed = 1234);
  // Weights file in the checkpoint container format with tensors
  // "layer<i>.weight", "layer<i>.bias" and meta {"strides": [...]}.
  static ConvStackExtractor from_file(const std::filesystem::path& path);

  std::vector<Tensor> extract(const Tensor& images) override;
  size_t num_layers() const override { return layers_.size(); }
  void to(torch::Dtype dtype);

 private:
  std::vector<Layer> layers_;
};

// sum_l 1/(C_l H_l W_l) * ||fx_l(pred) - fx_l(gt)||_1, averaged over the batch.
Tensor perceptual_loss(const Tensor& pred, const Tensor& gt, FeatureExtractor& fx);

// Four spectral-normalized stride-2 convs with LeakyReLU(0.2); outputs a
// one-channel patch map. Not conditioned on the mask.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  DiscriminatorImpl(int64_t in_channels, int64_t base_channels);
  Tensor forward(const Tensor& x);
  void initialize(uint64_t seed);
  // Largest singular value of every normalized layer weight (exact SVD).
  std::vector<double> spectral_norms();

  torch::nn::ModuleList layers{nullptr};
};
TORCH_MODULE(Discriminator);

// -E[D(G(I))]
Tensor adversarial_generator_loss(Discriminator& d, const Tensor& pred);
// E[1 - D(I_GT)] + E[D(G(I))]; pred is detached here.
Tensor discriminator_loss(Discriminator& d, const Tensor& pred, const Tensor& gt);

// KL(N(mu, sigma^2) || N(0, 1)) = 0.5 (mu^2 + sigma^2 - 1 - 2 ln sigma).
double kl_standard_normal(double mu, double sigma);
// sum_i w_i * mean_batch KL_i. Throws InvalidInput when any sigma <= 0 or the
// weight count does not match.
Tensor kl_loss(const std::vector<ScaleNoiseParams>& dists, const std::vector<double>& weights);

struct LossParts {
  Tensor rec;
  Tensor perc;
  Tensor adv;
  Tensor kl;
};

Tensor total_loss(const LossParts& parts, const LossWeights& lw);
double total_loss(double rec, double perc, double adv, double kl, const LossWeights& lw);

}  // namespace gmsrm
