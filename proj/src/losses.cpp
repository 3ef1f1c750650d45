#include "gmsrm/losses.hpp"

#include <cmath>
#include <string>

#include "gmsrm/checkpoint.hpp"
#include "gmsrm/errors.hpp"

namespace gmsrm {

namespace F = torch::nn::functional;

namespace {

constexpr int kWarmupIterations = 20;

void check_image_pair(const Tensor& pred, const Tensor& gt, const char* what) {
  if (pred.sizes() != gt.sizes()) throw InvalidInput(std::string(what) + ": pred/gt shape mismatch");
}

// Mean |pred - gt| over pixels selected by `weight` (broadcast over channels).
Tensor region_l1(const Tensor& abs_diff, const Tensor& weight) {
  auto count = weight.sum() * abs_diff.size(1);
  auto total = (abs_diff * weight).sum();
  if (count.item<double>() == 0.0) return torch::zeros({}, abs_diff.options());
  return total / count;
}

}  // namespace

LossWeights LossWeights::defaults(int64_t n_scales) {
  LossWeights lw;
  const int64_t scales = std::max<int64_t>(1, n_scales - 1);
  lw.scale_weights.assign(static_cast<size_t>(scales), 1.0 / static_cast<double>(scales));
  return lw;
}

void LossWeights::validate() const {
  if (gamma < 0 || lambda_rec < 0 || lambda_perc < 0 || lambda_adv < 0 || lambda_kl < 0) {
    throw ConfigError("loss weights must be non-negative");
  }
  for (double w : scale_weights) {
    if (w < 0) throw ConfigError("KL scale weights must be non-negative");
  }
}

Tensor reconstruction_loss(const Tensor& pred, const Tensor& gt, const Tensor& masks, double gamma) {
  check_image_pair(pred, gt, "reconstruction_loss");
  if (masks.dim() != 4 || masks.size(0) != pred.size(0) || masks.size(1) != 1 || masks.size(2) != pred.size(2) ||
      masks.size(3) != pred.size(3)) {
    throw InvalidInput("reconstruction_loss: masks must be [B, 1, H, W] matching pred");
  }
  auto diff = (pred - gt).abs();
  auto m = masks.to(pred.dtype());
  return region_l1(diff, m) + gamma * region_l1(diff, 1.0 - m);
}

double reconstruction_loss(const ImageTensor& pred, const ImageTensor& gt, const Mask& m, double gamma) {
  auto mm = m.data().unsqueeze(0).unsqueeze(0);
  if (mm.size(2) != pred.height() || mm.size(3) != pred.width()) {
    throw InvalidInput("reconstruction_loss: mask shape mismatch");
  }
  return reconstruction_loss(pred.data().unsqueeze(0), gt.data().unsqueeze(0), mm, gamma).item<double>();
}

ConvStackExtractor::ConvStackExtractor(std::vector<Layer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw InvalidInput("feature extractor needs at least one layer");
  for (auto& l : layers_) {
    if (l.weight.dim() != 4 || !l.bias.defined() || l.bias.size(0) != l.weight.size(0)) {
      throw InvalidInput("feature extractor layer has inconsistent weight/bias shapes");
    }
    l.weight = l.weight.detach();
    l.bias = l.bias.detach();
  }
}

ConvStackExtractor ConvStackExtractor::default_stack(uint64_t seed) {
  auto gen = make_generator(seed);
  const std::vector<std::pair<int64_t, int64_t>> widths = {{3, 16}, {16, 32}, {32, 64}};
  const std::vector<int64_t> strides = {1, 2, 2};
  std::vector<Layer> layers;
  for (size_t i = 0; i < widths.size(); ++i) {
    const auto [in, out] = widths[i];
    Layer l;
    l.weight = torch::randn({out, in, 3, 3}, gen) * std::sqrt(2.0 / static_cast<double>(in * 9));
    l.bias = torch::zeros({out});
    l.stride = strides[i];
    layers.push_back(l);
  }
  return ConvStackExtractor(std::move(layers));
}

ConvStackExtractor ConvStackExtractor::from_file(const std::filesystem::path& path) {
  auto ckpt = load_checkpoint(path);
  if (!ckpt.meta.contains("strides")) throw InvalidInput("extractor weights file lacks meta.strides");
  const auto strides = ckpt.meta.at("strides").get<std::vector<int64_t>>();
  std::vector<Layer> layers;
  for (size_t i = 0; i < strides.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i);
    auto w = ckpt.tensors.find(prefix + ".weight");
    auto b = ckpt.tensors.find(prefix + ".bias");
    if (w == ckpt.tensors.end() || b == ckpt.tensors.end()) {
      throw InvalidInput("extractor weights file lacks " + prefix);
    }
    layers.push_back({w->second.to(torch::kFloat32), b->second.to(torch::kFloat32), strides[i]});
  }
  return ConvStackExtractor(std::move(layers));
}

std::vector<Tensor> ConvStackExtractor::extract(const Tensor& images) {
  std::vector<Tensor> out;
  Tensor x = images;
  for (const auto& l : layers_) {
    x = torch::relu(F::conv2d(x, l.weight.to(x.dtype()),
                              F::Conv2dFuncOptions().bias(l.bias.to(x.dtype())).stride(l.stride).padding(
                                  l.weight.size(2) / 2)));
    out.push_back(x);
  }
  return out;
}

void ConvStackExtractor::to(torch::Dtype dtype) {
  for (auto& l : layers_) {
    l.weight = l.weight.to(dtype);
    l.bias = l.bias.to(dtype);
  }
}

Tensor perceptual_loss(const Tensor& pred, const Tensor& gt, FeatureExtractor& fx) {
  check_image_pair(pred, gt, "perceptual_loss");
  auto fp = fx.extract(pred);
  auto fg = fx.extract(gt);
  Tensor total = torch::zeros({}, pred.options());
  for (size_t l = 0; l < fp.size(); ++l) {
    // mean over C_l x H_l x W_l and the batch
    total = total + (fp[l] - fg[l]).abs().mean();
  }
  return total;
}

DiscriminatorImpl::DiscriminatorImpl(int64_t in_channels, int64_t base_channels) {
  layers = register_module("layers", torch::nn::ModuleList());
  const std::vector<int64_t> widths = {base_channels, base_channels * 2, base_channels * 4, 1};
  int64_t in = in_channels;
  for (int64_t out : widths) {
    layers->push_back(SNConv2d(in, out, 3, 2, 1));
    in = out;
  }
  initialize(0);
}

void DiscriminatorImpl::initialize(uint64_t seed) {
  auto gen = make_generator(seed);
  init_parameters(*this, gen);
  for (size_t i = 0; i < layers->size(); ++i) {
    auto& layer = layers->at<SNConv2dImpl>(i);
    layer.reset_state(gen);
    layer.refresh(kWarmupIterations);
  }
}

Tensor DiscriminatorImpl::forward(const Tensor& x) {
  Tensor h = x;
  for (size_t i = 0; i < layers->size(); ++i) {
    h = layers->at<SNConv2dImpl>(i).forward(h);
    if (i + 1 < layers->size()) h = F::leaky_relu(h, F::LeakyReLUFuncOptions().negative_slope(0.2));
  }
  return h;
}

std::vector<double> DiscriminatorImpl::spectral_norms() {
  torch::NoGradGuard no_grad;
  std::vector<double> out;
  for (size_t i = 0; i < layers->size(); ++i) {
    auto w = layers->at<SNConv2dImpl>(i).normalized_weight();
    auto s = torch::linalg_svdvals(w.reshape({w.size(0), -1}).to(torch::kFloat64));
    out.push_back(s.max().item<double>());
  }
  return out;
}

Tensor adversarial_generator_loss(Discriminator& d, const Tensor& pred) { return -d->forward(pred).mean(); }

Tensor discriminator_loss(Discriminator& d, const Tensor& pred, const Tensor& gt) {
  return (1.0 - d->forward(gt)).mean() + d->forward(pred.detach()).mean();
}

double kl_standard_normal(double mu, double sigma) {
  if (!(sigma > 0.0)) throw InvalidInput("kl: sigma must be > 0");
  return 0.5 * (mu * mu + sigma * sigma - 1.0 - 2.0 * std::log(sigma));
}

Tensor kl_loss(const std::vector<ScaleNoiseParams>& dists, const std::vector<double>& weights) {
  if (dists.size() != weights.size()) {
    throw InvalidInput("kl_loss: " + std::to_string(dists.size()) + " distributions but " +
                       std::to_string(weights.size()) + " weights");
  }
  if (dists.empty()) return torch::zeros({});
  Tensor total = torch::zeros({}, dists[0].mu.options());
  for (size_t i = 0; i < dists.size(); ++i) {
    const auto& d = dists[i];
    if (!(d.sigma > 0).all().item<bool>()) throw InvalidInput("kl_loss: sigma must be > 0");
    auto kl = 0.5 * (d.mu.pow(2) + d.sigma.pow(2) - 1.0 - 2.0 * torch::log(d.sigma));
    total = total + weights[i] * kl.mean();
  }
  return total;
}

Tensor total_loss(const LossParts& parts, const LossWeights& lw) {
  return lw.lambda_rec * parts.rec + lw.lambda_perc * parts.perc + lw.lambda_adv * parts.adv +
         lw.lambda_kl * parts.kl;
}

double total_loss(double rec, double perc, double adv, double kl, const LossWeights& lw) {
  return lw.lambda_rec * rec + lw.lambda_perc * perc + lw.lambda_adv * adv + lw.lambda_kl * kl;
}

}  // namespace gmsrm
