#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace gmsrm {

using torch::Tensor;

inline constexpr double kInstanceNormEps = 1e-5;
inline constexpr double kDemodEps = 1e-8;
inline constexpr double kSpectralEps = 1e-12;

// ---------------------------------------------------------------------------
// Functional forms. Feature maps are batched: [B, C, H, W].
// ---------------------------------------------------------------------------

// Per-sample, per-channel normalization over H x W (biased variance).
Tensor instance_norm(const Tensor& x, double eps = kInstanceNormEps);

// Scales weight [O, I, k, k] by style [B, I] along the input axis and, when
// `demodulate` is set, rescales every output filter to unit L2 norm.
// Returns per-sample weights [B, O, I, k, k].
Tensor modulate_weights(const Tensor& weight, const Tensor& style, bool demodulate,
                        double eps = kDemodEps);

// Convolves each sample with its own modulated weights (grouped conv).
// `bias` may be undefined.
Tensor modulated_conv(const Tensor& x, const Tensor& style, const Tensor& weight, const Tensor& bias,
                      bool demodulate, double eps = kDemodEps);

// Power-iteration state for one weight matrix: u has length rows, v has length cols.
struct PowerIterationState {
  Tensor u;
  Tensor v;
};

PowerIterationState make_power_iteration_state(int64_t rows, int64_t cols, at::Generator& gen,
                                               torch::Dtype dtype = torch::kFloat32);

// Runs `iters` power iterations on `w` (updating `state` in place), then
// returns w / sigma, sigma = u^T w v. Gradients flow through w only; u and v
// are treated as constants. A zero matrix yields a zero matrix.
Tensor spectral_normalize(const Tensor& w, int iters, PowerIterationState& state,
                          double eps = kSpectralEps);

// align_corners=false bilinear resize by an integer factor.
Tensor bilinear_upsample(const Tensor& x, int64_t factor);

// ---------------------------------------------------------------------------
// Parameterized layers.
// ---------------------------------------------------------------------------

// Instance norm with learned per-channel affine (scale 1, shift 0 at init).
class InstanceNorm2dImpl : public torch::nn::Module {
 public:
  explicit InstanceNorm2dImpl(int64_t channels, double eps = kInstanceNormEps);
  Tensor forward(const Tensor& x);

  Tensor scale;
  Tensor shift;

 private:
  double eps_;
};
TORCH_MODULE(InstanceNorm2d);

// Squeeze-and-excitation channel attention.
class ChannelAttentionImpl : public torch::nn::Module {
 public:
  ChannelAttentionImpl(int64_t channels, int64_t reduction);
  // Sigmoid gate per channel, [B, C].
  Tensor gate(const Tensor& x);
  Tensor forward(const Tensor& x);

  torch::nn::Linear squeeze{nullptr};
  torch::nn::Linear excite{nullptr};
};
TORCH_MODULE(ChannelAttention);

// Stride-2 residual block:
//   F^e = ReLU(IN(Conv_s2(x)));  out = F^e + CA(ReLU(IN(Conv(F^e)))).
class EncoderBlockImpl : public torch::nn::Module {
 public:
  EncoderBlockImpl(int64_t in_channels, int64_t out_channels, int64_t reduction = 4);
  Tensor forward(const Tensor& x);

  torch::nn::Conv2d down{nullptr};
  InstanceNorm2d norm1{nullptr};
  torch::nn::Conv2d conv{nullptr};
  InstanceNorm2d norm2{nullptr};
  ChannelAttention attention{nullptr};
};
TORCH_MODULE(EncoderBlock);

// Upsampling residual block over the channel concatenation of its inputs:
//   F^d = ReLU(IN(Conv(interp(Concat[inputs]))));  out = F^d + CA(ReLU(IN(Conv(F^d)))).
// All inputs must share spatial size; their channel counts must sum to in_channels.
class DecoderBlockImpl : public torch::nn::Module {
 public:
  DecoderBlockImpl(int64_t in_channels, int64_t out_channels, int64_t reduction = 4);
  Tensor forward(const std::vector<Tensor>& inputs);

  int64_t in_channels() const { return in_channels_; }

  torch::nn::Conv2d fuse{nullptr};
  InstanceNorm2d norm1{nullptr};
  torch::nn::Conv2d conv{nullptr};
  InstanceNorm2d norm2{nullptr};
  ChannelAttention attention{nullptr};

 private:
  int64_t in_channels_;
};
TORCH_MODULE(DecoderBlock);

// Weight + bias holder for a style-modulated convolution (stride 1, same padding).
class ModulatedConv2dImpl : public torch::nn::Module {
 public:
  ModulatedConv2dImpl(int64_t in_channels, int64_t out_channels, int64_t kernel, bool demodulate);
  Tensor forward(const Tensor& x, const Tensor& style);

  bool demodulate() const { return demodulate_; }

  Tensor weight;
  Tensor bias;

 private:
  bool demodulate_;
};
TORCH_MODULE(ModulatedConv2d);

// Conv2d whose weight is divided by its spectral norm on every forward. In
// training mode one power iteration refreshes the state first.
class SNConv2dImpl : public torch::nn::Module {
 public:
  SNConv2dImpl(int64_t in_channels, int64_t out_channels, int64_t kernel, int64_t stride,
               int64_t padding);
  Tensor forward(const Tensor& x);
  // Normalized weight using the current state, without advancing it.
  Tensor normalized_weight();
  void reset_state(at::Generator& gen);
  // Advances the stored power-iteration state without a forward pass.
  void refresh(int iters);

  Tensor weight;
  Tensor bias;
  Tensor u;
  Tensor v;

 private:
  int64_t stride_;
  int64_t padding_;
};
TORCH_MODULE(SNConv2d);

// Re-draws every parameter of `module` from `gen`: He-normal for weights with
// fan-in, zeros for biases and shifts, ones for IN scales. Buffers are kept.
void init_parameters(torch::nn::Module& module, at::Generator& gen);

int64_t count_parameters(const torch::nn::Module& module);

}  // namespace gmsrm
