#include "gmsrm/blocks.hpp"

#include <cmath>
#include <string>

#include "gmsrm/errors.hpp"

namespace gmsrm {

namespace F = torch::nn::functional;

namespace {

Tensor normalize_vector(const Tensor& x, double eps) { return x / x.norm().clamp_min(eps); }

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

torch::nn::Conv2d make_conv(int64_t in, int64_t out, int64_t k, int64_t stride) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2));
}

}  // namespace

Tensor instance_norm(const Tensor& x, double eps) {
  auto mean = x.mean({2, 3}, /*keepdim=*/true);
  auto centered = x - mean;
  auto var = centered.pow(2).mean({2, 3}, /*keepdim=*/true);
  return centered / torch::sqrt(var + eps);
}

Tensor modulate_weights(const Tensor& weight, const Tensor& style, bool demodulate, double eps) {
  if (weight.dim() != 4) throw InvalidInput("modulate_weights: weight must be [O, I, k, k]");
  if (style.dim() != 2 || style.size(1) != weight.size(1)) {
    throw InvalidInput("modulate_weights: style must be [B, C_in]");
  }
  auto w = weight.unsqueeze(0) * style.view({style.size(0), 1, style.size(1), 1, 1});
  if (demodulate) {
    auto d = torch::rsqrt(w.pow(2).sum({2, 3, 4}, /*keepdim=*/true) + eps);
    w = w * d;
  }
  return w;
}

Tensor modulated_conv(const Tensor& x, const Tensor& style, const Tensor& weight, const Tensor& bias,
                      bool demodulate, double eps) {
  if (x.dim() != 4 || x.size(1) != weight.size(1)) {
    throw InvalidInput("modulated_conv: input channels do not match weight");
  }
  if (style.size(0) != x.size(0)) throw InvalidInput("modulated_conv: style batch mismatch");
  const int64_t batch = x.size(0);
  const int64_t out = weight.size(0);
  const int64_t k = weight.size(2);
  auto w = modulate_weights(weight, style, demodulate, eps);
  auto grouped = x.reshape({1, batch * x.size(1), x.size(2), x.size(3)});
  auto y = F::conv2d(grouped, w.reshape({batch * out, weight.size(1), k, k}),
                     F::Conv2dFuncOptions().padding(k / 2).groups(batch));
  y = y.view({batch, out, y.size(2), y.size(3)});
  if (bias.defined()) y = y + bias.view({1, out, 1, 1});
  return y;
}

PowerIterationState make_power_iteration_state(int64_t rows, int64_t cols, at::Generator& gen,
                                               torch::Dtype dtype) {
  auto opts = torch::TensorOptions().dtype(dtype);
  return {normalize_vector(torch::randn({rows}, gen, opts), kSpectralEps),
          normalize_vector(torch::randn({cols}, gen, opts), kSpectralEps)};
}

Tensor spectral_normalize(const Tensor& w, int iters, PowerIterationState& state, double eps) {
  if (iters < 1) throw InvalidInput("spectral_normalize: iters must be >= 1");
  if (w.dim() != 2) throw InvalidInput("spectral_normalize: expects a matrix");
  {
    torch::NoGradGuard no_grad;
    auto wd = w.detach();
    for (int i = 0; i < iters; ++i) {
      state.v = normalize_vector(torch::mv(wd.t(), state.u), eps);
      state.u = normalize_vector(torch::mv(wd, state.v), eps);
    }
  }
  auto sigma = torch::dot(state.u, torch::mv(w, state.v));
  return w / sigma.clamp_min(eps);
}

Tensor bilinear_upsample(const Tensor& x, int64_t factor) {
  if (factor < 2) throw InvalidInput("bilinear_upsample: factor must be >= 2");
  const auto f = static_cast<double>(factor);
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{f, f})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

InstanceNorm2dImpl::InstanceNorm2dImpl(int64_t channels, double eps) : eps_(eps) {
  scale = register_parameter("scale", torch::ones({channels}));
  shift = register_parameter("shift", torch::zeros({channels}));
}

Tensor InstanceNorm2dImpl::forward(const Tensor& x) {
  const auto c = scale.size(0);
  return instance_norm(x, eps_) * scale.view({1, c, 1, 1}) + shift.view({1, c, 1, 1});
}

ChannelAttentionImpl::ChannelAttentionImpl(int64_t channels, int64_t reduction) {
  const int64_t hidden = std::max<int64_t>(1, channels / std::max<int64_t>(1, reduction));
  squeeze = register_module("squeeze", torch::nn::Linear(channels, hidden));
  excite = register_module("excite", torch::nn::Linear(hidden, channels));
}

Tensor ChannelAttentionImpl::gate(const Tensor& x) {
  auto pooled = x.mean({2, 3});
  return torch::sigmoid(excite->forward(torch::relu(squeeze->forward(pooled))));
}

Tensor ChannelAttentionImpl::forward(const Tensor& x) {
  auto g = gate(x);
  return x * g.view({g.size(0), g.size(1), 1, 1});
}

EncoderBlockImpl::EncoderBlockImpl(int64_t in_channels, int64_t out_channels, int64_t reduction) {
  down = register_module("down", make_conv(in_channels, out_channels, 3, 2));
  norm1 = register_module("norm1", InstanceNorm2d(out_channels));
  conv = register_module("conv", make_conv(out_channels, out_channels, 3, 1));
  norm2 = register_module("norm2", InstanceNorm2d(out_channels));
  attention = register_module("attention", ChannelAttention(out_channels, reduction));
}

Tensor EncoderBlockImpl::forward(const Tensor& x) {
  auto fe = torch::relu(norm1->forward(down->forward(x)));
  return fe + attention->forward(torch::relu(norm2->forward(conv->forward(fe))));
}

DecoderBlockImpl::DecoderBlockImpl(int64_t in_channels, int64_t out_channels, int64_t reduction)
    : in_channels_(in_channels) {
  fuse = register_module("fuse", make_conv(in_channels, out_channels, 3, 1));
  norm1 = register_module("norm1", InstanceNorm2d(out_channels));
  conv = register_module("conv", make_conv(out_channels, out_channels, 3, 1));
  norm2 = register_module("norm2", InstanceNorm2d(out_channels));
  attention = register_module("attention", ChannelAttention(out_channels, reduction));
}

Tensor DecoderBlockImpl::forward(const std::vector<Tensor>& inputs) {
  if (inputs.empty()) throw InvalidInput("decoder_block: no inputs");
  int64_t channels = 0;
  for (const auto& t : inputs) {
    if (t.dim() != 4 || t.size(0) != inputs[0].size(0) || t.size(2) != inputs[0].size(2) ||
        t.size(3) != inputs[0].size(3)) {
      throw InvalidInput("decoder_block: inputs must share batch and spatial size");
    }
    channels += t.size(1);
  }
  if (channels != in_channels_) {
    throw InvalidInput("decoder_block: expected " + std::to_string(in_channels_) + " input channels, got " +
                       std::to_string(channels));
  }
  auto x = inputs.size() == 1 ? inputs[0] : torch::cat(inputs, 1);
  auto fd = torch::relu(norm1->forward(fuse->forward(bilinear_upsample(x, 2))));
  return fd + attention->forward(torch::relu(norm2->forward(conv->forward(fd))));
}

ModulatedConv2dImpl::ModulatedConv2dImpl(int64_t in_channels, int64_t out_channels, int64_t kernel,
                                         bool demodulate)
    : demodulate_(demodulate) {
  if (kernel % 2 == 0) throw InvalidInput("modulated conv kernel must be odd");
  weight = register_parameter("weight", torch::zeros({out_channels, in_channels, kernel, kernel}));
  bias = register_parameter("bias", torch::zeros({out_channels}));
}

Tensor ModulatedConv2dImpl::forward(const Tensor& x, const Tensor& style) {
  return modulated_conv(x, style, weight, bias, demodulate_);
}

SNConv2dImpl::SNConv2dImpl(int64_t in_channels, int64_t out_channels, int64_t kernel, int64_t stride,
                           int64_t padding)
    : stride_(stride), padding_(padding) {
  if (kernel % 2 == 0) throw InvalidInput("SN conv kernel must be odd");
  if (stride != 1 && stride != 2) throw InvalidInput("SN conv stride must be 1 or 2");
  weight = register_parameter("weight", torch::zeros({out_channels, in_channels, kernel, kernel}));
  bias = register_parameter("bias", torch::zeros({out_channels}));
  u = register_buffer("u", torch::ones({out_channels}) / std::sqrt(static_cast<double>(out_channels)));
  const int64_t cols = in_channels * kernel * kernel;
  v = register_buffer("v", torch::ones({cols}) / std::sqrt(static_cast<double>(cols)));
}

void SNConv2dImpl::reset_state(at::Generator& gen) {
  torch::NoGradGuard no_grad;
  auto state = make_power_iteration_state(u.size(0), v.size(0), gen, weight.scalar_type());
  u.copy_(state.u);
  v.copy_(state.v);
}

void SNConv2dImpl::refresh(int iters) {
  torch::NoGradGuard no_grad;
  PowerIterationState state{u.clone(), v.clone()};
  spectral_normalize(weight.reshape({weight.size(0), -1}), iters, state);
  u.copy_(state.u);
  v.copy_(state.v);
}

Tensor SNConv2dImpl::normalized_weight() {
  auto mat = weight.reshape({weight.size(0), -1});
  auto sigma = torch::dot(u, torch::mv(mat, v));
  return weight / sigma.clamp_min(kSpectralEps);
}

Tensor SNConv2dImpl::forward(const Tensor& x) {
  Tensor w;
  if (is_training()) {
    PowerIterationState state{u.clone(), v.clone()};
    w = spectral_normalize(weight.reshape({weight.size(0), -1}), 1, state).view_as(weight);
    torch::NoGradGuard no_grad;
    u.copy_(state.u);
    v.copy_(state.v);
  } else {
    w = normalized_weight();
  }
  return F::conv2d(x, w, F::Conv2dFuncOptions().bias(bias).stride(stride_).padding(padding_));
}

void init_parameters(torch::nn::Module& module, at::Generator& gen) {
  torch::NoGradGuard no_grad;
  for (auto& item : module.named_parameters(/*recurse=*/true)) {
    const std::string& name = item.key();
    Tensor& p = item.value();
    if (ends_with(name, "scale")) {
      p.fill_(1.0);
    } else if (ends_with(name, "bias") || ends_with(name, "shift") || p.dim() < 2) {
      p.zero_();
    } else {
      const double fan_in = static_cast<double>(p.numel() / p.size(0));
      p.normal_(0.0, std::sqrt(2.0 / fan_in), gen);
    }
  }
}

int64_t count_parameters(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters(/*recurse=*/true)) n += p.numel();
  return n;
}

}  // namespace gmsrm
