#include "gmsrm/model.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "gmsrm/errors.hpp"

namespace gmsrm {

namespace F = torch::nn::functional;

namespace {

constexpr double kLeak = 0.2;
constexpr double kSigmaFloor = 1e-6;
constexpr double kInitialNoiseStrength = 0.1;

Tensor lrelu(const Tensor& x) { return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(kLeak)); }

torch::nn::Conv2d conv3x3(int64_t in, int64_t out) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1));
}

}  // namespace

Variant parse_variant(const std::string& name) {
  if (name == "base") return Variant::kBase;
  if (name == "gm-bm") return Variant::kGmBm;
  if (name == "gm-csv") return Variant::kGmCsv;
  if (name == "gm-srm") return Variant::kGmSrm;
  throw ConfigError("unknown variant: " + name);
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kBase: return "base";
    case Variant::kGmBm: return "gm-bm";
    case Variant::kGmCsv: return "gm-csv";
    case Variant::kGmSrm: return "gm-srm";
  }
  return "unknown";
}

bool uses_memory(Variant v) { return v != Variant::kBase; }
bool uses_conditional_noise(Variant v) { return v == Variant::kGmCsv || v == Variant::kGmSrm; }
bool uses_progressive_updates(Variant v) { return v == Variant::kGmSrm; }

void ModelConfig::validate() const {
  if (n_scales < 2) throw ConfigError("n_scales must be >= 2");
  if (base_channels < 1 || max_channels < base_channels) throw ConfigError("bad channel schedule");
  if (d_c < 1) throw ConfigError("d_c must be >= 1");
  if (reduction < 1) throw ConfigError("reduction must be >= 1");
  if (mapping_layers < 1) throw ConfigError("mapping_layers must be >= 1");
  if (image_side < 8 || image_side % (int64_t{1} << n_scales) != 0) {
    throw ConfigError("image_side must be >= 8 and divisible by 2^n_scales");
  }
}

int64_t ModelConfig::encoder_width(int64_t k) const {
  return std::min(max_channels, base_channels << std::min<int64_t>(k, 20));
}

int64_t ModelConfig::decoder_width(int64_t k) const {
  return k == 0 ? base_channels : encoder_width(k - 1);
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_scales", n_scales},   {"base_channels", base_channels}, {"max_channels", max_channels},
          {"d_c", d_c},             {"image_side", image_side},       {"reduction", reduction},
          {"mapping_layers", mapping_layers}, {"variant", to_string(variant)}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.n_scales = j.value("n_scales", cfg.n_scales);
  cfg.base_channels = j.value("base_channels", cfg.base_channels);
  cfg.max_channels = j.value("max_channels", cfg.max_channels);
  cfg.d_c = j.value("d_c", cfg.d_c);
  cfg.image_side = j.value("image_side", cfg.image_side);
  cfg.reduction = j.value("reduction", cfg.reduction);
  cfg.mapping_layers = j.value("mapping_layers", cfg.mapping_layers);
  cfg.variant = parse_variant(j.value("variant", to_string(cfg.variant)));
  cfg.validate();
  return cfg;
}

ScaleNoiseParams noise_params_from_raw(const Tensor& raw_mu, const Tensor& raw_sigma) {
  return {raw_mu, F::softplus(raw_sigma) + kSigmaFloor};
}

// --- encoder ----------------------------------------------------------------

EncoderImpl::EncoderImpl(const ModelConfig& cfg, bool with_noise_heads) {
  blocks = register_module("blocks", torch::nn::ModuleList());
  int64_t in = 4;
  for (int64_t k = 0; k < cfg.levels(); ++k) {
    blocks->push_back(EncoderBlock(in, cfg.encoder_width(k), cfg.reduction));
    in = cfg.encoder_width(k);
  }
  if (with_noise_heads) {
    heads = register_module("heads", torch::nn::ModuleList());
    for (int64_t k = 0; k < cfg.levels(); ++k) heads->push_back(conv3x3(cfg.encoder_width(k), 2));
  }
}

EncoderOutput EncoderImpl::forward(const Tensor& input) {
  EncoderOutput out;
  Tensor x = input;
  for (size_t k = 0; k < blocks->size(); ++k) {
    x = blocks->at<EncoderBlockImpl>(k).forward(x);
    out.pyramid.push_back(x);
  }
  if (heads) {
    // Mean(Split(Conv(F_E))): two channels averaged over space.
    for (size_t k = 0; k < heads->size(); ++k) {
      auto raw = heads->at<torch::nn::Conv2dImpl>(k).forward(out.pyramid[k]).mean({2, 3});
      out.noise_heads.push_back(noise_params_from_raw(raw.select(1, 0), raw.select(1, 1)));
    }
  }
  return out;
}

// --- latent mapping and noise heads ------------------------------------------

LatentMapperImpl::LatentMapperImpl(int64_t in_channels, int64_t d_c) {
  conv = register_module("conv", conv3x3(in_channels, in_channels));
  fc = register_module("fc", torch::nn::Linear(in_channels, d_c));
}

Tensor LatentMapperImpl::forward(const Tensor& features) {
  return fc->forward(lrelu(conv->forward(features)).mean({2, 3}));
}

ConditionalNoiseHeadImpl::ConditionalNoiseHeadImpl(int64_t in_channels) {
  const int64_t hidden = std::max<int64_t>(8, in_channels / 2);
  conv = register_module("conv", conv3x3(in_channels, hidden));
  fc = register_module("fc", torch::nn::Linear(hidden, 2));
}

ScaleNoiseParams ConditionalNoiseHeadImpl::forward(const Tensor& conditioning) {
  auto raw = fc->forward(lrelu(conv->forward(conditioning)).mean({2, 3}));
  return noise_params_from_raw(raw.select(1, 0), raw.select(1, 1));
}

Tensor sample_noise(const ScaleNoiseParams& params, int64_t height, int64_t width, at::Generator& gen) {
  const int64_t batch = params.mu.size(0);
  auto eps = torch::randn({batch, 1, height, width}, gen, params.mu.options());
  return params.mu.view({batch, 1, 1, 1}) + params.sigma.view({batch, 1, 1, 1}) * eps;
}

ConditionalNoise sample_conditional_noise(ConditionalNoiseHead& head, const Tensor& f_e,
                                          const std::optional<Tensor>& f_d_prev, at::Generator& gen) {
  Tensor conditioning = f_e;
  if (f_d_prev) {
    if (f_d_prev->size(2) != f_e.size(2) || f_d_prev->size(3) != f_e.size(3)) {
      throw InvalidInput("sample_conditional_noise: conditioning features are not co-shaped");
    }
    conditioning = torch::cat({f_e, *f_d_prev}, 1);
  }
  ConditionalNoise out;
  out.params = head->forward(conditioning);
  out.noise = sample_noise(out.params, f_e.size(2), f_e.size(3), gen);
  return out;
}

// --- generative memory -------------------------------------------------------

MemoryBlockImpl::MemoryBlockImpl(int64_t prev_channels, int64_t encoded_channels, int64_t out_channels,
                                 int64_t d_c) {
  const int64_t in = prev_channels + encoded_channels;
  affine = register_module("affine", torch::nn::Linear(d_c, in));
  conv = register_module("conv", ModulatedConv2d(in, out_channels, 3, /*demodulate=*/true));
  noise_strength = register_parameter("noise_strength", torch::zeros({out_channels}));
  rgb_affine = register_module("rgb_affine", torch::nn::Linear(d_c, out_channels));
  rgb = register_module("rgb", ModulatedConv2d(out_channels, 3, 1, /*demodulate=*/false));
}

Tensor MemoryBlockImpl::forward(const Tensor& prev, const Tensor& encoded, const Tensor& c, const Tensor& noise) {
  auto x = torch::cat({prev, encoded}, 1);
  auto y = conv->forward(x, affine->forward(c));
  y = y + noise * noise_strength.view({1, -1, 1, 1});
  return lrelu(y);
}

Tensor MemoryBlockImpl::to_rgb(const Tensor& features, const Tensor& c) {
  return rgb->forward(features, rgb_affine->forward(c));
}

GenerativeMemoryImpl::GenerativeMemoryImpl(const ModelConfig& cfg) : cfg_(cfg) {
  mapping = register_module("mapping", torch::nn::Sequential());
  for (int64_t i = 0; i < cfg.mapping_layers; ++i) {
    mapping->push_back(torch::nn::Linear(cfg.d_c, cfg.d_c));
    mapping->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(kLeak)));
  }
  const int64_t coarsest = cfg.levels() - 1;
  const int64_t side = cfg.level_side(coarsest);
  constant = register_parameter("constant", torch::zeros({1, cfg.encoder_width(coarsest), side, side}));
  trained = register_buffer("trained", torch::zeros({1}));
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int64_t k = 0; k < cfg.levels(); ++k) {
    const int64_t prev = k == coarsest ? cfg.encoder_width(coarsest) : cfg.encoder_width(k + 1);
    blocks->push_back(MemoryBlock(prev, cfg.encoder_width(k), cfg.encoder_width(k), cfg.d_c));
  }
}

Tensor GenerativeMemoryImpl::query(int64_t level, const Tensor& c, const Tensor& encoded, const Tensor& prev,
                                   const Tensor& noise) {
  if (level < 0 || level >= cfg_.levels()) throw InvalidInput("memory query: level out of range");
  Tensor p;
  if (prev.defined()) {
    p = bilinear_upsample(prev, 2);
  } else {
    p = constant.expand({encoded.size(0), -1, -1, -1});
  }
  if (p.size(2) != encoded.size(2) || p.size(3) != encoded.size(3)) {
    throw InvalidInput("memory query: encoded features do not match the level resolution");
  }
  return blocks->at<MemoryBlockImpl>(level).forward(p, encoded, c, noise);
}

Tensor GenerativeMemoryImpl::map_latent(const Tensor& z) {
  auto normed = z * torch::rsqrt(z.pow(2).mean(1, /*keepdim=*/true) + 1e-8);
  return mapping->forward(normed);
}

Tensor GenerativeMemoryImpl::synthesize(const Tensor& z, at::Generator& gen) {
  auto w = map_latent(z);
  const int64_t batch = z.size(0);
  auto opts = z.options();
  Tensor prev;
  Tensor rgb;
  for (int64_t k = cfg_.levels() - 1; k >= 0; --k) {
    const int64_t side = cfg_.level_side(k);
    auto encoded = torch::zeros({batch, cfg_.encoder_width(k), side, side}, opts);
    auto noise = torch::randn({batch, 1, side, side}, gen, opts);
    prev = query(k, w, encoded, prev, noise);
    auto r = blocks->at<MemoryBlockImpl>(k).to_rgb(prev, w);
    rgb = rgb.defined() ? bilinear_upsample(rgb, 2) + r : r;
  }
  return torch::tanh(bilinear_upsample(rgb, 2));
}

bool GenerativeMemoryImpl::is_trained() const { return trained.item<double>() > 0.5; }

void GenerativeMemoryImpl::mark_trained(bool flag) {
  torch::NoGradGuard no_grad;
  trained.fill_(flag ? 1.0 : 0.0);
}

void GenerativeMemoryImpl::finish_init(at::Generator& gen) {
  torch::NoGradGuard no_grad;
  constant.normal_(0.0, 1.0, gen);
  for (size_t k = 0; k < blocks->size(); ++k) {
    auto& block = blocks->at<MemoryBlockImpl>(k);
    // Styles start at 1 so an untrained affine is close to plain convolution.
    block.affine->bias.fill_(1.0);
    block.rgb_affine->bias.fill_(1.0);
    block.noise_strength.fill_(kInitialNoiseStrength);
  }
}

// --- GM-SRM ------------------------------------------------------------------

GMSRMImpl::GMSRMImpl(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const Variant v = cfg_.variant;
  const int64_t levels = cfg_.levels();
  const int64_t coarsest = levels - 1;

  encoder = register_module("encoder", Encoder(cfg_, uses_conditional_noise(v)));
  if (uses_memory(v)) {
    initial_mapper = register_module("initial_mapper", LatentMapper(cfg_.encoder_width(coarsest), cfg_.d_c));
    adapters = register_module("adapters", torch::nn::ModuleList());
    for (int64_t k = 0; k < levels; ++k) adapters->push_back(conv3x3(cfg_.encoder_width(k), cfg_.encoder_width(k)));
    memory = register_module("memory", GenerativeMemory(cfg_));
  }
  // Channels of F_D^{i-1} entering the block at level k.
  auto prev_width = [&](int64_t k) { return k == coarsest ? cfg_.encoder_width(coarsest) : cfg_.decoder_width(k + 1); };
  if (uses_conditional_noise(v)) {
    noise_heads = register_module("noise_heads", torch::nn::ModuleList());
    for (int64_t k = 0; k < coarsest; ++k) {
      noise_heads->push_back(ConditionalNoiseHead(cfg_.encoder_width(k) + prev_width(k)));
    }
  }
  if (uses_progressive_updates(v)) {
    update_mappers = register_module("update_mappers", torch::nn::ModuleList());
    for (int64_t k = 0; k < levels; ++k) update_mappers->push_back(LatentMapper(prev_width(k), cfg_.d_c));
  }
  decoder = register_module("decoder", torch::nn::ModuleList());
  for (int64_t k = 0; k < levels; ++k) {
    int64_t in = cfg_.encoder_width(k) + prev_width(k);
    if (uses_memory(v)) in += cfg_.encoder_width(k);
    decoder->push_back(DecoderBlock(in, cfg_.decoder_width(k), cfg_.reduction));
  }
  out_conv = register_module("out_conv", conv3x3(cfg_.decoder_width(0), 3));
  initialize(0);
}

void GMSRMImpl::initialize(uint64_t seed) {
  auto gen = make_generator(seed);
  init_parameters(*this, gen);
  if (memory) memory->finish_init(gen);
}

EncoderOutput GMSRMImpl::encode(const Tensor& masked, const Tensor& masks) {
  const int64_t side = cfg_.image_side;
  if (masked.dim() != 4 || masked.size(1) != 3 || masked.size(2) != side || masked.size(3) != side) {
    throw InvalidInput("encode: expected masked images [B, 3, " + std::to_string(side) + ", " +
                       std::to_string(side) + "]");
  }
  if (masks.dim() != 4 || masks.size(0) != masked.size(0) || masks.size(1) != 1 || masks.size(2) != side ||
      masks.size(3) != side) {
    throw InvalidInput("encode: masks must be [B, 1, S, S] matching the images");
  }
  // F^1_E = Concat[I_in, M_in]
  return encoder->forward(torch::cat({masked, masks.to(masked.dtype())}, 1));
}

Tensor GMSRMImpl::update_embedding(int64_t level, const Tensor& c_prev, const Tensor& f_d_prev) {
  if (!update_mappers) throw ConfigError("update_embedding requires the gm-srm variant");
  return update_mappers->at<LatentMapperImpl>(level).forward(f_d_prev) + c_prev;
}

ForwardOutput GMSRMImpl::forward(const Tensor& masked, const Tensor& masks, at::Generator& gen,
                                 InferenceTrace* trace) {
  const Variant v = cfg_.variant;
  if (memory && !memory->is_trained() && !cfg_.allow_untrained_memory) {
    throw ConfigError("generative memory is not pre-trained; run pretrain-memory first");
  }
  auto enc = encode(masked, masks);
  const int64_t coarsest = cfg_.levels() - 1;
  const int64_t batch = masked.size(0);

  ForwardOutput out;
  Tensor f_d = enc.pyramid[coarsest];  // F^1_D := coarsest encoder features
  Tensor c;
  Tensor mem_prev;
  if (memory) c = initial_mapper->forward(f_d);

  for (int64_t k = coarsest; k >= 0; --k) {
    const Tensor& f_e = enc.pyramid[k];
    auto& block = decoder->at<DecoderBlockImpl>(k);
    if (!memory) {
      f_d = block.forward({f_e, f_d});
      continue;
    }
    if (uses_progressive_updates(v)) {
      c = update_embedding(k, c, f_d);
      if (trace) ++trace->embedding_updates;
    }
    Tensor noise;
    if (uses_conditional_noise(v)) {
      if (k == coarsest) {
        // F_D^{i-1} is F_E itself here: use the encoder-only head.
        out.noise_params.push_back(enc.noise_heads[k]);
        noise = sample_noise(enc.noise_heads[k], f_e.size(2), f_e.size(3), gen);
      } else {
        auto head = ConditionalNoiseHead(noise_heads->ptr<ConditionalNoiseHeadImpl>(k));
        auto cond = sample_conditional_noise(head, f_e, f_d, gen);
        out.noise_params.push_back(cond.params);
        noise = cond.noise;
      }
    } else {
      noise = torch::randn({batch, 1, f_e.size(2), f_e.size(3)}, gen, f_e.options());
    }
    auto encoded = adapters->at<torch::nn::Conv2dImpl>(k).forward(f_e);
    auto f_m = memory->query(k, c, encoded, mem_prev, noise);
    if (trace) ++trace->memory_queries;
    mem_prev = f_m;
    f_d = block.forward({f_m, f_e, f_d});
  }
  out.image = torch::tanh(out_conv->forward(f_d));
  return out;
}

void GMSRMImpl::freeze_memory() {
  if (!memory) return;
  for (auto& p : memory->parameters()) p.set_requires_grad(false);
}

std::vector<Tensor> GMSRMImpl::trainable_parameters() {
  std::unordered_set<const void*> frozen;
  if (memory) {
    for (const auto& p : memory->parameters()) frozen.insert(p.unsafeGetTensorImpl());
  }
  std::vector<Tensor> out;
  for (const auto& p : parameters()) {
    if (!frozen.count(p.unsafeGetTensorImpl())) out.push_back(p);
  }
  return out;
}

ImageTensor infer(GMSRM& model, const ImageTensor& img, const Mask& m, at::Generator& gen, InferenceTrace* trace) {
  if (img.channels() != 3) throw InvalidInput("infer expects an RGB image");
  auto masked = apply_mask(img, m);
  torch::NoGradGuard no_grad;
  auto dtype = model->out_conv->weight.scalar_type();
  auto x = masked.data().unsqueeze(0).to(dtype);
  auto mm = m.data().unsqueeze(0).unsqueeze(0).to(dtype);
  auto out = model->forward(x, mm, gen, trace);
  return ImageTensor(out.image.squeeze(0).to(torch::kFloat32).contiguous());
}

at::Generator make_generator(uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

}  // namespace gmsrm
