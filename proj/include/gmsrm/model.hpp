#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "gmsrm/blocks.hpp"
#include "gmsrm/imaging.hpp"

namespace gmsrm {

// Ablation ladder: each variant adds one mechanism to the previous one.
enum class Variant {
  kBase,   // encoder + decoder only
  kGmBm,   // + generative memory, standard-normal noise, fixed query c1
  kGmCsv,  // + conditional stochastic variation
  kGmSrm,  // + progressive embedding updates
};

Variant parse_variant(const std::string& name);
std::string to_string(Variant v);
bool uses_memory(Variant v);
bool uses_conditional_noise(Variant v);
bool uses_progressive_updates(Variant v);

// Pyramid levels are indexed k = 0 .. n_scales-2 from finest to coarsest;
// level k has side image_side / 2^(k+1).
struct ModelConfig {
  int64_t n_scales = 4;
  int64_t base_channels = 32;
  int64_t max_channels = 256;
  int64_t d_c = 512;
  int64_t image_side = 64;
  int64_t reduction = 4;
  int64_t mapping_layers = 4;
  Variant variant = Variant::kGmSrm;
  // Lets unit tests run memory variants before any pre-training.
  bool allow_untrained_memory = false;

  void validate() const;
  int64_t levels() const { return n_scales - 1; }
  int64_t level_side(int64_t k) const { return image_side >> (k + 1); }
  int64_t encoder_width(int64_t k) const;
  // Output width of the decoder block that produces level k-1 (k = 0: full res).
  int64_t decoder_width(int64_t k) const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Per-sample scalar noise distribution of one scale; tensors are [B].
struct ScaleNoiseParams {
  Tensor mu;
  Tensor sigma;
};

// sigma = softplus(raw) + 1e-6.
ScaleNoiseParams noise_params_from_raw(const Tensor& raw_mu, const Tensor& raw_sigma);

struct EncoderOutput {
  std::vector<Tensor> pyramid;               // n_scales-1 levels, finest first
  std::vector<ScaleNoiseParams> noise_heads;  // one per level, empty without CSV
};

class EncoderImpl : public torch::nn::Module {
 public:
  EncoderImpl(const ModelConfig& cfg, bool with_noise_heads);
  // input: Concat[masked image, mask], [B, 4, S, S].
  EncoderOutput forward(const Tensor& input);

  torch::nn::ModuleList blocks{nullptr};
  torch::nn::ModuleList heads{nullptr};
};
TORCH_MODULE(Encoder);

// f_c: conv + global pooling + fully connected layer, features -> [B, d_c].
class LatentMapperImpl : public torch::nn::Module {
 public:
  LatentMapperImpl(int64_t in_channels, int64_t d_c);
  Tensor forward(const Tensor& features);

  torch::nn::Conv2d conv{nullptr};
  torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(LatentMapper);

// (mu, sigma) = FC(Conv(conditioning features)).
class ConditionalNoiseHeadImpl : public torch::nn::Module {
 public:
  explicit ConditionalNoiseHeadImpl(int64_t in_channels);
  ScaleNoiseParams forward(const Tensor& conditioning);

  torch::nn::Conv2d conv{nullptr};
  torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(ConditionalNoiseHead);

// Draws a [B, 1, H, W] noise map mu + sigma * eps with eps ~ N(0, 1).
Tensor sample_noise(const ScaleNoiseParams& params, int64_t height, int64_t width, at::Generator& gen);

struct ConditionalNoise {
  Tensor noise;
  ScaleNoiseParams params;
};

// Conditions on Concat[f_e, f_d_prev], or on f_e alone when f_d_prev is absent.
ConditionalNoise sample_conditional_noise(ConditionalNoiseHead& head, const Tensor& f_e,
                                          const std::optional<Tensor>& f_d_prev, at::Generator& gen);

// One synthesis layer of the generative memory.
class MemoryBlockImpl : public torch::nn::Module {
 public:
  MemoryBlockImpl(int64_t prev_channels, int64_t encoded_channels, int64_t out_channels, int64_t d_c);
  // prev: previous memory features already at this block's resolution.
  Tensor forward(const Tensor& prev, const Tensor& encoded, const Tensor& c, const Tensor& noise);
  Tensor to_rgb(const Tensor& features, const Tensor& c);

  torch::nn::Linear affine{nullptr};
  ModulatedConv2d conv{nullptr};
  Tensor noise_strength;
  torch::nn::Linear rgb_affine{nullptr};
  ModulatedConv2d rgb{nullptr};
};
TORCH_MODULE(MemoryBlock);

// StyleGAN2-style generator over the pyramid levels, coarse to fine. Queried
// with a W-space embedding c; during pre-training c comes from its own
// mapping network and the encoded inputs are zero maps.
class GenerativeMemoryImpl : public torch::nn::Module {
 public:
  explicit GenerativeMemoryImpl(const ModelConfig& cfg);

  // Memory features at level k. `prev` is the level k+1 output, or undefined
  // at the coarsest level (the learned constant is used).
  Tensor query(int64_t level, const Tensor& c, const Tensor& encoded, const Tensor& prev,
               const Tensor& noise);

  // z [B, d_c] -> image [B, 3, S, S] in [-1, 1].
  Tensor synthesize(const Tensor& z, at::Generator& gen);
  Tensor map_latent(const Tensor& z);

  bool is_trained() const;
  void mark_trained(bool trained);

  // Applies the memory-specific init conventions on top of init_parameters.
  void finish_init(at::Generator& gen);

  torch::nn::Sequential mapping{nullptr};
  Tensor constant;
  Tensor trained;
  torch::nn::ModuleList blocks{nullptr};  // indexed by level

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(GenerativeMemory);

// Instrumentation counters for one forward pass.
struct InferenceTrace {
  int memory_queries = 0;
  int embedding_updates = 0;
};

struct ForwardOutput {
  Tensor image;                              // [B, 3, S, S], tanh range
  std::vector<ScaleNoiseParams> noise_params;  // distributions actually sampled, coarse first
};

class GMSRMImpl : public torch::nn::Module {
 public:
  explicit GMSRMImpl(const ModelConfig& cfg);

  // masked: images already multiplied by masks, [B, 3, S, S]; masks [B, 1, S, S].
  ForwardOutput forward(const Tensor& masked, const Tensor& masks, at::Generator& gen,
                        InferenceTrace* trace = nullptr);

  EncoderOutput encode(const Tensor& masked, const Tensor& masks);
  // c^i = f_c(F_D^{i-1}) + c^{i-1} with the level-k mapper.
  Tensor update_embedding(int64_t level, const Tensor& c_prev, const Tensor& f_d_prev);

  const ModelConfig& config() const { return cfg_; }

  // Deterministic re-initialization of all parameters and buffers from seed.
  void initialize(uint64_t seed);

  void freeze_memory();
  // Parameters outside the frozen memory.
  std::vector<Tensor> trainable_parameters();

  Encoder encoder{nullptr};
  LatentMapper initial_mapper{nullptr};
  torch::nn::ModuleList update_mappers{nullptr};  // level k, gm-srm only
  torch::nn::ModuleList noise_heads{nullptr};     // level k < levels-1, CSV only
  torch::nn::ModuleList adapters{nullptr};        // conv(F_E^k) feeding memory block k
  GenerativeMemory memory{nullptr};
  torch::nn::ModuleList decoder{nullptr};  // level k: produces level k-1
  torch::nn::Conv2d out_conv{nullptr};

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(GMSRM);

// Algorithm 1 on a single image: mask the input, run the network, return the
// raw tanh output.
ImageTensor infer(GMSRM& model, const ImageTensor& img, const Mask& m, at::Generator& gen,
                  InferenceTrace* trace = nullptr);

at::Generator make_generator(uint64_t seed);

}  // namespace gmsrm
