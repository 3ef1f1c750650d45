#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "gmsrm/checkpoint.hpp"
#include "gmsrm/losses.hpp"
#include "gmsrm/model.hpp"

namespace gmsrm {

struct TrainConfig {
  double learning_rate = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  int64_t batch_size = 4;
  int64_t steps = 2000;
  uint64_t seed = 0;
  bool hflip = true;
  bool random_crop = true;
  double resize_ratio = 1.25;
  double r1_gamma = 0.0;          // memory pre-training only
  int64_t checkpoint_every = 0;   // 0: final checkpoint only
  std::optional<LossWeights> loss;  // defaults from the model config when unset

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// In-memory image folder. Images are resized once so that the shorter side is
// round(image_side * resize_ratio); batches are random crops of that.
class ImageFolder {
 public:
  ImageFolder(const std::filesystem::path& dir, int64_t image_side, double resize_ratio);
  explicit ImageFolder(std::vector<torch::Tensor> images, int64_t image_side);

  size_t size() const { return images_.size(); }
  int64_t image_side() const { return side_; }

  // [B, 3, S, S]
  torch::Tensor sample(int64_t batch, std::mt19937_64& rng, bool random_crop, bool hflip) const;
  // Center crops of every image, [N, 3, S, S].
  torch::Tensor all_center() const;

 private:
  std::vector<torch::Tensor> images_;
  int64_t side_;
};

// Random training masks: half center (25% / 50%), half irregular in one of
// the (0.2,0.3] .. (0.5,0.6] buckets. Returns [B, 1, S, S].
torch::Tensor sample_training_masks(int64_t batch, int64_t side, std::mt19937_64& rng);

struct StepLog {
  int64_t step = 0;
  double l_rec = 0, l_perc = 0, l_adv = 0, l_kl = 0, l_total = 0, l_disc = 0;
  nlohmann::json to_json() const;
};

struct PretrainLog {
  int64_t step = 0;
  double l_gen = 0, l_disc = 0, l_r1 = 0;
  nlohmann::json to_json() const;
};

// Adam moments keyed by "<prefix><param name>/{exp_avg,exp_avg_sq,step}".
void export_adam_state(torch::optim::Adam& opt, const std::vector<std::pair<std::string, torch::Tensor>>& named,
                       const std::string& prefix, std::map<std::string, torch::Tensor>& out);
void import_adam_state(torch::optim::Adam& opt, const std::vector<std::pair<std::string, torch::Tensor>>& named,
                       const std::string& prefix, const std::map<std::string, torch::Tensor>& tensors);

// Step one: the memory trained as an unconditional generator (mapping network
// -> memory -> RGB) against a spectral-normalized discriminator with the
// non-saturating GAN loss.
class MemoryPretrainer {
 public:
  MemoryPretrainer(const ModelConfig& mcfg, const TrainConfig& tcfg);
  explicit MemoryPretrainer(const Checkpoint& ckpt);

  PretrainLog step(const torch::Tensor& real);
  PretrainLog step(const ImageFolder& data);

  // Samples from random latents, [n, 3, S, S].
  torch::Tensor generate(int64_t n, uint64_t seed);
  Checkpoint checkpoint() const;

  GenerativeMemory& memory() { return memory_; }
  Discriminator& discriminator() { return disc_; }
  int64_t steps_done() const { return step_; }

 private:
  void build();

  ModelConfig mcfg_;
  TrainConfig tcfg_;
  GenerativeMemory memory_{nullptr};
  Discriminator disc_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g_;
  std::unique_ptr<torch::optim::Adam> opt_d_;
  std::mt19937_64 rng_;
  at::Generator gen_;
  int64_t step_ = 0;
};

// Step two: the full model on total_loss with the memory frozen, alternating
// with one discriminator step.
class InpaintingTrainer {
 public:
  // `memory` must be a pre-training checkpoint unless the variant is base.
  InpaintingTrainer(const ModelConfig& mcfg, const TrainConfig& tcfg, const std::optional<Checkpoint>& memory);
  explicit InpaintingTrainer(const Checkpoint& ckpt);

  StepLog step(const torch::Tensor& images, const torch::Tensor& masks);
  StepLog step(const ImageFolder& data);

  // Largest |dL/dtheta| over memory parameters after the last step (0 when
  // they carry no gradient).
  double max_memory_grad() const;

  Checkpoint checkpoint() const;

  GMSRM& model() { return model_; }
  Discriminator& discriminator() { return disc_; }
  const LossWeights& loss_weights() const { return lw_; }
  int64_t steps_done() const { return step_; }

 private:
  void build();

  ModelConfig mcfg_;
  TrainConfig tcfg_;
  LossWeights lw_;
  GMSRM model_{nullptr};
  Discriminator disc_{nullptr};
  ConvStackExtractor extractor_;
  std::unique_ptr<torch::optim::Adam> opt_g_;
  std::unique_ptr<torch::optim::Adam> opt_d_;
  std::mt19937_64 rng_;
  at::Generator gen_;
  int64_t step_ = 0;
  double last_memory_grad_ = 0.0;
};

using PretrainCallback = std::function<void(const PretrainLog&)>;
using TrainCallback = std::function<void(const StepLog&)>;

// Runs tcfg.steps pre-training steps; with a run directory, writes
// train_log.jsonl and numbered checkpoints there.
Checkpoint pretrain_memory(const ImageFolder& data, const ModelConfig& mcfg, const TrainConfig& tcfg,
                           const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                           const PretrainCallback& on_step = {});

Checkpoint train_inpainting(const ImageFolder& data, const std::optional<Checkpoint>& memory,
                            const ModelConfig& mcfg, const TrainConfig& tcfg,
                            const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                            const TrainCallback& on_step = {});

// Constructs the requested ablation variant.
GMSRM build_variant(const ModelConfig& cfg);

// Rebuilds an inference model from an inpainting checkpoint.
GMSRM load_model(const Checkpoint& ckpt);

// Mean PSNR over hole pixels ([0,1] scale) of raw model outputs.
double evaluate_hole_psnr(GMSRM& model, const torch::Tensor& images, const torch::Tensor& masks, uint64_t seed);

}  // namespace gmsrm
