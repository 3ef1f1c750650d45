#include "gmsrm/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "gmsrm/errors.hpp"
#include "gmsrm/imaging.hpp"
#include "gmsrm/metrics.hpp"

namespace gmsrm {

namespace F = torch::nn::functional;

namespace {

constexpr const char* kMemoryKind = "gmsrm-memory";
constexpr const char* kModelKind = "gmsrm-model";

std::vector<std::pair<std::string, torch::Tensor>> named_trainable(GMSRM& model) {
  auto trainable = model->trainable_parameters();
  std::unordered_set<const void*> keep;
  for (const auto& p : trainable) keep.insert(p.unsafeGetTensorImpl());
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (auto& item : model->named_parameters()) {
    if (keep.count(item.value().unsafeGetTensorImpl())) out.emplace_back(item.key(), item.value());
  }
  return out;
}

std::vector<std::pair<std::string, torch::Tensor>> named_all(torch::nn::Module& m) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (auto& item : m.named_parameters()) out.emplace_back(item.key(), item.value());
  return out;
}

std::vector<torch::Tensor> values(const std::vector<std::pair<std::string, torch::Tensor>>& named) {
  std::vector<torch::Tensor> out;
  for (const auto& [_, t] : named) out.push_back(t);
  return out;
}

std::unique_ptr<torch::optim::Adam> make_adam(const std::vector<torch::Tensor>& params, const TrainConfig& cfg) {
  return std::make_unique<torch::optim::Adam>(
      params, torch::optim::AdamOptions(cfg.learning_rate).betas({cfg.beta1, cfg.beta2}));
}

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void restore_rng(std::mt19937_64& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  if (!is) throw InvalidInput("checkpoint has a malformed RNG state");
}

void require_finite(int64_t step, std::initializer_list<std::pair<const char*, double>> losses) {
  for (const auto& [name, value] : losses) {
    if (!std::isfinite(value)) {
      std::ostringstream os;
      os << "non-finite loss at step " << step << ":";
      for (const auto& [n, v] : losses) os << " " << n << "=" << v;
      throw NumericalError(os.str());
    }
  }
}

std::filesystem::path numbered_checkpoint(const std::filesystem::path& dir, int64_t step) {
  std::ostringstream name;
  name << "checkpoint_" << std::setw(8) << std::setfill('0') << step << ".gmsrm";
  return dir / name.str();
}

void append_line(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream f(path, std::ios::app);
  if (!f) throw IoError("cannot append to " + path.string());
  f << j.dump() << "\n";
}

}  // namespace

// --- config ------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (resize_ratio < 1.0) throw ConfigError("resize_ratio must be >= 1");
  if (loss) loss->validate();
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j = {{"learning_rate", learning_rate}, {"beta1", beta1},
                      {"beta2", beta2},                 {"batch_size", batch_size},
                      {"steps", steps},                 {"seed", seed},
                      {"hflip", hflip},                 {"random_crop", random_crop},
                      {"resize_ratio", resize_ratio},   {"r1_gamma", r1_gamma},
                      {"checkpoint_every", checkpoint_every}};
  if (loss) {
    j["loss"] = {{"gamma", loss->gamma},           {"lambda_rec", loss->lambda_rec},
                 {"lambda_perc", loss->lambda_perc}, {"lambda_adv", loss->lambda_adv},
                 {"lambda_kl", loss->lambda_kl},   {"scale_weights", loss->scale_weights}};
  }
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  c.hflip = j.value("hflip", c.hflip);
  c.random_crop = j.value("random_crop", c.random_crop);
  c.resize_ratio = j.value("resize_ratio", c.resize_ratio);
  c.r1_gamma = j.value("r1_gamma", c.r1_gamma);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    LossWeights lw;
    lw.gamma = l.value("gamma", lw.gamma);
    lw.lambda_rec = l.value("lambda_rec", lw.lambda_rec);
    lw.lambda_perc = l.value("lambda_perc", lw.lambda_perc);
    lw.lambda_adv = l.value("lambda_adv", lw.lambda_adv);
    lw.lambda_kl = l.value("lambda_kl", lw.lambda_kl);
    lw.scale_weights = l.value("scale_weights", lw.scale_weights);
    c.loss = lw;
  }
  c.validate();
  return c;
}

nlohmann::json StepLog::to_json() const {
  return {{"step", step},   {"l_rec", l_rec},     {"l_perc", l_perc}, {"l_adv", l_adv},
          {"l_kl", l_kl},   {"l_total", l_total}, {"l_disc", l_disc}};
}

nlohmann::json PretrainLog::to_json() const {
  return {{"step", step}, {"l_gen", l_gen}, {"l_disc", l_disc}, {"l_r1", l_r1}};
}

// --- data ----------------------------------------------------------------------

ImageFolder::ImageFolder(const std::filesystem::path& dir, int64_t image_side, double resize_ratio)
    : side_(image_side) {
  if (!std::filesystem::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  const auto shorter = std::max<int64_t>(image_side, std::llround(image_side * resize_ratio));
  for (const auto& f : files) images_.push_back(load_image_resized(f, shorter));
  if (images_.empty()) throw InvalidInput("no images found in " + dir.string());
}

ImageFolder::ImageFolder(std::vector<torch::Tensor> images, int64_t image_side)
    : images_(std::move(images)), side_(image_side) {
  if (images_.empty()) throw InvalidInput("ImageFolder needs at least one image");
  for (const auto& img : images_) {
    if (img.dim() != 3 || img.size(0) != 3 || img.size(1) < side_ || img.size(2) < side_) {
      throw InvalidInput("ImageFolder images must be 3 x H x W with H, W >= image_side");
    }
  }
}

torch::Tensor ImageFolder::sample(int64_t batch, std::mt19937_64& rng, bool random_crop, bool hflip) const {
  using torch::indexing::Slice;
  std::vector<torch::Tensor> out;
  for (int64_t b = 0; b < batch; ++b) {
    const auto& img = images_[rng() % images_.size()];
    const int64_t h = img.size(1);
    const int64_t w = img.size(2);
    int64_t y0 = (h - side_) / 2;
    int64_t x0 = (w - side_) / 2;
    if (random_crop) {
      y0 = static_cast<int64_t>(rng() % static_cast<uint64_t>(h - side_ + 1));
      x0 = static_cast<int64_t>(rng() % static_cast<uint64_t>(w - side_ + 1));
    }
    auto crop = img.index({Slice(), Slice(y0, y0 + side_), Slice(x0, x0 + side_)});
    if (hflip && (rng() & 1u)) crop = crop.flip({2});
    out.push_back(crop);
  }
  return torch::stack(out).contiguous();
}

torch::Tensor ImageFolder::all_center() const {
  using torch::indexing::Slice;
  std::vector<torch::Tensor> out;
  for (const auto& img : images_) {
    const int64_t y0 = (img.size(1) - side_) / 2;
    const int64_t x0 = (img.size(2) - side_) / 2;
    out.push_back(img.index({Slice(), Slice(y0, y0 + side_), Slice(x0, x0 + side_)}));
  }
  return torch::stack(out).contiguous();
}

torch::Tensor sample_training_masks(int64_t batch, int64_t side, std::mt19937_64& rng) {
  static const double kBuckets[][2] = {{0.2, 0.3}, {0.3, 0.4}, {0.4, 0.5}, {0.5, 0.6}};
  std::vector<torch::Tensor> out;
  for (int64_t b = 0; b < batch; ++b) {
    const uint64_t draw = rng();
    Mask m;
    if (draw & 1u) {
      m = generate_center_mask(side, side, (draw & 2u) ? 0.5 : 0.25);
    } else {
      const auto& bucket = kBuckets[(draw >> 2) % 4];
      MaskSpec spec{MaskKind::kIrregular, bucket[0], bucket[1], rng()};
      m = generate_irregular_mask(side, side, spec);
    }
    out.push_back(m.data().unsqueeze(0));
  }
  return torch::stack(out);
}

// --- Adam state ------------------------------------------------------------------

void export_adam_state(torch::optim::Adam& opt, const std::vector<std::pair<std::string, torch::Tensor>>& named,
                       const std::string& prefix, std::map<std::string, torch::Tensor>& out) {
  auto& state = opt.state();
  for (const auto& [name, p] : named) {
    auto it = state.find(p.unsafeGetTensorImpl());
    if (it == state.end()) continue;
    auto& s = static_cast<torch::optim::AdamParamState&>(*it->second);
    out[prefix + name + "/exp_avg"] = s.exp_avg().detach().clone();
    out[prefix + name + "/exp_avg_sq"] = s.exp_avg_sq().detach().clone();
    out[prefix + name + "/step"] = torch::tensor({s.step()}, torch::kInt64);
  }
}

void import_adam_state(torch::optim::Adam& opt, const std::vector<std::pair<std::string, torch::Tensor>>& named,
                       const std::string& prefix, const std::map<std::string, torch::Tensor>& tensors) {
  auto& state = opt.state();
  for (const auto& [name, p] : named) {
    auto avg = tensors.find(prefix + name + "/exp_avg");
    auto sq = tensors.find(prefix + name + "/exp_avg_sq");
    auto st = tensors.find(prefix + name + "/step");
    if (avg == tensors.end() || sq == tensors.end() || st == tensors.end()) continue;
    if (avg->second.sizes() != p.sizes()) throw ConfigError("optimizer state shape mismatch for " + name);
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(st->second.item<int64_t>());
    s->exp_avg(avg->second.clone().to(p.dtype()));
    s->exp_avg_sq(sq->second.clone().to(p.dtype()));
    state[p.unsafeGetTensorImpl()] = std::move(s);
  }
}

// --- memory pre-training ----------------------------------------------------------

MemoryPretrainer::MemoryPretrainer(const ModelConfig& mcfg, const TrainConfig& tcfg)
    : mcfg_(mcfg), tcfg_(tcfg), rng_(tcfg.seed), gen_(make_generator(tcfg.seed + 1)) {
  mcfg_.validate();
  tcfg_.validate();
  build();
  auto init = make_generator(tcfg_.seed);
  init_parameters(*memory_, init);
  memory_->finish_init(init);
  disc_->initialize(tcfg_.seed + 2);
}

MemoryPretrainer::MemoryPretrainer(const Checkpoint& ckpt)
    : mcfg_(ModelConfig::from_json(ckpt.meta.at("model_config"))),
      tcfg_(TrainConfig::from_json(ckpt.meta.at("train_config"))),
      gen_(make_generator(0)) {
  if (ckpt.meta.value("kind", "") != kMemoryKind) throw ConfigError("not a memory pre-training checkpoint");
  build();
  import_module(*memory_, "memory.", ckpt.tensors);
  import_module(*disc_, "disc.", ckpt.tensors);
  import_adam_state(*opt_g_, named_all(*memory_), "opt_g/", ckpt.tensors);
  import_adam_state(*opt_d_, named_all(*disc_), "opt_d/", ckpt.tensors);
  step_ = ckpt.meta.at("step").get<int64_t>();
  restore_rng(rng_, ckpt.meta.at("rng").get<std::string>());
  gen_.set_state(ckpt.tensors.at("rng/torch"));
}

void MemoryPretrainer::build() {
  memory_ = GenerativeMemory(mcfg_);
  disc_ = Discriminator(3, mcfg_.base_channels);
  opt_g_ = make_adam(memory_->parameters(), tcfg_);
  opt_d_ = make_adam(disc_->parameters(), tcfg_);
}

PretrainLog MemoryPretrainer::step(const torch::Tensor& real) {
  const int64_t batch = real.size(0);
  memory_->train();
  disc_->train();

  auto z = torch::randn({batch, mcfg_.d_c}, gen_);
  auto fake = memory_->synthesize(z, gen_);

  // Generator: non-saturating loss.
  auto l_gen = F::softplus(-disc_->forward(fake)).mean();
  opt_g_->zero_grad();
  l_gen.backward();
  opt_g_->step();

  // Discriminator, optionally with the R1 penalty on real images.
  auto real_in = real.detach();
  if (tcfg_.r1_gamma > 0) real_in.requires_grad_(true);
  auto d_real = disc_->forward(real_in);
  auto l_disc = F::softplus(-d_real).mean() + F::softplus(disc_->forward(fake.detach())).mean();
  torch::Tensor l_r1 = torch::zeros({});
  if (tcfg_.r1_gamma > 0) {
    auto grad = torch::autograd::grad({d_real.sum()}, {real_in}, {}, /*retain_graph=*/true, /*create_graph=*/true)[0];
    l_r1 = 0.5 * tcfg_.r1_gamma * grad.pow(2).sum({1, 2, 3}).mean();
  }
  opt_d_->zero_grad();
  (l_disc + l_r1).backward();
  opt_d_->step();

  ++step_;
  PretrainLog log{step_, l_gen.item<double>(), l_disc.item<double>(), l_r1.item<double>()};
  require_finite(step_, {{"l_gen", log.l_gen}, {"l_disc", log.l_disc}, {"l_r1", log.l_r1}});
  return log;
}

PretrainLog MemoryPretrainer::step(const ImageFolder& data) {
  return step(data.sample(tcfg_.batch_size, rng_, tcfg_.random_crop, tcfg_.hflip));
}

torch::Tensor MemoryPretrainer::generate(int64_t n, uint64_t seed) {
  torch::NoGradGuard no_grad;
  auto gen = make_generator(seed);
  auto z = torch::randn({n, mcfg_.d_c}, gen);
  return memory_->synthesize(z, gen);
}

Checkpoint MemoryPretrainer::checkpoint() const {
  Checkpoint ckpt;
  auto memory = memory_;
  auto disc = disc_;
  memory->mark_trained(true);
  export_module(*memory, "memory.", ckpt.tensors);
  export_module(*disc, "disc.", ckpt.tensors);
  export_adam_state(*opt_g_, named_all(*memory), "opt_g/", ckpt.tensors);
  export_adam_state(*opt_d_, named_all(*disc), "opt_d/", ckpt.tensors);
  ckpt.tensors["rng/torch"] = gen_.get_state();
  ckpt.meta = {{"kind", kMemoryKind},
               {"model_config", mcfg_.to_json()},
               {"train_config", tcfg_.to_json()},
               {"step", step_},
               {"seed", tcfg_.seed},
               {"rng", rng_state(rng_)}};
  return ckpt;
}

// --- inpainting training ---------------------------------------------------------------

InpaintingTrainer::InpaintingTrainer(const ModelConfig& mcfg, const TrainConfig& tcfg,
                                     const std::optional<Checkpoint>& memory)
    : mcfg_(mcfg),
      tcfg_(tcfg),
      extractor_(ConvStackExtractor::default_stack()),
      rng_(tcfg.seed),
      gen_(make_generator(tcfg.seed + 1)) {
  mcfg_.validate();
  tcfg_.validate();
  if (uses_memory(mcfg_.variant) && !memory && !mcfg_.allow_untrained_memory) {
    throw ConfigError("variant " + to_string(mcfg_.variant) + " needs a pre-trained memory checkpoint");
  }
  if (memory && memory->meta.value("kind", "") != kMemoryKind) {
    throw ConfigError("memory checkpoint has the wrong kind");
  }
  model_ = build_variant(mcfg_);
  model_->initialize(tcfg_.seed);
  if (memory && model_->memory) {
    const auto mem_cfg = ModelConfig::from_json(memory->meta.at("model_config"));
    if (mem_cfg.image_side != mcfg_.image_side || mem_cfg.n_scales != mcfg_.n_scales ||
        mem_cfg.base_channels != mcfg_.base_channels || mem_cfg.max_channels != mcfg_.max_channels ||
        mem_cfg.d_c != mcfg_.d_c) {
      throw ConfigError("memory checkpoint was trained for a different model configuration");
    }
    import_module(*model_->memory, "memory.", memory->tensors);
  }
  build();
  disc_->initialize(tcfg_.seed + 2);
}

InpaintingTrainer::InpaintingTrainer(const Checkpoint& ckpt)
    : mcfg_(ModelConfig::from_json(ckpt.meta.at("model_config"))),
      tcfg_(TrainConfig::from_json(ckpt.meta.at("train_config"))),
      extractor_(ConvStackExtractor::default_stack()),
      gen_(make_generator(0)) {
  if (ckpt.meta.value("kind", "") != kModelKind) throw ConfigError("not an inpainting checkpoint");
  model_ = build_variant(mcfg_);
  import_module(*model_, "model.", ckpt.tensors);
  build();
  import_module(*disc_, "disc.", ckpt.tensors);
  import_adam_state(*opt_g_, named_trainable(model_), "opt_g/", ckpt.tensors);
  import_adam_state(*opt_d_, named_all(*disc_), "opt_d/", ckpt.tensors);
  step_ = ckpt.meta.at("step").get<int64_t>();
  restore_rng(rng_, ckpt.meta.at("rng").get<std::string>());
  gen_.set_state(ckpt.tensors.at("rng/torch"));
}

void InpaintingTrainer::build() {
  lw_ = tcfg_.loss.value_or(LossWeights::defaults(mcfg_.n_scales));
  if (lw_.scale_weights.size() != static_cast<size_t>(mcfg_.levels())) {
    throw ConfigError("KL scale weights must have n_scales - 1 entries");
  }
  model_->freeze_memory();
  disc_ = Discriminator(3, mcfg_.base_channels);
  opt_g_ = make_adam(values(named_trainable(model_)), tcfg_);
  opt_d_ = make_adam(disc_->parameters(), tcfg_);
}

StepLog InpaintingTrainer::step(const torch::Tensor& images, const torch::Tensor& masks) {
  model_->train();
  disc_->train();
  auto masked = apply_mask(images, masks);
  auto out = model_->forward(masked, masks, gen_);

  LossParts parts;
  parts.rec = reconstruction_loss(out.image, images, masks, lw_.gamma);
  parts.perc = perceptual_loss(out.image, images, extractor_);
  parts.adv = adversarial_generator_loss(disc_, out.image);
  parts.kl = out.noise_params.empty() ? torch::zeros({}) : kl_loss(out.noise_params, lw_.scale_weights);
  auto total = total_loss(parts, lw_);

  opt_g_->zero_grad();
  total.backward();
  last_memory_grad_ = max_memory_grad();
  if (last_memory_grad_ != 0.0) throw ConfigError("frozen memory received a gradient");
  opt_g_->step();

  auto l_disc = discriminator_loss(disc_, out.image, images);
  opt_d_->zero_grad();
  l_disc.backward();
  opt_d_->step();

  ++step_;
  StepLog log;
  log.step = step_;
  log.l_rec = parts.rec.item<double>();
  log.l_perc = parts.perc.item<double>();
  log.l_adv = parts.adv.item<double>();
  log.l_kl = parts.kl.item<double>();
  log.l_total = total.item<double>();
  log.l_disc = l_disc.item<double>();
  require_finite(step_, {{"l_rec", log.l_rec},
                         {"l_perc", log.l_perc},
                         {"l_adv", log.l_adv},
                         {"l_kl", log.l_kl},
                         {"l_total", log.l_total},
                         {"l_disc", log.l_disc}});
  return log;
}

StepLog InpaintingTrainer::step(const ImageFolder& data) {
  auto images = data.sample(tcfg_.batch_size, rng_, tcfg_.random_crop, tcfg_.hflip);
  auto masks = sample_training_masks(tcfg_.batch_size, mcfg_.image_side, rng_);
  return step(images, masks);
}

double InpaintingTrainer::max_memory_grad() const {
  if (!model_->memory) return 0.0;
  double m = 0.0;
  for (const auto& p : model_->memory->parameters()) {
    if (p.grad().defined()) m = std::max(m, p.grad().abs().max().item<double>());
  }
  return m;
}

Checkpoint InpaintingTrainer::checkpoint() const {
  Checkpoint ckpt;
  auto model = model_;
  auto disc = disc_;
  export_module(*model, "model.", ckpt.tensors);
  export_module(*disc, "disc.", ckpt.tensors);
  export_adam_state(*opt_g_, named_trainable(model), "opt_g/", ckpt.tensors);
  export_adam_state(*opt_d_, named_all(*disc), "opt_d/", ckpt.tensors);
  ckpt.tensors["rng/torch"] = gen_.get_state();
  ckpt.meta = {{"kind", kModelKind},
               {"model_config", mcfg_.to_json()},
               {"train_config", tcfg_.to_json()},
               {"step", step_},
               {"seed", tcfg_.seed},
               {"rng", rng_state(rng_)}};
  return ckpt;
}

// --- drivers ----------------------------------------------------------------------------

Checkpoint pretrain_memory(const ImageFolder& data, const ModelConfig& mcfg, const TrainConfig& tcfg,
                           const std::optional<std::filesystem::path>& run_dir, const PretrainCallback& on_step) {
  if (data.size() < 2) throw InvalidInput("memory pre-training needs at least 2 images");
  if (data.image_side() != mcfg.image_side) throw ConfigError("dataset side does not match image_side");
  MemoryPretrainer trainer(mcfg, tcfg);
  if (run_dir) std::filesystem::create_directories(*run_dir);
  for (int64_t s = 0; s < tcfg.steps; ++s) {
    auto log = trainer.step(data);
    if (run_dir) append_line(*run_dir / "train_log.jsonl", log.to_json());
    if (on_step) on_step(log);
    if (run_dir && tcfg.checkpoint_every > 0 && log.step % tcfg.checkpoint_every == 0 && log.step < tcfg.steps) {
      save_checkpoint(trainer.checkpoint(), numbered_checkpoint(*run_dir, log.step));
    }
  }
  auto ckpt = trainer.checkpoint();
  if (run_dir) save_checkpoint(ckpt, numbered_checkpoint(*run_dir, trainer.steps_done()));
  return ckpt;
}

Checkpoint train_inpainting(const ImageFolder& data, const std::optional<Checkpoint>& memory,
                            const ModelConfig& mcfg, const TrainConfig& tcfg,
                            const std::optional<std::filesystem::path>& run_dir, const TrainCallback& on_step) {
  if (data.image_side() != mcfg.image_side) throw ConfigError("dataset side does not match image_side");
  InpaintingTrainer trainer(mcfg, tcfg, memory);
  if (run_dir) std::filesystem::create_directories(*run_dir);
  for (int64_t s = 0; s < tcfg.steps; ++s) {
    auto log = trainer.step(data);
    if (run_dir) append_line(*run_dir / "train_log.jsonl", log.to_json());
    if (on_step) on_step(log);
    if (run_dir && tcfg.checkpoint_every > 0 && log.step % tcfg.checkpoint_every == 0 && log.step < tcfg.steps) {
      save_checkpoint(trainer.checkpoint(), numbered_checkpoint(*run_dir, log.step));
    }
  }
  auto ckpt = trainer.checkpoint();
  if (run_dir) save_checkpoint(ckpt, numbered_checkpoint(*run_dir, trainer.steps_done()));
  return ckpt;
}

GMSRM build_variant(const ModelConfig& cfg) {
  cfg.validate();
  return GMSRM(cfg);
}

GMSRM load_model(const Checkpoint& ckpt) {
  if (ckpt.meta.value("kind", "") != kModelKind) throw ConfigError("not an inpainting checkpoint");
  auto cfg = ModelConfig::from_json(ckpt.meta.at("model_config"));
  auto model = build_variant(cfg);
  import_module(*model, "model.", ckpt.tensors);
  model->eval();
  return model;
}

double evaluate_hole_psnr(GMSRM& model, const torch::Tensor& images, const torch::Tensor& masks, uint64_t seed) {
  torch::NoGradGuard no_grad;
  auto gen = make_generator(seed);
  auto out = model->forward(apply_mask(images, masks), masks, gen).image;
  double total = 0.0;
  for (int64_t i = 0; i < images.size(0); ++i) {
    auto pred = (out[i] + 1.0) * 0.5;
    auto gt = (images[i] + 1.0) * 0.5;
    total += psnr(pred, gt, masks[i][0] == 0);
  }
  return total / static_cast<double>(images.size(0));
}

}  // namespace gmsrm
