#include "gmsrm/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <memory>
#include <ostream>
#include <sstream>

#include "gmsrm/checkpoint.hpp"
#include "gmsrm/errors.hpp"
#include "gmsrm/imaging.hpp"
#include "gmsrm/metrics.hpp"
#include "gmsrm/model.hpp"
#include "gmsrm/training.hpp"

namespace gmsrm {

namespace {

using nlohmann::json;

// Raised while resolving arguments; maps to the usage exit code.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Collects typed flags and, after parsing, writes the ones given on the
// command line over the JSON config.
class FlagBag {
 public:
  explicit FlagBag(CLI::App* app) : app_(app) {}

  template <typename T>
  CLI::Option* add(const std::string& name, const std::string& help) {
    auto value = std::make_shared<T>();
    auto* opt = app_->add_option("--" + name, *value, help);
    apply_.push_back([value, opt, name](json& j) {
      if (opt->count() > 0) j[name] = *value;
    });
    return opt;
  }

  void overlay(json& j) const {
    for (const auto& f : apply_) f(j);
  }

 private:
  CLI::App* app_;
  std::vector<std::function<void(json&)>> apply_;
};

struct Command {
  CLI::App* app = nullptr;
  std::unique_ptr<FlagBag> flags;
  std::string config_path;
};

json read_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open config file " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw UsageError("config file " + path.string() + ": " + e.what());
  }
}

json resolve_args(const Command& cmd) {
  json j = json::object();
  if (!cmd.config_path.empty()) {
    j = read_json(cmd.config_path);
    if (!j.is_object()) throw UsageError("config file must hold a JSON object");
  }
  cmd.flags->overlay(j);
  return j;
}

template <typename T>
T required(const json& j, const std::string& key) {
  if (!j.contains(key)) throw UsageError("missing required argument --" + key);
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError("argument --" + key + " has the wrong type");
  }
}

template <typename T>
T optional_arg(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError("argument --" + key + " has the wrong type");
  }
}

void write_resolved(const json& resolved, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << resolved.dump(2) << "\n";
}

std::filesystem::path sibling_resolved(const std::filesystem::path& file) {
  return std::filesystem::path(file.string() + ".resolved.json");
}

void merge_object(json& base, const json& overlay) {
  for (const auto& [k, v] : overlay.items()) base[k] = v;
}

// Folds shortcut flags into the nested model/train sections.
ModelConfig resolve_model(json& args, const json& base) {
  json m = base;
  if (args.contains("model")) merge_object(m, args.at("model"));
  if (args.contains("size")) m["image_side"] = args.at("size");
  if (args.contains("variant")) m["variant"] = args.at("variant");
  ModelConfig cfg = ModelConfig::from_json(m);
  cfg.validate();
  args["model"] = cfg.to_json();
  args["size"] = cfg.image_side;
  return cfg;
}

TrainConfig resolve_train(json& args) {
  json t = args.value("train", json::object());
  if (args.contains("steps")) t["steps"] = args.at("steps");
  if (args.contains("seed")) t["seed"] = args.at("seed");
  TrainConfig cfg = TrainConfig::from_json(t);
  args["train"] = cfg.to_json();
  args["steps"] = cfg.steps;
  args["seed"] = cfg.seed;
  return cfg;
}

// --- subcommands -------------------------------------------------------------------

std::function<int()> prepare_pretrain(json args, std::ostream& out) {
  const auto data = required<std::string>(args, "data");
  const auto run_dir = std::filesystem::path(required<std::string>(args, "out"));
  auto mcfg = resolve_model(args, json::object());
  auto tcfg = resolve_train(args);
  args["command"] = "pretrain-memory";
  return [=, &out]() {
    write_resolved(args, run_dir / "config.resolved.json");
    ImageFolder folder(data, mcfg.image_side, tcfg.resize_ratio);
    auto ckpt = pretrain_memory(folder, mcfg, tcfg, run_dir, [&](const PretrainLog& log) {
      if (log.step % 100 == 0 || log.step == tcfg.steps) out << log.to_json().dump() << "\n";
    });
    save_checkpoint(ckpt, run_dir / "memory.gmsrm");
    out << "memory checkpoint: " << (run_dir / "memory.gmsrm").string() << "\n";
    return kExitOk;
  };
}

std::function<int()> prepare_train(json args, std::ostream& out) {
  const auto data = required<std::string>(args, "data");
  const auto run_dir = std::filesystem::path(required<std::string>(args, "out"));
  if (!args.contains("variant")) throw UsageError("missing required argument --variant");
  std::optional<Checkpoint> memory;
  json base = json::object();
  if (args.contains("memory")) {
    memory = load_checkpoint(required<std::string>(args, "memory"));
    base = memory->meta.value("model_config", json::object());
  }
  auto mcfg = resolve_model(args, base);
  auto tcfg = resolve_train(args);
  if (uses_memory(mcfg.variant) && !memory) {
    throw UsageError("variant " + to_string(mcfg.variant) + " needs --memory");
  }
  args["command"] = "train";
  return [=, &out]() {
    write_resolved(args, run_dir / "config.resolved.json");
    ImageFolder folder(data, mcfg.image_side, tcfg.resize_ratio);
    auto ckpt = train_inpainting(folder, memory, mcfg, tcfg, run_dir, [&](const StepLog& log) {
      if (log.step % 100 == 0 || log.step == tcfg.steps) out << log.to_json().dump() << "\n";
    });
    save_checkpoint(ckpt, run_dir / "model.gmsrm");
    out << "model checkpoint: " << (run_dir / "model.gmsrm").string() << "\n";
    return kExitOk;
  };
}

std::function<int()> prepare_infer(json args, std::ostream& out) {
  const auto ckpt_path = required<std::string>(args, "ckpt");
  const auto image_path = required<std::string>(args, "image");
  const auto mask_path = required<std::string>(args, "mask");
  const auto out_path = std::filesystem::path(required<std::string>(args, "out"));
  const auto mode = optional_arg<std::string>(args, "composite", "on");
  if (mode != "on" && mode != "off") throw UsageError("--composite must be on or off");
  const auto seed = optional_arg<uint64_t>(args, "seed", 0);
  args["composite"] = mode;
  args["seed"] = seed;
  args["command"] = "infer";
  return [=, &out]() {
    write_resolved(args, sibling_resolved(out_path));
    auto model = load_model(load_checkpoint(ckpt_path));
    const int64_t side = model->config().image_side;
    auto img = load_image(image_path, side);
    auto mask = load_mask(mask_path);
    if (mask.height() != side || mask.width() != side) {
      throw InvalidInput("mask must be " + std::to_string(side) + "x" + std::to_string(side));
    }
    auto gen = make_generator(seed);
    auto pred = infer(model, img, mask, gen);
    if (mode == "on") pred = composite(pred, img, mask);
    if (out_path.has_parent_path()) std::filesystem::create_directories(out_path.parent_path());
    save_image(pred, out_path);
    out << "wrote " << out_path.string() << "\n";
    return kExitOk;
  };
}

std::function<int()> prepare_make_masks(json args, std::ostream& out) {
  const auto kind = parse_mask_kind(required<std::string>(args, "kind"));
  const auto lo = required<double>(args, "ratio-lo");
  const auto hi = required<double>(args, "ratio-hi");
  const auto count = required<int64_t>(args, "count");
  const auto side = required<int64_t>(args, "size");
  const auto dir = std::filesystem::path(required<std::string>(args, "out"));
  const auto seed = optional_arg<uint64_t>(args, "seed", 0);
  if (count < 1) throw UsageError("--count must be >= 1");
  if (side < 8) throw UsageError("--size must be >= 8");
  if (lo > hi) throw UsageError("--ratio-lo must not exceed --ratio-hi");
  args["seed"] = seed;
  args["command"] = "make-masks";
  return [=, &out]() {
    write_resolved(args, dir / "config.resolved.json");
    for (int64_t i = 0; i < count; ++i) {
      MaskSpec spec{kind, lo, hi, seed + static_cast<uint64_t>(i)};
      auto m = generate_mask(side, side, spec);
      std::ostringstream name;
      name << "mask_" << std::setw(5) << std::setfill('0') << i << ".png";
      save_mask(m, dir / name.str());
    }
    out << "wrote " << count << " masks to " << dir.string() << "\n";
    return kExitOk;
  };
}

std::function<int()> prepare_eval(json args, std::ostream& out) {
  const auto pred = required<std::string>(args, "pred");
  const auto gt = required<std::string>(args, "gt");
  const auto masks = required<std::string>(args, "masks");
  const auto report = std::filesystem::path(required<std::string>(args, "report"));
  const auto region = optional_arg<std::string>(args, "region", "full");
  if (region != "full" && region != "hole") throw UsageError("--region must be full or hole");
  EvalOptions opts;
  opts.region = region == "hole" ? EvalRegion::kHole : EvalRegion::kFull;
  opts.ncc_mean_removed = optional_arg<bool>(args, "ncc-mean-removed", false);
  args["region"] = region;
  args["ncc-mean-removed"] = opts.ncc_mean_removed;
  args["command"] = "eval";
  return [=, &out]() {
    write_resolved(args, sibling_resolved(report));
    auto result = evaluate_dirs(pred, gt, masks, opts);
    if (report.extension() == ".csv") {
      write_report_csv(result, report);
    } else {
      write_report_json(result, report);
    }
    out << "psnr " << result.mean.psnr << " ssim " << result.mean.ssim << " ncc " << result.mean.ncc << " lmse "
        << result.mean.lmse << " over " << result.n_images << " images\n";
    return kExitOk;
  };
}

Command add_command(CLI::App& app, const std::string& name, const std::string& help) {
  Command c;
  c.app = app.add_subcommand(name, help);
  c.flags = std::make_unique<FlagBag>(c.app);
  c.app->add_option("--config", c.config_path, "JSON file with default arguments (flags override it)");
  return c;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Inpainting with a generative memory: training, inference, masks and evaluation", "gmsrm"};
  app.require_subcommand(1);

  auto pretrain = add_command(app, "pretrain-memory", "Pre-train the generative memory as a GAN");
  pretrain.flags->add<std::string>("data", "directory of training images");
  pretrain.flags->add<std::string>("out", "run directory");
  pretrain.flags->add<int64_t>("size", "image side");
  pretrain.flags->add<int64_t>("steps", "optimizer steps");
  pretrain.flags->add<uint64_t>("seed", "random seed");

  auto train = add_command(app, "train", "Train an inpainting model");
  train.flags->add<std::string>("data", "directory of training images");
  train.flags->add<std::string>("memory", "pre-trained memory checkpoint");
  train.flags->add<std::string>("variant", "model variant")->check(CLI::IsMember({"base", "gm-bm", "gm-csv", "gm-srm"}));
  train.flags->add<std::string>("out", "run directory");
  train.flags->add<int64_t>("steps", "optimizer steps");
  train.flags->add<int64_t>("size", "image side");
  train.flags->add<uint64_t>("seed", "random seed");

  auto inf = add_command(app, "infer", "Inpaint one image");
  inf.flags->add<std::string>("ckpt", "inpainting checkpoint");
  inf.flags->add<std::string>("image", "input image");
  inf.flags->add<std::string>("mask", "mask PNG (white = known)");
  inf.flags->add<std::string>("out", "output PNG");
  inf.flags->add<std::string>("composite", "paste known pixels back")->check(CLI::IsMember({"on", "off"}));
  inf.flags->add<uint64_t>("seed", "noise seed");

  auto masks = add_command(app, "make-masks", "Generate mask PNGs");
  masks.flags->add<std::string>("kind", "mask kind")->check(CLI::IsMember({"center", "irregular"}));
  masks.flags->add<double>("ratio-lo", "lower hole ratio (exclusive for irregular)");
  masks.flags->add<double>("ratio-hi", "upper hole ratio");
  masks.flags->add<int64_t>("count", "number of masks");
  masks.flags->add<int64_t>("size", "mask side");
  masks.flags->add<std::string>("out", "output directory");
  masks.flags->add<uint64_t>("seed", "seed of the first mask");

  auto ev = add_command(app, "eval", "Score predictions against ground truth");
  ev.flags->add<std::string>("pred", "directory of predictions");
  ev.flags->add<std::string>("gt", "directory of ground-truth images");
  ev.flags->add<std::string>("masks", "directory of masks");
  ev.flags->add<std::string>("report", "report file (.json or .csv)");
  ev.flags->add<std::string>("region", "evaluated pixels")->check(CLI::IsMember({"full", "hole"}));
  ev.flags->add<bool>("ncc-mean-removed", "subtract channel means before NCC");

  std::vector<std::string> argv_store = {"gmsrm"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  std::function<int()> work;
  const Command* chosen = nullptr;
  try {
    if (pretrain.app->parsed()) {
      chosen = &pretrain;
      work = prepare_pretrain(resolve_args(pretrain), out);
    } else if (train.app->parsed()) {
      chosen = &train;
      work = prepare_train(resolve_args(train), out);
    } else if (inf.app->parsed()) {
      chosen = &inf;
      work = prepare_infer(resolve_args(inf), out);
    } else if (masks.app->parsed()) {
      chosen = &masks;
      work = prepare_make_masks(resolve_args(masks), out);
    } else {
      chosen = &ev;
      work = prepare_eval(resolve_args(ev), out);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << chosen->app->help();
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n\n" << chosen->app->help();
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }

  try {
    return work();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace gmsrm
