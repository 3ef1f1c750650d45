#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "gmsrm/cli.hpp"
#include "gmsrm/imaging.hpp"
#include "gmsrm/metrics.hpp"
#include "support.hpp"

using namespace gmsrm;
using gmsrm::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream f(p);
  return nlohmann::json::parse(f);
}

void write_images(const fs::path& dir, int n, int side) {
  fs::create_directories(dir);
  auto y = torch::arange(side, torch::kFloat32).view({1, side, 1});
  auto x = torch::arange(side, torch::kFloat32).view({1, 1, side});
  auto c = torch::arange(3, torch::kFloat32).view({3, 1, 1});
  for (int i = 0; i < n; ++i) {
    auto img = 0.8 * torch::sin((0.1f + 0.04f * i) * x + c) * torch::cos(0.08 * y + 0.5 * c * i);
    char name[32];
    std::snprintf(name, sizeof(name), "img_%02d.png", i);
    save_image(ImageTensor(img), dir / name);
  }
}

// Pre-trains a tiny memory and trains a tiny gm-srm model once for the
// whole suite.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    write_images(*dir_ / "data", 4, 40);
    nlohmann::json cfg = {
        {"model", {{"base_channels", 8}, {"max_channels", 32}, {"d_c", 16}, {"mapping_layers", 2}}},
        {"train", {{"batch_size", 2}}},
        {"size", 32},
        {"steps", 2},
        {"seed", 1}};
    std::ofstream(*dir_ / "cfg.json") << cfg.dump();
    pretrain_ = cli({"pretrain-memory", "--config", (*dir_ / "cfg.json").string(), "--data",
                     (*dir_ / "data").string(), "--out", (*dir_ / "pre").string()});
    train_ = cli({"train", "--data", (*dir_ / "data").string(), "--memory", (*dir_ / "pre" / "memory.gmsrm").string(),
                  "--variant", "gm-srm", "--steps", "2", "--out", (*dir_ / "run").string()});
  }
  static void TearDownTestSuite() { delete dir_; }

  static TempDir* dir_;
  static CliRun pretrain_;
  static CliRun train_;
};

TempDir* CliPipeline::dir_ = nullptr;
CliRun CliPipeline::pretrain_;
CliRun CliPipeline::train_;

}  // namespace

TEST(CliUsage, UnknownSubcommandAndMissingArgs) {
  EXPECT_EQ(cli({"bogus"}).code, kExitUsage);
  EXPECT_EQ(cli({}).code, kExitUsage);
  EXPECT_EQ(cli({"infer", "--ckpt", "x.gmsrm"}).code, kExitUsage);
  EXPECT_EQ(cli({"make-masks", "--kind", "square"}).code, kExitUsage);
  EXPECT_EQ(cli({"--help"}).code, kExitOk);
}

TEST(CliUsage, MissingCheckpointIsRuntimeFailure) {
  TempDir dir("cli_fail");
  write_images(dir / "img", 1, 32);
  save_mask(generate_center_mask(32, 32, 0.25), dir / "m.png");
  auto r = cli({"infer", "--ckpt", (dir / "none.gmsrm").string(), "--image", (dir / "img" / "img_00.png").string(),
                "--mask", (dir / "m.png").string(), "--out", (dir / "o.png").string()});
  EXPECT_EQ(r.code, kExitFailure);
  EXPECT_NE(r.err.find("error"), std::string::npos);
}

TEST(CliUsage, MemoryVariantWithoutMemoryIsUsageError) {
  TempDir dir("cli_mem");
  write_images(dir / "data", 2, 32);
  auto r = cli({"train", "--data", (dir / "data").string(), "--variant", "gm-csv", "--out", (dir / "run").string()});
  EXPECT_EQ(r.code, kExitUsage);
}

TEST(CliMasks, CenterQuarterAt128) {
  TempDir dir("cli_masks");
  auto r = cli({"make-masks", "--kind", "center", "--ratio-lo", "0.25", "--ratio-hi", "0.25", "--count", "2", "--size",
                "128", "--out", dir.path().string(), "--seed", "4"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  auto m = load_mask(dir / "mask_00000.png");
  EXPECT_EQ((m.data() == 0).sum().item<int64_t>(), 64 * 64);
  EXPECT_TRUE(fs::exists(dir / "mask_00001.png"));
  auto resolved = read_json(dir / "config.resolved.json");
  EXPECT_EQ(resolved["kind"], "center");
  EXPECT_EQ(resolved["size"], 128);
}

TEST(CliMasks, IrregularIsSeeded) {
  TempDir a("cli_irr"), b("cli_irr");
  for (auto* d : {&a, &b}) {
    ASSERT_EQ(cli({"make-masks", "--kind", "irregular", "--ratio-lo", "0.3", "--ratio-hi", "0.4", "--count", "3",
                   "--size", "64", "--out", d->path().string(), "--seed", "11"})
                  .code,
              kExitOk);
  }
  for (const char* name : {"mask_00000.png", "mask_00001.png", "mask_00002.png"}) {
    EXPECT_EQ(slurp(a / name), slurp(b / name));
    const double r = corruption_ratio(load_mask(a / name));
    EXPECT_GT(r, 0.3);
    EXPECT_LE(r, 0.4);
  }
}

TEST(CliEval, IdenticalPredictionsAndCsv) {
  TempDir dir("cli_eval");
  write_images(dir / "gt", 3, 32);
  write_images(dir / "pred", 3, 32);
  fs::create_directories(dir / "masks");
  for (int i = 0; i < 3; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%02d.png", i);
    save_mask(generate_center_mask(32, 32, 0.25), dir / "masks" / name);
  }
  auto r = cli({"eval", "--pred", (dir / "pred").string(), "--gt", (dir / "gt").string(), "--masks",
                (dir / "masks").string(), "--report", (dir / "r.json").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  auto report = read_json(dir / "r.json");
  EXPECT_EQ(report["n_images"], 3);
  EXPECT_DOUBLE_EQ(report["metrics"]["psnr"]["all"].get<double>(), kPsnrCap);
  EXPECT_NEAR(report["metrics"]["ssim"]["all"].get<double>(), 1.0, 1e-12);
  EXPECT_TRUE(fs::exists(dir / "r.json.resolved.json"));

  r = cli({"eval", "--pred", (dir / "pred").string(), "--gt", (dir / "gt").string(), "--masks",
           (dir / "masks").string(), "--report", (dir / "r.csv").string(), "--region", "hole"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(slurp(dir / "r.csv").rfind("file,bucket,ratio,psnr,ssim,ncc,lmse\n", 0), 0u);
}

TEST_F(CliPipeline, PretrainWritesOutputs) {
  ASSERT_EQ(pretrain_.code, kExitOk) << pretrain_.err;
  EXPECT_TRUE(fs::exists(*dir_ / "pre" / "memory.gmsrm"));
  EXPECT_TRUE(fs::exists(*dir_ / "pre" / "train_log.jsonl"));
  auto resolved = read_json(*dir_ / "pre" / "config.resolved.json");
  EXPECT_EQ(resolved["model"]["image_side"], 32);
  EXPECT_EQ(resolved["model"]["base_channels"], 8);
  EXPECT_EQ(resolved["train"]["steps"], 2);
  EXPECT_EQ(resolved["train"]["batch_size"], 2);
}

TEST_F(CliPipeline, TrainInheritsMemoryArchitecture) {
  ASSERT_EQ(train_.code, kExitOk) << train_.err;
  EXPECT_TRUE(fs::exists(*dir_ / "run" / "model.gmsrm"));
  auto resolved = read_json(*dir_ / "run" / "config.resolved.json");
  EXPECT_EQ(resolved["model"]["d_c"], 16);
  EXPECT_EQ(resolved["model"]["variant"], "gm-srm");
}

TEST_F(CliPipeline, InferIsDeterministic) {
  ASSERT_EQ(train_.code, kExitOk) << train_.err;
  save_mask(generate_center_mask(32, 32, 0.25), *dir_ / "m.png");
  const auto image = (*dir_ / "data" / "img_00.png").string();
  for (const char* name : {"a.png", "b.png"}) {
    auto r = cli({"infer", "--ckpt", (*dir_ / "run" / "model.gmsrm").string(), "--image", image, "--mask",
                  (*dir_ / "m.png").string(), "--out", (*dir_ / name).string(), "--seed", "3"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
  }
  EXPECT_EQ(slurp(*dir_ / "a.png"), slurp(*dir_ / "b.png"));
  EXPECT_TRUE(fs::exists(*dir_ / "a.png.resolved.json"));

  // Composite keeps known pixels up to 8-bit quantization of the resized input.
  auto out = load_image_resized(*dir_ / "a.png", 32);
  auto in = load_image(image, 32).data();
  auto known = load_mask(*dir_ / "m.png").data().unsqueeze(0).expand({3, 32, 32}) == 1;
  EXPECT_LE((out - in).masked_select(known).abs().max().item<float>(), 0.5f / 127.5f + 1e-6f);
}

TEST(CliBinary, ExitCodes) {
  const std::string bin = GMSRM_CLI_PATH;
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " bogus >/dev/null 2>&1").c_str())), kExitUsage);
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " --help >/dev/null 2>&1").c_str())), kExitOk);
}
