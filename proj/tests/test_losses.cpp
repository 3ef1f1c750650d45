#include <gtest/gtest.h>

#include "gmsrm/checkpoint.hpp"
#include "gmsrm/errors.hpp"
#include "gmsrm/losses.hpp"
#include "support.hpp"

using namespace gmsrm;
using gmsrm::testing::gradcheck;
using gmsrm::testing::named_inputs;

namespace {

constexpr double kGradTol = 1e-3;

Tensor half_mask(int64_t b, int64_t side) {
  auto m = torch::ones({b, 1, side, side}, torch::kFloat64);
  m.slice(3, side / 2, side).fill_(0);
  return m;
}

// Discriminator with zero weights: outputs the last bias everywhere.
Discriminator constant_discriminator(double value) {
  Discriminator d(3, 4);
  torch::NoGradGuard ng;
  for (auto& p : d->parameters()) p.zero_();
  d->layers->at<SNConv2dImpl>(3).bias.fill_(value);
  d->eval();
  return d;
}

}  // namespace

TEST(Reconstruction, IdenticalIsZero) {
  auto x = torch::rand({2, 3, 8, 8}, torch::kFloat64);
  EXPECT_EQ(reconstruction_loss(x, x, half_mask(2, 8), 10.0).item<double>(), 0.0);
}

TEST(Reconstruction, RegionMeansCombine) {
  auto m = half_mask(1, 8);
  auto gt = torch::zeros({1, 3, 8, 8}, torch::kFloat64);
  auto pred = 0.2 * m + 0.1 * (1 - m);  // known error 0.2, hole error 0.1
  pred = pred.expand({1, 3, 8, 8});
  EXPECT_NEAR(reconstruction_loss(pred, gt, m, 10.0).item<double>(), 1.2, 1e-12);
}

TEST(Reconstruction, AllKnownIsPlainL1) {
  auto gen = make_generator(1);
  auto a = torch::randn({2, 3, 8, 8}, gen, torch::kFloat64);
  auto b = torch::randn({2, 3, 8, 8}, gen, torch::kFloat64);
  auto m = torch::ones({2, 1, 8, 8}, torch::kFloat64);
  EXPECT_NEAR(reconstruction_loss(a, b, m, 10.0).item<double>(), (a - b).abs().mean().item<double>(), 1e-12);
}

TEST(Reconstruction, ImageOverloadAgrees) {
  auto gen = make_generator(2);
  ImageTensor a(torch::rand({3, 16, 16}, gen) * 2 - 1);
  ImageTensor b(torch::rand({3, 16, 16}, gen) * 2 - 1);
  auto m = generate_center_mask(16, 16, 0.25);
  auto batched = reconstruction_loss(a.data().unsqueeze(0), b.data().unsqueeze(0), m.data().view({1, 1, 16, 16}), 10.0);
  EXPECT_NEAR(reconstruction_loss(a, b, m, 10.0), batched.item<double>(), 1e-6);
  EXPECT_THROW(reconstruction_loss(a, b, Mask::ones(8, 8), 10.0), InvalidInput);
}

TEST(Reconstruction, GradientMatchesFiniteDifferences) {
  auto gen = make_generator(3);
  auto pred = torch::randn({2, 3, 8, 8}, gen, torch::kFloat64).requires_grad_(true);
  auto gt = torch::randn({2, 3, 8, 8}, gen, torch::kFloat64);
  auto m = half_mask(2, 8);
  auto r = gradcheck([&] { return reconstruction_loss(pred, gt, m, 10.0); }, {{"pred", pred}});
  EXPECT_LT(r.max_rel_error, kGradTol);
}

TEST(Perceptual, IdenticalIsZero) {
  auto fx = ConvStackExtractor::default_stack();
  auto x = torch::rand({1, 3, 16, 16});
  EXPECT_EQ(perceptual_loss(x, x, fx).item<float>(), 0.0f);
  EXPECT_EQ(fx.num_layers(), 3u);
}

TEST(Perceptual, IdentityLayerIsMeanAbsoluteDifference) {
  IdentityExtractor fx;
  auto gen = make_generator(4);
  auto a = torch::randn({2, 3, 8, 8}, gen, torch::kFloat64);
  auto b = torch::randn({2, 3, 8, 8}, gen, torch::kFloat64);
  EXPECT_NEAR(perceptual_loss(a, b, fx).item<double>(), (a - b).abs().mean().item<double>(), 1e-12);
}

TEST(Perceptual, DuplicatedChannelsLeaveTermUnchanged) {
  auto gen = make_generator(5);
  ConvStackExtractor::Layer l{torch::randn({4, 3, 3, 3}, gen, torch::kFloat64), torch::randn({4}, gen, torch::kFloat64), 1};
  ConvStackExtractor::Layer d{torch::cat({l.weight, l.weight}), torch::cat({l.bias, l.bias}), 1};
  ConvStackExtractor single({l});
  ConvStackExtractor doubled({d});
  auto a = torch::randn({1, 3, 8, 8}, gen, torch::kFloat64);
  auto b = torch::randn({1, 3, 8, 8}, gen, torch::kFloat64);
  EXPECT_NEAR(perceptual_loss(a, b, single).item<double>(), perceptual_loss(a, b, doubled).item<double>(), 1e-12);
}

TEST(Perceptual, FromFileMatchesInMemoryStack) {
  gmsrm::testing::TempDir dir("fx");
  auto gen = make_generator(6);
  Checkpoint ckpt;
  ckpt.meta["strides"] = {1, 2};
  ckpt.tensors["layer0.weight"] = torch::randn({4, 3, 3, 3}, gen);
  ckpt.tensors["layer0.bias"] = torch::randn({4}, gen);
  ckpt.tensors["layer1.weight"] = torch::randn({6, 4, 3, 3}, gen);
  ckpt.tensors["layer1.bias"] = torch::randn({6}, gen);
  save_checkpoint(ckpt, dir / "fx.gmsrm");
  auto fx = ConvStackExtractor::from_file(dir / "fx.gmsrm");
  ConvStackExtractor ref({{ckpt.tensors["layer0.weight"], ckpt.tensors["layer0.bias"], 1},
                          {ckpt.tensors["layer1.weight"], ckpt.tensors["layer1.bias"], 2}});
  auto a = torch::rand({1, 3, 8, 8}, gen);
  auto b = torch::rand({1, 3, 8, 8}, gen);
  EXPECT_EQ(perceptual_loss(a, b, fx).item<float>(), perceptual_loss(a, b, ref).item<float>());
  ckpt.tensors.erase("layer1.bias");
  save_checkpoint(ckpt, dir / "bad.gmsrm");
  EXPECT_THROW(ConvStackExtractor::from_file(dir / "bad.gmsrm"), InvalidInput);
}

TEST(Perceptual, GradientMatchesFiniteDifferences) {
  auto fx = ConvStackExtractor::default_stack();
  fx.to(torch::kFloat64);
  auto gen = make_generator(7);
  auto pred = torch::rand({2, 3, 8, 8}, gen, torch::kFloat64).requires_grad_(true);
  auto gt = torch::rand({2, 3, 8, 8}, gen, torch::kFloat64);
  auto r = gradcheck([&] { return perceptual_loss(pred, gt, fx); }, {{"pred", pred}});
  EXPECT_LT(r.max_rel_error, kGradTol);
}

TEST(Adversarial, ConstantDiscriminator) {
  auto x = torch::rand({2, 3, 16, 16});
  auto d0 = constant_discriminator(0.0);
  auto d1 = constant_discriminator(1.0);
  EXPECT_EQ(adversarial_generator_loss(d0, x).item<float>(), 0.0f);
  EXPECT_EQ(adversarial_generator_loss(d1, x).item<float>(), -1.0f);
}

TEST(Adversarial, PushesDiscriminatorScoreUp) {
  Discriminator d(3, 4);
  d->eval();
  auto gen = make_generator(8);
  auto x = torch::rand({1, 3, 16, 16}, gen);
  auto theta = torch::tensor({0.7}, torch::requires_grad());
  auto loss = adversarial_generator_loss(d, theta * x);
  auto g_loss = torch::autograd::grad({loss}, {theta})[0].item<double>();
  auto score = d->forward(theta * x).mean();
  auto g_score = torch::autograd::grad({score}, {theta})[0].item<double>();
  ASSERT_NE(g_score, 0.0);
  EXPECT_LT(g_loss * g_score, 0.0);
}

TEST(Adversarial, GradientMatchesFiniteDifferences) {
  Discriminator d(3, 2);
  d->to(torch::kFloat64);
  d->initialize(9);
  d->eval();
  auto gen = make_generator(9);
  auto pred = torch::rand({2, 3, 8, 8}, gen, torch::kFloat64).requires_grad_(true);
  auto inputs = named_inputs(*d);
  inputs.emplace_back("pred", pred);
  auto r = gradcheck([&] { return adversarial_generator_loss(d, pred); }, inputs);
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST(DiscriminatorLoss, FormulaValues) {
  auto x = torch::rand({1, 3, 16, 16});
  auto d0 = constant_discriminator(0.0);
  EXPECT_EQ(discriminator_loss(d0, x, x).item<float>(), 1.0f);

  // Positive weights and zero biases make D positively homogeneous, so a
  // rescaled constant input reaches any target score.
  Discriminator d(3, 4);
  {
    torch::NoGradGuard ng;
    for (auto& p : d->parameters()) p.zero_();
    for (size_t i = 0; i < d->layers->size(); ++i) {
      d->layers->at<SNConv2dImpl>(i).weight.fill_(1.0);
      d->layers->at<SNConv2dImpl>(i).refresh(20);
    }
  }
  d->eval();
  auto ones = torch::ones({1, 3, 16, 16});
  const double v = d->forward(ones).mean().item<double>();
  ASSERT_GT(v, 0.0);
  auto gt = ones / v;  // D(gt) = 1
  auto pred = torch::zeros_like(ones);  // D(pred) = 0
  EXPECT_NEAR(discriminator_loss(d, pred, gt).item<double>(), 0.0, 1e-5);
  EXPECT_NEAR(discriminator_loss(d, gt, pred).item<double>(), 2.0, 1e-5);
}

TEST(DiscriminatorLoss, GradientMatchesFiniteDifferences) {
  Discriminator d(3, 2);
  d->to(torch::kFloat64);
  d->initialize(10);
  d->eval();
  auto gen = make_generator(10);
  auto pred = torch::rand({2, 3, 8, 8}, gen, torch::kFloat64);
  auto gt = torch::rand({2, 3, 8, 8}, gen, torch::kFloat64);
  auto r = gradcheck([&] { return discriminator_loss(d, pred, gt); }, named_inputs(*d));
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST(Discriminator, SpectralNormsNearOneAfterTraining) {
  Discriminator d(3, 8);
  d->train();
  auto x = torch::rand({1, 3, 32, 32});
  for (int i = 0; i < 40; ++i) d->forward(x);
  for (double s : d->spectral_norms()) EXPECT_NEAR(s, 1.0, 0.02);
}

TEST(Kl, ClosedFormValues) {
  EXPECT_EQ(kl_standard_normal(0.0, 1.0), 0.0);
  EXPECT_NEAR(kl_standard_normal(1.0, 1.0), 0.5, 1e-15);
  EXPECT_NEAR(kl_standard_normal(0.0, 2.0), 0.5 * (4.0 - 1.0 - 2.0 * std::log(2.0)), 1e-15);
  EXPECT_NEAR(kl_standard_normal(0.0, 2.0), 0.80685, 1e-5);
  EXPECT_THROW(kl_standard_normal(0.0, 0.0), InvalidInput);
}

TEST(Kl, MatchesQuadrature) {
  for (auto [mu, sigma] : {std::pair{0.0, 1.0}, {1.0, 1.0}, {0.0, 2.0}, {-0.7, 0.3}}) {
    ScaleNoiseParams p{torch::tensor({mu}, torch::kFloat64), torch::tensor({sigma}, torch::kFloat64)};
    EXPECT_NEAR(kl_loss({p}, {1.0}).item<double>(), gmsrm::testing::kl_quadrature(mu, sigma), 1e-6);
  }
}

TEST(Kl, WeightedSumOverScales) {
  ScaleNoiseParams a{torch::tensor({1.0, 0.0}, torch::kFloat64), torch::tensor({1.0, 1.0}, torch::kFloat64)};
  ScaleNoiseParams b{torch::tensor({0.0}, torch::kFloat64), torch::tensor({2.0}, torch::kFloat64)};
  const double got = kl_loss({a, b}, {0.5, 2.0}).item<double>();
  EXPECT_NEAR(got, 0.5 * 0.25 + 2.0 * kl_standard_normal(0.0, 2.0), 1e-12);
  EXPECT_THROW(kl_loss({a, b}, {1.0}), InvalidInput);
  ScaleNoiseParams bad{torch::tensor({0.0}), torch::tensor({-1.0})};
  EXPECT_THROW(kl_loss({bad}, {1.0}), InvalidInput);
}

TEST(Kl, GradientMatchesFiniteDifferences) {
  auto gen = make_generator(11);
  auto mu = torch::randn({4}, gen, torch::kFloat64).requires_grad_(true);
  auto sigma = (torch::rand({4}, gen, torch::kFloat64) + 0.2).requires_grad_(true);
  auto r = gradcheck([&] { return kl_loss({{mu, sigma}}, {0.7}); }, {{"mu", mu}, {"sigma", sigma}});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST(Total, Arithmetic) {
  auto lw = LossWeights::defaults(4);
  EXPECT_NEAR(total_loss(1, 1, 1, 1, lw), 1.12, 1e-12);
  EXPECT_EQ(total_loss(0, 0, 0, 0, lw), 0.0);
  auto lw2 = lw;
  lw2.lambda_rec *= 2;
  lw2.lambda_perc *= 2;
  lw2.lambda_adv *= 2;
  lw2.lambda_kl *= 2;
  EXPECT_NEAR(total_loss(0.3, 0.5, -0.2, 0.9, lw2), 2 * total_loss(0.3, 0.5, -0.2, 0.9, lw), 1e-12);
  ASSERT_EQ(lw.scale_weights.size(), 3u);
  EXPECT_NEAR(lw.scale_weights[0], 1.0 / 3.0, 1e-15);
}

TEST(Total, TensorFormAgreesAndDifferentiates) {
  auto lw = LossWeights::defaults(4);
  auto parts = std::vector<Tensor>{torch::tensor(0.3, torch::kFloat64).requires_grad_(true),
                                   torch::tensor(0.5, torch::kFloat64).requires_grad_(true),
                                   torch::tensor(-0.2, torch::kFloat64).requires_grad_(true),
                                   torch::tensor(0.9, torch::kFloat64).requires_grad_(true)};
  LossParts lp{parts[0], parts[1], parts[2], parts[3]};
  EXPECT_NEAR(total_loss(lp, lw).item<double>(), total_loss(0.3, 0.5, -0.2, 0.9, lw), 1e-15);
  auto r = gradcheck([&] { return total_loss(lp, lw); },
                     {{"rec", parts[0]}, {"perc", parts[1]}, {"adv", parts[2]}, {"kl", parts[3]}});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST(Weights, Validation) {
  auto lw = LossWeights::defaults(4);
  EXPECT_NO_THROW(lw.validate());
  lw.lambda_kl = -1;
  EXPECT_THROW(lw.validate(), ConfigError);
}
