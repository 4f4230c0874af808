#include <gtest/gtest.h>

#include <cmath>

#include "jscc/models.hpp"
#include "support/fixtures.hpp"
#include "test_util.hpp"

using namespace jscc;

namespace {

Tensor<float> random_images(int n, std::uint64_t seed, double scale) {
  Rng rng(seed);
  Tensor<float> x({n, 3, 32, 32});
  for (auto& v : x.values()) v = float(scale * rng.uniform(-1.0, 1.0));
  return x;
}

}  // namespace

TEST(Architecture, CodewordShapes) {
  EXPECT_EQ(tiny_config({1, 6}).codeword_shape(), (Shape{1, 16, 8, 8}));
  EXPECT_EQ(cifar_config({1, 12}).codeword_shape(), (Shape{1, 8, 8, 8}));
  EXPECT_EQ(cifar_config({1, 6}).codeword_dim(), 1024);
  EXPECT_EQ(openimages_config({1, 16}).codeword_shape(), (Shape{1, 6, 32, 32}));
  EXPECT_EQ(openimages_config({1, 6}, 256, 128).codeword_shape(), (Shape{1, 16, 64, 32}));
  EXPECT_THROW(openimages_config({1, 6}, 130, 128), ConfigError);
  EXPECT_THROW(codeword_channels_for({3, 32, 32}, {1, 7}), ConfigError);
  EXPECT_EQ(parse_variant("tiny"), Variant::tiny);
  EXPECT_THROW(parse_variant("resnet"), ConfigError);
}

TEST(Architecture, BuiltNetworksHaveTheDeclaredShapes) {
  for (auto cfg : {tiny_config({1, 6}), cifar_config({1, 12})}) {
    auto b = ModelBundle<float>::create(cfg, tiny_denoiser_config(cfg.codeword_channels), 5.0, 1);
    b.init_denoiser(2);
    const Shape x{2, 3, 32, 32};
    EXPECT_EQ(b.encoder().output_shape(x), cfg.codeword_shape().with_batch(2));
    EXPECT_EQ(b.decoder().output_shape(cfg.codeword_shape()), (Shape{1, 3, 32, 32}));
    EXPECT_EQ(b.denoiser().output_shape(cfg.codeword_shape()), cfg.codeword_shape());
    for (auto* p : b.denoiser().params()) EXPECT_EQ(p->name.find("bias"), std::string::npos) << p->name;
  }
}

TEST(Encoder, PowerConstraintHoldsOnThousandInputs) {
  const auto cfg = tiny_config({1, 6});
  auto b = ModelBundle<float>::create(cfg, tiny_denoiser_config(cfg.codeword_channels), 5.0, 3);
  const double k = double(b.codeword_dim());
  int projected = 0;
  for (int batch = 0; batch < 10; ++batch) {
    const auto z = b.encode(random_images(100, 50 + batch, std::pow(4.0, batch)));
    EXPECT_TRUE(z.normalized);
    for (int n = 0; n < 100; ++n) {
      const double p = squared_norm(z.values.item(n));
      EXPECT_LE(p, k * (1 + 1e-6));
      projected += p > k * (1 - 1e-4);
    }
  }
  EXPECT_GT(projected, 0);
}

TEST(Encoder, PowerNormalizeProjectsOnlyOutsideTheBall) {
  Tensor<double> v({2, 1, 1, 4}, std::vector<double>{3, 4, 0, 0, 0.1, 0.2, 0.3, 0.4});
  const auto z = power_normalize(v, 4);
  EXPECT_NEAR(squared_norm(z.values.item(0)), 4.0, 1e-12);
  EXPECT_NEAR(z.values[0] / z.values[1], 0.75, 1e-12);
  for (int i = 4; i < 8; ++i) EXPECT_EQ(z.values[i], v[i]);
  EXPECT_THROW(power_normalize(v, 5), ConfigError);
}

TEST(Decoder, OutputLiesInTanhRange) {
  const auto cfg = tiny_config({1, 6});
  auto b = ModelBundle<float>::create(cfg, tiny_denoiser_config(cfg.codeword_channels), 5.0, 3);
  Tensor<float> y(cfg.codeword_shape().with_batch(4));
  Rng rng(2);
  for (auto& v : y.values()) v = float(5 * rng.normal());
  const auto xhat = b.decode(y);
  for (float v : xhat.values()) EXPECT_LE(std::abs(v), 1.0f);
}

TEST(Denoiser, BiasFreeInvariants) {
  const auto cfg = tiny_config({1, 6});
  auto b = ModelBundle<double>::create(cfg, tiny_denoiser_config(cfg.codeword_channels), 5.0, 3);
  b.init_denoiser(9);
  Rng rng(1);
  for (auto* buf : b.denoiser().buffers())
    for (auto& v : buf->value.values()) v = rng.uniform(0.5, 2.0);

  const Tensor<double> zero(cfg.codeword_shape().with_batch(2));
  const auto f0 = b.noise_prediction(zero);
  for (double v : f0.values()) EXPECT_EQ(v, 0.0);

  const Tensor<double> z = jscc::testing::random_tensor(cfg.codeword_shape().with_batch(2), 4);
  const Tensor<double> fz = b.noise_prediction(z);
  for (double c : {0.5, 2.0, 10.0}) {
    const Tensor<double> fcz = b.noise_prediction(z * c);
    EXPECT_LT(std::sqrt(squared_norm(fcz - fz * c) / squared_norm(fz * c)), 1e-4) << c;
  }
  // prior direction is the negated noise prediction
  EXPECT_EQ(b.prior_direction(z), fz * -1.0);
}

TEST(ModelBundle, RejectsMisshapedInputs) {
  const auto cfg = tiny_config({1, 6});
  auto b = ModelBundle<float>::create(cfg, tiny_denoiser_config(cfg.codeword_channels), 5.0, 3);
  EXPECT_THROW(b.encode(Tensor<float>({1, 3, 16, 16})), ConfigError);
  EXPECT_THROW(b.encode(Tensor<float>({1, 1, 32, 32})), ConfigError);
  EXPECT_THROW(b.decode(Tensor<float>({1, 8, 8, 8})), ConfigError);
  EXPECT_THROW(b.noise_prediction(Tensor<float>(cfg.codeword_shape())), ConfigError);  // no denoiser yet
  EXPECT_THROW(prelu(Tensor<float>({1, 1, 1, 1}), -0.5f), ConfigError);
}

TEST(ModelBundle, OpenImagesAcceptsAnyMultipleOfFour) {
  auto cfg = fixtures::micro_config();
  cfg.variant = Variant::openimages;
  auto b = ModelBundle<float>::create(cfg, {3, 3, 4, cfg.codeword_channels, true}, 5.0, 3);
  EXPECT_EQ(b.encode(Tensor<float>({1, 3, 16, 12})).shape(), (Shape{1, 2, 4, 3}));
  EXPECT_THROW(b.encode(Tensor<float>({1, 3, 10, 12})), ConfigError);
}
