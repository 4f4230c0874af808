#pragma once

// Small models shared by the unit tests and the acceptance runner.

#include <cmath>

#include "jscc/isec.hpp"
#include "jscc/models.hpp"
#include "jscc/rng.hpp"

namespace jscc::fixtures {

/// 8x8 RGB autoencoder with a (2, 2, 2) codeword (cpp 1/48, k = 8) and a
/// three-layer denoiser: a few hundred parameters, cheap enough for finite
/// differences in double precision.
inline AutoencoderConfig micro_config() {
  using detail::conv_bn_prelu;
  AutoencoderConfig cfg;
  cfg.variant = Variant::tiny;
  cfg.input_shape = {3, 8, 8};
  cfg.cpp = {1, 48};
  cfg.codeword_channels = codeword_channels_for(cfg.input_shape, cfg.cpp);
  const int kc = cfg.codeword_channels;
  cfg.encoder = {Variant::tiny, cfg.input_shape, {conv_bn_prelu(3, 2, 4), conv_bn_prelu(3, 2, kc)}, kc};
  cfg.decoder = {Variant::tiny, kc,
                 {conv_bn_prelu(3, 1, 4), detail::upsample(), detail::upsample(), {StageKind::conv_bn_tanh, 3, 1, 3}}};
  return cfg;
}

/// Micro bundle with a denoiser; batch-norm running statistics are randomized
/// so that eval mode is not the identity normalization.
template <typename T>
ModelBundle<T> micro_bundle(std::uint64_t seed) {
  auto cfg = micro_config();
  auto b = ModelBundle<T>::create(cfg, DenoiserConfig{3, 3, 4, cfg.codeword_channels, true}, 5.0, seed);
  b.init_denoiser(seed + 1);
  Rng rng(seed, {0x6273});
  for (auto* net : {&b.encoder(), &b.decoder()}) {
    for (auto* buf : net->buffers()) {
      const bool var = buf->name.find("var") != std::string::npos;
      for (auto& v : buf->value.values()) v = T(var ? rng.uniform(0.5, 2.0) : rng.uniform(-0.3, 0.3));
    }
  }
  for (auto* buf : b.denoiser().buffers())
    for (auto& v : buf->value.values()) v = T(rng.uniform(0.5, 2.0));
  return b;
}

/// E = D = identity with a Gaussian codeword prior z ~ N(0, I). The noisy
/// marginal at the training level is N(0, (1 + s^2) I), so the denoising
/// direction is -s^2 z / (1 + s^2).
struct LinearGaussianStub {
  using scalar_type = double;
  double sigma_train = 1.0;

  double shrink() const { return sigma_train * sigma_train / (1.0 + sigma_train * sigma_train); }

  Tensor<double> decode(const Tensor<double>& z) const { return z; }
  Pullback<double> pullback_residual(const Tensor<double>& z, const Tensor<double>& y) const {
    return {z, y - z, y - z};
  }
  Tensor<double> prior_direction(const Tensor<double>& z) const { return z * (-shrink()); }

  /// Fixed point of the update: (y - z)/sigma^2 - alpha' c z = 0.
  Tensor<double> map_estimate(const Tensor<double>& y, double sigma, double alpha_prime) const {
    return y * (1.0 / (1.0 + sigma * sigma * alpha_prime * shrink()));
  }
};

}  // namespace jscc::fixtures
