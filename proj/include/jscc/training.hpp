#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "jscc/channel.hpp"
#include "jscc/checkpoint.hpp"
#include "jscc/data.hpp"
#include "jscc/error.hpp"
#include "jscc/models.hpp"
#include "jscc/nn/optim.hpp"

namespace jscc {

struct LrDecay {
  long step = 0;
  double factor = 1.0;
};

struct TrainConfig {
  int batch_size = 32;
  long total_steps = 2000;
  nn::AdamOptions optimizer{1e-3, 0.9, 0.999};
  LrDecay lr_decay{1000, 0.5};
  double snr_train_db = 5.0;
  Rational cpp{1, 6};
  std::uint64_t seed = 0;
  /// Emit a checkpoint every N steps (0 disables); written to checkpoint_path.
  long checkpoint_every = 0;
  std::string checkpoint_path;
  long log_every = 100;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
    if (!(optimizer.learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1) || !(optimizer.beta2 >= 0 && optimizer.beta2 < 1)) {
      throw ConfigError("Adam betas must lie in [0, 1)");
    }
    if (lr_decay.step > total_steps) throw ConfigError("lr_decay.step must not exceed total_steps");
    if (checkpoint_every > 0 && checkpoint_path.empty()) throw ConfigError("checkpoint_every needs checkpoint_path");
  }

  double learning_rate_at(long step) const {
    return step >= lr_decay.step ? optimizer.learning_rate * lr_decay.factor : optimizer.learning_rate;
  }
  double sigma_train() const { return sigma_from_snr(snr_train_db); }
};

/// Published CIFAR-10 encoder/decoder schedule.
inline TrainConfig published_cifar_jscc_schedule(double snr_train_db, Rational cpp) {
  TrainConfig c;
  c.batch_size = 64;
  c.total_steps = 234300;
  c.optimizer = {0.0002, 0.0, 0.9};
  c.lr_decay = {117150, 0.1};
  c.snr_train_db = snr_train_db;
  c.cpp = cpp;
  return c;
}

/// Published CIFAR-10 denoiser schedule.
inline TrainConfig published_cifar_denoiser_schedule(double snr_train_db, Rational cpp) {
  TrainConfig c = published_cifar_jscc_schedule(snr_train_db, cpp);
  c.optimizer.beta1 = 0.9;
  c.optimizer.beta2 = 0.999;
  return c;
}

/// Desk-scale schedule: batch 32, lr 1e-3 halved at the midpoint.
inline TrainConfig desk_schedule(double snr_train_db, Rational cpp, long steps, double beta1 = 0.9) {
  TrainConfig c;
  c.batch_size = 32;
  c.total_steps = steps;
  c.optimizer = {1e-3, beta1, 0.999};
  c.lr_decay = {steps / 2, 0.5};
  c.snr_train_db = snr_train_db;
  c.cpp = cpp;
  return c;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over the batch of ||x_i - D(E(x_i) + n_i)||^2 (inference mode).
template <typename M, typename T>
double jscc_loss(const M& model, const Tensor<T>& batch, const Tensor<T>& noise) {
  auto z = model.encode(batch);
  Tensor<T> y = z.values + noise;
  const Tensor<T> xhat = model.decode(y);
  double total = 0.0;
  for (int n = 0; n < batch.batch(); ++n) {
    auto a = batch.item(n), b = xhat.item(n);
    for (std::size_t i = 0; i < a.size(); ++i) total += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  }
  return total / batch.batch();
}

/// Mean over the batch of ||n_i - F(z_i + n_i)||^2 for any callable F.
template <typename F, typename T>
double denoiser_loss(const F& denoiser, const Tensor<T>& codewords, const Tensor<T>& noise) {
  const Tensor<T> out = denoiser(codewords + noise);
  double total = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) total += (double(noise[i]) - out[i]) * (double(noise[i]) - out[i]);
  return total / codewords.batch();
}

/// One training-mode forward/backward pass of the JSCC loss. Parameter
/// gradients are accumulated into `enc_grads` / `dec_grads`.
template <typename T>
double jscc_train_pass(ModelBundle<T>& model, const Tensor<T>& batch, const Tensor<T>& noise,
                       nn::Gradients<T>& enc_grads, nn::Gradients<T>& dec_grads) {
  nn::Tape<T> tape;
  Tensor<T> y = model.encoder().forward_train(batch, tape);
  y += noise;
  Tensor<T> xhat = model.decoder().forward_train(y, tape);
  const double scale = 1.0 / batch.batch();
  double loss = 0.0;
  for (std::size_t i = 0; i < xhat.size(); ++i) {
    const double d = double(xhat[i]) - batch[i];
    loss += d * d;
    xhat[i] = T(2.0 * d * scale);
  }
  Tensor<T> gy = model.decoder().backward(xhat, tape, &dec_grads);
  model.encoder().backward(gy, tape, &enc_grads);
  return loss * scale;
}

/// One training-mode pass of the denoiser loss on (codeword, noise) pairs.
template <typename T>
double denoiser_train_pass(Network<T>& denoiser, const Tensor<T>& codewords, const Tensor<T>& noise,
                           nn::Gradients<T>& grads) {
  nn::Tape<T> tape;
  Tensor<T> out = denoiser.forward_train(codewords + noise, tape);
  const double scale = 1.0 / codewords.batch();
  double loss = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = double(out[i]) - noise[i];
    loss += d * d;
    out[i] = T(2.0 * d * scale);
  }
  denoiser.backward(out, tape, &grads);
  return loss * scale;
}

// ---------------------------------------------------------------------------
// Loops

struct TrainLogLine {
  long step = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
  double wall_seconds = 0.0;
};

struct TrainHooks {
  /// Receives one record every log_every steps (and for the last step).
  std::function<void(const TrainLogLine&)> on_log;
  /// Line-delimited JSON log sink.
  std::ostream* log = nullptr;
};

struct TrainHistory {
  std::vector<double> losses;
};

namespace detail {

inline void emit_log(const TrainConfig& cfg, const TrainHooks& hooks, long step, double loss, double lr,
                     std::chrono::steady_clock::time_point start, const char* phase) {
  const bool last = step + 1 == cfg.total_steps;
  if (!(cfg.log_every > 0 && (step % cfg.log_every == 0 || last))) return;
  TrainLogLine line{step, loss, lr, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
  if (hooks.on_log) hooks.on_log(line);
  if (hooks.log) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "{\"phase\":\"%s\",\"step\":%ld,\"loss\":%.6f,\"lr\":%.8g,\"wall_s\":%.3f}\n", phase,
                  line.step, line.loss, line.learning_rate, line.wall_seconds);
    *hooks.log << buf << std::flush;
  }
}

template <typename T>
Tensor<T> sample_batch(const DatasetHandle& data, int batch_size, Rng& rng) {
  std::vector<Tensor<T>> items;
  items.reserve(std::size_t(batch_size));
  for (int b = 0; b < batch_size; ++b) {
    const auto idx = std::size_t(rng.integer(0, int(data.size()) - 1));
    items.push_back(data.sample(idx, rng).template cast<T>());
  }
  return stack(items);
}

template <typename T>
Tensor<T> gaussian_like(const Shape& s, double sigma, Rng& rng) {
  Tensor<T> n(s);
  for (auto& v : n.values()) v = T(sigma * rng.normal());
  return n;
}

}  // namespace detail

/// Trains encoder and decoder jointly on fresh AWGN draws at sigma_train.
/// The returned bundle carries no denoiser.
template <typename T = float>
ModelBundle<T> train_jscc(const TrainConfig& cfg, const AutoencoderConfig& arch, const DenoiserConfig& denoiser_arch,
                          const DatasetHandle& data, const TrainHooks& hooks = {}, TrainHistory* history = nullptr) {
  cfg.validate();
  if (!(cfg.cpp == arch.cpp)) {
    throw ConfigError("train config cpp " + cfg.cpp.str() + " differs from the architecture's " + arch.cpp.str());
  }
  if (data.empty()) throw DataError("training dataset is empty");
  auto model = ModelBundle<T>::create(arch, denoiser_arch, cfg.snr_train_db, cfg.seed);
  auto enc_grads = model.encoder().make_gradients();
  auto dec_grads = model.decoder().make_gradients();
  nn::Adam<T> enc_opt(model.encoder().params(), cfg.optimizer);
  nn::Adam<T> dec_opt(model.decoder().params(), cfg.optimizer);
  Rng rng(cfg.seed, {0x747261696e});
  const double sigma = cfg.sigma_train();
  const auto start = std::chrono::steady_clock::now();

  for (long step = 0; step < cfg.total_steps; ++step) {
    const double lr = cfg.learning_rate_at(step);
    enc_opt.set_learning_rate(lr);
    dec_opt.set_learning_rate(lr);
    const Tensor<T> batch = detail::sample_batch<T>(data, cfg.batch_size, rng);
    Shape zs = model.encoder().output_shape(batch.shape());
    const Tensor<T> noise = detail::gaussian_like<T>(zs, sigma, rng);
    enc_grads.zero();
    dec_grads.zero();
    const double loss = jscc_train_pass(model, batch, noise, enc_grads, dec_grads);
    if (!std::isfinite(loss)) {
      throw NumericError("train_jscc: non-finite loss at step " + std::to_string(step) + " (lr " + std::to_string(lr) + ")");
    }
    enc_opt.step(enc_grads);
    dec_opt.step(dec_grads);
    model.encoder().project();
    model.decoder().project();
    model.metadata().jscc_steps = step + 1;
    if (history) history->losses.push_back(loss);
    detail::emit_log(cfg, hooks, step, loss, lr, start, "jscc");
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) save_bundle(model, cfg.checkpoint_path);
  }
  return model;
}

/// Trains a bias-free denoiser on codewords of the frozen encoder corrupted
/// by AWGN at the model's training sigma, to predict the noise instance.
/// The denoiser is installed into `model`.
template <typename T = float>
void train_denoiser(const TrainConfig& cfg, ModelBundle<T>& model, const DatasetHandle& data,
                    const TrainHooks& hooks = {}, TrainHistory* history = nullptr) {
  cfg.validate();
  if (data.empty()) throw DataError("training dataset is empty");
  if (std::abs(cfg.snr_train_db - model.metadata().snr_train_db) > 1e-9) {
    throw ConfigError("denoiser snr_train_db " + std::to_string(cfg.snr_train_db) + " differs from the model's " +
                      std::to_string(model.metadata().snr_train_db));
  }
  auto& net = model.init_denoiser(cfg.seed);
  auto grads = net.make_gradients();
  nn::Adam<T> opt(net.params(), cfg.optimizer);
  Rng rng(cfg.seed, {0x64656e6f});
  const double sigma = model.sigma_train();
  const auto start = std::chrono::steady_clock::now();

  for (long step = 0; step < cfg.total_steps; ++step) {
    const double lr = cfg.learning_rate_at(step);
    opt.set_learning_rate(lr);
    const Tensor<T> batch = detail::sample_batch<T>(data, cfg.batch_size, rng);
    const Tensor<T> z = model.encoder().forward(batch);
    const Tensor<T> noise = detail::gaussian_like<T>(z.shape(), sigma, rng);
    grads.zero();
    const double loss = denoiser_train_pass(net, z, noise, grads);
    if (!std::isfinite(loss)) {
      throw NumericError("train_denoiser: non-finite loss at step " + std::to_string(step));
    }
    opt.step(grads);
    model.metadata().denoiser_steps = step + 1;
    if (history) history->losses.push_back(loss);
    detail::emit_log(cfg, hooks, step, loss, lr, start, "denoiser");
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) save_bundle(model, cfg.checkpoint_path);
  }
}

}  // namespace jscc
