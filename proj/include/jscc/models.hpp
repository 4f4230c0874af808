#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "jscc/channel.hpp"
#include "jscc/codeword.hpp"
#include "jscc/error.hpp"
#include "jscc/nn/layers.hpp"
#include "jscc/rng.hpp"
#include "jscc/tensor.hpp"

namespace jscc {

enum class Variant { cifar, openimages, tiny };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::cifar: return "cifar";
    case Variant::openimages: return "openimages";
    case Variant::tiny: return "tiny";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "cifar") return Variant::cifar;
  if (s == "openimages" || s == "kodak") return Variant::openimages;
  if (s == "tiny") return Variant::tiny;
  throw ConfigError("unknown model variant '" + s + "' (expected cifar, openimages or tiny)");
}

enum class StageKind { conv_bn_prelu, conv_bn, conv_bn_tanh, residual, upsample };

struct Stage {
  StageKind kind = StageKind::conv_bn_prelu;
  int kernel = 3;
  int stride = 1;
  /// Output channels; 0 for upsampling stages.
  int channels = 0;
};

/// Input shape (C, H, W) of the source images.
struct ImageShape {
  int channels = 3;
  int height = 32;
  int width = 32;

  std::int64_t size() const { return std::int64_t(channels) * height * width; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

struct EncoderConfig {
  Variant variant = Variant::cifar;
  ImageShape input_shape;
  std::vector<Stage> stages;
  int codeword_channels = 0;
};

struct DecoderConfig {
  Variant variant = Variant::cifar;
  int codeword_channels = 0;
  std::vector<Stage> stages;
};

/// Paired encoder/decoder layout for one (variant, input shape, cpp).
struct AutoencoderConfig {
  Variant variant = Variant::cifar;
  ImageShape input_shape;
  Rational cpp{1, 6};
  int codeword_channels = 0;
  EncoderConfig encoder;
  DecoderConfig decoder;

  RateSpec rate() const { return RateSpec::from_cpp(input_shape.size(), cpp); }
  /// (1, k / (H/4 * W/4), H/4, W/4)
  Shape codeword_shape() const {
    return {1, codeword_channels, input_shape.height / 4, input_shape.width / 4};
  }
  std::int64_t codeword_dim() const { return codeword_shape().item_size(); }
};

struct DenoiserConfig {
  /// Number of convolution layers (first conv/ReLU, depth-2 conv/norm/ReLU
  /// blocks, final conv).
  int depth = 20;
  int kernel = 3;
  int hidden_channels = 64;
  int codeword_channels = 0;
  bool bias_free = true;
};

/// Codeword channels for a 4x-per-side downsampling encoder: 2 * cpp * C * 16.
inline int codeword_channels_for(const ImageShape& input, Rational cpp) {
  const std::int64_t num = 2 * cpp.num * input.channels * 16;
  if (num % cpp.den != 0) {
    throw ConfigError("cpp " + cpp.str() + " does not give an integer number of codeword channels");
  }
  return int(num / cpp.den);
}

namespace detail {

inline Stage conv_bn_prelu(int k, int s, int c) { return {StageKind::conv_bn_prelu, k, s, c}; }
inline Stage residual(int k, int c) { return {StageKind::residual, k, 1, c}; }
inline Stage upsample() { return {StageKind::upsample, 0, 2, 0}; }

/// Table-1 topology with configurable widths (c1 at full resolution, c2 at
/// half, c3 at quarter).
inline AutoencoderConfig cifar_layout(Variant variant, int c1, int c2, int c3, Rational cpp) {
  AutoencoderConfig cfg;
  cfg.variant = variant;
  cfg.input_shape = {3, 32, 32};
  cfg.cpp = cpp.reduced();
  cfg.codeword_channels = codeword_channels_for(cfg.input_shape, cpp);
  const int kc = cfg.codeword_channels;
  cfg.encoder = {variant, cfg.input_shape,
                 {conv_bn_prelu(7, 1, c1), conv_bn_prelu(5, 2, c2), residual(3, c2), conv_bn_prelu(5, 2, c3),
                  residual(3, c3), residual(3, c3), residual(3, c3), residual(3, kc)},
                 kc};
  cfg.decoder = {variant, kc,
                 {conv_bn_prelu(3, 1, c3), residual(3, c3), residual(3, c3), upsample(), conv_bn_prelu(3, 1, c2),
                  residual(3, c2), upsample(), conv_bn_prelu(3, 1, c1), residual(3, c1),
                  {StageKind::conv_bn_tanh, 5, 1, 3}}};
  return cfg;
}

}  // namespace detail

/// CIFAR-10 layout (32x32 input, codeword (k/64, 8, 8)).
inline AutoencoderConfig cifar_config(Rational cpp) { return detail::cifar_layout(Variant::cifar, 32, 64, 128, cpp); }

/// CIFAR topology with reduced widths, for desk-scale training and CI.
inline AutoencoderConfig tiny_config(Rational cpp) { return detail::cifar_layout(Variant::tiny, 16, 32, 32, cpp); }

/// High-resolution layout (H x W input, codeword (16k/HW, H/4, W/4)).
inline AutoencoderConfig openimages_config(Rational cpp, int height = 128, int width = 128) {
  using namespace detail;
  if (height % 4 != 0 || width % 4 != 0) throw ConfigError("openimages input must be a multiple of 4 per side");
  AutoencoderConfig cfg;
  cfg.variant = Variant::openimages;
  cfg.input_shape = {3, height, width};
  cfg.cpp = cpp.reduced();
  cfg.codeword_channels = codeword_channels_for(cfg.input_shape, cpp);
  const int kc = cfg.codeword_channels;
  cfg.encoder = {Variant::openimages, cfg.input_shape,
                 {conv_bn_prelu(7, 2, 128), conv_bn_prelu(5, 2, 128), residual(5, 128), residual(5, 128),
                  residual(5, 128), {StageKind::conv_bn, 5, 1, kc}},
                 kc};
  cfg.decoder = {Variant::openimages, kc,
                 {conv_bn_prelu(5, 1, 128), residual(5, 128), residual(5, 128), upsample(),
                  conv_bn_prelu(5, 1, 128), residual(5, 128), upsample(), {StageKind::conv_bn_tanh, 7, 1, 3}}};
  return cfg;
}

inline AutoencoderConfig make_config(Variant v, Rational cpp, int height = 0, int width = 0) {
  switch (v) {
    case Variant::cifar: return cifar_config(cpp);
    case Variant::tiny: return tiny_config(cpp);
    case Variant::openimages: return openimages_config(cpp, height > 0 ? height : 128, width > 0 ? width : 128);
  }
  throw ConfigError("unknown variant");
}

inline DenoiserConfig published_denoiser_config(int codeword_channels) { return {20, 3, 64, codeword_channels, true}; }
inline DenoiserConfig tiny_denoiser_config(int codeword_channels) { return {10, 3, 32, codeword_channels, true}; }

// ---------------------------------------------------------------------------
// Elementwise building blocks

/// u if u >= 0 else rho * u.
template <typename T>
Tensor<T> prelu(const Tensor<T>& u, T rho) {
  if (rho < T(0)) throw ConfigError("PReLU slope must be non-negative");
  Tensor<T> out(u.shape());
  for (std::size_t i = 0; i < u.size(); ++i) out[i] = u[i] >= T(0) ? u[i] : rho * u[i];
  return out;
}

/// Projects every batch item onto ||v||^2 <= k (identity on the boundary).
template <typename T>
Codeword<T> power_normalize(const Tensor<T>& v, std::int64_t k) {
  if (std::int64_t(v.shape().item_size()) != k) {
    throw ConfigError("power_normalize: item has " + std::to_string(v.shape().item_size()) +
                      " elements, expected k=" + std::to_string(k));
  }
  return {nn::PowerNorm<T>{}.forward(v, nullptr), true};
}

// ---------------------------------------------------------------------------
// Networks

/// Owns a layer stack plus flat views of its parameters and buffers.
template <typename T>
class Network {
 public:
  Network() = default;
  Network(std::unique_ptr<nn::Sequential<T>> body, const std::string& prefix) : body_(std::move(body)) {
    body_->collect(prefix, params_, buffers_);
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i]->slot = i;
  }

  explicit operator bool() const { return bool(body_); }

  Tensor<T> forward(const Tensor<T>& x, nn::Tape<T>* tape = nullptr) const { return body_->forward(x, tape); }
  Tensor<T> forward_train(const Tensor<T>& x, nn::Tape<T>& tape) { return body_->forward_train(x, tape); }
  Tensor<T> backward(const Tensor<T>& g, nn::Tape<T>& tape, nn::Gradients<T>* grads) const {
    return body_->backward(g, tape, grads);
  }
  Shape output_shape(Shape in) const { return body_->output_shape(in); }
  void project() { body_->project(); }

  const std::vector<nn::Param<T>*>& params() const { return params_; }
  const std::vector<nn::Buffer<T>*>& buffers() const { return buffers_; }
  nn::Gradients<T> make_gradients() const { return nn::Gradients<T>(params_); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto* p : params_) n += p->value.size();
    return n;
  }

  /// Every named array (parameters then buffers) in a stable order.
  std::vector<std::pair<std::string, const Tensor<T>*>> named_arrays() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for (auto* p : params_) out.emplace_back(p->name, &p->value);
    for (auto* b : buffers_) out.emplace_back(b->name, &b->value);
    return out;
  }
  std::vector<std::pair<std::string, Tensor<T>*>> named_arrays() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto* p : params_) out.emplace_back(p->name, &p->value);
    for (auto* b : buffers_) out.emplace_back(b->name, &b->value);
    return out;
  }

  void copy_values_from(const Network& other) {
    auto dst = named_arrays();
    auto src = other.named_arrays();
    if (dst.size() != src.size()) throw ConfigError("network layouts differ");
    for (std::size_t i = 0; i < dst.size(); ++i) *dst[i].second = *src[i].second;
  }

 private:
  std::unique_ptr<nn::Sequential<T>> body_;
  std::vector<nn::Param<T>*> params_;
  std::vector<nn::Buffer<T>*> buffers_;
};

namespace detail {

template <typename T>
std::unique_ptr<nn::Sequential<T>> build_stages(const std::vector<Stage>& stages, int in_channels, Rng& rng) {
  auto seq = std::make_unique<nn::Sequential<T>>();
  int c = in_channels;
  for (const auto& s : stages) {
    switch (s.kind) {
      case StageKind::conv_bn_prelu:
      case StageKind::conv_bn:
      case StageKind::conv_bn_tanh: {
        auto block = std::make_unique<nn::Sequential<T>>();
        block->template emplace<nn::Conv2d<T>>(c, s.channels, s.kernel, s.stride, true, rng);
        block->template emplace<nn::BatchNorm2d<T>>(s.channels);
        if (s.kind == StageKind::conv_bn_prelu) block->template emplace<nn::PReLU<T>>();
        if (s.kind == StageKind::conv_bn_tanh) block->template emplace<nn::Tanh<T>>();
        seq->add(std::move(block));
        c = s.channels;
        break;
      }
      case StageKind::residual:
        seq->template emplace<nn::Residual<T>>(c, s.channels, s.kernel, rng);
        c = s.channels;
        break;
      case StageKind::upsample:
        seq->template emplace<nn::Upsample2x<T>>();
        break;
    }
  }
  return seq;
}

}  // namespace detail

template <typename T>
Network<T> build_encoder(const EncoderConfig& cfg, Rng& rng) {
  auto seq = detail::build_stages<T>(cfg.stages, cfg.input_shape.channels, rng);
  seq->template emplace<nn::PowerNorm<T>>();
  Network<T> net(std::move(seq), "encoder.");
  const Shape out = net.output_shape({1, cfg.input_shape.channels, cfg.input_shape.height, cfg.input_shape.width});
  if (out.c != cfg.codeword_channels) {
    throw ConfigError("encoder stages end with " + std::to_string(out.c) + " channels, expected " +
                      std::to_string(cfg.codeword_channels));
  }
  return net;
}

template <typename T>
Network<T> build_decoder(const DecoderConfig& cfg, Rng& rng) {
  return Network<T>(detail::build_stages<T>(cfg.stages, cfg.codeword_channels, rng), "decoder.");
}

/// Bias-free convolutional denoiser: conv/ReLU, (depth-2) x conv/scale-norm/ReLU,
/// conv. Output has the input's shape.
template <typename T>
Network<T> build_denoiser(const DenoiserConfig& cfg, Rng& rng) {
  if (cfg.depth < 2) throw ConfigError("denoiser depth must be at least 2");
  if (!cfg.bias_free) throw ConfigError("only bias-free denoisers are supported");
  auto seq = std::make_unique<nn::Sequential<T>>();
  seq->template emplace<nn::Conv2d<T>>(cfg.codeword_channels, cfg.hidden_channels, cfg.kernel, 1, false, rng);
  seq->template emplace<nn::ReLU<T>>();
  for (int i = 0; i < cfg.depth - 2; ++i) {
    auto block = std::make_unique<nn::Sequential<T>>();
    block->template emplace<nn::Conv2d<T>>(cfg.hidden_channels, cfg.hidden_channels, cfg.kernel, 1, false, rng);
    block->template emplace<nn::ScaleNorm2d<T>>(cfg.hidden_channels, &rng);
    block->template emplace<nn::ReLU<T>>();
    seq->add(std::move(block));
  }
  seq->template emplace<nn::Conv2d<T>>(cfg.hidden_channels, cfg.codeword_channels, cfg.kernel, 1, false, rng);
  return Network<T>(std::move(seq), "denoiser.");
}

// ---------------------------------------------------------------------------
// Bundle

struct BundleMetadata {
  double snr_train_db = 5.0;
  long jscc_steps = 0;
  long denoiser_steps = 0;
  std::uint64_t seed = 0;
  std::string init = "conv: uniform(+-1/sqrt(fan_in)); prelu rho=0.25; batch-norm gamma=1; scale-norm gamma ~ N(0, (2/576)^2) clipped to 0.025";

  double sigma_train() const { return sigma_from_snr(snr_train_db); }
};

/// Result of differentiating the re-encoding loop z -> E(D(z)) against an
/// observation y.
template <typename T>
struct Pullback {
  Tensor<T> decoded;      ///< D(z)
  Tensor<T> residual;     ///< y - E(D(z))
  Tensor<T> pulled_back;  ///< J^T (y - E(D(z))), J the Jacobian of E o D at z
};

/// The trained triple (encoder, decoder, optional denoiser) plus metadata.
template <typename T>
class ModelBundle {
 public:
  using scalar_type = T;

  ModelBundle() = default;

  static ModelBundle create(const AutoencoderConfig& config, const DenoiserConfig& denoiser_config,
                            double snr_train_db, std::uint64_t seed) {
    ModelBundle b;
    b.config_ = config;
    b.denoiser_config_ = denoiser_config;
    b.denoiser_config_.codeword_channels = config.codeword_channels;
    b.meta_.snr_train_db = snr_train_db;
    b.meta_.seed = seed;
    Rng rng(seed, {0x656e63});
    b.encoder_ = build_encoder<T>(config.encoder, rng);
    Rng drng(seed, {0x646563});
    b.decoder_ = build_decoder<T>(config.decoder, drng);
    return b;
  }

  const AutoencoderConfig& config() const { return config_; }
  const DenoiserConfig& denoiser_config() const { return denoiser_config_; }
  BundleMetadata& metadata() { return meta_; }
  const BundleMetadata& metadata() const { return meta_; }
  double sigma_train() const { return meta_.sigma_train(); }
  std::int64_t codeword_dim() const { return config_.codeword_dim(); }

  Network<T>& encoder() { return encoder_; }
  const Network<T>& encoder() const { return encoder_; }
  Network<T>& decoder() { return decoder_; }
  const Network<T>& decoder() const { return decoder_; }

  bool has_denoiser() const { return denoiser_.has_value(); }
  Network<T>& denoiser() {
    if (!denoiser_) throw ConfigError("model bundle has no trained denoiser");
    return *denoiser_;
  }
  const Network<T>& denoiser() const {
    if (!denoiser_) throw ConfigError("model bundle has no trained denoiser");
    return *denoiser_;
  }
  /// Changes the denoiser layout used by the next init_denoiser().
  void set_denoiser_config(const DenoiserConfig& c) {
    denoiser_config_ = c;
    denoiser_config_.codeword_channels = config_.codeword_channels;
  }
  /// Creates a freshly initialized denoiser (replacing any existing one).
  Network<T>& init_denoiser(std::uint64_t seed) {
    Rng rng(seed, {0x64656e});
    denoiser_ = build_denoiser<T>(denoiser_config_, rng);
    return *denoiser_;
  }
  void set_denoiser(Network<T> net) { denoiser_ = std::move(net); }

  // -- shape checks ---------------------------------------------------------

  void check_image(const Tensor<T>& x) const {
    const auto& in = config_.input_shape;
    const Shape s = x.shape();
    bool ok = s.c == in.channels;
    if (config_.variant == Variant::openimages) {
      ok = ok && s.h % 4 == 0 && s.w % 4 == 0 && s.h > 0 && s.w > 0;
    } else {
      ok = ok && s.h == in.height && s.w == in.width;
    }
    if (!ok || s.n < 1) {
      throw ConfigError("image shape " + s.str() + " does not fit the " + to_string(config_.variant) +
                        " model (expects (N, " + std::to_string(in.channels) + ", " + std::to_string(in.height) +
                        ", " + std::to_string(in.width) + "))");
    }
  }

  void check_codeword(const Tensor<T>& z) const {
    const Shape s = z.shape();
    const Shape expect = config_.codeword_shape();
    bool ok = s.c == expect.c && s.n >= 1;
    if (config_.variant != Variant::openimages) ok = ok && s.h == expect.h && s.w == expect.w;
    if (!ok) {
      throw ConfigError("codeword shape " + s.str() + " does not fit the model (expects (N, " +
                        std::to_string(expect.c) + ", " + std::to_string(expect.h) + ", " +
                        std::to_string(expect.w) + "))");
    }
  }

  // -- inference ------------------------------------------------------------

  Codeword<T> encode(const Tensor<T>& x) const {
    check_image(x);
    return {encoder_.forward(x), true};
  }

  Tensor<T> decode(const Tensor<T>& z) const {
    check_codeword(z);
    return decoder_.forward(z);
  }

  /// Raw denoiser output: the predicted channel-noise instance.
  Tensor<T> noise_prediction(const Tensor<T>& z) const {
    check_codeword(z);
    return denoiser().forward(z);
  }

  /// Estimated (clean - observed) direction, i.e. the negated noise
  /// prediction; proportional to the score of the codeword density.
  Tensor<T> prior_direction(const Tensor<T>& z) const {
    Tensor<T> d = noise_prediction(z);
    d *= T(-1);
    return d;
  }

  Pullback<T> pullback_residual(const Tensor<T>& z, const Tensor<T>& y) const {
    check_codeword(z);
    nn::Tape<T> tape;
    Pullback<T> out;
    out.decoded = decoder_.forward(z, &tape);
    Tensor<T> e = encoder_.forward(out.decoded, &tape);
    out.residual = y - e;
    Tensor<T> g = encoder_.backward(out.residual, tape, nullptr);
    out.pulled_back = decoder_.backward(g, tape, nullptr);
    return out;
  }

 private:
  AutoencoderConfig config_;
  DenoiserConfig denoiser_config_;
  BundleMetadata meta_;
  Network<T> encoder_;
  Network<T> decoder_;
  std::optional<Network<T>> denoiser_;
};

template <typename T>
Codeword<T> encode(const ModelBundle<T>& model, const Tensor<T>& x) {
  return model.encode(x);
}
template <typename T>
Tensor<T> decode(const ModelBundle<T>& model, const Tensor<T>& z) {
  return model.decode(z);
}
template <typename T>
Tensor<T> decode(const ModelBundle<T>& model, const Codeword<T>& z) {
  return model.decode(z.values);
}
/// Denoiser output F(z) (noise prediction).
template <typename T>
Tensor<T> denoise(const ModelBundle<T>& model, const Tensor<T>& z) {
  return model.noise_prediction(z);
}

// ---------------------------------------------------------------------------
// JSON mapping (checkpoint manifests, experiment configs)

inline std::string to_string(StageKind k) {
  switch (k) {
    case StageKind::conv_bn_prelu: return "conv_bn_prelu";
    case StageKind::conv_bn: return "conv_bn";
    case StageKind::conv_bn_tanh: return "conv_bn_tanh";
    case StageKind::residual: return "residual";
    case StageKind::upsample: return "upsample";
  }
  return "?";
}

inline StageKind parse_stage_kind(const std::string& s) {
  for (auto k : {StageKind::conv_bn_prelu, StageKind::conv_bn, StageKind::conv_bn_tanh, StageKind::residual,
                 StageKind::upsample}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown stage kind '" + s + "'");
}

inline void to_json(nlohmann::json& j, const Stage& s) {
  j = {{"kind", to_string(s.kind)}, {"kernel", s.kernel}, {"stride", s.stride}, {"channels", s.channels}};
}
inline void from_json(const nlohmann::json& j, Stage& s) {
  s.kind = parse_stage_kind(j.at("kind").get<std::string>());
  s.kernel = j.at("kernel").get<int>();
  s.stride = j.at("stride").get<int>();
  s.channels = j.at("channels").get<int>();
}

inline void to_json(nlohmann::json& j, const AutoencoderConfig& c) {
  j = {{"variant", to_string(c.variant)},
       {"input_shape", {c.input_shape.channels, c.input_shape.height, c.input_shape.width}},
       {"cpp", c.cpp.str()},
       {"codeword_channels", c.codeword_channels},
       {"encoder_stages", c.encoder.stages},
       {"decoder_stages", c.decoder.stages}};
}
inline void from_json(const nlohmann::json& j, AutoencoderConfig& c) {
  c.variant = parse_variant(j.at("variant").get<std::string>());
  auto shape = j.at("input_shape").get<std::vector<int>>();
  if (shape.size() != 3) throw ConfigError("input_shape must have three entries (C, H, W)");
  c.input_shape = {shape[0], shape[1], shape[2]};
  c.cpp = Rational::parse(j.at("cpp").get<std::string>());
  c.codeword_channels = j.at("codeword_channels").get<int>();
  c.encoder = {c.variant, c.input_shape, j.at("encoder_stages").get<std::vector<Stage>>(), c.codeword_channels};
  c.decoder = {c.variant, c.codeword_channels, j.at("decoder_stages").get<std::vector<Stage>>()};
}

inline void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = {{"depth", c.depth},
       {"kernel", c.kernel},
       {"hidden_channels", c.hidden_channels},
       {"codeword_channels", c.codeword_channels},
       {"bias_free", c.bias_free}};
}
inline void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  c.depth = j.at("depth").get<int>();
  c.kernel = j.at("kernel").get<int>();
  c.hidden_channels = j.at("hidden_channels").get<int>();
  c.codeword_channels = j.at("codeword_channels").get<int>();
  c.bias_free = j.value("bias_free", true);
}

}  // namespace jscc
