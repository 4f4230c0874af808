#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "jscc/codeword.hpp"
#include "jscc/error.hpp"
#include "jscc/rng.hpp"

namespace jscc {

/// Exact positive rational, used for channel-per-pixel ratios such as 1/6.
struct Rational {
  std::int64_t num = 1;
  std::int64_t den = 1;

  double value() const { return double(num) / double(den); }
  Rational reduced() const {
    auto g = std::gcd(num, den);
    return {num / g, den / g};
  }
  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }

  /// Parses "1/6", "0.5" is rejected; integers are accepted as n/1.
  static Rational parse(const std::string& text) {
    auto slash = text.find('/');
    try {
      std::size_t used = 0;
      if (slash == std::string::npos) {
        auto n = std::stoll(text, &used);
        if (used != text.size() || n <= 0) throw std::invalid_argument(text);
        return {n, 1};
      }
      auto n = std::stoll(text.substr(0, slash), &used);
      if (used != slash) throw std::invalid_argument(text);
      auto d = std::stoll(text.substr(slash + 1), &used);
      if (used != text.size() - slash - 1 || n <= 0 || d <= 0) throw std::invalid_argument(text);
      return Rational{n, d}.reduced();
    } catch (const std::logic_error&) {
      throw ConfigError("invalid rational '" + text + "', expected a form like 1/6");
    }
  }

  friend bool operator==(const Rational& a, const Rational& b) { return a.num * b.den == b.num * a.den; }
};

enum class NoiseFamily { gaussian, laplace };

inline std::string to_string(NoiseFamily f) { return f == NoiseFamily::gaussian ? "gaussian" : "laplace"; }

inline NoiseFamily parse_noise_family(const std::string& s) {
  if (s == "gaussian" || s == "awgn") return NoiseFamily::gaussian;
  if (s == "laplace" || s == "awln") return NoiseFamily::laplace;
  throw ConfigError("unknown noise family '" + s + "' (expected gaussian or laplace)");
}

/// Additive noise channel. `sigma` is the per-dimension standard deviation for
/// both families; the Laplace scale is derived from it.
struct ChannelSpec {
  NoiseFamily family = NoiseFamily::gaussian;
  double sigma = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) {
      throw ConfigError("channel sigma must be positive, got " + std::to_string(sigma));
    }
  }

  /// Laplace scale b with 2 b^2 = sigma^2.
  double laplace_scale() const { return sigma / std::sqrt(2.0); }
};

/// Source/codeword dimension bookkeeping: cpp = k / (2 n).
struct RateSpec {
  std::int64_t input_dim = 0;
  std::int64_t codeword_dim = 0;
  Rational cpp{};

  static RateSpec from_cpp(std::int64_t input_dim, Rational cpp) {
    auto twice_num = 2 * input_dim * cpp.num;
    if (twice_num % cpp.den != 0) {
      throw ConfigError("cpp " + cpp.str() + " gives a non-integer codeword dimension for n=" +
                        std::to_string(input_dim));
    }
    RateSpec r{input_dim, twice_num / cpp.den, cpp.reduced()};
    r.validate();
    return r;
  }

  void validate() const {
    if (input_dim <= 0 || codeword_dim <= 0) throw ConfigError("rate dimensions must be positive");
    if (codeword_dim >= input_dim) {
      throw ConfigError("codeword dimension k=" + std::to_string(codeword_dim) +
                        " must be smaller than n=" + std::to_string(input_dim));
    }
    if (codeword_dim * cpp.den != 2 * input_dim * cpp.num) {
      throw ConfigError("cpp " + cpp.str() + " != k/(2n) for k=" + std::to_string(codeword_dim) +
                        ", n=" + std::to_string(input_dim));
    }
  }
};

/// Noise standard deviation giving `snr_db` against a full-power codeword
/// (||z||^2 = k).
inline double sigma_from_snr(double snr_db, const RateSpec& rate) {
  rate.validate();
  return std::pow(10.0, -snr_db / 20.0);
}

inline double sigma_from_snr(double snr_db) { return std::pow(10.0, -snr_db / 20.0); }

inline double snr_from_sigma(double sigma) { return -20.0 * std::log10(sigma); }

/// 10 log10(||z||^2 / ||n||^2). Returns -inf for an all-zero codeword.
template <typename T, typename U>
double measure_snr_db(std::span<const T> codeword, std::span<const U> noise) {
  if (codeword.size() != noise.size()) {
    throw ConfigError("codeword and noise dimensions differ: " + std::to_string(codeword.size()) +
                      " vs " + std::to_string(noise.size()));
  }
  double signal = 0.0, noise_energy = 0.0;
  for (std::size_t i = 0; i < codeword.size(); ++i) {
    signal += double(codeword[i]) * double(codeword[i]);
    noise_energy += double(noise[i]) * double(noise[i]);
  }
  if (noise_energy == 0.0) throw NumericError("measure_snr_db: noise energy is zero");
  if (signal == 0.0) return -std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(signal / noise_energy);
}

template <typename T, typename U>
double measure_snr_db(const std::vector<T>& codeword, const std::vector<U>& noise) {
  return measure_snr_db(std::span<const T>(codeword), std::span<const U>(noise));
}

/// Draws `dim` i.i.d. zero-mean noise samples with variance sigma^2 from `rng`.
inline std::vector<double> sample_noise(const ChannelSpec& spec, std::size_t dim, Rng& rng) {
  spec.validate();
  std::vector<double> out(dim);
  if (spec.family == NoiseFamily::gaussian) {
    for (auto& v : out) v = spec.sigma * rng.normal();
  } else {
    const double b = spec.laplace_scale();
    for (auto& v : out) {
      double u = 0.0;
      do {
        u = rng.uniform() - 0.5;
      } while (u == -0.5);
      v = -b * std::copysign(1.0, u) * std::log1p(-2.0 * std::abs(u));
    }
  }
  return out;
}

/// Fresh stream seeded from the spec: two calls with the same spec agree.
inline std::vector<double> sample_noise(const ChannelSpec& spec, std::size_t dim) {
  Rng rng(spec.seed);
  return sample_noise(spec, dim, rng);
}

/// y = z + n for every item of the batch; the result is not power-bounded.
template <typename T>
Codeword<T> transmit(const Codeword<T>& z, const ChannelSpec& spec, Rng& rng) {
  auto noise = sample_noise(spec, z.values.size(), rng);
  Codeword<T> y{z.values, false};
  for (std::size_t i = 0; i < noise.size(); ++i) y.values[i] += static_cast<T>(noise[i]);
  return y;
}

template <typename T>
Codeword<T> transmit(const Codeword<T>& z, const ChannelSpec& spec) {
  Rng rng(spec.seed);
  return transmit(z, spec, rng);
}

}  // namespace jscc
