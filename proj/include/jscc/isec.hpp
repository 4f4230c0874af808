#pragma once

// Iterative source error correction: gradient ascent on a modified posterior
// over the codeword, starting from the received codeword y,
//
//   z_{t+1} = z_t + eta' * ( grad_z l_t + alpha' * d_t ),
//   l_t     = -(1 / 2 sigma^2) || y - E(D(z_t)) ||^2,
//   d_t     = denoiser prior direction at z_t,
//
// with alpha', eta' rescaled from (alpha, eta, delta) by the ratio between the
// test and training noise variances.

#include <cmath>
#include <concepts>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "jscc/channel.hpp"
#include "jscc/error.hpp"
#include "jscc/metrics.hpp"
#include "jscc/models.hpp"
#include "jscc/tensor.hpp"

namespace jscc {

struct IsecConfig {
  double alpha = 1.0;
  double eta = 0.002;
  double delta = 1.0;
  int steps = 50;  ///< T
  double sigma = 1.0;
  double sigma_train = 1.0;
  /// When false the prior term is dropped entirely and the denoiser is
  /// never evaluated.
  bool use_denoiser = true;

  void validate() const {
    if (steps < 0) throw ConfigError("ISEC T must be >= 0");
    if (!(alpha >= 0.0)) throw ConfigError("ISEC alpha must be >= 0");
    if (!(eta > 0.0)) throw ConfigError("ISEC eta must be > 0");
    if (!(delta >= 0.0)) throw ConfigError("ISEC delta must be >= 0");
    if (!(sigma > 0.0) || !(sigma_train > 0.0)) throw ConfigError("ISEC sigma and sigma_train must be > 0");
  }
};

/// max(0.1, (sigma^2 / sigma_train^2)^delta'), delta' = delta below the
/// training variance and 1 otherwise.
inline double h_scale(double sigma, double sigma_train, double delta) {
  const double ratio = (sigma * sigma) / (sigma_train * sigma_train);
  const double exponent = (sigma * sigma < sigma_train * sigma_train) ? delta : 1.0;
  return std::max(0.1, std::pow(ratio, exponent));
}

struct ScaledHyperparams {
  double alpha_prime = 0.0;
  double eta_prime = 0.0;
};

/// alpha' = alpha * h(sigma, sigma_train, 2);  eta' = eta / h(sigma, sigma_train, delta).
inline ScaledHyperparams scale_hyperparams(const IsecConfig& c) {
  c.validate();
  return {c.alpha * h_scale(c.sigma, c.sigma_train, 2.0), c.eta / h_scale(c.sigma, c.sigma_train, c.delta)};
}

/// What the iterative decoder needs from a model: the decoder, the
/// pull-back of the re-encoding residual, and a prior direction in codeword
/// space. ModelBundle satisfies it; tests plug in analytic stubs.
template <typename M>
concept IsecModel = requires(const M& m, const Tensor<typename M::scalar_type>& z) {
  typename M::scalar_type;
  { m.decode(z) } -> std::convertible_to<Tensor<typename M::scalar_type>>;
  { m.pullback_residual(z, z) } -> std::convertible_to<Pullback<typename M::scalar_type>>;
  { m.prior_direction(z) } -> std::convertible_to<Tensor<typename M::scalar_type>>;
};

template <typename T>
struct NllGrad {
  Tensor<T> grad;            ///< grad_z l = +(1/sigma^2) J^T (y - E(D(z)))
  std::vector<double> nll;   ///< per item (1/2 sigma^2) ||y - E(D(z))||^2
  Tensor<T> decoded;         ///< D(z), a by-product of the forward pass

  double total() const {
    double s = 0.0;
    for (double v : nll) s += v;
    return s;
  }
};

template <IsecModel M>
NllGrad<typename M::scalar_type> nll_grad(const M& model, const Tensor<typename M::scalar_type>& z,
                                          const Tensor<typename M::scalar_type>& y, double sigma) {
  using T = typename M::scalar_type;
  if (z.shape() != y.shape()) throw ConfigError("nll_grad: z " + z.shape().str() + " vs y " + y.shape().str());
  auto pb = model.pullback_residual(z, y);
  if (!pb.residual.all_finite() || !pb.pulled_back.all_finite()) {
    throw NumericError("nll_grad: non-finite activations in the re-encoding loop");
  }
  NllGrad<T> out;
  const double inv_var = 1.0 / (sigma * sigma);
  out.grad = std::move(pb.pulled_back);
  out.grad *= T(inv_var);
  for (int n = 0; n < z.batch(); ++n) out.nll.push_back(0.5 * inv_var * squared_norm(pb.residual.item(n)));
  out.decoded = std::move(pb.decoded);
  return out;
}

struct IsecStep {
  int t = 0;
  double nll = 0.0;            ///< (1/2 sigma^2) ||y - E(D(z_t))||^2
  double prior_norm_sq = 0.0;  ///< ||F(z_t)||^2, NaN when the denoiser is disabled
  double psnr = std::numeric_limits<double>::quiet_NaN();
};

template <typename T>
struct IsecTrace {
  std::vector<IsecStep> steps;  ///< t = 0..T (T+1 rows) unless the run failed
  Tensor<T> final_z;            ///< z_T (last finite iterate on failure), batch of one
  bool failed = false;
  int failed_at = -1;           ///< first step whose update produced non-finite values
};

template <typename T>
struct IsecResult {
  Tensor<T> images;  ///< D(z_T) for every item
  std::vector<IsecTrace<T>> traces;
  ScaledHyperparams scaled;

  bool any_failed() const {
    for (const auto& t : traces)
      if (t.failed) return true;
    return false;
  }
};

/// Runs T iterations on every item of the batch `y` independently. With T = 0
/// the output is exactly the one-shot reconstruction D(y). A non-finite
/// iterate stops that item (flagged in its trace); the other items continue.
template <IsecModel M>
IsecResult<typename M::scalar_type> isec_decode(const M& model, const Tensor<typename M::scalar_type>& y,
                                                const IsecConfig& config,
                                                const Tensor<typename M::scalar_type>* ground_truth = nullptr) {
  using T = typename M::scalar_type;
  config.validate();
  const auto scaled = scale_hyperparams(config);
  const int batch = y.batch();
  const double inv_var = 1.0 / (config.sigma * config.sigma);
  const bool need_prior = config.use_denoiser;

  IsecResult<T> result;
  result.scaled = scaled;
  result.traces.resize(std::size_t(batch));
  std::vector<bool> active(std::size_t(batch), true);
  Tensor<T> z = y;
  Tensor<T> images;

  for (int t = 0;; ++t) {
    auto pb = model.pullback_residual(z, y);
    Tensor<T> dir;
    if (need_prior) dir = model.prior_direction(z);
    for (int n = 0; n < batch; ++n) {
      if (!active[n]) continue;
      IsecStep s;
      s.t = t;
      s.nll = 0.5 * inv_var * squared_norm(pb.residual.item(n));
      s.prior_norm_sq = need_prior ? squared_norm(dir.item(n)) : std::numeric_limits<double>::quiet_NaN();
      if (ground_truth) {
        s.psnr = psnr(ground_truth->slice(n), pb.decoded.slice(n));
      }
      result.traces[n].steps.push_back(s);
    }
    if (t == 0) images = pb.decoded;
    for (int n = 0; n < batch; ++n) {
      if (active[n]) images.set_item(n, pb.decoded.item(n));
    }
    if (t == config.steps) break;

    for (int n = 0; n < batch; ++n) {
      if (!active[n]) continue;
      auto zi = z.item(n);
      auto gi = pb.pulled_back.item(n);
      std::vector<T> next(zi.begin(), zi.end());
      bool finite = true;
      for (std::size_t i = 0; i < next.size(); ++i) {
        double step = inv_var * double(gi[i]);
        if (need_prior) step += scaled.alpha_prime * double(dir.item(n)[i]);
        next[i] = T(double(next[i]) + scaled.eta_prime * step);
        finite = finite && std::isfinite(next[i]);
      }
      if (!finite) {
        active[n] = false;
        result.traces[n].failed = true;
        result.traces[n].failed_at = t + 1;
        continue;
      }
      std::copy(next.begin(), next.end(), zi.begin());
    }
    bool any = false;
    for (bool a : active) any = any || a;
    if (!any) break;
  }
  for (int n = 0; n < batch; ++n) result.traces[n].final_z = z.slice(n);
  result.images = std::move(images);
  return result;
}

// ---------------------------------------------------------------------------
// Default hyperparameter tables

enum class ParamTable { cifar, kodak };

inline ParamTable parse_param_table(const std::string& s) {
  if (s == "cifar" || s == "tiny") return ParamTable::cifar;
  if (s == "kodak" || s == "openimages") return ParamTable::kodak;
  throw ConfigError("unknown ISEC parameter table '" + s + "' (expected cifar or kodak)");
}

inline std::string supported_default_keys() {
  return "cifar: any cpp, snr_train in {0, 5, 10} dB; "
         "kodak: cpp in {1/6, 1/16}, snr_train in {1, 7, 13} dB";
}

/// The published ISEC settings for a (table, cpp, training SNR, test SNR)
/// tuple, with T = 50. sigma/sigma_train are filled from the SNRs.
inline IsecConfig default_params(ParamTable table, Rational cpp, double snr_train_db, double snr_test_db) {
  auto near = [](double a, double b) { return std::abs(a - b) < 1e-9; };
  IsecConfig c;
  c.steps = 50;
  c.sigma = sigma_from_snr(snr_test_db);
  c.sigma_train = sigma_from_snr(snr_train_db);
  auto unsupported = [&]() {
    std::ostringstream os;
    os << "no default ISEC parameters for (" << (table == ParamTable::cifar ? "cifar" : "kodak") << ", "
       << cpp.str() << ", " << snr_train_db << " dB); supported: " << supported_default_keys();
    return ConfigError(os.str());
  };
  if (table == ParamTable::cifar) {
    c.alpha = 1.0;
    c.delta = 1.0;
    if (near(snr_train_db, 0)) c.eta = 0.004;
    else if (near(snr_train_db, 5)) c.eta = 0.002;
    else if (near(snr_train_db, 10)) c.eta = 0.001;
    else throw unsupported();
    return c;
  }
  const bool sixth = cpp == Rational{1, 6};
  const bool sixteenth = cpp == Rational{1, 16};
  if (!sixth && !sixteenth) throw unsupported();
  if (near(snr_train_db, 1)) {
    c.alpha = 2.0;
    std::tie(c.delta, c.eta) = sixth ? std::pair{0.5, 0.001} : std::pair{0.0, 0.001};
  } else if (near(snr_train_db, 7)) {
    c.alpha = 4.0;
    std::tie(c.delta, c.eta) = sixth ? std::pair{1.0, 0.001} : std::pair{0.0, 0.0005};
  } else if (near(snr_train_db, 13)) {
    c.alpha = 4.0;
    c.delta = 2.0;
    c.eta = 0.005;
    if (near(snr_test_db, 16) || near(snr_test_db, 19)) c.eta = 0.001;
  } else {
    throw unsupported();
  }
  return c;
}

}  // namespace jscc
