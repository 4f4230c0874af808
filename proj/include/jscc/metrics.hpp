#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "jscc/error.hpp"
#include "jscc/tensor.hpp"

namespace jscc {

/// [-1, 1] -> {0..255}: clamp(round((p + 1) * 255 / 2), 0, 255).
inline double to_intensity(double p) {
  return std::clamp(std::round((p + 1.0) * 127.5), 0.0, 255.0);
}

namespace detail {

struct Plane {
  int h = 0, w = 0;
  std::vector<double> v;
  double& at(int y, int x) { return v[std::size_t(y) * w + x]; }
  double at(int y, int x) const { return v[std::size_t(y) * w + x]; }
};

template <typename T>
std::vector<Plane> intensity_planes(const Tensor<T>& img) {
  const Shape s = img.shape();
  std::vector<Plane> out;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      Plane p{s.h, s.w, std::vector<double>(s.plane())};
      const T* src = &img.at(n, c, 0, 0);
      for (std::size_t i = 0; i < p.v.size(); ++i) p.v[i] = to_intensity(double(src[i]));
      out.push_back(std::move(p));
    }
  }
  return out;
}

template <typename T>
void check_pair(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
}

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(size));
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    g[i] = std::exp(-d * d / (2 * sigma * sigma));
    sum += g[i];
  }
  for (auto& v : g) v /= sum;
  return g;
}

/// Separable "valid" filtering.
inline Plane filter_valid(const Plane& p, const std::vector<double>& g) {
  const int k = int(g.size());
  Plane rows{p.h, p.w - k + 1, std::vector<double>(std::size_t(p.h) * (p.w - k + 1))};
  for (int y = 0; y < rows.h; ++y)
    for (int x = 0; x < rows.w; ++x) {
      double acc = 0.0;
      for (int i = 0; i < k; ++i) acc += g[i] * p.at(y, x + i);
      rows.at(y, x) = acc;
    }
  Plane out{p.h - k + 1, rows.w, std::vector<double>(std::size_t(p.h - k + 1) * rows.w)};
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      double acc = 0.0;
      for (int i = 0; i < k; ++i) acc += g[i] * rows.at(y + i, x);
      out.at(y, x) = acc;
    }
  return out;
}

inline Plane product(const Plane& a, const Plane& b) {
  Plane out{a.h, a.w, std::vector<double>(a.v.size())};
  for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = a.v[i] * b.v[i];
  return out;
}

/// Means of the luminance and contrast-structure SSIM terms over one plane.
struct SsimTerms {
  double ssim = 0.0;
  double cs = 0.0;
};

struct SsimWindow {
  int size = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 255.0;
};

inline SsimTerms ssim_plane(const Plane& a, const Plane& b, const SsimWindow& win) {
  const auto g = gaussian_window(win.size, win.sigma);
  const double c1 = std::pow(win.k1 * win.dynamic_range, 2);
  const double c2 = std::pow(win.k2 * win.dynamic_range, 2);
  const Plane mu1 = filter_valid(a, g), mu2 = filter_valid(b, g);
  const Plane s11 = filter_valid(product(a, a), g);
  const Plane s22 = filter_valid(product(b, b), g);
  const Plane s12 = filter_valid(product(a, b), g);
  SsimTerms t;
  for (std::size_t i = 0; i < mu1.v.size(); ++i) {
    const double m1 = mu1.v[i], m2 = mu2.v[i];
    const double v1 = s11.v[i] - m1 * m1, v2 = s22.v[i] - m2 * m2, cov = s12.v[i] - m1 * m2;
    const double cs = (2 * cov + c2) / (v1 + v2 + c2);
    const double lum = (2 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
    t.ssim += lum * cs;
    t.cs += cs;
  }
  t.ssim /= double(mu1.v.size());
  t.cs /= double(mu1.v.size());
  return t;
}

inline Plane downsample2(const Plane& p) {
  Plane out{p.h / 2, p.w / 2, std::vector<double>(std::size_t(p.h / 2) * (p.w / 2))};
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x)
      out.at(y, x) = 0.25 * (p.at(2 * y, 2 * x) + p.at(2 * y + 1, 2 * x) + p.at(2 * y, 2 * x + 1) +
                             p.at(2 * y + 1, 2 * x + 1));
  return out;
}

}  // namespace detail

using SsimWindow = detail::SsimWindow;

/// 10 log10(255^2 / MSE) on the integer-remapped images; +inf when identical.
template <typename T>
double psnr(const Tensor<T>& x, const Tensor<T>& xhat) {
  detail::check_pair(x, xhat, "psnr");
  if (x.size() == 0) throw ConfigError("psnr: empty images");
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = to_intensity(double(x[i])) - to_intensity(double(xhat[i]));
    se += d * d;
  }
  const double mse = se / double(x.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

/// Mean local SSIM, computed per channel on the integer-remapped images and
/// averaged over channels (and batch items).
template <typename T>
double ssim(const Tensor<T>& x, const Tensor<T>& xhat, const SsimWindow& window = {}) {
  detail::check_pair(x, xhat, "ssim");
  const Shape s = x.shape();
  if (s.h < window.size || s.w < window.size) {
    throw ConfigError("ssim: image " + std::to_string(s.h) + "x" + std::to_string(s.w) + " is smaller than the " +
                      std::to_string(window.size) + "x" + std::to_string(window.size) + " window");
  }
  const auto a = detail::intensity_planes(x), b = detail::intensity_planes(xhat);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += detail::ssim_plane(a[i], b[i], window).ssim;
  return acc / double(a.size());
}

inline constexpr double kMsSsimWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

/// Smallest side length accepted by ms_ssim: the coarsest of five dyadic
/// scales must still hold an 11x11 window.
inline constexpr int kMsSsimMinSize = 11 * 16;

/// Five-scale MS-SSIM: contrast-structure at every scale, luminance at the
/// coarsest, 2x2 average downsampling. Negative per-scale terms are clamped
/// to 0 before exponentiation, so the result lies in [0, 1].
template <typename T>
double ms_ssim(const Tensor<T>& x, const Tensor<T>& xhat, const SsimWindow& window = {}) {
  detail::check_pair(x, xhat, "ms_ssim");
  const Shape s = x.shape();
  const int min_side = window.size * 16;
  if (s.h < min_side || s.w < min_side) {
    throw ConfigError("ms_ssim: image " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                      " is too small; the minimum size is " + std::to_string(min_side) + "x" +
                      std::to_string(min_side));
  }
  auto a = detail::intensity_planes(x), b = detail::intensity_planes(xhat);
  double acc = 0.0;
  for (std::size_t p = 0; p < a.size(); ++p) {
    double value = 1.0;
    detail::Plane pa = a[p], pb = b[p];
    for (int scale = 0; scale < 5; ++scale) {
      const auto terms = detail::ssim_plane(pa, pb, window);
      const double term = scale == 4 ? terms.ssim : terms.cs;
      value *= std::pow(std::max(term, 0.0), kMsSsimWeights[scale]);
      if (scale < 4) {
        pa = detail::downsample2(pa);
        pb = detail::downsample2(pb);
      }
    }
    acc += value;
  }
  return acc / double(a.size());
}

// ---------------------------------------------------------------------------
// Plug-in metrics (e.g. learned perceptual distances supplied by the caller)

using MetricFn = std::function<double(const Tensor<float>& x, const Tensor<float>& xhat)>;

/// Named scalar metrics evaluated on the raw [-1, 1] images. A plugin that
/// throws records a missing score; the others are unaffected.
class MetricPlugins {
 public:
  void register_plugin(const std::string& name, MetricFn fn) { plugins_[name] = std::move(fn); }
  bool empty() const { return plugins_.empty(); }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : plugins_) out.push_back(k);
    return out;
  }

  std::map<std::string, std::optional<double>> evaluate(const Tensor<float>& x, const Tensor<float>& xhat) const {
    std::map<std::string, std::optional<double>> out;
    for (const auto& [name, fn] : plugins_) {
      try {
        out[name] = fn(x, xhat);
      } catch (...) {
        out[name] = std::nullopt;
      }
    }
    return out;
  }

 private:
  std::map<std::string, MetricFn> plugins_;
};

struct MetricReport {
  double psnr_db = 0.0;
  double ssim = 0.0;
  std::optional<double> ms_ssim;
  std::map<std::string, std::optional<double>> plugin_scores;
};

/// PSNR and SSIM always; MS-SSIM when the image is large enough.
inline MetricReport evaluate_metrics(const Tensor<float>& x, const Tensor<float>& xhat,
                                     const MetricPlugins* plugins = nullptr) {
  MetricReport r;
  r.psnr_db = psnr(x, xhat);
  r.ssim = ssim(x, xhat);
  if (x.shape().h >= kMsSsimMinSize && x.shape().w >= kMsSsimMinSize) r.ms_ssim = ms_ssim(x, xhat);
  if (plugins) r.plugin_scores = plugins->evaluate(x, xhat);
  return r;
}

}  // namespace jscc
