#pragma once

// Minimal reverse-mode layer stack for fully convolutional networks.
//
// Every layer exposes two forward passes: `forward` (inference statistics,
// const, safe to call concurrently) and `forward_train` (batch statistics,
// updates running buffers). Both optionally record on a Tape what `backward`
// needs; `backward` pops the tape in reverse order and returns the gradient
// with respect to the layer input. Parameter gradients are accumulated into an
// external Gradients store, so a trained network stays immutable while it is
// being differentiated.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "jscc/error.hpp"
#include "jscc/rng.hpp"
#include "jscc/tensor.hpp"

namespace jscc::nn {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  std::size_t slot = 0;
};

/// Non-trainable persistent state (running statistics).
template <typename T>
struct Buffer {
  std::string name;
  Tensor<T> value;
};

template <typename T>
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(const std::vector<Param<T>*>& params) {
    slots_.reserve(params.size());
    for (auto* p : params) slots_.emplace_back(p->value.shape());
  }

  Tensor<T>& operator[](std::size_t slot) { return slots_[slot]; }
  const Tensor<T>& operator[](std::size_t slot) const { return slots_[slot]; }
  std::size_t size() const { return slots_.size(); }

  void zero() {
    for (auto& s : slots_) s.fill(T(0));
  }

 private:
  std::vector<Tensor<T>> slots_;
};

enum class TapeTag { none, eval, train };

template <typename T>
class Tape {
 public:
  struct Entry {
    Tensor<T> value;
    TapeTag tag = TapeTag::none;
  };

  void push(Tensor<T> t, TapeTag tag = TapeTag::none) { stack_.push_back({std::move(t), tag}); }
  Entry pop() {
    if (stack_.empty()) throw ConfigError("tape underflow: backward does not match forward");
    Entry e = std::move(stack_.back());
    stack_.pop_back();
    return e;
  }
  bool empty() const { return stack_.empty(); }
  void clear() { stack_.clear(); }

 private:
  std::vector<Entry> stack_;
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const = 0;
  virtual Tensor<T> forward_train(const Tensor<T>& x, Tape<T>& tape) { return forward(x, &tape); }
  virtual Tensor<T> backward(const Tensor<T>& grad_out, Tape<T>& tape, Gradients<T>* grads) const = 0;

  virtual void collect(const std::string& prefix, std::vector<Param<T>*>& params,
                       std::vector<Buffer<T>*>& buffers) {
    (void)prefix;
    (void)params;
    (void)buffers;
  }
  virtual Shape output_shape(Shape in) const { return in; }
  /// Re-imposes parameter constraints after an optimizer update.
  virtual void project() {}
};

template <typename T>
using LayerPtr = std::unique_ptr<Layer<T>>;

namespace detail {

/// Valid output range [lo, hi) along one axis for kernel tap `k`.
inline void tap_range(int k, int stride, int pad, int in, int out, int& lo, int& hi) {
  lo = std::max(0, (pad - k + stride - 1) / stride);
  const int last = in - 1 + pad - k;
  hi = last < 0 ? 0 : std::min(out, last / stride + 1);
  if (hi < lo) hi = lo;
}

/// Unfolds one image into columns [col, col + out_h*out_w) of a row-major
/// matrix with leading dimension `ld`.
template <typename T>
void im2col(const T* in, int channels, int height, int width, int kernel, int stride, int pad,
            int out_h, int out_w, T* col, std::size_t ld) {
  for (int c = 0; c < channels; ++c) {
    const T* plane = in + std::size_t(c) * height * width;
    for (int ky = 0; ky < kernel; ++ky) {
      int y_lo, y_hi;
      tap_range(ky, stride, pad, height, out_h, y_lo, y_hi);
      for (int kx = 0; kx < kernel; ++kx) {
        int x_lo, x_hi;
        tap_range(kx, stride, pad, width, out_w, x_lo, x_hi);
        T* row = col + ((std::size_t(c) * kernel + ky) * kernel + kx) * ld;
        for (int oy = 0; oy < out_h; ++oy) {
          T* dst = row + std::size_t(oy) * out_w;
          if (oy < y_lo || oy >= y_hi) {
            std::fill(dst, dst + out_w, T(0));
            continue;
          }
          const T* src = plane + std::size_t(oy * stride - pad + ky) * width - pad + kx;
          std::fill(dst, dst + x_lo, T(0));
          if (stride == 1) {
            std::copy(src + x_lo, src + x_hi, dst + x_lo);
          } else {
            for (int ox = x_lo; ox < x_hi; ++ox) dst[ox] = src[ox * stride];
          }
          std::fill(dst + x_hi, dst + out_w, T(0));
        }
      }
    }
  }
}

/// Adjoint of im2col: accumulates columns back into the image.
template <typename T>
void col2im(const T* col, int channels, int height, int width, int kernel, int stride, int pad,
            int out_h, int out_w, T* out, std::size_t ld) {
  for (int c = 0; c < channels; ++c) {
    T* plane = out + std::size_t(c) * height * width;
    for (int ky = 0; ky < kernel; ++ky) {
      int y_lo, y_hi;
      tap_range(ky, stride, pad, height, out_h, y_lo, y_hi);
      for (int kx = 0; kx < kernel; ++kx) {
        int x_lo, x_hi;
        tap_range(kx, stride, pad, width, out_w, x_lo, x_hi);
        const T* row = col + ((std::size_t(c) * kernel + ky) * kernel + kx) * ld;
        for (int oy = y_lo; oy < y_hi; ++oy) {
          const T* src = row + std::size_t(oy) * out_w;
          T* dst = plane + std::size_t(oy * stride - pad + ky) * width - pad + kx;
          if (stride == 1) {
            for (int ox = x_lo; ox < x_hi; ++ox) dst[ox] += src[ox];
          } else {
            for (int ox = x_lo; ox < x_hi; ++ox) dst[ox * stride] += src[ox];
          }
        }
      }
    }
  }
}

/// Items per GEMM chunk so that the unfolded buffer stays below ~32M values.
inline int chunk_items(std::size_t per_item, int batch) {
  const std::size_t cap = std::size_t(1) << 25;
  return int(std::clamp<std::size_t>(cap / std::max<std::size_t>(per_item, 1), 1, std::size_t(batch)));
}

}  // namespace detail

/// 2-D convolution with "same"-style padding (kernel / 2).
template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride, bool bias, Rng& rng)
      : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), pad_(kernel / 2),
        has_bias_(bias) {
    if (in_channels <= 0 || out_channels <= 0 || kernel <= 0 || stride <= 0) {
      throw ConfigError("invalid convolution geometry");
    }
    weight_.value = Tensor<T>({out_, in_, kernel_, kernel_});
    // Fan-in scaled uniform, bound 1/sqrt(fan_in) for weights and bias.
    const double bound = 1.0 / std::sqrt(double(in_) * kernel_ * kernel_);
    for (auto& v : weight_.value.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    if (has_bias_) {
      bias_.value = Tensor<T>({out_, 1, 1, 1});
      for (auto& v : bias_.value.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
  }

  Shape output_shape(Shape in) const override {
    if (in.c != in_) {
      throw ConfigError("convolution expects " + std::to_string(in_) + " input channels, got " +
                        std::to_string(in.c));
    }
    return {in.n, out_, (in.h + 2 * pad_ - kernel_) / stride_ + 1,
            (in.w + 2 * pad_ - kernel_) / stride_ + 1};
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    const Shape os = output_shape(x.shape());
    Tensor<T> y(os);
    const int rows = in_ * kernel_ * kernel_;
    const std::size_t cols = std::size_t(os.h) * os.w;
    ConstMatrixMap<T> w(weight_.value.data(), out_, rows);
    const int chunk = detail::chunk_items(std::size_t(rows + out_) * cols, x.batch());
    auto& col = scratch(0);
    auto& prod = scratch(1);
    for (int n0 = 0; n0 < x.batch(); n0 += chunk) {
      const int m = std::min(chunk, x.batch() - n0);
      const std::size_t ld = cols * m;
      col.resize(std::size_t(rows) * ld);
      prod.resize(std::size_t(out_) * ld);
      for (int i = 0; i < m; ++i) unfold(x, n0 + i, os, col.data() + cols * i, ld);
      MatrixMap<T> out(prod.data(), out_, Eigen::Index(ld));
      out.noalias() = w * ConstMatrixMap<T>(col.data(), rows, Eigen::Index(ld));
      for (int i = 0; i < m; ++i) {
        T* dst = y.item(n0 + i).data();
        for (int c = 0; c < out_; ++c) {
          const T* src = prod.data() + c * ld + cols * i;
          const T b = has_bias_ ? bias_.value[c] : T(0);
          for (std::size_t j = 0; j < cols; ++j) dst[c * cols + j] = src[j] + b;
        }
      }
    }
    if (tape) tape->push(x);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out, Tape<T>& tape, Gradients<T>* grads) const override {
    const Tensor<T> x = tape.pop().value;
    const Shape os = grad_out.shape();
    const int rows = in_ * kernel_ * kernel_;
    const std::size_t cols = std::size_t(os.h) * os.w;
    ConstMatrixMap<T> w(weight_.value.data(), out_, rows);
    Tensor<T> dx(x.shape());
    const int chunk = detail::chunk_items(std::size_t(2 * rows + out_) * cols, x.batch());
    auto& col = scratch(0);
    auto& dcol = scratch(1);
    auto& dy = scratch(2);
    for (int n0 = 0; n0 < x.batch(); n0 += chunk) {
      const int m = std::min(chunk, x.batch() - n0);
      const std::size_t ld = cols * m;
      dy.resize(std::size_t(out_) * ld);
      for (int i = 0; i < m; ++i) {
        const T* src = grad_out.item(n0 + i).data();
        for (int c = 0; c < out_; ++c) std::copy(src + c * cols, src + (c + 1) * cols, dy.data() + c * ld + cols * i);
      }
      ConstMatrixMap<T> dym(dy.data(), out_, Eigen::Index(ld));
      if (grads) {
        col.resize(std::size_t(rows) * ld);
        for (int i = 0; i < m; ++i) unfold(x, n0 + i, os, col.data() + cols * i, ld);
        MatrixMap<T> dw((*grads)[weight_.slot].data(), out_, rows);
        dw.noalias() += dym * ConstMatrixMap<T>(col.data(), rows, Eigen::Index(ld)).transpose();
        if (has_bias_) {
          auto& db = (*grads)[bias_.slot];
          for (int c = 0; c < out_; ++c) db[c] += dym.row(c).sum();
        }
      }
      dcol.resize(std::size_t(rows) * ld);
      MatrixMap<T>(dcol.data(), rows, Eigen::Index(ld)).noalias() = w.transpose() * dym;
      for (int i = 0; i < m; ++i) {
        T* dst = dx.item(n0 + i).data();
        if (is_pointwise()) {
          for (int r = 0; r < rows; ++r) {
            const T* src = dcol.data() + r * ld + cols * i;
            std::copy(src, src + cols, dst + r * cols);
          }
        } else {
          detail::col2im(dcol.data() + cols * i, in_, x.shape().h, x.shape().w, kernel_, stride_, pad_, os.h, os.w,
                         dst, ld);
        }
      }
    }
    return dx;
  }

  void collect(const std::string& prefix, std::vector<Param<T>*>& params,
               std::vector<Buffer<T>*>&) override {
    weight_.name = prefix + "weight";
    params.push_back(&weight_);
    if (has_bias_) {
      bias_.name = prefix + "bias";
      params.push_back(&bias_);
    }
  }

  bool has_bias() const { return has_bias_; }

 private:
  bool is_pointwise() const { return kernel_ == 1 && stride_ == 1; }

  /// Per-thread work buffers reused across calls (avoids page-faulting fresh
  /// allocations on every convolution).
  static std::vector<T>& scratch(int i) {
    thread_local std::vector<T> buffers[3];
    return buffers[i];
  }

  void unfold(const Tensor<T>& x, int n, const Shape& os, T* dst, std::size_t ld) const {
    const T* src = x.item(n).data();
    const std::size_t cols = std::size_t(os.h) * os.w;
    if (is_pointwise()) {
      for (int c = 0; c < in_; ++c) std::copy(src + c * cols, src + (c + 1) * cols, dst + c * ld);
    } else {
      detail::im2col(src, in_, x.shape().h, x.shape().w, kernel_, stride_, pad_, os.h, os.w, dst, ld);
    }
  }

  int in_, out_, kernel_, stride_, pad_;
  bool has_bias_;
  Param<T> weight_;
  Param<T> bias_;
};

/// Per-channel batch normalization with learned scale and shift.
template <typename T>
class BatchNorm2d final : public Layer<T> {
 public:
  explicit BatchNorm2d(int channels, double eps = 1e-5, double momentum = 0.1)
      : channels_(channels), eps_(eps), momentum_(momentum) {
    gamma_.value = Tensor<T>({channels, 1, 1, 1}, T(1));
    beta_.value = Tensor<T>({channels, 1, 1, 1}, T(0));
    running_mean_.value = Tensor<T>({channels, 1, 1, 1}, T(0));
    running_var_.value = Tensor<T>({channels, 1, 1, 1}, T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    check(x);
    Tensor<T> y(x.shape());
    const std::size_t plane = x.shape().plane();
    for (int c = 0; c < channels_; ++c) {
      const T inv = T(1) / std::sqrt(running_var_.value[c] + T(eps_));
      const T scale = gamma_.value[c] * inv;
      const T shift = beta_.value[c] - running_mean_.value[c] * scale;
      for (int n = 0; n < x.batch(); ++n) {
        const T* src = &x.at(n, c, 0, 0);
        T* dst = &y.at(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] * scale + shift;
      }
    }
    if (tape) tape->push(x, TapeTag::eval);
    return y;
  }

  Tensor<T> forward_train(const Tensor<T>& x, Tape<T>& tape) override {
    check(x);
    const std::size_t plane = x.shape().plane();
    const double count = double(x.batch()) * double(plane);
    Tensor<T> xhat(x.shape());
    Tensor<T> inv_std({channels_, 1, 1, 1});
    Tensor<T> y(x.shape());
    for (int c = 0; c < channels_; ++c) {
      double sum = 0.0, sq = 0.0;
      for (int n = 0; n < x.batch(); ++n) {
        const T* src = &x.at(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) sum += src[i];
      }
      const double mean = sum / count;
      for (int n = 0; n < x.batch(); ++n) {
        const T* src = &x.at(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) sq += (src[i] - mean) * (src[i] - mean);
      }
      const double var = sq / count;
      const double inv = 1.0 / std::sqrt(var + eps_);
      inv_std[c] = T(inv);
      for (int n = 0; n < x.batch(); ++n) {
        const T* src = &x.at(n, c, 0, 0);
        T* xh = &xhat.at(n, c, 0, 0);
        T* dst = &y.at(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          xh[i] = T((src[i] - mean) * inv);
          dst[i] = gamma_.value[c] * xh[i] + beta_.value[c];
        }
      }
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      running_mean_.value[c] = T((1 - momentum_) * running_mean_.value[c] + momentum_ * mean);
      running_var_.value[c] = T((1 - momentum_) * running_var_.value[c] + momentum_ * unbiased);
    }
    tape.push(std::move(inv_std), TapeTag::train);
    tape.push(std::move(xhat), TapeTag::train);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g, Tape<T>& tape, Gradients<T>* grads) const override {
    auto top = tape.pop();
    const std::size_t plane = g.shape().plane();
    Tensor<T> dx(g.shape());
    if (top.tag == TapeTag::eval) {
      const Tensor<T>& x = top.value;
      for (int c = 0; c < channels_; ++c) {
        const T inv = T(1) / std::sqrt(running_var_.value[c] + T(eps_));
        const T scale = gamma_.value[c] * inv;
        double dgamma = 0.0, dbeta = 0.0;
        for (int n = 0; n < g.batch(); ++n) {
          const T* gp = &g.at(n, c, 0, 0);
          const T* xp = &x.at(n, c, 0, 0);
          T* dp = &dx.at(n, c, 0, 0);
          for (std::size_t i = 0; i < plane; ++i) {
            dp[i] = gp[i] * scale;
            dgamma += double(gp[i]) * (xp[i] - running_mean_.value[c]) * inv;
            dbeta += gp[i];
          }
        }
        if (grads) {
          (*grads)[gamma_.slot][c] += T(dgamma);
          (*grads)[beta_.slot][c] += T(dbeta);
        }
      }
      return dx;
    }
    const Tensor<T> xhat = std::move(top.value);
    const Tensor<T> inv_std = tape.pop().value;
    const double count = double(g.batch()) * double(plane);
    for (int c = 0; c < channels_; ++c) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (int n = 0; n < g.batch(); ++n) {
        const T* gp = &g.at(n, c, 0, 0);
        const T* xh = &xhat.at(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          sum_g += gp[i];
          sum_gx += double(gp[i]) * xh[i];
        }
      }
      if (grads) {
        (*grads)[gamma_.slot][c] += T(sum_gx);
        (*grads)[beta_.slot][c] += T(sum_g);
      }
      const double k = double(gamma_.value[c]) * inv_std[c];
      for (int n = 0; n < g.batch(); ++n) {
        const T* gp = &g.at(n, c, 0, 0);
        const T* xh = &xhat.at(n, c, 0, 0);
        T* dp = &dx.at(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          dp[i] = T(k * (gp[i] - sum_g / count - xh[i] * sum_gx / count));
        }
      }
    }
    return dx;
  }

  void collect(const std::string& prefix, std::vector<Param<T>*>& params,
               std::vector<Buffer<T>*>& buffers) override {
    gamma_.name = prefix + "gamma";
    beta_.name = prefix + "beta";
    running_mean_.name = prefix + "running_mean";
    running_var_.name = prefix + "running_var";
    params.push_back(&gamma_);
    params.push_back(&beta_);
    buffers.push_back(&running_mean_);
    buffers.push_back(&running_var_);
  }

 private:
  void check(const Tensor<T>& x) const {
    if (x.shape().c != channels_) {
      throw ConfigError("batch norm expects " + std::to_string(channels_) + " channels, got " +
                        std::to_string(x.shape().c));
    }
  }

  int channels_;
  double eps_, momentum_;
  Param<T> gamma_, beta_;
  Buffer<T> running_mean_, running_var_;
};

/// Bias-free normalization: divides by the per-channel standard deviation and
/// multiplies by a learned scale. No mean is subtracted and nothing is added,
/// so the layer is positively homogeneous in inference mode.
template <typename T>
class ScaleNorm2d final : public Layer<T> {
 public:
  /// gamma starts at 1, or at small random values N(0, (2/576)^2) clipped
  /// to +-0.025 when an rng is given (deep stacks diverge from gamma = 1).
  explicit ScaleNorm2d(int channels, Rng* rng = nullptr, double eps = 1e-5, double momentum = 0.1)
      : channels_(channels), eps_(eps), momentum_(momentum) {
    gamma_.value = Tensor<T>({channels, 1, 1, 1}, T(1));
    if (rng) {
      for (auto& g : gamma_.value.values()) g = T(std::clamp(rng->normal() * 2.0 / 576.0, -0.025, 0.025));
    }
    running_sd_.value = Tensor<T>({channels, 1, 1, 1}, T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    Tensor<T> y(x.shape());
    const std::size_t plane = x.shape().plane();
    for (int c = 0; c < channels_; ++c) {
      const T scale = gamma_.value[c] / running_sd_.value[c];
      for (int n = 0; n < x.batch(); ++n) {
        const T* src = &x.at(n, c, 0, 0);
        T* dst = &y.at(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] * scale;
      }
    }
    if (tape) tape->push(x, TapeTag::eval);
    return y;
  }

  Tensor<T> forward_train(const Tensor<T>& x, Tape<T>& tape) override {
    const std::size_t plane = x.shape().plane();
    const double count = double(x.batch()) * double(plane);
    Tensor<T> sd({channels_, 1, 1, 1});
    Tensor<T> y(x.shape());
    for (int c = 0; c < channels_; ++c) {
      double sum = 0.0, sq = 0.0;
      for (int n = 0; n < x.batch(); ++n) {
        const T* src = &x.at(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) sum += src[i];
      }
      const double mean = sum / count;
      for (int n = 0; n < x.batch(); ++n) {
        const T* src = &x.at(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) sq += (src[i] - mean) * (src[i] - mean);
      }
      const double s = std::sqrt(sq / count + eps_);
      sd[c] = T(s);
      const T scale = T(gamma_.value[c] / s);
      for (int n = 0; n < x.batch(); ++n) {
        const T* src = &x.at(n, c, 0, 0);
        T* dst = &y.at(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] * scale;
      }
      running_sd_.value[c] = T((1 - momentum_) * running_sd_.value[c] + momentum_ * s);
    }
    tape.push(std::move(sd), TapeTag::train);
    tape.push(x, TapeTag::train);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g, Tape<T>& tape, Gradients<T>* grads) const override {
    auto top = tape.pop();
    const Tensor<T> x = std::move(top.value);
    const std::size_t plane = g.shape().plane();
    Tensor<T> dx(g.shape());
    if (top.tag == TapeTag::eval) {
      for (int c = 0; c < channels_; ++c) {
        const T scale = gamma_.value[c] / running_sd_.value[c];
        double dgamma = 0.0;
        for (int n = 0; n < g.batch(); ++n) {
          const T* gp = &g.at(n, c, 0, 0);
          const T* xp = &x.at(n, c, 0, 0);
          T* dp = &dx.at(n, c, 0, 0);
          for (std::size_t i = 0; i < plane; ++i) {
            dp[i] = gp[i] * scale;
            dgamma += double(gp[i]) * xp[i];
          }
        }
        if (grads) (*grads)[gamma_.slot][c] += T(dgamma / running_sd_.value[c]);
      }
      return dx;
    }
    const Tensor<T> sd = tape.pop().value;
    const double count = double(g.batch()) * double(plane);
    for (int c = 0; c < channels_; ++c) {
      double sum = 0.0, sum_gx = 0.0;
      for (int n = 0; n < g.batch(); ++n) {
        const T* gp = &g.at(n, c, 0, 0);
        const T* xp = &x.at(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          sum += xp[i];
          sum_gx += double(gp[i]) * xp[i];
        }
      }
      const double mean = sum / count;
      const double s = sd[c];
      const double gamma = gamma_.value[c];
      if (grads) (*grads)[gamma_.slot][c] += T(sum_gx / s);
      // y = gamma x / s(x),  ds/dx_i = (x_i - mean) / (count s)
      const double coupling = gamma * sum_gx / (s * s * s * count);
      for (int n = 0; n < g.batch(); ++n) {
        const T* gp = &g.at(n, c, 0, 0);
        const T* xp = &x.at(n, c, 0, 0);
        T* dp = &dx.at(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          dp[i] = T(gamma / s * gp[i] - coupling * (xp[i] - mean));
        }
      }
    }
    return dx;
  }

  void collect(const std::string& prefix, std::vector<Param<T>*>& params,
               std::vector<Buffer<T>*>& buffers) override {
    gamma_.name = prefix + "gamma";
    running_sd_.name = prefix + "running_sd";
    params.push_back(&gamma_);
    buffers.push_back(&running_sd_);
  }

 private:
  int channels_;
  double eps_, momentum_;
  Param<T> gamma_;
  Buffer<T> running_sd_;
};

/// PReLU with one slope shared across the layer, constrained to rho >= 0.
template <typename T>
class PReLU final : public Layer<T> {
 public:
  explicit PReLU(double init = 0.25) { rho_.value = Tensor<T>({1, 1, 1, 1}, T(init)); }

  T slope() const { return rho_.value[0]; }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    Tensor<T> y(x.shape());
    const T rho = slope();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] >= T(0) ? x[i] : rho * x[i];
    if (tape) tape->push(x);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g, Tape<T>& tape, Gradients<T>* grads) const override {
    const Tensor<T> x = tape.pop().value;
    Tensor<T> dx(g.shape());
    const T rho = slope();
    double drho = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] >= T(0)) {
        dx[i] = g[i];
      } else {
        dx[i] = rho * g[i];
        drho += double(g[i]) * x[i];
      }
    }
    if (grads) (*grads)[rho_.slot][0] += T(drho);
    return dx;
  }

  void collect(const std::string& prefix, std::vector<Param<T>*>& params,
               std::vector<Buffer<T>*>&) override {
    rho_.name = prefix + "rho";
    params.push_back(&rho_);
  }

  void project() override {
    if (rho_.value[0] < T(0)) rho_.value[0] = T(0);
  }

 private:
  Param<T> rho_;
};

template <typename T>
class ReLU final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    if (tape) tape->push(x);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g, Tape<T>& tape, Gradients<T>*) const override {
    const Tensor<T> x = tape.pop().value;
    Tensor<T> dx(g.shape());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T(0) ? g[i] : T(0);
    return dx;
  }
};

template <typename T>
class Tanh final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
    if (tape) tape->push(y);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g, Tape<T>& tape, Gradients<T>*) const override {
    const Tensor<T> y = tape.pop().value;
    Tensor<T> dx(g.shape());
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] = g[i] * (T(1) - y[i] * y[i]);
    return dx;
  }
};

/// Bilinear x2 upsampling with half-pixel centres (edge-clamped).
template <typename T>
class Upsample2x final : public Layer<T> {
 public:
  Shape output_shape(Shape in) const override { return {in.n, in.c, in.h * 2, in.w * 2}; }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    const Shape is = x.shape();
    Tensor<T> y(output_shape(is));
    const auto ys = taps(is.h), xs = taps(is.w);
    for (int n = 0; n < is.n; ++n) {
      for (int c = 0; c < is.c; ++c) {
        const T* src = &x.at(n, c, 0, 0);
        T* dst = &y.at(n, c, 0, 0);
        for (int oy = 0; oy < 2 * is.h; ++oy) {
          const auto& ty = ys[oy];
          for (int ox = 0; ox < 2 * is.w; ++ox) {
            const auto& tx = xs[ox];
            const T top = src[ty.i0 * is.w + tx.i0] * (T(1) - tx.frac) + src[ty.i0 * is.w + tx.i1] * tx.frac;
            const T bot = src[ty.i1 * is.w + tx.i0] * (T(1) - tx.frac) + src[ty.i1 * is.w + tx.i1] * tx.frac;
            dst[oy * 2 * is.w + ox] = top * (T(1) - ty.frac) + bot * ty.frac;
          }
        }
      }
    }
    if (tape) tape->push(Tensor<T>(is));
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g, Tape<T>& tape, Gradients<T>*) const override {
    const Shape is = tape.pop().value.shape();
    Tensor<T> dx(is);
    const auto ys = taps(is.h), xs = taps(is.w);
    for (int n = 0; n < is.n; ++n) {
      for (int c = 0; c < is.c; ++c) {
        const T* gp = &g.at(n, c, 0, 0);
        T* dst = &dx.at(n, c, 0, 0);
        for (int oy = 0; oy < 2 * is.h; ++oy) {
          const auto& ty = ys[oy];
          for (int ox = 0; ox < 2 * is.w; ++ox) {
            const auto& tx = xs[ox];
            const T v = gp[oy * 2 * is.w + ox];
            dst[ty.i0 * is.w + tx.i0] += v * (T(1) - ty.frac) * (T(1) - tx.frac);
            dst[ty.i0 * is.w + tx.i1] += v * (T(1) - ty.frac) * tx.frac;
            dst[ty.i1 * is.w + tx.i0] += v * ty.frac * (T(1) - tx.frac);
            dst[ty.i1 * is.w + tx.i1] += v * ty.frac * tx.frac;
          }
        }
      }
    }
    return dx;
  }

 private:
  struct Tap {
    int i0, i1;
    T frac;
  };

  static std::vector<Tap> taps(int in) {
    std::vector<Tap> out(std::size_t(in) * 2);
    for (int o = 0; o < 2 * in; ++o) {
      double src = (o + 0.5) / 2.0 - 0.5;
      if (src < 0) src = 0;
      int i0 = std::min(int(src), in - 1);
      int i1 = std::min(i0 + 1, in - 1);
      out[o] = {i0, i1, T(src - i0)};
    }
    return out;
  }
};

template <typename T>
class Sequential final : public Layer<T> {
 public:
  Sequential() = default;

  Sequential& add(LayerPtr<T> layer) {
    layers_.push_back(std::move(layer));
    return *this;
  }
  template <typename L, typename... Args>
  L& emplace(Args&&... args) {
    auto p = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *p;
    layers_.push_back(std::move(p));
    return ref;
  }

  std::size_t size() const { return layers_.size(); }
  Layer<T>& operator[](std::size_t i) { return *layers_[i]; }
  const Layer<T>& operator[](std::size_t i) const { return *layers_[i]; }

  Shape output_shape(Shape in) const override {
    for (const auto& l : layers_) in = l->output_shape(in);
    return in;
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    Tensor<T> h = x;
    for (const auto& l : layers_) h = l->forward(h, tape);
    return h;
  }

  Tensor<T> forward_train(const Tensor<T>& x, Tape<T>& tape) override {
    Tensor<T> h = x;
    for (auto& l : layers_) h = l->forward_train(h, tape);
    return h;
  }

  Tensor<T> backward(const Tensor<T>& g, Tape<T>& tape, Gradients<T>* grads) const override {
    Tensor<T> d = g;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = (*it)->backward(d, tape, grads);
    return d;
  }

  void collect(const std::string& prefix, std::vector<Param<T>*>& params,
               std::vector<Buffer<T>*>& buffers) override {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      layers_[i]->collect(prefix + std::to_string(i) + ".", params, buffers);
    }
  }

  void project() override {
    for (auto& l : layers_) l->project();
  }

 private:
  std::vector<LayerPtr<T>> layers_;
};

/// Two conv/norm/PReLU stacks plus a shortcut; the shortcut is a 1x1
/// convolution when the channel count changes.
template <typename T>
class Residual final : public Layer<T> {
 public:
  Residual(int in_channels, int out_channels, int kernel, Rng& rng) {
    main_.template emplace<Conv2d<T>>(in_channels, out_channels, kernel, 1, true, rng);
    main_.template emplace<BatchNorm2d<T>>(out_channels);
    main_.template emplace<PReLU<T>>();
    main_.template emplace<Conv2d<T>>(out_channels, out_channels, kernel, 1, true, rng);
    main_.template emplace<BatchNorm2d<T>>(out_channels);
    main_.template emplace<PReLU<T>>();
    if (in_channels != out_channels) {
      shortcut_ = std::make_unique<Conv2d<T>>(in_channels, out_channels, 1, 1, true, rng);
    }
  }

  Shape output_shape(Shape in) const override { return main_.output_shape(in); }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    Tensor<T> y = main_.forward(x, tape);
    y += shortcut_ ? shortcut_->forward(x, tape) : x;
    return y;
  }

  Tensor<T> forward_train(const Tensor<T>& x, Tape<T>& tape) override {
    Tensor<T> y = main_.forward_train(x, tape);
    y += shortcut_ ? shortcut_->forward_train(x, tape) : x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g, Tape<T>& tape, Gradients<T>* grads) const override {
    Tensor<T> dx = shortcut_ ? shortcut_->backward(g, tape, grads) : g;
    dx += main_.backward(g, tape, grads);
    return dx;
  }

  void collect(const std::string& prefix, std::vector<Param<T>*>& params,
               std::vector<Buffer<T>*>& buffers) override {
    main_.collect(prefix + "main.", params, buffers);
    if (shortcut_) shortcut_->collect(prefix + "shortcut.", params, buffers);
  }

  void project() override { main_.project(); }

 private:
  Sequential<T> main_;
  std::unique_ptr<Conv2d<T>> shortcut_;
};

/// Per-item projection onto the ball ||v||^2 <= k, k = C*H*W. Inside the ball
/// (boundary included) the layer is the identity.
template <typename T>
class PowerNorm final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const override {
    Tensor<T> y = x;
    const double k = double(x.shape().item_size());
    for (int n = 0; n < x.batch(); ++n) {
      const double n2 = squared_norm(x.item(n));
      if (n2 > k) {
        const T s = T(std::sqrt(k / n2));
        for (auto& v : y.item(n)) v *= s;
      }
    }
    if (tape) tape->push(x);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g, Tape<T>& tape, Gradients<T>*) const override {
    const Tensor<T> x = tape.pop().value;
    Tensor<T> dx = g;
    const double k = double(x.shape().item_size());
    for (int n = 0; n < x.batch(); ++n) {
      auto v = x.item(n);
      const double n2 = squared_norm(v);
      if (n2 <= k) continue;
      auto gi = g.item(n);
      const double norm = std::sqrt(n2);
      const double vg = dot(v, gi);
      const double s = std::sqrt(k) / norm;
      auto out = dx.item(n);
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = T(s * (gi[i] - vg * v[i] / n2));
    }
    return dx;
  }
};

}  // namespace jscc::nn
