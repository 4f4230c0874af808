#pragma once

#include <cmath>
#include <vector>

#include "jscc/nn/layers.hpp"

namespace jscc::nn {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. The learning rate may be changed between steps.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Param<T>*> params, AdamOptions options) : params_(std::move(params)), opt_(options) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.size(), 0.0);
      v_.emplace_back(p->value.size(), 0.0);
    }
  }

  void set_learning_rate(double lr) { opt_.learning_rate = lr; }
  double learning_rate() const { return opt_.learning_rate; }
  long steps() const { return t_; }

  void step(const Gradients<T>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, double(t_));
    for (std::size_t j = 0; j < params_.size(); ++j) {
      auto& value = params_[j]->value;
      const auto& g = grads[params_[j]->slot];
      auto& m = m_[j];
      auto& v = v_[j];
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double gi = g[i];
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        value[i] -= T(opt_.learning_rate * mhat / (std::sqrt(vhat) + opt_.eps));
      }
    }
  }

 private:
  std::vector<Param<T>*> params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace jscc::nn
