#include <gtest/gtest.h>

#include <functional>
#include <memory>

#include "jscc/nn/layers.hpp"
#include "test_util.hpp"

using namespace jscc;
using namespace jscc::testing;

namespace {

struct LayerCase {
  const char* name;
  std::function<std::unique_ptr<nn::Layer<double>>(Rng&)> make;
  Shape input;
  bool train;
};

/// Checks input and parameter gradients of sum(w * layer(x)) against central
/// differences.
void check_layer(const LayerCase& c) {
  Rng rng(11);
  auto layer = c.make(rng);
  auto params = bind_params(*layer);
  Tensor<double> x = random_tensor(c.input, 3);
  const Shape out_shape = layer->output_shape(c.input);
  const Tensor<double> w = random_tensor(out_shape, 5);

  auto run = [&](nn::Tape<double>& tape) {
    return c.train ? layer->forward_train(x, tape) : layer->forward(x, &tape);
  };
  auto loss = [&]() {
    nn::Tape<double> tape;
    return weighted_sum(run(tape), w);
  };

  nn::Tape<double> tape;
  const Tensor<double> y = run(tape);
  ASSERT_EQ(y.shape(), out_shape);
  nn::Gradients<double> grads(params);
  const Tensor<double> dx = layer->backward(w, tape, &grads);
  EXPECT_TRUE(tape.empty());

  EXPECT_LT(max_relative_error(numeric_gradient(x, loss), dx), 1e-6) << c.name << " input gradient";
  for (auto* p : params) {
    EXPECT_LT(max_relative_error(numeric_gradient(p->value, loss), grads[p->slot]), 1e-6)
        << c.name << " gradient of " << p->name;
  }
}

Tensor<double> perturb(Tensor<double> t, std::uint64_t seed, double scale) {
  t += random_tensor(t.shape(), seed, scale);
  return t;
}

}  // namespace

TEST(LayerGradients, ConvolutionStrideOne) {
  check_layer({"conv3", [](Rng& r) { return std::make_unique<nn::Conv2d<double>>(2, 3, 3, 1, true, r); },
               {2, 2, 5, 6}, false});
}

TEST(LayerGradients, ConvolutionStrideTwo) {
  check_layer({"conv5s2", [](Rng& r) { return std::make_unique<nn::Conv2d<double>>(3, 2, 5, 2, true, r); },
               {2, 3, 7, 8}, false});
}

TEST(LayerGradients, PointwiseConvolutionWithoutBias) {
  check_layer({"conv1", [](Rng& r) { return std::make_unique<nn::Conv2d<double>>(3, 4, 1, 1, false, r); },
               {2, 3, 4, 4}, false});
}

TEST(LayerGradients, BatchNormTrainingMode) {
  check_layer({"bn-train", [](Rng&) {
                 auto bn = std::make_unique<nn::BatchNorm2d<double>>(3);
                 return bn;
               },
               {3, 3, 4, 5}, true});
}

TEST(LayerGradients, BatchNormEvalMode) {
  check_layer({"bn-eval", [](Rng&) { return std::make_unique<nn::BatchNorm2d<double>>(3); }, {2, 3, 4, 4}, false});
}

TEST(LayerGradients, ScaleNormTrainingMode) {
  check_layer({"sn-train", [](Rng&) { return std::make_unique<nn::ScaleNorm2d<double>>(2); }, {3, 2, 4, 4}, true});
}

TEST(LayerGradients, ScaleNormEvalMode) {
  check_layer({"sn-eval", [](Rng&) { return std::make_unique<nn::ScaleNorm2d<double>>(2); }, {2, 2, 3, 3}, false});
}

TEST(LayerGradients, PReLU) {
  check_layer({"prelu", [](Rng&) { return std::make_unique<nn::PReLU<double>>(0.25); }, {2, 2, 3, 3}, false});
}

TEST(LayerGradients, TanhAndUpsample) {
  check_layer({"tanh", [](Rng&) { return std::make_unique<nn::Tanh<double>>(); }, {2, 2, 3, 3}, false});
  check_layer({"up", [](Rng&) { return std::make_unique<nn::Upsample2x<double>>(); }, {2, 2, 3, 4}, false});
}

TEST(LayerGradients, ResidualWithProjectionSkip) {
  check_layer({"res", [](Rng& r) { return std::make_unique<nn::Residual<double>>(2, 3, 3, r); }, {2, 2, 4, 4}, true});
  check_layer({"res-id", [](Rng& r) { return std::make_unique<nn::Residual<double>>(2, 2, 3, r); }, {2, 2, 4, 4}, true});
}

TEST(LayerGradients, PowerNormOutsideAndInsideTheBall) {
  // Large-norm items are projected, small-norm items pass through.
  check_layer({"pn-out", [](Rng&) { return std::make_unique<nn::PowerNorm<double>>(); }, {2, 2, 2, 2}, false});
  nn::PowerNorm<double> pn;
  Tensor<double> small = random_tensor({1, 2, 2, 2}, 9, 0.1);
  nn::Tape<double> tape;
  EXPECT_EQ(pn.forward(small, &tape), small);
  Tensor<double> g = random_tensor(small.shape(), 4);
  EXPECT_EQ(pn.backward(g, tape, nullptr), g);
}

TEST(Conv2d, MatchesDirectConvolution) {
  Rng rng(2);
  nn::Conv2d<double> conv(2, 3, 3, 2, true, rng);
  auto params = bind_params(conv);
  const Tensor<double> x = random_tensor({1, 2, 5, 5}, 8);
  const Tensor<double> y = conv.forward(x, nullptr);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3, 3}));
  const auto& wt = params[0]->value;
  const auto& b = params[1]->value;
  for (int o = 0; o < 3; ++o)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        double acc = b[o];
        for (int i = 0; i < 2; ++i)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
              if (iy < 0 || ix < 0 || iy >= 5 || ix >= 5) continue;
              acc += wt[((o * 2 + i) * 3 + ky) * 3 + kx] * x.at(0, i, iy, ix);
            }
        EXPECT_NEAR(y.at(0, o, oy, ox), acc, 1e-12);
      }
}

TEST(Conv2d, InitializationIsUniformWithinFanInBound) {
  Rng rng(5);
  nn::Conv2d<double> conv(4, 8, 3, 1, true, rng);
  auto params = bind_params(conv);
  const double bound = 1.0 / std::sqrt(4.0 * 9.0);
  for (auto* p : params)
    for (double v : p->value.values()) EXPECT_LE(std::abs(v), bound);
}

TEST(BatchNorm2d, RunningStatisticsFollowMomentum) {
  nn::BatchNorm2d<double> bn(1);
  std::vector<nn::Param<double>*> params;
  std::vector<nn::Buffer<double>*> buffers;
  bn.collect("", params, buffers);
  Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  nn::Tape<double> tape;
  bn.forward_train(x, tape);
  // batch mean 2.5, unbiased variance 5/3
  ASSERT_EQ(buffers.size(), 2u);
  EXPECT_NEAR(buffers[0]->value[0], 0.25, 1e-12);
  EXPECT_NEAR(buffers[1]->value[0], 0.9 + 0.1 * 5.0 / 3.0, 1e-12);
}

TEST(ScaleNorm2d, DividesByStandardDeviationWithoutCentering) {
  nn::ScaleNorm2d<double> sn(1);
  Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 6});
  nn::Tape<double> tape;
  const Tensor<double> y = sn.forward_train(x, tape);
  const double mean = 3.0, var = (4 + 1 + 0 + 9) / 4.0;
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i] / std::sqrt(var + 1e-5), 1e-12);
  (void)mean;
  // Positive homogeneity: the layer is scale invariant in training mode.
  nn::Tape<double> tape2;
  const Tensor<double> y2 = sn.forward_train(x * 7.0, tape2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y2[i], y[i], 1e-5);
}

TEST(PReLU, ProjectClampsNegativeSlope) {
  nn::PReLU<double> p(0.25);
  auto params = bind_params(p);
  params[0]->value[0] = -0.3;
  p.project();
  EXPECT_EQ(p.slope(), 0.0);
}

TEST(Upsample2x, MatchesHalfPixelBilinearReference) {
  // 1-D taps for an input of length 2: out = [x0, .75x0+.25x1, .25x0+.75x1, x1]
  nn::Upsample2x<double> up;
  Tensor<double> x({1, 1, 1, 2}, std::vector<double>{0.0, 4.0});
  Tensor<double> y = up.forward(x, nullptr);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
  const double expect[4] = {0.0, 1.0, 3.0, 4.0};
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(y.at(0, 0, 0, i), expect[i], 1e-12);
    EXPECT_NEAR(y.at(0, 0, 1, i), expect[i], 1e-12);
  }
  (void)perturb;
}
