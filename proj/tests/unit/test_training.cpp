#include <gtest/gtest.h>

#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>

#include "jscc/training.hpp"
#include "support/fixtures.hpp"
#include "test_util.hpp"

using namespace jscc;
using namespace jscc::testing;

namespace {

struct IdentityCodec {
  Codeword<double> encode(const Tensor<double>& x) const { return {x, true}; }
  Tensor<double> decode(const Tensor<double>& y) const { return y; }
};

struct ZeroDecoder {
  Codeword<double> encode(const Tensor<double>& x) const { return {x, true}; }
  Tensor<double> decode(const Tensor<double>& y) const { return Tensor<double>(y.shape()); }
};

DatasetHandle micro_data(int count) {
  DatasetConfig c;
  c.count = count;
  c.height = 8;
  c.width = 8;
  c.seed = 3;
  c.split = Split::train;
  return load_dataset(c);
}

TrainConfig micro_schedule(long steps) {
  auto c = desk_schedule(5.0, {1, 48}, steps);
  c.batch_size = 8;
  c.log_every = 0;
  c.optimizer.learning_rate = 3e-3;
  return c;
}

double mean(const std::vector<double>& v, std::size_t from, std::size_t to) {
  return std::accumulate(v.begin() + long(from), v.begin() + long(to), 0.0) / double(to - from);
}

}  // namespace

TEST(Losses, StubValues) {
  const Tensor<double> x({2, 1, 2, 2}, 1.0);
  const Tensor<double> zero(x.shape());
  EXPECT_EQ(jscc_loss(IdentityCodec{}, x, zero), 0.0);
  EXPECT_EQ(jscc_loss(ZeroDecoder{}, x, zero), 4.0);  // ||1||^2 over n = 4
  const Tensor<double> noise = random_tensor(x.shape(), 5);
  EXPECT_NEAR(jscc_loss(IdentityCodec{}, x, noise), squared_norm(noise) / 2, 1e-12);

  auto zero_f = [](const Tensor<double>& y) { return Tensor<double>(y.shape()); };
  EXPECT_NEAR(denoiser_loss(zero_f, x, noise), squared_norm(noise) / 2, 1e-12);
  auto oracle = [&](const Tensor<double>& y) { return y - x; };
  EXPECT_NEAR(denoiser_loss(oracle, x, noise), 0.0, 1e-24);
}

TEST(TrainPass, JsccGradientsMatchFiniteDifferences) {
  auto model = fixtures::micro_bundle<double>(21);
  const Tensor<double> x = random_tensor({3, 3, 8, 8}, 1, 0.5);
  const Tensor<double> noise = random_tensor(model.config().codeword_shape().with_batch(3), 2, 0.3);
  auto enc = model.encoder().make_gradients();
  auto dec = model.decoder().make_gradients();
  const double loss = jscc_train_pass(model, x, noise, enc, dec);
  EXPECT_GT(loss, 0.0);
  auto f = [&]() {
    auto e = model.encoder().make_gradients();
    auto d = model.decoder().make_gradients();
    return jscc_train_pass(model, x, noise, e, d);
  };
  for (auto [net, grads] : {std::pair{&model.encoder(), &enc}, std::pair{&model.decoder(), &dec}}) {
    for (auto* p : net->params()) {
      EXPECT_LT(max_relative_error(numeric_gradient(p->value, f), (*grads)[p->slot]), 1e-5) << p->name;
    }
  }
}

TEST(TrainPass, DenoiserGradientsMatchFiniteDifferences) {
  auto model = fixtures::micro_bundle<double>(22);
  auto& net = model.denoiser();
  const Tensor<double> z = random_tensor(model.config().codeword_shape().with_batch(4), 1);
  const Tensor<double> n = random_tensor(z.shape(), 2, 0.5);
  auto g = net.make_gradients();
  denoiser_train_pass(net, z, n, g);
  auto f = [&]() {
    auto tmp = net.make_gradients();
    return denoiser_train_pass(net, z, n, tmp);
  };
  for (auto* p : net.params()) EXPECT_LT(max_relative_error(numeric_gradient(p->value, f), g[p->slot]), 1e-5) << p->name;
}

TEST(TrainConfig, ScheduleAndValidation) {
  auto c = published_cifar_jscc_schedule(5, {1, 6});
  EXPECT_EQ(c.batch_size, 64);
  EXPECT_EQ(c.learning_rate_at(117149), 2e-4);
  EXPECT_NEAR(c.learning_rate_at(117150), 2e-5, 1e-20);
  EXPECT_EQ(c.optimizer.beta1, 0.0);
  EXPECT_EQ(published_cifar_denoiser_schedule(5, {1, 6}).optimizer.beta1, 0.9);
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = desk_schedule(5, {1, 6}, 10);
  c.optimizer.beta2 = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = desk_schedule(5, {1, 6}, 10);
  c.checkpoint_every = 5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainJscc, LossDecreasesOnMicroModel) {
  const auto data = micro_data(64);
  TrainHistory h;
  std::ostringstream log;
  auto cfg = micro_schedule(300);
  cfg.log_every = 100;
  std::vector<long> logged;
  TrainHooks hooks{[&](const TrainLogLine& l) { logged.push_back(l.step); }, &log};
  auto model = train_jscc<double>(cfg, fixtures::micro_config(), {3, 3, 4, 2, true}, data, hooks, &h);
  ASSERT_EQ(h.losses.size(), 300u);
  EXPECT_LT(mean(h.losses, 260, 300), 0.7 * mean(h.losses, 0, 40));
  EXPECT_EQ(model.metadata().jscc_steps, 300);
  EXPECT_FALSE(model.has_denoiser());
  EXPECT_EQ(logged, (std::vector<long>{0, 100, 200, 299}));
  std::istringstream lines(log.str());
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["phase"], "jscc");
    EXPECT_TRUE(j.contains("loss") && j.contains("lr") && j.contains("wall_s"));
    ++n;
  }
  EXPECT_EQ(n, 4);
}

TEST(TrainJscc, IsDeterministicForASeed) {
  const auto data = micro_data(16);
  TrainHistory a, b;
  train_jscc<double>(micro_schedule(5), fixtures::micro_config(), {3, 3, 4, 2, true}, data, {}, &a);
  train_jscc<double>(micro_schedule(5), fixtures::micro_config(), {3, 3, 4, 2, true}, data, {}, &b);
  EXPECT_EQ(a.losses, b.losses);
}

TEST(TrainJscc, Errors) {
  EXPECT_THROW(train_jscc<double>(micro_schedule(5), fixtures::micro_config(), {3, 3, 4, 2, true}, DatasetHandle{}),
               DataError);
  EXPECT_THROW(train_jscc<double>(desk_schedule(5, {1, 6}, 5), fixtures::micro_config(), {3, 3, 4, 2, true},
                                  micro_data(4)),
               ConfigError);
  std::vector<SourceImage> bad{SourceImage({1, 3, 8, 8}, NAN)};
  DatasetHandle nan_data(DatasetConfig{}, bad);
  EXPECT_THROW(train_jscc<double>(micro_schedule(5), fixtures::micro_config(), {3, 3, 4, 2, true}, nan_data),
               NumericError);
}

TEST(TrainDenoiser, LearnsBelowTheNoiseEnergy) {
  const auto data = micro_data(64);
  auto model = train_jscc<double>(micro_schedule(50), fixtures::micro_config(), {4, 3, 8, 2, true}, data);
  TrainHistory h;
  auto cfg = micro_schedule(400);
  cfg.batch_size = 16;
  train_denoiser(cfg, model, data, {}, &h);
  ASSERT_TRUE(model.has_denoiser());
  EXPECT_EQ(model.metadata().denoiser_steps, 400);
  // Predicting zero costs sigma^2 k on average.
  const double trivial = std::pow(sigma_from_snr(5.0), 2) * double(model.codeword_dim());
  EXPECT_LT(mean(h.losses, 300, 400), 0.9 * trivial);

  auto wrong = cfg;
  wrong.snr_train_db = 7.0;
  EXPECT_THROW(train_denoiser(wrong, model, data), ConfigError);
  EXPECT_THROW(train_denoiser(cfg, model, DatasetHandle{}), DataError);
}
