#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "jscc/channel.hpp"

using namespace jscc;

namespace {

double sample_variance(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return acc / double(v.size() - 1);
}

}  // namespace

TEST(Rational, ParsesAndReduces) {
  EXPECT_EQ(Rational::parse("2/12"), (Rational{1, 6}));
  EXPECT_EQ(Rational::parse("2/12").reduced().den, 6);
  EXPECT_EQ(Rational::parse("3").num, 3);
  EXPECT_THROW(Rational::parse("0.5"), ConfigError);
  EXPECT_THROW(Rational::parse("1/0"), ConfigError);
  EXPECT_THROW(Rational::parse("-1/6"), ConfigError);
}

TEST(RateSpec, CodewordDimensionFollowsCpp) {
  const auto r = RateSpec::from_cpp(3 * 32 * 32, {1, 6});
  EXPECT_EQ(r.codeword_dim, 1024);
  EXPECT_EQ(RateSpec::from_cpp(3 * 32 * 32, {1, 12}).codeword_dim, 512);
  EXPECT_THROW(RateSpec::from_cpp(3 * 32 * 32, {1, 1}), ConfigError);  // k >= n
  EXPECT_THROW(RateSpec::from_cpp(10, {1, 7}), ConfigError);           // non-integer k
  EXPECT_THROW((RateSpec{100, 10, {1, 6}}.validate()), ConfigError);
}

TEST(Channel, SigmaFromSnr) {
  EXPECT_NEAR(sigma_from_snr(0.0), 1.0, 1e-15);
  EXPECT_NEAR(sigma_from_snr(20.0), 0.1, 1e-15);
  EXPECT_NEAR(sigma_from_snr(5.0), 0.5623413251903491, 1e-15);
  EXPECT_NEAR(snr_from_sigma(sigma_from_snr(7.0)), 7.0, 1e-12);
  EXPECT_NEAR((ChannelSpec{NoiseFamily::laplace, 2.0, 0}.laplace_scale()), std::sqrt(2.0), 1e-15);
}

TEST(Channel, GaussianAndLaplaceVarianceMatchSigmaSquared) {
  for (auto family : {NoiseFamily::gaussian, NoiseFamily::laplace}) {
    ChannelSpec spec{family, 0.7, 99};
    const auto n = sample_noise(spec, 1000000);
    EXPECT_NEAR(sample_variance(n) / (0.7 * 0.7), 1.0, 0.02) << to_string(family);
  }
}

TEST(Channel, LaplaceHasExcessKurtosisThree) {
  ChannelSpec spec{NoiseFamily::laplace, 1.0, 5};
  const auto n = sample_noise(spec, 1000000);
  double m2 = 0, m4 = 0;
  for (double x : n) {
    m2 += x * x;
    m4 += x * x * x * x;
  }
  m2 /= double(n.size());
  m4 /= double(n.size());
  EXPECT_NEAR(m4 / (m2 * m2), 6.0, 0.3);
}

TEST(Channel, MeasuredSnrOfFullPowerTransmissionsIsNominal) {
  const std::size_t k = 1024;
  std::vector<double> z(k, 1.0);  // ||z||^2 = k
  for (auto family : {NoiseFamily::gaussian, NoiseFamily::laplace}) {
    for (double snr : {0.0, 5.0, 15.0}) {
      Rng rng(3);
      ChannelSpec spec{family, sigma_from_snr(snr), 0};
      double mean = 0.0;
      for (int d = 0; d < 1000; ++d) mean += measure_snr_db(z, sample_noise(spec, k, rng));
      mean /= 1000.0;
      EXPECT_NEAR(mean, snr, 0.1) << to_string(family) << " " << snr;
    }
  }
}

TEST(Channel, SameSeedSameNoise) {
  ChannelSpec spec{NoiseFamily::gaussian, 0.3, 42};
  EXPECT_EQ(sample_noise(spec, 64), sample_noise(spec, 64));
  spec.seed = 43;
  EXPECT_NE(sample_noise(spec, 64), sample_noise(ChannelSpec{NoiseFamily::gaussian, 0.3, 42}, 64));
}

TEST(Channel, TransmitAddsNoiseAndDropsNormalization) {
  Codeword<float> z{Tensor<float>({2, 1, 2, 2}, 0.5f), true};
  ChannelSpec spec{NoiseFamily::gaussian, 0.1, 7};
  const auto y = transmit(z, spec);
  EXPECT_FALSE(y.normalized);
  const auto n = sample_noise(spec, 8);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_FLOAT_EQ(y.values[i], 0.5f + float(n[i]));
}

TEST(Channel, Errors) {
  EXPECT_THROW(sample_noise(ChannelSpec{NoiseFamily::gaussian, 0.0, 0}, 4), ConfigError);
  EXPECT_THROW(sample_noise(ChannelSpec{NoiseFamily::gaussian, NAN, 0}, 4), ConfigError);
  EXPECT_THROW(measure_snr_db(std::vector<double>{1, 2}, std::vector<double>{1}), ConfigError);
  EXPECT_THROW(measure_snr_db(std::vector<double>{1, 2}, std::vector<double>{0, 0}), NumericError);
  EXPECT_EQ(measure_snr_db(std::vector<double>{0, 0}, std::vector<double>{1, 0}), -INFINITY);
  EXPECT_THROW(parse_noise_family("rayleigh"), ConfigError);
  EXPECT_EQ(parse_noise_family("awln"), NoiseFamily::laplace);
}
