#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "psse/distributions.hpp"

using namespace psse;
using Eigen::VectorXd;

namespace {

DiagGaussian scalar(double mu, double sigma) { return {VectorXd::Constant(1, mu), VectorXd::Constant(1, sigma)}; }

// Univariate normal log-density written out directly.
double scalar_log_density(double mu, double sigma, double x) {
  return -0.5 * std::log(2.0 * std::numbers::pi * sigma * sigma) - (x - mu) * (x - mu) / (2.0 * sigma * sigma);
}

}  // namespace

TEST(LogProb, StandardNormalAtZero) {
  EXPECT_NEAR(log_prob(DiagGaussian::standard(1), VectorXd::Zero(1)), -0.9189385332046727, 1e-15);
  EXPECT_NEAR(log_prob(DiagGaussian::standard(4), VectorXd::Zero(4)), -3.6757541328186907, 1e-14);
}

TEST(LogProb, ShiftedScaled) {
  const double expected = scalar_log_density(1.0, 2.0, 3.0);
  EXPECT_NEAR(expected, -2.112085713764618, 1e-12);
  EXPECT_NEAR(log_prob(scalar(1.0, 2.0), VectorXd::Constant(1, 3.0)), expected, 1e-14);
}

TEST(LogProb, SumsOverDimensions) {
  DiagGaussian d{VectorXd(3), VectorXd(3)};
  d.mu << 0.5, -1.0, 2.0;
  d.sigma << 0.3, 1.7, 0.9;
  VectorXd x(3);
  x << 0.1, 0.2, 3.3;
  double expected = 0.0;
  for (int i = 0; i < 3; ++i) expected += scalar_log_density(d.mu(i), d.sigma(i), x(i));
  EXPECT_NEAR(log_prob(d, x), expected, 1e-13);
}

TEST(LogProb, DimensionMismatch) {
  EXPECT_THROW(log_prob(DiagGaussian::standard(2), VectorXd::Zero(3)), std::invalid_argument);
}

TEST(KlDivergence, ClosedFormCases) {
  EXPECT_EQ(kl_divergence(DiagGaussian::standard(3), DiagGaussian::standard(3)), 0.0);
  EXPECT_NEAR(kl_divergence(scalar(1.0, 1.0), scalar(0.0, 1.0)), 0.5, 1e-15);
  const double expected = std::log(1.0 / 0.5) + (0.25 - 1.0) / 2.0;
  EXPECT_NEAR(expected, 0.3181471805599453, 1e-15);
  EXPECT_NEAR(kl_divergence(scalar(0.0, 0.5), scalar(0.0, 1.0)), expected, 1e-15);
}

TEST(KlDivergence, MonteCarloCrossCheck) {
  // E_q[log q - log p] with 1e6 samples for q = N(0, 0.5), p = N(0, 1).
  std::mt19937_64 rng(42);
  std::normal_distribution<double> n(0.0, 1.0);
  const auto q = scalar(0.0, 0.5), p = scalar(0.0, 1.0);
  const int samples = 1000000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < samples; ++i) {
    const double x = 0.5 * n(rng);
    const double v = scalar_log_density(0.0, 0.5, x) - scalar_log_density(0.0, 1.0, x);
    sum += v;
    sq += v * v;
  }
  const double m = sum / samples;
  const double se = std::sqrt((sq / samples - m * m) / samples);
  EXPECT_NEAR(m, kl_divergence(q, p), 3.0 * se);
}

TEST(KlDivergence, SelfIsZeroAndNonNegative) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> mu(-3, 3), sg(0.05, 4);
  for (int t = 0; t < 500; ++t) {
    DiagGaussian q{VectorXd(3), VectorXd(3)}, p{VectorXd(3), VectorXd(3)};
    for (int i = 0; i < 3; ++i) {
      q.mu(i) = mu(rng);
      q.sigma(i) = sg(rng);
      p.mu(i) = mu(rng);
      p.sigma(i) = sg(rng);
    }
    EXPECT_NEAR(kl_divergence(q, q), 0.0, 1e-12);
    EXPECT_GE(kl_divergence(q, p), -1e-12);
  }
}

TEST(KlDivergence, RejectsBadInputs) {
  EXPECT_THROW(kl_divergence(DiagGaussian::standard(2), DiagGaussian::standard(3)), std::invalid_argument);
  EXPECT_THROW(kl_divergence(scalar(0.0, 0.0), scalar(0.0, 1.0)), std::invalid_argument);
}

TEST(ReparamSample, Basics) {
  VectorXd eps(2);
  eps << 0.3, -1.2;
  DiagGaussian d{VectorXd(2), VectorXd(2)};
  d.mu << 1.0, 2.0;
  d.sigma << 0.5, 3.0;
  EXPECT_EQ(reparam_sample(d, VectorXd::Zero(2)), d.mu);
  EXPECT_EQ(reparam_sample(DiagGaussian::standard(2), eps), eps);
  VectorXd expected(2);
  expected << 1.0 + 0.5 * 0.3, 2.0 - 3.0 * 1.2;
  EXPECT_TRUE(reparam_sample(d, eps).isApprox(expected, 1e-15));
}

TEST(ReparamSample, EmpiricalMeanWithinCltBound) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  const auto d = scalar(2.0, 3.0);
  const int samples = 100000;
  double sum = 0.0;
  for (int i = 0; i < samples; ++i) sum += reparam_sample(d, VectorXd::Constant(1, n(rng)))(0);
  EXPECT_NEAR(sum / samples, 2.0, 3.0 * 3.0 / std::sqrt(samples));
}

TEST(Midpoint, EqualStandardNormals) {
  const auto a = DiagGaussian::standard(2);
  const auto plain = midpoint_distribution(a, a, false);
  EXPECT_TRUE(plain.mu.isZero(0.0));
  EXPECT_NEAR(plain.sigma(0), std::sqrt(0.5), 1e-15);
  const auto doubled = midpoint_distribution(a, a, true);
  EXPECT_NEAR(doubled.sigma(0), 1.0, 1e-15);
  EXPECT_NEAR(doubled.sigma(1), 1.0, 1e-15);
}

TEST(Midpoint, MeanIsAverage) {
  const auto m = midpoint_distribution(scalar(2.0, 1.0), scalar(4.0, 1.0), true);
  EXPECT_EQ(m.mu(0), 3.0);
}

TEST(Midpoint, DimensionMismatch) {
  EXPECT_THROW(midpoint_distribution(DiagGaussian::standard(2), DiagGaussian::standard(1), true), std::invalid_argument);
}

TEST(Midpoint, MatchesEmpiricalAverageOfSamples) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 1.0);
  DiagGaussian a{VectorXd(2), VectorXd(2)}, b{VectorXd(2), VectorXd(2)};
  a.mu << -1.0, 0.5;
  a.sigma << 0.4, 2.0;
  b.mu << 3.0, 0.0;
  b.sigma << 1.3, 0.7;
  const auto mid = midpoint_distribution(a, b, false);
  const int samples = 100000;
  VectorXd sum = VectorXd::Zero(2), sq = VectorXd::Zero(2);
  VectorXd ea(2), eb(2);
  for (int i = 0; i < samples; ++i) {
    for (int k = 0; k < 2; ++k) {
      ea(k) = n(rng);
      eb(k) = n(rng);
    }
    const VectorXd z = 0.5 * (reparam_sample(a, ea) + reparam_sample(b, eb));
    sum += z;
    sq += z.cwiseProduct(z);
  }
  for (int k = 0; k < 2; ++k) {
    const double m = sum(k) / samples;
    const double var = sq(k) / samples - m * m;
    const double v = mid.sigma(k) * mid.sigma(k);
    EXPECT_NEAR(m, mid.mu(k), 4.0 * std::sqrt(v / samples));
    // Var of the sample variance of a normal is 2 v^2 / (n - 1).
    EXPECT_NEAR(var, v, 4.0 * std::sqrt(2.0 * v * v / (samples - 1)));
  }
}
