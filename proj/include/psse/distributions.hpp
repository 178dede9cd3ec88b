#pragma once

// Diagonal Gaussian algebra. All functions are pure.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace psse {

/// Lower bound applied to standard deviations inside losses.
inline constexpr double kSigmaFloor = 1e-6;

struct DiagGaussian {
  Eigen::VectorXd mu;
  Eigen::VectorXd sigma;  // standard deviations, not variances

  Eigen::Index dim() const { return mu.size(); }

  static DiagGaussian standard(Eigen::Index k) { return {Eigen::VectorXd::Zero(k), Eigen::VectorXd::Ones(k)}; }

  void validate() const {
    if (mu.size() != sigma.size())
      throw std::invalid_argument("DiagGaussian: mu has " + std::to_string(mu.size()) + " components, sigma has " +
                                  std::to_string(sigma.size()));
    if (!mu.allFinite() || !sigma.allFinite() || (sigma.array() <= 0.0).any())
      throw std::invalid_argument("DiagGaussian: sigma must be positive and finite");
  }
};

namespace detail {
inline void require_same_dim(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a != b)
    throw std::invalid_argument(std::string(what) + ": dimension mismatch (" + std::to_string(a) + " vs " +
                                std::to_string(b) + ")");
}
}  // namespace detail

inline double log_prob(const DiagGaussian& d, const Eigen::VectorXd& x) {
  d.validate();
  detail::require_same_dim(d.dim(), x.size(), "log_prob");
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  const auto z = (x - d.mu).array() / d.sigma.array();
  return -(half_log_2pi * static_cast<double>(d.dim()) + d.sigma.array().log().sum() + 0.5 * z.square().sum());
}

/// KL(q || p), summed over dimensions.
inline double kl_divergence(const DiagGaussian& q, const DiagGaussian& p) {
  q.validate();
  p.validate();
  detail::require_same_dim(q.dim(), p.dim(), "kl_divergence");
  const auto vq = q.sigma.array().square();
  const auto vp = p.sigma.array().square();
  const auto dm = (q.mu - p.mu).array();
  const double kl =
      ((p.sigma.array() / q.sigma.array()).log() + (vq + dm.square()) / (2.0 * vp) - 0.5).sum();
  return std::max(kl, 0.0);
}

/// mu + sigma * noise, with noise ~ N(0, I) supplied by the caller.
inline Eigen::VectorXd reparam_sample(const DiagGaussian& d, const Eigen::VectorXd& noise) {
  detail::require_same_dim(d.dim(), noise.size(), "reparam_sample");
  return d.mu + d.sigma.cwiseProduct(noise);
}

/// Law of (z_a + z_b) / 2 for independent z_a ~ a, z_b ~ b. With
/// `variance_doubling` the variance is doubled so that, for matched inputs,
/// the result has the same spread as a and b themselves.
inline DiagGaussian midpoint_distribution(const DiagGaussian& a, const DiagGaussian& b, bool variance_doubling) {
  a.validate();
  b.validate();
  detail::require_same_dim(a.dim(), b.dim(), "midpoint_distribution");
  const double scale = variance_doubling ? 0.5 : 0.25;
  return {0.5 * (a.mu + b.mu), ((a.sigma.array().square() + b.sigma.array().square()) * scale).sqrt().matrix()};
}

}  // namespace psse
