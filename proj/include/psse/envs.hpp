#pragma once

// Analytic environments: frictionless cart-pole (balance / swingup), a planar
// two-link reacher, and a 1-D double integrator used for planner tests.
//
// State layouts
//   cartpole           (x [m], x_dot [m/s], theta [rad], theta_dot [rad/s]); theta = 0 is upright, stored unwrapped
//   reacher            (q1, q2 [rad], q1_dot, q2_dot [rad/s], target_x, target_y [m])
//   double-integrator  (x [m], x_dot [m/s])

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "psse/data.hpp"
#include "psse/embedding.hpp"
#include "psse/stats.hpp"

namespace psse {

struct CartpoleConstants {
  double cart_mass = 1.0;
  double pole_mass = 0.1;
  double half_length = 0.5;
  double gravity = 9.81;
  double track_half_width = 0.5;
  double force_bound = 10.0;
  int substeps = 20;  // integrator substeps per control step
};

struct ReacherConstants {
  double link1 = 0.1;
  double link2 = 0.11;
  double damping = 0.1;
  double torque_bound = 1.0;
  double target_radius = 0.2;
};

inline constexpr double kEnvDt = 0.01;

/// Semi-implicit Euler integration of the cart-pole ODE (pole modelled as a
/// uniform rod), `c.substeps` substeps per call. Leaving the track clamps the
/// cart to the wall with zero velocity.
inline Vec cartpole_step(const Vec& s, double force, double dt = kEnvDt, const CartpoleConstants& c = {}) {
  const double total = c.cart_mass + c.pole_mass;
  const double h = dt / c.substeps;
  Vec n = s;
  for (int k = 0; k < c.substeps; ++k) {
    const double th = n(2), w = n(3);
    const double sin_t = std::sin(th), cos_t = std::cos(th);
    const double temp = (force + c.pole_mass * c.half_length * w * w * sin_t) / total;
    const double th_acc =
        (c.gravity * sin_t - cos_t * temp) / (c.half_length * (4.0 / 3.0 - c.pole_mass * cos_t * cos_t / total));
    const double x_acc = temp - c.pole_mass * c.half_length * th_acc * cos_t / total;
    n(1) += x_acc * h;
    n(3) += th_acc * h;
    n(0) += n(1) * h;
    n(2) += n(3) * h;
    if (std::abs(n(0)) > c.track_half_width) {
      n(0) = std::copysign(c.track_half_width, n(0));
      n(1) = 0.0;
    }
  }
  return n;
}

/// Total mechanical energy; potential measured from the pivot height.
inline double cartpole_energy(const Vec& s, const CartpoleConstants& c = {}) {
  const double m = c.pole_mass, l = c.half_length;
  return 0.5 * (c.cart_mass + m) * s(1) * s(1) + m * l * std::cos(s(2)) * s(1) * s(3) +
         0.5 * (4.0 / 3.0) * m * l * l * s(3) * s(3) + m * c.gravity * l * std::cos(s(2));
}

/// Pole energy relative to resting upright (0 upright, -2 m g l hanging).
inline double pole_energy(const Vec& s, const CartpoleConstants& c = {}) {
  const double m = c.pole_mass, l = c.half_length;
  return 0.5 * (4.0 / 3.0) * m * l * l * s(3) * s(3) + m * c.gravity * l * (std::cos(s(2)) - 1.0);
}

/// Per-joint damped double integrator: q_ddot = tau - c * q_dot.
inline Vec reacher_step(const Vec& s, const Vec& torques, double dt = kEnvDt, const ReacherConstants& c = {}) {
  Vec n = s;
  for (int j = 0; j < 2; ++j) {
    n(2 + j) = s(2 + j) + (torques(j) - c.damping * s(2 + j)) * dt;
    n(j) = s(j) + n(2 + j) * dt;
  }
  return n;
}

inline Eigen::Vector2d reacher_tip(const Vec& s, const ReacherConstants& c = {}) {
  return {c.link1 * std::cos(s(0)) + c.link2 * std::cos(s(0) + s(1)),
          c.link1 * std::sin(s(0)) + c.link2 * std::sin(s(0) + s(1))};
}

enum class EnvKind { cartpole, reacher, double_integrator };
enum class Task { balance, swingup, reacher, reach_point };
enum class ObsMode { raw, trig, embedded, augmented };

inline ObsMode parse_obs_mode(const std::string& s) {
  if (s == "raw") return ObsMode::raw;
  if (s == "trig") return ObsMode::trig;
  if (s == "embedded") return ObsMode::embedded;
  if (s == "augmented") return ObsMode::augmented;
  throw std::invalid_argument("unknown observation mode '" + s + "'");
}

inline std::string to_string(ObsMode m) {
  switch (m) {
    case ObsMode::raw: return "raw";
    case ObsMode::trig: return "trig";
    case ObsMode::embedded: return "embedded";
    case ObsMode::augmented: return "augmented";
  }
  return "?";
}

inline Task parse_task(const std::string& s) {
  if (s == "balance") return Task::balance;
  if (s == "swingup") return Task::swingup;
  if (s == "reacher") return Task::reacher;
  if (s == "reach-point") return Task::reach_point;
  throw std::invalid_argument("unknown task '" + s + "'");
}

struct EnvSpec {
  std::string id;
  EnvKind kind = EnvKind::cartpole;
  Task task = Task::balance;
  Eigen::Index state_dim = 0;
  Eigen::Index action_dim = 0;
  double action_bound = 0.0;
  double dt = kEnvDt;
  std::size_t horizon = 100;
  ObsMode default_obs = ObsMode::raw;
  Eigen::Index embed_dim = 0;  // leading state components seen by the encoder
};

/// Value-semantic environment description; all methods are const and pure
/// apart from reset's use of the caller's RNG.
class Env {
 public:
  explicit Env(const std::string& id) {
    spec_.id = id;
    if (id == "cartpole-balance" || id == "cartpole-swingup") {
      spec_.kind = EnvKind::cartpole;
      spec_.task = id == "cartpole-balance" ? Task::balance : Task::swingup;
      spec_.state_dim = 4;
      spec_.action_dim = 1;
      spec_.action_bound = cartpole_.force_bound;
      spec_.horizon = spec_.task == Task::swingup ? 200 : 100;
      spec_.embed_dim = 4;
    } else if (id == "reacher-raw" || id == "reacher-trig") {
      spec_.kind = EnvKind::reacher;
      spec_.task = Task::reacher;
      spec_.state_dim = 6;
      spec_.action_dim = 2;
      spec_.action_bound = reacher_.torque_bound;
      spec_.horizon = 100;
      spec_.default_obs = id == "reacher-trig" ? ObsMode::trig : ObsMode::raw;
      spec_.embed_dim = 4;
    } else if (id == "double-integrator") {
      spec_.kind = EnvKind::double_integrator;
      spec_.task = Task::reach_point;
      spec_.state_dim = 2;
      spec_.action_dim = 1;
      spec_.action_bound = 1.0;
      spec_.horizon = 200;
      spec_.embed_dim = 2;
    } else {
      throw std::invalid_argument("unknown environment id '" + id + "'");
    }
  }

  static const std::vector<std::string>& ids() {
    static const std::vector<std::string> v{"cartpole-balance", "cartpole-swingup", "reacher-raw", "reacher-trig",
                                            "double-integrator"};
    return v;
  }

  const EnvSpec& spec() const { return spec_; }
  const CartpoleConstants& cartpole() const { return cartpole_; }
  const ReacherConstants& reacher() const { return reacher_; }

  Vec clip_action(const Vec& a) const { return a.cwiseMax(-spec_.action_bound).cwiseMin(spec_.action_bound); }

  Vec step(const Vec& s, const Vec& action) const {
    if (s.size() != spec_.state_dim || action.size() != spec_.action_dim)
      throw std::invalid_argument(spec_.id + ": state/action dimension mismatch");
    const Vec a = clip_action(action);
    switch (spec_.kind) {
      case EnvKind::cartpole: return cartpole_step(s, a(0), spec_.dt, cartpole_);
      case EnvKind::reacher: return reacher_step(s, a, spec_.dt, reacher_);
      case EnvKind::double_integrator: {
        Vec n(2);
        n(1) = s(1) + a(0) * spec_.dt;
        n(0) = s(0) + n(1) * spec_.dt;
        return n;
      }
    }
    return s;
  }

  Vec reset(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Vec s(spec_.state_dim);
    switch (spec_.task) {
      case Task::balance:
        s << 0.05 * u(rng), 0.05 * u(rng), 0.05 * u(rng), 0.05 * u(rng);
        break;
      case Task::swingup:
        s << 0.2 * u(rng), 0.5 * u(rng), std::numbers::pi * u(rng), 0.5 * u(rng);
        break;
      case Task::reacher: {
        const double r = reacher_.target_radius * std::sqrt(0.5 * (u(rng) + 1.0));
        const double phi = std::numbers::pi * u(rng);
        s << std::numbers::pi * u(rng), std::numbers::pi * u(rng), 0.1 * u(rng), 0.1 * u(rng), r * std::cos(phi),
            r * std::sin(phi);
        break;
      }
      case Task::reach_point:
        s << 0.0, 0.0;
        break;
    }
    return s;
  }

  /// Balance: +1 while upright and on the track. Swingup: cos(theta) minus
  /// control cost. Reacher: negative tip distance minus control cost.
  double reward(const Vec& s, const Vec& action) const {
    switch (spec_.task) {
      case Task::balance: return balance_ok(s) ? 1.0 : 0.0;
      case Task::swingup: return std::cos(s(2)) - 0.01 * action.squaredNorm();
      case Task::reacher: return -(reacher_tip(s, reacher_) - s.tail<2>()).norm() - 0.01 * action.squaredNorm();
      case Task::reach_point: return -std::abs(s(0) - 1.0);
    }
    return 0.0;
  }

  /// Only balance episodes end early.
  bool terminal(const Vec& s) const { return spec_.task == Task::balance && !balance_ok(s); }

  Vec embed_input(const Vec& s) const { return s.head(spec_.embed_dim); }

  Vec observe(const Vec& s, ObsMode mode, const EmbeddingModel* model = nullptr) const {
    switch (mode) {
      case ObsMode::raw: return s;
      case ObsMode::trig: {
        if (spec_.kind != EnvKind::reacher) throw std::invalid_argument("trig observations are only defined for the reacher");
        Vec o(8);
        o << std::sin(s(0)), std::sin(s(1)), std::cos(s(0)), std::cos(s(1)), s(2), s(3), s(4), s(5);
        return o;
      }
      case ObsMode::embedded:
      case ObsMode::augmented: {
        if (model == nullptr) throw std::invalid_argument(to_string(mode) + " observations need an embedding model");
        if (static_cast<Eigen::Index>(model->state_dim) != spec_.embed_dim)
          throw std::invalid_argument("embedding model expects " + std::to_string(model->state_dim) +
                                      " inputs, environment provides " + std::to_string(spec_.embed_dim));
        const Vec z = encode_mean(*model, embed_input(s)).col(0);
        if (mode == ObsMode::embedded) return z;
        Vec o(s.size() + z.size());
        o << s, z;
        return o;
      }
    }
    return s;
  }

  Eigen::Index observation_dim(ObsMode mode, const EmbeddingModel* model = nullptr) const {
    switch (mode) {
      case ObsMode::raw: return spec_.state_dim;
      case ObsMode::trig: return spec_.state_dim + 2;
      case ObsMode::embedded: return model ? static_cast<Eigen::Index>(model->z_dim) : 0;
      case ObsMode::augmented: return spec_.state_dim + (model ? static_cast<Eigen::Index>(model->z_dim) : 0);
    }
    return 0;
  }

  /// Path-length metric over the encoder's input components.
  StateMetric state_metric(bool positions_only = false) const {
    StateMetric m;
    switch (spec_.kind) {
      case EnvKind::cartpole:
        m.angle_dims = {2};
        if (positions_only) m.dims = {0, 2};
        break;
      case EnvKind::reacher:
        m.angle_dims = {0, 1};
        m.dims = positions_only ? std::vector<Eigen::Index>{0, 1} : std::vector<Eigen::Index>{0, 1, 2, 3};
        break;
      case EnvKind::double_integrator:
        if (positions_only) m.dims = {0};
        break;
    }
    return m;
  }

  /// Expected undiscounted return of the zero-action policy.
  /// Deterministic in `seed`; used as the reference band for RL results.
  /// Zero-force returns over the reset distribution. The edges bound a mean
  /// of `n` episodes: mean +- 3 std / sqrt(n).
  struct ReturnBand {
    double mean = 0.0;
    double std = 0.0;
    std::size_t episodes = 0;
    double half_width(std::size_t n) const { return 3.0 * std / std::sqrt(static_cast<double>(n)); }
    double lower(std::size_t n) const { return mean - half_width(n); }
    double upper(std::size_t n) const { return mean + half_width(n); }
  };

  double rollout_return(Vec s, const std::function<Vec(const Vec&)>& policy) const {
    double total = 0.0;
    for (std::size_t t = 0; t < spec_.horizon; ++t) {
      const Vec a = clip_action(policy(s));
      total += reward(s, a);
      s = step(s, a);
      if (terminal(s)) break;
    }
    return total;
  }

  ReturnBand do_nothing_band(std::size_t episodes = 1000, std::uint64_t seed = 0) const {
    std::mt19937_64 rng(seed);
    std::vector<double> returns;
    const Vec zero = Vec::Zero(spec_.action_dim);
    for (std::size_t i = 0; i < episodes; ++i)
      returns.push_back(rollout_return(reset(rng), [&](const Vec&) { return zero; }));
    return {mean(returns), stddev(returns), episodes};
  }

 private:
  bool balance_ok(const Vec& s) const {
    return std::abs(wrap_angle(s(2))) < 0.2 && std::abs(s(0)) < cartpole_.track_half_width;
  }

  EnvSpec spec_;
  CartpoleConstants cartpole_;
  ReacherConstants reacher_;
};

}  // namespace psse
