#pragma once

// Demonstration sources: a random-shooting kinodynamic planner and scripted
// expert controllers, plus a dataset builder writing JSONL + manifest.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "psse/data.hpp"
#include "psse/envs.hpp"
#include "psse/stats.hpp"

namespace psse {

struct GoalSpec {
  std::function<bool(const Vec&)> reached;
  std::function<double(const Vec&)> cost;
};

/// Where a unit-inertia coordinate comes to rest under full braking.
inline double stopping_point(double q, double v, double max_accel) { return q + v * std::abs(v) / (2.0 * max_accel); }

inline Vec reacher_ik(const Vec& s, const ReacherConstants& c = {}) {
  const double x = s(4), y = s(5);
  const double r2 = x * x + y * y;
  const double c2 = std::clamp((r2 - c.link1 * c.link1 - c.link2 * c.link2) / (2.0 * c.link1 * c.link2), -1.0, 1.0);
  Vec best(2);
  double best_dist = std::numeric_limits<double>::infinity();
  for (double sign : {1.0, -1.0}) {
    const double q2 = sign * std::acos(c2);
    const double q1 = std::atan2(y, x) - std::atan2(c.link2 * std::sin(q2), c.link1 + c.link2 * std::cos(q2));
    const double d = std::abs(wrap_angle(q1 - s(0))) + std::abs(wrap_angle(q2 - s(1)));
    if (d < best_dist) {
      best_dist = d;
      best << q1, q2;
    }
  }
  return best;
}

/// Goal band and shaped cost-to-go used by both demonstration sources.
inline GoalSpec default_goal(const Env& env) {
  const auto& sp = env.spec();
  switch (sp.task) {
    case Task::swingup: {
      const CartpoleConstants c = env.cartpole();
      return {[](const Vec& s) { return std::abs(wrap_angle(s(2))) < 0.2 && std::abs(s(3)) < 1.0; },
              [c](const Vec& s) {
                const double e = pole_energy(s, c) / (c.pole_mass * c.gravity * c.half_length);
                return e * e + (1.0 - std::cos(s(2))) + 0.02 * s(3) * s(3);
              }};
    }
    case Task::balance:
      return {[](const Vec& s) {
                return std::abs(s(0)) < 0.05 && std::abs(s(1)) < 0.1 && std::abs(wrap_angle(s(2))) < 0.02 &&
                       std::abs(s(3)) < 0.1;
              },
              [](const Vec& s) {
                // LQR cost-to-go x'Px of the upright linearisation.
                static const Eigen::Matrix4d p = (Eigen::Matrix4d() << 6.518173, 3.748657, 10.571241, 2.840772,
                                                  3.748657, 3.809281, 10.940263, 2.984929, 10.571241, 10.940263,
                                                  48.467905, 10.175114, 2.840772, 2.984929, 10.175114, 2.712321)
                                                     .finished();
                Eigen::Vector4d x(s(0), s(1), wrap_angle(s(2)), s(3));
                return x.dot(p * x);
              }};
    case Task::reacher: {
      const ReacherConstants c = env.reacher();
      return {[c](const Vec& s) { return (reacher_tip(s, c) - s.tail<2>()).norm() < 0.01 && s.segment<2>(2).norm() < 0.2; },
              [c](const Vec& s) {
                const Vec q = reacher_ik(s, c);
                double cost = (reacher_tip(s, c) - s.tail<2>()).norm();
                for (int j = 0; j < 2; ++j) cost += std::abs(wrap_angle(stopping_point(s(j), s(2 + j), c.torque_bound) - q(j)));
                return cost;
              }};
    }
    case Task::reach_point:
      return {[](const Vec& s) { return std::abs(s(0) - 1.0) < 0.05; },
              [](const Vec& s) { return std::abs(stopping_point(s(0), s(1), 1.0) - 1.0); }};
  }
  throw std::invalid_argument("no goal defined for " + sp.id);
}

struct PlannerConfig {
  GoalSpec goal;
  std::size_t samples = 64;         // candidate segments per iteration
  std::size_t segment_length = 10;  // steps per segment, control held constant
  std::size_t iterations = 200;     // segment budget
  std::uint64_t seed = 0;
  StateMetric metric;
  double path_weight = 0.0;  // weight of the segment's path length in the score

  void validate() const {
    if (samples < 1) throw std::invalid_argument("planner needs at least one sample per iteration");
    if (segment_length < 1) throw std::invalid_argument("planner segment length must be positive");
    if (!goal.reached || !goal.cost) throw std::invalid_argument("planner needs a goal predicate and a goal cost");
  }
};

struct PlanResult {
  Trajectory trajectory;
  bool success = false;
  std::vector<double> accepted_scores;  // score of the chosen segment per iteration
  std::vector<double> best_rejected;    // lowest score among the other candidates
};

/// Greedy random shooting. `System` provides spec(), step(s, a) and
/// clip_action(a); Env satisfies this.
template <class System>
PlanResult plan_kinodynamic(const System& sys, const Vec& start, const PlannerConfig& cfg) {
  cfg.validate();
  const auto& sp = sys.spec();
  PlanResult out;
  out.trajectory.env_id = sp.id;
  out.trajectory.dt = sp.dt;
  out.trajectory.states.push_back(start);
  if (cfg.goal.reached(start)) {
    out.success = true;
    return out;
  }

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Vec s = start;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    double best = std::numeric_limits<double>::infinity(), runner_up = best;
    std::vector<Vec> best_states, best_controls;
    std::size_t best_hit = 0;
    for (std::size_t k = 0; k < cfg.samples; ++k) {
      Vec a(sp.action_dim);
      for (Eigen::Index j = 0; j < a.size(); ++j) a(j) = sp.action_bound * u(rng);
      a = sys.clip_action(a);
      std::vector<Vec> states;
      Vec x = s;
      double length = 0.0;
      std::size_t hit = 0;
      for (std::size_t t = 0; t < cfg.segment_length; ++t) {
        const Vec nx = sys.step(x, a);
        length += state_distance(x, nx, cfg.metric);
        x = nx;
        states.push_back(x);
        if (cfg.goal.reached(x)) {
          hit = t + 1;
          break;
        }
      }
      const double score = cfg.goal.cost(x) + cfg.path_weight * length;
      // Candidates that reach the goal always beat those that do not.
      const bool better = (hit && !best_hit) || ((hit != 0) == (best_hit != 0) && score < best) || best_states.empty();
      if (better) {
        if (!best_states.empty()) runner_up = std::min(runner_up, best);
        best = score;
        best_states = std::move(states);
        best_controls.assign(best_states.size(), a);
        best_hit = hit;
      } else if (score < runner_up) {
        runner_up = score;
      }
    }
    out.accepted_scores.push_back(best);
    out.best_rejected.push_back(runner_up);
    for (std::size_t t = 0; t < best_states.size(); ++t) {
      out.trajectory.states.push_back(best_states[t]);
      out.trajectory.controls.push_back(best_controls[t]);
    }
    s = best_states.back();
    if (best_hit) {
      out.success = true;
      break;
    }
  }
  return out;
}

/// Frozen gains for the scripted experts.
struct ExpertGains {
  // Swingup: pole-energy pumping toward a small positive energy offset, then
  // an LQR catch near upright (Q = diag(5, 1, 50, 2), R = 0.05 on the
  // linearised upright model).
  double energy_gain = 1000.0;
  double energy_offset = 0.15;
  double centering_gain = 0.0;
  double damping_gain = 3.0;
  double catch_angle = 0.6;
  double catch_rate = 3.5;
  std::array<double, 4> lqr{-10.0, -13.036, -84.340, -21.142};
  // Reacher joint-space PD toward the inverse-kinematics solution.
  double reacher_kp = 5.0;
  double reacher_kd = 4.0;
  // Double-integrator PD.
  double point_kp = 4.0;
  double point_kd = 4.0;
};

inline Vec expert_action(const Env& env, const Vec& s, const ExpertGains& g = {}) {
  const auto& sp = env.spec();
  Vec a(sp.action_dim);
  switch (sp.task) {
    case Task::balance:
    case Task::swingup: {
      const auto& c = env.cartpole();
      const double th = wrap_angle(s(2));
      const bool catching = sp.task == Task::balance || (std::abs(th) < g.catch_angle && std::abs(s(3)) < g.catch_rate);
      if (catching) {
        a(0) = -(g.lqr[0] * s(0) + g.lqr[1] * s(1) + g.lqr[2] * th + g.lqr[3] * s(3));
        break;
      }
      double acc;
      if (std::abs(s(3)) < 1e-3 && std::abs(th) > 3.0) {
        acc = 9.0;  // kick out of the hanging equilibrium
      } else {
        const double e = pole_energy(s, c);
        const double dir = s(3) * std::cos(s(2));
        acc = -g.energy_gain * (g.energy_offset - e) * ((dir > 0) - (dir < 0));
      }
      acc -= g.centering_gain * s(0) + g.damping_gain * s(1);
      a(0) = (c.cart_mass + c.pole_mass) * acc;
      break;
    }
    case Task::reacher: {
      const Vec q = reacher_ik(s, env.reacher());
      for (int j = 0; j < 2; ++j) a(j) = g.reacher_kp * wrap_angle(q(j) - s(j)) - g.reacher_kd * s(2 + j);
      break;
    }
    case Task::reach_point:
      a(0) = g.point_kp * (1.0 - s(0)) - g.point_kd * s(1);
      break;
  }
  return env.clip_action(a);
}

struct RolloutResult {
  Trajectory trajectory;
  bool success = false;
};

/// Closed-loop expert rollout from `start`, stopping at the goal band.
inline RolloutResult scripted_expert(const Env& env, const Vec& start, std::size_t budget, const ExpertGains& g = {}) {
  const GoalSpec goal = default_goal(env);
  RolloutResult out;
  out.trajectory.env_id = env.spec().id;
  out.trajectory.dt = env.spec().dt;
  out.trajectory.states.push_back(start);
  Vec s = start;
  if (goal.reached(s)) {
    out.success = true;
    return out;
  }
  for (std::size_t t = 0; t < budget; ++t) {
    const Vec a = expert_action(env, s, g);
    s = env.step(s, a);
    out.trajectory.states.push_back(s);
    out.trajectory.controls.push_back(a);
    if (goal.reached(s)) {
      out.success = true;
      break;
    }
  }
  return out;
}

/// Replays recorded controls from the first state.
inline std::vector<Vec> resimulate(const Env& env, const Trajectory& t) {
  std::vector<Vec> states{t.states.front()};
  for (const auto& a : t.controls) states.push_back(env.step(states.back(), a));
  return states;
}

enum class DemoSource { planner, scripted };

inline DemoSource parse_demo_source(const std::string& s) {
  if (s == "planner") return DemoSource::planner;
  if (s == "scripted") return DemoSource::scripted;
  throw std::invalid_argument("unknown demonstration source '" + s + "' (expected planner or scripted)");
}

inline std::string to_string(DemoSource s) { return s == DemoSource::planner ? "planner" : "scripted"; }

struct DatasetConfig {
  std::string env_id = "cartpole-swingup";
  DemoSource source = DemoSource::scripted;
  std::size_t count = 200;
  std::uint64_t seed = 0;
  double min_success_rate = 0.9;
  std::size_t budget = 500;  // steps for scripted rollouts, segments for the planner
  std::size_t planner_samples = 64;
  std::size_t planner_segment = 10;
};

struct Dataset {
  std::vector<Trajectory> trajectories;
  nlohmann::json manifest;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint64_t attempt_seed(std::uint64_t seed, std::size_t attempt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(attempt), 0x5eedu};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

/// Rolls out demonstrations until `count` successful ones (with at least
/// three states) are collected. Start states that already satisfy the goal
/// are skipped without counting as attempts.
inline Dataset generate_dataset(const DatasetConfig& cfg) {
  const Env env(cfg.env_id);
  if (!(cfg.min_success_rate >= 0.0 && cfg.min_success_rate <= 1.0))
    throw std::invalid_argument("min_success_rate must lie in [0, 1]");
  const std::size_t max_attempts =
      cfg.count == 0 ? 0
                     : static_cast<std::size_t>(std::ceil(cfg.count / std::max(cfg.min_success_rate, 0.05))) + 10;
  Dataset ds;
  std::vector<std::size_t> used;
  std::size_t attempts = 0, successes = 0, skipped = 0, index = 0;
  while (ds.trajectories.size() < cfg.count && attempts < max_attempts) {
    const std::uint64_t s = attempt_seed(cfg.seed, index++);
    std::mt19937_64 rng(s);
    const Vec start = env.reset(rng);
    bool ok;
    Trajectory traj;
    if (cfg.source == DemoSource::scripted) {
      auto r = scripted_expert(env, start, cfg.budget);
      ok = r.success;
      traj = std::move(r.trajectory);
    } else {
      PlannerConfig pc;
      pc.goal = default_goal(env);
      pc.samples = cfg.planner_samples;
      pc.segment_length = cfg.planner_segment;
      pc.iterations = cfg.budget;
      pc.seed = s;
      pc.metric = env.state_metric();
      auto r = plan_kinodynamic(env, start, pc);
      ok = r.success;
      traj = std::move(r.trajectory);
    }
    if (traj.states.size() < 3) {
      ++skipped;
      continue;
    }
    ++attempts;
    if (ok) {
      ++successes;
      used.push_back(index - 1);
      ds.trajectories.push_back(std::move(traj));
    }
  }

  std::vector<double> lengths, paths;
  const StateMetric metric = env.state_metric();
  for (const auto& t : ds.trajectories) {
    lengths.push_back(static_cast<double>(t.states.size()));
    paths.push_back(path_length(t, metric));
  }
  const double rate = attempts ? static_cast<double>(successes) / static_cast<double>(attempts) : 1.0;
  auto stat = [](const std::vector<double>& v) {
    if (v.empty()) return nlohmann::json{{"mean", nullptr}, {"std", nullptr}, {"min", nullptr}, {"max", nullptr}};
    return nlohmann::json{{"mean", mean(v)},
                          {"std", stddev(v)},
                          {"min", *std::min_element(v.begin(), v.end())},
                          {"max", *std::max_element(v.begin(), v.end())}};
  };
  ds.manifest = {{"env_id", cfg.env_id},
                 {"source", to_string(cfg.source)},
                 {"seed", cfg.seed},
                 {"requested", cfg.count},
                 {"emitted", ds.trajectories.size()},
                 {"attempts", attempts},
                 {"successes", successes},
                 {"skipped_at_goal", skipped},
                 {"success_rate", rate},
                 {"min_success_rate", cfg.min_success_rate},
                 {"attempt_indices", used},
                 {"length_states", stat(lengths)},
                 {"path_length", stat(paths)}};
  if (rate < cfg.min_success_rate || ds.trajectories.size() < cfg.count)
    throw DatasetError("demonstration success rate " + fmt_num(rate) + " (" + std::to_string(successes) + "/" +
                       std::to_string(attempts) + ", emitted " + std::to_string(ds.trajectories.size()) + " of " +
                       std::to_string(cfg.count) + ") is below the floor " + fmt_num(cfg.min_success_rate));
  return ds;
}

/// Writes `demos.jsonl` and `demos_manifest.json` into `dir`.
inline Dataset build_dataset(const DatasetConfig& cfg, const std::filesystem::path& dir) {
  Dataset ds = generate_dataset(cfg);
  std::filesystem::create_directories(dir);
  save_trajectories(ds.trajectories, dir / "demos.jsonl");
  std::ofstream(dir / "demos_manifest.json") << ds.manifest.dump(2) << "\n";
  return ds;
}

}  // namespace psse
