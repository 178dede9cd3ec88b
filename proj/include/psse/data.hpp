#pragma once

// Demonstration trajectories, triplet extraction and path lengths.
//
// Trajectory files are JSON lines, one trajectory per line:
//   {"env_id": "cartpole-swingup", "dt": 0.01,
//    "states": [[...], ...], "controls": [[...], ...]}
// "controls" is optional; when present it has one entry per transition.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace psse {

struct Trajectory {
  std::string env_id;
  double dt = 0.0;
  std::vector<Eigen::VectorXd> states;
  std::vector<Eigen::VectorXd> controls;  // empty, or states.size() - 1 entries

  std::size_t size() const { return states.size(); }
  Eigen::Index state_dim() const { return states.empty() ? 0 : states.front().size(); }

  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const {
    if (states.size() < 3) throw std::invalid_argument("trajectory has " + std::to_string(states.size()) + " states (need >= 3)");
    const auto n = states.front().size();
    if (n == 0) throw std::invalid_argument("trajectory has zero-length states");
    for (std::size_t i = 0; i < states.size(); ++i) {
      if (states[i].size() != n)
        throw std::invalid_argument("state " + std::to_string(i) + " has length " + std::to_string(states[i].size()) +
                                    ", expected " + std::to_string(n));
      if (!states[i].allFinite()) throw std::invalid_argument("state " + std::to_string(i) + " is not finite");
    }
    if (!controls.empty()) {
      if (controls.size() + 1 != states.size())
        throw std::invalid_argument("trajectory has " + std::to_string(controls.size()) + " controls for " +
                                    std::to_string(states.size()) + " states");
      for (std::size_t i = 0; i < controls.size(); ++i)
        if (!controls[i].allFinite() || controls[i].size() != controls.front().size())
          throw std::invalid_argument("control " + std::to_string(i) + " is malformed");
    }
    if (!(dt > 0.0) || !std::isfinite(dt)) throw std::invalid_argument("trajectory dt must be positive");
  }
};

struct Triplet {
  Eigen::VectorXd prev;
  Eigen::VectorXd mid;
  Eigen::VectorXd next;
  std::size_t step = 1;
};

struct TripletDataset {
  std::vector<Triplet> triplets;
  std::vector<std::size_t> per_trajectory;  // triplets contributed by each source trajectory

  bool empty() const { return triplets.empty(); }
  std::size_t size() const { return triplets.size(); }
};

inline const std::vector<std::size_t>& default_triplet_steps() {
  static const std::vector<std::size_t> steps{1, 3, 5, 10, 30};
  return steps;
}

/// Every (t-k, t, t+k) with both ends in range, for each k in `steps`.
inline std::vector<Triplet> sample_triplets(const Trajectory& traj, const std::vector<std::size_t>& steps) {
  if (steps.empty()) throw std::invalid_argument("sample_triplets: empty step list");
  std::vector<Triplet> out;
  const std::size_t n = traj.size();
  for (std::size_t k : steps) {
    if (k == 0) throw std::invalid_argument("sample_triplets: step must be positive");
    if (n < 2 * k + 1) continue;
    for (std::size_t t = k; t + k < n; ++t) out.push_back({traj.states[t - k], traj.states[t], traj.states[t + k], k});
  }
  return out;
}

inline TripletDataset build_triplet_dataset(const std::vector<Trajectory>& trajs, const std::vector<std::size_t>& steps) {
  TripletDataset ds;
  for (const auto& t : trajs) {
    auto part = sample_triplets(t, steps);
    ds.per_trajectory.push_back(part.size());
    ds.triplets.insert(ds.triplets.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return ds;
}

/// Fisher-Yates driven by mt19937_64, so the order depends only on the seed.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

/// Which state components enter the path-length metric and which of them are
/// angles (differenced along the shortest arc). Empty `dims` means all.
struct StateMetric {
  std::vector<Eigen::Index> dims;
  std::vector<Eigen::Index> angle_dims;
};

inline double wrap_angle(double a) {
  const double two_pi = 2.0 * std::numbers::pi;
  double r = std::fmod(a + std::numbers::pi, two_pi);
  if (r < 0) r += two_pi;
  return r - std::numbers::pi;
}

inline double state_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const StateMetric& metric = {}) {
  Eigen::VectorXd diff = b - a;
  for (auto i : metric.angle_dims) diff(i) = wrap_angle(diff(i));
  if (metric.dims.empty()) return diff.norm();
  double s = 0.0;
  for (auto i : metric.dims) s += diff(i) * diff(i);
  return std::sqrt(s);
}

inline double path_length(const Trajectory& traj, const StateMetric& metric = {}) {
  double total = 0.0;
  for (std::size_t i = 1; i < traj.states.size(); ++i) total += state_distance(traj.states[i - 1], traj.states[i], metric);
  return total;
}

// ---------------------------------------------------------------------------
// JSON-lines I/O

namespace detail {
inline std::vector<Eigen::VectorXd> rows_from_json(const nlohmann::json& j) {
  std::vector<Eigen::VectorXd> out;
  for (const auto& row : j) {
    const auto v = row.get<std::vector<double>>();
    out.emplace_back(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  }
  return out;
}

inline nlohmann::json rows_to_json(const std::vector<Eigen::VectorXd>& rows) {
  auto j = nlohmann::json::array();
  for (const auto& r : rows) j.push_back(std::vector<double>(r.data(), r.data() + r.size()));
  return j;
}
}  // namespace detail

inline std::string trajectory_to_line(const Trajectory& t) {
  nlohmann::json j;
  j["env_id"] = t.env_id;
  j["dt"] = t.dt;
  j["states"] = detail::rows_to_json(t.states);
  if (!t.controls.empty()) j["controls"] = detail::rows_to_json(t.controls);
  return j.dump();
}

inline void save_trajectories(const std::vector<Trajectory>& trajs, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& t : trajs) out << trajectory_to_line(t) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline std::vector<Trajectory> load_trajectories(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<Trajectory> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + " (record " + std::to_string(out.size()) + ")";
    try {
      const auto j = nlohmann::json::parse(line);
      Trajectory t;
      t.env_id = j.at("env_id").get<std::string>();
      t.dt = j.at("dt").get<double>();
      t.states = detail::rows_from_json(j.at("states"));
      if (j.contains("controls")) t.controls = detail::rows_from_json(j.at("controls"));
      t.validate();
      out.push_back(std::move(t));
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument(where + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where + ": " + e.what());
    }
  }
  return out;
}

}  // namespace psse
