#pragma once

// REINFORCE with a learned value baseline and a diagonal Gaussian policy.
//
// The policy acts in normalised units: the environment receives
// clip(action_bound * a). Log-probabilities are taken on the unclipped sample.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <future>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "psse/embedding.hpp"
#include "psse/envs.hpp"
#include "psse/nn.hpp"
#include "psse/stats.hpp"

namespace psse {

struct RLConfig {
  double discount = 0.99;
  std::size_t batch_episodes = 20;
  std::size_t updates = 500;
  std::uint64_t seed = 0;
  ObsMode obs = ObsMode::raw;
  std::vector<std::size_t> hidden{32, 32};
  double policy_lr = 3e-3;
  double value_lr = 1e-2;
  std::size_t value_iters = 20;  // full-batch value-net steps per update
  double init_log_std = -0.5;
  double min_log_std = -5.0;
  double max_log_std = 2.0;
  bool use_baseline = true;
  bool time_aware_baseline = true;  // value net also sees t / horizon
  bool normalize_obs = false;       // running mean / std of observations
  std::size_t smoothing = 10;
  std::size_t eval_episodes = 100;  // mean-action rollouts of the final policy
  std::uint64_t eval_seed = 7;      // shared by every run so all policies see the same resets

  void validate() const {
    if (!(discount > 0.0 && discount <= 1.0)) throw std::invalid_argument("discount must lie in (0, 1]");
    if (batch_episodes < 1) throw std::invalid_argument("batch_episodes must be positive");
    if (!(policy_lr >= 0.0) || !(value_lr >= 0.0)) throw std::invalid_argument("learning rates must be non-negative");
    if (!(min_log_std < max_log_std)) throw std::invalid_argument("log-std bounds are inverted");
    if (smoothing < 1) throw std::invalid_argument("smoothing window must be positive");
    if (hidden.empty()) throw std::invalid_argument("policy needs at least one hidden layer");
  }
};

/// Running per-dimension observation statistics (parallel Welford merge).
struct RunningNorm {
  Vec mean;
  Vec m2;
  double count = 0.0;

  static RunningNorm identity(Eigen::Index n) { return {Vec::Zero(n), Vec::Zero(n), 0.0}; }

  void update(const Mat& x) {
    const double n = static_cast<double>(x.cols());
    if (n == 0) return;
    const Vec bm = x.rowwise().mean();
    const Vec bm2 = (x.colwise() - bm).rowwise().squaredNorm();
    const Vec delta = bm - mean;
    const double total = count + n;
    mean += delta * (n / total);
    m2 += bm2 + delta.cwiseProduct(delta) * (count * n / total);
    count = total;
  }

  Mat apply(const Mat& x) const {
    if (count < 2) return x;
    const Vec inv = ((m2 / count).array() + 1e-8).rsqrt().matrix();
    return ((x.colwise() - mean).array().colwise() * inv.array()).cwiseMax(-10.0).cwiseMin(10.0).matrix();
  }
};

struct GaussianPolicy {
  MlpParams net;  // normalised observation -> action mean
  Vec log_std;
  RunningNorm obs_norm;

  Eigen::Index action_dim() const { return log_std.size(); }
};

inline GaussianPolicy make_policy(std::size_t obs_dim, std::size_t action_dim, const RLConfig& cfg, std::mt19937_64& rng) {
  GaussianPolicy p{make_mlp(obs_dim, cfg.hidden, action_dim, false, rng),
                   Vec::Constant(static_cast<Eigen::Index>(action_dim), cfg.init_log_std),
                   RunningNorm::identity(static_cast<Eigen::Index>(obs_dim))};
  p.net.layers.back().weight *= 0.1;
  return p;
}

inline double gaussian_log_prob(const Vec& mu, const Vec& log_std, const Vec& a) {
  double lp = 0.0;
  for (Eigen::Index j = 0; j < a.size(); ++j) {
    const double z = (a(j) - mu(j)) * std::exp(-log_std(j));
    lp += -0.5 * z * z - log_std(j) - 0.5 * std::log(2.0 * std::numbers::pi);
  }
  return lp;
}

struct SurrogateResult {
  double value = 0.0;
  MlpGradient net;
  Vec log_std;
};

/// L = -(1/n) sum_t w_t log pi(a_t | o_t), with its exact gradient. `obs`
/// are network inputs, i.e. already normalised.
inline SurrogateResult policy_surrogate(const GaussianPolicy& p, const Mat& obs, const Mat& actions, const Vec& weights) {
  const Eigen::Index n = obs.cols();
  if (actions.cols() != n || weights.size() != n || actions.rows() != p.action_dim())
    throw std::invalid_argument("surrogate: observation, action and weight counts disagree");
  if (n == 0) throw std::invalid_argument("surrogate: empty batch");
  auto out = mlp_forward(p.net, obs);
  const Vec inv_var = (-2.0 * p.log_std).array().exp();
  const Mat diff = actions - out.mu;
  SurrogateResult r;
  r.log_std = Vec::Zero(p.action_dim());
  Mat grad_mu(diff.rows(), n);
  const double scale = 1.0 / static_cast<double>(n);
  for (Eigen::Index t = 0; t < n; ++t) {
    const double w = weights(t) * scale;
    double lp = 0.0;
    for (Eigen::Index j = 0; j < diff.rows(); ++j) {
      const double z2 = diff(j, t) * diff(j, t) * inv_var(j);
      lp += -0.5 * z2 - p.log_std(j) - 0.5 * std::log(2.0 * std::numbers::pi);
      grad_mu(j, t) = -w * diff(j, t) * inv_var(j);
      r.log_std(j) += -w * (z2 - 1.0);
    }
    r.value -= w * lp;
  }
  r.net = mlp_backward(p.net, out.tape, grad_mu, Mat()).params;
  return r;
}

struct Episode {
  Mat obs;      // obs_dim x T, as observed
  Mat inputs;   // obs_dim x T, normalised as seen by the policy
  Mat actions;  // action_dim x T, normalised and unclipped
  std::vector<double> rewards;
  double total() const {
    double s = 0.0;
    for (double r : rewards) s += r;
    return s;
  }
};

/// Environment-like interface used by the learner: spec(), reset(rng),
/// step(s, a), reward(s, a), terminal(s), observe(s, mode, model),
/// observation_dim(mode, model). Env satisfies it.
/// With `deterministic` the mean action is applied and no noise is drawn.
template <class System>
Episode rollout(const System& env, const GaussianPolicy& policy, ObsMode mode, const EmbeddingModel* model,
                std::mt19937_64& rng, bool deterministic = false) {
  const auto& sp = env.spec();
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec s = env.reset(rng);
  const Eigen::Index od = env.observation_dim(mode, model);
  Episode ep;
  ep.obs.resize(od, static_cast<Eigen::Index>(sp.horizon));
  ep.inputs.resize(od, static_cast<Eigen::Index>(sp.horizon));
  ep.actions.resize(sp.action_dim, static_cast<Eigen::Index>(sp.horizon));
  const Vec std_dev = policy.log_std.array().exp();
  std::size_t t = 0;
  for (; t < sp.horizon; ++t) {
    const Vec o = env.observe(s, mode, model);
    if (t == 0 && mode == ObsMode::augmented) {
      const Vec z = encode_mean(*model, env.embed_input(s)).col(0);
      if (o.head(s.size()) != s || o.tail(z.size()) != z)
        throw std::logic_error("augmented observation differs from raw state ++ encoder mean");
    }
    const Vec in = policy.obs_norm.apply(o).col(0);
    const Vec mu = mlp_forward(policy.net, in).mu.col(0);
    Vec a(mu.size());
    for (Eigen::Index j = 0; j < a.size(); ++j) a(j) = deterministic ? mu(j) : mu(j) + std_dev(j) * normal(rng);
    const Vec applied = env.clip_action(sp.action_bound * a);
    ep.obs.col(static_cast<Eigen::Index>(t)) = o;
    ep.inputs.col(static_cast<Eigen::Index>(t)) = in;
    ep.actions.col(static_cast<Eigen::Index>(t)) = a;
    ep.rewards.push_back(env.reward(s, applied));
    s = env.step(s, applied);
    if (env.terminal(s)) {
      ++t;
      break;
    }
  }
  ep.obs.conservativeResize(Eigen::NoChange, static_cast<Eigen::Index>(t));
  ep.inputs.conservativeResize(Eigen::NoChange, static_cast<Eigen::Index>(t));
  ep.actions.conservativeResize(Eigen::NoChange, static_cast<Eigen::Index>(t));
  return ep;
}

inline std::vector<double> discounted_returns(const std::vector<double>& rewards, double gamma) {
  std::vector<double> g(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc = rewards[i] + gamma * acc;
    g[i] = acc;
  }
  return g;
}

template <class System>
std::vector<double> evaluate_policy(const System& env, const GaussianPolicy& policy, ObsMode mode,
                                    const EmbeddingModel* model, std::size_t episodes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> out;
  for (std::size_t i = 0; i < episodes; ++i) out.push_back(rollout(env, policy, mode, model, rng, true).total());
  return out;
}

struct UpdateStats {
  std::size_t update = 0;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
};

struct LearningCurve {
  std::uint64_t seed = 0;
  std::vector<UpdateStats> rows;
  std::vector<double> smoothed;
  GaussianPolicy policy;
  std::vector<double> eval_returns;  // final policy, mean action, cfg.eval_episodes resets
};

inline std::string curve_csv(const LearningCurve& c) {
  std::ostringstream out;
  out << "update,mean,min,max,smoothed\n";
  for (std::size_t i = 0; i < c.rows.size(); ++i) {
    const auto& r = c.rows[i];
    out << r.update << ',' << fmt_num(r.mean) << ',' << fmt_num(r.min) << ',' << fmt_num(r.max) << ','
        << fmt_num(c.smoothed[i]) << '\n';
  }
  return out.str();
}

class RLError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class System>
LearningCurve train_policy(const System& env, const RLConfig& cfg, const EmbeddingModel* model = nullptr) {
  cfg.validate();
  if ((cfg.obs == ObsMode::embedded || cfg.obs == ObsMode::augmented) && model == nullptr)
    throw std::invalid_argument(to_string(cfg.obs) + " observations need an embedding checkpoint");
  const auto& sp = env.spec();
  const auto od = static_cast<std::size_t>(env.observation_dim(cfg.obs, model));
  std::mt19937_64 init_rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 11);
  std::mt19937_64 roll_rng(cfg.seed * 0xD1B54A32D192ED03ULL + 12);

  LearningCurve curve;
  curve.seed = cfg.seed;
  curve.policy = make_policy(od, static_cast<std::size_t>(sp.action_dim), cfg, init_rng);
  GaussianPolicy& policy = curve.policy;
  const std::size_t vd = od + (cfg.time_aware_baseline ? 1 : 0);
  MlpParams value = make_mlp(vd, cfg.hidden, 1, false, init_rng);
  const double value_scale = static_cast<double>(sp.horizon);

  AdamConfig pa;
  pa.learning_rate = cfg.policy_lr;
  AdamConfig va;
  va.learning_rate = cfg.value_lr;
  AdamState net_opt = make_adam(policy.net, pa);
  std::vector<std::span<double>> std_span{std::span<double>(policy.log_std.data(), policy.log_std.size())};
  AdamState std_opt = make_adam(std_span, pa);
  AdamState value_opt = make_adam(value, va);

  for (std::size_t u = 0; u < cfg.updates; ++u) {
    std::vector<Episode> batch;
    std::vector<double> totals;
    Eigen::Index steps = 0;
    for (std::size_t e = 0; e < cfg.batch_episodes; ++e) {
      batch.push_back(rollout(env, policy, cfg.obs, model, roll_rng));
      totals.push_back(batch.back().total());
      steps += batch.back().obs.cols();
    }
    curve.rows.push_back({u, mean(totals), *std::min_element(totals.begin(), totals.end()),
                          *std::max_element(totals.begin(), totals.end())});

    Mat obs(static_cast<Eigen::Index>(od), steps), raw_obs(static_cast<Eigen::Index>(od), steps);
    Mat actions(sp.action_dim, steps);
    Mat value_in(static_cast<Eigen::Index>(vd), steps);
    Vec returns(steps);
    Eigen::Index col = 0;
    for (const auto& ep : batch) {
      const auto g = discounted_returns(ep.rewards, cfg.discount);
      const Eigen::Index n = ep.obs.cols();
      obs.middleCols(col, n) = ep.inputs;
      raw_obs.middleCols(col, n) = ep.obs;
      actions.middleCols(col, n) = ep.actions;
      value_in.block(0, col, static_cast<Eigen::Index>(od), n) = ep.inputs;
      for (Eigen::Index t = 0; t < n; ++t) {
        returns(col + t) = g[static_cast<std::size_t>(t)];
        if (cfg.time_aware_baseline) value_in(static_cast<Eigen::Index>(od), col + t) = static_cast<double>(t) / value_scale;
      }
      col += n;
    }

    Vec adv = returns;
    if (cfg.use_baseline) adv -= value_scale * mlp_forward(value, value_in).mu.row(0).transpose();
    const double am = adv.mean();
    const double as = std::sqrt((adv.array() - am).square().mean());
    adv = (adv.array() - am) / (as + 1e-8);

    try {
      const auto sur = policy_surrogate(policy, obs, actions, adv);
      if (!std::isfinite(sur.value)) throw NonFiniteError("policy surrogate is not finite");
      adam_step(net_opt, policy.net, sur.net);
      std::vector<std::span<const double>> g{std::span<const double>(sur.log_std.data(), sur.log_std.size())};
      adam_step(std_opt, std_span, g);
      policy.log_std = policy.log_std.cwiseMax(cfg.min_log_std).cwiseMin(cfg.max_log_std);
      // A zero step size freezes the whole policy, observation statistics included.
      if (cfg.normalize_obs && cfg.policy_lr > 0.0) policy.obs_norm.update(raw_obs);

      if (cfg.use_baseline) {
        const Mat target = (returns / value_scale).transpose();
        for (std::size_t k = 0; k < cfg.value_iters; ++k) {
          auto out = mlp_forward(value, value_in);
          const Mat grad = (out.mu - target) / static_cast<double>(steps);
          adam_step(value_opt, value, mlp_backward(value, out.tape, grad, Mat()).params);
        }
      }
    } catch (const NonFiniteError& e) {
      throw RLError("policy update " + std::to_string(u) + " (seed " + std::to_string(cfg.seed) +
                    ") produced non-finite values: " + e.what());
    }
  }
  std::vector<double> means;
  for (const auto& r : curve.rows) means.push_back(r.mean);
  curve.smoothed = rolling_mean(means, cfg.smoothing);
  curve.eval_returns = evaluate_policy(env, policy, cfg.obs, model, cfg.eval_episodes, cfg.eval_seed);
  return curve;
}

struct SweepReport {
  std::string label;
  std::vector<std::uint64_t> seeds;
  std::vector<std::optional<LearningCurve>> runs;
  std::vector<std::string> failures;  // empty string for completed runs
  std::vector<double> mean;           // per update, over completed smoothed curves
  std::vector<double> second_worst;
  std::vector<double> second_best;
  std::vector<double> best_ever;  // smoothed curve of the run with the highest smoothed peak
  std::optional<std::uint64_t> best_seed;
  std::vector<double> final_smoothed;  // one per completed run, in seed order
  double final_variance = 0.0;         // sample variance (n - 1) of final_smoothed

  std::size_t completed() const {
    return static_cast<std::size_t>(std::count_if(runs.begin(), runs.end(), [](const auto& r) { return r.has_value(); }));
  }
};

/// Summary statistics over completed curves; at least three are required.
inline void summarise_sweep(SweepReport& rep) {
  std::vector<const LearningCurve*> done;
  for (const auto& r : rep.runs)
    if (r) done.push_back(&*r);
  if (done.size() < 3)
    throw RLError("seed sweep '" + rep.label + "' completed " + std::to_string(done.size()) +
                  " runs; at least 3 are required");
  const std::size_t steps = done.front()->smoothed.size();
  rep.mean.assign(steps, 0.0);
  rep.second_worst.assign(steps, 0.0);
  rep.second_best.assign(steps, 0.0);
  for (std::size_t i = 0; i < steps; ++i) {
    std::vector<double> v;
    for (const auto* c : done) v.push_back(c->smoothed[i]);
    rep.mean[i] = mean(v);
    std::sort(v.begin(), v.end());
    rep.second_worst[i] = v[1];
    rep.second_best[i] = v[v.size() - 2];
  }
  double peak = -std::numeric_limits<double>::infinity();
  rep.final_smoothed.clear();
  for (const auto* c : done) {
    const double m = *std::max_element(c->smoothed.begin(), c->smoothed.end());
    if (m > peak) {
      peak = m;
      rep.best_ever = c->smoothed;
      rep.best_seed = c->seed;
    }
    rep.final_smoothed.push_back(c->smoothed.back());
  }
  rep.final_variance = sample_variance(rep.final_smoothed);
}

template <class System>
SweepReport seed_sweep(const System& env, const RLConfig& cfg, const std::vector<std::uint64_t>& seeds,
                       const EmbeddingModel* model = nullptr, const std::string& label = "", std::size_t jobs = 1) {
  if (seeds.size() < 3) throw std::invalid_argument("seed sweep needs at least 3 seeds");
  SweepReport rep;
  rep.label = label.empty() ? to_string(cfg.obs) : label;
  rep.seeds = seeds;
  rep.runs.resize(seeds.size());
  rep.failures.resize(seeds.size());
  auto run_one = [&](std::size_t i) {
    RLConfig c = cfg;
    c.seed = seeds[i];
    try {
      rep.runs[i] = train_policy(env, c, model);
    } catch (const std::exception& e) {
      rep.failures[i] = e.what();
    }
  };
  if (jobs <= 1) {
    for (std::size_t i = 0; i < seeds.size(); ++i) run_one(i);
  } else {
    for (std::size_t start = 0; start < seeds.size(); start += jobs) {
      std::vector<std::future<void>> fs;
      for (std::size_t i = start; i < std::min(seeds.size(), start + jobs); ++i)
        fs.push_back(std::async(std::launch::async, run_one, i));
      for (auto& f : fs) f.get();
    }
  }
  summarise_sweep(rep);
  return rep;
}

inline std::string sweep_csv(const SweepReport& rep) {
  std::ostringstream out;
  out << "update,mean,second_worst,second_best,best_ever";
  for (std::size_t i = 0; i < rep.seeds.size(); ++i)
    if (rep.runs[i]) out << ",seed_" << rep.seeds[i];
  out << '\n';
  for (std::size_t u = 0; u < rep.mean.size(); ++u) {
    out << u << ',' << fmt_num(rep.mean[u]) << ',' << fmt_num(rep.second_worst[u]) << ','
        << fmt_num(rep.second_best[u]) << ',' << fmt_num(rep.best_ever[u]);
    for (const auto& r : rep.runs)
      if (r) out << ',' << fmt_num(r->smoothed[u]);
    out << '\n';
  }
  return out.str();
}

inline nlohmann::json sweep_json(const SweepReport& rep) {
  nlohmann::json failures = nlohmann::json::object();
  for (std::size_t i = 0; i < rep.seeds.size(); ++i)
    if (!rep.runs[i]) failures[std::to_string(rep.seeds[i])] = rep.failures[i];
  std::vector<std::uint64_t> done;
  for (std::size_t i = 0; i < rep.seeds.size(); ++i)
    if (rep.runs[i]) done.push_back(rep.seeds[i]);
  return {{"label", rep.label},
          {"seeds", rep.seeds},
          {"completed_seeds", done},
          {"failures", failures},
          {"final_smoothed", rep.final_smoothed},
          {"final_mean", mean(rep.final_smoothed)},
          {"final_variance", rep.final_variance},
          {"final_second_worst", rep.second_worst.back()},
          {"final_second_best", rep.second_best.back()},
          {"best_seed", rep.best_seed ? nlohmann::json(*rep.best_seed) : nlohmann::json(nullptr)},
          {"best_ever_peak", *std::max_element(rep.best_ever.begin(), rep.best_ever.end())}};
}

}  // namespace psse
