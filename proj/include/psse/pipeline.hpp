#pragma once

// Workflow stages behind the `psse` command line tool: configuration
// resolution, run manifests and the five subcommands.
//
// Every stage writes into one output directory and finishes by writing
// run_manifest.json there. Outputs other than the manifest are a pure
// function of the configuration and the input files.

#include <openssl/evp.h>

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "psse/data.hpp"
#include "psse/demos.hpp"
#include "psse/embedding.hpp"
#include "psse/envs.hpp"
#include "psse/rl.hpp"
#include "psse/stats.hpp"

namespace psse {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum ExitCode : int { exit_ok = 0, exit_gate = 1, exit_usage = 2 };

/// Bad configuration, unknown keys or missing inputs.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c{"gen-demos", "train-embed", "eval-embed", "train-rl", "compare"};
  return c;
}

/// The flat key table. Every key is accepted by every subcommand; each stage
/// reads the keys it needs and the manifest records all of them.
inline const json& default_config() {
  static const json d = {
      // shared
      {"env", "cartpole-swingup"},
      {"seed", 0},
      {"seeds", {0, 1, 2, 3, 4}},
      {"jobs", 1},
      // gen-demos
      {"source", "scripted"},
      {"count", 200},
      {"min_success_rate", 0.9},
      {"budget", 500},
      {"planner_samples", 64},
      {"planner_segment", 10},
      // train-embed / eval-embed
      {"demos", ""},
      {"eval_demos", ""},
      {"z_dim", 4},
      {"lambda", 0.5},
      {"steps", 50000},
      {"batch_size", 256},
      {"learning_rate", 1e-3},
      {"embed_hidden", {64, 64}},
      {"triplet_steps", default_triplet_steps()},
      {"variance_doubling", true},
      {"eval_every", 1000},
      {"log_every", 100},
      // train-rl
      {"checkpoint", ""},
      {"modes", {"raw", "augmented"}},
      {"updates", 500},
      {"batch_episodes", 20},
      {"discount", 0.99},
      {"policy_lr", 3e-3},
      {"value_lr", 1e-2},
      {"value_iters", 20},
      {"policy_hidden", {32, 32}},
      {"init_log_std", -0.5},
      {"smoothing", 10},
      {"eval_episodes", 100},
      {"eval_seed", 7},
      {"gate_modes", {"augmented"}},
      {"min_beat_fraction", 0.8},
      // compare
      {"sweeps", json::array()},
  };
  return d;
}

namespace detail {

inline bool same_kind(const json& proto, const json& v) {
  if (proto.is_boolean()) return v.is_boolean();
  if (proto.is_number_integer()) return v.is_number_integer() || (v.is_number_float() && std::nearbyint(v.get<double>()) == v.get<double>());
  if (proto.is_number()) return v.is_number();
  if (proto.is_string()) return v.is_string();
  return false;
}

inline json coerce(const std::string& key, const json& proto, const json& v) {
  if (proto.is_array()) {
    if (!v.is_array()) throw UsageError("config key '" + key + "' expects a list");
    json out = json::array();
    // Element kind comes from the default, or is a string for empty defaults.
    const json elem = proto.empty() ? json("") : proto.front();
    for (const auto& e : v) out.push_back(coerce(key, elem, e));
    return out;
  }
  if (!same_kind(proto, v)) throw UsageError("config key '" + key + "' has the wrong type: " + v.dump());
  if (proto.is_number_integer()) {
    const auto x = v.is_number_integer() ? v.get<std::int64_t>() : static_cast<std::int64_t>(v.get<double>());
    if (x < 0) throw UsageError("config key '" + key + "' must be non-negative");
    return x;
  }
  if (proto.is_number_float()) return v.get<double>();
  return v;
}

inline json parse_scalar(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return text;
  }
}

}  // namespace detail

/// Overlays `layer` onto `base`, rejecting unknown keys and type mismatches.
inline json merge_config(json base, const json& layer, const std::string& origin) {
  if (!layer.is_object()) throw UsageError(origin + ": configuration must be a JSON object");
  const json& d = default_config();
  for (const auto& [k, v] : layer.items()) {
    if (!d.contains(k)) throw UsageError(origin + ": unknown config key '" + k + "'");
    base[k] = detail::coerce(k, d.at(k), v);
  }
  return base;
}

/// Turns a flag string into a JSON value of the key's type. Lists accept JSON
/// (`[1,2]`) or comma separated items (`1,2` / `raw,augmented`).
inline json parse_flag_value(const std::string& key, const std::string& text) {
  const json& d = default_config();
  if (!d.contains(key)) throw UsageError("unknown flag --" + key);
  const json& proto = d.at(key);
  if (proto.is_string()) return text;
  if (proto.is_array()) {
    json v = detail::parse_scalar(text);
    if (v.is_array()) return v;
    json out = json::array();
    if (text.empty()) return out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(proto.empty() || proto.front().is_string() ? json(item) : detail::parse_scalar(item));
    return out;
  }
  json v = detail::parse_scalar(text);
  if (v.is_string()) throw UsageError("flag --" + key + " expects a " + std::string(proto.type_name()) + ", got '" + text + "'");
  return v;
}

/// Reads a config file. A run manifest is accepted too: its "config" object is used.
inline json read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  if (j.is_object() && j.contains("command") && j.contains("config")) return j.at("config");
  return j;
}

/// Precedence: flags > config file > defaults.
inline json resolve_config(const std::optional<fs::path>& config_file, const std::map<std::string, std::string>& flags) {
  json cfg = default_config();
  if (config_file) cfg = merge_config(cfg, read_config_file(*config_file), config_file->string());
  json overlay = json::object();
  for (const auto& [k, v] : flags) overlay[k] = parse_flag_value(k, v);
  return merge_config(cfg, overlay, "flags");
}

// ---------------------------------------------------------------------------
// Digests and file helpers

inline std::string sha256_bytes(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return out.str();
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw UsageError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string sha256_file(const fs::path& p) { return sha256_bytes(read_file(p)); }

inline void write_file(const fs::path& p, const std::string& content) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << content;
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

inline void write_json(const fs::path& p, const json& j) { write_file(p, j.dump(2) + "\n"); }

/// Digests of every regular file under `dir` except the run manifest, keyed by
/// path relative to `dir`.
inline json digest_tree(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "run_manifest.json") continue;
    files[rel] = sha256_file(e.path());
  }
  return files;
}

inline fs::path require_input(const json& cfg, const std::string& key) {
  const auto p = cfg.at(key).get<std::string>();
  if (p.empty()) throw UsageError("--" + key + " is required for this command");
  if (!fs::exists(p)) throw UsageError("input file for '" + key + "' not found: " + p);
  return p;
}

// ---------------------------------------------------------------------------
// Stages

struct StageResult {
  int code = exit_ok;
  std::vector<std::uint64_t> seeds;
  std::vector<fs::path> inputs;
  json summary = json::object();
};

inline std::vector<std::uint64_t> seeds_of(const json& cfg) {
  auto s = cfg.at("seeds").get<std::vector<std::uint64_t>>();
  if (s.empty()) throw UsageError("seeds must be non-empty");
  return s;
}

inline Env env_of(const std::string& id) {
  try {
    return Env(id);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

inline StageResult stage_gen_demos(const json& cfg, const fs::path& out, std::ostream& log) {
  DatasetConfig dc;
  dc.env_id = cfg.at("env").get<std::string>();
  env_of(dc.env_id);
  try {
    dc.source = parse_demo_source(cfg.at("source").get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  dc.count = cfg.at("count").get<std::size_t>();
  dc.seed = cfg.at("seed").get<std::uint64_t>();
  dc.min_success_rate = cfg.at("min_success_rate").get<double>();
  dc.budget = cfg.at("budget").get<std::size_t>();
  dc.planner_samples = cfg.at("planner_samples").get<std::size_t>();
  dc.planner_segment = cfg.at("planner_segment").get<std::size_t>();
  StageResult r;
  r.seeds = {dc.seed};
  try {
    const Dataset ds = build_dataset(dc, out);
    r.summary = ds.manifest;
    log << "gen-demos: " << ds.trajectories.size() << " trajectories, success rate "
        << fmt_num(ds.manifest.at("success_rate").get<double>()) << "\n";
  } catch (const DatasetError& e) {
    log << "gen-demos: gate failed: " << e.what() << "\n";
    r.code = exit_gate;
    r.summary = {{"error", e.what()}};
  }
  return r;
}

/// Loads demonstrations and keeps only the encoder's input components.
inline std::vector<Trajectory> load_embedding_inputs(const fs::path& path, std::string* env_id = nullptr) {
  std::vector<Trajectory> trajs;
  try {
    trajs = load_trajectories(path);
  } catch (const std::exception& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
  if (trajs.size() < 2) throw UsageError(path.string() + " holds fewer than 2 trajectories");
  const std::string id = trajs.front().env_id;
  const Env env = env_of(id);
  for (auto& t : trajs) {
    if (t.env_id != id) throw UsageError(path.string() + " mixes environments");
    for (auto& s : t.states) s = env.embed_input(s).eval();
    t.controls.clear();
  }
  if (env_id) *env_id = id;
  return trajs;
}

inline TrainConfig embed_config_of(const json& cfg) {
  TrainConfig tc;
  tc.lambda = cfg.at("lambda").get<double>();
  tc.steps = cfg.at("steps").get<std::size_t>();
  tc.batch_size = cfg.at("batch_size").get<std::size_t>();
  tc.learning_rate = cfg.at("learning_rate").get<double>();
  tc.z_dim = cfg.at("z_dim").get<std::size_t>();
  tc.hidden = cfg.at("embed_hidden").get<std::vector<std::size_t>>();
  tc.triplet_steps = cfg.at("triplet_steps").get<std::vector<std::size_t>>();
  tc.variance_doubling = cfg.at("variance_doubling").get<bool>();
  tc.eval_every = cfg.at("eval_every").get<std::size_t>();
  tc.log_every = cfg.at("log_every").get<std::size_t>();
  try {
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return tc;
}

inline std::string report_row(const EvalReport& r) {
  return fmt_num(r.error_mean) + "," + fmt_num(r.error_std) + "," + fmt_num(r.scale) + "," + (r.degenerate ? "1" : "0");
}

inline StageResult stage_train_embed(const json& cfg, const fs::path& out, std::ostream& log) {
  StageResult r;
  const fs::path demos = require_input(cfg, "demos");
  r.inputs.push_back(demos);
  std::string env_id;
  const auto train = load_embedding_inputs(demos, &env_id);
  std::vector<Trajectory> held;
  if (!cfg.at("eval_demos").get<std::string>().empty()) {
    const fs::path ev = require_input(cfg, "eval_demos");
    r.inputs.push_back(ev);
    std::string ev_id;
    held = load_embedding_inputs(ev, &ev_id);
    if (ev_id != env_id) throw UsageError("eval_demos come from " + ev_id + ", demos from " + env_id);
  }
  const auto& eval_set = held.empty() ? train : held;
  const TrainConfig base = embed_config_of(cfg);
  const StateMetric metric = env_of(env_id).state_metric();
  const TripletDataset data = build_triplet_dataset(train, base.triplet_steps);
  if (data.empty()) throw UsageError("demonstrations are too short for the triplet steps");
  r.seeds = seeds_of(cfg);
  const auto jobs = std::max<std::size_t>(1, cfg.at("jobs").get<std::size_t>());

  std::vector<std::optional<TrainResult>> runs(r.seeds.size());
  std::vector<std::string> errors(r.seeds.size());
  auto run_one = [&](std::size_t i) {
    TrainConfig tc = base;
    tc.seed = r.seeds[i];
    try {
      runs[i] = train_embedding(tc, data, eval_set, metric, {}, &train);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  };
  for (std::size_t start = 0; start < runs.size(); start += jobs) {
    std::vector<std::future<void>> fs_;
    for (std::size_t i = start; i < std::min(runs.size(), start + jobs); ++i)
      fs_.push_back(std::async(jobs > 1 ? std::launch::async : std::launch::deferred, run_one, i));
    for (auto& f : fs_) f.get();
  }

  std::vector<std::optional<EvalReport>> finals;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    finals.push_back(runs[i] ? runs[i]->final_report : std::nullopt);
    if (!runs[i]) {
      log << "train-embed: seed " << r.seeds[i] << " failed: " << errors[i] << "\n";
      continue;
    }
    const fs::path dir = out / ("seed_" + std::to_string(r.seeds[i]));
    write_json(dir / "checkpoint.json", embedding_to_json(runs[i]->model, r.seeds[i]));
    write_file(dir / "train_log.csv", train_log_csv(runs[i]->log));
  }
  std::optional<std::size_t> best;
  try {
    // Failed runs count as unevaluated.
    best = select_best_seed(finals);
    if (!runs[*best]) best.reset();
  } catch (const std::exception& e) {
    log << "train-embed: " << e.what() << "\n";
  }
  std::string sel = "seed,error_mean,error_std,scale,degenerate,status,selected\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    sel += std::to_string(r.seeds[i]) + ",";
    if (runs[i] && runs[i]->final_report)
      sel += report_row(*runs[i]->final_report) + ",ok,";
    else
      sel += ",,,,failed,";
    sel += (best && *best == i) ? "1\n" : "0\n";
  }
  write_file(out / "selection.csv", sel);
  if (!best) {
    r.code = exit_gate;
    r.summary = {{"error", "no seed produced a usable embedding"}};
    return r;
  }
  fs::create_directories(out / "best");
  write_json(out / "best" / "checkpoint.json", embedding_to_json(runs[*best]->model, r.seeds[*best]));
  const auto& rep = *runs[*best]->final_report;
  r.summary = {{"env", env_id},         {"best_seed", r.seeds[*best]}, {"error_mean", rep.error_mean},
               {"error_std", rep.error_std}, {"scale", rep.scale},         {"triplets", data.size()}};
  log << "train-embed: best seed " << r.seeds[*best] << ", metric " << fmt_num(rep.error_mean) << "\n";
  return r;
}

inline EmbeddingModel load_checkpoint(const fs::path& p) {
  try {
    return embedding_from_json(json::parse(read_file(p)));
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(p.string() + ": " + e.what());
  }
}

inline StageResult stage_eval_embed(const json& cfg, const fs::path& out, std::ostream& log) {
  StageResult r;
  const fs::path ckpt = require_input(cfg, "checkpoint");
  const fs::path demos = require_input(cfg, "demos");
  r.inputs = {ckpt, demos};
  const EmbeddingModel model = load_checkpoint(ckpt);
  std::string env_id;
  const auto trajs = load_embedding_inputs(demos, &env_id);
  if (static_cast<Eigen::Index>(model.state_dim) != trajs.front().state_dim())
    throw UsageError("checkpoint expects " + std::to_string(model.state_dim) + "-dimensional states, demos give " +
                     std::to_string(trajs.front().state_dim()));
  const EvalReport rep = eval_metric(model, trajs, env_of(env_id).state_metric());
  std::string csv = "trajectory,distance,path_length,abs_error\n";
  for (std::size_t i = 0; i < rep.distances.size(); ++i)
    csv += std::to_string(i) + "," + fmt_num(rep.distances[i]) + "," + fmt_num(rep.path_lengths[i]) + "," +
           (rep.degenerate ? "" : fmt_num(rep.abs_errors[i])) + "\n";
  write_file(out / "eval_report.csv", csv);
  r.summary = {{"env", env_id},
               {"trajectories", rep.distances.size()},
               {"scale", rep.degenerate ? json(nullptr) : json(rep.scale)},
               {"error_mean", rep.degenerate ? json(nullptr) : json(rep.error_mean)},
               {"error_std", rep.degenerate ? json(nullptr) : json(rep.error_std)},
               {"degenerate", rep.degenerate}};
  write_json(out / "eval_summary.json", r.summary);
  if (rep.degenerate) {
    log << "eval-embed: every embedded distance is zero\n";
    r.code = exit_gate;
  } else {
    log << "eval-embed: metric " << fmt_num(rep.error_mean) << " +- " << fmt_num(rep.error_std) << "\n";
  }
  return r;
}

inline RLConfig rl_config_of(const json& cfg) {
  RLConfig c;
  c.updates = cfg.at("updates").get<std::size_t>();
  c.batch_episodes = cfg.at("batch_episodes").get<std::size_t>();
  c.discount = cfg.at("discount").get<double>();
  c.policy_lr = cfg.at("policy_lr").get<double>();
  c.value_lr = cfg.at("value_lr").get<double>();
  c.value_iters = cfg.at("value_iters").get<std::size_t>();
  c.hidden = cfg.at("policy_hidden").get<std::vector<std::size_t>>();
  c.init_log_std = cfg.at("init_log_std").get<double>();
  c.smoothing = cfg.at("smoothing").get<std::size_t>();
  c.eval_episodes = cfg.at("eval_episodes").get<std::size_t>();
  c.eval_seed = cfg.at("eval_seed").get<std::uint64_t>();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (c.updates == 0) throw UsageError("updates must be positive");
  if (c.eval_episodes < 2) throw UsageError("eval_episodes must be at least 2");
  return c;
}

inline StageResult stage_train_rl(const json& cfg, const fs::path& out, std::ostream& log) {
  StageResult r;
  const Env env = env_of(cfg.at("env").get<std::string>());
  const RLConfig base = rl_config_of(cfg);
  r.seeds = seeds_of(cfg);
  if (r.seeds.size() < 3) throw UsageError("train-rl needs at least 3 seeds");
  std::vector<ObsMode> modes;
  for (const auto& m : cfg.at("modes").get<std::vector<std::string>>()) {
    try {
      modes.push_back(parse_obs_mode(m));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (modes.empty()) throw UsageError("modes must be non-empty");
  std::optional<EmbeddingModel> model;
  const bool needs_model = std::any_of(modes.begin(), modes.end(), [](ObsMode m) {
    return m == ObsMode::embedded || m == ObsMode::augmented;
  });
  if (needs_model) {
    const fs::path ckpt = require_input(cfg, "checkpoint");
    r.inputs.push_back(ckpt);
    model = load_checkpoint(ckpt);
    if (static_cast<Eigen::Index>(model->state_dim) != env.spec().embed_dim)
      throw UsageError("checkpoint expects " + std::to_string(model->state_dim) + " inputs, " + env.spec().id +
                       " provides " + std::to_string(env.spec().embed_dim));
  }
  for (ObsMode m : modes) {
    if (m == ObsMode::trig && env.spec().kind != EnvKind::reacher)
      throw UsageError("trig observations are only defined for the reacher");
  }
  const auto jobs = std::max<std::size_t>(1, cfg.at("jobs").get<std::size_t>());
  const auto gate_modes = cfg.at("gate_modes").get<std::vector<std::string>>();
  const double frac = cfg.at("min_beat_fraction").get<double>();

  // Zero-force rollouts from exactly the resets the final policies are scored on.
  const auto band = env.do_nothing_band(base.eval_episodes, base.eval_seed);
  json dn = {{"env", env.spec().id},
             {"episodes", band.episodes},
             {"eval_seed", base.eval_seed},
             {"mean", band.mean},
             {"std", band.std},
             {"lower", band.lower(base.eval_episodes)},
             {"upper", band.upper(base.eval_episodes)},
             {"modes", json::object()}};

  for (ObsMode m : modes) {
    RLConfig c = base;
    c.obs = m;
    const std::string label = to_string(m);
    SweepReport rep;
    try {
      rep = seed_sweep(env, c, r.seeds, model ? &*model : nullptr, label, jobs);
    } catch (const RLError& e) {
      log << "train-rl: " << label << ": " << e.what() << "\n";
      r.code = exit_gate;
      dn["modes"][label] = {{"error", e.what()}};
      continue;
    }
    const fs::path dir = out / label;
    json per_seed = json::array();
    std::size_t beats = 0;
    for (std::size_t i = 0; i < rep.seeds.size(); ++i) {
      if (!rep.runs[i]) continue;
      const auto& cv = *rep.runs[i];
      write_file(dir / ("seed_" + std::to_string(rep.seeds[i])) / "curve.csv", curve_csv(cv));
      const double em = mean(cv.eval_returns);
      const bool beat = em > band.upper(base.eval_episodes);
      beats += beat ? 1 : 0;
      per_seed.push_back({{"seed", rep.seeds[i]}, {"eval_mean", em}, {"eval_std", stddev(cv.eval_returns)}, {"beats", beat}});
    }
    write_file(dir / "sweep.csv", sweep_csv(rep));
    json sj = sweep_json(rep);
    sj["eval"] = per_seed;
    sj["beats_do_nothing"] = beats;
    write_json(dir / "sweep.json", sj);
    const auto needed = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(r.seeds.size()) - 1e-9));
    const bool gated = std::find(gate_modes.begin(), gate_modes.end(), label) != gate_modes.end();
    const bool pass = !gated || beats >= needed;
    dn["modes"][label] = {{"beats", beats}, {"seeds", r.seeds.size()}, {"gated", gated}, {"required", needed}, {"pass", pass}};
    log << "train-rl: " << label << " final smoothed mean " << fmt_num(mean(rep.final_smoothed)) << ", variance "
        << fmt_num(rep.final_variance) << ", beats do-nothing in " << beats << "/" << r.seeds.size() << "\n";
    if (!pass) r.code = exit_gate;
  }
  write_json(out / "do_nothing.json", dn);
  r.summary = dn;
  return r;
}

inline StageResult stage_compare(const json& cfg, const fs::path& out, std::ostream& log) {
  StageResult r;
  const auto paths = cfg.at("sweeps").get<std::vector<std::string>>();
  if (paths.empty()) throw UsageError("--sweeps needs at least one sweep.json");
  std::string csv =
      "label,source,completed,final_mean,final_variance,final_second_worst,final_second_best,best_seed,best_ever_peak,"
      "eval_mean,beats_do_nothing\n";
  for (const auto& p : paths) {
    if (!fs::exists(p)) throw UsageError("sweep file not found: " + p);
    r.inputs.push_back(p);
    json j;
    try {
      j = json::parse(read_file(p));
    } catch (const json::parse_error& e) {
      throw UsageError(p + ": " + e.what());
    }
    auto num = [&](const char* k) { return j.contains(k) && j.at(k).is_number() ? fmt_num(j.at(k).get<double>()) : std::string(); };
    std::string eval_mean;
    if (j.contains("eval")) {
      std::vector<double> v;
      for (const auto& e : j.at("eval")) v.push_back(e.at("eval_mean").get<double>());
      if (!v.empty()) eval_mean = fmt_num(mean(v));
    }
    csv += j.value("label", "") + "," + p + "," + std::to_string(j.value("completed_seeds", json::array()).size()) + "," +
           num("final_mean") + "," + num("final_variance") + "," + num("final_second_worst") + "," +
           num("final_second_best") + "," + (j.contains("best_seed") && !j.at("best_seed").is_null() ? j.at("best_seed").dump() : "") +
           "," + num("best_ever_peak") + "," + eval_mean + "," +
           (j.contains("beats_do_nothing") ? j.at("beats_do_nothing").dump() : "") + "\n";
  }
  write_file(out / "compare.csv", csv);
  log << "compare: " << paths.size() << " sweeps\n";
  return r;
}

/// Runs one subcommand and writes run_manifest.json. UsageError propagates
/// before anything is written.
inline int run_command(const std::string& command, const json& cfg, const fs::path& out, std::ostream& log = std::cerr) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(out);
  StageResult r;
  if (command == "gen-demos")
    r = stage_gen_demos(cfg, out, log);
  else if (command == "train-embed")
    r = stage_train_embed(cfg, out, log);
  else if (command == "eval-embed")
    r = stage_eval_embed(cfg, out, log);
  else if (command == "train-rl")
    r = stage_train_rl(cfg, out, log);
  else if (command == "compare")
    r = stage_compare(cfg, out, log);
  else
    throw UsageError("unknown command '" + command + "'");
  json inputs = json::object();
  for (const auto& p : r.inputs) inputs[p.string()] = sha256_file(p);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json(out / "run_manifest.json", {{"command", command},
                                         {"config", cfg},
                                         {"seeds", r.seeds},
                                         {"inputs", inputs},
                                         {"outputs", digest_tree(out)},
                                         {"exit_code", r.code},
                                         {"summary", r.summary},
                                         {"wall_clock_seconds", wall}});
  return r.code;
}

}  // namespace psse
