#pragma once

// Plan-space state embedding.
//
// A stochastic encoder q(z|x) and decoder p(x|z) are trained on trajectory
// triplets (x_prev, x_mid, x_next) so that the encoding of x_mid matches the
// midpoint of the encodings of its neighbours. The loss minimised per triplet
// is the negated modified lower bound:
//
//   KL(q(z_prev|x_prev) || N(0,I)) + KL(q(z_next|x_next) || N(0,I))
//   - log p(x_prev|z_prev) - log p(x_next|z_next) - log p(x_mid|z_hat)
//   + lambda * KL(midpoint(q_prev, q_next) || q(z_mid|x_mid))
//
// z_prev, z_next and z_hat are reparameterised samples; z_hat is drawn from
// the (optionally variance-doubled) midpoint distribution.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psse/data.hpp"
#include "psse/distributions.hpp"
#include "psse/nn.hpp"
#include "psse/stats.hpp"

namespace psse {

/// Fixed affine input map x -> (x - shift) / scale applied before encoding.
/// Reconstruction likelihoods are measured in the same normalised space.
struct Normalizer {
  Vec shift;
  Vec scale;

  static Normalizer identity(Eigen::Index n) { return {Vec::Zero(n), Vec::Ones(n)}; }

  static Normalizer fit(const std::vector<Trajectory>& trajs) {
    if (trajs.empty()) throw std::invalid_argument("Normalizer::fit: no trajectories");
    const auto n = trajs.front().state_dim();
    Vec sum = Vec::Zero(n), sq = Vec::Zero(n);
    double count = 0;
    for (const auto& t : trajs)
      for (const auto& s : t.states) {
        sum += s;
        sq += s.cwiseProduct(s);
        count += 1;
      }
    Vec mean = sum / count;
    Vec var = (sq / count - mean.cwiseProduct(mean)).cwiseMax(0.0);
    Vec scale = var.cwiseSqrt();
    for (Eigen::Index i = 0; i < n; ++i)
      if (scale(i) < 1e-8) scale(i) = 1.0;
    return {mean, scale};
  }

  Mat apply(const Mat& x) const { return (x.colwise() - shift).array().colwise() / scale.array(); }
};

struct EmbeddingModel {
  MlpParams encoder;  // state_dim -> (mu, sigma) in z_dim
  MlpParams decoder;  // z_dim -> (mu, sigma) in state_dim
  std::size_t z_dim = 0;
  std::size_t state_dim = 0;
  Normalizer input;

  void validate() const {
    encoder.validate();
    decoder.validate();
    if (encoder.input_size() != state_dim || encoder.head_size != z_dim || !encoder.sigma_head)
      throw std::invalid_argument("EmbeddingModel: encoder shape does not match state_dim/z_dim");
    if (decoder.input_size() != z_dim || decoder.head_size != state_dim || !decoder.sigma_head)
      throw std::invalid_argument("EmbeddingModel: decoder shape does not match z_dim/state_dim");
    if (input.shift.size() != static_cast<Eigen::Index>(state_dim) ||
        input.scale.size() != static_cast<Eigen::Index>(state_dim))
      throw std::invalid_argument("EmbeddingModel: normalizer has wrong dimension");
  }
};

inline EmbeddingModel make_embedding_model(std::size_t state_dim, std::size_t z_dim, const std::vector<std::size_t>& hidden,
                                           std::mt19937_64& rng) {
  EmbeddingModel m;
  m.state_dim = state_dim;
  m.z_dim = z_dim;
  m.encoder = make_mlp(state_dim, hidden, z_dim, true, rng);
  m.decoder = make_mlp(z_dim, hidden, state_dim, true, rng);
  m.input = Normalizer::identity(static_cast<Eigen::Index>(state_dim));
  return m;
}

/// q(z|x) for a single raw state.
inline DiagGaussian encode(const EmbeddingModel& m, const Vec& x) {
  auto out = mlp_forward(m.encoder, m.input.apply(x));
  return {out.mu.col(0), out.sigma.col(0)};
}

/// Encoder means for a batch of raw states (state_dim x batch).
inline Mat encode_mean(const EmbeddingModel& m, const Mat& x) { return mlp_forward(m.encoder, m.input.apply(x)).mu; }

enum class Objective { elbo, direct };

struct TrainConfig {
  double lambda = 0.5;
  std::size_t steps = 50000;
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  std::size_t z_dim = 4;
  std::vector<std::size_t> hidden{64, 64};
  std::vector<std::size_t> triplet_steps = default_triplet_steps();
  bool variance_doubling = true;
  bool normalize_inputs = true;
  std::size_t eval_every = 1000;
  std::size_t log_every = 100;
  Objective objective = Objective::elbo;

  void validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("lambda must be > 0");
    if (batch_size == 0 || z_dim == 0 || log_every == 0 || eval_every == 0)
      throw std::invalid_argument("batch_size, z_dim, log_every and eval_every must be positive");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
    if (triplet_steps.empty()) throw std::invalid_argument("triplet_steps must be non-empty");
  }
};

struct LossTerms {
  double loss = 0.0;
  double kl_prior = 0.0;
  double recon = 0.0;  // negative log-likelihood, summed over the three states
  double kl_mid = 0.0;
};

struct ModelGradient {
  MlpGradient encoder;
  MlpGradient decoder;
};

struct BatchLoss {
  LossTerms terms;  // means over the batch
  std::optional<ModelGradient> grad;
};

/// Columns of a triplet batch, already in raw state units.
struct TripletBatch {
  Mat prev, mid, next;  // state_dim x B

  static TripletBatch gather(const std::vector<Triplet>& ts, const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw std::invalid_argument("TripletBatch: empty batch");
    const auto n = ts[idx.front()].mid.size();
    const auto b = static_cast<Eigen::Index>(idx.size());
    TripletBatch out{Mat(n, b), Mat(n, b), Mat(n, b)};
    for (Eigen::Index c = 0; c < b; ++c) {
      const auto& t = ts[idx[static_cast<std::size_t>(c)]];
      out.prev.col(c) = t.prev;
      out.mid.col(c) = t.mid;
      out.next.col(c) = t.next;
    }
    return out;
  }

  static TripletBatch single(const Triplet& t) { return {Mat(t.prev), Mat(t.mid), Mat(t.next)}; }
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void check_term(double v, const char* name) {
  if (!std::isfinite(v)) throw TrainingError(std::string("non-finite loss term: ") + name);
}

}  // namespace detail

/// Batched negated lower bound. `noise_prev`/`noise_next` are z_dim x B
/// standard-normal draws; the midpoint sample reuses them as
/// (noise_prev + noise_next) / sqrt(2), which is again standard normal.
inline BatchLoss elbo_hat_batch(const EmbeddingModel& m, const TripletBatch& batch, const Mat& noise_prev,
                                const Mat& noise_next, double lambda, bool variance_doubling, bool want_grad) {
  const auto n = static_cast<Eigen::Index>(m.state_dim);
  const auto k = static_cast<Eigen::Index>(m.z_dim);
  const auto b = batch.mid.cols();
  if (batch.prev.rows() != n || batch.mid.rows() != n || batch.next.rows() != n)
    throw std::invalid_argument("elbo_hat: triplet state dimension does not match encoder input");
  if (batch.prev.cols() != b || batch.next.cols() != b) throw std::invalid_argument("elbo_hat: ragged batch");
  if (noise_prev.rows() != k || noise_next.rows() != k || noise_prev.cols() != b || noise_next.cols() != b)
    throw std::invalid_argument("elbo_hat: noise must be z_dim x batch");

  Mat x(n, 3 * b);
  x << m.input.apply(batch.prev), m.input.apply(batch.mid), m.input.apply(batch.next);

  auto enc = mlp_forward(m.encoder, x);
  const Mat sig = enc.sigma.cwiseMax(kSigmaFloor);
  const auto mu_a = enc.mu.leftCols(b), mu_t = enc.mu.middleCols(b, b), mu_b = enc.mu.rightCols(b);
  const auto s_a = sig.leftCols(b), s_t = sig.middleCols(b, b), s_b = sig.rightCols(b);

  const double var_scale = variance_doubling ? 0.5 : 0.25;
  const Mat mu_m = 0.5 * (mu_a + mu_b);
  const Mat s_m = ((s_a.array().square() + s_b.array().square()) * var_scale).sqrt().matrix();
  const Mat eps_m = (noise_prev + noise_next) / std::numbers::sqrt2;

  Mat z(k, 3 * b);
  z << mu_a + s_a.cwiseProduct(noise_prev), mu_m + s_m.cwiseProduct(eps_m), mu_b + s_b.cwiseProduct(noise_next);

  auto dec = mlp_forward(m.decoder, z);
  const Mat dsig = dec.sigma.cwiseMax(kSigmaFloor);
  const Mat resid = x - dec.mu;

  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  const double inv_b = 1.0 / static_cast<double>(b);

  LossTerms terms;
  auto prior_kl = [](const auto& mu, const auto& s) {
    return (0.5 * (mu.array().square() + s.array().square() - 1.0) - s.array().log()).sum();
  };
  terms.kl_prior = (prior_kl(mu_a, s_a) + prior_kl(mu_b, s_b)) * inv_b;
  terms.recon = (half_log_2pi + dsig.array().log() + 0.5 * (resid.array() / dsig.array()).square()).sum() * inv_b;
  const Mat dm = mu_m - mu_t;
  terms.kl_mid = ((s_t.array() / s_m.array()).log() + (s_m.array().square() + dm.array().square()) /
                                                          (2.0 * s_t.array().square()) - 0.5).sum() * inv_b;
  terms.loss = terms.kl_prior + terms.recon + lambda * terms.kl_mid;

  detail::check_term(terms.kl_prior, "kl_prior");
  detail::check_term(terms.recon, "recon");
  detail::check_term(terms.kl_mid, "kl_mid");

  BatchLoss out{terms, std::nullopt};
  if (!want_grad) return out;

  // Decoder heads.
  const Mat dsig2 = dsig.array().square();
  Mat g_dmu = (-resid.array() / dsig2.array() * inv_b).matrix();
  Mat g_dsig = ((1.0 / dsig.array() - resid.array().square() / (dsig2.array() * dsig.array())) * inv_b).matrix();
  g_dsig = (dec.sigma.array() >= kSigmaFloor).select(g_dsig, 0.0);
  auto dec_back = mlp_backward(m.decoder, dec.tape, g_dmu, g_dsig);
  const Mat& g_z = dec_back.input;

  Mat g_mu(k, 3 * b), g_sig(k, 3 * b);
  auto g_mu_a = g_mu.leftCols(b);
  auto g_mu_t = g_mu.middleCols(b, b);
  auto g_mu_b = g_mu.rightCols(b);
  auto g_s_a = g_sig.leftCols(b);
  auto g_s_t = g_sig.middleCols(b, b);
  auto g_s_b = g_sig.rightCols(b);

  // Reparameterised samples and prior KL.
  g_mu_a = g_z.leftCols(b) + mu_a * inv_b;
  g_mu_b = g_z.rightCols(b) + mu_b * inv_b;
  g_s_a = g_z.leftCols(b).cwiseProduct(noise_prev) + ((s_a.array() - 1.0 / s_a.array()) * inv_b).matrix();
  g_s_b = g_z.rightCols(b).cwiseProduct(noise_next) + ((s_b.array() - 1.0 / s_b.array()) * inv_b).matrix();

  // Midpoint sample and lambda * KL(mid || q_t).
  const double w = lambda * inv_b;
  const Mat st2 = s_t.array().square();
  Mat g_mu_m = g_z.middleCols(b, b) + (w * dm.array() / st2.array()).matrix();
  Mat g_s_m = g_z.middleCols(b, b).cwiseProduct(eps_m) +
              (w * (-1.0 / s_m.array() + s_m.array() / st2.array())).matrix();
  g_mu_t = (-w * dm.array() / st2.array()).matrix();
  g_s_t = (w * (1.0 / s_t.array() -
                (s_m.array().square() + dm.array().square()) / (st2.array() * s_t.array()))).matrix();

  g_mu_a += 0.5 * g_mu_m;
  g_mu_b += 0.5 * g_mu_m;
  const Mat dsm = (g_s_m.array() * var_scale / s_m.array()).matrix();
  g_s_a += dsm.cwiseProduct(s_a);
  g_s_b += dsm.cwiseProduct(s_b);

  g_sig = (enc.sigma.array() >= kSigmaFloor).select(g_sig, 0.0);
  auto enc_back = mlp_backward(m.encoder, enc.tape, g_mu, g_sig);
  out.grad = ModelGradient{std::move(enc_back.params), std::move(dec_back.params)};
  return out;
}

/// Single-triplet loss; `noise` holds the z_prev draw followed by the z_next draw.
inline LossTerms elbo_hat(const EmbeddingModel& m, const Triplet& t, const Vec& noise, const TrainConfig& cfg) {
  const auto k = static_cast<Eigen::Index>(m.z_dim);
  if (noise.size() != 2 * k) throw std::invalid_argument("elbo_hat: noise must have 2*z_dim entries");
  return elbo_hat_batch(m, TripletBatch::single(t), noise.head(k), noise.tail(k), cfg.lambda, cfg.variance_doubling,
                        false)
      .terms;
}

/// Mean over the batch of || x_mid - dec_mu((enc_mu(x_prev) + enc_mu(x_next)) / 2) ||_2,
/// measured in the model's normalised coordinates. Only mu heads are used.
inline BatchLoss direct_loss_batch(const EmbeddingModel& m, const TripletBatch& batch, bool want_grad) {
  const auto n = static_cast<Eigen::Index>(m.state_dim);
  const auto k = static_cast<Eigen::Index>(m.z_dim);
  const auto b = batch.mid.cols();
  if (batch.prev.rows() != n || batch.mid.rows() != n || batch.next.rows() != n)
    throw std::invalid_argument("direct_loss: triplet state dimension does not match encoder input");

  Mat edges(n, 2 * b);
  edges << m.input.apply(batch.prev), m.input.apply(batch.next);
  const Mat target = m.input.apply(batch.mid);

  auto enc = mlp_forward(m.encoder, edges);
  const Mat zmid = 0.5 * (enc.mu.leftCols(b) + enc.mu.rightCols(b));
  auto dec = mlp_forward(m.decoder, zmid);
  const Mat resid = target - dec.mu;
  const Eigen::RowVectorXd norms = resid.colwise().norm();
  const double inv_b = 1.0 / static_cast<double>(b);

  BatchLoss out;
  out.terms.loss = norms.sum() * inv_b;
  out.terms.recon = out.terms.loss;
  detail::check_term(out.terms.loss, "direct");
  if (!want_grad) return out;

  Mat g_dmu(n, b);
  for (Eigen::Index c = 0; c < b; ++c)
    g_dmu.col(c) = norms(c) > 0.0 ? Vec(-resid.col(c) / norms(c) * inv_b) : Vec::Zero(n);
  auto dec_back = mlp_backward(m.decoder, dec.tape, g_dmu, Mat::Zero(n, b));
  Mat g_mu(k, 2 * b);
  g_mu << 0.5 * dec_back.input, 0.5 * dec_back.input;
  auto enc_back = mlp_backward(m.encoder, enc.tape, g_mu, Mat::Zero(k, 2 * b));
  out.grad = ModelGradient{std::move(enc_back.params), std::move(dec_back.params)};
  return out;
}

inline double direct_loss(const EmbeddingModel& m, const Triplet& t) {
  return direct_loss_batch(m, TripletBatch::single(t), false).terms.loss;
}

// ---------------------------------------------------------------------------
// Linearity metric

struct EvalReport {
  std::vector<double> distances;     // d_i: embedded endpoint distances
  std::vector<double> path_lengths;  // y_i: path lengths normalised to mean 1
  double scale = std::numeric_limits<double>::quiet_NaN();  // C
  std::vector<double> abs_errors;
  double error_mean = std::numeric_limits<double>::quiet_NaN();
  double error_std = std::numeric_limits<double>::quiet_NaN();
  bool degenerate = false;  // every d_i is zero, so C is undefined
};

/// Fits C = sum(d y) / sum(d^2) against path lengths normalised by their mean
/// and summarises |y_i - C d_i|.
inline EvalReport make_eval_report(std::vector<double> distances, const std::vector<double>& raw_lengths) {
  if (distances.size() != raw_lengths.size()) throw std::invalid_argument("eval: distances/lengths size mismatch");
  if (distances.size() < 2) throw std::invalid_argument("eval: need at least 2 trajectories");
  EvalReport r;
  r.distances = std::move(distances);
  const double mean_len = mean(raw_lengths);
  if (!(mean_len > 0.0)) throw std::invalid_argument("eval: trajectories have zero total path length");
  for (double y : raw_lengths) r.path_lengths.push_back(y / mean_len);

  double dy = 0.0, dd = 0.0;
  for (std::size_t i = 0; i < r.distances.size(); ++i) {
    dy += r.distances[i] * r.path_lengths[i];
    dd += r.distances[i] * r.distances[i];
  }
  if (dd == 0.0) {
    r.degenerate = true;
    return r;
  }
  r.scale = dy / dd;
  for (std::size_t i = 0; i < r.distances.size(); ++i)
    r.abs_errors.push_back(std::abs(r.path_lengths[i] - r.scale * r.distances[i]));
  r.error_mean = mean(r.abs_errors);
  r.error_std = stddev(r.abs_errors);
  return r;
}

inline EvalReport eval_metric(const EmbeddingModel& m, const std::vector<Trajectory>& trajs, const StateMetric& metric = {}) {
  if (trajs.size() < 2) throw std::invalid_argument("eval_metric: need at least 2 trajectories");
  const auto n = static_cast<Eigen::Index>(m.state_dim);
  const auto count = static_cast<Eigen::Index>(trajs.size());
  Mat ends(n, 2 * count);
  std::vector<double> lengths;
  for (Eigen::Index i = 0; i < count; ++i) {
    const auto& t = trajs[static_cast<std::size_t>(i)];
    if (t.state_dim() != n) throw std::invalid_argument("eval_metric: trajectory " + std::to_string(i) + " has wrong state dim");
    ends.col(i) = t.states.front();
    ends.col(count + i) = t.states.back();
    lengths.push_back(path_length(t, metric));
  }
  const Mat z = encode_mean(m, ends);
  std::vector<double> d;
  for (Eigen::Index i = 0; i < count; ++i) d.push_back((z.col(i) - z.col(count + i)).norm());
  return make_eval_report(std::move(d), lengths);
}

// ---------------------------------------------------------------------------
// Training

struct TrainLogRow {
  std::size_t step = 0;
  LossTerms terms;  // averaged over the steps since the previous row
  double metric_mean = std::numeric_limits<double>::quiet_NaN();
  double metric_std = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  EmbeddingModel model;
  std::vector<TrainLogRow> log;
  std::optional<EvalReport> final_report;
  std::uint64_t seed = 0;
};

inline std::string train_log_csv(const std::vector<TrainLogRow>& log) {
  std::string s = "step,loss,kl_prior,recon,kl_mid,metric_mean,metric_std\n";
  for (const auto& r : log) {
    s += std::to_string(r.step) + "," + fmt_num(r.terms.loss) + "," + fmt_num(r.terms.kl_prior) + "," +
         fmt_num(r.terms.recon) + "," + fmt_num(r.terms.kl_mid) + "," + fmt_num(r.metric_mean) + "," +
         fmt_num(r.metric_std) + "\n";
  }
  return s;
}

/// Minibatch Adam on the mean triplet loss. Deterministic given cfg.seed.
/// `eval_trajs` (optional, >= 2 entries) are scored every cfg.eval_every steps.
/// The input normaliser is fitted on `normalizer_trajs`, else `eval_trajs`,
/// else the triplet states.
inline TrainResult train_embedding(const TrainConfig& cfg, const TripletDataset& data,
                                   const std::vector<Trajectory>& eval_trajs = {}, const StateMetric& metric = {},
                                   const std::function<void(const TrainLogRow&)>& on_log = {},
                                   const std::vector<Trajectory>* normalizer_trajs = nullptr) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_embedding: empty triplet dataset");
  const auto state_dim = static_cast<std::size_t>(data.triplets.front().mid.size());

  std::mt19937_64 init_rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 1);
  TrainResult result;
  result.seed = cfg.seed;
  result.model = make_embedding_model(state_dim, cfg.z_dim, cfg.hidden, init_rng);
  if (cfg.normalize_inputs) {
    if (normalizer_trajs != nullptr && !normalizer_trajs->empty()) {
      result.model.input = Normalizer::fit(*normalizer_trajs);
    } else if (!eval_trajs.empty()) {
      result.model.input = Normalizer::fit(eval_trajs);
    } else {
      std::vector<Trajectory> pseudo(1);
      pseudo[0].states.reserve(data.size() * 3);
      for (const auto& t : data.triplets) pseudo[0].states.insert(pseudo[0].states.end(), {t.prev, t.mid, t.next});
      result.model.input = Normalizer::fit(pseudo);
    }
  }
  auto& model = result.model;
  AdamConfig adam_cfg;
  adam_cfg.learning_rate = cfg.learning_rate;
  auto enc_adam = make_adam(model.encoder, adam_cfg);
  auto dec_adam = make_adam(model.decoder, adam_cfg);

  std::mt19937_64 noise_rng(cfg.seed * 0xD1B54A32D192ED03ULL + 2);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto k = static_cast<Eigen::Index>(cfg.z_dim);

  std::size_t epoch = 0, cursor = 0;
  auto order = shuffled_indices(data.size(), cfg.seed + epoch);
  std::vector<std::size_t> idx(cfg.batch_size);

  const bool can_eval = eval_trajs.size() >= 2;
  LossTerms acc;
  std::size_t acc_n = 0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (auto& i : idx) {
      if (cursor == order.size()) {
        ++epoch;
        cursor = 0;
        order = shuffled_indices(data.size(), cfg.seed + epoch * 0x100000001B3ULL);
      }
      i = order[cursor++];
    }
    const auto batch = TripletBatch::gather(data.triplets, idx);

    BatchLoss bl;
    try {
      if (cfg.objective == Objective::elbo) {
        Mat e1(k, static_cast<Eigen::Index>(idx.size())), e2(k, static_cast<Eigen::Index>(idx.size()));
        for (Eigen::Index c = 0; c < e1.cols(); ++c) {
          for (Eigen::Index r = 0; r < k; ++r) e1(r, c) = normal(noise_rng);
          for (Eigen::Index r = 0; r < k; ++r) e2(r, c) = normal(noise_rng);
        }
        bl = elbo_hat_batch(model, batch, e1, e2, cfg.lambda, cfg.variance_doubling, true);
      } else {
        bl = direct_loss_batch(model, batch, true);
      }
      adam_step(enc_adam, model.encoder, bl.grad->encoder);
      adam_step(dec_adam, model.decoder, bl.grad->decoder);
    } catch (const std::runtime_error& e) {
      throw TrainingError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }

    acc.loss += bl.terms.loss;
    acc.kl_prior += bl.terms.kl_prior;
    acc.recon += bl.terms.recon;
    acc.kl_mid += bl.terms.kl_mid;
    ++acc_n;

    const bool eval_now = can_eval && (step % cfg.eval_every == 0 || step == cfg.steps);
    if (step % cfg.log_every == 0 || step == cfg.steps || eval_now) {
      TrainLogRow row;
      row.step = step;
      const double inv = 1.0 / static_cast<double>(acc_n);
      row.terms = {acc.loss * inv, acc.kl_prior * inv, acc.recon * inv, acc.kl_mid * inv};
      if (eval_now) {
        auto report = eval_metric(model, eval_trajs, metric);
        row.metric_mean = report.error_mean;
        row.metric_std = report.error_std;
        if (step == cfg.steps) result.final_report = std::move(report);
      }
      if (on_log) on_log(row);
      result.log.push_back(row);
      acc = {};
      acc_n = 0;
    }
  }
  return result;
}

/// Index of the run with the lowest final metric mean; ties go to the lower
/// error std, then to the earlier run. Degenerate or unevaluated runs are
/// skipped unless there is exactly one run.
inline std::size_t select_best_seed(const std::vector<std::optional<EvalReport>>& finals) {
  if (finals.empty()) throw std::invalid_argument("select_best_seed: no runs");
  if (finals.size() == 1) return 0;
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < finals.size(); ++i) {
    const auto& r = finals[i];
    if (!r || r->degenerate || !std::isfinite(r->error_mean)) continue;
    if (!best) {
      best = i;
      continue;
    }
    const auto& b = *finals[*best];
    if (r->error_mean < b.error_mean || (r->error_mean == b.error_mean && r->error_std < b.error_std)) best = i;
  }
  if (!best) throw std::runtime_error("select_best_seed: every run is degenerate");
  return *best;
}

inline std::size_t select_best_seed(const std::vector<TrainResult>& runs) {
  std::vector<std::optional<EvalReport>> finals;
  for (const auto& r : runs) finals.push_back(r.final_report);
  return select_best_seed(finals);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json embedding_to_json(const EmbeddingModel& m, std::uint64_t seed) {
  nlohmann::json j;
  j["format"] = "psse-embedding-v1";
  j["seed"] = seed;
  j["state_dim"] = m.state_dim;
  j["z_dim"] = m.z_dim;
  j["normalizer"] = {{"shift", std::vector<double>(m.input.shift.data(), m.input.shift.data() + m.input.shift.size())},
                     {"scale", std::vector<double>(m.input.scale.data(), m.input.scale.data() + m.input.scale.size())}};
  j["encoder"] = mlp_to_json(m.encoder);
  j["decoder"] = mlp_to_json(m.decoder);
  return j;
}

inline EmbeddingModel embedding_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "psse-embedding-v1") throw std::invalid_argument("not an embedding checkpoint");
  EmbeddingModel m;
  m.state_dim = j.at("state_dim").get<std::size_t>();
  m.z_dim = j.at("z_dim").get<std::size_t>();
  const auto shift = j.at("normalizer").at("shift").get<std::vector<double>>();
  const auto scale = j.at("normalizer").at("scale").get<std::vector<double>>();
  m.input.shift = Eigen::Map<const Vec>(shift.data(), static_cast<Eigen::Index>(shift.size()));
  m.input.scale = Eigen::Map<const Vec>(scale.data(), static_cast<Eigen::Index>(scale.size()));
  m.encoder = mlp_from_json(j.at("encoder"));
  m.decoder = mlp_from_json(j.at("decoder"));
  m.validate();
  return m;
}

}  // namespace psse
