#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "psse/embedding.hpp"

using namespace psse;

namespace {

Vec random_vec(Eigen::Index n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = d(rng);
  return v;
}

Triplet random_triplet(Eigen::Index n, std::mt19937_64& rng) {
  return {random_vec(n, rng), random_vec(n, rng), random_vec(n, rng), 1};
}

EmbeddingModel small_model(std::size_t n, std::size_t z, std::mt19937_64& rng, std::vector<std::size_t> hidden = {5}) {
  auto m = make_embedding_model(n, z, hidden, rng);
  for (auto* net : {&m.encoder, &m.decoder})
    for (auto& l : net->layers) l.bias = random_vec(l.bias.size(), rng, 0.3);
  return m;
}

// Flat view over encoder then decoder parameters.
std::vector<double> flat_model(const EmbeddingModel& m) {
  auto a = flatten(m.encoder);
  auto b = flatten(m.decoder);
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

void set_flat_model(EmbeddingModel& m, const std::vector<double>& v) {
  const auto ne = m.encoder.parameter_count();
  unflatten(m.encoder, std::span<const double>(v.data(), ne));
  unflatten(m.decoder, std::span<const double>(v.data() + ne, v.size() - ne));
}

std::vector<double> flat_grad(const ModelGradient& g) {
  auto a = flatten(g.encoder);
  auto b = flatten(g.decoder);
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Standard single-state VAE loss: KL(q(z|x) || N(0,I)) - log p(x|z), z = mu + sigma * eps.
double vae_loss(const EmbeddingModel& m, const Vec& x, const Vec& eps) {
  const auto q = encode(m, x);
  const Vec z = reparam_sample(q, eps);
  auto out = mlp_forward(m.decoder, z);
  const DiagGaussian px{out.mu.col(0), out.sigma.col(0)};
  return kl_divergence(q, DiagGaussian::standard(q.dim())) - log_prob(px, x);
}

// Direct loss evaluated with explicit loops, independent of Eigen batching.
double hand_direct_loss(const EmbeddingModel& m, const Triplet& t) {
  auto run = [](const MlpParams& p, std::vector<double> x) {
    for (std::size_t k = 0; k < p.layers.size(); ++k) {
      const auto& l = p.layers[k];
      std::vector<double> y(static_cast<std::size_t>(l.weight.rows()));
      for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
        double s = l.bias(r);
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) s += l.weight(r, c) * x[static_cast<std::size_t>(c)];
        y[static_cast<std::size_t>(r)] = k + 1 < p.layers.size() ? std::tanh(s) : s;
      }
      x = y;
    }
    x.resize(p.head_size);
    return x;
  };
  auto to_std = [](const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  auto za = run(m.encoder, to_std(t.prev));
  auto zb = run(m.encoder, to_std(t.next));
  std::vector<double> zm(za.size());
  for (std::size_t i = 0; i < za.size(); ++i) zm[i] = 0.5 * (za[i] + zb[i]);
  auto x = run(m.decoder, zm);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (t.mid(static_cast<Eigen::Index>(i)) - x[i]) * (t.mid(static_cast<Eigen::Index>(i)) - x[i]);
  return std::sqrt(s);
}

Trajectory straight_line(const Vec& start, const Vec& velocity, std::size_t n) {
  Trajectory t;
  t.env_id = "line";
  t.dt = 0.1;
  for (std::size_t i = 0; i < n; ++i) t.states.push_back(start + velocity * static_cast<double>(i));
  return t;
}

}  // namespace

TEST(ElboHat, PriorMatchingEncoderHasZeroPriorKl) {
  std::mt19937_64 rng(1);
  auto m = make_embedding_model(3, 2, {4}, rng);
  for (auto& l : m.encoder.layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
  TrainConfig cfg;
  auto terms = elbo_hat(m, random_triplet(3, rng), random_vec(4, rng), cfg);
  EXPECT_EQ(terms.kl_prior, 0.0);
  EXPECT_EQ(terms.kl_mid, 0.0);
}

TEST(ElboHat, ConstantEncoderMidKlVanishesOnlyWithDoubling) {
  std::mt19937_64 rng(2);
  auto m = make_embedding_model(3, 2, {4}, rng);
  for (auto& l : m.encoder.layers) l.weight.setZero();
  m.encoder.layers.back().bias << 0.3, -0.7, 0.4, -1.1;
  const Vec x = random_vec(3, rng);
  const Triplet t{x, x, x, 1};
  TrainConfig cfg;
  cfg.variance_doubling = true;
  EXPECT_NEAR(elbo_hat(m, t, random_vec(4, rng), cfg).kl_mid, 0.0, 1e-15);
  cfg.variance_doubling = false;
  // KL(N(mu, s^2/2) || N(mu, s^2)) = ln sqrt(2) - 1/4 per dimension.
  EXPECT_NEAR(elbo_hat(m, t, random_vec(4, rng), cfg).kl_mid, 2 * (0.5 * std::log(2.0) - 0.25), 1e-12);
}

TEST(ElboHat, TermsAgreeWithDistributionAlgebra) {
  std::mt19937_64 rng(3);
  auto m = small_model(3, 2, rng);
  const auto t = random_triplet(3, rng);
  const Vec noise = random_vec(4, rng);
  TrainConfig cfg;
  const auto terms = elbo_hat(m, t, noise, cfg);

  const auto qa = encode(m, t.prev), qt = encode(m, t.mid), qb = encode(m, t.next);
  const auto mid = midpoint_distribution(qa, qb, true);
  const auto prior = DiagGaussian::standard(2);
  EXPECT_NEAR(terms.kl_prior, kl_divergence(qa, prior) + kl_divergence(qb, prior), 1e-12);
  EXPECT_NEAR(terms.kl_mid, kl_divergence(mid, qt), 1e-12);

  const Vec ea = noise.head(2), eb = noise.tail(2);
  const Vec zhat = reparam_sample(mid, (ea + eb) / std::sqrt(2.0));
  double nll = 0.0;
  for (const auto& [x, z] : {std::pair{t.prev, reparam_sample(qa, ea)}, std::pair{t.mid, zhat},
                             std::pair{t.next, reparam_sample(qb, eb)}}) {
    auto out = mlp_forward(m.decoder, z);
    nll -= log_prob({out.mu.col(0), out.sigma.col(0)}, x);
  }
  EXPECT_NEAR(terms.recon, nll, 1e-10);
  EXPECT_NEAR(terms.loss, terms.kl_prior + terms.recon + 0.5 * terms.kl_mid, 1e-12);
}

TEST(ElboHat, ReducesToVaeOnDegenerateTriplets) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto m = small_model(3, 2, rng);
    const Vec x = random_vec(3, rng);
    const Vec ea = random_vec(2, rng), eb = random_vec(2, rng);
    Vec noise(4);
    noise << ea, eb;
    TrainConfig cfg;
    cfg.lambda = 1e-300;  // effectively zero; TrainConfig requires lambda > 0
    const auto terms = elbo_hat(m, {x, x, x, 1}, noise, cfg);

    // With identical edges and doubling, the midpoint sample is a plain VAE
    // sample of x driven by (ea + eb) / sqrt(2).
    const Vec em = (ea + eb) / std::sqrt(2.0);
    const double expected = vae_loss(m, x, ea) + vae_loss(m, x, eb) + vae_loss(m, x, em) -
                            kl_divergence(encode(m, x), DiagGaussian::standard(2));
    EXPECT_NEAR(terms.loss, expected, 1e-10);
  }
}

TEST(ElboHat, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t n = 2 + trial % 3, z = 1 + trial % 3;
    auto m = small_model(n, z, rng, trial % 2 ? std::vector<std::size_t>{6, 4} : std::vector<std::size_t>{5});
    std::vector<Triplet> ts;
    for (int i = 0; i < 3; ++i) ts.push_back(random_triplet(static_cast<Eigen::Index>(n), rng));
    const auto batch = TripletBatch::gather(ts, {0, 1, 2});
    Mat e1(z, 3), e2(z, 3);
    for (Eigen::Index i = 0; i < e1.size(); ++i) {
      e1.data()[i] = random_vec(1, rng)(0);
      e2.data()[i] = random_vec(1, rng)(0);
    }
    const bool doubling = trial % 4 != 3;
    const double lambda = 0.5 + trial * 0.1;
    auto analytic = elbo_hat_batch(m, batch, e1, e2, lambda, doubling, true);

    auto probe = m;
    auto f = [&](const std::vector<double>& v) {
      set_flat_model(probe, v);
      return elbo_hat_batch(probe, batch, e1, e2, lambda, doubling, false).terms.loss;
    };
    auto r = fd::compare_gradients(flat_grad(*analytic.grad), fd::numeric_gradient(f, flat_model(m)));
    EXPECT_LT(r.max_rel_error, 1e-4) << "trial " << trial << " idx " << r.worst_index << " a=" << r.analytic
                                     << " n=" << r.numeric;
  }
}

TEST(ElboHat, RejectsMismatchedInputs) {
  std::mt19937_64 rng(6);
  auto m = small_model(3, 2, rng);
  TrainConfig cfg;
  EXPECT_THROW(elbo_hat(m, random_triplet(4, rng), random_vec(4, rng), cfg), std::invalid_argument);
  EXPECT_THROW(elbo_hat(m, random_triplet(3, rng), random_vec(3, rng), cfg), std::invalid_argument);
}

TEST(ElboHat, NonFiniteTermIsNamed) {
  std::mt19937_64 rng(7);
  auto m = small_model(3, 2, rng);
  m.decoder.layers.back().bias(0) = 1e200;
  TrainConfig cfg;
  try {
    elbo_hat(m, random_triplet(3, rng), random_vec(4, rng), cfg);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("recon"), std::string::npos) << e.what();
  }
}

TEST(DirectLoss, IdentityAutoencoderOnLinearTrajectoryIsZero) {
  std::mt19937_64 rng(8);
  auto m = make_embedding_model(3, 3, {}, rng);
  m.encoder.layers[0].weight.setZero();
  m.encoder.layers[0].weight.topRows(3) = Mat::Identity(3, 3);
  m.decoder.layers[0].weight.setZero();
  m.decoder.layers[0].weight.topRows(3) = Mat::Identity(3, 3);
  const auto line = straight_line(random_vec(3, rng), random_vec(3, rng), 9);
  for (const auto& t : sample_triplets(line, {1, 2, 4})) EXPECT_NEAR(direct_loss(m, t), 0.0, 1e-12);
}

TEST(DirectLoss, ConstantTrajectoryEqualsReconstructionError) {
  std::mt19937_64 rng(9);
  auto m = small_model(3, 2, rng);
  const Vec x = random_vec(3, rng);
  const Vec recon = mlp_forward(m.decoder, encode(m, x).mu).mu.col(0);
  EXPECT_NEAR(direct_loss(m, {x, x, x, 1}), (x - recon).norm(), 1e-12);
}

TEST(DirectLoss, MatchesHandRolledForward) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = small_model(4, 3, rng, {6, 5});
    const auto t = random_triplet(4, rng);
    EXPECT_NEAR(direct_loss(m, t), hand_direct_loss(m, t), 1e-12);
  }
}

TEST(DirectLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    auto m = small_model(3, 2, rng, {5});
    std::vector<Triplet> ts{random_triplet(3, rng), random_triplet(3, rng)};
    const auto batch = TripletBatch::gather(ts, {0, 1});
    auto analytic = direct_loss_batch(m, batch, true);
    auto probe = m;
    auto f = [&](const std::vector<double>& v) {
      set_flat_model(probe, v);
      return direct_loss_batch(probe, batch, false).terms.loss;
    };
    auto r = fd::compare_gradients(flat_grad(*analytic.grad), fd::numeric_gradient(f, flat_model(m)));
    EXPECT_LT(r.max_rel_error, 1e-4) << "trial " << trial;
  }
}

TEST(EvalReport, ProportionalCase) {
  auto r = make_eval_report({1.0, 2.0}, {1.0, 2.0});
  // y = [2/3, 4/3] after normalisation, so C = 2/3.
  EXPECT_NEAR(r.scale, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.error_mean, 0.0, 1e-15);
  EXPECT_FALSE(r.degenerate);
}

TEST(EvalReport, EqualDistances) {
  auto r = make_eval_report({1.0, 1.0}, {2.0, 4.0});
  EXPECT_NEAR(r.path_lengths[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.path_lengths[1], 4.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.scale, 1.0, 1e-15);
  EXPECT_NEAR(r.abs_errors[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.abs_errors[1], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.error_mean, 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.error_std, 0.0, 1e-15);
}

TEST(EvalReport, NormalisedLengthsHaveUnitMean) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.1, 10.0);
  std::vector<double> d, y;
  for (int i = 0; i < 17; ++i) {
    d.push_back(u(rng));
    y.push_back(u(rng));
  }
  auto r = make_eval_report(d, y);
  EXPECT_NEAR(mean(r.path_lengths), 1.0, 1e-14);
}

TEST(EvalReport, DegenerateEmbeddingIsFlagged) {
  auto r = make_eval_report({0.0, 0.0, 0.0}, {1.0, 2.0, 3.0});
  EXPECT_TRUE(r.degenerate);
  EXPECT_TRUE(std::isnan(r.scale));
  EXPECT_THROW(make_eval_report({1.0}, {1.0}), std::invalid_argument);
}

TEST(EvalMetric, UsesEncoderMeansAtEndpoints) {
  std::mt19937_64 rng(13);
  auto m = make_embedding_model(2, 2, {}, rng);
  m.encoder.layers[0].weight.setZero();
  m.encoder.layers[0].weight.topRows(2) = 2.0 * Mat::Identity(2, 2);
  Vec v(2);
  v << 1.0, 0.0;
  std::vector<Trajectory> trajs{straight_line(Vec::Zero(2), v, 4), straight_line(Vec::Ones(2), 2 * v, 4)};
  auto r = eval_metric(m, trajs);
  EXPECT_NEAR(r.distances[0], 6.0, 1e-12);
  EXPECT_NEAR(r.distances[1], 12.0, 1e-12);
  EXPECT_NEAR(r.error_mean, 0.0, 1e-12);
  EXPECT_THROW(eval_metric(m, {trajs[0]}), std::invalid_argument);
}

TEST(Encode, Deterministic) {
  std::mt19937_64 rng(14);
  auto m = small_model(4, 3, rng);
  const Vec x = random_vec(4, rng);
  const auto a = encode(m, x), b = encode(m, x);
  EXPECT_EQ(a.mu, b.mu);
  EXPECT_EQ(a.sigma, b.sigma);
}

TEST(SelectBestSeed, Cases) {
  auto report = [](double m, double s) {
    EvalReport r;
    r.error_mean = m;
    r.error_std = s;
    return std::optional<EvalReport>(r);
  };
  EXPECT_EQ(select_best_seed({report(0.3, 0.1), report(0.1, 0.5), report(0.2, 0.0)}), 1u);
  EXPECT_EQ(select_best_seed({report(0.1, 0.2), report(0.1, 0.1)}), 1u);
  EXPECT_EQ(select_best_seed({report(0.1, 0.1), report(0.1, 0.1)}), 0u);
  EXPECT_EQ(select_best_seed({std::optional<EvalReport>{}}), 0u);
  EvalReport degenerate;
  degenerate.degenerate = true;
  EXPECT_THROW(select_best_seed({degenerate, degenerate}), std::runtime_error);
  EXPECT_EQ(select_best_seed({degenerate, *report(0.9, 0.1)}), 1u);
}

TEST(Checkpoint, EmbeddingRoundTrip) {
  std::mt19937_64 rng(15);
  auto m = small_model(4, 3, rng);
  m.input.shift = random_vec(4, rng);
  m.input.scale = random_vec(4, rng).cwiseAbs();
  auto back = embedding_from_json(nlohmann::json::parse(embedding_to_json(m, 77).dump()));
  EXPECT_EQ(flat_model(back), flat_model(m));
  EXPECT_EQ(back.input.shift, m.input.shift);
  EXPECT_EQ(back.input.scale, m.input.scale);
  const Vec x = random_vec(4, rng);
  EXPECT_EQ(encode(back, x).mu, encode(m, x).mu);
}

TEST(TrainEmbedding, DeterministicPerSeedAndFinite) {
  std::mt19937_64 rng(16);
  std::vector<Trajectory> trajs;
  for (int i = 0; i < 6; ++i) trajs.push_back(straight_line(random_vec(3, rng), random_vec(3, rng, 0.1), 25));
  const auto data = build_triplet_dataset(trajs, {1, 3, 5});
  TrainConfig cfg;
  cfg.steps = 60;
  cfg.batch_size = 16;
  cfg.z_dim = 2;
  cfg.hidden = {8};
  cfg.log_every = 10;
  cfg.eval_every = 30;
  cfg.seed = 1;
  auto a = train_embedding(cfg, data, trajs);
  auto b = train_embedding(cfg, data, trajs);
  EXPECT_EQ(train_log_csv(a.log), train_log_csv(b.log));
  cfg.seed = 2;
  auto c = train_embedding(cfg, data, trajs);
  EXPECT_NE(train_log_csv(a.log), train_log_csv(c.log));
  for (const auto* r : {&a, &c}) {
    ASSERT_TRUE(r->final_report.has_value());
    for (const auto& row : r->log) EXPECT_TRUE(std::isfinite(row.terms.loss));
  }
  EXPECT_EQ(a.log.size(), 6u);
  EXPECT_TRUE(std::isnan(a.log[0].metric_mean));
  EXPECT_FALSE(std::isnan(a.log[2].metric_mean));
}

TEST(TrainEmbedding, RejectsEmptyDataset) {
  TrainConfig cfg;
  EXPECT_THROW(train_embedding(cfg, TripletDataset{}), std::invalid_argument);
  cfg.lambda = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
