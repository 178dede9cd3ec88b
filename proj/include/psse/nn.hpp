#pragma once

// Small fully connected networks with hand-written reverse mode and Adam.
//
// Batches are stored column-wise: an input batch is (features x batch).
// Hidden layers use tanh. The output layer is split into a linear mu head
// and, optionally, a sigma head passed through sigma_activation.

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace psse {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Positive activation used for standard-deviation heads: x+1 for x >= 0,
/// exp(x) otherwise. Value and slope are both 1 at the seam.
inline double sigma_activation(double x) { return x >= 0.0 ? x + 1.0 : std::exp(x); }

inline double sigma_activation_grad(double x) { return x >= 0.0 ? 1.0 : std::exp(x); }

/// tanh through the vectorised exp; libm's scalar tanh dominates training time otherwise.
template <class Derived>
Mat tanh_activation(const Eigen::MatrixBase<Derived>& z) {
  const auto e = (2.0 * z.array().max(-20.0).min(20.0)).exp();
  return (1.0 - 2.0 / (e + 1.0)).matrix();
}

struct Layer {
  Mat weight;  // out x in
  Vec bias;    // out
};

namespace detail {
inline std::uint64_t next_net_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}
}  // namespace detail

struct MlpParams {
  std::vector<Layer> layers;
  std::size_t head_size = 0;
  bool sigma_head = true;
  // Identity of the weight set; a tape is only valid for the (id, generation)
  // that produced it. Every in-place update bumps the generation.
  std::uint64_t id = detail::next_net_id();
  std::uint64_t generation = 0;

  std::size_t input_size() const { return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().weight.cols()); }
  std::size_t output_size() const { return head_size * (sigma_head ? 2 : 1); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  void validate() const {
    if (layers.empty()) throw std::invalid_argument("mlp: no layers");
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const auto& l = layers[k];
      if (l.weight.rows() != l.bias.size())
        throw std::invalid_argument("mlp: layer " + std::to_string(k) + " bias size " + std::to_string(l.bias.size()) +
                                    " != weight rows " + std::to_string(l.weight.rows()));
      if (k > 0 && l.weight.cols() != layers[k - 1].weight.rows())
        throw std::invalid_argument("mlp: layer " + std::to_string(k) + " expects " + std::to_string(l.weight.cols()) +
                                    " inputs but layer " + std::to_string(k - 1) + " produces " +
                                    std::to_string(layers[k - 1].weight.rows()));
    }
    if (static_cast<std::size_t>(layers.back().weight.rows()) != output_size())
      throw std::invalid_argument("mlp: output layer width " + std::to_string(layers.back().weight.rows()) +
                                  " does not match heads (" + std::to_string(output_size()) + ")");
  }
};

/// Glorot-uniform weights, zero biases.
inline MlpParams make_mlp(std::size_t inputs, const std::vector<std::size_t>& hidden, std::size_t head_size,
                          bool sigma_head, std::mt19937_64& rng) {
  if (inputs == 0 || head_size == 0) throw std::invalid_argument("make_mlp: zero-width input or head");
  MlpParams p;
  p.head_size = head_size;
  p.sigma_head = sigma_head;
  std::size_t fan_in = inputs;
  auto add_layer = [&](std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-limit, limit);
    Layer l{Mat(fan_out, fan_in), Vec::Zero(static_cast<Eigen::Index>(fan_out))};
    for (Eigen::Index c = 0; c < l.weight.cols(); ++c)
      for (Eigen::Index r = 0; r < l.weight.rows(); ++r) l.weight(r, c) = u(rng);
    p.layers.push_back(std::move(l));
    fan_in = fan_out;
  };
  for (std::size_t h : hidden) {
    if (h == 0) throw std::invalid_argument("make_mlp: zero-width hidden layer");
    add_layer(h);
  }
  add_layer(p.output_size());
  return p;
}

/// Gradient (or any other quantity) with the same shape as an MlpParams.
struct MlpGradient {
  std::vector<Layer> layers;

  static MlpGradient zeros_like(const MlpParams& p) {
    MlpGradient g;
    g.layers.reserve(p.layers.size());
    for (const auto& l : p.layers) g.layers.push_back({Mat::Zero(l.weight.rows(), l.weight.cols()), Vec::Zero(l.bias.size())});
    return g;
  }

  MlpGradient& operator+=(const MlpGradient& o) {
    if (o.layers.size() != layers.size()) throw std::invalid_argument("gradient: layer count mismatch");
    for (std::size_t k = 0; k < layers.size(); ++k) {
      layers[k].weight += o.layers[k].weight;
      layers[k].bias += o.layers[k].bias;
    }
    return *this;
  }

  MlpGradient& operator*=(double s) {
    for (auto& l : layers) {
      l.weight *= s;
      l.bias *= s;
    }
    return *this;
  }

  bool all_finite() const {
    for (const auto& l : layers)
      if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    return true;
  }
};

/// Everything the backward pass needs. `activations[k]` is the input to layer k.
struct MlpTape {
  std::uint64_t net_id = 0;
  std::uint64_t generation = 0;
  std::vector<Mat> activations;
  Mat raw_output;
};

struct MlpOutput {
  Mat mu;
  Mat sigma;  // empty when the net has no sigma head
  MlpTape tape;
};

inline MlpOutput mlp_forward(const MlpParams& p, const Mat& input) {
  p.validate();
  if (static_cast<std::size_t>(input.rows()) != p.input_size())
    throw std::invalid_argument("mlp_forward: layer 0 expects " + std::to_string(p.input_size()) + " inputs, got " +
                                std::to_string(input.rows()));
  if (!input.allFinite()) throw std::invalid_argument("mlp_forward: non-finite input");

  MlpOutput out;
  out.tape.net_id = p.id;
  out.tape.generation = p.generation;
  out.tape.activations.reserve(p.layers.size());
  out.tape.activations.push_back(input);
  for (std::size_t k = 0; k + 1 < p.layers.size(); ++k) {
    const auto& l = p.layers[k];
    Mat z = l.weight * out.tape.activations.back();
    z.colwise() += l.bias;
    out.tape.activations.push_back(tanh_activation(z));
  }
  const auto& last = p.layers.back();
  out.tape.raw_output = last.weight * out.tape.activations.back();
  out.tape.raw_output.colwise() += last.bias;

  const auto m = static_cast<Eigen::Index>(p.head_size);
  out.mu = out.tape.raw_output.topRows(m);
  if (p.sigma_head) out.sigma = out.tape.raw_output.bottomRows(m).unaryExpr([](double x) { return sigma_activation(x); });
  return out;
}

inline MlpOutput mlp_forward(const MlpParams& p, const Vec& input) { return mlp_forward(p, Mat(input)); }

struct MlpBackward {
  MlpGradient params;
  Mat input;  // d loss / d input, same shape as the forward input
};

/// Exact gradients of a scalar loss given its gradients w.r.t. the heads.
/// Batch columns are summed. `grad_sigma` may be empty for nets without a
/// sigma head.
inline MlpBackward mlp_backward(const MlpParams& p, const MlpTape& tape, const Mat& grad_mu, const Mat& grad_sigma) {
  if (tape.net_id != p.id || tape.generation != p.generation)
    throw std::invalid_argument("mlp_backward: tape is stale or belongs to another network");
  if (tape.activations.size() != p.layers.size())
    throw std::invalid_argument("mlp_backward: tape depth does not match network");
  const Eigen::Index batch = tape.raw_output.cols();
  const auto m = static_cast<Eigen::Index>(p.head_size);
  if (grad_mu.rows() != m || grad_mu.cols() != batch)
    throw std::invalid_argument("mlp_backward: grad_mu has wrong shape");

  Mat delta(tape.raw_output.rows(), batch);
  delta.topRows(m) = grad_mu;
  if (p.sigma_head) {
    if (grad_sigma.rows() != m || grad_sigma.cols() != batch)
      throw std::invalid_argument("mlp_backward: grad_sigma has wrong shape");
    delta.bottomRows(m) = grad_sigma.cwiseProduct(
        tape.raw_output.bottomRows(m).unaryExpr([](double x) { return sigma_activation_grad(x); }));
  } else if (grad_sigma.size() != 0) {
    throw std::invalid_argument("mlp_backward: grad_sigma given for a net without a sigma head");
  }

  MlpBackward out;
  out.params.layers.resize(p.layers.size());
  for (std::size_t k = p.layers.size(); k-- > 0;) {
    const Mat& a = tape.activations[k];
    out.params.layers[k].weight = delta * a.transpose();
    out.params.layers[k].bias = delta.rowwise().sum();
    Mat upstream = p.layers[k].weight.transpose() * delta;
    if (k == 0) {
      out.input = std::move(upstream);
    } else {
      // a = tanh(z)  =>  dz = da * (1 - a^2)
      delta = upstream.array() * (1.0 - a.array().square());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Eigen::ArrayXd> first;
  std::vector<Eigen::ArrayXd> second;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::vector<std::span<double>> tensors(MlpParams& p) {
  std::vector<std::span<double>> t;
  for (auto& l : p.layers) {
    t.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
    t.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
  return t;
}

inline std::vector<std::span<const double>> tensors(const MlpGradient& g) {
  std::vector<std::span<const double>> t;
  for (const auto& l : g.layers) {
    t.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
    t.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
  return t;
}

/// Moments start at zero; sized from the parameter tensors.
inline AdamState make_adam(const std::vector<std::span<double>>& params, AdamConfig config = {}) {
  if (!(config.learning_rate >= 0.0) || !(config.epsilon > 0.0) || !(config.beta1 >= 0.0 && config.beta1 < 1.0) ||
      !(config.beta2 >= 0.0 && config.beta2 < 1.0))
    throw std::invalid_argument("adam: invalid hyperparameters");
  AdamState s;
  s.config = config;
  for (const auto& t : params) {
    s.first.push_back(Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(t.size())));
    s.second.push_back(Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(t.size())));
  }
  return s;
}

inline AdamState make_adam(MlpParams& p, AdamConfig config = {}) { return make_adam(tensors(p), config); }

/// One bias-corrected Adam update. Nothing is modified when any gradient
/// component is non-finite.
inline void adam_step(AdamState& s, const std::vector<std::span<double>>& params,
                      const std::vector<std::span<const double>>& grads) {
  if (params.size() != grads.size() || params.size() != s.first.size())
    throw std::invalid_argument("adam_step: tensor count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size() || static_cast<Eigen::Index>(params[i].size()) != s.first[i].size())
      throw std::invalid_argument("adam_step: tensor " + std::to_string(i) + " shape mismatch");
    for (double g : grads[i])
      if (!std::isfinite(g)) throw NonFiniteError("adam_step: non-finite gradient in tensor " + std::to_string(i));
  }

  const auto& c = s.config;
  s.step += 1;
  const double t = static_cast<double>(s.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Eigen::Map<Eigen::ArrayXd> p(params[i].data(), static_cast<Eigen::Index>(params[i].size()));
    Eigen::Map<const Eigen::ArrayXd> g(grads[i].data(), static_cast<Eigen::Index>(grads[i].size()));
    s.first[i] = c.beta1 * s.first[i] + (1.0 - c.beta1) * g;
    s.second[i] = c.beta2 * s.second[i] + (1.0 - c.beta2) * g.square();
    p -= c.learning_rate * (s.first[i] / correction1) / ((s.second[i] / correction2).sqrt() + c.epsilon);
  }
}

inline void adam_step(AdamState& s, MlpParams& p, const MlpGradient& g) {
  adam_step(s, tensors(p), tensors(g));
  p.generation += 1;
}

// ---------------------------------------------------------------------------
// Flat views, mostly for gradient checking.

inline std::vector<double> flatten(const MlpParams& p) {
  std::vector<double> out;
  out.reserve(p.parameter_count());
  for (const auto& l : p.layers) {
    out.insert(out.end(), l.weight.data(), l.weight.data() + l.weight.size());
    out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
  }
  return out;
}

inline std::vector<double> flatten(const MlpGradient& g) {
  std::vector<double> out;
  for (const auto& l : g.layers) {
    out.insert(out.end(), l.weight.data(), l.weight.data() + l.weight.size());
    out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
  }
  return out;
}

inline void unflatten(MlpParams& p, std::span<const double> values) {
  if (values.size() != p.parameter_count()) throw std::invalid_argument("unflatten: size mismatch");
  std::size_t i = 0;
  for (auto& l : p.layers) {
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(i), l.weight.size(), l.weight.data());
    i += static_cast<std::size_t>(l.weight.size());
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(i), l.bias.size(), l.bias.data());
    i += static_cast<std::size_t>(l.bias.size());
  }
  p.generation += 1;
}

// ---------------------------------------------------------------------------
// Checkpoints. Weights are stored row-major as JSON numbers; nlohmann::json
// prints doubles with round-trip precision, so load(save(p)) is bit-exact.

inline nlohmann::json mlp_to_json(const MlpParams& p) {
  nlohmann::json j;
  j["head_size"] = p.head_size;
  j["sigma_head"] = p.sigma_head;
  auto& layers = j["layers"] = nlohmann::json::array();
  for (const auto& l : p.layers) {
    nlohmann::json jl;
    jl["rows"] = l.weight.rows();
    jl["cols"] = l.weight.cols();
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(l.weight.size()));
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) w.push_back(l.weight(r, c));
    jl["weight"] = std::move(w);
    jl["bias"] = std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size());
    layers.push_back(std::move(jl));
  }
  return j;
}

inline MlpParams mlp_from_json(const nlohmann::json& j) {
  MlpParams p;
  p.head_size = j.at("head_size").get<std::size_t>();
  p.sigma_head = j.at("sigma_head").get<bool>();
  for (const auto& jl : j.at("layers")) {
    const auto rows = jl.at("rows").get<Eigen::Index>();
    const auto cols = jl.at("cols").get<Eigen::Index>();
    const auto w = jl.at("weight").get<std::vector<double>>();
    const auto b = jl.at("bias").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(w.size()) != rows * cols || static_cast<Eigen::Index>(b.size()) != rows)
      throw std::invalid_argument("mlp checkpoint: layer " + std::to_string(p.layers.size()) + " has inconsistent sizes");
    Layer l{Mat(rows, cols), Vec(rows)};
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) l.weight(r, c) = w[static_cast<std::size_t>(r * cols + c)];
      l.bias(r) = b[static_cast<std::size_t>(r)];
    }
    p.layers.push_back(std::move(l));
  }
  p.validate();
  return p;
}

}  // namespace psse
