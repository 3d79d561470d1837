#pragma once

// State-conditional denoising diffusion policy over subgoals.
//
// The noise model eps_theta(g^i, s, i) is an MLP over g^i (+) s (+) a
// sinusoidal embedding of i. Sampling runs the reverse chain
//   g^{i-1} = (g^i - beta_i / (1 - abar_i) * eps_theta) / sqrt(alpha_i) + sqrt(beta_i) * eps
// with eps = 0 at i = 1, then clamps g^0 to the subgoal box. The chain can be
// recorded and differentiated end to end.

#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

#include "hidi/errors.hpp"
#include "hidi/nn.hpp"

namespace hidi {

struct NoiseSchedule {
  int n_steps = 0;
  // Index 0 holds step i = 1.
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  double beta_at(int i) const { return beta.at(static_cast<std::size_t>(i - 1)); }
  double alpha_at(int i) const { return alpha.at(static_cast<std::size_t>(i - 1)); }
  double alpha_bar_at(int i) const { return alpha_bar.at(static_cast<std::size_t>(i - 1)); }
};

/// Variance-preserving schedule:
///   beta_i = 1 - exp(-beta_min/N - (beta_max - beta_min)(2i - 1) / (2N^2)).
inline NoiseSchedule make_schedule(int n_steps, double beta_min = 0.1, double beta_max = 10.0) {
  if (n_steps < 1) throw config_error("diffusion needs at least one step");
  NoiseSchedule s;
  s.n_steps = n_steps;
  const double n = static_cast<double>(n_steps);
  double prod = 1.0;
  for (int i = 1; i <= n_steps; ++i) {
    const double b = 1.0 - std::exp(-beta_min / n - (beta_max - beta_min) * (2.0 * i - 1.0) / (2.0 * n * n));
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  return s;
}

/// Axis-aligned box.
struct Box {
  Vec lo;
  Vec hi;

  int dim() const { return static_cast<int>(lo.size()); }
  Vec range() const { return hi - lo; }
  Mat clamp(const Mat& m) const {
    return m.cwiseMax(lo.replicate(1, m.cols())).cwiseMin(hi.replicate(1, m.cols()));
  }
  bool contains(const Vec& v) const {
    return (v.array() >= lo.array()).all() && (v.array() <= hi.array()).all();
  }
  static Box symmetric(int dim, double half_width) {
    return {Vec::Constant(dim, -half_width), Vec::Constant(dim, half_width)};
  }
};

/// Sinusoidal embedding of an integer step: [sin(i w_j), cos(i w_j)] with
/// w_j = 10000^(-j / (dim/2 - 1)).
inline Vec time_embedding(int step, int dim) {
  Vec out = Vec::Zero(dim);
  const int half = dim / 2;
  for (int j = 0; j < half; ++j) {
    const double freq =
        half > 1 ? std::exp(-std::log(10000.0) * j / static_cast<double>(half - 1)) : 1.0;
    out(j) = std::sin(step * freq);
    out(half + j) = std::cos(step * freq);
  }
  return out;
}

struct DiffusionPolicy {
  int state_dim = 0;
  int goal_dim = 0;
  int time_embed_dim = 16;
  NoiseSchedule schedule;
  Box bounds;
  Mlp eps_net;
  ParamStore params;
};

inline DiffusionPolicy make_diffusion_policy(int state_dim, Box bounds, int n_steps,
                                             const std::vector<int>& hidden, Rng& rng,
                                             int time_embed_dim = 16,
                                             Activation activation = Activation::mish) {
  DiffusionPolicy p;
  p.state_dim = state_dim;
  p.goal_dim = bounds.dim();
  p.time_embed_dim = time_embed_dim;
  p.schedule = make_schedule(n_steps);
  p.bounds = std::move(bounds);
  MlpSpec spec;
  spec.layer_widths.push_back(p.goal_dim + state_dim + time_embed_dim);
  for (int h : hidden) spec.layer_widths.push_back(h);
  spec.layer_widths.push_back(p.goal_dim);
  spec.activation = activation;
  spec.output_activation = OutputActivation::identity;
  p.eps_net = Mlp(spec, "eps");
  p.eps_net.init(p.params, rng);
  return p;
}

namespace detail {

inline Mat standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

inline void check_states(const DiffusionPolicy& p, const Mat& states) {
  if (states.rows() != p.state_dim)
    throw config_error("state has " + std::to_string(states.rows()) + " rows, policy expects " +
                       std::to_string(p.state_dim));
}

}  // namespace detail

/// Network input [g^i; s; emb(i)] for one shared step.
inline Mat eps_input(const DiffusionPolicy& p, const Mat& gi, const Mat& states, int step) {
  Mat in(p.goal_dim + p.state_dim + p.time_embed_dim, gi.cols());
  in.topRows(p.goal_dim) = gi;
  in.middleRows(p.goal_dim, p.state_dim) = states;
  in.bottomRows(p.time_embed_dim) = time_embedding(step, p.time_embed_dim).replicate(1, gi.cols());
  return in;
}

/// Network input with a per-column step.
inline Mat eps_input(const DiffusionPolicy& p, const Mat& gi, const Mat& states,
                     const std::vector<int>& steps) {
  Mat in(p.goal_dim + p.state_dim + p.time_embed_dim, gi.cols());
  in.topRows(p.goal_dim) = gi;
  in.middleRows(p.goal_dim, p.state_dim) = states;
  for (Eigen::Index c = 0; c < gi.cols(); ++c)
    in.col(c).tail(p.time_embed_dim) = time_embedding(steps[static_cast<std::size_t>(c)], p.time_embed_dim);
  return in;
}

/// g^i = sqrt(abar_i) g^0 + sqrt(1 - abar_i) eps
inline Mat forward_noise(const Mat& g0, int step, const Mat& eps, const NoiseSchedule& sched) {
  if (step < 1 || step > sched.n_steps) throw usage_error("diffusion step out of range");
  const double ab = sched.alpha_bar_at(step);
  return std::sqrt(ab) * g0 + std::sqrt(1.0 - ab) * eps;
}

/// Coefficients of one reverse step: g^{i-1} = a (g^i - c eps_theta) + sqrt(beta_i) eps.
struct ReverseCoefficients {
  double inv_sqrt_alpha;
  double eps_coef;
  double noise_scale;
};

inline ReverseCoefficients reverse_coefficients(const NoiseSchedule& s, int step) {
  const double b = s.beta_at(step);
  return {1.0 / std::sqrt(s.alpha_at(step)), b / (1.0 - s.alpha_bar_at(step)), std::sqrt(b)};
}

/// One reverse denoising step. `eps` is ignored (forced to zero) at step 1.
inline Mat reverse_step(const DiffusionPolicy& p, const Mat& gi, const Mat& states, int step,
                        const Mat& eps) {
  if (step < 1 || step > p.schedule.n_steps) throw usage_error("diffusion step out of range");
  detail::check_states(p, states);
  const auto c = reverse_coefficients(p.schedule, step);
  const Mat pred = mlp_predict(p.params, p.eps_net, eps_input(p, gi, states, step));
  Mat out = c.inv_sqrt_alpha * (gi - c.eps_coef * pred);
  if (step > 1) out += c.noise_scale * eps;
  return out;
}

/// All randomness of one batched reverse chain.
struct ChainNoise {
  Mat initial;                // g^N
  std::vector<Mat> per_step;  // per_step[i - 1] is the noise injected at step i (unused at i = 1)
};

inline ChainNoise draw_chain_noise(const DiffusionPolicy& p, Eigen::Index batch, Rng& rng) {
  ChainNoise n;
  n.initial = detail::standard_normal(p.goal_dim, batch, rng);
  n.per_step.resize(static_cast<std::size_t>(p.schedule.n_steps));
  for (int i = p.schedule.n_steps; i >= 2; --i)
    n.per_step[static_cast<std::size_t>(i - 1)] = detail::standard_normal(p.goal_dim, batch, rng);
  n.per_step[0] = Mat::Zero(p.goal_dim, batch);
  return n;
}

inline ChainNoise zero_chain_noise(const DiffusionPolicy& p, Eigen::Index batch) {
  ChainNoise n;
  n.initial = Mat::Zero(p.goal_dim, batch);
  n.per_step.assign(static_cast<std::size_t>(p.schedule.n_steps), Mat::Zero(p.goal_dim, batch));
  return n;
}

/// Recorded reverse chain. steps[i - 1] holds the eps_theta pass of step i.
struct ChainTape {
  std::vector<MlpTape> steps;
  Mat inside_mask;  // 1 where the unclamped g^0 lay inside the box
};

struct ChainSample {
  Mat g0;          // clamped subgoals, one column per state
  Mat unclamped;   // g^0 before clamping
  ChainTape tape;
};

/// Runs the reverse chain from explicit noise, recording every step.
inline ChainSample sample_chain(const DiffusionPolicy& p, const Mat& states, const ChainNoise& noise) {
  detail::check_states(p, states);
  const int n = p.schedule.n_steps;
  ChainSample out;
  out.tape.steps.resize(static_cast<std::size_t>(n));
  Mat g = noise.initial;
  for (int i = n; i >= 1; --i) {
    const auto c = reverse_coefficients(p.schedule, i);
    auto& tape = out.tape.steps[static_cast<std::size_t>(i - 1)];
    tape = mlp_forward(p.params, p.eps_net, eps_input(p, g, states, i));
    Mat next = c.inv_sqrt_alpha * (g - c.eps_coef * tape.output);
    if (i > 1) next += c.noise_scale * noise.per_step[static_cast<std::size_t>(i - 1)];
    g = std::move(next);
  }
  out.unclamped = g;
  out.g0 = p.bounds.clamp(g);
  out.tape.inside_mask =
      ((g.array() >= p.bounds.lo.replicate(1, g.cols()).array()) &&
       (g.array() <= p.bounds.hi.replicate(1, g.cols()).array()))
          .cast<double>()
          .matrix();
  return out;
}

inline ChainSample sample_chain(const DiffusionPolicy& p, const Mat& states, Rng& rng) {
  return sample_chain(p, states, draw_chain_noise(p, states.cols(), rng));
}

/// Pathwise gradient: pushes dL/dg^0 back through the clamp and every reverse
/// step, accumulating into the eps_net parameters. Returns dL/dg^N.
inline Mat chain_backward(DiffusionPolicy& p, const ChainTape& tape, const Mat& d_g0) {
  Mat u = d_g0.cwiseProduct(tape.inside_mask);
  for (int i = 1; i <= p.schedule.n_steps; ++i) {
    const auto c = reverse_coefficients(p.schedule, i);
    // g^{i-1} = a g^i - a c eps_theta(g^i)
    const Mat d_pred = -c.inv_sqrt_alpha * c.eps_coef * u;
    const Mat d_in = mlp_backward(p.params, tape.steps[static_cast<std::size_t>(i - 1)], d_pred);
    u = c.inv_sqrt_alpha * u + d_in.topRows(p.goal_dim);
  }
  return u;
}

/// Draws one subgoal for a single state.
inline Vec sample_subgoal(const Vec& state, const DiffusionPolicy& p, Rng& rng) {
  return sample_chain(p, Mat(state), rng).g0.col(0);
}

/// Random draws for the denoising loss: a step and a noise vector per sample.
struct DdpmDraws {
  std::vector<int> steps;
  Mat noise;
};

inline DdpmDraws draw_ddpm(const DiffusionPolicy& p, Eigen::Index batch, Rng& rng) {
  DdpmDraws d;
  std::uniform_int_distribution<int> step(1, p.schedule.n_steps);
  d.steps.resize(static_cast<std::size_t>(batch));
  for (auto& s : d.steps) s = step(rng);
  d.noise = detail::standard_normal(p.goal_dim, batch, rng);
  return d;
}

/// Mean over the batch of ||eps - eps_theta(sqrt(abar) g + sqrt(1 - abar) eps, s, i)||^2.
/// Adds the gradient, scaled by `weight`, into the eps_net parameters.
inline double ddpm_loss(DiffusionPolicy& p, const Mat& states, const Mat& goals,
                        const DdpmDraws& draws, double weight = 1.0) {
  if (goals.cols() == 0) throw usage_error("ddpm_loss on an empty batch");
  detail::check_states(p, states);
  const Eigen::Index b = goals.cols();
  Mat noisy(p.goal_dim, b);
  for (Eigen::Index c = 0; c < b; ++c) {
    const double ab = p.schedule.alpha_bar_at(draws.steps[static_cast<std::size_t>(c)]);
    noisy.col(c) = std::sqrt(ab) * goals.col(c) + std::sqrt(1.0 - ab) * draws.noise.col(c);
  }
  const auto tape = mlp_forward(p.params, p.eps_net, eps_input(p, noisy, states, draws.steps));
  const Mat resid = tape.output - draws.noise;
  const double loss = resid.squaredNorm() / static_cast<double>(b);
  if (weight != 0.0) mlp_backward(p.params, tape, (2.0 * weight / static_cast<double>(b)) * resid);
  return loss;
}

inline double ddpm_loss(DiffusionPolicy& p, const Mat& states, const Mat& goals, Rng& rng) {
  return ddpm_loss(p, states, goals, draw_ddpm(p, goals.cols(), rng));
}

/// Q(s, g) evaluated column-wise. When `dq_dg` is non-null it receives dQ/dg.
using QFunction = std::function<Vec(const Mat& states, const Mat& goals, Mat* dq_dg)>;

/// -mean Q(s, g^0) with g^0 drawn through the recorded chain; the gradient
/// (times `weight`) flows through every reverse step into eps_net.
inline double dpg_loss(DiffusionPolicy& p, const Mat& states, const QFunction& critic,
                       const ChainNoise& noise, double weight = 1.0) {
  const auto sample = sample_chain(p, states, noise);
  Mat dq;
  const Vec q = critic(states, sample.g0, &dq);
  const double b = static_cast<double>(states.cols());
  if (weight != 0.0) chain_backward(p, sample.tape, (-weight / b) * dq);
  return -q.mean();
}

inline double dpg_loss(DiffusionPolicy& p, const Mat& states, const QFunction& critic, Rng& rng) {
  return dpg_loss(p, states, critic, draw_chain_noise(p, states.cols(), rng));
}

}  // namespace hidi
