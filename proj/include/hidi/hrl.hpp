#pragma once

// Two-level goal-conditioned agent: a diffusion subgoal generator (or a TD3
// actor for the baseline variant) on top of a deterministic TD3 low-level
// controller. Subgoals are relative displacements in goal space.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hidi/checkpoint.hpp"
#include "hidi/diffusion.hpp"
#include "hidi/env.hpp"
#include "hidi/errors.hpp"
#include "hidi/gp.hpp"
#include "hidi/nn.hpp"

namespace hidi {

struct HrlConfig {
  int k = 10;                    // subgoal period
  double eta = 5.0;              // weight of the policy-gradient term
  double psi = 1e-3;             // weight of the GP prior term
  double epsilon_select = 0.1;   // probability of emitting the GP mean
  int n_diffusion = 5;
  double discount = 0.99;
  double reward_scale_hi = 0.1;
  double reward_scale_lo = 1.0;
  int batch_hi = 100;
  int batch_lo = 128;
  int buffer_capacity = 200000;
  int relabel_candidates = 10;

  void validate() const {
    if (k < 1) throw config_error("hrl.k must be >= 1");
    if (!(epsilon_select >= 0.0 && epsilon_select <= 1.0))
      throw config_error("hrl.epsilon_select must lie in [0, 1]");
    if (eta < 0.0 || psi < 0.0) throw config_error("hrl.eta and hrl.psi must be >= 0");
    if (!(discount > 0.0 && discount < 1.0)) throw config_error("hrl.discount must lie in (0, 1)");
    if (n_diffusion < 1) throw config_error("hrl.n_diffusion must be >= 1");
    if (batch_hi < 1 || batch_lo < 1) throw config_error("batch sizes must be >= 1");
    if (buffer_capacity < 1) throw config_error("hrl.buffer_capacity must be >= 1");
    if (relabel_candidates < 1) throw config_error("hrl.relabel_candidates must be >= 1");
  }
};

struct Td3Settings {
  double polyak = 0.005;
  int policy_delay = 2;
  double target_noise = 0.2;  // fraction of the action half-range
  double noise_clip = 0.5;    // fraction of the action half-range
  double actor_lr = 1e-4;
  double critic_lr = 1e-3;
};

struct NetConfig {
  std::vector<int> hi_hidden{256};
  std::vector<int> critic_hidden{300};
  std::vector<int> lo_hidden{300};
  int time_embed_dim = 16;
};

struct GpSettings {
  int inducing = 16;
  double lr = 3e-4;
  double init_gamma = 1.0;
  double init_ell = 1.0;
  double init_sigma = 0.1;
  double jitter = 1e-6;
};

enum class Variant { hidi, hidi_a, hidi_b, baseline };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::hidi: return "hidi";
    case Variant::hidi_a: return "hidi-a";
    case Variant::hidi_b: return "hidi-b";
    case Variant::baseline: return "baseline";
  }
  return "hidi";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "hidi") return Variant::hidi;
  if (s == "hidi-a") return Variant::hidi_a;
  if (s == "hidi-b") return Variant::hidi_b;
  if (s == "baseline") return Variant::baseline;
  throw config_error("unknown variant '" + s + "'");
}

/// Applies the ablation semantics of a variant to an HRL configuration.
inline HrlConfig apply_variant(HrlConfig cfg, Variant v) {
  if (v != Variant::hidi) cfg.epsilon_select = 0.0;
  if (v == Variant::hidi_b || v == Variant::baseline) cfg.psi = 0.0;
  return cfg;
}

// ---------------------------------------------------------------------------
// Goal-space helpers

/// Re-expresses a relative subgoal after the agent moved: s_prev + g_prev - s_now.
inline Vec goal_transition(const Vec& g_prev, const Vec& s_prev, const Vec& s_now) {
  return s_prev + g_prev - s_now;
}

/// -||s + g - s_next||
inline double intrinsic_reward(const Vec& s, const Vec& g, const Vec& s_next) {
  return -(s + g - s_next).norm();
}

// ---------------------------------------------------------------------------
// Replay

struct Transition {
  Vec s, g, a;
  double r = 0.0;
  Vec s_next, g_next;
  bool done = false;
};

struct HiTransition {
  Vec s_start;
  Vec g;             // subgoal as originally issued
  double r_sum = 0;  // already multiplied by reward_scale_hi
  Vec s_end;
  std::vector<Vec> low_states;
  std::vector<Vec> low_actions;
  bool done = false;
};

/// Fixed-capacity FIFO buffer.
template <typename T>
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 1) : capacity_(capacity) {
    if (capacity_ == 0) throw config_error("replay capacity must be positive");
  }

  void push(T item) {
    if (data_.size() < capacity_) {
      data_.push_back(std::move(item));
    } else {
      data_[next_] = std::move(item);
    }
    next_ = (next_ + 1) % capacity_;
  }

  std::size_t size() const { return data_.size(); }
  std::size_t capacity() const { return capacity_; }
  const T& at(std::size_t i) const { return data_.at(i); }
  /// Oldest-first view index.
  const T& oldest(std::size_t i) const {
    return data_.size() < capacity_ ? data_.at(i) : data_.at((next_ + i) % capacity_);
  }

  std::vector<std::size_t> sample_indices(std::size_t n, Rng& rng) const {
    if (data_.empty()) throw usage_error("sampling from an empty replay buffer");
    std::uniform_int_distribution<std::size_t> u(0, data_.size() - 1);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = u(rng);
    return idx;
  }

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::vector<T> data_;
};

// ---------------------------------------------------------------------------
// TD3

struct Td3Pair {
  Mlp actor_net;
  Mlp critic_net;
  ParamStore actor, actor_target;
  ParamStore critic1, critic2, critic1_target, critic2_target;
  Td3Settings settings;
  int obs_dim = 0;
  int act_dim = 0;
  double action_scale = 1.0;
  long updates = 0;
  bool has_actor = true;
};

inline Td3Pair make_td3(int obs_dim, int act_dim, double action_scale,
                        const std::vector<int>& actor_hidden, const std::vector<int>& critic_hidden,
                        const Td3Settings& settings, Rng& rng, bool with_actor = true) {
  Td3Pair p;
  p.settings = settings;
  p.obs_dim = obs_dim;
  p.act_dim = act_dim;
  p.action_scale = action_scale;
  p.has_actor = with_actor;
  MlpSpec critic;
  critic.layer_widths.push_back(obs_dim + act_dim);
  for (int h : critic_hidden) critic.layer_widths.push_back(h);
  critic.layer_widths.push_back(1);
  critic.activation = Activation::relu;
  p.critic_net = Mlp(critic, "critic");
  p.critic_net.init(p.critic1, rng);
  p.critic_net.init(p.critic2, rng);
  p.critic_net.init(p.critic1_target, rng);
  p.critic_net.init(p.critic2_target, rng);
  p.critic1_target.copy_values_from(p.critic1);
  p.critic2_target.copy_values_from(p.critic2);
  if (with_actor) {
    MlpSpec actor;
    actor.layer_widths.push_back(obs_dim);
    for (int h : actor_hidden) actor.layer_widths.push_back(h);
    actor.layer_widths.push_back(act_dim);
    actor.activation = Activation::relu;
    actor.output_activation = OutputActivation::tanh_scaled;
    actor.output_scale = action_scale;
    p.actor_net = Mlp(actor, "actor");
    p.actor_net.init(p.actor, rng);
    p.actor_net.init(p.actor_target, rng);
    p.actor_target.copy_values_from(p.actor);
  }
  return p;
}

inline Mat stack_rows(const Mat& top, const Mat& bottom) {
  Mat out(top.rows() + bottom.rows(), top.cols());
  out.topRows(top.rows()) = top;
  out.bottomRows(bottom.rows()) = bottom;
  return out;
}

/// Clipped target-policy smoothing noise for a batch of target actions.
inline Mat smoothed_target_actions(const Mat& actions, double scale, const Td3Settings& s, Rng& rng) {
  std::normal_distribution<double> n(0.0, s.target_noise * scale);
  Mat out = actions;
  const double clip = s.noise_clip * scale;
  for (Eigen::Index i = 0; i < out.size(); ++i) out(i) += std::clamp(n(rng), -clip, clip);
  return out;
}

/// r + discount * (1 - done) * min(Q1'(s', a'), Q2'(s', a'))
inline Vec td3_target_values(const Td3Pair& p, const Mat& next_obs, const Mat& next_actions,
                             const Vec& rewards, const Vec& dones, double discount) {
  const Mat in = stack_rows(next_obs, next_actions);
  const Vec q1 = mlp_predict(p.critic1_target, p.critic_net, in).row(0).transpose();
  const Vec q2 = mlp_predict(p.critic2_target, p.critic_net, in).row(0).transpose();
  return rewards.array() + discount * (1.0 - dones.array()) * q1.cwiseMin(q2).array();
}

/// Regresses both critics toward `targets`; returns the summed MSE.
inline double td3_critic_update(Td3Pair& p, const Mat& obs, const Mat& actions, const Vec& targets) {
  const Mat in = stack_rows(obs, actions);
  const double b = static_cast<double>(obs.cols());
  double loss = 0.0;
  for (ParamStore* c : {&p.critic1, &p.critic2}) {
    const auto tape = mlp_forward(*c, p.critic_net, in);
    const Vec resid = tape.output.row(0).transpose() - targets;
    loss += resid.squaredNorm() / b;
    mlp_backward(*c, tape, (2.0 / b) * resid.transpose());
  }
  if (!std::isfinite(loss)) throw training_error("critic", "non-finite critic loss");
  adam_step(p.critic1, p.settings.critic_lr);
  adam_step(p.critic2, p.settings.critic_lr);
  return loss;
}

/// Q1 as a differentiable function of the action, for policy gradients.
inline QFunction critic_q_function(Td3Pair& p) {
  return [&p](const Mat& states, const Mat& goals, Mat* dq) -> Vec {
    const auto tape = mlp_forward(p.critic1, p.critic_net, stack_rows(states, goals));
    if (dq != nullptr) {
      const Mat din = mlp_backward(p.critic1, tape, Mat::Ones(1, states.cols()), false);
      *dq = din.bottomRows(goals.rows());
    }
    return tape.output.row(0).transpose();
  };
}

/// Deterministic policy gradient step on the actor; returns -mean Q1.
inline double td3_actor_update(Td3Pair& p, const Mat& obs) {
  const auto tape = mlp_forward(p.actor, p.actor_net, obs);
  Mat dq;
  const Vec q = critic_q_function(p)(obs, tape.output, &dq);
  mlp_backward(p.actor, tape, (-1.0 / static_cast<double>(obs.cols())) * dq);
  adam_step(p.actor, p.settings.actor_lr);
  return -q.mean();
}

inline void td3_sync_targets(Td3Pair& p) {
  p.critic1_target.polyak_from(p.critic1, p.settings.polyak);
  p.critic2_target.polyak_from(p.critic2, p.settings.polyak);
  if (p.has_actor) p.actor_target.polyak_from(p.actor, p.settings.polyak);
}

struct LowReport {
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  bool actor_updated = false;
};

/// One TD3 update of the low-level controller on (s (+) g) observations.
inline LowReport update_low(Td3Pair& p, const ReplayBuffer<Transition>& buffer, const HrlConfig& cfg, Rng& rng) {
  const auto idx = buffer.sample_indices(static_cast<std::size_t>(cfg.batch_lo), rng);
  const Eigen::Index b = static_cast<Eigen::Index>(idx.size());
  const auto& first = buffer.at(idx[0]);
  const Eigen::Index sd = first.s.size(), gd = first.g.size(), ad = first.a.size();
  Mat obs(sd + gd, b), next_obs(sd + gd, b), act(ad, b);
  Vec rew(b), done(b);
  for (Eigen::Index c = 0; c < b; ++c) {
    const auto& t = buffer.at(idx[static_cast<std::size_t>(c)]);
    obs.col(c) << t.s, t.g;
    next_obs.col(c) << t.s_next, t.g_next;
    act.col(c) = t.a;
    rew(c) = cfg.reward_scale_lo * t.r;
    done(c) = t.done ? 1.0 : 0.0;
  }
  const double scale = p.action_scale;
  Mat next_act = smoothed_target_actions(mlp_predict(p.actor_target, p.actor_net, next_obs), scale,
                                         p.settings, rng)
                     .cwiseMax(-scale)
                     .cwiseMin(scale);
  const Vec y = td3_target_values(p, next_obs, next_act, rew, done, cfg.discount);
  LowReport rep;
  rep.critic_loss = td3_critic_update(p, obs, act, y);
  p.updates += 1;
  if (p.updates % p.settings.policy_delay == 0) {
    rep.actor_loss = td3_actor_update(p, obs);
    rep.actor_updated = true;
    td3_sync_targets(p);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Relabeling

/// Candidate subgoals: the original, the achieved displacement, then Gaussian
/// perturbations of the displacement (std = range / 4), all clamped to the box.
inline std::vector<Vec> relabel_candidates(const HiTransition& hi, const Box& bounds, int count, Rng& rng) {
  std::vector<Vec> out;
  out.push_back(hi.g);
  if (count <= 1) return out;
  const Vec delta = bounds.clamp(Mat(hi.s_end - hi.s_start)).col(0);
  out.push_back(delta);
  const Vec sd = bounds.range() / 4.0;
  std::normal_distribution<double> n(0.0, 1.0);
  for (int c = 2; c < count; ++c) {
    Vec v = delta;
    for (Eigen::Index d = 0; d < v.size(); ++d) v(d) += sd(d) * n(rng);
    out.push_back(bounds.clamp(Mat(v)).col(0));
  }
  return out;
}

namespace detail {

// Appends the (s_i, g~_i) observation columns of every candidate.
inline void append_relabel_inputs(const HiTransition& hi, const std::vector<Vec>& candidates, Mat& obs,
                                  Eigen::Index& col) {
  const std::size_t k = hi.low_states.size();
  for (const auto& cand : candidates) {
    Vec g = cand;
    for (std::size_t i = 0; i < k; ++i) {
      obs.col(col).head(hi.low_states[i].size()) = hi.low_states[i];
      obs.col(col).tail(g.size()) = g;
      ++col;
      const Vec& next = i + 1 < k ? hi.low_states[i + 1] : hi.s_end;
      g = goal_transition(g, hi.low_states[i], next);
    }
  }
}

inline Vec score_from_predictions(const HiTransition& hi, std::size_t n_candidates, const Mat& pred,
                                  Eigen::Index& col) {
  const std::size_t k = hi.low_states.size();
  Vec scores = Vec::Zero(static_cast<Eigen::Index>(n_candidates));
  for (std::size_t c = 0; c < n_candidates; ++c)
    for (std::size_t i = 0; i < k; ++i, ++col)
      scores(static_cast<Eigen::Index>(c)) -= 0.5 * (hi.low_actions[i] - pred.col(col)).squaredNorm();
  return scores;
}

}  // namespace detail

/// -1/2 sum_i ||a_i - pi_l(s_i, g~_i)||^2 for each candidate, with g~ rolled
/// forward by the goal transition.
inline Vec relabel_scores(const HiTransition& hi, const Td3Pair& low, const std::vector<Vec>& candidates) {
  const std::size_t k = hi.low_states.size();
  if (k == 0) throw usage_error("relabel needs a nonempty low-level sequence");
  const Eigen::Index width = hi.low_states[0].size() + candidates[0].size();
  Mat obs(width, static_cast<Eigen::Index>(k * candidates.size()));
  Eigen::Index col = 0;
  detail::append_relabel_inputs(hi, candidates, obs, col);
  const Mat pred = mlp_predict(low.actor, low.actor_net, obs);
  col = 0;
  return detail::score_from_predictions(hi, candidates.size(), pred, col);
}

/// Index of the first maximal score.
inline std::size_t argmax_first(const Vec& scores) {
  std::size_t best = 0;
  for (Eigen::Index i = 1; i < scores.size(); ++i)
    if (scores(i) > scores(static_cast<Eigen::Index>(best))) best = static_cast<std::size_t>(i);
  return best;
}

inline Vec relabel(const HiTransition& hi, const Td3Pair& low, const Box& bounds, int count, Rng& rng) {
  if (hi.low_states.empty()) throw usage_error("relabel needs a nonempty low-level sequence");
  const auto cands = relabel_candidates(hi, bounds, count, rng);
  return cands[argmax_first(relabel_scores(hi, low, cands))];
}

/// relabel() over a minibatch with one actor pass; consumes the generator in
/// the same order as calling relabel() per transition.
inline Mat relabel_batch(const std::vector<const HiTransition*>& batch, const Td3Pair& low, const Box& bounds,
                         int count, Rng& rng) {
  std::vector<std::vector<Vec>> cands;
  cands.reserve(batch.size());
  Eigen::Index cols = 0;
  for (const auto* hi : batch) {
    if (hi->low_states.empty()) throw usage_error("relabel needs a nonempty low-level sequence");
    cands.push_back(relabel_candidates(*hi, bounds, count, rng));
    cols += static_cast<Eigen::Index>(hi->low_states.size() * cands.back().size());
  }
  Mat out(bounds.dim(), static_cast<Eigen::Index>(batch.size()));
  if (batch.empty()) return out;
  Mat obs(batch[0]->low_states[0].size() + bounds.dim(), cols);
  Eigen::Index col = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) detail::append_relabel_inputs(*batch[b], cands[b], obs, col);
  const Mat pred = mlp_predict(low.actor, low.actor_net, obs);
  col = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Vec scores = detail::score_from_predictions(*batch[b], cands[b].size(), pred, col);
    out.col(static_cast<Eigen::Index>(b)) = cands[b][argmax_first(scores)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subgoal selection

struct SubgoalChoice {
  Vec g;
  bool from_gp_mean = false;
};

/// Emits the GP predictive mean with probability epsilon, otherwise a
/// diffusion sample. Without a usable GP it always samples the diffusion model.
inline SubgoalChoice select_subgoal(const Vec& s, const DiffusionPolicy& policy, const SparseGpModel* gp,
                                    double epsilon, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const bool pick_mean = u(rng) < epsilon;
  if (pick_mean && gp != nullptr && gp->caches_fresh()) {
    const auto pred = gp->predict(s);
    return {policy.bounds.clamp(Mat(pred.mean)).col(0), true};
  }
  return {sample_subgoal(s, policy, rng), false};
}

// ---------------------------------------------------------------------------
// Composite high-level objective

struct HighLossDraws {
  DdpmDraws ddpm;
  ChainNoise chain;
};

inline HighLossDraws draw_high_loss(const DiffusionPolicy& p, Eigen::Index batch, Rng& rng) {
  HighLossDraws d;
  d.ddpm = draw_ddpm(p, batch, rng);
  d.chain = draw_chain_noise(p, batch, rng);
  return d;
}

struct HighLossTerms {
  double dm = 0.0;
  double gp = 0.0;
  double dpg = 0.0;
  double total = 0.0;
  double sigma_star_mean = 0.0;
};

/// L_dm + psi L_gp + eta L_dpg on one batch. L_gp and L_dpg share one recorded
/// chain sample; their subgoal gradients are summed and pushed through it
/// once. Gradients land in `policy.params`; the GP and critic are read only.
inline HighLossTerms composite_loss(DiffusionPolicy& policy, const Mat& states, const Mat& goals,
                                    const QFunction* critic, const SparseGpModel* gp, double psi,
                                    double eta, const HighLossDraws& draws) {
  HighLossTerms t;
  t.dm = ddpm_loss(policy, states, goals, draws.ddpm, 1.0);
  if (!std::isfinite(t.dm)) throw training_error("loss_dm", "non-finite diffusion loss");
  const bool use_gp = gp != nullptr && gp->caches_fresh();
  const bool use_q = critic != nullptr && eta != 0.0;
  if (use_gp || use_q) {
    const auto sample = sample_chain(policy, states, draws.chain);
    Mat d_g = Mat::Zero(sample.g0.rows(), sample.g0.cols());
    if (use_gp) {
      const auto reg = gp_reg_loss(states, sample.g0, *gp);
      t.gp = reg.value;
      t.sigma_star_mean = reg.variance.mean();
      if (!std::isfinite(t.gp)) throw training_error("loss_gp", "non-finite GP regularization loss");
      if (psi != 0.0) d_g += psi * reg.d_goals;
    }
    if (use_q) {
      Mat dq;
      const Vec q = (*critic)(states, sample.g0, &dq);
      t.dpg = -q.mean();
      if (!std::isfinite(t.dpg)) throw training_error("loss_dpg", "non-finite policy-gradient loss");
      d_g -= (eta / static_cast<double>(states.cols())) * dq;
    }
    if (psi != 0.0 || use_q) chain_backward(policy, sample.tape, d_g);
  }
  t.total = t.dm + psi * t.gp + eta * t.dpg;
  return t;
}

// ---------------------------------------------------------------------------
// Agent

struct AgentSpec {
  HrlConfig hrl;
  Td3Settings td3;
  NetConfig nets;
  GpSettings gp;
  Variant variant = Variant::hidi;
  int state_dim = 2;
  int action_dim = 2;
  double action_scale = 1.0;
  double subgoal_limit = 2.5;   // subgoal box is [-limit, limit]^state_dim
  double lo_explore_std = 0.1;  // fraction of action_scale
  double hi_explore_std = 0.2;  // baseline only, fraction of subgoal_limit
  double hi_actor_lr = 1e-4;    // diffusion or baseline actor
  int warmup_steps = 5000;
};

struct HighReport {
  HighLossTerms terms;
  double critic_loss = 0.0;
  double gp_nll = 0.0;
  bool policy_updated = false;
};

class HrlAgent {
 public:
  HrlAgent(const AgentSpec& spec, Rng& rng)
      : spec_(spec),
        cfg_(apply_variant(spec.hrl, spec.variant)),
        bounds_(Box::symmetric(spec.state_dim, spec.subgoal_limit)),
        low_buffer_(static_cast<std::size_t>(spec.hrl.buffer_capacity)),
        high_buffer_(static_cast<std::size_t>(spec.hrl.buffer_capacity)) {
    cfg_.validate();
    Td3Settings lo = spec.td3;
    lo_ = make_td3(spec.state_dim * 2, spec.action_dim, spec.action_scale, spec.nets.lo_hidden,
                   spec.nets.critic_hidden, lo, rng, true);
    Td3Settings hi = spec.td3;
    hi.actor_lr = spec.hi_actor_lr;
    const bool baseline = spec.variant == Variant::baseline;
    hi_ = make_td3(spec.state_dim, spec.state_dim, spec.subgoal_limit, spec.nets.hi_hidden,
                   spec.nets.critic_hidden, hi, rng, baseline);
    if (!baseline) {
      diffusion_ = make_diffusion_policy(spec.state_dim, bounds_, cfg_.n_diffusion, spec.nets.hi_hidden,
                                         rng, spec.nets.time_embed_dim);
    } else {
      // Kept for uniform bookkeeping; never sampled.
      diffusion_.bounds = bounds_;
      diffusion_.state_dim = spec.state_dim;
      diffusion_.goal_dim = spec.state_dim;
    }
    gp_ = SparseGpModel(spec.state_dim, spec.state_dim, spec.gp.inducing,
                        GpHyper::from_natural(spec.gp.init_gamma, spec.gp.init_ell, spec.gp.init_sigma));
    gp_.set_base_jitter(spec.gp.jitter);
  }

  const AgentSpec& spec() const { return spec_; }
  const HrlConfig& config() const { return cfg_; }
  const Box& subgoal_bounds() const { return bounds_; }
  bool uses_gp() const { return spec_.variant != Variant::baseline && (cfg_.psi != 0.0 || cfg_.epsilon_select != 0.0); }
  bool gp_ready() const { return gp_ready_; }
  bool in_warmup() const { return env_steps_ < spec_.warmup_steps; }

  long env_steps() const { return env_steps_; }
  void count_env_step() { ++env_steps_; }

  DiffusionPolicy& diffusion() { return diffusion_; }
  const DiffusionPolicy& diffusion() const { return diffusion_; }
  SparseGpModel& gp() { return gp_; }
  const SparseGpModel& gp() const { return gp_; }
  Td3Pair& high() { return hi_; }
  const Td3Pair& high() const { return hi_; }
  Td3Pair& low() { return lo_; }
  const Td3Pair& low() const { return lo_; }
  ReplayBuffer<Transition>& low_buffer() { return low_buffer_; }
  ReplayBuffer<HiTransition>& high_buffer() { return high_buffer_; }
  const ReplayBuffer<Transition>& low_buffer() const { return low_buffer_; }
  const ReplayBuffer<HiTransition>& high_buffer() const { return high_buffer_; }

  /// High-level decision. `train` enables warmup randomness and baseline
  /// exploration noise; the diffusion/GP mixture is the acting policy in both modes.
  SubgoalChoice choose_subgoal(const Vec& s, Rng& rng, bool train) const {
    if (train && in_warmup()) {
      std::uniform_real_distribution<double> u(-spec_.subgoal_limit, spec_.subgoal_limit);
      Vec g(spec_.state_dim);
      for (Eigen::Index d = 0; d < g.size(); ++d) g(d) = u(rng);
      return {g, false};
    }
    if (spec_.variant == Variant::baseline) {
      Vec g = mlp_predict(hi_.actor, hi_.actor_net, s);
      if (train) {
        std::normal_distribution<double> n(0.0, spec_.hi_explore_std * spec_.subgoal_limit);
        for (Eigen::Index d = 0; d < g.size(); ++d) g(d) += n(rng);
      }
      return {bounds_.clamp(Mat(g)).col(0), false};
    }
    const SparseGpModel* gp = gp_ready_ ? &gp_ : nullptr;
    return select_subgoal(s, diffusion_, gp, cfg_.epsilon_select, rng);
  }

  Vec act(const Vec& s, const Vec& g, Rng& rng, bool train) const {
    if (train && in_warmup()) {
      std::uniform_real_distribution<double> u(-spec_.action_scale, spec_.action_scale);
      Vec a(spec_.action_dim);
      for (Eigen::Index d = 0; d < a.size(); ++d) a(d) = u(rng);
      return a;
    }
    Vec obs(s.size() + g.size());
    obs << s, g;
    Vec a = mlp_predict(lo_.actor, lo_.actor_net, obs);
    if (train) {
      std::normal_distribution<double> n(0.0, spec_.lo_explore_std * spec_.action_scale);
      for (Eigen::Index d = 0; d < a.size(); ++d) a(d) += n(rng);
    }
    return a.cwiseMax(-spec_.action_scale).cwiseMin(spec_.action_scale);
  }

  LowReport update_low(Rng& rng) { return hidi::update_low(lo_, low_buffer_, cfg_, rng); }

  /// One high-level update on a relabeled minibatch: GP step, policy step
  /// (every policy_delay updates), critic step.
  HighReport update_high(Rng& rng) {
    const auto idx = high_buffer_.sample_indices(static_cast<std::size_t>(cfg_.batch_hi), rng);
    const Eigen::Index b = static_cast<Eigen::Index>(idx.size());
    const int sd = spec_.state_dim;
    Mat s(sd, b), s2(sd, b);
    Vec r(b), done(b);
    std::vector<const HiTransition*> batch;
    for (Eigen::Index c = 0; c < b; ++c) {
      const auto& t = high_buffer_.at(idx[static_cast<std::size_t>(c)]);
      batch.push_back(&t);
      s.col(c) = t.s_start;
      s2.col(c) = t.s_end;
      r(c) = t.r_sum;
      done(c) = t.done ? 1.0 : 0.0;
    }
    const Mat g = relabel_batch(batch, lo_, bounds_, cfg_.relabel_candidates, rng);
    HighReport rep;

    if (uses_gp()) {
      gp_.set_conditioning(s, g);
      if (!gp_ready_) {
        gp_.set_inducing(choose_inducing(s, gp_.inducing_count(), rng));
        gp_ready_ = true;
      }
      gp_.fit_caches();
      rep.gp_nll = gp_.marginal_nll(1.0).value;
      if (!std::isfinite(rep.gp_nll)) throw training_error("gp_nll", "non-finite GP marginal likelihood");
      adam_step(gp_.params(), spec_.gp.lr);
      gp_.fit_caches();
    }

    const bool policy_turn = (hi_.updates + 1) % hi_.settings.policy_delay == 0;
    if (spec_.variant == Variant::baseline) {
      if (policy_turn) {
        rep.terms.dpg = td3_actor_update(hi_, s);
        rep.terms.total = rep.terms.dpg;
        rep.policy_updated = true;
      }
    } else if (policy_turn) {
      const QFunction q = critic_q_function(hi_);
      const auto draws = draw_high_loss(diffusion_, b, rng);
      rep.terms = composite_loss(diffusion_, s, g, &q, gp_ready_ ? &gp_ : nullptr, cfg_.psi, cfg_.eta, draws);
      if (!std::isfinite(rep.terms.total)) throw training_error("loss_total", "non-finite composite loss");
      adam_step(diffusion_.params, spec_.hi_actor_lr);
      rep.policy_updated = true;
    }

    Mat next_g;
    if (spec_.variant == Variant::baseline) {
      next_g = mlp_predict(hi_.actor_target, hi_.actor_net, s2);
    } else {
      next_g = sample_chain(diffusion_, s2, rng).g0;
    }
    next_g = bounds_.clamp(smoothed_target_actions(next_g, spec_.subgoal_limit, hi_.settings, rng));
    const Vec y = td3_target_values(hi_, s2, next_g, r, done, cfg_.discount);
    rep.critic_loss = td3_critic_update(hi_, s, g, y);
    hi_.updates += 1;
    if (policy_turn) td3_sync_targets(hi_);
    return rep;
  }

  // Checkpointing -----------------------------------------------------------

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    save_checkpoint(lo_.actor, dir / "low_actor.ckpt");
    save_checkpoint(lo_.critic1, dir / "low_critic1.ckpt");
    save_checkpoint(lo_.critic2, dir / "low_critic2.ckpt");
    save_checkpoint(hi_.critic1, dir / "high_critic1.ckpt");
    save_checkpoint(hi_.critic2, dir / "high_critic2.ckpt");
    if (hi_.has_actor) save_checkpoint(hi_.actor, dir / "high_actor.ckpt");
    if (spec_.variant != Variant::baseline) save_checkpoint(diffusion_.params, dir / "diffusion.ckpt");
    ParamStore gp = gp_snapshot();
    save_checkpoint(gp, dir / "gp.ckpt");
  }

  void load(const std::filesystem::path& dir) {
    restore_values(lo_.actor, load_checkpoint(dir / "low_actor.ckpt"));
    lo_.actor_target.copy_values_from(lo_.actor);
    restore_values(lo_.critic1, load_checkpoint(dir / "low_critic1.ckpt"));
    restore_values(lo_.critic2, load_checkpoint(dir / "low_critic2.ckpt"));
    lo_.critic1_target.copy_values_from(lo_.critic1);
    lo_.critic2_target.copy_values_from(lo_.critic2);
    restore_values(hi_.critic1, load_checkpoint(dir / "high_critic1.ckpt"));
    restore_values(hi_.critic2, load_checkpoint(dir / "high_critic2.ckpt"));
    hi_.critic1_target.copy_values_from(hi_.critic1);
    hi_.critic2_target.copy_values_from(hi_.critic2);
    if (hi_.has_actor) {
      restore_values(hi_.actor, load_checkpoint(dir / "high_actor.ckpt"));
      hi_.actor_target.copy_values_from(hi_.actor);
    }
    if (spec_.variant != Variant::baseline)
      restore_values(diffusion_.params, load_checkpoint(dir / "diffusion.ckpt"));
    restore_gp(load_checkpoint(dir / "gp.ckpt"));
  }

 private:
  ParamStore gp_snapshot() const {
    ParamStore out;
    for (const auto& e : gp_.params().entries()) out.add(e.name, e.value);
    out.add("gp/ready", Mat::Constant(1, 1, gp_ready_ ? 1.0 : 0.0));
    if (gp_ready_) {
      out.add("gp/cond_states", gp_.conditioning_states());
      out.add("gp/cond_targets", gp_.conditioning_targets());
    }
    return out;
  }

  void restore_gp(const ParamStore& in) {
    for (std::size_t i = 0; i < gp_.params().size(); ++i) {
      const auto& name = gp_.params().entry(i).name;
      const auto& v = in.value(name);
      if (v.rows() != gp_.params().value(i).rows() || v.cols() != gp_.params().value(i).cols())
        throw config_error("GP checkpoint shape mismatch at '" + name + "'");
      gp_.params().value_mut(i) = v;
    }
    gp_ready_ = in.value("gp/ready")(0, 0) != 0.0;
    if (gp_ready_) {
      gp_.set_conditioning(in.value("gp/cond_states"), in.value("gp/cond_targets"));
      gp_.fit_caches();
    }
  }

  AgentSpec spec_;
  HrlConfig cfg_;
  Box bounds_;
  DiffusionPolicy diffusion_;
  SparseGpModel gp_;
  bool gp_ready_ = false;
  Td3Pair hi_;
  Td3Pair lo_;
  ReplayBuffer<Transition> low_buffer_;
  ReplayBuffer<HiTransition> high_buffer_;
  long env_steps_ = 0;
};

// ---------------------------------------------------------------------------
// Episodes

struct SubgoalRecord {
  Vec s;      // state when the subgoal was issued
  Vec g;      // relative subgoal
  Vec s_end;  // state k steps later (or at episode end)
  bool from_gp_mean = false;
};

struct EpisodeStats {
  bool success = false;
  double episode_return = 0.0;
  int steps = 0;
  int high_stored = 0;
  int low_stored = 0;
  std::vector<SubgoalRecord> subgoals;
};

enum class Mode { train, eval };

/// Runs one episode of the two-timescale loop. Train mode writes both replay
/// buffers and counts environment steps; eval mode touches neither.
inline EpisodeStats run_episode(PointMaze& env, HrlAgent& agent, Rng& rng, Mode mode) {
  const bool train = mode == Mode::train;
  const auto& cfg = agent.config();
  EpisodeStats stats;
  Vec s = env.reset(rng, train);
  Vec g;
  HiTransition seg;
  bool seg_open = false;
  bool from_mean = false;
  auto close_segment = [&](const Vec& s_end, bool terminal) {
    stats.subgoals.push_back({seg.s_start, seg.g, s_end, from_mean});
    if (train) {
      seg.s_end = s_end;
      seg.done = terminal;
      seg.r_sum *= cfg.reward_scale_hi;
      agent.high_buffer().push(seg);
      ++stats.high_stored;
    }
    seg_open = false;
  };
  for (int t = 0;; ++t) {
    if (t % cfg.k == 0) {
      if (seg_open) close_segment(s, false);
      const auto choice = agent.choose_subgoal(s, rng, train);
      g = choice.g;
      from_mean = choice.from_gp_mean;
      seg = HiTransition{};
      seg.s_start = s;
      seg.g = g;
      seg_open = true;
    }
    const Vec a = agent.act(s, g, rng, train);
    const auto step = env.step(a, rng);
    const Vec s2 = step.state.pos;
    const Vec g2 = goal_transition(g, s, s2);
    if (train) {
      agent.low_buffer().push({s, g, a, intrinsic_reward(s, g, s2), s2, g2, step.success});
      agent.count_env_step();
      ++stats.low_stored;
    }
    seg.low_states.push_back(s);
    seg.low_actions.push_back(a);
    seg.r_sum += step.reward;
    stats.episode_return += step.reward;
    ++stats.steps;
    s = s2;
    g = g2;
    if (step.done) {
      stats.success = step.success;
      close_segment(s, step.success);
      break;
    }
  }
  return stats;
}

/// Mean goal-space distance between the target implied by each subgoal and
/// the state reached at the end of its segment.
inline double delta_metric(const std::vector<EpisodeStats>& episodes) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& e : episodes)
    for (const auto& r : e.subgoals) {
      sum += (r.s + r.g - r.s_end).norm();
      ++n;
    }
  if (n == 0) throw usage_error("delta_metric on an empty subgoal log");
  return sum / static_cast<double>(n);
}

}  // namespace hidi
