#pragma once

// Continuous 2D point mazes and a finite subgoal bandit.
//
// Maze coordinates are in world units with the origin at the bottom-left
// corner. Grid rows are listed top first, so a text maze reads like a picture.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hidi/errors.hpp"
#include "hidi/nn.hpp"

namespace hidi {

enum class RewardMode { dense, sparse };

struct MazeSpec {
  std::string name;
  std::vector<std::string> grid;  // '#' wall, anything else free; row 0 is the top
  double cell_size = 1.0;
  Vec start = Vec::Zero(2);
  Vec goal = Vec::Zero(2);
  int max_steps = 200;
  RewardMode reward_mode = RewardMode::dense;
  double success_threshold = 0.5;
  double noise_std = 0.0;
  double step_gain = 0.25;   // cells moved per unit action
  double reset_jitter = 0.1; // uniform +- per coordinate, in cells

  int rows() const { return static_cast<int>(grid.size()); }
  int cols() const { return grid.empty() ? 0 : static_cast<int>(grid.front().size()); }
  double width() const { return cols() * cell_size; }
  double height() const { return rows() * cell_size; }

  bool cell_free(int col, int row_from_bottom) const {
    if (col < 0 || row_from_bottom < 0 || col >= cols() || row_from_bottom >= rows()) return false;
    return grid[static_cast<std::size_t>(rows() - 1 - row_from_bottom)][static_cast<std::size_t>(col)] != '#';
  }

  bool is_free(double x, double y) const {
    if (!(x >= 0.0 && y >= 0.0 && x < width() && y < height())) return false;
    return cell_free(static_cast<int>(std::floor(x / cell_size)),
                     static_cast<int>(std::floor(y / cell_size)));
  }

  Vec cell_center(int col, int row_from_bottom) const {
    Vec c(2);
    c << (col + 0.5) * cell_size, (row_from_bottom + 0.5) * cell_size;
    return c;
  }

  void validate() const {
    if (grid.empty() || cols() == 0) throw config_error("maze grid is empty");
    for (const auto& r : grid)
      if (static_cast<int>(r.size()) != cols()) throw config_error("maze grid is not rectangular");
    if (!(cell_size > 0.0)) throw config_error("cell_size must be positive");
    if (!(success_threshold > 0.0)) throw config_error("success_threshold must be positive");
    if (noise_std < 0.0) throw config_error("noise_std must be non-negative");
    if (max_steps < 1) throw config_error("max_steps must be positive");
    if (start.size() != 2 || goal.size() != 2) throw config_error("start/goal must be 2D");
    if (!is_free(start(0), start(1))) throw config_error("maze start is not in a free cell");
    if (!is_free(goal(0), goal(1))) throw config_error("maze goal is not in a free cell");
  }
};

struct EnvState {
  Vec pos = Vec::Zero(2);
  int t = 0;
  bool done = false;
};

struct StepResult {
  EnvState state;
  double reward = 0.0;
  bool done = false;
  bool success = false;
};

/// Parses a text maze: '#' wall, '.' free, 'S' start, 'G' goal, one row per line.
inline MazeSpec parse_maze(const std::string& text, std::string name = "custom") {
  MazeSpec spec;
  spec.name = std::move(name);
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    for (char c : line)
      if (c != '#' && c != '.' && c != 'S' && c != 'G')
        throw config_error(std::string("unexpected maze character '") + c + "'");
    spec.grid.push_back(line);
  }
  if (spec.grid.empty()) throw config_error("maze text has no rows");
  bool has_start = false, has_goal = false;
  for (int r = 0; r < spec.rows(); ++r) {
    for (int c = 0; c < static_cast<int>(spec.grid[static_cast<std::size_t>(r)].size()); ++c) {
      const char ch = spec.grid[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
      if (ch == 'S') {
        if (has_start) throw config_error("maze has more than one start");
        spec.start = spec.cell_center(c, spec.rows() - 1 - r);
        has_start = true;
      } else if (ch == 'G') {
        if (has_goal) throw config_error("maze has more than one goal");
        spec.goal = spec.cell_center(c, spec.rows() - 1 - r);
        has_goal = true;
      }
    }
  }
  if (!has_start || !has_goal) throw config_error("maze needs exactly one 'S' and one 'G'");
  spec.validate();
  return spec;
}

inline MazeSpec load_maze_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open maze file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_maze(ss.str(), path);
}

/// Names accepted by builtin_maze(); each also exists with a "-sparse" suffix.
inline std::vector<std::string> builtin_maze_names() {
  return {"point-u-maze", "point-u-maze-stochastic", "open-field"};
}

inline MazeSpec builtin_maze(const std::string& name) {
  std::string base = name;
  RewardMode mode = RewardMode::dense;
  const std::string suffix = "-sparse";
  if (base.size() > suffix.size() && base.compare(base.size() - suffix.size(), suffix.size(), suffix) == 0) {
    base.resize(base.size() - suffix.size());
    mode = RewardMode::sparse;
  }
  MazeSpec spec;
  if (base == "point-u-maze" || base == "point-u-maze-stochastic") {
    spec = parse_maze(
        "G....\n"
        "###..\n"
        "###..\n"
        "###..\n"
        "S....\n",
        base);
    if (base == "point-u-maze-stochastic") spec.noise_std = 0.05;
  } else if (base == "open-field") {
    spec = parse_maze(
        "....G\n"
        ".....\n"
        ".....\n"
        ".....\n"
        "S....\n",
        base);
  } else {
    throw config_error("unknown maze '" + name + "'");
  }
  spec.name = name;
  spec.reward_mode = mode;
  return spec;
}

namespace detail {

/// Moves one coordinate by `delta`, stopping at the first wall face crossed.
inline double move_axis(const MazeSpec& spec, const Vec& pos, int axis, double delta) {
  const double cs = spec.cell_size;
  const double eps = 1e-9 * cs;
  const double from = pos(axis);
  const double target = from + delta;
  const int other = static_cast<int>(std::floor(pos(1 - axis) / cs));
  auto free_at = [&](int idx) {
    return axis == 0 ? spec.cell_free(idx, other) : spec.cell_free(other, idx);
  };
  int idx = static_cast<int>(std::floor(from / cs));
  if (delta > 0.0) {
    while (target >= (idx + 1) * cs) {
      if (!free_at(idx + 1)) return (idx + 1) * cs - eps;
      ++idx;
    }
  } else if (delta < 0.0) {
    while (target < idx * cs) {
      if (!free_at(idx - 1)) return idx * cs;
      --idx;
    }
  }
  return target;
}

}  // namespace detail

inline double maze_reward(const MazeSpec& spec, const Vec& pos) {
  const double d = (pos - spec.goal).norm();
  if (spec.reward_mode == RewardMode::dense) return -d;
  return d <= spec.success_threshold ? 0.0 : -1.0;
}

inline EnvState maze_reset(const MazeSpec& spec, Rng& rng, bool jitter = true) {
  EnvState s;
  s.pos = spec.start;
  if (jitter && spec.reset_jitter > 0.0) {
    std::uniform_real_distribution<double> u(-spec.reset_jitter * spec.cell_size,
                                              spec.reset_jitter * spec.cell_size);
    for (int k = 0; k < 2; ++k) {
      Vec cand = s.pos;
      cand(k) += u(rng);
      if (spec.is_free(cand(0), cand(1))) s.pos = cand;
    }
  }
  return s;
}

/// pos' = pos + gain * clamp(action, -1, 1) + N(0, noise_std^2 I), resolved
/// against walls x first, then y.
inline StepResult maze_step(const EnvState& state, const Vec& action, const MazeSpec& spec, Rng& rng) {
  if (state.done) throw usage_error("maze_step called on a finished episode");
  if (action.size() != 2) throw config_error("maze action must be 2D");
  Vec delta = spec.step_gain * spec.cell_size * action.cwiseMax(-1.0).cwiseMin(1.0);
  if (spec.noise_std > 0.0) {
    std::normal_distribution<double> n(0.0, spec.noise_std * spec.cell_size);
    delta(0) += n(rng);
    delta(1) += n(rng);
  }
  StepResult r;
  r.state = state;
  r.state.pos(0) = detail::move_axis(spec, r.state.pos, 0, delta(0));
  r.state.pos(1) = detail::move_axis(spec, r.state.pos, 1, delta(1));
  r.state.t = state.t + 1;
  r.reward = maze_reward(spec, r.state.pos);
  r.success = (r.state.pos - spec.goal).norm() <= spec.success_threshold;
  r.done = r.success || r.state.t >= spec.max_steps;
  r.state.done = r.done;
  return r;
}

/// Stateful wrapper used by the agent loop.
class PointMaze {
 public:
  explicit PointMaze(MazeSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  const MazeSpec& spec() const { return spec_; }
  const EnvState& state() const { return state_; }
  Vec observation() const { return state_.pos; }
  static constexpr int observation_dim = 2;
  static constexpr int action_dim = 2;

  Vec reset(Rng& rng, bool jitter = true) {
    state_ = maze_reset(spec_, rng, jitter);
    return observation();
  }

  StepResult step(const Vec& action, Rng& rng) {
    auto r = maze_step(state_, action, spec_, rng);
    state_ = r.state;
    return r;
  }

 private:
  MazeSpec spec_;
  EnvState state_;
};

// ---------------------------------------------------------------------------
// Subgoal bandit

struct BanditSpec {
  std::vector<Vec> states;
  std::vector<Vec> subgoals;
  Mat reward;  // reward(s, g), states x subgoals
  double noise_std = 0.0;

  int state_count() const { return static_cast<int>(reward.rows()); }
  int subgoal_count() const { return static_cast<int>(reward.cols()); }
};

/// Picks the GP-mean subgoal with probability epsilon, otherwise draws from a
/// per-state distribution standing in for the diffusion policy.
struct MixtureSelector {
  double epsilon = 0.0;
  std::vector<int> gp_mean;  // subgoal index of mu(s) per state
  Mat policy;                // per-state subgoal probabilities, states x subgoals

  int choose(int s, Rng& rng) const {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (u(rng) < epsilon) return gp_mean[static_cast<std::size_t>(s)];
    double x = u(rng);
    const auto row = policy.row(s);
    for (Eigen::Index g = 0; g < row.size(); ++g) {
      x -= row(g);
      if (x < 0.0) return static_cast<int>(g);
    }
    return static_cast<int>(row.size() - 1);
  }
};

struct RegretReport {
  double epsilon = 0.0;
  double r_star = 0.0;          // mean over states of max_g R(s, g)
  double r_min = 0.0;           // min over states of R(s, mu(s))
  double delta = 0.0;           // max over states of R*(s) - E_pi R(s, g)
  double measured_regret = 0.0;
  double std_error = 0.0;
  double bound = 0.0;           // eps (R* - R_min) + (1 - eps) delta
  double mixture_reward = 0.0;  // mean observed reward of the selector
  int trials = 0;

  bool within_bound(double n_se = 3.0) const { return measured_regret <= bound + n_se * std_error; }
};

/// Brute-forces R*, R_min and delta, then measures the selector's single-step
/// regret over `trials` uniformly drawn states.
inline RegretReport bandit_eval(const BanditSpec& spec, const MixtureSelector& sel, int trials, Rng& rng) {
  if (trials < 1) throw usage_error("bandit_eval needs at least one trial");
  const int ns = spec.state_count();
  if (static_cast<int>(sel.gp_mean.size()) != ns || sel.policy.rows() != ns ||
      sel.policy.cols() != spec.subgoal_count())
    throw config_error("selector does not match the bandit");
  RegretReport rep;
  rep.epsilon = sel.epsilon;
  rep.trials = trials;
  Vec best(ns);
  rep.r_min = std::numeric_limits<double>::infinity();
  for (int s = 0; s < ns; ++s) {
    best(s) = spec.reward.row(s).maxCoeff();
    rep.r_min = std::min(rep.r_min, spec.reward(s, sel.gp_mean[static_cast<std::size_t>(s)]));
    const double expected = sel.policy.row(s).dot(spec.reward.row(s));
    rep.delta = std::max(rep.delta, best(s) - expected);
  }
  rep.r_star = best.mean();
  rep.bound = sel.epsilon * (rep.r_star - rep.r_min) + (1.0 - sel.epsilon) * rep.delta;

  std::uniform_int_distribution<int> pick_state(0, ns - 1);
  std::normal_distribution<double> noise(0.0, 1.0);
  double sum = 0.0, sum_sq = 0.0, reward_sum = 0.0;
  for (int t = 0; t < trials; ++t) {
    const int s = pick_state(rng);
    const int g = sel.choose(s, rng);
    const double r = spec.reward(s, g) + spec.noise_std * noise(rng);
    const double regret = best(s) - r;
    sum += regret;
    sum_sq += regret * regret;
    reward_sum += r;
  }
  const double n = static_cast<double>(trials);
  rep.measured_regret = sum / n;
  rep.mixture_reward = reward_sum / n;
  const double var = trials > 1 ? std::max(0.0, (sum_sq - n * rep.measured_regret * rep.measured_regret) / (n - 1.0)) : 0.0;
  rep.std_error = std::sqrt(var / n);
  return rep;
}

/// Random bandit over 2D states and a grid of relative subgoals; the reward of
/// a subgoal is minus its distance from a per-state target displacement.
inline BanditSpec random_bandit(Rng& rng, int n_states = 6, int grid_side = 4, double noise_std = 0.1) {
  BanditSpec spec;
  spec.noise_std = noise_std;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec> targets;
  for (int s = 0; s < n_states; ++s) {
    Vec st(2), tg(2);
    st << u(rng), u(rng);
    tg << u(rng), u(rng);
    spec.states.push_back(st);
    targets.push_back(tg);
  }
  for (int i = 0; i < grid_side; ++i)
    for (int j = 0; j < grid_side; ++j) {
      Vec g(2);
      g << -1.0 + 2.0 * i / (grid_side - 1), -1.0 + 2.0 * j / (grid_side - 1);
      spec.subgoals.push_back(g);
    }
  spec.reward.resize(n_states, static_cast<Eigen::Index>(spec.subgoals.size()));
  for (int s = 0; s < n_states; ++s)
    for (std::size_t g = 0; g < spec.subgoals.size(); ++g)
      spec.reward(s, static_cast<Eigen::Index>(g)) = -(spec.subgoals[g] - targets[static_cast<std::size_t>(s)]).norm();
  return spec;
}

}  // namespace hidi
