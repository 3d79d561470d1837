#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "hidi/env.hpp"

using namespace hidi;

namespace {

Vec v2(double x, double y) {
  Vec v(2);
  v << x, y;
  return v;
}

MazeSpec open_3x3() {
  MazeSpec m;
  m.grid = {"...", "...", "..."};
  m.start = v2(0.5, 0.5);
  m.goal = v2(2.5, 2.5);
  m.validate();
  return m;
}

MazeSpec pillar_3x3() {
  MazeSpec m = open_3x3();
  m.grid = {"...", ".#.", "..."};
  m.validate();
  return m;
}

}  // namespace

TEST(MazeReset, NoJitterStartsExactlyAtStart) {
  Rng rng(1);
  const auto spec = builtin_maze("point-u-maze");
  const auto s = maze_reset(spec, rng, false);
  EXPECT_EQ(s.pos, spec.start);
  EXPECT_EQ(s.t, 0);
  EXPECT_FALSE(s.done);
}

TEST(MazeReset, JitterStaysNearStartAndFree) {
  Rng rng(2);
  const auto spec = builtin_maze("point-u-maze");
  bool moved = false;
  for (int i = 0; i < 100; ++i) {
    const auto s = maze_reset(spec, rng);
    EXPECT_EQ(s.t, 0);
    EXPECT_LE((s.pos - spec.start).cwiseAbs().maxCoeff(), 0.1 * spec.cell_size + 1e-15);
    EXPECT_TRUE(spec.is_free(s.pos(0), s.pos(1)));
    moved = moved || s.pos != spec.start;
  }
  EXPECT_TRUE(moved);
}

TEST(MazeStep, FreeMotion) {
  Rng rng(3);
  auto spec = open_3x3();
  EnvState s;
  s.pos = v2(0.5, 0.5);
  const auto r = maze_step(s, v2(1.0, 0.0), spec, rng);
  EXPECT_DOUBLE_EQ(r.state.pos(0), 0.75);
  EXPECT_DOUBLE_EQ(r.state.pos(1), 0.5);
  EXPECT_EQ(r.state.t, 1);
  // actions are clamped to [-1, 1]
  const auto r2 = maze_step(s, v2(5.0, -5.0), spec, rng);
  EXPECT_DOUBLE_EQ(r2.state.pos(0), 0.75);
  EXPECT_DOUBLE_EQ(r2.state.pos(1), 0.25);
}

TEST(MazeStep, OriginInOpenFieldMovesQuarterCell) {
  Rng rng(4);
  MazeSpec spec = builtin_maze("open-field");
  EnvState s;
  s.pos = v2(0.0, 0.0);
  const auto r = maze_step(s, v2(1.0, 0.0), spec, rng);
  EXPECT_DOUBLE_EQ(r.state.pos(0), 0.25);
  EXPECT_DOUBLE_EQ(r.state.pos(1), 0.0);
}

TEST(MazeStep, DenseRewardIsNegativeDistance) {
  Rng rng(5);
  auto spec = open_3x3();
  EnvState s;
  s.pos = v2(0.5, 0.5);
  const auto r = maze_step(s, v2(0.4, 1.0), spec, rng);
  EXPECT_DOUBLE_EQ(r.reward, -(r.state.pos - spec.goal).norm());
}

TEST(MazeStep, SparseRewardThreshold) {
  Rng rng(6);
  auto spec = open_3x3();
  spec.reward_mode = RewardMode::sparse;
  EnvState s;
  s.pos = v2(2.5 - 0.75, 2.5);
  auto r = maze_step(s, v2(1.0, 0.0), spec, rng);  // lands exactly 0.5 away
  EXPECT_DOUBLE_EQ((r.state.pos - spec.goal).norm(), 0.5);
  EXPECT_EQ(r.reward, 0.0);
  EXPECT_TRUE(r.success);
  EXPECT_TRUE(r.done);
  s.pos = v2(0.5, 0.5);
  r = maze_step(s, v2(1.0, 0.0), spec, rng);
  EXPECT_EQ(r.reward, -1.0);
  EXPECT_FALSE(r.success);
}

TEST(MazeStep, WallBlocksXButAppliesY) {
  Rng rng(7);
  auto spec = pillar_3x3();
  EnvState s;
  s.pos = v2(0.9, 1.5);
  const auto r = maze_step(s, v2(1.0, 0.4), spec, rng);
  // x stops at the face x = 1 of the pillar, y moves by 0.1
  EXPECT_LT(r.state.pos(0), 1.0);
  EXPECT_NEAR(r.state.pos(0), 1.0, 1e-8);
  EXPECT_DOUBLE_EQ(r.state.pos(1), 1.6);
  EXPECT_TRUE(spec.is_free(r.state.pos(0), r.state.pos(1)));
}

TEST(MazeStep, WallBlocksYFromAbove) {
  Rng rng(8);
  auto spec = pillar_3x3();
  EnvState s;
  s.pos = v2(1.5, 2.1);
  const auto r = maze_step(s, v2(0.0, -1.0), spec, rng);
  EXPECT_DOUBLE_EQ(r.state.pos(1), 2.0);
  EXPECT_TRUE(spec.is_free(r.state.pos(0), r.state.pos(1)));
}

TEST(MazeStep, OuterBoundaryIsAWall) {
  Rng rng(9);
  auto spec = open_3x3();
  EnvState s;
  s.pos = v2(0.1, 2.9);
  const auto r = maze_step(s, v2(-1.0, 1.0), spec, rng);
  EXPECT_DOUBLE_EQ(r.state.pos(0), 0.0);
  EXPECT_LT(r.state.pos(1), 3.0);
  EXPECT_TRUE(spec.is_free(r.state.pos(0), r.state.pos(1)));
}

TEST(MazeStep, DoneAtHorizonAndStepAfterDoneIsUsageError) {
  Rng rng(10);
  auto spec = open_3x3();
  spec.max_steps = 3;
  EnvState s;
  s.pos = v2(0.5, 0.5);
  StepResult r;
  for (int i = 0; i < 3; ++i) {
    r = maze_step(s, v2(0.0, 0.0), spec, rng);
    s = r.state;
    EXPECT_EQ(r.done, i == 2);
  }
  EXPECT_THROW(maze_step(s, v2(0.0, 0.0), spec, rng), usage_error);
  EXPECT_THROW(maze_step(EnvState{}, Vec::Zero(3), spec, rng), config_error);
}

TEST(MazeStep, NeverTunnelsOnBuiltins) {
  for (const auto& name : builtin_maze_names()) {
    auto spec = builtin_maze(name);
    spec.max_steps = 1 << 30;
    Rng rng(11);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    EnvState s = maze_reset(spec, rng);
    for (int i = 0; i < 100000; ++i) {
      const Vec before = s.pos;
      auto r = maze_step(s, v2(u(rng), u(rng)), spec, rng);
      ASSERT_TRUE(spec.is_free(r.state.pos(0), r.state.pos(1))) << name << " step " << i;
      // a step never crosses more than one cell boundary per axis, and never through a wall cell
      const double mid_x = 0.5 * (before(0) + r.state.pos(0));
      ASSERT_TRUE(spec.is_free(mid_x, before(1))) << name;
      s = r.state;
      if (r.success) s = maze_reset(spec, rng);
      s.done = false;
    }
  }
}

TEST(MazeStep, DeterministicForFixedSeed) {
  auto run = [] {
    auto spec = builtin_maze("point-u-maze-stochastic");
    Rng rng(12);
    PointMaze env(spec);
    env.reset(rng);
    std::vector<double> trace;
    for (int i = 0; i < 50; ++i) {
      auto r = env.step(v2(0.3, 0.8), rng);
      trace.push_back(r.state.pos(0));
      trace.push_back(r.state.pos(1));
      if (r.done) break;
    }
    return trace;
  };
  EXPECT_EQ(run(), run());
}

TEST(MazeStep, StochasticNoiseHasRequestedScale) {
  auto spec = builtin_maze("point-u-maze-stochastic");
  Rng rng(13);
  double sum = 0.0, sum_sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    EnvState s;
    s.pos = v2(3.5, 2.5);
    const double dx = maze_step(s, v2(0.0, 0.0), spec, rng).state.pos(0) - 3.5;
    sum += dx;
    sum_sq += dx * dx;
  }
  const double sd = std::sqrt(sum_sq / n - (sum / n) * (sum / n));
  EXPECT_NEAR(sd, 0.05, 0.05 * 3.0 * std::sqrt(0.5 / n) + 1e-4);
}

TEST(Builtins, StartsAndGoalsFreeAndSettings) {
  for (const auto& base : builtin_maze_names()) {
    for (const std::string suffix : {"", "-sparse"}) {
      const auto spec = builtin_maze(base + suffix);
      EXPECT_TRUE(spec.is_free(spec.start(0), spec.start(1)));
      EXPECT_TRUE(spec.is_free(spec.goal(0), spec.goal(1)));
      EXPECT_EQ(spec.max_steps, 200);
      EXPECT_DOUBLE_EQ(spec.success_threshold, 0.5 * spec.cell_size);
      EXPECT_EQ(spec.reward_mode, suffix.empty() ? RewardMode::dense : RewardMode::sparse);
    }
  }
  EXPECT_THROW(builtin_maze("ant-maze"), config_error);
}

TEST(Builtins, UMazeHasWallBetweenStartAndGoal) {
  const auto spec = builtin_maze("point-u-maze");
  EXPECT_EQ(spec.rows(), 5);
  EXPECT_EQ(spec.cols(), 5);
  EXPECT_LT(spec.start(0), 1.0);
  EXPECT_LT(spec.start(1), 1.0);
  EXPECT_LT(spec.goal(0), 1.0);
  EXPECT_GT(spec.goal(1), 4.0);
  bool blocked = false;
  for (int i = 0; i <= 1000; ++i) {
    const Vec p = spec.start + (spec.goal - spec.start) * (i / 1000.0);
    if (!spec.is_free(p(0), p(1))) blocked = true;
  }
  EXPECT_TRUE(blocked);
}

TEST(Builtins, StochasticDiffersOnlyInNoise) {
  auto a = builtin_maze("point-u-maze");
  auto b = builtin_maze("point-u-maze-stochastic");
  EXPECT_EQ(b.noise_std, 0.05);
  EXPECT_EQ(a.noise_std, 0.0);
  EXPECT_EQ(a.grid, b.grid);
  EXPECT_EQ(a.start, b.start);
  EXPECT_EQ(a.goal, b.goal);
  EXPECT_EQ(a.max_steps, b.max_steps);
  EXPECT_EQ(a.success_threshold, b.success_threshold);
}

TEST(MazeText, ParseAndLoad) {
  const auto spec = parse_maze("S.#\n..G\n");
  EXPECT_EQ(spec.rows(), 2);
  EXPECT_EQ(spec.start, v2(0.5, 1.5));
  EXPECT_EQ(spec.goal, v2(2.5, 0.5));
  EXPECT_FALSE(spec.is_free(2.5, 1.5));
  EXPECT_THROW(parse_maze("S.x\n..G\n"), config_error);
  EXPECT_THROW(parse_maze("S..\n...\n"), config_error);
  EXPECT_THROW(parse_maze("S..\n..\nG..\n"), config_error);
  const auto path = std::filesystem::temp_directory_path() / "hidi_env_test_maze.txt";
  {
    std::ofstream out(path);
    out << "#####\n#S.G#\n#####\n";
  }
  const auto loaded = load_maze_file(path.string());
  EXPECT_EQ(loaded.start, v2(1.5, 1.5));
  std::filesystem::remove(path);
  EXPECT_THROW(load_maze_file("/nonexistent/maze.txt"), config_error);
}

TEST(Bandit, ArgmaxSelectorHasZeroRegret) {
  Rng rng(14);
  auto spec = random_bandit(rng, 5, 3, 0.0);
  MixtureSelector sel;
  sel.epsilon = 1.0;
  sel.policy = Mat::Constant(5, 9, 1.0 / 9);
  for (int s = 0; s < 5; ++s) {
    Eigen::Index best;
    spec.reward.row(s).maxCoeff(&best);
    sel.gp_mean.push_back(static_cast<int>(best));
  }
  const auto rep = bandit_eval(spec, sel, 1000, rng);
  EXPECT_NEAR(rep.measured_regret, 0.0, 1e-15);
}

TEST(Bandit, EpsilonZeroRegretMatchesEnumeratedDelta) {
  // one state, so the averaged and worst-case gaps coincide
  Rng rng(15);
  BanditSpec spec;
  spec.states = {v2(0.0, 0.0)};
  spec.subgoals = {v2(0, 0), v2(1, 0), v2(0, 1)};
  spec.reward.resize(1, 3);
  spec.reward << 1.0, 0.2, -0.5;
  spec.noise_std = 0.1;
  MixtureSelector sel;
  sel.epsilon = 0.0;
  sel.gp_mean = {0};
  sel.policy.resize(1, 3);
  sel.policy << 0.5, 0.3, 0.2;
  const double delta = 1.0 - (0.5 * 1.0 + 0.3 * 0.2 + 0.2 * -0.5);
  const auto rep = bandit_eval(spec, sel, 10000, rng);
  EXPECT_DOUBLE_EQ(rep.delta, delta);
  EXPECT_LT(std::abs(rep.measured_regret - delta), 3.0 * rep.std_error);
}

TEST(Bandit, RegretWithinBoundForAllEpsilons) {
  Rng rng(16);
  for (int b = 0; b < 20; ++b) {
    auto spec = random_bandit(rng);
    const int ns = spec.state_count(), ng = spec.subgoal_count();
    MixtureSelector sel;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> pick(0, ng - 1);
    sel.policy.resize(ns, ng);
    for (int s = 0; s < ns; ++s) {
      for (int g = 0; g < ng; ++g) sel.policy(s, g) = u(rng);
      sel.policy.row(s) /= sel.policy.row(s).sum();
      sel.gp_mean.push_back(pick(rng));
    }
    for (double eps : {0.0, 0.1, 0.5, 1.0}) {
      sel.epsilon = eps;
      const auto rep = bandit_eval(spec, sel, 10000, rng);
      EXPECT_TRUE(rep.within_bound()) << "bandit " << b << " eps " << eps << " regret " << rep.measured_regret
                                      << " bound " << rep.bound;
    }
  }
}

TEST(Bandit, BadArgumentsRejected) {
  Rng rng(17);
  auto spec = random_bandit(rng, 3, 2);
  MixtureSelector sel;
  sel.gp_mean = {0, 0, 0};
  sel.policy = Mat::Constant(3, 4, 0.25);
  EXPECT_THROW(bandit_eval(spec, sel, 0, rng), usage_error);
  sel.gp_mean = {0};
  EXPECT_THROW(bandit_eval(spec, sel, 10, rng), config_error);
}

TEST(Bandit, MixingInNearOptimalMeanDoesNotLowerReward) {
  Rng rng(18);
  for (int b = 0; b < 10; ++b) {
    auto spec = random_bandit(rng);
    const int ns = spec.state_count(), ng = spec.subgoal_count();
    MixtureSelector sel;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    sel.policy.resize(ns, ng);
    for (int s = 0; s < ns; ++s) {
      for (int g = 0; g < ng; ++g) sel.policy(s, g) = u(rng);
      sel.policy.row(s) /= sel.policy.row(s).sum();
      Eigen::Index best;
      spec.reward.row(s).maxCoeff(&best);
      sel.gp_mean.push_back(static_cast<int>(best));
    }
    sel.epsilon = 0.0;
    const auto plain = bandit_eval(spec, sel, 10000, rng);
    for (double eps : {0.1, 0.5}) {
      sel.epsilon = eps;
      const auto mixed = bandit_eval(spec, sel, 10000, rng);
      const double se = std::hypot(plain.std_error, mixed.std_error);
      EXPECT_GE(mixed.mixture_reward, plain.mixture_reward - 3.0 * se) << b << " " << eps;
    }
  }
}
