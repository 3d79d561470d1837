// Drives the hidi executable end to end through its command line.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "hidi/harness.hpp"

#ifndef HIDI_CLI_PATH
#error "HIDI_CLI_PATH must point at the hidi executable"
#endif

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("hidi_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Run cli(const std::string& args, const fs::path& dir) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string(HIDI_CLI_PATH) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

const char* kSmall =
    " --set run.eval_every=500 run.eval_episodes=3 run.warmup_steps=200 run.checkpoint_every=1000"
    " hrl.batch_hi=16 hrl.batch_lo=32 nn.hi_hidden=32 nn.lo_hidden=32 nn.critic_hidden=32 gp.m=8";

}  // namespace

TEST(Cli, HelpExitsZero) {
  const auto d = scratch("help");
  const auto r = cli("--help", d);
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("train"), std::string::npos);
}

TEST(Cli, UnknownKeyIsExitTwo) {
  const auto d = scratch("badkey");
  const auto r = cli("train --out " + (d / "run").string() + " --set hrl.nonsense=1", d);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("hrl.nonsense"), std::string::npos);
  EXPECT_FALSE(fs::exists(d / "run" / "metrics.csv"));
}

TEST(Cli, BadConfigFileIsExitTwo) {
  const auto d = scratch("badcfg");
  std::ofstream(d / "cfg.txt") << "hrl.k = -3\n";
  EXPECT_EQ(cli("train --config " + (d / "cfg.txt").string() + " --out " + (d / "run").string(), d).code, 2);
  EXPECT_EQ(cli("train --config " + (d / "missing.txt").string(), d).code, 2);
}

TEST(Cli, MissingCheckpointIsExitTwo) {
  const auto d = scratch("nockpt");
  EXPECT_EQ(cli("eval --checkpoint " + (d / "nothing").string(), d).code, 2);
}

TEST(Cli, SmokeTrainIsReproducibleAndEvalMatches) {
  const auto d = scratch("smoke");
  const std::string common = "train --quiet --env open-field --seed 0 --steps 2000" + std::string(kSmall);
  const auto a = cli(common + " --out " + (d / "a").string(), d);
  ASSERT_EQ(a.code, 0) << a.err;
  const auto b = cli(common + " --out " + (d / "b").string(), d);
  ASSERT_EQ(b.code, 0) << b.err;

  for (const char* f : {"metrics.csv", "config.resolved"}) EXPECT_TRUE(fs::exists(d / "a" / f)) << f;
  EXPECT_TRUE(fs::is_directory(d / "a" / "checkpoint"));
  EXPECT_TRUE(fs::is_directory(d / "a" / "checkpoints" / "step_1000"));
  const auto metrics = slurp(d / "a" / "metrics.csv");
  EXPECT_EQ(metrics, slurp(d / "b" / "metrics.csv"));

  const auto rows = hidi::read_metrics_csv(d / "a" / "metrics.csv");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows.back().step, 2000);

  const auto e = cli("eval --checkpoint " + (d / "a" / "checkpoint").string(), d);
  ASSERT_EQ(e.code, 0) << e.err;
  const auto row = hidi::parse_metrics_row(e.out);
  EXPECT_EQ(row.step, rows.back().step);
  EXPECT_EQ(row.success_rate, rows.back().success_rate);
  EXPECT_EQ(row.mean_return, rows.back().mean_return);
  EXPECT_EQ(row.delta_metric, rows.back().delta_metric);
  EXPECT_EQ(slurp(d / "a" / "metrics.csv"), metrics);
}

TEST(Cli, SweepWritesOneCellPerComboAndSeed) {
  const auto d = scratch("sweep");
  const auto r = cli("sweep --env open-field --steps 500 --out " + (d / "s").string() + kSmall +
                         " --grid hrl.epsilon_select=0,0.1 --seeds 0,1",
                     d);
  ASSERT_EQ(r.code, 0) << r.err;
  int cells = 0;
  for (const auto& e : fs::directory_iterator(d / "s"))
    if (e.is_directory() && e.path().filename().string().rfind("cell_", 0) == 0) ++cells;
  EXPECT_EQ(cells, 4);
  const auto s = cli("summarize " + (d / "s" / "sweep.csv").string(), d);
  EXPECT_EQ(s.code, 0) << s.err;
  EXPECT_EQ(s.out.rfind("hrl.epsilon_select,step,n,", 0), 0u) << s.out;
}

TEST(Cli, BanditSuiteCell) {
  const auto d = scratch("bandit");
  const auto r = cli("sweep --out " + (d / "s").string() + " --grid suite=bandit-regret --seeds 0", d);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto text = slurp(d / "s" / "regret.csv");
  std::istringstream in(text);
  std::string line;
  int rows = 0, within = 0;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++rows;
    if (line.back() == '1') ++within;
  }
  EXPECT_EQ(rows, 80);
  EXPECT_EQ(within, rows);
}

TEST(Cli, VerifyPasses) {
  const auto d = scratch("verify");
  const auto r = cli("verify", d);
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos) << r.out;
}
