// hidi: train, evaluate, sweep and verify the hierarchical agent.
//
// Exit codes: 0 ok, 1 failed verify suite or sweep cell, 2 configuration or
// checkpoint error, 3 numerical failure during training.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "hidi/harness.hpp"
#include "hidi/verify.hpp"

namespace {

struct CommonFlags {
  std::string config;
  long long seed = -1;
  std::string env;
  std::string variant;
  std::string out;
  long long steps = -1;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "Config file (key = value lines)");
    app->add_option("--seed", seed, "Random seed");
    app->add_option("--env", env, "Environment name, or file:<path> for a text maze");
    app->add_option("--variant", variant, "hidi | hidi-a | hidi-b | baseline");
    app->add_option("--out", out, "Output directory");
    app->add_option("--steps", steps, "Total environment steps");
    app->add_option("--set", sets, "Override, e.g. --set hrl.epsilon_select=0.25")->take_all();
  }

  hidi::RunConfig build() const {
    hidi::RunConfig cfg;
    if (!config.empty()) cfg = hidi::load_config_file(config, cfg);
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    if (!env.empty()) cfg.env_name = env;
    if (!variant.empty()) cfg.variant = hidi::parse_variant(variant);
    if (!out.empty()) cfg.out_dir = out;
    if (steps >= 0) cfg.total_steps = static_cast<long>(steps);
    for (const auto& s : sets) hidi::apply_override(cfg, s);
    return cfg;
  }
};

int run_train(const CommonFlags& flags, bool quiet) {
  const auto cfg = hidi::resolve_config(flags.build());
  const auto summary = hidi::train(cfg, quiet ? nullptr : &std::cerr);
  std::cerr << "wrote " << (summary.out_dir / "metrics.csv").string() << " (" << summary.rows.size() << " rows)\n";
  return 0;
}

int run_eval(const std::string& checkpoint, int episodes, bool header) {
  const auto row = hidi::eval_checkpoint(checkpoint, episodes);
  if (header) std::cout << hidi::metrics_header() << '\n';
  std::cout << hidi::format_metrics_row(row) << '\n';
  return 0;
}

int run_sweep(const CommonFlags& flags, const std::vector<std::string>& grid, const std::string& grid_file,
              const std::vector<long long>& seeds, int n_seeds) {
  const auto base = hidi::resolve_config(flags.build());
  std::vector<hidi::SweepAxis> axes;
  if (!grid_file.empty()) axes = hidi::load_sweep_file(grid_file);
  for (const auto& g : grid) axes.push_back(hidi::parse_axis(g));
  std::vector<std::uint64_t> seed_list;
  for (auto s : seeds) seed_list.push_back(static_cast<std::uint64_t>(s));
  if (seed_list.empty())
    for (int i = 0; i < n_seeds; ++i) seed_list.push_back(static_cast<std::uint64_t>(i));
  const auto result = hidi::run_sweep(base, axes, seed_list, base.out_dir, &std::cerr);
  std::cerr << "aggregate: " << result.aggregate.string() << " (" << result.aggregate_rows << " rows)\n";
  return result.all_ok() ? 0 : 1;
}

int run_verify() {
  const auto results = hidi::run_all_suites(&std::cout);
  int failed = 0;
  for (const auto& r : results)
    if (!r.passed) {
      ++failed;
      std::cerr << "failed invariant: " << r.name << '\n';
    }
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  hidi::tune_allocator();
  CLI::App app{"Hierarchical RL with diffusion subgoals and a sparse GP prior"};
  app.require_subcommand(1);

  CommonFlags train_flags;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "Train one agent and write metrics.csv, checkpoints and config.resolved");
  train_flags.attach(train);
  train->add_flag("--quiet", quiet, "Do not log evaluation lines");

  std::string checkpoint;
  int episodes = 0;
  bool header = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint directory; prints one metrics row");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint directory (e.g. <out>/checkpoint)")->required();
  eval->add_option("--episodes", episodes, "Episodes (default: the run's eval_episodes)");
  eval->add_flag("--header", header, "Print the CSV header first");

  CommonFlags sweep_flags;
  std::vector<std::string> grid;
  std::string grid_file;
  std::vector<long long> seeds;
  int n_seeds = 3;
  auto* sweep = app.add_subcommand("sweep", "Run a parameter grid x seeds and aggregate metrics");
  sweep_flags.attach(sweep);
  sweep->add_option("--grid", grid, "Axis key=v1,v2,... (repeatable); suite=bandit-regret adds the regret table");
  sweep->add_option("--grid-file", grid_file, "File with one 'key = v1, v2' axis per line");
  sweep->add_option("--seeds", seeds, "Explicit seed list")->delimiter(',');
  sweep->add_option("--n-seeds", n_seeds, "Seeds 0..n-1 when --seeds is absent");

  auto* verify = app.add_subcommand("verify", "Run the oracle and property suites");

  std::vector<std::string> files;
  auto* summarize = app.add_subcommand("summarize", "Mean and 95% CI per step across seeds");
  summarize->add_option("files", files, "metrics.csv or sweep.csv files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*train) return run_train(train_flags, quiet);
    if (*eval) return run_eval(checkpoint, episodes, header);
    if (*sweep) return run_sweep(sweep_flags, grid, grid_file, seeds, n_seeds);
    if (*verify) return run_verify();
    if (*summarize) {
      std::vector<std::filesystem::path> paths(files.begin(), files.end());
      std::cout << hidi::summarize_csv(paths);
      return 0;
    }
  } catch (const hidi::training_error& e) {
    std::cerr << "numerical failure in " << e.term() << ": " << e.what() << '\n';
    return 3;
  } catch (const hidi::numerical_error& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const hidi::config_error& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
