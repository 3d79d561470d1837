#pragma once

// Run configuration, metrics CSV, the training/evaluation driver, sweeps and
// confidence-interval summaries.

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <system_error>
#include <tuple>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "hidi/env.hpp"
#include "hidi/errors.hpp"
#include "hidi/hrl.hpp"

namespace hidi {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Text helpers

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s, const std::string& key) {
  double v = 0.0;
  const auto t = trim(s);
  auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size()) throw config_error(key + ": expected a number, got '" + s + "'");
  return v;
}

inline long long parse_int(const std::string& s, const std::string& key) {
  long long v = 0;
  const auto t = trim(s);
  auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size()) throw config_error(key + ": expected an integer, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  const auto t = trim(s);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw config_error(key + ": expected true or false, got '" + s + "'");
}

/// Keeps large temporaries on the heap instead of fresh mmap regions; the
/// training loop allocates many short-lived matrices just above glibc's
/// default mmap threshold and otherwise spends much of its time page-faulting.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
  mallopt(M_TOP_PAD, 64 * 1024 * 1024);
#endif
}

// ---------------------------------------------------------------------------
// Run configuration

inline bool operator==(const HrlConfig& a, const HrlConfig& b) {
  return a.k == b.k && a.eta == b.eta && a.psi == b.psi && a.epsilon_select == b.epsilon_select &&
         a.n_diffusion == b.n_diffusion && a.discount == b.discount &&
         a.reward_scale_hi == b.reward_scale_hi && a.reward_scale_lo == b.reward_scale_lo &&
         a.batch_hi == b.batch_hi && a.batch_lo == b.batch_lo && a.buffer_capacity == b.buffer_capacity &&
         a.relabel_candidates == b.relabel_candidates;
}
inline bool operator==(const Td3Settings& a, const Td3Settings& b) {
  return a.polyak == b.polyak && a.policy_delay == b.policy_delay && a.target_noise == b.target_noise &&
         a.noise_clip == b.noise_clip && a.actor_lr == b.actor_lr && a.critic_lr == b.critic_lr;
}
inline bool operator==(const NetConfig& a, const NetConfig& b) {
  return a.hi_hidden == b.hi_hidden && a.critic_hidden == b.critic_hidden && a.lo_hidden == b.lo_hidden &&
         a.time_embed_dim == b.time_embed_dim;
}
inline bool operator==(const GpSettings& a, const GpSettings& b) {
  return a.inducing == b.inducing && a.lr == b.lr && a.init_gamma == b.init_gamma && a.init_ell == b.init_ell &&
         a.init_sigma == b.init_sigma && a.jitter == b.jitter;
}

struct RunConfig {
  std::string env_name = "point-u-maze";
  Variant variant = Variant::hidi;
  HrlConfig hrl;
  Td3Settings td3;
  NetConfig nets;
  GpSettings gp;
  double subgoal_limit = 2.5;
  double lo_explore_std = 0.1;
  double hi_explore_std = 0.2;
  double hi_actor_lr = 1e-4;
  int warmup_steps = 5000;
  std::uint64_t seed = 0;
  long total_steps = 200000;
  long eval_every = 5000;
  int eval_episodes = 20;
  std::string out_dir = "runs/hidi";
  long checkpoint_every = 50000;
  bool record_wall_time = false;

  void validate() const {
    hrl.validate();
    if (total_steps < 1) throw config_error("run.total_steps must be >= 1");
    if (eval_every < 1) throw config_error("run.eval_every must be >= 1");
    if (eval_episodes < 1) throw config_error("run.eval_episodes must be >= 1");
    if (warmup_steps < 0) throw config_error("run.warmup_steps must be >= 0");
    if (checkpoint_every < 0) throw config_error("run.checkpoint_every must be >= 0");
    if (!(subgoal_limit > 0.0)) throw config_error("hrl.subgoal_limit must be positive");
    if (gp.inducing < 1) throw config_error("gp.m must be >= 1");
    if (!(gp.jitter > 0.0)) throw config_error("gp.jitter must be positive");
    if (td3.policy_delay < 1) throw config_error("td3.policy_delay must be >= 1");
    if (nets.time_embed_dim < 2 || nets.time_embed_dim % 2 != 0)
      throw config_error("nn.time_embed_dim must be even and >= 2");
    for (const auto* v : {&nets.hi_hidden, &nets.lo_hidden, &nets.critic_hidden})
      for (int w : *v)
        if (w < 1) throw config_error("hidden widths must be positive");
  }

  AgentSpec agent_spec() const {
    AgentSpec s;
    s.hrl = hrl;
    s.td3 = td3;
    s.nets = nets;
    s.gp = gp;
    s.variant = variant;
    s.subgoal_limit = subgoal_limit;
    s.lo_explore_std = lo_explore_std;
    s.hi_explore_std = hi_explore_std;
    s.hi_actor_lr = hi_actor_lr;
    s.warmup_steps = warmup_steps;
    return s;
  }

  bool operator==(const RunConfig&) const = default;
};

struct ConfigKey {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

namespace detail {

template <typename T>
ConfigKey int_key(std::string name, T RunConfig::*field) {
  return {name, [field](const RunConfig& c) { return std::to_string(c.*field); },
          [field, name](RunConfig& c, const std::string& v) { c.*field = static_cast<T>(parse_int(v, name)); }};
}

template <typename S, typename T>
ConfigKey nested_int_key(std::string name, S RunConfig::*outer, T S::*field) {
  return {name, [outer, field](const RunConfig& c) { return std::to_string(c.*outer.*field); },
          [outer, field, name](RunConfig& c, const std::string& v) {
            c.*outer.*field = static_cast<T>(parse_int(v, name));
          }};
}

template <typename S>
ConfigKey nested_double_key(std::string name, S RunConfig::*outer, double S::*field) {
  return {name, [outer, field](const RunConfig& c) { return format_double(c.*outer.*field); },
          [outer, field, name](RunConfig& c, const std::string& v) { c.*outer.*field = parse_double(v, name); }};
}

inline ConfigKey double_key(std::string name, double RunConfig::*field) {
  return {name, [field](const RunConfig& c) { return format_double(c.*field); },
          [field, name](RunConfig& c, const std::string& v) { c.*field = parse_double(v, name); }};
}

inline ConfigKey widths_key(std::string name, std::vector<int> NetConfig::*field) {
  return {name,
          [field](const RunConfig& c) {
            std::string out;
            for (int w : c.nets.*field) out += (out.empty() ? "" : ",") + std::to_string(w);
            return out;
          },
          [field, name](RunConfig& c, const std::string& v) {
            std::vector<int> ws;
            for (const auto& part : split(v, ','))
              if (!part.empty()) ws.push_back(static_cast<int>(parse_int(part, name)));
            c.nets.*field = ws;
          }};
}

}  // namespace detail

/// Every configuration key, in the order used for config.resolved.
inline const std::vector<ConfigKey>& config_keys() {
  using namespace detail;
  static const std::vector<ConfigKey> keys = {
      {"env.name", [](const RunConfig& c) { return c.env_name; },
       [](RunConfig& c, const std::string& v) { c.env_name = trim(v); }},
      {"run.variant", [](const RunConfig& c) { return variant_name(c.variant); },
       [](RunConfig& c, const std::string& v) { c.variant = parse_variant(trim(v)); }},
      {"run.seed", [](const RunConfig& c) { return std::to_string(c.seed); },
       [](RunConfig& c, const std::string& v) {
         const auto s = parse_int(v, "run.seed");
         if (s < 0) throw config_error("run.seed must be >= 0");
         c.seed = static_cast<std::uint64_t>(s);
       }},
      int_key("run.total_steps", &RunConfig::total_steps),
      int_key("run.eval_every", &RunConfig::eval_every),
      int_key("run.eval_episodes", &RunConfig::eval_episodes),
      int_key("run.warmup_steps", &RunConfig::warmup_steps),
      int_key("run.checkpoint_every", &RunConfig::checkpoint_every),
      {"run.out_dir", [](const RunConfig& c) { return c.out_dir; },
       [](RunConfig& c, const std::string& v) { c.out_dir = trim(v); }},
      {"run.record_wall_time", [](const RunConfig& c) { return std::string(c.record_wall_time ? "true" : "false"); },
       [](RunConfig& c, const std::string& v) { c.record_wall_time = parse_bool(v, "run.record_wall_time"); }},
      nested_int_key("hrl.k", &RunConfig::hrl, &HrlConfig::k),
      nested_double_key("hrl.eta", &RunConfig::hrl, &HrlConfig::eta),
      nested_double_key("hrl.psi", &RunConfig::hrl, &HrlConfig::psi),
      nested_double_key("hrl.epsilon_select", &RunConfig::hrl, &HrlConfig::epsilon_select),
      nested_int_key("hrl.n_diffusion", &RunConfig::hrl, &HrlConfig::n_diffusion),
      nested_double_key("hrl.discount", &RunConfig::hrl, &HrlConfig::discount),
      nested_double_key("hrl.reward_scale_hi", &RunConfig::hrl, &HrlConfig::reward_scale_hi),
      nested_double_key("hrl.reward_scale_lo", &RunConfig::hrl, &HrlConfig::reward_scale_lo),
      nested_int_key("hrl.batch_hi", &RunConfig::hrl, &HrlConfig::batch_hi),
      nested_int_key("hrl.batch_lo", &RunConfig::hrl, &HrlConfig::batch_lo),
      nested_int_key("hrl.buffer_capacity", &RunConfig::hrl, &HrlConfig::buffer_capacity),
      nested_int_key("hrl.relabel_candidates", &RunConfig::hrl, &HrlConfig::relabel_candidates),
      double_key("hrl.subgoal_limit", &RunConfig::subgoal_limit),
      double_key("hrl.lo_explore_std", &RunConfig::lo_explore_std),
      double_key("hrl.hi_explore_std", &RunConfig::hi_explore_std),
      nested_double_key("td3.polyak", &RunConfig::td3, &Td3Settings::polyak),
      nested_int_key("td3.policy_delay", &RunConfig::td3, &Td3Settings::policy_delay),
      nested_double_key("td3.target_noise", &RunConfig::td3, &Td3Settings::target_noise),
      nested_double_key("td3.noise_clip", &RunConfig::td3, &Td3Settings::noise_clip),
      double_key("lr.hi_actor", &RunConfig::hi_actor_lr),
      nested_double_key("lr.lo_actor", &RunConfig::td3, &Td3Settings::actor_lr),
      nested_double_key("lr.critic", &RunConfig::td3, &Td3Settings::critic_lr),
      widths_key("nn.hi_hidden", &NetConfig::hi_hidden),
      widths_key("nn.lo_hidden", &NetConfig::lo_hidden),
      widths_key("nn.critic_hidden", &NetConfig::critic_hidden),
      nested_int_key("nn.time_embed_dim", &RunConfig::nets, &NetConfig::time_embed_dim),
      nested_int_key("gp.m", &RunConfig::gp, &GpSettings::inducing),
      nested_double_key("gp.lr", &RunConfig::gp, &GpSettings::lr),
      nested_double_key("gp.jitter", &RunConfig::gp, &GpSettings::jitter),
      nested_double_key("gp.init_gamma", &RunConfig::gp, &GpSettings::init_gamma),
      nested_double_key("gp.init_ell", &RunConfig::gp, &GpSettings::init_ell),
      nested_double_key("gp.init_sigma", &RunConfig::gp, &GpSettings::init_sigma),
  };
  return keys;
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys()) {
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw config_error("unknown configuration key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  for (const auto& k : config_keys())
    if (k.name == key) return k.get(cfg);
  throw config_error("unknown configuration key '" + key + "'");
}

/// Applies `key = value` lines on top of `base`. '#' starts a comment.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error("line " + std::to_string(lineno) + ": expected 'key = value'");
    set_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

inline RunConfig load_config_file(const fs::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

/// Applies an override of the form "key=value".
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw config_error("override '" + assignment + "' is not key=value");
  set_config_value(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

/// Forces the variant's ablation flags into the HRL fields and validates.
inline RunConfig resolve_config(RunConfig cfg) {
  cfg.hrl = apply_variant(cfg.hrl, cfg.variant);
  cfg.validate();
  return cfg;
}

inline std::string serialize_config(const RunConfig& cfg) {
  std::string out = "# resolved run configuration\n";
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

inline MazeSpec maze_for(const RunConfig& cfg) {
  const std::string prefix = "file:";
  if (cfg.env_name.rfind(prefix, 0) == 0) return load_maze_file(cfg.env_name.substr(prefix.size()));
  return builtin_maze(cfg.env_name);
}

/// Independent generator stream for (seed, purpose, index).
inline Rng derive_rng(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

inline constexpr std::uint64_t kStreamInit = 1, kStreamTrain = 2, kStreamEval = 3;

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRow {
  long step = 0;
  std::uint64_t seed = 0;
  double success_rate = 0.0;
  double mean_return = 0.0;
  double delta_metric = 0.0;
  double loss_dm = 0.0;
  double loss_gp = 0.0;
  double loss_dpg = 0.0;
  double gp_sigma_star_mean = 0.0;
  double wall_seconds = 0.0;
};

inline const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {"step",      "seed",    "success_rate", "mean_return",
                                                "delta_metric", "loss_dm", "loss_gp",   "loss_dpg",
                                                "gp_sigma_star_mean", "wall_seconds"};
  return cols;
}

inline std::string metrics_header() {
  std::string out;
  for (const auto& c : metrics_columns()) out += (out.empty() ? "" : ",") + c;
  return out;
}

inline std::string format_metrics_row(const MetricsRow& r) {
  return std::to_string(r.step) + "," + std::to_string(r.seed) + "," + format_double(r.success_rate) + "," +
         format_double(r.mean_return) + "," + format_double(r.delta_metric) + "," + format_double(r.loss_dm) +
         "," + format_double(r.loss_gp) + "," + format_double(r.loss_dpg) + "," +
         format_double(r.gp_sigma_star_mean) + "," + format_double(r.wall_seconds);
}

inline MetricsRow parse_metrics_row(const std::string& line) {
  const auto f = split(trim(line), ',');
  if (f.size() != metrics_columns().size())
    throw config_error("metrics row has " + std::to_string(f.size()) + " fields, expected " +
                       std::to_string(metrics_columns().size()));
  MetricsRow r;
  r.step = static_cast<long>(parse_int(f[0], "step"));
  r.seed = static_cast<std::uint64_t>(parse_int(f[1], "seed"));
  r.success_rate = parse_double(f[2], "success_rate");
  r.mean_return = parse_double(f[3], "mean_return");
  r.delta_metric = parse_double(f[4], "delta_metric");
  r.loss_dm = parse_double(f[5], "loss_dm");
  r.loss_gp = parse_double(f[6], "loss_gp");
  r.loss_dpg = parse_double(f[7], "loss_dpg");
  r.gp_sigma_star_mean = parse_double(f[8], "gp_sigma_star_mean");
  r.wall_seconds = parse_double(f[9], "wall_seconds");
  return r;
}

inline std::vector<MetricsRow> read_metrics_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || trim(line) != metrics_header())
    throw config_error(path.string() + ": header does not match the metrics schema");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line))
    if (!trim(line).empty()) rows.push_back(parse_metrics_row(line));
  return rows;
}

// ---------------------------------------------------------------------------
// Evaluation and training

struct EvalResult {
  double success_rate = 0.0;
  double mean_return = 0.0;
  double delta_metric = 0.0;
  std::vector<EpisodeStats> episodes;
};

/// Greedy episodes on a fresh environment; neither the agent nor its buffers change.
inline EvalResult evaluate(HrlAgent& agent, const MazeSpec& maze, int episodes, Rng rng) {
  if (episodes < 1) throw usage_error("evaluate needs at least one episode");
  PointMaze env(maze);
  EvalResult out;
  int wins = 0;
  double ret = 0.0;
  for (int e = 0; e < episodes; ++e) {
    out.episodes.push_back(run_episode(env, agent, rng, Mode::eval));
    wins += out.episodes.back().success ? 1 : 0;
    ret += out.episodes.back().episode_return;
  }
  out.success_rate = static_cast<double>(wins) / episodes;
  out.mean_return = ret / episodes;
  out.delta_metric = delta_metric(out.episodes);
  return out;
}

inline Rng eval_rng(std::uint64_t seed, long step) {
  return derive_rng(seed, kStreamEval, static_cast<std::uint64_t>(step));
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Agent parameters plus the resolved config and the trained step count.
inline void save_run_checkpoint(const HrlAgent& agent, const RunConfig& cfg, long step, const fs::path& dir) {
  agent.save(dir);
  write_text_file(dir / "config.resolved", serialize_config(cfg));
  write_text_file(dir / "step.txt", std::to_string(step) + "\n");
}

struct LoadedRun {
  RunConfig config;
  long step = 0;
  std::unique_ptr<HrlAgent> agent;
};

inline LoadedRun load_run_checkpoint(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw config_error("checkpoint directory " + dir.string() + " does not exist");
  LoadedRun run;
  run.config = resolve_config(load_config_file(dir / "config.resolved"));
  run.step = static_cast<long>(parse_int(trim(read_text_file(dir / "step.txt")), "step.txt"));
  Rng init = derive_rng(run.config.seed, kStreamInit);
  run.agent = std::make_unique<HrlAgent>(run.config.agent_spec(), init);
  run.agent->load(dir);
  return run;
}

struct TrainSummary {
  std::vector<MetricsRow> rows;
  long steps = 0;
  fs::path out_dir;
};

struct LossAccumulator {
  double dm = 0, gp = 0, dpg = 0, sigma = 0;
  long n = 0;
  void add(const HighLossTerms& t) {
    dm += t.dm;
    gp += t.gp;
    dpg += t.dpg;
    sigma += t.sigma_star_mean;
    ++n;
  }
  void fill(MetricsRow& r) const {
    if (n == 0) return;
    r.loss_dm = dm / n;
    r.loss_gp = gp / n;
    r.loss_dpg = dpg / n;
    r.gp_sigma_star_mean = sigma / n;
  }
};

/// Runs a full training job: metrics.csv, periodic and final checkpoints and
/// config.resolved land in cfg.out_dir. `log` receives one line per eval.
inline TrainSummary train(const RunConfig& raw, std::ostream* log = nullptr) {
  const RunConfig cfg = resolve_config(raw);
  const MazeSpec maze = maze_for(cfg);
  const fs::path out = cfg.out_dir;
  fs::create_directories(out);
  write_text_file(out / "config.resolved", serialize_config(cfg));

  Rng init = derive_rng(cfg.seed, kStreamInit);
  HrlAgent agent(cfg.agent_spec(), init);
  Rng rng = derive_rng(cfg.seed, kStreamTrain);
  PointMaze env(maze);

  std::ofstream csv(out / "metrics.csv", std::ios::binary | std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write metrics.csv");
  csv << metrics_header() << '\n';

  const auto t0 = std::chrono::steady_clock::now();
  TrainSummary summary;
  summary.out_dir = out;
  LossAccumulator losses;
  long step = 0;
  long next_eval = cfg.eval_every;
  long next_ckpt = cfg.checkpoint_every > 0 ? cfg.checkpoint_every : -1;
  const int k = agent.config().k;

  auto emit = [&](long label) {
    const auto ev = evaluate(agent, maze, cfg.eval_episodes, eval_rng(cfg.seed, label));
    MetricsRow row;
    row.step = label;
    row.seed = cfg.seed;
    row.success_rate = ev.success_rate;
    row.mean_return = ev.mean_return;
    row.delta_metric = ev.delta_metric;
    losses.fill(row);
    if (cfg.record_wall_time)
      row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    csv << format_metrics_row(row) << '\n';
    csv.flush();
    summary.rows.push_back(row);
    losses = {};
    if (log != nullptr)
      *log << "step " << label << " success " << row.success_rate << " return " << row.mean_return << " delta "
           << row.delta_metric << std::endl;
  };

  while (step < cfg.total_steps) {
    const auto ep = run_episode(env, agent, rng, Mode::train);
    step += ep.steps;
    if (!agent.in_warmup()) {
      for (int i = 0; i < ep.steps; ++i)
        if (agent.low_buffer().size() >= static_cast<std::size_t>(agent.config().batch_lo)) agent.update_low(rng);
      const int high_updates = (ep.steps + k - 1) / k;
      for (int i = 0; i < high_updates; ++i) {
        if (agent.high_buffer().size() < static_cast<std::size_t>(agent.config().batch_hi)) break;
        const auto rep = agent.update_high(rng);
        if (rep.policy_updated) losses.add(rep.terms);
      }
    }
    while (next_eval <= std::min(step, cfg.total_steps)) {
      emit(next_eval);
      next_eval += cfg.eval_every;
    }
    if (next_ckpt > 0 && step >= next_ckpt && step < cfg.total_steps) {
      save_run_checkpoint(agent, cfg, step, out / "checkpoints" / ("step_" + std::to_string(next_ckpt)));
      next_ckpt += cfg.checkpoint_every;
    }
  }
  if (summary.rows.empty() || summary.rows.back().step < cfg.total_steps) emit(cfg.total_steps);
  save_run_checkpoint(agent, cfg, cfg.total_steps, out / "checkpoint");
  summary.steps = step;
  return summary;
}

/// Loads a checkpoint directory and evaluates it with the same generator
/// stream the training loop used at that step.
inline MetricsRow eval_checkpoint(const fs::path& dir, int episodes_override = 0) {
  const auto run = load_run_checkpoint(dir);
  const int episodes = episodes_override > 0 ? episodes_override : run.config.eval_episodes;
  const auto ev = evaluate(*run.agent, maze_for(run.config), episodes, eval_rng(run.config.seed, run.step));
  MetricsRow row;
  row.step = run.step;
  row.seed = run.config.seed;
  row.success_rate = ev.success_rate;
  row.mean_return = ev.mean_return;
  row.delta_metric = ev.delta_metric;
  return row;
}

// ---------------------------------------------------------------------------
// Bandit regret table

struct RegretRow {
  int bandit = 0;
  RegretReport report;
};

/// Random toy bandits evaluated for each epsilon; trials per cell as given.
inline std::vector<RegretRow> bandit_regret_suite(std::uint64_t seed, int bandits, const std::vector<double>& epsilons,
                                                  int trials) {
  std::vector<RegretRow> rows;
  Rng rng = derive_rng(seed, 0xBA5D17);
  for (int b = 0; b < bandits; ++b) {
    const BanditSpec spec = random_bandit(rng);
    MixtureSelector sel;
    Rng pol_rng = derive_rng(seed, 0xBA5D18, static_cast<std::uint64_t>(b));
    sel.policy = Mat(spec.states.size(), spec.subgoals.size());
    std::uniform_real_distribution<double> u(0.05, 1.0);
    for (Eigen::Index i = 0; i < sel.policy.size(); ++i) sel.policy(i) = u(pol_rng);
    for (Eigen::Index r = 0; r < sel.policy.rows(); ++r) sel.policy.row(r) /= sel.policy.row(r).sum();
    sel.gp_mean.resize(spec.states.size());
    std::uniform_int_distribution<int> pick(0, static_cast<int>(spec.subgoals.size()) - 1);
    for (auto& g : sel.gp_mean) g = pick(pol_rng);
    for (double eps : epsilons) {
      sel.epsilon = eps;
      Rng trial_rng = derive_rng(seed, 0xBA5D19, static_cast<std::uint64_t>(b * 1000 + std::lround(eps * 100)));
      rows.push_back({b, bandit_eval(spec, sel, trials, trial_rng)});
    }
  }
  return rows;
}

inline std::string regret_header() {
  return "bandit,epsilon,r_star,r_min,delta,measured_regret,std_error,bound,mixture_reward,trials,within_bound";
}

inline std::string format_regret_row(const RegretRow& r) {
  const auto& p = r.report;
  return std::to_string(r.bandit) + "," + format_double(p.epsilon) + "," + format_double(p.r_star) + "," +
         format_double(p.r_min) + "," + format_double(p.delta) + "," + format_double(p.measured_regret) + "," +
         format_double(p.std_error) + "," + format_double(p.bound) + "," + format_double(p.mixture_reward) + "," +
         std::to_string(p.trials) + "," + (p.within_bound(3.0) ? "1" : "0");
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepAxis {
  std::string key;
  std::vector<std::string> values;
};

/// "key=v1,v2,v3"
inline SweepAxis parse_axis(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw config_error("grid axis '" + text + "' is not key=v1,v2,...");
  SweepAxis a;
  a.key = trim(text.substr(0, eq));
  for (const auto& v : split(text.substr(eq + 1), ','))
    if (!v.empty()) a.values.push_back(v);
  if (a.values.empty()) throw config_error("grid axis '" + a.key + "' has no values");
  return a;
}

/// Sweep file: one axis per line in the form "key = v1, v2".
inline std::vector<SweepAxis> load_sweep_file(const fs::path& path) {
  std::vector<SweepAxis> axes;
  std::istringstream in(read_text_file(path));
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (!line.empty()) axes.push_back(parse_axis(line));
  }
  return axes;
}

struct SweepCell {
  std::vector<std::string> values;  // one per axis
  std::uint64_t seed = 0;
  fs::path dir;
  bool ok = false;
  std::string error;
  std::size_t rows = 0;
};

inline constexpr const char* kBanditSuiteKey = "suite";
inline constexpr const char* kBanditSuiteName = "bandit-regret";

struct SweepResult {
  std::vector<SweepCell> cells;
  fs::path aggregate;
  std::size_t aggregate_rows = 0;
  bool all_ok() const {
    return std::all_of(cells.begin(), cells.end(), [](const SweepCell& c) { return c.ok; });
  }
};

/// Cartesian grid x seeds, run serially. Each cell writes its own metrics
/// into <out>/cell_<i>_seed_<s>/; the aggregate is <out>/sweep.csv with the
/// axis values prepended to every metrics row. An axis named "suite" with the
/// value "bandit-regret" turns that cell into the regret table instead.
inline SweepResult run_sweep(const RunConfig& base, const std::vector<SweepAxis>& axes,
                             const std::vector<std::uint64_t>& seeds, const fs::path& out, std::ostream* log = nullptr) {
  fs::create_directories(out);
  std::vector<std::vector<std::string>> combos{{}};
  for (const auto& axis : axes) {
    std::vector<std::vector<std::string>> next;
    for (const auto& c : combos)
      for (const auto& v : axis.values) {
        auto e = c;
        e.push_back(v);
        next.push_back(std::move(e));
      }
    combos = std::move(next);
  }

  SweepResult result;
  result.aggregate = out / "sweep.csv";
  std::ofstream agg(result.aggregate, std::ios::binary | std::ios::trunc);
  std::string header;
  for (const auto& a : axes) header += a.key + ",";
  agg << header << metrics_header() << '\n';
  std::ofstream regret;
  std::ofstream failures(out / "failures.txt", std::ios::binary | std::ios::trunc);

  for (std::size_t ci = 0; ci < combos.size(); ++ci) {
    bool bandit = false;
    for (std::size_t a = 0; a < axes.size(); ++a)
      if (axes[a].key == kBanditSuiteKey) {
        if (combos[ci][a] != kBanditSuiteName) throw config_error("unknown suite '" + combos[ci][a] + "'");
        bandit = true;
      }
    for (auto seed : seeds) {
      SweepCell cell;
      cell.values = combos[ci];
      cell.seed = seed;
      cell.dir = out / ("cell_" + std::to_string(ci) + "_seed_" + std::to_string(seed));
      try {
        fs::create_directories(cell.dir);
        if (bandit) {
          const auto rows = bandit_regret_suite(seed, 20, {0.0, 0.1, 0.5, 1.0}, 10000);
          std::ofstream f(cell.dir / "regret.csv", std::ios::binary | std::ios::trunc);
          f << regret_header() << '\n';
          if (!regret.is_open()) {
            regret.open(out / "regret.csv", std::ios::binary | std::ios::trunc);
            regret << "seed," << regret_header() << '\n';
          }
          bool within = true;
          for (const auto& r : rows) {
            f << format_regret_row(r) << '\n';
            regret << seed << ',' << format_regret_row(r) << '\n';
            within = within && r.report.within_bound(3.0);
          }
          cell.rows = rows.size();
          if (!within) throw std::runtime_error("regret bound violated");
        } else {
          RunConfig cfg = base;
          for (std::size_t a = 0; a < axes.size(); ++a) set_config_value(cfg, axes[a].key, combos[ci][a]);
          cfg.seed = seed;
          cfg.out_dir = cell.dir.string();
          const auto summary = train(cfg, nullptr);
          for (const auto& r : summary.rows) {
            std::string prefix;
            for (const auto& v : combos[ci]) prefix += v + ",";
            agg << prefix << format_metrics_row(r) << '\n';
          }
          cell.rows = summary.rows.size();
          result.aggregate_rows += summary.rows.size();
        }
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.error = e.what();
        failures << cell.dir.filename().string() << ": " << e.what() << '\n';
      }
      if (log != nullptr)
        *log << cell.dir.filename().string() << (cell.ok ? " ok" : " FAILED: " + cell.error) << std::endl;
      result.cells.push_back(std::move(cell));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Summaries

/// Two-sided 95% Student-t critical value for `df` degrees of freedom.
inline double t_critical_95(int df) {
  static const double table[] = {0,     12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
                                 2.201, 2.179,  2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086, 2.080,
                                 2.074, 2.069,  2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042};
  if (df < 1) return 0.0;
  if (df <= 30) return table[df];
  return 1.960;
}

struct MeanCi {
  double mean = 0.0;
  double half_width = 0.0;
  int n = 0;
};

inline MeanCi mean_ci(const std::vector<double>& xs) {
  MeanCi out;
  out.n = static_cast<int>(xs.size());
  if (xs.empty()) return out;
  for (double x : xs) out.mean += x;
  out.mean /= out.n;
  if (out.n < 2) return out;
  double ss = 0.0;
  for (double x : xs) ss += (x - out.mean) * (x - out.mean);
  const double sd = std::sqrt(ss / (out.n - 1));
  out.half_width = t_critical_95(out.n - 1) * sd / std::sqrt(static_cast<double>(out.n));
  return out;
}

/// Reads metrics CSVs (plain or sweep aggregates), groups rows by every
/// leading non-metric column plus step, and reports mean and 95% CI of
/// success_rate, mean_return and delta_metric across seeds.
inline std::string summarize_csv(const std::vector<fs::path>& files) {
  struct Key {
    std::vector<std::string> group;
    long step;
    bool operator<(const Key& o) const { return std::tie(group, step) < std::tie(o.group, o.step); }
  };
  std::map<Key, std::array<std::vector<double>, 3>> groups;
  std::vector<std::string> group_cols;
  for (const auto& f : files) {
    std::istringstream in(read_text_file(f));
    std::string line;
    if (!std::getline(in, line)) throw config_error(f.string() + " is empty");
    const auto cols = split(trim(line), ',');
    const std::size_t nm = metrics_columns().size();
    if (cols.size() < nm) throw config_error(f.string() + ": not a metrics file");
    const std::vector<std::string> tail(cols.end() - static_cast<long>(nm), cols.end());
    if (tail != metrics_columns()) throw config_error(f.string() + ": header does not end with the metrics schema");
    const std::vector<std::string> lead(cols.begin(), cols.end() - static_cast<long>(nm));
    if (group_cols.empty()) group_cols = lead;
    else if (group_cols != lead) throw config_error("summarize: files have different grouping columns");
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      const auto fields = split(trim(line), ',');
      if (fields.size() != cols.size()) throw config_error(f.string() + ": ragged row");
      std::vector<std::string> g(fields.begin(), fields.begin() + static_cast<long>(lead.size()));
      std::string row;
      for (std::size_t i = lead.size(); i < fields.size(); ++i) row += (row.empty() ? "" : ",") + fields[i];
      const auto m = parse_metrics_row(row);
      auto& bucket = groups[{g, m.step}];
      bucket[0].push_back(m.success_rate);
      bucket[1].push_back(m.mean_return);
      bucket[2].push_back(m.delta_metric);
    }
  }
  std::string out;
  for (const auto& c : group_cols) out += c + ",";
  out += "step,n,success_mean,success_ci95,return_mean,return_ci95,delta_mean,delta_ci95\n";
  for (const auto& [key, vals] : groups) {
    for (const auto& g : key.group) out += g + ",";
    const auto s = mean_ci(vals[0]), r = mean_ci(vals[1]), d = mean_ci(vals[2]);
    out += std::to_string(key.step) + "," + std::to_string(s.n) + "," + format_double(s.mean) + "," +
           format_double(s.half_width) + "," + format_double(r.mean) + "," + format_double(r.half_width) + "," +
           format_double(d.mean) + "," + format_double(d.half_width) + "\n";
  }
  return out;
}

}  // namespace hidi
