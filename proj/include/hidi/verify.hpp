#pragma once

// Property suites behind `hidi verify` and the acceptance binary. Each suite
// uses fixed seeds and an independent oracle, and reports pass/fail with the
// worst observed discrepancy.

#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "hidi/diffusion.hpp"
#include "hidi/gp.hpp"
#include "hidi/harness.hpp"
#include "hidi/hrl.hpp"
#include "hidi/nn.hpp"

namespace hidi {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

namespace oracle {

/// Exact GP predictive from an explicit dense inverse of K_NN + sigma^2 I.
inline void full_gp_predict(const Mat& states, const Mat& targets, const GpHyper& h, const Mat& query, Mat& mean,
                            Vec& variance) {
  const double s2 = h.sigma() * h.sigma();
  const Eigen::Index n = states.cols();
  Mat k(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) k(i, j) = rbf_kernel(states.col(i), states.col(j), h);
  const Mat k_inv = (k + s2 * Mat::Identity(n, n)).fullPivLu().inverse();
  mean.resize(targets.rows(), query.cols());
  variance.resize(query.cols());
  for (Eigen::Index q = 0; q < query.cols(); ++q) {
    Vec ks(n);
    for (Eigen::Index i = 0; i < n; ++i) ks(i) = rbf_kernel(states.col(i), query.col(q), h);
    mean.col(q) = targets * (k_inv * ks);
    variance(q) = rbf_kernel(query.col(q), query.col(q), h) - ks.dot(k_inv * ks) + s2;
  }
}

/// Largest |a - b| / max(1, |b|) over all entries.
inline double scaled_max_diff(const Mat& a, const Mat& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a(i) - b(i)) / std::max(1.0, std::abs(b(i))));
  return worst;
}

}  // namespace oracle

namespace detail {

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline Mat uniform_mat(Eigen::Index r, Eigen::Index c, double lo, double hi, Rng& rng) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = uniform(rng, lo, hi);
  return m;
}

inline GpHyper random_hyper(Rng& rng) {
  return GpHyper::from_natural(uniform(rng, 0.5, 2.0), uniform(rng, 0.5, 2.0), uniform(rng, 0.05, 0.5));
}

/// A small smooth critic Q(s, g) for gradient checks (mish hidden layer).
struct SmoothCritic {
  Mlp net;
  ParamStore params;
  SmoothCritic(int state_dim, int goal_dim, Rng& rng) {
    MlpSpec spec;
    spec.layer_widths = {state_dim + goal_dim, 12, 1};
    spec.activation = Activation::mish;
    net = Mlp(spec, "q");
    net.init(params, rng);
  }
  QFunction as_function() {
    return [this](const Mat& s, const Mat& g, Mat* dq) -> Vec {
      const auto tape = mlp_forward(params, net, stack_rows(s, g));
      if (dq != nullptr) *dq = mlp_backward(params, tape, Mat::Ones(1, s.cols()), false).bottomRows(g.rows());
      return tape.output.row(0).transpose();
    };
  }
};

template <typename F>
SuiteResult timed(const std::string& name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  r.name = name;
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Gradient exactness of the three high-level loss terms

/// Finite-difference agreement for L_dm, L_gp (through the chain) and L_dpg
/// (through the chain and a smooth critic), `instances` random problems each.
///
/// Entries smaller than 1e-6 in magnitude are compared on an absolute scale
/// (the relative error's denominator is floored there); central differences
/// of such entries are dominated by rounding.
inline constexpr double kGradFloor = 1e-6;

inline SuiteResult suite_gradients(std::uint64_t seed = 11, int instances = 20, double tol = 1e-4) {
  return detail::timed("gradients", [&](SuiteResult& r) {
    double worst_dm = 0.0, worst_gp = 0.0, worst_dpg = 0.0;
    for (int inst = 0; inst < instances; ++inst) {
      Rng rng = derive_rng(seed, 1, static_cast<std::uint64_t>(inst));
      // Wide box so the clamp never bites; finite differences across it would be meaningless.
      DiffusionPolicy p = make_diffusion_policy(2, Box::symmetric(2, 50.0), 5, {16}, rng, 8);
      const Mat s = detail::uniform_mat(2, 4, -1.0, 1.0, rng);
      const Mat g = detail::uniform_mat(2, 4, -1.0, 1.0, rng);
      const auto ddpm = draw_ddpm(p, 4, rng);
      const auto chain = draw_chain_noise(p, 4, rng);

      worst_dm = std::max(worst_dm, finite_diff_check(p.params, [&](ParamStore&) {
                            return ddpm_loss(p, s, g, ddpm, 1.0);
                          }, 1e-5, kGradFloor));

      SparseGpModel gp(2, 2, 5, detail::random_hyper(rng));
      gp.set_conditioning(detail::uniform_mat(2, 9, -1.5, 1.5, rng), detail::uniform_mat(2, 9, -1.0, 1.0, rng));
      gp.set_inducing(detail::uniform_mat(2, 5, -1.5, 1.5, rng));
      gp.fit_caches();
      worst_gp = std::max(worst_gp, finite_diff_check(p.params, [&](ParamStore&) {
                            const auto sample = sample_chain(p, s, chain);
                            const auto reg = gp_reg_loss(s, sample.g0, gp);
                            chain_backward(p, sample.tape, reg.d_goals);
                            return reg.value;
                          }, 1e-5, kGradFloor));

      detail::SmoothCritic critic(2, 2, rng);
      const QFunction q = critic.as_function();
      worst_dpg = std::max(worst_dpg, finite_diff_check(p.params, [&](ParamStore&) {
                             return dpg_loss(p, s, q, chain, 1.0);
                           }, 1e-5, kGradFloor));
    }
    r.passed = worst_dm < tol && worst_gp < tol && worst_dpg < tol;
    r.detail = "max rel err dm " + detail::fmt(worst_dm) + ", gp " + detail::fmt(worst_gp) + ", dpg " +
               detail::fmt(worst_dpg) + " (tol " + detail::fmt(tol) + ")";
  });
}

// ---------------------------------------------------------------------------
// Gradient-weighting identity

/// dL_gp/dg0 against (g0 - mu*) / sigma*^2 / B. The gradient side is taken by
/// central differences of the loss value, which are exact up to rounding
/// because the loss is quadratic in each subgoal coordinate.
inline SuiteResult suite_gradient_weighting(std::uint64_t seed = 12, int cases = 50, double tol = 1e-10) {
  return detail::timed("gradient-weighting", [&](SuiteResult& r) {
    double worst = 0.0;
    for (int c = 0; c < cases; ++c) {
      Rng rng = derive_rng(seed, 2, static_cast<std::uint64_t>(c));
      SparseGpModel gp(2, 2, 6, detail::random_hyper(rng));
      gp.set_conditioning(detail::uniform_mat(2, 10, -2.0, 2.0, rng), detail::uniform_mat(2, 10, -1.0, 1.0, rng));
      gp.set_inducing(detail::uniform_mat(2, 6, -2.0, 2.0, rng));
      gp.fit_caches();
      const Eigen::Index b = 1 + static_cast<Eigen::Index>(c % 5);
      const Mat s = detail::uniform_mat(2, b, -2.0, 2.0, rng);
      const Mat g = detail::uniform_mat(2, b, -2.0, 2.0, rng);
      Mat mean;
      Vec var;
      gp.predict(s, mean, var);
      const Mat expected = (g - mean) * (var.cwiseInverse() / static_cast<double>(b)).asDiagonal();
      const double h = 1e-3;
      Mat numeric(2, b);
      for (Eigen::Index i = 0; i < g.size(); ++i) {
        Mat up = g, down = g;
        up(i) += h;
        down(i) -= h;
        numeric(i) = (gp_reg_loss(s, up, gp).value - gp_reg_loss(s, down, gp).value) / (2.0 * h);
      }
      const Mat analytic = gp_reg_loss(s, g, gp).d_goals;
      worst = std::max({worst, oracle::scaled_max_diff(numeric, expected), oracle::scaled_max_diff(analytic, expected)});
    }
    r.passed = worst <= tol;
    r.detail = "max scaled diff " + detail::fmt(worst) + " (tol " + detail::fmt(tol) + ")";
  });
}

// ---------------------------------------------------------------------------
// FITC exactness

using GpPredictor = std::function<void(const SparseGpModel&, const Mat& query, Mat& mean, Vec& variance)>;

inline void model_predictor(const SparseGpModel& m, const Mat& q, Mat& mean, Vec& var) { m.predict(q, mean, var); }

/// With inducing states equal to the conditioning states the sparse
/// predictive must reproduce the exact GP; also checks the variance band.
inline SuiteResult suite_fitc(std::uint64_t seed = 13, int problems = 50, const GpPredictor& predictor = model_predictor,
                              double tol = 1e-6) {
  return detail::timed("fitc-exactness", [&](SuiteResult& r) {
    double worst = 0.0;
    bool band_ok = true;
    for (int pr = 0; pr < problems; ++pr) {
      Rng rng = derive_rng(seed, 3, static_cast<std::uint64_t>(pr));
      const int n = 2 + pr % 7;  // 2..8
      const GpHyper h = detail::random_hyper(rng);
      const Mat x = detail::uniform_mat(2, n, -2.0, 2.0, rng);
      const Mat y = detail::uniform_mat(2, n, -1.0, 1.0, rng);
      SparseGpModel gp(2, 2, n, h);
      gp.set_conditioning(x, y);
      gp.set_inducing(x);
      gp.fit_caches();
      Mat q(2, n + 10);
      q.leftCols(n) = x;
      q.rightCols(10) = detail::uniform_mat(2, 10, -3.0, 3.0, rng);
      Mat mean, mean_ref;
      Vec var, var_ref;
      predictor(gp, q, mean, var);
      oracle::full_gp_predict(x, y, h, q, mean_ref, var_ref);
      worst = std::max({worst, oracle::scaled_max_diff(mean, mean_ref), oracle::scaled_max_diff(var, var_ref)});
      const double s2 = h.sigma() * h.sigma(), g2 = h.gamma() * h.gamma();
      for (Eigen::Index i = 0; i < var.size(); ++i)
        if (var(i) < s2 - 1e-12 || var(i) > g2 + s2 + 1e-8) band_ok = false;
    }
    r.passed = worst <= tol && band_ok;
    r.detail = "max scaled diff " + detail::fmt(worst) + " (tol " + detail::fmt(tol) + "), variance band " +
               (band_ok ? "ok" : "VIOLATED");
  });
}

// ---------------------------------------------------------------------------
// Regret bound

inline SuiteResult suite_regret(std::uint64_t seed = 14, int bandits = 20, int trials = 10000) {
  return detail::timed("regret-bound", [&](SuiteResult& r) {
    const auto rows = bandit_regret_suite(seed, bandits, {0.0, 0.1, 0.5, 1.0}, trials);
    int bad = 0;
    double worst_slack = -1e300;
    for (const auto& row : rows) {
      const auto& p = row.report;
      if (!p.within_bound(3.0)) ++bad;
      worst_slack = std::max(worst_slack, p.measured_regret - p.bound - 3.0 * p.std_error);
    }
    r.passed = bad == 0;
    r.detail = std::to_string(rows.size()) + " cells, " + std::to_string(bad) +
               " above bound + 3 SE; max(regret - bound - 3 SE) = " + detail::fmt(worst_slack);
  });
}

// ---------------------------------------------------------------------------
// Distribution recovery

struct RecoverySettings {
  int train_steps = 20000;
  int batch = 256;
  double lr = 1e-3;
  int samples = 10000;
  double mode_sd = 0.1;
  double center_tol = 0.1;
  double min_share = 0.3;
};

/// Two-mode conditional target: g ~ 1/2 N(c + 0.3 s, sd^2 I) + 1/2 N(-c + 0.3 s, sd^2 I), c = (1, 1).
inline Mat two_mode_centers(const Vec& s) {
  Mat c(2, 2);
  c.col(0) = Vec::Constant(2, 1.0) + 0.3 * s;
  c.col(1) = Vec::Constant(2, -1.0) + 0.3 * s;
  return c;
}

inline SuiteResult suite_distribution_recovery(std::uint64_t seed = 15, const RecoverySettings& cfg = {}) {
  return detail::timed("distribution-recovery", [&](SuiteResult& r) {
    Rng rng = derive_rng(seed, 5);
    DiffusionPolicy p = make_diffusion_policy(2, Box::symmetric(2, 2.5), 5, {256}, rng);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    for (int it = 0; it < cfg.train_steps; ++it) {
      const Mat s = detail::uniform_mat(2, cfg.batch, -1.0, 1.0, rng);
      Mat g(2, cfg.batch);
      for (int c = 0; c < cfg.batch; ++c) {
        const Mat centers = two_mode_centers(s.col(c));
        g.col(c) = centers.col(coin(rng) ? 0 : 1);
        for (int d = 0; d < 2; ++d) g(d, c) += cfg.mode_sd * n01(rng);
      }
      ddpm_loss(p, s, g, rng);
      adam_step(p.params, cfg.lr);
    }
    bool ok = true;
    std::string detail_text;
    const std::vector<Vec> probes = {Vec::Zero(2), (Vec(2) << 0.8, -0.5).finished()};
    for (const auto& s : probes) {
      const Mat centers = two_mode_centers(s);
      const Mat samples = sample_chain(p, s.replicate(1, cfg.samples), rng).g0;
      Vec count = Vec::Zero(2);
      Mat sum = Mat::Zero(2, 2);
      for (Eigen::Index c = 0; c < samples.cols(); ++c) {
        const int basin = (samples.col(c) - centers.col(0)).squaredNorm() <= (samples.col(c) - centers.col(1)).squaredNorm() ? 0 : 1;
        count(basin) += 1.0;
        sum.col(basin) += samples.col(c);
      }
      for (int b = 0; b < 2; ++b) {
        const double share = count(b) / cfg.samples;
        const Vec center = count(b) > 0 ? Vec(sum.col(b) / count(b)) : Vec::Constant(2, 1e9);
        const double err = (center - centers.col(b)).cwiseAbs().maxCoeff();
        ok = ok && share >= cfg.min_share && err <= cfg.center_tol;
        if (!detail_text.empty()) detail_text += "; ";
        detail_text += "basin " + std::to_string(b) + " share " + detail::fmt(share) + " center err " + detail::fmt(err);
      }
    }
    r.passed = ok;
    r.detail = detail_text;
  });
}

// ---------------------------------------------------------------------------
// Selector frequency

inline SuiteResult suite_selector_frequency(std::uint64_t seed = 16, int calls = 10000, double epsilon = 0.1) {
  return detail::timed("selector-frequency", [&](SuiteResult& r) {
    Rng rng = derive_rng(seed, 6);
    DiffusionPolicy p = make_diffusion_policy(2, Box::symmetric(2, 2.5), 5, {32}, rng);
    SparseGpModel gp(2, 2, 4);
    gp.set_conditioning(detail::uniform_mat(2, 8, -1.0, 1.0, rng), detail::uniform_mat(2, 8, -1.0, 1.0, rng));
    gp.set_inducing(detail::uniform_mat(2, 4, -1.0, 1.0, rng));
    gp.fit_caches();
    int hits = 0;
    for (int i = 0; i < calls; ++i) {
      const Vec s = detail::uniform_mat(2, 1, -1.0, 1.0, rng).col(0);
      if (select_subgoal(s, p, &gp, epsilon, rng).from_gp_mean) ++hits;
    }
    const double rate = static_cast<double>(hits) / calls;
    const double sd = std::sqrt(epsilon * (1.0 - epsilon) / calls);
    r.passed = std::abs(rate - epsilon) <= 3.0 * sd;
    r.detail = "GP-mean rate " + detail::fmt(rate) + " (allowed " + detail::fmt(epsilon - 3 * sd) + ".." +
               detail::fmt(epsilon + 3 * sd) + ")";
  });
}

// ---------------------------------------------------------------------------
// Composite-loss additivity and relabel optimality

inline SuiteResult suite_composite_additivity(std::uint64_t seed = 17, int cases = 10) {
  return detail::timed("composite-additivity", [&](SuiteResult& r) {
    double worst = 0.0;
    for (int c = 0; c < cases; ++c) {
      Rng rng = derive_rng(seed, 7, static_cast<std::uint64_t>(c));
      DiffusionPolicy p = make_diffusion_policy(2, Box::symmetric(2, 2.5), 5, {24}, rng);
      SparseGpModel gp(2, 2, 4, detail::random_hyper(rng));
      gp.set_conditioning(detail::uniform_mat(2, 8, -1.0, 1.0, rng), detail::uniform_mat(2, 8, -1.0, 1.0, rng));
      gp.set_inducing(detail::uniform_mat(2, 4, -1.0, 1.0, rng));
      gp.fit_caches();
      detail::SmoothCritic critic(2, 2, rng);
      const QFunction q = critic.as_function();
      const Mat s = detail::uniform_mat(2, 6, -1.0, 1.0, rng);
      const Mat g = detail::uniform_mat(2, 6, -1.0, 1.0, rng);
      const double psi = detail::uniform(rng, 0.0, 1.0), eta = detail::uniform(rng, 0.0, 5.0);
      const auto draws = draw_high_loss(p, 6, rng);
      const auto terms = composite_loss(p, s, g, &q, &gp, psi, eta, draws);
      p.params.zero_grad();
      const double dm = ddpm_loss(p, s, g, draws.ddpm, 1.0);
      const auto sample = sample_chain(p, s, draws.chain);
      const double lgp = gp_reg_loss(s, sample.g0, gp).value;
      const double ldpg = -q(s, sample.g0, nullptr).mean();
      p.params.zero_grad();
      worst = std::max(worst, std::abs(terms.total - (dm + psi * lgp + eta * ldpg)));
    }
    r.passed = worst <= 1e-10;
    r.detail = "max |total - sum of terms| " + detail::fmt(worst);
  });
}

inline SuiteResult suite_relabel_optimality(std::uint64_t seed = 18, int cases = 50) {
  return detail::timed("relabel-optimality", [&](SuiteResult& r) {
    int bad = 0;
    for (int c = 0; c < cases; ++c) {
      Rng rng = derive_rng(seed, 8, static_cast<std::uint64_t>(c));
      Td3Pair low = make_td3(4, 2, 1.0, {16}, {8}, {}, rng);
      const int k = 1 + c % 3;
      HiTransition hi;
      hi.s_start = detail::uniform_mat(2, 1, -1.0, 1.0, rng).col(0);
      hi.g = detail::uniform_mat(2, 1, -2.0, 2.0, rng).col(0);
      Vec s = hi.s_start;
      for (int i = 0; i < k; ++i) {
        hi.low_states.push_back(s);
        hi.low_actions.push_back(detail::uniform_mat(2, 1, -1.0, 1.0, rng).col(0));
        s += 0.25 * hi.low_actions.back();
      }
      hi.s_end = s;
      const Box box = Box::symmetric(2, 2.5);
      Rng a = rng, b = rng;
      const Vec chosen = relabel(hi, low, box, 10, a);
      // Exhaustive scoring with explicit per-step evaluation of the actor.
      const auto cands = relabel_candidates(hi, box, 10, b);
      double best = -1e300;
      Vec best_g;
      for (const auto& cand : cands) {
        Vec gg = cand;
        double score = 0.0;
        for (int i = 0; i < k; ++i) {
          Vec obs(4);
          obs << hi.low_states[i], gg;
          score -= 0.5 * (hi.low_actions[i] - mlp_predict(low.actor, low.actor_net, obs)).squaredNorm();
          const Vec& next = i + 1 < k ? hi.low_states[i + 1] : hi.s_end;
          gg = hi.low_states[i] + gg - next;
        }
        if (score > best) {
          best = score;
          best_g = cand;
        }
      }
      if ((chosen - best_g).norm() != 0.0) ++bad;
    }
    r.passed = bad == 0;
    r.detail = std::to_string(bad) + " of " + std::to_string(cases) + " instances disagree with exhaustive scoring";
  });
}

/// Every suite `hidi verify` runs, in order.
inline std::vector<SuiteResult> run_all_suites(std::ostream* log = nullptr) {
  std::vector<std::function<SuiteResult()>> suites = {
      [] { return suite_gradients(); },          [] { return suite_gradient_weighting(); },
      [] { return suite_fitc(); },               [] { return suite_regret(); },
      [] { return suite_distribution_recovery(); }, [] { return suite_selector_frequency(); },
      [] { return suite_composite_additivity(); }, [] { return suite_relabel_optimality(); },
  };
  std::vector<SuiteResult> out;
  for (auto& s : suites) {
    out.push_back(s());
    if (log != nullptr)
      *log << (out.back().passed ? "PASS " : "FAIL ") << out.back().name << "  " << out.back().detail << "  ("
           << detail::fmt(out.back().seconds) << " s)" << std::endl;
  }
  return out;
}

}  // namespace hidi
