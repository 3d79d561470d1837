#pragma once

// RBF Gaussian processes over states with vector-valued subgoal targets.
//
// Each subgoal coordinate is an independent GP; all coordinates share the
// kernel hyperparameters and, for the sparse model, one set of inducing
// states. Hyperparameters are stored in log space.
//
// Layouts: states are (state_dim x n), targets are (goal_dim x n).

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hidi/errors.hpp"
#include "hidi/nn.hpp"

namespace hidi {

inline constexpr double kSigmaFloor = 1e-4;
inline constexpr double kLog2Pi = 1.8378770664093453;  // log(2 pi)

struct GpHyper {
  double log_gamma = 0.0;
  double log_ell = 0.0;
  double log_sigma = std::log(0.1);

  double gamma() const { return std::exp(log_gamma); }
  double ell() const { return std::exp(log_ell); }
  double sigma() const { return std::max(std::exp(log_sigma), kSigmaFloor); }
  bool sigma_floored() const { return std::exp(log_sigma) < kSigmaFloor; }

  static GpHyper from_natural(double gamma, double ell, double sigma) {
    return {std::log(gamma), std::log(ell), std::log(sigma)};
  }
};

/// gamma^2 exp(-||a - b||^2 / (2 ell^2))
inline double rbf_kernel(const Vec& a, const Vec& b, const GpHyper& h) {
  if (a.size() != b.size()) throw config_error("rbf_kernel: dimension mismatch");
  const double l = h.ell();
  return h.gamma() * h.gamma() * std::exp(-(a - b).squaredNorm() / (2.0 * l * l));
}

inline Mat squared_distances(const Mat& a, const Mat& b) {
  const Vec an = a.colwise().squaredNorm().transpose();
  const Vec bn = b.colwise().squaredNorm().transpose();
  Mat d = -2.0 * a.transpose() * b;
  d.colwise() += an;
  d.rowwise() += bn.transpose();
  return d.cwiseMax(0.0);
}

/// Gram matrix K(a_i, b_j) between the columns of a and b.
inline Mat kernel_matrix(const Mat& a, const Mat& b, const GpHyper& h) {
  if (a.rows() != b.rows()) throw config_error("kernel_matrix: dimension mismatch");
  const double l = h.ell();
  const double g2 = h.gamma() * h.gamma();
  return (g2 * (-squared_distances(a, b) / (2.0 * l * l)).array().exp()).matrix();
}

/// Cholesky of `a + jitter I`, escalating through `ladder` until it succeeds.
struct RobustCholesky {
  Eigen::LLT<Mat> llt;
  double jitter = 0.0;
};

inline RobustCholesky robust_cholesky(const Mat& a, std::initializer_list<double> ladder) {
  const Mat eye = Mat::Identity(a.rows(), a.cols());
  for (double j : ladder) {
    RobustCholesky rc;
    rc.llt.compute(a + j * eye);
    if (rc.llt.info() == Eigen::Success) {
      // Accept only factors whose smallest pivot is not lost in rounding.
      const Vec d = rc.llt.matrixLLT().diagonal();
      const double floor = 1e-6 * std::sqrt(std::max(a.diagonal().maxCoeff(), 0.0) + j);
      if (d.allFinite() && (d.array() > floor).all()) {
        rc.jitter = j;
        return rc;
      }
    }
  }
  throw numerical_error("Cholesky failed after jitter escalation to " + std::to_string(*(ladder.end() - 1)));
}

/// Value and gradients of a GP negative log marginal likelihood.
struct GpNll {
  double value = 0.0;
  std::array<double, 3> d_log_hyper{};  // d/d{log_gamma, log_ell, log_sigma}
  Mat d_inducing;                        // sparse model only
};

/// Exact GP NLL summed over target coordinates:
///   sum_p 1/2 g_p^T C^-1 g_p + 1/2 log|C| + n/2 log 2 pi,  C = K_N + sigma^2 I.
inline GpNll full_gp_nll(const Mat& states, const Mat& targets, const GpHyper& h) {
  const Eigen::Index n = states.cols();
  if (n < 1) throw usage_error("full_gp_nll needs at least one point");
  if (targets.cols() != n) throw config_error("full_gp_nll: state/target count mismatch");
  const double s2 = h.sigma() * h.sigma();
  const Mat kf = kernel_matrix(states, states, h);
  const Mat c = kf + s2 * Mat::Identity(n, n);
  const auto chol = robust_cholesky(c, {0.0, 1e-6, 1e-5, 1e-4});
  const Mat alpha = chol.llt.solve(targets.transpose());  // n x p
  const double p = static_cast<double>(targets.rows());
  const double logdet = 2.0 * chol.llt.matrixLLT().diagonal().array().log().sum();
  GpNll out;
  out.value = 0.5 * (targets.transpose().cwiseProduct(alpha)).sum() + 0.5 * p * logdet +
              0.5 * p * static_cast<double>(n) * kLog2Pi;
  // dNLL = 1/2 tr(W dC),  W = p C^-1 - alpha alpha^T
  const Mat w = p * chol.llt.solve(Mat::Identity(n, n)) - alpha * alpha.transpose();
  const double l = h.ell();
  const Mat d2 = squared_distances(states, states);
  out.d_log_hyper[0] = 0.5 * (w.cwiseProduct(2.0 * kf)).sum();
  out.d_log_hyper[1] = 0.5 * (w.cwiseProduct(kf.cwiseProduct(d2) / (l * l))).sum();
  out.d_log_hyper[2] = h.sigma_floored() ? 0.0 : 0.5 * w.trace() * 2.0 * s2;
  return out;
}

struct GpPrediction {
  Vec mean;
  double variance = 0.0;
};

/// FITC sparse GP with learnable inducing states.
///
/// The parameter store holds "gp/log_gamma", "gp/log_ell", "gp/log_sigma"
/// (1x1) and "gp/inducing" (state_dim x M). The conditioning set is replaced
/// wholesale with set_conditioning(); fit_caches() must run after any change
/// to parameters or data before predicting.
class SparseGpModel {
 public:
  SparseGpModel() = default;
  SparseGpModel(int state_dim, int goal_dim, int n_inducing, GpHyper hyper = {})
      : state_dim_(state_dim), goal_dim_(goal_dim) {
    if (state_dim < 1 || goal_dim < 1 || n_inducing < 1)
      throw config_error("sparse GP needs positive dimensions and at least one inducing state");
    params_.add("gp/log_gamma", Mat::Constant(1, 1, hyper.log_gamma));
    params_.add("gp/log_ell", Mat::Constant(1, 1, hyper.log_ell));
    params_.add("gp/log_sigma", Mat::Constant(1, 1, hyper.log_sigma));
    params_.add("gp/inducing", Mat::Zero(state_dim, n_inducing));
  }

  int state_dim() const { return state_dim_; }
  int goal_dim() const { return goal_dim_; }
  int inducing_count() const { return static_cast<int>(params_.value(kInducing).cols()); }

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  GpHyper hyper() const {
    return {params_.value(kLogGamma)(0, 0), params_.value(kLogEll)(0, 0),
            params_.value(kLogSigma)(0, 0)};
  }
  void set_hyper(const GpHyper& h) {
    params_.value_mut(kLogGamma)(0, 0) = h.log_gamma;
    params_.value_mut(kLogEll)(0, 0) = h.log_ell;
    params_.value_mut(kLogSigma)(0, 0) = h.log_sigma;
  }

  const Mat& inducing() const { return params_.value(kInducing); }
  void set_inducing(const Mat& z) {
    if (z.rows() != state_dim_ || z.cols() != inducing_count())
      throw config_error("inducing states have the wrong shape");
    params_.value_mut(kInducing) = z;
  }

  void set_conditioning(Mat states, Mat targets) {
    if (states.rows() != state_dim_ || targets.rows() != goal_dim_ || states.cols() != targets.cols())
      throw config_error("conditioning set has the wrong shape");
    if (states.cols() < 1) throw usage_error("conditioning set is empty");
    cond_states_ = std::move(states);
    cond_targets_ = std::move(targets);
    ++data_version_;
  }
  const Mat& conditioning_states() const { return cond_states_; }
  const Mat& conditioning_targets() const { return cond_targets_; }

  /// Smallest diagonal jitter tried on K_M; the ladder escalates by 10x twice.
  double base_jitter() const { return base_jitter_; }
  void set_base_jitter(double j) {
    if (!(j > 0.0)) throw config_error("GP jitter must be positive");
    base_jitter_ = j;
    fitted_ = false;
  }

  bool caches_fresh() const {
    return fitted_ && fit_param_version_ == params_.version() && fit_data_version_ == data_version_;
  }

  /// Builds K_M, K_MN, Lambda, Q_M and the factors used for prediction.
  void fit_caches() {
    if (cond_states_.cols() < 1) throw usage_error("conditioning set is empty");
    const GpHyper h = hyper();
    const Mat& z = inducing();
    const Eigen::Index m = z.cols();
    const double g2 = h.gamma() * h.gamma();
    const double s2 = h.sigma() * h.sigma();

    k_m_ = kernel_matrix(z, z, h);
    auto chol = robust_cholesky(k_m_, {0.0, base_jitter_, 10.0 * base_jitter_, 100.0 * base_jitter_});
    jitter_ = chol.jitter;
    l_m_ = chol.llt.matrixL();
    k_mn_ = kernel_matrix(z, cond_states_, h);
    v_ = l_m_.triangularView<Eigen::Lower>().solve(k_mn_);
    lambda_ = (Vec::Constant(cond_states_.cols(), g2) - v_.colwise().squaredNorm().transpose())
                  .cwiseMax(0.0);
    d_inv_ = (lambda_.array() + s2).inverse().matrix();

    const Mat vd = v_ * d_inv_.asDiagonal();
    Mat b = Mat::Identity(m, m) + vd * v_.transpose();
    l_b_.compute(b);
    if (l_b_.info() != Eigen::Success) throw numerical_error("Cholesky of I + V D^-1 V^T failed");
    q_m_ = k_m_ + jitter_ * Mat::Identity(m, m) + k_mn_ * d_inv_.asDiagonal() * k_mn_.transpose();

    // Q_M^-1 K_MN D^-1 G^T = L^-T B^-1 V D^-1 G^T
    const Mat rhs = vd * cond_targets_.transpose();
    weights_ = l_m_.transpose().triangularView<Eigen::Upper>().solve(l_b_.solve(rhs));

    fit_param_version_ = params_.version();
    fit_data_version_ = data_version_;
    fitted_ = true;
  }

  /// Predictive mean per subgoal coordinate and shared variance at each column.
  void predict(const Mat& query, Mat& mean, Vec& variance) const {
    require_fresh();
    if (query.rows() != state_dim_) throw config_error("query state has the wrong dimension");
    const GpHyper h = hyper();
    const Mat ks = kernel_matrix(inducing(), query, h);  // M x q
    mean = weights_.transpose() * ks;
    const Mat a = l_m_.triangularView<Eigen::Lower>().solve(ks);
    const Mat c = l_b_.matrixL().solve(a);
    const double g2 = h.gamma() * h.gamma();
    const double s2 = h.sigma() * h.sigma();
    variance = (Vec::Constant(query.cols(), g2) - a.colwise().squaredNorm().transpose() +
                c.colwise().squaredNorm().transpose())
                   .array()
                   .max(0.0)
                   .matrix();
    variance.array() += s2;
  }

  GpPrediction predict(const Vec& s) const {
    Mat mean;
    Vec var;
    predict(Mat(s), mean, var);
    return {mean.col(0), var(0)};
  }

  /// FITC negative log marginal likelihood of the conditioning set,
  ///   sum_p N(g_p | 0, Q_NN + Lambda + sigma^2 I),
  /// with gradients added (times `weight`) into the store for the three
  /// hyperparameters and the inducing states.
  GpNll marginal_nll(double weight = 1.0) {
    require_fresh();
    const GpHyper h = hyper();
    const Eigen::Index n = cond_states_.cols();
    const double p = static_cast<double>(goal_dim_);
    const double g2 = h.gamma() * h.gamma();
    const double s2 = h.sigma() * h.sigma();
    const double l = h.ell();

    // C^-1 = D^-1 - D^-1 V^T B^-1 V D^-1   (Woodbury)
    const Mat vd = v_ * d_inv_.asDiagonal();  // M x N
    const Mat binv_vd = l_b_.solve(vd);
    Mat c_inv = -vd.transpose() * binv_vd;
    c_inv.diagonal() += d_inv_;
    const Mat alpha = c_inv * cond_targets_.transpose();  // N x p
    const double logdet = d_inv_.array().log().sum() * -1.0 +
                          2.0 * Vec(l_b_.matrixLLT().diagonal()).array().log().sum();

    GpNll out;
    out.value = 0.5 * (cond_targets_.transpose().cwiseProduct(alpha)).sum() + 0.5 * p * logdet +
                0.5 * p * static_cast<double>(n) * kLog2Pi;

    // dNLL = 1/2 [tr(W~ dQ_NN) + sum_n W_nn dK_nn + tr(W) d sigma^2],
    // W = p C^-1 - alpha alpha^T, W~ = W without its diagonal.
    const Mat w = p * c_inv - alpha * alpha.transpose();
    Mat w_off = w;
    w_off.diagonal().setZero();
    // A = K_M^-1 K_MN ; tr(W~ dQ) = 2 tr(A W~ dK_NM) - tr(A W~ A^T dK_M)
    const Mat a = l_m_.transpose().triangularView<Eigen::Upper>().solve(v_);  // M x N
    const Mat g_nm = 2.0 * (w_off * a.transpose());                             // N x M
    const Mat g_mm = -(a * w_off * a.transpose());                              // M x M

    const Mat& z = inducing();
    const Mat d2_nm = squared_distances(cond_states_, z);  // N x M
    const Mat d2_mm = squared_distances(z, z);
    const Mat k_nm = k_mn_.transpose();

    double dlg = 0.0, dll = 0.0;
    // K_NM and K_M entries scale with gamma^2; jitter does not.
    dlg += (g_nm.cwiseProduct(2.0 * k_nm)).sum() + (g_mm.cwiseProduct(2.0 * k_m_)).sum();
    dlg += w.diagonal().sum() * 2.0 * g2;
    dll += (g_nm.cwiseProduct(k_nm.cwiseProduct(d2_nm))).sum() / (l * l) +
           (g_mm.cwiseProduct(k_m_.cwiseProduct(d2_mm))).sum() / (l * l);
    const double dls = h.sigma_floored() ? 0.0 : w.trace() * 2.0 * s2;
    out.d_log_hyper = {0.5 * dlg, 0.5 * dll, 0.5 * dls};

    // dK(s_n, z_m)/dz_m = K (s_n - z_m) / l^2 ; K_M depends on z at both ends.
    const Eigen::Index m = z.cols();
    out.d_inducing = Mat::Zero(state_dim_, m);
    const Mat coef_nm = g_nm.cwiseProduct(k_nm) / (l * l);  // N x M
    const Mat coef_mm = g_mm.cwiseProduct(k_m_) / (l * l);  // M x M (symmetric)
    for (Eigen::Index j = 0; j < m; ++j) {
      Vec acc = cond_states_ * coef_nm.col(j) - z.col(j) * coef_nm.col(j).sum();
      acc += 2.0 * (z * coef_mm.col(j) - z.col(j) * coef_mm.col(j).sum());
      out.d_inducing.col(j) = 0.5 * acc;
    }

    if (weight != 0.0) {
      params_.grad(kLogGamma)(0, 0) += weight * out.d_log_hyper[0];
      params_.grad(kLogEll)(0, 0) += weight * out.d_log_hyper[1];
      params_.grad(kLogSigma)(0, 0) += weight * out.d_log_hyper[2];
      params_.grad(kInducing) += weight * out.d_inducing;
    }
    return out;
  }

  // Cache views.
  const Mat& k_m() const { return k_m_; }
  const Mat& k_mn() const { return k_mn_; }
  const Vec& lambda() const { return lambda_; }
  const Mat& q_m() const { return q_m_; }
  double jitter() const { return jitter_; }

 private:
  static constexpr std::size_t kLogGamma = 0, kLogEll = 1, kLogSigma = 2, kInducing = 3;

  void require_fresh() const {
    if (!caches_fresh()) throw usage_error("sparse GP caches are stale; call fit_caches()");
  }

  int state_dim_ = 0;
  int goal_dim_ = 0;
  ParamStore params_;
  Mat cond_states_;
  Mat cond_targets_;
  std::uint64_t data_version_ = 0;

  bool fitted_ = false;
  std::uint64_t fit_param_version_ = 0;
  std::uint64_t fit_data_version_ = 0;
  double jitter_ = 0.0;
  double base_jitter_ = 1e-6;
  Mat k_m_, l_m_, k_mn_, v_, q_m_, weights_;
  Vec lambda_, d_inv_;
  Eigen::LLT<Mat> l_b_;
};

inline void sparse_fit_caches(SparseGpModel& model) { model.fit_caches(); }

inline GpPrediction sparse_predict(const SparseGpModel& model, const Vec& s) {
  return model.predict(s);
}

inline GpNll sparse_marginal_nll(SparseGpModel& model, double weight = 1.0) {
  return model.marginal_nll(weight);
}

/// Picks M distinct columns of `states` uniformly at random as inducing states.
inline Mat choose_inducing(const Mat& states, int m, Rng& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(states.cols()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<Eigen::Index>(i);
  std::shuffle(idx.begin(), idx.end(), rng);
  Mat z(states.rows(), m);
  for (int j = 0; j < m; ++j) z.col(j) = states.col(idx[static_cast<std::size_t>(j) % idx.size()]);
  return z;
}

/// Predictive-form regularizer on generated subgoals:
///   mean_n [ ||g_n - mu_n||^2 / (2 s_n) + D/2 log(2 pi s_n) ],  s_n = sigma*^2(s_n).
/// `d_goals` is the gradient w.r.t. the subgoals, (g_n - mu_n) / (s_n B).
struct GpRegLoss {
  double value = 0.0;
  Mat d_goals;
  Mat mean;
  Vec variance;
};

inline GpRegLoss gp_reg_loss(const Mat& states, const Mat& goals, const SparseGpModel& model) {
  if (goals.cols() != states.cols()) throw config_error("gp_reg_loss: one subgoal per state");
  GpRegLoss out;
  model.predict(states, out.mean, out.variance);
  const double b = static_cast<double>(goals.cols());
  const double d = static_cast<double>(goals.rows());
  const Mat resid = goals - out.mean;
  double total = 0.0;
  for (Eigen::Index c = 0; c < goals.cols(); ++c) {
    const double v = out.variance(c);
    total += resid.col(c).squaredNorm() / (2.0 * v) + 0.5 * d * (kLog2Pi + std::log(v));
  }
  out.value = total / b;
  out.d_goals = resid * (out.variance.cwiseInverse() / b).asDiagonal();
  return out;
}

}  // namespace hidi
