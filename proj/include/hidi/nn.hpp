#pragma once

// Dense feed-forward networks with tape-based reverse mode and Adam.
//
// Batches are column-major: a (features x batch) matrix holds one sample per
// column. All arithmetic is double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hidi/errors.hpp"

namespace hidi {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Rng = std::mt19937_64;

struct ParamEntry {
  std::string name;
  Mat value;
  Mat grad;
  Mat adam_m;
  Mat adam_v;
  std::int64_t step_count = 0;
};

/// Ordered collection of named parameter arrays with gradients and Adam moments.
///
/// Every mutation of a value bumps `version()`, which lets tapes detect that
/// the parameters they were recorded against have changed.
class ParamStore {
 public:
  std::size_t add(std::string name, Mat value) {
    if (find(name) != npos) throw config_error("duplicate parameter '" + name + "'");
    ParamEntry e;
    e.name = std::move(name);
    e.grad = Mat::Zero(value.rows(), value.cols());
    e.adam_m = e.grad;
    e.adam_v = e.grad;
    e.value = std::move(value);
    entries_.push_back(std::move(e));
    ++version_;
    return entries_.size() - 1;
  }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  std::size_t find(const std::string& name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return i;
    return npos;
  }

  std::size_t index_of(const std::string& name) const {
    auto i = find(name);
    if (i == npos) throw config_error("missing parameter '" + name + "'");
    return i;
  }

  std::size_t size() const { return entries_.size(); }
  const ParamEntry& entry(std::size_t i) const { return entries_.at(i); }
  const std::vector<ParamEntry>& entries() const { return entries_; }

  const Mat& value(std::size_t i) const { return entries_.at(i).value; }
  const Mat& value(const std::string& name) const { return value(index_of(name)); }
  Mat& value_mut(std::size_t i) {
    ++version_;
    return entries_.at(i).value;
  }
  Mat& value_mut(const std::string& name) { return value_mut(index_of(name)); }

  Mat& grad(std::size_t i) { return entries_.at(i).grad; }
  const Mat& grad(std::size_t i) const { return entries_.at(i).grad; }
  Mat& grad(const std::string& name) { return grad(index_of(name)); }

  /// Optimizer access to the whole entry; counts as a mutation.
  ParamEntry& entry_mut(std::size_t i) {
    ++version_;
    return entries_.at(i);
  }

  std::uint64_t version() const { return version_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.grad.setZero();
  }

  /// Copies values (not gradients or moments) from a store with identical layout.
  void copy_values_from(const ParamStore& other) {
    check_layout(other);
    for (std::size_t i = 0; i < entries_.size(); ++i) entries_[i].value = other.entries_[i].value;
    ++version_;
  }

  /// this <- (1 - tau) * this + tau * other
  void polyak_from(const ParamStore& other, double tau) {
    check_layout(other);
    for (std::size_t i = 0; i < entries_.size(); ++i)
      entries_[i].value = (1.0 - tau) * entries_[i].value + tau * other.entries_[i].value;
    ++version_;
  }

  void check_layout(const ParamStore& other) const {
    if (other.entries_.size() != entries_.size())
      throw config_error("parameter store layouts differ");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = other.entries_[i];
      if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols())
        throw config_error("parameter store layouts differ at '" + a.name + "'");
    }
  }

 private:
  std::vector<ParamEntry> entries_;
  std::uint64_t version_ = 0;
};

enum class Activation { mish, relu, identity };
enum class OutputActivation { tanh_scaled, identity };

struct MlpSpec {
  std::vector<int> layer_widths;
  Activation activation = Activation::mish;
  OutputActivation output_activation = OutputActivation::identity;
  double output_scale = 1.0;  // only used by tanh_scaled

  int input_width() const { return layer_widths.front(); }
  int output_width() const { return layer_widths.back(); }
  int layer_count() const { return static_cast<int>(layer_widths.size()) - 1; }

  void validate() const {
    if (layer_widths.size() < 2) throw config_error("MlpSpec needs at least two widths");
    for (int w : layer_widths)
      if (w < 1) throw config_error("MlpSpec widths must be >= 1");
    if (output_activation == OutputActivation::tanh_scaled && !(output_scale > 0.0))
      throw config_error("tanh_scaled output needs a positive scale");
  }
};

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// tanh(softplus(x)) = n(n + 2) / (n(n + 2) + 2) with n = e^x, which needs a
// single exponential. Above 20 the ratio is 1 to double precision.
inline constexpr double kMishCut = 20.0;

/// x * tanh(softplus(x))
inline double mish(double x) {
  const double n = std::exp(std::min(x, kMishCut));
  const double w = n * (n + 2.0);
  return x * w / (w + 2.0);
}

inline double mish_derivative(double x) {
  const double n = std::exp(std::min(x, kMishCut));
  const double w = n * (n + 2.0);
  const double t = w / (w + 2.0);
  return t + x * (1.0 - t * t) * n / (1.0 + n);
}

namespace detail {

inline Mat activate(const Mat& z, Activation a) {
  switch (a) {
    case Activation::mish: {
      const auto n = z.array().min(kMishCut).exp();
      const auto w = (n * (n + 2.0)).eval();
      return (z.array() * w / (w + 2.0)).matrix();
    }
    case Activation::relu: return z.cwiseMax(0.0);
    case Activation::identity: return z;
  }
  return z;
}

inline Mat activation_slope(const Mat& z, Activation a) {
  switch (a) {
    case Activation::mish: {
      const Eigen::ArrayXXd n = z.array().min(kMishCut).exp();
      const Eigen::ArrayXXd w = n * (n + 2.0);
      const Eigen::ArrayXXd t = w / (w + 2.0);
      return (t + z.array() * (1.0 - t.square()) * n / (1.0 + n)).matrix();
    }
    case Activation::relu: return (z.array() > 0.0).cast<double>().matrix();
    case Activation::identity: return Mat::Ones(z.rows(), z.cols());
  }
  return Mat::Ones(z.rows(), z.cols());
}

}  // namespace detail

/// A network layout bound to a name prefix; parameters live in a ParamStore
/// as "<prefix>/W<l>" (out x in) and "<prefix>/b<l>" (out x 1).
class Mlp {
 public:
  Mlp() = default;
  Mlp(MlpSpec spec, std::string prefix) : spec_(std::move(spec)), prefix_(std::move(prefix)) {
    spec_.validate();
  }

  const MlpSpec& spec() const { return spec_; }
  const std::string& prefix() const { return prefix_; }

  std::string weight_name(int l) const { return prefix_ + "/W" + std::to_string(l); }
  std::string bias_name(int l) const { return prefix_ + "/b" + std::to_string(l); }

  /// Registers parameters: weights uniform in +-1/sqrt(fan_in), biases zero.
  void init(ParamStore& store, Rng& rng) const {
    for (int l = 0; l < spec_.layer_count(); ++l) {
      const int in = spec_.layer_widths[l];
      const int out = spec_.layer_widths[l + 1];
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      std::uniform_real_distribution<double> u(-bound, bound);
      Mat w(out, in);
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = u(rng);
      store.add(weight_name(l), std::move(w));
      store.add(bias_name(l), Mat::Zero(out, 1));
    }
  }

  /// Resolves entry indices and checks shapes against the spec.
  std::vector<std::pair<std::size_t, std::size_t>> bind(const ParamStore& store) const {
    std::vector<std::pair<std::size_t, std::size_t>> idx;
    for (int l = 0; l < spec_.layer_count(); ++l) {
      auto wi = store.index_of(weight_name(l));
      auto bi = store.index_of(bias_name(l));
      const auto& w = store.value(wi);
      const auto& b = store.value(bi);
      if (w.rows() != spec_.layer_widths[l + 1] || w.cols() != spec_.layer_widths[l] ||
          b.rows() != spec_.layer_widths[l + 1] || b.cols() != 1)
        throw config_error("parameter shape mismatch in layer " + std::to_string(l) + " of '" +
                           prefix_ + "'");
      idx.emplace_back(wi, bi);
    }
    return idx;
  }

 private:
  MlpSpec spec_;
  std::string prefix_;
};

/// Everything needed to differentiate one forward pass.
struct MlpTape {
  const Mlp* net = nullptr;
  std::uint64_t store_version = 0;
  std::vector<std::pair<std::size_t, std::size_t>> params;
  std::vector<Mat> activations;  // activations[l] is the input to layer l
  std::vector<Mat> pre;          // pre[l] = W_l a_l + b_l
  Mat output;
};

inline MlpTape mlp_forward(const ParamStore& store, const Mlp& net, const Mat& input) {
  const auto& spec = net.spec();
  if (input.rows() != spec.input_width())
    throw config_error("mlp input has " + std::to_string(input.rows()) + " rows, expected " +
                       std::to_string(spec.input_width()));
  MlpTape tape;
  tape.net = &net;
  tape.store_version = store.version();
  tape.params = net.bind(store);
  const int layers = spec.layer_count();
  tape.activations.reserve(layers);
  tape.pre.reserve(layers);
  Mat a = input;
  for (int l = 0; l < layers; ++l) {
    const auto& w = store.value(tape.params[l].first);
    const auto& b = store.value(tape.params[l].second);
    Mat z = w * a;
    z.colwise() += b.col(0);
    tape.activations.push_back(std::move(a));
    if (l + 1 < layers) {
      a = detail::activate(z, spec.activation);
    } else if (spec.output_activation == OutputActivation::tanh_scaled) {
      a = spec.output_scale * z.array().tanh();
    } else {
      a = z;
    }
    tape.pre.push_back(std::move(z));
  }
  tape.output = std::move(a);
  return tape;
}

/// Forward pass without a tape. Wide inputs run in column blocks so the
/// hidden activations stay cache-resident.
inline Mat mlp_predict(const ParamStore& store, const Mlp& net, const Mat& input) {
  constexpr Eigen::Index kBlock = 256;
  if (input.cols() <= kBlock) return mlp_forward(store, net, input).output;
  Mat out(net.spec().layer_widths.back(), input.cols());
  for (Eigen::Index c = 0; c < input.cols(); c += kBlock) {
    const Eigen::Index w = std::min(kBlock, input.cols() - c);
    out.middleCols(c, w) = mlp_forward(store, net, input.middleCols(c, w)).output;
  }
  return out;
}

inline Vec mlp_predict(const ParamStore& store, const Mlp& net, const Vec& input) {
  return mlp_forward(store, net, Mat(input)).output.col(0);
}

/// Backpropagates `output_grad` through a recorded pass. Parameter gradients
/// are added into `store` when `accumulate` is set; the input gradient is
/// returned either way.
inline Mat mlp_backward(ParamStore& store, const MlpTape& tape, const Mat& output_grad,
                        bool accumulate = true) {
  if (tape.net == nullptr) throw usage_error("empty tape");
  if (tape.store_version != store.version())
    throw usage_error("stale tape: parameters of '" + tape.net->prefix() +
                      "' changed since the forward pass");
  if (output_grad.rows() != tape.output.rows() || output_grad.cols() != tape.output.cols())
    throw config_error("output gradient shape does not match the tape");
  const auto& spec = tape.net->spec();
  const int layers = spec.layer_count();
  Mat dz;
  if (spec.output_activation == OutputActivation::tanh_scaled) {
    const Mat t = tape.pre.back().array().tanh().matrix();
    dz = (output_grad.array() * spec.output_scale * (1.0 - t.array().square())).matrix();
  } else {
    dz = output_grad;
  }
  for (int l = layers - 1; l >= 0; --l) {
    const auto [wi, bi] = tape.params[l];
    if (accumulate) {
      store.grad(wi).noalias() += dz * tape.activations[l].transpose();
      store.grad(bi).col(0) += dz.rowwise().sum();
    }
    Mat da = store.value(wi).transpose() * dz;
    if (l == 0) return da;
    dz = (da.array() * detail::activation_slope(tape.pre[l - 1], spec.activation).array()).matrix();
  }
  return dz;  // unreachable for layer_count >= 1
}

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One Adam update over every entry, then zeroes the gradients.
///
/// Entries whose gradient is identically zero are left untouched (no moment
/// decay, no step increment), so a zero gradient is always the identity.
inline void adam_step(ParamStore& store, double lr, const AdamSettings& cfg = {}) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& g = store.grad(i);
    if (!g.allFinite())
      throw training_error(store.entry(i).name,
                           "non-finite gradient in parameter '" + store.entry(i).name + "'");
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (store.grad(i).isZero(0.0)) continue;
    auto& e = store.entry_mut(i);
    e.step_count += 1;
    e.adam_m = cfg.beta1 * e.adam_m + (1.0 - cfg.beta1) * e.grad;
    e.adam_v = cfg.beta2 * e.adam_v + (1.0 - cfg.beta2) * e.grad.cwiseProduct(e.grad);
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(e.step_count));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(e.step_count));
    e.value.array() -=
        lr * (e.adam_m.array() / c1) / ((e.adam_v.array() / c2).sqrt() + cfg.eps);
  }
  store.zero_grad();
}

/// Loss callback for gradient checking: returns the loss and adds its
/// gradient into the store's gradient buffers.
using LossFn = std::function<double(ParamStore&)>;

/// Largest relative disagreement between analytic gradients and central
/// differences over every scalar parameter:
///   |analytic - cd| / max(|analytic|, |cd|, floor).
inline double finite_diff_check(ParamStore& store, const LossFn& loss_fn, double h = 1e-5, double floor = 1e-8) {
  store.zero_grad();
  loss_fn(store);
  std::vector<Mat> analytic;
  analytic.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) analytic.push_back(store.grad(i));
  double worst = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    for (Eigen::Index k = 0; k < store.value(i).size(); ++k) {
      const double orig = store.value(i)(k);
      store.value_mut(i)(k) = orig + h;
      store.zero_grad();
      const double up = loss_fn(store);
      store.value_mut(i)(k) = orig - h;
      store.zero_grad();
      const double down = loss_fn(store);
      store.value_mut(i)(k) = orig;
      const double cd = (up - down) / (2.0 * h);
      const double a = analytic[i](k);
      const double denom = std::max({std::abs(a), std::abs(cd), floor});
      worst = std::max(worst, std::abs(a - cd) / denom);
    }
  }
  store.zero_grad();
  return worst;
}

}  // namespace hidi
