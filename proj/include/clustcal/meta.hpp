#pragma once

// Univariate and bivariate random-effects meta-analysis with REML
// heterogeneity estimates.

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clustcal/core.hpp"
#include "clustcal/optim.hpp"
#include "clustcal/stats.hpp"

namespace clustcal {

struct EffectEstimate {
  double theta = 0.0;
  double var_within = 0.0;
  std::string label;
};

enum class CiMethod { normal, hksj };
enum class PiMethod { t_based, normal, none };

inline const char* to_string(CiMethod m) { return m == CiMethod::normal ? "normal" : "hksj"; }
inline const char* to_string(PiMethod m) {
  switch (m) {
    case PiMethod::t_based: return "t";
    case PiMethod::normal: return "normal";
    case PiMethod::none: return "none";
  }
  return "";
}

struct MetaResult {
  double mu = 0.0;
  double se_mu = 0.0;
  double tau2 = 0.0;
  std::size_t k = 0;
  Interval ci;
  std::optional<Interval> pi;
  CiMethod ci_method = CiMethod::normal;
  PiMethod pi_method = PiMethod::none;
  bool wide_interval_warning = false;
};

namespace detail {

inline void require_effects(std::span<const EffectEstimate> effects, std::size_t min_k) {
  if (effects.size() < min_k) {
    throw Error(ErrorKind::invalid_argument, format("meta-analysis needs at least %zu effects, got %zu", min_k, effects.size()));
  }
  for (const auto& e : effects) {
    if (!(e.var_within > 0.0) || !std::isfinite(e.var_within) || !std::isfinite(e.theta)) {
      throw Error(ErrorKind::invalid_argument, "effect estimates need finite theta and positive finite variance");
    }
  }
}

inline double weighted_mean(std::span<const EffectEstimate> effects, double tau2, double* sum_w = nullptr) {
  double sw = 0.0, swt = 0.0;
  for (const auto& e : effects) {
    const double w = 1.0 / (e.var_within + tau2);
    sw += w;
    swt += w * e.theta;
  }
  if (sum_w) *sum_w = sw;
  return swt / sw;
}

}  // namespace detail

/// Restricted log-likelihood of tau^2 (additive constants dropped).
inline double restricted_loglik(std::span<const EffectEstimate> effects, double tau2) {
  double sw = 0.0;
  const double mu = detail::weighted_mean(effects, tau2, &sw);
  double ll = -0.5 * std::log(sw);
  for (const auto& e : effects) {
    const double v = e.var_within + tau2;
    ll -= 0.5 * std::log(v) + 0.5 * (e.theta - mu) * (e.theta - mu) / v;
  }
  return ll;
}

/// REML estimate of tau^2 over [0, 10 * var(theta)].
inline double reml_tau2(std::span<const EffectEstimate> effects) {
  detail::require_effects(effects, 2);
  std::vector<double> thetas;
  thetas.reserve(effects.size());
  for (const auto& e : effects) thetas.push_back(e.theta);
  const double upper = 10.0 * sample_variance(thetas);
  if (!(upper > 0.0)) return 0.0;
  const auto best = optim::minimize_bounded([&](double t) { return -restricted_loglik(effects, t); }, 0.0, upper, 61);
  return best.x;
}

/// Hartung-Knapp-Sidik-Jonkman interval mu +/- t_{k-1} sqrt(q).
struct HksjInterval {
  Interval ci;
  double se = 0.0;
  bool wide_interval_warning = false;
};

inline HksjInterval hksj_ci(std::span<const EffectEstimate> effects, double tau2, double mu, double level) {
  detail::require_effects(effects, 2);
  double sw = 0.0, num = 0.0;
  for (const auto& e : effects) {
    const double w = 1.0 / (e.var_within + tau2);
    sw += w;
    num += w * (e.theta - mu) * (e.theta - mu);
  }
  const double k = static_cast<double>(effects.size());
  HksjInterval out;
  out.se = std::sqrt(num / ((k - 1.0) * sw));
  const double t = stats::t_critical(level, k - 1.0);
  out.ci = {mu - t * out.se, mu + t * out.se};
  out.wide_interval_warning = effects.size() == 2;
  return out;
}

/// Inverse-variance pooled effect with weights 1/(tau^2 + sigma_j^2).
inline MetaResult pool(std::span<const EffectEstimate> effects, double tau2, CiMethod ci_method = CiMethod::normal,
                       double level = 0.95) {
  detail::require_effects(effects, 2);
  MetaResult r;
  r.k = effects.size();
  r.tau2 = tau2;
  r.ci_method = ci_method;
  double sw = 0.0;
  r.mu = detail::weighted_mean(effects, tau2, &sw);
  if (ci_method == CiMethod::normal) {
    r.se_mu = 1.0 / std::sqrt(sw);
    const double z = stats::normal_critical(level);
    r.ci = {r.mu - z * r.se_mu, r.mu + z * r.se_mu};
  } else {
    const auto h = hksj_ci(effects, tau2, r.mu, level);
    r.se_mu = h.se;
    r.ci = h.ci;
    r.wide_interval_warning = h.wide_interval_warning;
  }
  return r;
}

/// Prediction interval mu +/- c sqrt(tau^2 + se_mu^2) with c = t_{k-2} or z.
inline Interval prediction_interval(const MetaResult& meta, PiMethod method = PiMethod::t_based, double level = 0.95) {
  double c = 0.0;
  switch (method) {
    case PiMethod::t_based:
      if (meta.k < 3) {
        throw Error(ErrorKind::invalid_argument,
                    "t-based prediction interval needs at least 3 effects; use the normal method or no interval");
      }
      c = stats::t_critical(level, static_cast<double>(meta.k) - 2.0);
      break;
    case PiMethod::normal: c = stats::normal_critical(level); break;
    case PiMethod::none: throw Error(ErrorKind::invalid_argument, "no prediction interval requested");
  }
  const double hw = c * std::sqrt(meta.tau2 + meta.se_mu * meta.se_mu);
  return {meta.mu - hw, meta.mu + hw};
}

/// REML + pooling + optional prediction interval in one call.
inline MetaResult random_effects_meta(std::span<const EffectEstimate> effects, CiMethod ci_method = CiMethod::normal,
                                      PiMethod pi_method = PiMethod::t_based, double level = 0.95) {
  MetaResult r = pool(effects, reml_tau2(effects), ci_method, level);
  r.pi_method = pi_method;
  if (pi_method == PiMethod::normal || (pi_method == PiMethod::t_based && r.k >= 3)) {
    r.pi = prediction_interval(r, pi_method, level);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Bivariate

struct BivariatePoint {
  Eigen::Vector2d theta;
  Eigen::Matrix2d sigma;
  std::size_t n = 0;
  std::string label;
};

struct BivariateMetaResult {
  Eigen::Vector2d mu;
  Eigen::Matrix2d cov_mu;
  Eigen::Matrix2d omega;
  std::size_t k = 0;
  Interval ci_y;
  Interval pi_y;
  double restricted_loglik = 0.0;
  bool converged = true;

  double between_correlation() const {
    const double d = std::sqrt(omega(0, 0) * omega(1, 1));
    return d > 0 ? omega(0, 1) / d : 0.0;
  }
};

struct BivariateOptions {
  /// Constrain the between-cluster covariance to be diagonal.
  bool diagonal_omega = false;
  double level = 0.95;
  /// Prediction-interval quantile: t with k-2 df or normal.
  PiMethod pi_method = PiMethod::t_based;
};

/// Floors the eigenvalues of a symmetric 2x2 matrix at `floor`.
inline Eigen::Matrix2d regularize_psd(const Eigen::Matrix2d& m, double floor = 1e-10) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(0.5 * (m + m.transpose()));
  const Eigen::Vector2d ev = es.eigenvalues().cwiseMax(floor);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

/// Restricted log-likelihood of the bivariate model at between-cluster
/// covariance `omega` (additive constants dropped).
inline double bivariate_restricted_loglik(std::span<const BivariatePoint> points, const Eigen::Matrix2d& omega,
                                          Eigen::Vector2d* mu_out = nullptr, Eigen::Matrix2d* cov_out = nullptr) {
  Eigen::Matrix2d sum_inv = Eigen::Matrix2d::Zero();
  Eigen::Vector2d sum_inv_theta = Eigen::Vector2d::Zero();
  double ll = 0.0;
  std::vector<Eigen::Matrix2d> inverses(points.size());
  for (std::size_t j = 0; j < points.size(); ++j) {
    const Eigen::Matrix2d V = points[j].sigma + omega;
    const double det = V.determinant();
    if (!(det > 0.0)) return -std::numeric_limits<double>::infinity();
    inverses[j] = V.inverse();
    ll -= 0.5 * std::log(det);
    sum_inv += inverses[j];
    sum_inv_theta += inverses[j] * points[j].theta;
  }
  const double det_sum = sum_inv.determinant();
  if (!(det_sum > 0.0)) return -std::numeric_limits<double>::infinity();
  const Eigen::Matrix2d cov = sum_inv.inverse();
  const Eigen::Vector2d mu = cov * sum_inv_theta;
  ll -= 0.5 * std::log(det_sum);
  for (std::size_t j = 0; j < points.size(); ++j) {
    const Eigen::Vector2d r = points[j].theta - mu;
    ll -= 0.5 * r.dot(inverses[j] * r);
  }
  if (mu_out) *mu_out = mu;
  if (cov_out) *cov_out = cov;
  return ll;
}

namespace detail {

/// Omega = L L' with L = [[e^a, 0], [b, e^c]].
inline Eigen::Matrix2d omega_from_params(std::span<const double> p, bool diagonal) {
  Eigen::Matrix2d L = Eigen::Matrix2d::Zero();
  L(0, 0) = std::exp(p[0]);
  if (diagonal) {
    L(1, 1) = std::exp(p[1]);
  } else {
    L(1, 0) = p[1];
    L(1, 1) = std::exp(p[2]);
  }
  return L * L.transpose();
}

}  // namespace detail

/// Bivariate random-effects meta-analysis with unstructured between-cluster
/// covariance, estimated by REML over its log-Cholesky factor.
inline BivariateMetaResult bivariate_reml(std::span<const BivariatePoint> points, const BivariateOptions& opt = {}) {
  if (points.size() < 3) throw Error(ErrorKind::invalid_argument, "bivariate meta-analysis needs at least 3 clusters");
  const std::size_t k = points.size();

  // Start values from the spread of the observed effects.
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (const auto& p : points) mean += p.theta / static_cast<double>(k);
  Eigen::Vector2d var = Eigen::Vector2d::Zero();
  for (const auto& p : points) var += (p.theta - mean).cwiseAbs2() / static_cast<double>(k - 1);
  const double floor_log = std::log(1e-7);
  auto log_sd = [&](double v) { return std::max(floor_log, 0.5 * std::log(std::max(v, 1e-8))); };

  auto objective = [&](const std::vector<double>& p) {
    return -bivariate_restricted_loglik(points, detail::omega_from_params(p, opt.diagonal_omega));
  };

  std::vector<std::vector<double>> starts;
  if (opt.diagonal_omega) {
    starts.push_back({log_sd(var(0) * 0.5), log_sd(var(1) * 0.5)});
    starts.push_back({floor_log + 2.0, floor_log + 2.0});
  } else {
    starts.push_back({log_sd(var(0) * 0.5), 0.0, log_sd(var(1) * 0.5)});
    starts.push_back({floor_log + 2.0, 0.0, floor_log + 2.0});
  }

  optim::NelderMeadOptions nm;
  nm.initial_step = 1.0;
  nm.value_spread = 1e-12;
  nm.x_tol = 1e-9;
  nm.max_evals = 6000;
  nm.restarts = 2;
  nm.lower.assign(starts.front().size(), -std::numeric_limits<double>::infinity());
  nm.lower[0] = floor_log;
  nm.lower.back() = floor_log;

  optim::NelderMeadResult best;
  for (const auto& s : starts) {
    auto r = optim::nelder_mead(objective, s, nm);
    if (r.value < best.value) best = std::move(r);
  }

  BivariateMetaResult out;
  out.k = k;
  out.converged = best.converged;
  out.omega = detail::omega_from_params(best.x, opt.diagonal_omega);
  out.restricted_loglik = bivariate_restricted_loglik(points, out.omega, &out.mu, &out.cov_mu);

  const double z = stats::normal_critical(opt.level);
  const double se = std::sqrt(out.cov_mu(0, 0));
  out.ci_y = {out.mu(0) - z * se, out.mu(0) + z * se};
  const double c = opt.pi_method == PiMethod::normal ? z : stats::t_critical(opt.level, static_cast<double>(k) - 2.0);
  const double hw = c * std::sqrt(out.omega(0, 0) + out.cov_mu(0, 0));
  out.pi_y = {out.mu(0) - hw, out.mu(0) + hw};
  return out;
}

}  // namespace clustcal
