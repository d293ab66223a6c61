#pragma once

// Logistic regression by IRLS, delta-method predictions, likelihood-ratio
// tests and knot-count selection for restricted cubic spline calibration.

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "clustcal/core.hpp"
#include "clustcal/smoothers.hpp"
#include "clustcal/stats.hpp"

namespace clustcal {

struct DesignSpec {
  enum class Kind { intercept_only, linear_logit, rcs };
  Kind kind = Kind::linear_logit;
  std::optional<KnotVector> knots;

  static DesignSpec intercept_only() { return {Kind::intercept_only, std::nullopt}; }
  static DesignSpec linear() { return {Kind::linear_logit, std::nullopt}; }
  static DesignSpec spline(KnotVector k) { return {Kind::rcs, std::move(k)}; }

  std::size_t columns() const {
    switch (kind) {
      case Kind::intercept_only: return 1;
      case Kind::linear_logit: return 2;
      case Kind::rcs: return knots->basis_size() + 1;
    }
    return 0;
  }

  /// Covariate row for one value on the logit scale.
  Eigen::VectorXd row(double x) const {
    switch (kind) {
      case Kind::intercept_only: return Eigen::VectorXd::Ones(1);
      case Kind::linear_logit: return Eigen::Vector2d(1.0, x);
      case Kind::rcs: return rcs_row(x, *knots);
    }
    return {};
  }

  Eigen::MatrixXd matrix(std::span<const double> x) const {
    Eigen::MatrixXd X(static_cast<Eigen::Index>(x.size()), static_cast<Eigen::Index>(columns()));
    for (std::size_t i = 0; i < x.size(); ++i) X.row(static_cast<Eigen::Index>(i)) = row(x[i]).transpose();
    return X;
  }
};

struct LogisticOptions {
  int max_iter = 50;
  double tol = 1e-8;
  int max_halvings = 10;
};

struct LogisticFit {
  Eigen::VectorXd coefficients;
  Eigen::MatrixXd covariance;
  double log_likelihood = 0.0;
  std::size_t n = 0;
  DesignSpec design;
  bool converged = false;
  bool separation_flag = false;
  int iterations = 0;
  /// Log-likelihood after every accepted step (first entry is the start).
  std::vector<double> loglik_trace;

  std::size_t parameters() const { return static_cast<std::size_t>(coefficients.size()); }
  Eigen::VectorXd standard_errors() const { return covariance.diagonal().cwiseMax(0.0).cwiseSqrt(); }
};

namespace detail {

inline double bernoulli_loglik(const Eigen::VectorXd& y, const Eigen::VectorXd& eta) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    // y*eta - log(1 + e^eta), written to avoid overflow.
    const double e = eta(i);
    const double log1pexp = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
    ll += y(i) * e - log1pexp;
  }
  return ll;
}

}  // namespace detail

/// Maximum-likelihood logistic regression. Outcomes may be fractional in
/// [0,1] (quasi-binomial responses). Step-halving guards each Newton step.
inline LogisticFit fit_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const LogisticOptions& opt = {},
                                DesignSpec design = DesignSpec::linear()) {
  if (X.rows() != y.size()) throw Error(ErrorKind::invalid_argument, "design rows and outcomes differ in length");
  if (X.cols() > X.rows()) throw Error(ErrorKind::degenerate, "more columns than rows in the design");
  {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    qr.setThreshold(1e-10);
    if (qr.rank() < X.cols()) throw Error(ErrorKind::degenerate, "rank-deficient design matrix");
  }
  const Eigen::Index p = X.cols();
  LogisticFit fit;
  fit.design = std::move(design);
  fit.n = static_cast<std::size_t>(X.rows());
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  {
    // Start from the marginal log-odds in the intercept.
    const double ybar = std::clamp(y.mean(), 1e-4, 1 - 1e-4);
    if (X.col(0).isApproxToConstant(1.0)) beta(0) = logit(ybar);
  }
  Eigen::VectorXd eta = X * beta;
  double ll = detail::bernoulli_loglik(y, eta);
  fit.loglik_trace.push_back(ll);

  Eigen::VectorXd mu(X.rows()), w(X.rows());
  Eigen::MatrixXd info(p, p);
  auto update_working = [&](const Eigen::VectorXd& e) {
    for (Eigen::Index i = 0; i < e.size(); ++i) {
      mu(i) = expit(e(i));
      w(i) = mu(i) * (1.0 - mu(i));
    }
    info.noalias() = X.transpose() * w.asDiagonal() * X;
  };
  update_working(eta);

  for (int it = 0; it < opt.max_iter; ++it) {
    const Eigen::VectorXd score = X.transpose() * (y - mu);
    if (score.cwiseAbs().maxCoeff() < opt.tol) {
      fit.converged = true;
      break;
    }
    const Eigen::VectorXd step = info.ldlt().solve(score);
    double t = 1.0;
    Eigen::VectorXd cand, cand_eta;
    double cand_ll = -std::numeric_limits<double>::infinity();
    int halvings = 0;
    for (; halvings <= opt.max_halvings; ++halvings) {
      cand = beta + t * step;
      cand_eta = X * cand;
      cand_ll = detail::bernoulli_loglik(y, cand_eta);
      if (std::isfinite(cand_ll) && cand_ll >= ll - 1e-12 * std::abs(ll)) break;
      t *= 0.5;
    }
    fit.iterations = it + 1;
    if (halvings > opt.max_halvings) break;
    const double change = std::abs(cand_ll - ll) / (std::abs(cand_ll) + 0.1);
    beta = cand;
    eta = cand_eta;
    ll = cand_ll;
    fit.loglik_trace.push_back(ll);
    update_working(eta);
    if (change < 1e-15) {
      fit.converged = true;
      break;
    }
  }
  if (!fit.converged) {
    const Eigen::VectorXd score = X.transpose() * (y - mu);
    fit.converged = score.cwiseAbs().maxCoeff() < opt.tol;
  }
  fit.coefficients = beta;
  fit.covariance = info.ldlt().solve(Eigen::MatrixXd::Identity(p, p));
  fit.covariance = 0.5 * (fit.covariance + fit.covariance.transpose()).eval();
  fit.log_likelihood = ll;
  const Eigen::VectorXd se = fit.standard_errors();
  fit.separation_flag = beta.cwiseAbs().maxCoeff() > 15.0 || se.maxCoeff() > 70.0 || !se.allFinite();
  return fit;
}

/// Fits `design` on logit-scale covariate values.
inline LogisticFit fit_logistic(const DesignSpec& design, std::span<const double> x, std::span<const double> y,
                                const LogisticOptions& opt = {}) {
  const Eigen::MatrixXd X = design.matrix(x);
  const Eigen::VectorXd yy = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  return fit_logistic(X, yy, opt, design);
}

struct PredictionWithSE {
  double logit_estimate = 0.0;
  double se_logit = 0.0;
};

inline PredictionWithSE predict_logit_se(const LogisticFit& fit, const Eigen::VectorXd& x0) {
  if (x0.size() != fit.coefficients.size()) throw Error(ErrorKind::invalid_argument, "covariate row has wrong dimension");
  return {x0.dot(fit.coefficients), std::sqrt(std::max(0.0, x0.dot(fit.covariance * x0)))};
}

/// Prediction at one logit-scale value using the fit's own design.
inline PredictionWithSE predict_logit_se(const LogisticFit& fit, double x) {
  return predict_logit_se(fit, fit.design.row(x));
}

struct LrTest {
  double statistic = 0.0;
  int df = 0;
  double p_value = 1.0;
};

inline LrTest lr_test(const LogisticFit& small, const LogisticFit& large) {
  if (small.parameters() >= large.parameters()) {
    throw Error(ErrorKind::invalid_argument, "likelihood-ratio test needs a smaller first model");
  }
  LrTest t;
  t.statistic = std::max(0.0, 2.0 * (large.log_likelihood - small.log_likelihood));
  t.df = static_cast<int>(large.parameters() - small.parameters());
  t.p_value = stats::chi2_upper(t.statistic, t.df);
  return t;
}

/// Minimum number of distinct covariate values for a k-knot candidate:
/// ten per spline degree of freedom.
inline std::size_t min_distinct_for_knots(int k) { return static_cast<std::size_t>(10 * (k - 1)); }

struct KnotSelection {
  int knots = 3;
  LogisticFit fit;
  std::vector<int> candidates;
  std::vector<LrTest> tests;
};

/// Fits 3-, 4- and 5-knot spline calibration models (those the data
/// support) and returns the smallest knot count that no larger candidate
/// improves on at level `alpha` by a likelihood-ratio test.
inline KnotSelection select_rcs_knots(std::span<const double> logit_p, std::span<const double> y, double alpha = 0.05) {
  const std::size_t distinct = count_distinct(std::vector<double>(logit_p.begin(), logit_p.end()));
  std::vector<std::pair<int, LogisticFit>> fits;
  for (int k = 3; k <= 5; ++k) {
    if (distinct < min_distinct_for_knots(k)) break;
    try {
      auto f = fit_logistic(DesignSpec::spline(place_knots(logit_p, k)), logit_p, y);
      if (!f.converged) continue;
      fits.emplace_back(k, std::move(f));
    } catch (const Error&) {
      continue;
    }
  }
  if (fits.empty()) throw Error(ErrorKind::infeasible, "no feasible restricted cubic spline fit (even 3 knots)");
  KnotSelection sel;
  for (const auto& [k, f] : fits) sel.candidates.push_back(k);
  for (std::size_t i = 0; i < fits.size(); ++i) {
    bool improved = false;
    for (std::size_t j = i + 1; j < fits.size(); ++j) {
      const auto t = lr_test(fits[i].second, fits[j].second);
      sel.tests.push_back(t);
      if (t.p_value < alpha) improved = true;
    }
    if (!improved) {
      sel.knots = fits[i].first;
      sel.fit = fits[i].second;
      return sel;
    }
  }
  sel.knots = fits.back().first;
  sel.fit = fits.back().second;
  return sel;
}

}  // namespace clustcal
