#pragma once

// Logistic GLMM with restricted cubic spline fixed effects and cluster-level
// random effects, fitted by the Laplace approximation.
//
// Random effects are written b_j = Lambda u_j with u_j ~ N(0, I) and Lambda
// lower triangular. For fixed Lambda the inner problem finds the joint mode
// of (beta, u) by penalised IRLS; the outer problem minimises the profiled
// Laplace deviance
//
//   -2 l(y | beta, u) + sum_j |u_j|^2 + sum_j log det(I + Lambda' Z_j' W_j Z_j Lambda)
//
// over the log-Cholesky parameters of Lambda.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clustcal/core.hpp"
#include "clustcal/dataset.hpp"
#include "clustcal/optim.hpp"
#include "clustcal/rng.hpp"
#include "clustcal/smoothers.hpp"
#include "clustcal/stats.hpp"

namespace clustcal {

enum class GlmmVariant { intercept, slope };

inline const char* to_string(GlmmVariant v) { return v == GlmmVariant::intercept ? "intercept" : "slope"; }

struct GlmmSpec {
  GlmmVariant variant = GlmmVariant::slope;
  /// Knots on the logit risk scale; placed at the pooled 3-knot quantiles
  /// when empty.
  std::optional<KnotVector> knots;
};

struct GlmmOptions {
  double tol = 1e-9;
  int max_outer = 4000;
  int max_inner = 60;
  double start_scale = 0.3;
  /// Evaluate at this Cholesky factor instead of optimising.
  std::optional<Eigen::MatrixXd> fixed_lambda;
};

/// Joint mode of (beta, u) for fixed Lambda, plus the Laplace pieces.
struct InnerSolution {
  Eigen::VectorXd beta;
  std::vector<Eigen::VectorXd> u;
  double cond_loglik = 0.0;
  double penalty = 0.0;
  double logdet = 0.0;
  Eigen::MatrixXd cov_beta;
  bool converged = false;
  int iterations = 0;

  double deviance() const { return -2.0 * cond_loglik + penalty + logdet; }
  /// Laplace approximation of the marginal log-likelihood.
  double laplace_loglik() const { return -0.5 * deviance(); }
};

/// Data of a GLMM in cluster blocks.
class GlmmProblem {
public:
  struct Block {
    Eigen::MatrixXd X;
    Eigen::MatrixXd Z;
    Eigen::VectorXd y;
  };

  GlmmProblem(std::vector<std::string> ids, std::vector<Block> blocks) : ids_(std::move(ids)), blocks_(std::move(blocks)) {
    if (blocks_.empty()) throw Error(ErrorKind::invalid_argument, "GLMM needs at least one cluster");
    p_ = blocks_.front().X.cols();
    r_ = blocks_.front().Z.cols();
    for (const auto& b : blocks_) {
      if (b.X.rows() == 0) throw Error(ErrorKind::invalid_argument, "GLMM cluster without observations");
      if (b.X.cols() != p_ || b.Z.cols() != r_ || b.Z.rows() != b.X.rows() || b.y.size() != b.X.rows()) {
        throw Error(ErrorKind::invalid_argument, "inconsistent GLMM blocks");
      }
    }
  }

  Eigen::Index fixed_dim() const { return p_; }
  Eigen::Index random_dim() const { return r_; }
  std::size_t n_clusters() const { return blocks_.size(); }
  const std::vector<std::string>& cluster_ids() const { return ids_; }
  const std::vector<Block>& blocks() const { return blocks_; }

  /// Penalised IRLS for the joint mode of (beta, u) at fixed Lambda.
  InnerSolution solve(const Eigen::MatrixXd& lambda, const InnerSolution* warm = nullptr, int max_iter = 60,
                      double tol = 1e-9) const {
    const std::size_t J = blocks_.size();
    InnerSolution s;
    if (warm && warm->beta.size() == p_) {
      s.beta = warm->beta;
      s.u = warm->u;
    } else {
      s.beta = Eigen::VectorXd::Zero(p_);
      double ysum = 0.0, n = 0.0;
      for (const auto& b : blocks_) {
        ysum += b.y.sum();
        n += static_cast<double>(b.y.size());
      }
      s.beta(0) = logit(std::clamp(ysum / n, 1e-4, 1 - 1e-4));
      s.u.assign(J, Eigen::VectorXd::Zero(r_));
    }
    std::vector<Eigen::MatrixXd> ZL(J);
    for (std::size_t j = 0; j < J; ++j) ZL[j] = blocks_[j].Z * lambda;

    auto objective = [&](const Eigen::VectorXd& beta, const std::vector<Eigen::VectorXd>& u, double* ll_out,
                         double* pen_out) {
      double ll = 0.0, pen = 0.0;
      for (std::size_t j = 0; j < J; ++j) {
        const Eigen::VectorXd eta = blocks_[j].X * beta + ZL[j] * u[j];
        const auto& y = blocks_[j].y;
        for (Eigen::Index i = 0; i < eta.size(); ++i) {
          const double e = eta(i);
          ll += y(i) * e - (e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e)));
        }
        pen += u[j].squaredNorm();
      }
      if (ll_out) *ll_out = ll;
      if (pen_out) *pen_out = pen;
      return ll - 0.5 * pen;
    };

    double ll = 0.0, pen = 0.0;
    double h = objective(s.beta, s.u, &ll, &pen);

    std::vector<Eigen::MatrixXd> A(J), B(J);
    std::vector<Eigen::LDLT<Eigen::MatrixXd>> Ainv(J);
    std::vector<Eigen::VectorXd> gu(J);
    Eigen::MatrixXd C(p_, p_);
    Eigen::VectorXd gb(p_);
    Eigen::MatrixXd S(p_, p_);

    auto assemble = [&]() {
      C.setZero();
      gb.setZero();
      for (std::size_t j = 0; j < J; ++j) {
        const auto& blk = blocks_[j];
        const Eigen::VectorXd eta = blk.X * s.beta + ZL[j] * s.u[j];
        Eigen::VectorXd mu(eta.size()), w(eta.size());
        for (Eigen::Index i = 0; i < eta.size(); ++i) {
          mu(i) = expit(eta(i));
          w(i) = mu(i) * (1.0 - mu(i));
        }
        const Eigen::VectorXd resid = blk.y - mu;
        const Eigen::MatrixXd WX = w.asDiagonal() * blk.X;
        C.noalias() += blk.X.transpose() * WX;
        gb.noalias() += blk.X.transpose() * resid;
        A[j] = ZL[j].transpose() * w.asDiagonal() * ZL[j];
        A[j].diagonal().array() += 1.0;
        B[j] = ZL[j].transpose() * WX;
        gu[j] = ZL[j].transpose() * resid - s.u[j];
        Ainv[j].compute(A[j]);
      }
      S = C;
      for (std::size_t j = 0; j < J; ++j) S.noalias() -= B[j].transpose() * Ainv[j].solve(B[j]);
    };

    auto max_gradient = [&]() {
      double g = gb.cwiseAbs().maxCoeff();
      for (const auto& v : gu) g = std::max(g, v.size() ? v.cwiseAbs().maxCoeff() : 0.0);
      return g;
    };

    assemble();
    for (int it = 0; it < max_iter; ++it) {
      s.iterations = it;
      if (max_gradient() < tol) {
        s.converged = true;
        break;
      }
      Eigen::VectorXd rhs = gb;
      for (std::size_t j = 0; j < J; ++j) rhs.noalias() -= B[j].transpose() * Ainv[j].solve(gu[j]);
      const Eigen::VectorXd db = S.ldlt().solve(rhs);
      std::vector<Eigen::VectorXd> du(J);
      for (std::size_t j = 0; j < J; ++j) du[j] = Ainv[j].solve(gu[j] - B[j] * db);

      double t = 1.0;
      bool accepted = false;
      Eigen::VectorXd nb;
      std::vector<Eigen::VectorXd> nu(J);
      double nll = 0.0, npen = 0.0, nh = 0.0;
      for (int halving = 0; halving <= 10; ++halving) {
        nb = s.beta + t * db;
        for (std::size_t j = 0; j < J; ++j) nu[j] = s.u[j] + t * du[j];
        nh = objective(nb, nu, &nll, &npen);
        if (std::isfinite(nh) && nh >= h - 1e-12 * std::abs(h)) {
          accepted = true;
          break;
        }
        t *= 0.5;
      }
      if (!accepted) {
        throw Error(ErrorKind::infeasible, "penalised IRLS diverged after 10 step halvings");
      }
      const double change = std::abs(nh - h) / (std::abs(nh) + 0.1);
      s.beta = nb;
      s.u = std::move(nu);
      h = nh;
      ll = nll;
      pen = npen;
      assemble();
      if (change < 1e-15) {
        s.converged = max_gradient() < std::sqrt(tol);
        break;
      }
    }
    s.cond_loglik = ll;
    s.penalty = pen;
    s.logdet = 0.0;
    for (std::size_t j = 0; j < J; ++j) s.logdet += std::log(A[j].determinant());
    s.cov_beta = S.ldlt().solve(Eigen::MatrixXd::Identity(p_, p_));
    s.cov_beta = 0.5 * (s.cov_beta + s.cov_beta.transpose()).eval();
    return s;
  }

  /// Lower-triangular Lambda from log-Cholesky parameters (row-major lower
  /// triangle, diagonal entries on the log scale).
  Eigen::MatrixXd lambda_from_params(std::span<const double> theta) const {
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(r_, r_);
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < r_; ++i) {
      for (Eigen::Index j = 0; j <= i; ++j) L(i, j) = i == j ? std::exp(theta[k++]) : theta[k++];
    }
    return L;
  }

  std::vector<double> params_from_lambda(const Eigen::MatrixXd& L) const {
    std::vector<double> theta;
    for (Eigen::Index i = 0; i < r_; ++i) {
      for (Eigen::Index j = 0; j <= i; ++j) theta.push_back(i == j ? std::log(std::max(L(i, i), 1e-300)) : L(i, j));
    }
    return theta;
  }

private:
  std::vector<std::string> ids_;
  std::vector<Block> blocks_;
  Eigen::Index p_ = 0;
  Eigen::Index r_ = 0;
};

struct GlmmFit {
  GlmmSpec spec;
  KnotVector knots{std::vector<double>{-1.0, 0.0, 1.0}};
  Eigen::VectorXd beta;
  Eigen::MatrixXd cov_beta;
  Eigen::MatrixXd lambda;
  Eigen::MatrixXd sigma_re;
  std::vector<std::string> cluster_ids;
  std::map<std::string, Eigen::VectorXd> eb_modes;
  double laplace_deviance = 0.0;
  bool converged = false;
  bool boundary = false;
  int outer_evaluations = 0;
  std::vector<double> deviance_trace;
  std::vector<std::string> warnings;

  double laplace_loglik() const { return -0.5 * laplace_deviance; }

  /// Fixed-effect covariate row at a logit-scale risk.
  Eigen::VectorXd fixed_row(double logit_p) const { return rcs_row(logit_p, knots); }
  Eigen::VectorXd random_row(double logit_p) const {
    return spec.variant == GlmmVariant::intercept ? Eigen::VectorXd::Ones(1) : fixed_row(logit_p);
  }
};

namespace detail {

struct OuterResult {
  Eigen::MatrixXd lambda;
  InnerSolution inner;
  bool converged = false;
  int evaluations = 0;
  std::vector<double> trace;
};

/// Minimises the profiled Laplace deviance over Lambda.
inline OuterResult optimise_lambda(const GlmmProblem& problem, const GlmmOptions& opt) {
  OuterResult out;
  const Eigen::Index r = problem.random_dim();
  if (opt.fixed_lambda) {
    out.lambda = *opt.fixed_lambda;
    out.inner = problem.solve(out.lambda, nullptr, opt.max_inner, opt.tol);
    out.converged = out.inner.converged;
    out.trace.push_back(out.inner.deviance());
    return out;
  }
  InnerSolution warm = problem.solve(Eigen::MatrixXd::Zero(r, r), nullptr, opt.max_inner, opt.tol);
  auto deviance_at = [&](const Eigen::MatrixXd& L) {
    try {
      InnerSolution s = problem.solve(L, &warm, opt.max_inner, opt.tol);
      if (!s.converged) s = problem.solve(L, nullptr, opt.max_inner, opt.tol);
      const double d = s.deviance();
      if (std::isfinite(d)) warm = s;
      return d;
    } catch (const Error&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  if (r == 1) {
    // One scale parameter: bounded scalar search on lambda >= 0 directly.
    double best = std::numeric_limits<double>::infinity();
    auto f = [&](double lam) {
      const double d = deviance_at(Eigen::MatrixXd::Constant(1, 1, lam));
      ++out.evaluations;
      best = std::min(best, d);
      out.trace.push_back(best);
      return d;
    };
    const auto m = optim::minimize_bounded(f, 0.0, 10.0, 41, 40);
    out.lambda = Eigen::MatrixXd::Constant(1, 1, m.x);
    out.converged = true;
  } else {
    const auto start = problem.params_from_lambda(opt.start_scale * Eigen::MatrixXd::Identity(r, r));
    optim::NelderMeadOptions nm;
    nm.initial_step = 0.5;
    nm.value_spread = 1e-6;
    nm.x_tol = 1e-7;
    nm.max_evals = opt.max_outer;
    nm.restarts = 1;
    nm.lower.assign(start.size(), -std::numeric_limits<double>::infinity());
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < r; ++i) {
      for (Eigen::Index j = 0; j <= i; ++j, ++k) {
        if (i == j) nm.lower[k] = std::log(1e-6);
      }
    }
    const auto res = optim::nelder_mead([&](const std::vector<double>& th) { return deviance_at(problem.lambda_from_params(th)); },
                                        start, nm);
    out.lambda = problem.lambda_from_params(res.x);
    out.converged = res.converged;
    out.evaluations = res.evaluations;
    out.trace = res.trace;
  }
  out.inner = problem.solve(out.lambda, &warm, opt.max_inner, opt.tol);
  if (!out.inner.converged) out.inner = problem.solve(out.lambda, nullptr, opt.max_inner, opt.tol);
  return out;
}

}  // namespace detail

/// Groups the dataset rows by cluster into GLMM blocks.
inline GlmmProblem make_glmm_problem(const ClusteredDataset& ds, const KnotVector& knots, GlmmVariant variant) {
  std::vector<GlmmProblem::Block> blocks;
  blocks.reserve(ds.n_clusters());
  std::vector<double> lp, y;
  for (const auto& id : ds.cluster_ids()) {
    ds.cluster_data(id, lp, y);
    GlmmProblem::Block b;
    b.X = rcs_design(lp, knots);
    b.Z = variant == GlmmVariant::intercept ? Eigen::MatrixXd::Ones(b.X.rows(), 1) : b.X;
    b.y = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
    blocks.push_back(std::move(b));
  }
  return GlmmProblem(ds.cluster_ids(), std::move(blocks));
}

inline GlmmFit fit_glmm(const ClusteredDataset& ds, const GlmmSpec& spec = {}, const GlmmOptions& opt = {}) {
  if (ds.n_clusters() < 2) throw Error(ErrorKind::invalid_argument, "GLMM needs at least 2 clusters");
  GlmmFit fit;
  fit.spec = spec;
  fit.knots = spec.knots ? *spec.knots : place_knots(ds.logit_risks(), 3);
  fit.spec.knots = fit.knots;
  const GlmmProblem problem = make_glmm_problem(ds, fit.knots, spec.variant);
  auto outer = detail::optimise_lambda(problem, opt);

  fit.beta = outer.inner.beta;
  fit.cov_beta = outer.inner.cov_beta;
  fit.lambda = outer.lambda;
  fit.sigma_re = outer.lambda * outer.lambda.transpose();
  fit.laplace_deviance = outer.inner.deviance();
  fit.converged = outer.converged && outer.inner.converged;
  fit.outer_evaluations = outer.evaluations;
  fit.deviance_trace = std::move(outer.trace);
  fit.cluster_ids = ds.cluster_ids();
  for (std::size_t j = 0; j < problem.n_clusters(); ++j) {
    fit.eb_modes[problem.cluster_ids()[j]] = outer.lambda * outer.inner.u[j];
  }
  fit.boundary = (outer.lambda.diagonal().array() < 1e-4).any();
  if (fit.boundary) fit.warnings.push_back("random-effect covariance at the boundary (a Cholesky diagonal below 1e-4)");
  if (!fit.converged) fit.warnings.push_back("GLMM optimiser did not converge; best-found parameters returned");
  return fit;
}

/// Conditional modes of the random effects, b_j = Lambda u_j.
inline const std::map<std::string, Eigen::VectorXd>& eb_modes(const GlmmFit& fit) { return fit.eb_modes; }

struct GlmmCurve {
  std::vector<double> logit_estimate;
  std::vector<double> estimate;
  std::vector<double> lo;
  std::vector<double> hi;
};

/// Average-cluster curve (random effects at zero) with Wald bands.
inline GlmmCurve glmm_predict_average(const GlmmFit& fit, std::span<const double> logit_grid, double level = 0.95) {
  const double z = stats::normal_critical(level);
  GlmmCurve c;
  for (double x : logit_grid) {
    const Eigen::VectorXd row = fit.fixed_row(x);
    const double eta = row.dot(fit.beta);
    const double se = std::sqrt(std::max(0.0, row.dot(fit.cov_beta * row)));
    c.logit_estimate.push_back(eta);
    c.estimate.push_back(expit(eta));
    c.lo.push_back(expit(eta - z * se));
    c.hi.push_back(expit(eta + z * se));
  }
  return c;
}

/// Cluster-specific curve from beta plus that cluster's conditional mode.
inline GlmmCurve glmm_predict_cluster(const GlmmFit& fit, const std::string& cluster_id, std::span<const double> logit_grid) {
  const auto it = fit.eb_modes.find(cluster_id);
  if (it == fit.eb_modes.end()) throw Error(ErrorKind::unknown_cluster, "cluster '" + cluster_id + "' not in the GLMM fit");
  GlmmCurve c;
  for (double x : logit_grid) {
    const double eta = fit.fixed_row(x).dot(fit.beta) + fit.random_row(x).dot(it->second);
    c.logit_estimate.push_back(eta);
    c.estimate.push_back(expit(eta));
  }
  return c;
}

struct SimulatedBand {
  std::vector<double> grid;
  std::vector<double> lo;
  std::vector<double> hi;
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;
};

namespace detail {

/// Factor F with F F' = M for a symmetric PSD matrix (eigen-based so that
/// singular matrices are fine).
inline Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& M) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (M + M.transpose()));
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal();
}

}  // namespace detail

/// Simulation-based prediction band: beta* ~ N(beta, cov_beta) and
/// u* ~ N(0, Sigma) drawn independently, quantiles of the linear predictor
/// taken pointwise and mapped to probabilities.
inline SimulatedBand glmm_prediction_band(const GlmmFit& fit, std::span<const double> logit_grid, std::size_t n_samples,
                                          std::uint64_t seed, double level = 0.95) {
  if (n_samples < 100) throw Error(ErrorKind::invalid_argument, "prediction band needs at least 100 samples");
  const Eigen::MatrixXd Fb = detail::psd_factor(fit.cov_beta);
  const Eigen::MatrixXd Fu = detail::psd_factor(fit.sigma_re);
  const Eigen::Index p = fit.beta.size();
  const Eigen::Index r = fit.sigma_re.rows();
  const std::size_t G = logit_grid.size();

  std::vector<Eigen::VectorXd> xrows(G), zrows(G);
  for (std::size_t g = 0; g < G; ++g) {
    xrows[g] = fit.fixed_row(logit_grid[g]);
    zrows[g] = fit.random_row(logit_grid[g]);
  }
  std::vector<std::vector<double>> draws(G, std::vector<double>(n_samples));
  const rng::Stream stream(rng::derive(seed, {0x6c6d6d62616e64ULL}));
  Eigen::VectorXd zb(p), zu(r);
  for (std::size_t s = 0; s < n_samples; ++s) {
    rng::Engine eng(stream.substream(s));
    for (Eigen::Index i = 0; i < p; ++i) zb(i) = eng.normal();
    for (Eigen::Index i = 0; i < r; ++i) zu(i) = eng.normal();
    const Eigen::VectorXd b = fit.beta + Fb * zb;
    const Eigen::VectorXd u = Fu * zu;
    for (std::size_t g = 0; g < G; ++g) draws[g][s] = xrows[g].dot(b) + zrows[g].dot(u);
  }
  SimulatedBand band;
  band.grid.assign(logit_grid.begin(), logit_grid.end());
  band.n_samples = n_samples;
  band.seed = seed;
  const double a = 0.5 * (1.0 - level);
  for (auto& d : draws) {
    std::sort(d.begin(), d.end());
    band.lo.push_back(expit(quantile_sorted(d, a)));
    band.hi.push_back(expit(quantile_sorted(d, 1.0 - a)));
  }
  return band;
}

struct NullModelFit {
  double sigma_u2 = 0.0;
  double intercept = 0.0;
  bool converged = false;
  bool low_precision = false;
  std::vector<std::string> warnings;
};

/// Random-intercept logistic model with an intercept-only fixed part.
inline NullModelFit fit_null_intercept_model(std::span<const double> outcomes, std::span<const std::string> clusters) {
  if (outcomes.size() != clusters.size()) throw Error(ErrorKind::invalid_argument, "outcomes and clusters differ in length");
  std::map<std::string, std::vector<double>> by_cluster;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    auto [it, inserted] = by_cluster.try_emplace(clusters[i]);
    if (inserted) order.push_back(clusters[i]);
    it->second.push_back(outcomes[i]);
  }
  if (order.size() < 2) throw Error(ErrorKind::invalid_argument, "null random-intercept model needs at least 2 clusters");
  std::vector<GlmmProblem::Block> blocks;
  for (const auto& id : order) {
    const auto& ys = by_cluster[id];
    GlmmProblem::Block b;
    b.X = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(ys.size()), 1);
    b.Z = b.X;
    b.y = Eigen::Map<const Eigen::VectorXd>(ys.data(), static_cast<Eigen::Index>(ys.size()));
    blocks.push_back(std::move(b));
  }
  const GlmmProblem problem(order, std::move(blocks));
  const auto outer = detail::optimise_lambda(problem, GlmmOptions{});
  NullModelFit out;
  out.sigma_u2 = outer.lambda(0, 0) * outer.lambda(0, 0);
  out.intercept = outer.inner.beta(0);
  out.converged = outer.converged && outer.inner.converged;
  out.low_precision = order.size() < 5;
  if (out.low_precision) out.warnings.push_back("fewer than 5 clusters: random-intercept variance is imprecise");
  return out;
}

}  // namespace clustcal
