#pragma once

// Calibration curves for clustered prediction data: standard (cluster-blind)
// flexible and linear calibration, grouped clustered calibration through a
// bivariate meta-analysis (CG-C), two-stage pointwise meta-analysis of
// per-cluster curves (2MA-C), and a mixed-model curve (MIX-C). Also the
// summaries used to compare them: ICC, MSCE and pointwise coverage.

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clustcal/core.hpp"
#include "clustcal/dataio.hpp"
#include "clustcal/dataset.hpp"
#include "clustcal/glmm.hpp"
#include "clustcal/logistic.hpp"
#include "clustcal/meta.hpp"
#include "clustcal/smoothers.hpp"
#include "clustcal/stats.hpp"

namespace clustcal {

struct Smoother {
  enum class Kind { rcs, loess };
  Kind kind = Kind::rcs;
  /// Spline knot count; 0 selects among 3-5 knots by likelihood-ratio tests.
  int knots = 3;
  /// LOESS span; missing selects the span by AICc.
  double span = kMissing;
  int degree = 2;

  static Smoother rcs(int k = 3) { return {Kind::rcs, k, kMissing, 2}; }
  static Smoother loess(double span = kMissing, int degree = 2) { return {Kind::loess, 3, span, degree}; }

  std::string describe() const {
    if (kind == Kind::rcs) return knots == 0 ? "rcs(auto)" : format("rcs(%d)", knots);
    return is_missing(span) ? format("loess(aicc,degree=%d)", degree) : format("loess(span=%g,degree=%d)", span, degree);
  }
};

/// Curve over a probability grid. Missing points are NaN; `pi_lo`/`pi_hi`
/// are all missing for methods without a prediction band.
struct CalibrationCurve {
  std::string method;
  Grid grid;
  std::vector<double> estimate;
  std::vector<double> ci_lo;
  std::vector<double> ci_hi;
  std::vector<double> pi_lo;
  std::vector<double> pi_hi;
  std::map<std::string, std::vector<double>> cluster_curves;
  /// Between-cluster variance and contributing clusters per grid point
  /// (two-stage meta-analysis only).
  std::vector<double> tau2;
  std::vector<std::size_t> contributing;
  std::map<std::string, std::string> parameters;
  std::vector<std::string> warnings;
  bool separation_flag = false;

  explicit CalibrationCurve(Grid g = Grid()) : grid(std::move(g)) {
    const std::size_t n = grid.size();
    estimate.assign(n, kMissing);
    ci_lo.assign(n, kMissing);
    ci_hi.assign(n, kMissing);
    pi_lo.assign(n, kMissing);
    pi_hi.assign(n, kMissing);
  }

  std::size_t size() const { return grid.size(); }

  CurveExport to_export(std::optional<std::uint64_t> seed = std::nullopt) const {
    CurveExport e;
    e.grid = grid.points();
    e.estimate = estimate;
    e.ci_lo = ci_lo;
    e.ci_hi = ci_hi;
    e.pi_lo = pi_lo;
    e.pi_hi = pi_hi;
    e.cluster_curves = cluster_curves;
    e.metadata.method = method;
    e.metadata.parameters = parameters;
    e.metadata.seed = seed;
    return e;
  }
};

namespace detail {

/// Sets a logit-scale estimate and interval at grid index i.
inline void set_logit_point(CalibrationCurve& c, std::size_t i, double eta, double lo, double hi) {
  c.estimate[i] = expit(eta);
  c.ci_lo[i] = expit(lo);
  c.ci_hi[i] = expit(hi);
}

/// Widens a prediction band where needed so that it contains the confidence
/// band (simulated or small-sample bands can be marginally narrower).
inline void envelope_pi(CalibrationCurve& c) {
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (is_missing(c.pi_lo[i]) || is_missing(c.ci_lo[i])) continue;
    c.pi_lo[i] = std::min(c.pi_lo[i], c.ci_lo[i]);
    c.pi_hi[i] = std::max(c.pi_hi[i], c.ci_hi[i]);
  }
}

/// Logit-scale estimate and SE of a LOESS fit to binary outcomes; nullopt
/// when the fit extrapolates or leaves (0,1).
inline std::optional<PredictionWithSE> loess_logit_prediction(const LoessModel& m, double x) {
  const auto p = m.predict(x);
  if (p.extrapolated || !(p.estimate > 0.0 && p.estimate < 1.0) || !std::isfinite(p.se) || !(p.se > 0.0)) {
    return std::nullopt;
  }
  return PredictionWithSE{logit(p.estimate), p.se / (p.estimate * (1.0 - p.estimate))};
}

inline double resolve_span(const Smoother& s, std::span<const double> x, std::span<const double> y) {
  if (!is_missing(s.span)) return s.span;
  const auto grid = default_span_grid();
  return loess_select_span(x, y, grid, s.degree);
}

inline LogisticFit fit_spline_calibration(const Smoother& s, std::span<const double> x, std::span<const double> y) {
  if (s.knots == 0) return select_rcs_knots(x, y).fit;
  return fit_logistic(DesignSpec::spline(place_knots(x, s.knots)), x, y);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Cluster-blind calibration

/// Flexible calibration on the pooled data, ignoring clusters. Confidence
/// band by the delta method on the logit scale; no prediction band.
inline CalibrationCurve standard_flexible(const ClusteredDataset& ds, const Smoother& smoother = Smoother::rcs(3),
                                          const Grid& grid = Grid(), double level = 0.95) {
  if (ds.size() < 20) throw Error(ErrorKind::invalid_argument, "standard flexible calibration needs at least 20 rows");
  const auto x = ds.logit_risks();
  const auto y = ds.outcomes();
  const auto gx = grid.logits();
  const double z = stats::normal_critical(level);
  CalibrationCurve c(grid);
  c.method = "flexible";
  c.parameters["smoother"] = smoother.describe();
  c.parameters["level"] = format("%g", level);
  if (smoother.kind == Smoother::Kind::rcs) {
    const auto fit = detail::fit_spline_calibration(smoother, x, y);
    c.parameters["knots"] = format("%zu", fit.design.knots->size());
    c.separation_flag = fit.separation_flag || !fit.converged;
    if (c.separation_flag) c.warnings.push_back("calibration fit flagged (separation or non-convergence)");
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const auto p = predict_logit_se(fit, gx[i]);
      detail::set_logit_point(c, i, p.logit_estimate, p.logit_estimate - z * p.se_logit, p.logit_estimate + z * p.se_logit);
    }
  } else {
    const double span = detail::resolve_span(smoother, x, y);
    c.parameters["span"] = format("%g", span);
    const LoessModel m(x, y, span, smoother.degree);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const auto p = detail::loess_logit_prediction(m, gx[i]);
      if (!p) continue;
      detail::set_logit_point(c, i, p->logit_estimate, p->logit_estimate - z * p->se_logit,
                              p->logit_estimate + z * p->se_logit);
    }
  }
  return c;
}

struct LinearCalibration {
  double alpha = 0.0;
  double zeta = 1.0;
  Eigen::Matrix2d covariance;
  LogisticFit fit;
};

/// logit P(y = 1) = alpha + zeta logit(p_hat).
inline LinearCalibration linear_logistic_calibration(const ClusteredDataset& ds) {
  if (ds.size() < 10) throw Error(ErrorKind::invalid_argument, "linear calibration needs at least 10 rows");
  const auto x = ds.logit_risks();
  const auto y = ds.outcomes();
  LinearCalibration out;
  out.fit = fit_logistic(DesignSpec::linear(), x, y);
  out.alpha = out.fit.coefficients(0);
  out.zeta = out.fit.coefficients(1);
  out.covariance = out.fit.covariance;
  return out;
}

// ---------------------------------------------------------------------------
// CG-C

enum class GroupingMode { grouped, interval };

inline const char* to_string(GroupingMode m) { return m == GroupingMode::grouped ? "grouped" : "interval"; }

/// Summary of one group within one cluster.
struct ClusterGroup {
  std::string cluster_id;
  std::size_t group = 0;
  std::size_t n = 0;
  std::size_t events = 0;
  double ybar = 0.0;
  double pibar = 0.0;
};

/// Pooled point of one group: x = pooled mean risk, y = pooled observed
/// proportion, both back-transformed from the logit scale.
struct PooledGroup {
  std::size_t group = 0;
  std::size_t k = 0;
  double x = kMissing;
  double y = kMissing;
  Interval ci_y;
  Interval pi_y;
  Eigen::Matrix2d omega = Eigen::Matrix2d::Zero();
  bool converged = true;
};

struct GroupedCalibration {
  GroupingMode mode = GroupingMode::grouped;
  std::size_t groups = 10;
  std::vector<PooledGroup> points;
  std::vector<ClusterGroup> raw;
  std::vector<std::string> warnings;

  /// Curve with the pooled points as its grid (sorted by x).
  CurveExport to_export(std::optional<std::uint64_t> seed = std::nullopt) const {
    std::vector<const PooledGroup*> order;
    for (const auto& p : points) order.push_back(&p);
    std::sort(order.begin(), order.end(), [](auto a, auto b) { return a->x < b->x; });
    CurveExport e;
    for (const auto* p : order) {
      if (!e.grid.empty() && !(p->x > e.grid.back())) continue;
      e.grid.push_back(p->x);
      e.estimate.push_back(p->y);
      e.ci_lo.push_back(p->ci_y.lo);
      e.ci_hi.push_back(p->ci_y.hi);
      e.pi_lo.push_back(p->pi_y.lo);
      e.pi_hi.push_back(p->pi_y.hi);
    }
    e.metadata.method = std::string("cgc-") + to_string(mode);
    e.metadata.parameters["groups"] = format("%zu", groups);
    e.metadata.seed = seed;
    return e;
  }
};

namespace detail {

/// Per-cluster bivariate observation (logit observed proportion, logit mean
/// risk) with its delta-method within-cluster covariance. A group with no
/// events or no non-events gets 0.5 added to both cells.
inline BivariatePoint group_point(std::span<const double> y, std::span<const double> p, const std::string& label) {
  const double n = static_cast<double>(y.size());
  double events = 0.0, pbar = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    events += y[i];
    pbar += p[i];
  }
  pbar /= n;
  double a = events, b = n - events;
  if (a == 0.0 || b == 0.0) {
    a += 0.5;
    b += 0.5;
  }
  const double yb = a / (a + b);
  const double ybar_raw = events / n;
  double var_p = 0.0, cov_yp = 0.0;
  if (y.size() > 1) {
    for (std::size_t i = 0; i < y.size(); ++i) {
      var_p += (p[i] - pbar) * (p[i] - pbar);
      cov_yp += (y[i] - ybar_raw) * (p[i] - pbar);
    }
    var_p /= n - 1.0;
    cov_yp /= n - 1.0;
  }
  const double dy = 1.0 / (yb * (1.0 - yb));
  const double dp = 1.0 / (pbar * (1.0 - pbar));
  BivariatePoint bp;
  bp.theta = Eigen::Vector2d(std::log(a / b), logit(pbar));
  bp.sigma(0, 0) = 1.0 / a + 1.0 / b;
  bp.sigma(1, 1) = var_p / n * dp * dp;
  bp.sigma(0, 1) = bp.sigma(1, 0) = cov_yp / n * dy * dp;
  bp.sigma = regularize_psd(bp.sigma);
  bp.n = y.size();
  bp.label = label;
  return bp;
}

inline PooledGroup pool_group(std::size_t q, std::span<const BivariatePoint> pts, double level) {
  BivariateOptions opt;
  opt.level = level;
  const auto r = bivariate_reml(pts, opt);
  PooledGroup g;
  g.group = q;
  g.k = pts.size();
  g.x = expit(r.mu(1));
  g.y = expit(r.mu(0));
  g.ci_y = {expit(r.ci_y.lo), expit(r.ci_y.hi)};
  g.pi_y = {expit(r.pi_y.lo), expit(r.pi_y.hi)};
  g.omega = r.omega;
  g.converged = r.converged;
  return g;
}

}  // namespace detail

/// Row positions of one cluster split into Q groups of near-equal size
/// after sorting by (risk, outcome); boundaries at floor(g n / Q).
inline std::vector<std::vector<std::size_t>> quantile_groups(const ClusteredDataset& ds, const std::string& id,
                                                             std::size_t Q) {
  std::vector<std::size_t> rows = ds.rows(id);
  const auto& rec = ds.records();
  std::stable_sort(rows.begin(), rows.end(), [&](auto a, auto b) {
    return rec[a].p_hat != rec[b].p_hat ? rec[a].p_hat < rec[b].p_hat : rec[a].y < rec[b].y;
  });
  const std::size_t n = rows.size();
  std::vector<std::vector<std::size_t>> groups(Q);
  for (std::size_t g = 0; g < Q; ++g) {
    const std::size_t b = g * n / Q, e = (g + 1) * n / Q;
    groups[g].assign(rows.begin() + static_cast<std::ptrdiff_t>(b), rows.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return groups;
}

/// Index of the equal-width interval [l, u) on (0,1) containing p; the last
/// interval is closed.
inline std::size_t interval_index(double p, std::size_t Q) {
  const auto b = static_cast<std::size_t>(std::floor(p * static_cast<double>(Q)));
  return std::min(b, Q - 1);
}

/// Clustered group calibration: per-cluster groups summarised as (logit
/// observed proportion, logit mean risk), pooled group by group with a
/// bivariate random-effects meta-analysis.
inline GroupedCalibration cgc(const ClusteredDataset& ds, std::size_t Q = 10, GroupingMode mode = GroupingMode::grouped,
                              double level = 0.95) {
  if (Q < 1) throw Error(ErrorKind::invalid_argument, "number of groups must be at least 1");
  if (ds.n_clusters() < 3) throw Error(ErrorKind::invalid_argument, "grouped clustered calibration needs at least 3 clusters");
  GroupedCalibration out;
  out.mode = mode;
  out.groups = Q;
  const auto& rec = ds.records();
  std::vector<std::vector<BivariatePoint>> per_group(Q);
  std::vector<double> y, p;
  for (const auto& id : ds.cluster_ids()) {
    std::vector<std::vector<std::size_t>> groups;
    if (mode == GroupingMode::grouped) {
      if (ds.cluster_size(id) < Q) {
        throw Error(ErrorKind::invalid_argument,
                    format("cluster '%s' has %zu rows, fewer than %zu groups", id.c_str(), ds.cluster_size(id), Q));
      }
      groups = quantile_groups(ds, id, Q);
    } else {
      groups.assign(Q, {});
      for (auto r : ds.rows(id)) groups[interval_index(rec[r].p_hat, Q)].push_back(r);
    }
    for (std::size_t q = 0; q < Q; ++q) {
      if (groups[q].empty()) continue;
      y.clear();
      p.clear();
      for (auto r : groups[q]) {
        y.push_back(rec[r].y);
        p.push_back(rec[r].p_hat);
      }
      per_group[q].push_back(detail::group_point(y, p, id));
      ClusterGroup cg;
      cg.cluster_id = id;
      cg.group = q;
      cg.n = y.size();
      cg.events = static_cast<std::size_t>(std::accumulate(y.begin(), y.end(), 0.0));
      cg.ybar = static_cast<double>(cg.events) / static_cast<double>(cg.n);
      cg.pibar = mean(p);
      out.raw.push_back(cg);
    }
  }
  for (std::size_t q = 0; q < Q; ++q) {
    if (per_group[q].size() < 3) {
      out.warnings.push_back(format("group %zu dropped: only %zu contributing clusters", q + 1, per_group[q].size()));
      continue;
    }
    out.points.push_back(detail::pool_group(q, per_group[q], level));
    if (!out.points.back().converged) out.warnings.push_back(format("group %zu: meta-analysis did not converge", q + 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// 2MA-C

struct TwoStageOptions {
  Smoother smoother = Smoother::rcs(0);
  CiMethod ci_method = CiMethod::normal;
  PiMethod pi_method = PiMethod::t_based;
  double level = 0.95;
  /// Restrict each cluster's contribution to the range of its own risks.
  bool trim_to_cluster_range = false;
};

struct ClusterCurve {
  std::vector<double> logit_estimate;
  std::vector<double> se;
};

/// Stage one of the two-stage approach: per-cluster logit-scale estimates
/// and SEs on the grid (missing where unusable).
inline ClusterCurve stage_one_curve(std::span<const double> x, std::span<const double> y, const Smoother& smoother,
                                    std::span<const double> grid_logits, bool trim, std::string* note = nullptr) {
  const std::size_t G = grid_logits.size();
  ClusterCurve cc{std::vector<double>(G, kMissing), std::vector<double>(G, kMissing)};
  const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
  auto in_range = [&](double g) { return !trim || (g >= *mn && g <= *mx); };
  if (smoother.kind == Smoother::Kind::rcs) {
    const auto fit = detail::fit_spline_calibration(smoother, x, y);
    if (fit.separation_flag || !fit.converged) {
      if (note) *note = "spline fit flagged (separation or non-convergence)";
      return cc;
    }
    for (std::size_t i = 0; i < G; ++i) {
      if (!in_range(grid_logits[i])) continue;
      const auto p = predict_logit_se(fit, grid_logits[i]);
      if (!std::isfinite(p.logit_estimate) || !std::isfinite(p.se_logit) || !(p.se_logit > 0.0)) continue;
      cc.logit_estimate[i] = p.logit_estimate;
      cc.se[i] = p.se_logit;
    }
  } else {
    const double span = detail::resolve_span(smoother, x, y);
    const LoessModel m(x, y, span, smoother.degree);
    for (std::size_t i = 0; i < G; ++i) {
      if (!in_range(grid_logits[i])) continue;
      const auto p = detail::loess_logit_prediction(m, grid_logits[i]);
      if (!p) continue;
      cc.logit_estimate[i] = p->logit_estimate;
      cc.se[i] = p->se_logit;
    }
  }
  return cc;
}

/// Two-stage meta-analysis: a flexible curve per cluster, pooled pointwise
/// over the grid with REML random-effects meta-analysis.
inline CalibrationCurve two_stage_ma(const ClusteredDataset& ds, const TwoStageOptions& opt = {}, const Grid& grid = Grid()) {
  if (ds.n_clusters() < 2) throw Error(ErrorKind::invalid_argument, "two-stage meta-analysis needs at least 2 clusters");
  const auto gx = grid.logits();
  const std::size_t G = grid.size();
  CalibrationCurve c(grid);
  c.method = opt.smoother.kind == Smoother::Kind::rcs ? "2mac-splines" : "2mac-loess";
  c.parameters["smoother"] = opt.smoother.describe();
  c.parameters["ci"] = to_string(opt.ci_method);
  c.parameters["pi"] = to_string(opt.pi_method);
  c.parameters["level"] = format("%g", opt.level);
  c.parameters["trim_to_cluster_range"] = opt.trim_to_cluster_range ? "true" : "false";
  c.tau2.assign(G, kMissing);
  c.contributing.assign(G, 0);

  std::vector<std::pair<std::string, ClusterCurve>> curves;
  std::vector<double> x, y;
  for (const auto& id : ds.cluster_ids()) {
    ds.cluster_data(id, x, y);
    try {
      std::string note;
      auto cc = stage_one_curve(x, y, opt.smoother, gx, opt.trim_to_cluster_range, &note);
      if (!note.empty()) c.warnings.push_back("cluster '" + id + "' excluded: " + note);
      std::vector<double> probs(G, kMissing);
      for (std::size_t i = 0; i < G; ++i) {
        if (!is_missing(cc.logit_estimate[i])) probs[i] = expit(cc.logit_estimate[i]);
      }
      c.cluster_curves[id] = std::move(probs);
      curves.emplace_back(id, std::move(cc));
    } catch (const Error& e) {
      c.warnings.push_back("cluster '" + id + "' excluded: " + e.what());
    }
  }

  std::size_t missing_points = 0;
  std::vector<EffectEstimate> effects;
  for (std::size_t i = 0; i < G; ++i) {
    effects.clear();
    for (const auto& [id, cc] : curves) {
      if (!is_missing(cc.logit_estimate[i])) effects.push_back({cc.logit_estimate[i], cc.se[i] * cc.se[i], id});
    }
    c.contributing[i] = effects.size();
    if (effects.size() < 2) {
      ++missing_points;
      continue;
    }
    const double tau2 = reml_tau2(effects);
    const auto m = pool(effects, tau2, opt.ci_method, opt.level);
    c.tau2[i] = tau2;
    detail::set_logit_point(c, i, m.mu, m.ci.lo, m.ci.hi);
    if (opt.pi_method == PiMethod::normal || (opt.pi_method == PiMethod::t_based && m.k >= 3)) {
      const auto pi = prediction_interval(m, opt.pi_method, opt.level);
      c.pi_lo[i] = expit(pi.lo);
      c.pi_hi[i] = expit(pi.hi);
    }
  }
  if (missing_points > 0) {
    c.warnings.push_back(format("%zu grid point(s) with fewer than 2 usable clusters left missing", missing_points));
  }
  detail::envelope_pi(c);
  return c;
}

// ---------------------------------------------------------------------------
// MIX-C

struct MixcOptions {
  GlmmVariant variant = GlmmVariant::slope;
  std::size_t n_samples = 10000;
  std::uint64_t seed = 1;
  double level = 0.95;
  std::optional<KnotVector> knots;
  GlmmOptions glmm;
};

/// Curve from a fitted calibration GLMM: Wald band for the average cluster,
/// simulated prediction band, and empirical-Bayes curves per cluster.
inline CalibrationCurve mixc_curve(const GlmmFit& fit, const MixcOptions& opt, const Grid& grid = Grid()) {
  const auto gx = grid.logits();
  CalibrationCurve c(grid);
  c.method = std::string("mixc-") + to_string(fit.spec.variant);
  c.parameters["variant"] = to_string(fit.spec.variant);
  c.parameters["n_samples"] = format("%zu", opt.n_samples);
  c.parameters["level"] = format("%g", opt.level);
  c.warnings = fit.warnings;
  const auto avg = glmm_predict_average(fit, gx, opt.level);
  c.estimate = avg.estimate;
  c.ci_lo = avg.lo;
  c.ci_hi = avg.hi;
  const auto band = glmm_prediction_band(fit, gx, opt.n_samples, opt.seed, opt.level);
  c.pi_lo = band.lo;
  c.pi_hi = band.hi;
  for (const auto& id : fit.cluster_ids) c.cluster_curves[id] = glmm_predict_cluster(fit, id, gx).estimate;
  detail::envelope_pi(c);
  return c;
}

inline CalibrationCurve mixc(const ClusteredDataset& ds, const MixcOptions& opt = {}, const Grid& grid = Grid()) {
  if (ds.n_clusters() < 2) throw Error(ErrorKind::invalid_argument, "mixed-model calibration needs at least 2 clusters");
  GlmmSpec spec;
  spec.variant = opt.variant;
  spec.knots = opt.knots;
  const auto fit = fit_glmm(ds, spec, opt.glmm);
  return mixc_curve(fit, opt, grid);
}

// ---------------------------------------------------------------------------
// Summaries

/// Mean squared difference over grid points where both curves are present.
inline double msce(std::span<const double> estimated, std::span<const double> truth) {
  if (estimated.size() != truth.size()) throw Error(ErrorKind::invalid_argument, "msce: curves have different lengths");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < estimated.size(); ++i) {
    if (is_missing(estimated[i]) || is_missing(truth[i])) continue;
    const double d = estimated[i] - truth[i];
    sum += d * d;
    ++n;
  }
  if (n == 0) throw Error(ErrorKind::invalid_argument, "msce: curves share no non-missing points");
  return sum / static_cast<double>(n);
}

struct CoverageTable {
  std::vector<double> fraction;
  double mean = kMissing;
  std::vector<std::string> notes;
};

/// Fraction of clusters whose true curve lies inside [pi_lo, pi_hi] (edges
/// inclusive) at each point. Points without a band are missing; clusters
/// without a true value at a point are left out of that point.
inline CoverageTable pointwise_coverage(std::span<const double> pi_lo, std::span<const double> pi_hi,
                                        const std::map<std::string, std::vector<double>>& truth) {
  if (pi_lo.size() != pi_hi.size()) throw Error(ErrorKind::invalid_argument, "coverage: band edges differ in length");
  CoverageTable t;
  t.fraction.assign(pi_lo.size(), kMissing);
  std::size_t no_band = 0;
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < pi_lo.size(); ++i) {
    if (is_missing(pi_lo[i]) || is_missing(pi_hi[i])) {
      ++no_band;
      continue;
    }
    std::size_t in = 0, n = 0;
    for (const auto& [id, curve] : truth) {
      if (curve.size() != pi_lo.size()) throw Error(ErrorKind::invalid_argument, "coverage: truth curve '" + id + "' has wrong length");
      if (is_missing(curve[i])) continue;
      ++n;
      if (curve[i] >= pi_lo[i] && curve[i] <= pi_hi[i]) ++in;
    }
    if (n == 0) continue;
    t.fraction[i] = static_cast<double>(in) / static_cast<double>(n);
    sum += t.fraction[i];
    ++used;
  }
  if (no_band > 0) t.notes.push_back(format("%zu point(s) without a prediction band excluded", no_band));
  if (used > 0) t.mean = sum / static_cast<double>(used);
  return t;
}

inline constexpr double kLogisticVariance = std::numbers::pi * std::numbers::pi / 3.0;

inline double icc_from_variance(double sigma_u2) { return sigma_u2 / (sigma_u2 + kLogisticVariance); }

struct IccResult {
  double icc = 0.0;
  double sigma_u2 = 0.0;
  bool low_precision = false;
  std::vector<std::string> warnings;
};

/// Latent-scale ICC from a null random-intercept logistic model.
inline IccResult icc(std::span<const double> outcomes, std::span<const std::string> clusters) {
  const auto f = fit_null_intercept_model(outcomes, clusters);
  IccResult r;
  r.sigma_u2 = f.sigma_u2;
  r.icc = icc_from_variance(f.sigma_u2);
  r.low_precision = f.low_precision;
  r.warnings = f.warnings;
  if (!f.converged) r.warnings.push_back("null random-intercept model did not converge");
  return r;
}

inline IccResult icc(const ClusteredDataset& ds) {
  std::vector<std::string> clusters;
  clusters.reserve(ds.size());
  for (const auto& r : ds.records()) clusters.push_back(r.cluster_id);
  const auto y = ds.outcomes();
  return icc(y, clusters);
}

}  // namespace clustcal
