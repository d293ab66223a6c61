#pragma once

// Restricted cubic spline bases and LOESS local regression.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "clustcal/core.hpp"

namespace clustcal {

/// Strictly increasing knots (3 to 5 of them) for a restricted cubic spline.
class KnotVector {
public:
  explicit KnotVector(std::vector<double> knots) : knots_(std::move(knots)) {
    if (knots_.size() < 3 || knots_.size() > 5) {
      throw Error(ErrorKind::invalid_argument, "restricted cubic splines need 3 to 5 knots");
    }
    for (std::size_t i = 0; i < knots_.size(); ++i) {
      if (!std::isfinite(knots_[i]) || (i > 0 && knots_[i] <= knots_[i - 1])) {
        throw Error(ErrorKind::invalid_argument, "knots must be finite and strictly increasing");
      }
    }
  }

  std::size_t size() const { return knots_.size(); }
  double operator[](std::size_t i) const { return knots_[i]; }
  const std::vector<double>& values() const { return knots_; }
  /// Number of basis columns excluding the intercept.
  std::size_t basis_size() const { return knots_.size() - 1; }

private:
  std::vector<double> knots_;
};

/// Quantile positions used for k knots.
inline std::vector<double> knot_quantiles(int k) {
  switch (k) {
    case 3: return {0.10, 0.50, 0.90};
    case 4: return {0.05, 0.35, 0.65, 0.95};
    case 5: return {0.05, 0.275, 0.50, 0.725, 0.95};
    default: throw Error(ErrorKind::invalid_argument, "knot count must be 3, 4 or 5");
  }
}

inline std::size_t count_distinct(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  return static_cast<std::size_t>(std::unique(values.begin(), values.end()) - values.begin());
}

/// Knots at type-7 quantiles of `values`. Ties between adjacent knots are
/// broken by nudging the later knot up by 1e-8 of the data range.
inline KnotVector place_knots(std::span<const double> values, int k) {
  const auto probs = knot_quantiles(k);
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const auto distinct = static_cast<std::size_t>(std::unique(sorted.begin(), sorted.end()) - sorted.begin());
  if (distinct < static_cast<std::size_t>(k)) {
    throw Error(ErrorKind::degenerate, format("need at least %d distinct values to place %d knots, got %zu", k, k, distinct));
  }
  sorted.assign(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double range = sorted.back() - sorted.front();
  std::vector<double> knots;
  knots.reserve(probs.size());
  for (double p : probs) knots.push_back(quantile_sorted(sorted, p));
  for (std::size_t i = 1; i < knots.size(); ++i) {
    if (knots[i] <= knots[i - 1]) knots[i] = knots[i - 1] + 1e-8 * range;
  }
  for (std::size_t i = 1; i < knots.size(); ++i) {
    if (!(knots[i] > knots[i - 1])) throw Error(ErrorKind::degenerate, "duplicate knots could not be separated");
  }
  return KnotVector(std::move(knots));
}

namespace detail {
inline double pos_cube(double v) { return v > 0.0 ? v * v * v : 0.0; }
}  // namespace detail

/// Restricted cubic spline row without intercept: column 0 is x, the rest are
/// the truncated-power terms scaled by (t_k - t_1)^2.
inline void rcs_basis(double x, const KnotVector& knots, std::span<double> out) {
  const std::size_t k = knots.size();
  const double tk = knots[k - 1];
  const double tk1 = knots[k - 2];
  const double norm = (tk - knots[0]) * (tk - knots[0]);
  out[0] = x;
  for (std::size_t m = 0; m + 2 < k; ++m) {
    const double tm = knots[m];
    out[m + 1] = (detail::pos_cube(x - tm) - detail::pos_cube(x - tk1) * (tk - tm) / (tk - tk1) +
                  detail::pos_cube(x - tk) * (tk1 - tm) / (tk - tk1)) /
                 norm;
  }
}

inline std::vector<double> rcs_basis(double x, const KnotVector& knots) {
  std::vector<double> row(knots.basis_size());
  rcs_basis(x, knots, row);
  return row;
}

/// Design matrix [1, rcs(x)] (intercept first).
inline Eigen::MatrixXd rcs_design(std::span<const double> x, const KnotVector& knots) {
  const auto cols = static_cast<Eigen::Index>(knots.basis_size() + 1);
  Eigen::MatrixXd X(static_cast<Eigen::Index>(x.size()), cols);
  std::vector<double> row(knots.basis_size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    rcs_basis(x[i], knots, row);
    X(static_cast<Eigen::Index>(i), 0) = 1.0;
    for (std::size_t c = 0; c < row.size(); ++c) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c + 1)) = row[c];
  }
  return X;
}

inline Eigen::VectorXd rcs_row(double x, const KnotVector& knots) {
  Eigen::VectorXd r(static_cast<Eigen::Index>(knots.basis_size() + 1));
  r(0) = 1.0;
  rcs_basis(x, knots, std::span<double>(r.data() + 1, knots.basis_size()));
  return r;
}

// ---------------------------------------------------------------------------
// LOESS

struct LoessPrediction {
  double estimate = kMissing;
  double se = kMissing;
  bool extrapolated = false;
};

/// Local polynomial regression with tricube weights and no robustness
/// iterations. The model stores its training data sorted by (x, y) so that
/// every result is independent of input row order.
class LoessModel {
public:
  LoessModel(std::span<const double> x, std::span<const double> y, double span, int degree)
      : span_(span), degree_(degree) {
    if (x.size() != y.size()) throw Error(ErrorKind::invalid_argument, "loess: x and y differ in length");
    if (degree != 1 && degree != 2) throw Error(ErrorKind::invalid_argument, "loess degree must be 1 or 2");
    if (!(span > 0.0 && span <= 1.0)) throw Error(ErrorKind::invalid_argument, "loess span must lie in (0,1]");
    const std::size_t n = x.size();
    if (n < static_cast<std::size_t>(degree + 2)) throw Error(ErrorKind::infeasible, "loess: too few points");
    if (n_neighbours(span, n) < static_cast<std::size_t>(degree + 2)) {
      throw Error(ErrorKind::infeasible, "loess: span too small for the local polynomial");
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a] != x[b] ? x[a] < x[b] : y[a] < y[b]; });
    x_.resize(n);
    y_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      x_[i] = x[order[i]];
      y_[i] = y[order[i]];
    }

    fitted_.resize(n);
    double trace = 0.0, trace_ltl = 0.0, rss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto lf = local_fit(x_[i]);
      double fit = 0.0, norm2 = 0.0;
      for (std::size_t j = lf.lo; j < lf.hi; ++j) {
        const double l = lf.weight(x_[j]);
        fit += l * y_[j];
        norm2 += l * l;
        if (j == i) trace += l;
      }
      fitted_[i] = fit;
      trace_ltl += norm2;
      rss += (y_[i] - fit) * (y_[i] - fit);
    }
    trace_hat_ = trace;
    rss_ = rss;
    // Residual degrees of freedom tr((I-L)'(I-L)) = n - 2 tr(L) + tr(L'L).
    delta1_ = static_cast<double>(n) - 2.0 * trace + trace_ltl;
  }

  double span() const { return span_; }
  int degree() const { return degree_; }
  std::size_t size() const { return x_.size(); }
  double trace_hat() const { return trace_hat_; }
  double rss() const { return rss_; }
  /// ML-style residual variance RSS / n (used by the AICc).
  double sigma2_ml() const { return rss_ / static_cast<double>(x_.size()); }
  /// Residual variance RSS / tr((I-L)'(I-L)) (used for standard errors).
  double sigma2() const { return delta1_ > 0 ? rss_ / delta1_ : kMissing; }
  const std::vector<double>& x() const { return x_; }
  const std::vector<double>& y() const { return y_; }
  const std::vector<double>& fitted() const { return fitted_; }

  /// Number of neighbours q = floor(span * n) used in each local fit.
  std::size_t neighbours() const {
    return n_neighbours(span_, x_.empty() ? 0 : x_.size());
  }

  static std::size_t n_neighbours(double span, std::size_t n) {
    return static_cast<std::size_t>(std::floor(span * static_cast<double>(n) + 1e-10));
  }

  /// Row of the smoother's linear operator at x0: fit(x0) = sum_j w_j y_(first+j).
  struct LocalOperator {
    std::size_t first = 0;
    std::vector<double> weights;
  };

  LocalOperator local_operator(double x0) const {
    const auto lf = local_fit(x0);
    LocalOperator op;
    op.first = lf.lo;
    op.weights.reserve(lf.hi - lf.lo);
    for (std::size_t j = lf.lo; j < lf.hi; ++j) op.weights.push_back(lf.weight(x_[j]));
    return op;
  }

  /// Local fit at x0 with SE^2 = sigma2 * ||l(x0)||^2. Points outside the
  /// training range are still evaluated but flagged.
  LoessPrediction predict(double x0) const {
    LoessPrediction out;
    out.extrapolated = x0 < x_.front() || x0 > x_.back();
    const auto lf = local_fit(x0);
    double fit = 0.0, norm2 = 0.0;
    for (std::size_t j = lf.lo; j < lf.hi; ++j) {
      const double l = lf.weight(x_[j]);
      fit += l * y_[j];
      norm2 += l * l;
    }
    out.estimate = fit;
    out.se = std::sqrt(std::max(0.0, sigma2()) * norm2);
    return out;
  }

private:
  /// Local weighted least-squares problem at x0, reduced to the operator
  /// weight l_j = w_j (c0 + c1 dx_j + c2 dx_j^2) over the window [lo, hi).
  struct LocalFit {
    std::size_t lo = 0, hi = 0;
    double x0 = 0.0, h = 1.0;
    double c0 = 0.0, c1 = 0.0, c2 = 0.0;

    double weight(double xj) const {
      const double dx = (xj - x0) / h;
      const double d = std::abs(dx);
      if (!(d < 1.0)) return 0.0;
      const double t = 1.0 - d * d * d;
      return t * t * t * (c0 + dx * (c1 + c2 * dx));
    }
  };

  LocalFit local_fit(double x0) const {
    const std::size_t n = x_.size();
    const std::size_t q = std::min(neighbours(), n);
    // The q nearest neighbours form a contiguous window [lo, lo + q) of the
    // sorted data; binary search for its left end.
    const std::size_t pos = static_cast<std::size_t>(std::lower_bound(x_.begin(), x_.end(), x0) - x_.begin());
    std::size_t lo = pos > q ? pos - q : 0;
    std::size_t hi = std::min(pos, n - q);
    while (lo < hi) {
      const std::size_t mid = lo + (hi - lo) / 2;
      if (x0 - x_[mid] > x_[mid + q] - x0) {
        lo = mid + 1;
      } else {
        hi = mid;
      }
    }
    LocalFit lf;
    lf.x0 = x0;
    lf.h = std::max(x0 - x_[lo], x_[lo + q - 1] - x0);
    if (!(lf.h > 0.0)) throw Error(ErrorKind::degenerate, "loess: singular local fit (all neighbours share x)");
    const double h = lf.h;
    // Every point strictly inside the bandwidth; ties at the edge carry zero
    // tricube weight.
    lf.lo = static_cast<std::size_t>(
        std::partition_point(x_.begin(), x_.begin() + static_cast<std::ptrdiff_t>(lo), [&](double v) { return x0 - v >= h; }) -
        x_.begin());
    lf.hi = static_cast<std::size_t>(std::partition_point(x_.begin() + static_cast<std::ptrdiff_t>(lo + q), x_.end(),
                                                          [&](double v) { return v - x0 < h; }) -
                                     x_.begin());

    // Moments S_k = sum_j w_j dx_j^k of the tricube-weighted design, dx
    // scaled by the bandwidth.
    double S[5] = {0, 0, 0, 0, 0};
    for (std::size_t j = lf.lo; j < lf.hi; ++j) {
      const double dx = (x_[j] - x0) / h;
      const double d = std::abs(dx);
      if (!(d < 1.0)) continue;
      const double t = 1.0 - d * d * d;
      const double w = t * t * t;
      const double dx2 = dx * dx;
      S[0] += w;
      S[1] += w * dx;
      S[2] += w * dx2;
      S[3] += w * dx2 * dx;
      S[4] += w * dx2 * dx2;
    }
    // Local intercept = e1' M^{-1} sum_j w_j z_j y_j with M = sum_j w_j z_j z_j'
    // and z_j = (1, dx, dx^2), so l_j = w_j z_j' M^{-1} e1.
    Eigen::Matrix3d M;
    M << S[0], S[1], S[2], S[1], S[2], S[3], S[2], S[3], S[4];
    const int p = degree_ + 1;
    const Eigen::MatrixXd Mp = M.topLeftCorner(p, p);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(Mp);
    lu.setThreshold(1e-10);
    if (lu.rank() < p) throw Error(ErrorKind::degenerate, "loess: singular local fit");
    Eigen::VectorXd e1 = Eigen::VectorXd::Zero(p);
    e1(0) = 1.0;
    const Eigen::VectorXd c = lu.solve(e1);
    lf.c0 = c(0);
    lf.c1 = c(1);
    if (p == 3) lf.c2 = c(2);
    return lf;
  }

  std::vector<double> x_;
  std::vector<double> y_;
  std::vector<double> fitted_;
  double span_;
  int degree_;
  double trace_hat_ = 0.0;
  double rss_ = 0.0;
  double delta1_ = 0.0;
};

inline LoessModel loess_fit(std::span<const double> x, std::span<const double> y, double span, int degree = 2) {
  return LoessModel(x, y, span, degree);
}

/// Bias-corrected AIC, log(RSS/n) + 1 + 2(tr+1)/(n-tr-2); +inf when the
/// denominator is not positive.
inline double loess_aicc(const LoessModel& m) {
  const double n = static_cast<double>(m.size());
  const double denom = n - m.trace_hat() - 2.0;
  if (!(denom > 0.0)) return std::numeric_limits<double>::infinity();
  return std::log(m.sigma2_ml()) + 1.0 + 2.0 * (m.trace_hat() + 1.0) / denom;
}

inline std::vector<double> default_span_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 14; ++i) g.push_back(0.30 + 0.05 * i);
  return g;
}

/// Span from `grid` with the smallest AICc; ties go to the smaller span.
inline double loess_select_span(std::span<const double> x, std::span<const double> y, std::span<const double> grid,
                                int degree = 2) {
  if (grid.empty()) throw Error(ErrorKind::invalid_argument, "loess: empty span grid");
  std::vector<double> spans(grid.begin(), grid.end());
  std::sort(spans.begin(), spans.end());
  double best_span = kMissing;
  double best = std::numeric_limits<double>::infinity();
  for (double s : spans) {
    double aicc = std::numeric_limits<double>::infinity();
    if (LoessModel::n_neighbours(s, x.size()) >= static_cast<std::size_t>(degree + 2)) {
      try {
        aicc = loess_aicc(LoessModel(x, y, s, degree));
      } catch (const Error&) {
        aicc = std::numeric_limits<double>::infinity();
      }
    }
    if (aicc < best) {
      best = aicc;
      best_span = s;
    }
  }
  if (is_missing(best_span)) throw Error(ErrorKind::infeasible, "loess: no feasible span in the grid");
  return best_span;
}

}  // namespace clustcal
