#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include <boost/math/tools/minima.hpp>

namespace clustcal::optim {

struct ScalarMinimum {
  double x = 0.0;
  double value = std::numeric_limits<double>::infinity();
};

/// Bounded scalar minimisation: coarse scan of `scan_points` evenly spaced
/// abscissae, then Brent's method on the bracket around the best scan point.
/// Both end points are always considered.
template <typename F>
ScalarMinimum minimize_bounded(F&& f, double lo, double hi, int scan_points = 41, int bits = 52) {
  ScalarMinimum best{lo, f(lo)};
  if (!(hi > lo)) return best;
  const double step = (hi - lo) / (scan_points - 1);
  int best_i = 0;
  for (int i = 1; i < scan_points; ++i) {
    const double x = i == scan_points - 1 ? hi : lo + step * i;
    const double v = f(x);
    if (v < best.value) {
      best = {x, v};
      best_i = i;
    }
  }
  const double a = best_i == 0 ? lo : lo + step * (best_i - 1);
  const double b = best_i == scan_points - 1 ? hi : lo + step * (best_i + 1);
  std::uintmax_t max_iter = 500;
  const auto r = boost::math::tools::brent_find_minima(f, a, b, bits, max_iter);
  if (r.second < best.value) best = {r.first, r.second};
  return best;
}

struct NelderMeadOptions {
  double initial_step = 0.5;
  /// Stop when max - min of the simplex values falls below this.
  double value_spread = 1e-6;
  /// Stop when the simplex diameter falls below this.
  double x_tol = 1e-8;
  int max_evals = 5000;
  int restarts = 1;
  /// Per-coordinate lower bounds (empty for none); proposals are clamped.
  std::vector<double> lower;
};

struct NelderMeadResult {
  std::vector<double> x;
  double value = std::numeric_limits<double>::infinity();
  int evaluations = 0;
  bool converged = false;
  /// Best value after each iteration; non-increasing by construction.
  std::vector<double> trace;
};

/// Nelder-Mead simplex minimisation with restarts from the best vertex.
template <typename F>
NelderMeadResult nelder_mead(F&& f, std::vector<double> start, const NelderMeadOptions& opt = {}) {
  const std::size_t n = start.size();
  NelderMeadResult res;
  auto clamp = [&](std::vector<double>& x) {
    for (std::size_t i = 0; i < opt.lower.size() && i < n; ++i) x[i] = std::max(x[i], opt.lower[i]);
  };
  auto eval = [&](std::vector<double>& x) {
    clamp(x);
    ++res.evaluations;
    const double v = f(x);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };

  res.x = start;
  res.value = eval(res.x);
  for (int round = 0; round <= opt.restarts; ++round) {
    std::vector<std::vector<double>> simplex(n + 1, res.x);
    std::vector<double> values(n + 1, res.value);
    for (std::size_t i = 0; i < n; ++i) {
      simplex[i + 1][i] += opt.initial_step;
      values[i + 1] = eval(simplex[i + 1]);
    }
    std::vector<std::size_t> order(n + 1);
    bool converged = false;
    while (res.evaluations < opt.max_evals) {
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] < values[b]; });
      const std::size_t ib = order.front(), iw = order.back(), is = order[n - 1];
      if (values[ib] < res.value) {
        res.value = values[ib];
        res.x = simplex[ib];
      }
      res.trace.push_back(res.value);

      double diam = 0.0;
      for (std::size_t i = 0; i <= n; ++i) {
        for (std::size_t d = 0; d < n; ++d) diam = std::max(diam, std::abs(simplex[i][d] - simplex[ib][d]));
      }
      if (values[iw] - values[ib] < opt.value_spread || diam < opt.x_tol) {
        converged = true;
        break;
      }

      std::vector<double> centroid(n, 0.0);
      for (std::size_t i = 0; i <= n; ++i) {
        if (i == iw) continue;
        for (std::size_t d = 0; d < n; ++d) centroid[d] += simplex[i][d] / static_cast<double>(n);
      }
      auto along = [&](double t) {
        std::vector<double> p(n);
        for (std::size_t d = 0; d < n; ++d) p[d] = centroid[d] + t * (simplex[iw][d] - centroid[d]);
        return p;
      };
      auto reflected = along(-1.0);
      const double fr = eval(reflected);
      if (fr < values[ib]) {
        auto expanded = along(-2.0);
        const double fe = eval(expanded);
        if (fe < fr) {
          simplex[iw] = std::move(expanded);
          values[iw] = fe;
        } else {
          simplex[iw] = std::move(reflected);
          values[iw] = fr;
        }
      } else if (fr < values[is]) {
        simplex[iw] = std::move(reflected);
        values[iw] = fr;
      } else {
        const bool outside = fr < values[iw];
        auto contracted = along(outside ? -0.5 : 0.5);
        const double fc = eval(contracted);
        if (fc < (outside ? fr : values[iw])) {
          simplex[iw] = std::move(contracted);
          values[iw] = fc;
        } else {
          for (std::size_t i = 0; i <= n; ++i) {
            if (i == ib) continue;
            for (std::size_t d = 0; d < n; ++d) simplex[i][d] = simplex[ib][d] + 0.5 * (simplex[i][d] - simplex[ib][d]);
            values[i] = eval(simplex[i]);
          }
        }
      }
    }
    for (std::size_t i = 0; i <= n; ++i) {
      if (values[i] < res.value) {
        res.value = values[i];
        res.x = simplex[i];
      }
    }
    res.converged = converged;
    if (res.evaluations >= opt.max_evals) break;
  }
  return res;
}

}  // namespace clustcal::optim
