#pragma once

// Thin wrappers over Boost.Math distributions.

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "clustcal/core.hpp"

namespace clustcal::stats {

inline double normal_quantile(double prob) {
  return boost::math::quantile(boost::math::normal_distribution<double>(0.0, 1.0), prob);
}

inline double normal_cdf(double x) {
  return boost::math::cdf(boost::math::normal_distribution<double>(0.0, 1.0), x);
}

inline double t_quantile(double prob, double df) {
  if (!(df > 0)) throw Error(ErrorKind::invalid_argument, "t quantile needs df > 0");
  return boost::math::quantile(boost::math::students_t_distribution<double>(df), prob);
}

/// Upper tail P(X >= x) of a chi-square with df degrees of freedom.
inline double chi2_upper(double x, double df) {
  if (x <= 0.0) return 1.0;
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared_distribution<double>(df), x));
}

/// Two-sided critical value z_{1-(1-level)/2}.
inline double normal_critical(double level) { return normal_quantile(0.5 + 0.5 * level); }

inline double t_critical(double level, double df) { return t_quantile(0.5 + 0.5 * level, df); }

}  // namespace clustcal::stats
