#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace clustcal {

/// Category of a failure. The CLI maps input/usage kinds to exit code 2 and
/// everything else to exit code 1.
enum class ErrorKind {
  schema,
  parse,
  empty_input,
  invalid_argument,
  degenerate,
  infeasible,
  unknown_cluster,
  io,
};

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();
inline constexpr double kRiskFloor = 1e-5;

inline bool is_missing(double v) { return std::isnan(v); }

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

inline double expit(double x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Maps a risk into [1e-5, 1 - 1e-5].
inline double clamp_risk(double p) { return std::clamp(p, kRiskFloor, 1.0 - kRiskFloor); }

/// Type-7 quantile (linear interpolation of order statistics) of sorted data.
inline double quantile_sorted(std::span<const double> sorted, double prob) {
  if (sorted.empty()) {
    throw Error(ErrorKind::invalid_argument, "quantile of empty sample");
  }
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline double quantile(std::vector<double> values, double prob) {
  std::sort(values.begin(), values.end());
  return quantile_sorted(values, prob);
}

inline double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? kMissing : s / static_cast<double>(v.size());
}

/// Unbiased sample variance; 0 for fewer than two values.
inline double sample_variance(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

struct Interval {
  double lo = kMissing;
  double hi = kMissing;

  bool contains(double v) const { return v >= lo && v <= hi; }
  bool contains(const Interval& o) const { return lo <= o.lo && o.hi <= hi; }
  double half_width() const { return 0.5 * (hi - lo); }
};

/// Probability grid for calibration curves.
class Grid {
public:
  Grid() : Grid(100) {}
  explicit Grid(std::size_t n, double from = 0.01, double to = 0.99) {
    if (n == 0) throw Error(ErrorKind::invalid_argument, "grid needs at least one point");
    if (!(from > 0.0 && to < 1.0 && from <= to)) {
      throw Error(ErrorKind::invalid_argument, "grid must lie inside (0,1)");
    }
    points_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      points_[i] = n == 1 ? from : from + (to - from) * static_cast<double>(i) / static_cast<double>(n - 1);
    }
  }
  explicit Grid(std::vector<double> points) : points_(std::move(points)) {
    if (points_.empty()) throw Error(ErrorKind::invalid_argument, "empty grid");
    for (std::size_t i = 0; i < points_.size(); ++i) {
      if (!(points_[i] > 0.0 && points_[i] < 1.0) || (i > 0 && points_[i] <= points_[i - 1])) {
        throw Error(ErrorKind::invalid_argument, "grid must be strictly increasing inside (0,1)");
      }
    }
  }

  std::size_t size() const { return points_.size(); }
  double operator[](std::size_t i) const { return points_[i]; }
  const std::vector<double>& points() const { return points_; }

  std::vector<double> logits() const {
    std::vector<double> out(points_.size());
    std::transform(points_.begin(), points_.end(), out.begin(), logit);
    return out;
  }

private:
  std::vector<double> points_;
};

/// printf-style formatting into a std::string.
template <typename... Args>
std::string format(const char* fmt, Args... args) {
  const int n = std::snprintf(nullptr, 0, fmt, args...);
  std::string out(static_cast<std::size_t>(n), '\0');
  std::snprintf(out.data(), out.size() + 1, fmt, args...);
  return out;
}

/// Number formatted with 10 significant digits; empty string when missing.
inline std::string format_number(double v) {
  if (is_missing(v)) return {};
  return format("%.10g", v);
}

}  // namespace clustcal
