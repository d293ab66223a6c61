#pragma once

// Synthetic clustered validation data for the tests.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "clustcal/core.hpp"
#include "clustcal/dataset.hpp"
#include "clustcal/rng.hpp"

namespace fixture {

struct ClusteredSpec {
  std::size_t clusters = 10;
  std::size_t per_cluster = 200;
  /// Random-intercept variance of the true risks around the predicted ones.
  double sigma_u2 = 0.0;
  /// True logit = intercept + slope * logit(p_hat) + u_j.
  double intercept = 0.0;
  double slope = 1.0;
  /// Predicted risks: logit(p_hat) ~ N(risk_mean, risk_sd^2).
  double risk_mean = -0.85;
  double risk_sd = 1.0;
  std::uint64_t seed = 1;
};

inline std::string label(std::size_t j) { return clustcal::format("K%02zu", j); }

/// Cluster effects used by `clustered` (exposed so tests can compare
/// estimates against them).
inline std::vector<double> cluster_effects(const ClusteredSpec& s) {
  const clustcal::rng::Stream st(clustcal::rng::derive(s.seed, {0xeffec7}));
  std::vector<double> u(s.clusters);
  for (std::size_t j = 0; j < s.clusters; ++j) u[j] = std::sqrt(s.sigma_u2) * st.normal(j);
  return u;
}

inline clustcal::ClusteredDataset clustered(const ClusteredSpec& s) {
  const auto u = cluster_effects(s);
  std::vector<clustcal::Record> recs;
  recs.reserve(s.clusters * s.per_cluster);
  for (std::size_t j = 0; j < s.clusters; ++j) {
    const clustcal::rng::Stream st(clustcal::rng::derive(s.seed, {0xda7a, j}));
    const auto coin = st.substream(1);
    for (std::size_t i = 0; i < s.per_cluster; ++i) {
      const double lp = s.risk_mean + s.risk_sd * st.normal(i);
      const double p = clustcal::clamp_risk(clustcal::expit(lp));
      const double truth = clustcal::expit(s.intercept + s.slope * clustcal::logit(p) + u[j]);
      recs.push_back({label(j), coin.uniform(i) < truth ? 1 : 0, p});
    }
  }
  return clustcal::ClusteredDataset(std::move(recs));
}

/// Same records, cluster ids renamed by `rename` and row order reversed.
template <typename F>
clustcal::ClusteredDataset relabel_and_reverse(const clustcal::ClusteredDataset& ds, F rename) {
  std::vector<clustcal::Record> recs(ds.records().rbegin(), ds.records().rend());
  for (auto& r : recs) r.cluster_id = rename(r.cluster_id);
  return clustcal::ClusteredDataset(std::move(recs));
}

}  // namespace fixture
