#pragma once

// Simulation harness: clustered superpopulations with a random intercept,
// development / validation sampling, oracle truth curves, and a scenario
// runner that scores every calibration method by MSCE and prediction-band
// coverage.
//
// Every draw is addressed by counters (seed, purpose, cluster, patient), so a
// dataset or report is a pure function of its configuration and seed and
// does not depend on the number of threads.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "clustcal/calib.hpp"
#include "clustcal/core.hpp"
#include "clustcal/dataset.hpp"
#include "clustcal/logistic.hpp"
#include "clustcal/rng.hpp"
#include "clustcal/smoothers.hpp"

namespace clustcal::sim {

struct SuperpopConfig {
  std::string label = "custom";
  double beta0 = 0.0;
  double beta1 = 1.0;
  /// Random-intercept variance.
  double sigma_u2 = 0.1;
  std::size_t n_clusters = 200;
  std::size_t n_per_cluster = 10000;
  /// Seed of the realised population (cluster effects and patients).
  std::uint64_t seed = 1;
  double target_auc = kMissing;
  double target_icc = kMissing;

  void validate() const {
    if (!(sigma_u2 > 0.0) || !std::isfinite(sigma_u2)) throw Error(ErrorKind::invalid_argument, "sigma_u2 must be positive");
    if (!std::isfinite(beta0) || !std::isfinite(beta1)) throw Error(ErrorKind::invalid_argument, "coefficients must be finite");
    if (n_clusters < 2 || n_per_cluster < 1) throw Error(ErrorKind::invalid_argument, "superpopulation too small");
  }
};

/// The four reference superpopulations (AUC 0.9/0.75 x ICC 0.2/0.05). The
/// random-intercept spread is tabulated as a standard deviation; sigma_u2
/// holds its square.
inline SuperpopConfig preset(const std::string& label) {
  struct Row {
    const char* label;
    double b0, b1, sd, auc, icc;
    std::uint64_t seed;
  };
  static constexpr Row rows[] = {
      {"P1", -1.6054, -2.09062, 1.559, 0.90, 0.20, 1},
      {"P2", -1.0122, 0.4199, 1.0024, 0.75, 0.20, 1},
      {"P3", -1.5943, 2.3875, 0.7827, 0.90, 0.05, 1},
      {"P4", -1.0244, -0.9273, 0.5183, 0.75, 0.05, 1},
  };
  for (const auto& r : rows) {
    if (label == r.label) {
      SuperpopConfig c;
      c.label = r.label;
      c.beta0 = r.b0;
      c.beta1 = r.b1;
      c.sigma_u2 = r.sd * r.sd;
      c.target_auc = r.auc;
      c.target_icc = r.icc;
      c.seed = r.seed;
      return c;
    }
  }
  throw Error(ErrorKind::invalid_argument, "unknown superpopulation preset '" + label + "' (valid: P1, P2, P3, P4)");
}

inline std::vector<std::string> preset_labels() { return {"P1", "P2", "P3", "P4"}; }

/// Stream purposes.
namespace purpose {
inline constexpr std::uint64_t cluster_effect = 1;
inline constexpr std::uint64_t covariate = 2;
inline constexpr std::uint64_t outcome = 3;
inline constexpr std::uint64_t prevalence = 4;
inline constexpr std::uint64_t dev_clusters = 5;
inline constexpr std::uint64_t dev_patients = 6;
inline constexpr std::uint64_t val_clusters = 7;
inline constexpr std::uint64_t val_patients = 8;
inline constexpr std::uint64_t truth = 9;
inline constexpr std::uint64_t band = 10;
}  // namespace purpose

struct Patient {
  double x = 0.0;
  double risk = 0.0;
  int y = 0;
};

/// Lazily materialised clustered population: u_j ~ N(0, sigma_u2),
/// x ~ N(0,1), risk = expit(beta0 + beta1 x + u_j), y ~ Bernoulli(risk).
class Superpopulation {
public:
  explicit Superpopulation(SuperpopConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const rng::Stream s(rng::derive(cfg_.seed, {purpose::cluster_effect}));
    const double sd = std::sqrt(cfg_.sigma_u2);
    u_.resize(cfg_.n_clusters);
    for (std::size_t j = 0; j < cfg_.n_clusters; ++j) u_[j] = sd * s.normal(j);
  }

  const SuperpopConfig& config() const { return cfg_; }
  std::size_t n_clusters() const { return cfg_.n_clusters; }
  std::size_t n_per_cluster() const { return cfg_.n_per_cluster; }
  double u(std::size_t j) const { return u_.at(j); }
  const std::vector<double>& cluster_effects() const { return u_; }

  double true_risk(double x, double u) const { return expit(cfg_.beta0 + cfg_.beta1 * x + u); }

  Patient patient(std::size_t j, std::size_t i) const {
    if (j >= cfg_.n_clusters || i >= cfg_.n_per_cluster) throw Error(ErrorKind::invalid_argument, "patient index out of range");
    Patient p;
    p.x = rng::Stream(rng::derive(cfg_.seed, {purpose::covariate, j})).normal(i);
    p.risk = true_risk(p.x, u_[j]);
    p.y = rng::Stream(rng::derive(cfg_.seed, {purpose::outcome, j})).uniform(i) < p.risk ? 1 : 0;
    return p;
  }

  /// Expected event rate of cluster j from `draws` Monte-Carlo covariates.
  double prevalence(std::size_t j, std::size_t draws = 100000) const {
    const rng::Stream s(rng::derive(cfg_.seed, {purpose::prevalence, j}));
    double sum = 0.0;
    for (std::size_t k = 0; k < draws; ++k) sum += true_risk(s.normal(k), u_.at(j));
    return sum / static_cast<double>(draws);
  }

private:
  SuperpopConfig cfg_;
  std::vector<double> u_;
};

inline Superpopulation build_superpopulation(SuperpopConfig cfg, std::optional<std::uint64_t> seed = std::nullopt) {
  if (seed) cfg.seed = *seed;
  return Superpopulation(std::move(cfg));
}

/// A sample that keeps the generating covariate and the true risk.
struct SimSample {
  std::vector<std::size_t> clusters;  // superpopulation cluster indices
  std::vector<std::size_t> cluster_of;  // per row, position in `clusters`
  std::vector<double> x;
  std::vector<double> risk;
  std::vector<double> y;

  std::size_t size() const { return x.size(); }
  std::size_t events() const { return static_cast<std::size_t>(std::accumulate(y.begin(), y.end(), 0.0)); }
};

inline std::string cluster_label(std::size_t j) { return format("C%03zu", j); }

namespace detail {

/// First k entries of a uniformly random permutation of `pool`.
inline std::vector<std::size_t> partial_shuffle(std::vector<std::size_t> pool, std::size_t k, rng::Engine& eng) {
  k = std::min(k, pool.size());
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t r = i + static_cast<std::size_t>(eng.below(pool.size() - i));
    std::swap(pool[i], pool[r]);
  }
  pool.resize(k);
  return pool;
}

inline std::vector<std::size_t> iota_vec(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

inline void add_patients(const Superpopulation& sp, std::size_t j, std::size_t n, std::uint64_t key, SimSample& s) {
  rng::Engine eng(key);
  const auto idx = partial_shuffle(iota_vec(sp.n_per_cluster()), n, eng);
  const std::size_t pos = s.clusters.size();
  s.clusters.push_back(j);
  for (auto i : idx) {
    const auto p = sp.patient(j, i);
    s.cluster_of.push_back(pos);
    s.x.push_back(p.x);
    s.risk.push_back(p.risk);
    s.y.push_back(p.y);
  }
}

}  // namespace detail

/// Development-set size for a cluster: ceil(epc * 1.15 / prevalence).
inline std::size_t development_cluster_size(double epc, double prevalence, std::size_t cap) {
  if (!(prevalence > 0.0)) return cap;
  const double n = std::ceil(epc * 1.15 / prevalence - 1e-9);
  return std::min(cap, static_cast<std::size_t>(std::max(1.0, n)));
}

/// Samples `n_clusters` clusters without replacement and, within each,
/// ceil(epc * 1.15 / prevalence) patients.
inline SimSample sample_development(const Superpopulation& sp, std::size_t n_clusters, double epc, std::uint64_t seed) {
  if (n_clusters > sp.n_clusters()) throw Error(ErrorKind::invalid_argument, "more development clusters than exist");
  rng::Engine eng(rng::derive(seed, {purpose::dev_clusters}));
  auto chosen = detail::partial_shuffle(detail::iota_vec(sp.n_clusters()), n_clusters, eng);
  SimSample s;
  for (auto j : chosen) {
    const std::size_t n = development_cluster_size(epc, sp.prevalence(j), sp.n_per_cluster());
    detail::add_patients(sp, j, n, rng::derive(seed, {purpose::dev_patients, j}), s);
  }
  return s;
}

/// Pooled restricted cubic spline (3 knots) logistic model of y on x.
inline LogisticFit develop_model(const SimSample& dev) {
  if (dev.size() == 0) throw Error(ErrorKind::invalid_argument, "empty development sample");
  return fit_logistic(DesignSpec::spline(place_knots(dev.x, 3)), dev.x, dev.y);
}

inline double model_risk(const LogisticFit& model, double x) {
  return clamp_risk(expit(model.design.row(x).dot(model.coefficients)));
}

struct ValidationSample {
  SimSample sample;
  ClusteredDataset dataset;
};

/// 30 (by default) clusters not in `excluded`, `total` patients allocated
/// evenly with the remainder going to the first clusters; risks from `model`.
inline ValidationSample sample_validation(const Superpopulation& sp, std::span<const std::size_t> excluded,
                                          const LogisticFit& model, std::uint64_t seed, std::size_t n_clusters = 30,
                                          std::size_t total = 100000) {
  std::vector<std::size_t> pool;
  for (std::size_t j = 0; j < sp.n_clusters(); ++j) {
    if (std::find(excluded.begin(), excluded.end(), j) == excluded.end()) pool.push_back(j);
  }
  if (pool.size() < n_clusters) throw Error(ErrorKind::invalid_argument, "not enough clusters left for validation");
  rng::Engine eng(rng::derive(seed, {purpose::val_clusters}));
  const auto chosen = detail::partial_shuffle(pool, n_clusters, eng);
  ValidationSample v;
  for (std::size_t c = 0; c < chosen.size(); ++c) {
    const std::size_t n = total / n_clusters + (c < total % n_clusters ? 1 : 0);
    if (n > sp.n_per_cluster()) throw Error(ErrorKind::invalid_argument, "validation cluster larger than the cluster population");
    detail::add_patients(sp, chosen[c], n, rng::derive(seed, {purpose::val_patients, chosen[c]}), v.sample);
  }
  std::vector<Record> recs;
  recs.reserve(v.sample.size());
  for (std::size_t i = 0; i < v.sample.size(); ++i) {
    recs.push_back({cluster_label(v.sample.clusters[v.sample.cluster_of[i]]), static_cast<int>(v.sample.y[i]),
                    model_risk(model, v.sample.x[i])});
  }
  v.dataset = ClusteredDataset(std::move(recs));
  return v;
}

/// Oracle calibration curve: a spline logistic fit of true risks on the
/// model's logit risks, valid over the observed range of those risks.
struct TruthCurve {
  LogisticFit fit;
  double lo = 0.0;  // support on the logit scale
  double hi = 0.0;

  double at(double p) const {
    const double x = logit(p);
    if (x < lo || x > hi) return kMissing;
    return expit(fit.design.row(x).dot(fit.coefficients));
  }
  std::vector<double> on(std::span<const double> grid) const {
    std::vector<double> out;
    out.reserve(grid.size());
    for (double p : grid) out.push_back(at(p));
    return out;
  }
};

struct TruthOptions {
  std::size_t average_draws = 1000000;
  std::size_t cluster_draws = 100000;
  int knots = 5;
};

namespace detail {

struct TruthDesign {
  Eigen::MatrixXd X;
  std::vector<double> x;  // covariates
  DesignSpec design;
  double lo = 0.0, hi = 0.0;
};

inline TruthDesign truth_design(const LogisticFit& model, std::size_t draws, int knots, std::uint64_t key) {
  const rng::Stream s(key);
  TruthDesign t;
  t.x.resize(draws);
  std::vector<double> lp(draws);
  for (std::size_t k = 0; k < draws; ++k) {
    t.x[k] = s.normal(k);
    lp[k] = logit(model_risk(model, t.x[k]));
  }
  const auto [mn, mx] = std::minmax_element(lp.begin(), lp.end());
  t.lo = *mn;
  t.hi = *mx;
  t.design = DesignSpec::spline(place_knots(lp, knots));
  t.X = t.design.matrix(lp);
  return t;
}

inline TruthCurve fit_truth(const TruthDesign& t, const Superpopulation& sp, double u) {
  Eigen::VectorXd r(static_cast<Eigen::Index>(t.x.size()));
  for (std::size_t k = 0; k < t.x.size(); ++k) r(static_cast<Eigen::Index>(k)) = sp.true_risk(t.x[k], u);
  TruthCurve c;
  c.fit = fit_logistic(t.X, r, {}, t.design);
  c.lo = t.lo;
  c.hi = t.hi;
  return c;
}

}  // namespace detail

/// Truth for the cluster with the average effect (u = 0).
inline TruthCurve true_average_curve(const Superpopulation& sp, const LogisticFit& model, std::uint64_t seed,
                                     std::size_t draws = 1000000, int knots = 5) {
  const auto t = detail::truth_design(model, draws, knots, rng::derive(seed, {purpose::truth, 0}));
  return detail::fit_truth(t, sp, 0.0);
}

/// Truth for cluster j (u = u_j).
inline TruthCurve true_cluster_curve(const Superpopulation& sp, std::size_t j, const LogisticFit& model,
                                     std::uint64_t seed, std::size_t draws = 100000, int knots = 5) {
  const auto t = detail::truth_design(model, draws, knots, rng::derive(seed, {purpose::truth, 1}));
  return detail::fit_truth(t, sp, sp.u(j));
}

/// Concordance probability with ties counted one half (midrank form of the
/// Mann-Whitney statistic).
inline double empirical_auc(std::span<const double> risks, std::span<const double> outcomes) {
  if (risks.size() != outcomes.size()) throw Error(ErrorKind::invalid_argument, "auc: inputs differ in length");
  std::vector<std::size_t> order(risks.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return risks[a] < risks[b]; });
  double rank_sum = 0.0, n1 = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && risks[order[j]] == risks[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (outcomes[order[k]] == 1.0) {
        rank_sum += midrank;
        n1 += 1.0;
      }
    }
    i = j;
  }
  const double n0 = static_cast<double>(risks.size()) - n1;
  if (n1 == 0.0 || n0 == 0.0) throw Error(ErrorKind::invalid_argument, "auc needs both outcome classes");
  return (rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0);
}

/// `n` patients spread evenly over all clusters (the first n/J of each).
inline SimSample population_sample(const Superpopulation& sp, std::size_t n) {
  SimSample s;
  const std::size_t J = sp.n_clusters();
  for (std::size_t j = 0; j < J; ++j) {
    const std::size_t m = n / J + (j < n % J ? 1 : 0);
    s.clusters.push_back(j);
    for (std::size_t i = 0; i < m; ++i) {
      const auto p = sp.patient(j, i);
      s.cluster_of.push_back(j);
      s.x.push_back(p.x);
      s.risk.push_back(p.risk);
      s.y.push_back(p.y);
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Scenario runner

inline const std::vector<std::string>& all_methods() {
  static const std::vector<std::string> m{"flexible", "cgc_grouped", "cgc_interval", "2mac_splines", "2mac_loess", "mixc"};
  return m;
}

struct Scenario {
  SuperpopConfig superpop = preset("P4");
  double epc = 200;
  std::size_t dev_clusters = 30;
  std::size_t reps = 25;
  std::uint64_t seed = 1;
  std::size_t val_clusters = 30;
  std::size_t val_total = 15000;
  std::vector<std::string> methods = all_methods();
  TruthOptions truth;
  std::size_t grid_points = 100;
  std::size_t cgc_groups = 10;
  std::size_t band_samples = 10000;
  GlmmVariant mixc_variant = GlmmVariant::slope;

  void validate() const {
    superpop.validate();
    if (dev_clusters + val_clusters > superpop.n_clusters) {
      throw Error(ErrorKind::invalid_argument, "development plus validation clusters exceed the superpopulation");
    }
    if (dev_clusters < 1 || reps < 1 || val_clusters < 3) throw Error(ErrorKind::invalid_argument, "scenario too small");
    if (!(epc > 0)) throw Error(ErrorKind::invalid_argument, "epc must be positive");
    for (const auto& m : methods) {
      if (std::find(all_methods().begin(), all_methods().end(), m) == all_methods().end()) {
        throw Error(ErrorKind::invalid_argument, "unknown method '" + m + "'");
      }
    }
  }

  /// Full-scale settings: 100 reps, 100,000 validation patients.
  void set_full_scale() {
    reps = 100;
    val_total = 100000;
  }
};

struct MethodOutcome {
  double msce_x100 = kMissing;
  double coverage = kMissing;
  /// Per grid point coverage for grid-based methods (empty otherwise).
  std::vector<double> coverage_points;
};

struct RepResult {
  std::size_t rep = 0;
  bool failed = false;
  std::string failure;
  std::map<std::string, MethodOutcome> methods;
  std::vector<std::string> warnings;
};

struct MethodSummary {
  std::size_t n = 0;
  double median = kMissing;
  double q25 = kMissing;
  double q75 = kMissing;
  double mean_coverage = kMissing;
  std::vector<double> coverage_points;
};

struct SimReport {
  Scenario scenario;
  std::vector<RepResult> reps;
  std::map<std::string, MethodSummary> summary;
  std::size_t failed = 0;
  bool unreliable = false;

  std::string to_csv() const;
  std::string to_json() const;
};

namespace detail {

inline MethodOutcome score_curve(const CalibrationCurve& c, const std::vector<double>& truth_avg,
                                 const std::map<std::string, std::vector<double>>& truth_clusters) {
  MethodOutcome o;
  o.msce_x100 = 100.0 * msce(c.estimate, truth_avg);
  if (std::any_of(c.pi_lo.begin(), c.pi_lo.end(), [](double v) { return !is_missing(v); })) {
    const auto cov = pointwise_coverage(c.pi_lo, c.pi_hi, truth_clusters);
    o.coverage = cov.mean;
    o.coverage_points = cov.fraction;
  }
  return o;
}

/// CG-C yields pooled points at data-driven risks; truths are evaluated at
/// those risks.
inline MethodOutcome score_grouped(const GroupedCalibration& g, const TruthCurve& avg,
                                   const std::map<std::string, const TruthCurve*>& clusters) {
  std::vector<double> est, tru, lo, hi;
  std::map<std::string, std::vector<double>> cl;
  for (const auto& p : g.points) {
    est.push_back(p.y);
    tru.push_back(avg.at(p.x));
    lo.push_back(p.pi_y.lo);
    hi.push_back(p.pi_y.hi);
    for (const auto& [id, t] : clusters) cl[id].push_back(t->at(p.x));
  }
  MethodOutcome o;
  o.msce_x100 = 100.0 * msce(est, tru);
  o.coverage = pointwise_coverage(lo, hi, cl).mean;
  return o;
}

inline RepResult run_rep(const Superpopulation& sp, const Scenario& sc, std::size_t rep) {
  RepResult r;
  r.rep = rep;
  const std::uint64_t key = rng::derive(sc.seed, {0x7265705fULL, rep});
  try {
    const auto dev = sample_development(sp, sc.dev_clusters, sc.epc, key);
    const auto model = develop_model(dev);
    if (model.separation_flag || !model.converged) throw Error(ErrorKind::degenerate, "development model flagged");
    const auto val = sample_validation(sp, dev.clusters, model, key, sc.val_clusters, sc.val_total);
    const Grid grid(sc.grid_points);

    const auto truth_avg = true_average_curve(sp, model, key, sc.truth.average_draws, sc.truth.knots);
    const auto cdesign = truth_design(model, sc.truth.cluster_draws, sc.truth.knots, rng::derive(key, {purpose::truth, 1}));
    std::map<std::string, TruthCurve> truth_fits;
    for (auto j : val.sample.clusters) truth_fits.emplace(cluster_label(j), fit_truth(cdesign, sp, sp.u(j)));
    const auto avg_on_grid = truth_avg.on(grid.points());
    std::map<std::string, std::vector<double>> clusters_on_grid;
    std::map<std::string, const TruthCurve*> cluster_ptrs;
    for (const auto& [id, t] : truth_fits) {
      clusters_on_grid[id] = t.on(grid.points());
      cluster_ptrs[id] = &t;
    }

    const auto& ds = val.dataset;
    for (const auto& m : sc.methods) {
      MethodOutcome o;
      if (m == "flexible") {
        o = score_curve(standard_flexible(ds, Smoother::rcs(3), grid), avg_on_grid, clusters_on_grid);
      } else if (m == "cgc_grouped" || m == "cgc_interval") {
        const auto g = cgc(ds, sc.cgc_groups, m == "cgc_grouped" ? GroupingMode::grouped : GroupingMode::interval);
        o = score_grouped(g, truth_avg, cluster_ptrs);
      } else if (m == "2mac_splines" || m == "2mac_loess") {
        TwoStageOptions opt;
        opt.smoother = m == "2mac_splines" ? Smoother::rcs(0) : Smoother::loess();
        o = score_curve(two_stage_ma(ds, opt, grid), avg_on_grid, clusters_on_grid);
      } else if (m == "mixc") {
        MixcOptions opt;
        opt.variant = sc.mixc_variant;
        opt.n_samples = sc.band_samples;
        opt.seed = rng::derive(key, {purpose::band});
        GlmmSpec spec;
        spec.variant = opt.variant;
        const auto fit = fit_glmm(ds, spec, opt.glmm);
        if (!fit.converged) throw Error(ErrorKind::infeasible, "GLMM did not converge");
        o = score_curve(mixc_curve(fit, opt, grid), avg_on_grid, clusters_on_grid);
      }
      r.methods[m] = std::move(o);
    }
  } catch (const Error& e) {
    r.failed = true;
    r.failure = e.what();
    r.methods.clear();
  }
  return r;
}

}  // namespace detail

using ProgressCallback = std::function<void(const RepResult&)>;

/// Runs all reps (in parallel over `threads` workers) and aggregates. Output
/// depends only on the scenario, never on `threads`.
inline SimReport run_scenario(const Scenario& sc, unsigned threads = 1, const ProgressCallback& progress = {}) {
  sc.validate();
  const Superpopulation sp(sc.superpop);
  SimReport report;
  report.scenario = sc;
  report.reps.resize(sc.reps);
  std::atomic<std::size_t> next{0};
  std::mutex progress_mutex;
  auto worker = [&]() {
    for (std::size_t rep = next++; rep < sc.reps; rep = next++) {
      report.reps[rep] = detail::run_rep(sp, sc, rep);
      if (progress) {
        const std::lock_guard lock(progress_mutex);
        progress(report.reps[rep]);
      }
    }
  };
  threads = std::max(1u, threads);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (const auto& r : report.reps) report.failed += r.failed ? 1 : 0;
  report.unreliable = static_cast<double>(report.failed) > 0.2 * static_cast<double>(sc.reps);
  for (const auto& m : sc.methods) {
    MethodSummary s;
    std::vector<double> values, coverage;
    std::vector<double> point_sum(sc.grid_points, 0.0);
    std::vector<std::size_t> point_n(sc.grid_points, 0);
    for (const auto& r : report.reps) {
      if (r.failed) continue;
      const auto& o = r.methods.at(m);
      if (!is_missing(o.msce_x100)) values.push_back(o.msce_x100);
      if (!is_missing(o.coverage)) coverage.push_back(o.coverage);
      for (std::size_t i = 0; i < o.coverage_points.size() && i < sc.grid_points; ++i) {
        if (is_missing(o.coverage_points[i])) continue;
        point_sum[i] += o.coverage_points[i];
        ++point_n[i];
      }
    }
    s.n = values.size();
    if (!values.empty()) {
      std::sort(values.begin(), values.end());
      s.median = quantile_sorted(values, 0.5);
      s.q25 = quantile_sorted(values, 0.25);
      s.q75 = quantile_sorted(values, 0.75);
    }
    if (!coverage.empty()) s.mean_coverage = mean(coverage);
    if (std::any_of(point_n.begin(), point_n.end(), [](auto n) { return n > 0; })) {
      for (std::size_t i = 0; i < sc.grid_points; ++i) {
        s.coverage_points.push_back(point_n[i] ? point_sum[i] / static_cast<double>(point_n[i]) : kMissing);
      }
    }
    report.summary[m] = std::move(s);
  }
  return report;
}

inline std::string SimReport::to_csv() const {
  std::string out = "rep,method,msce_x100,coverage,failed\n";
  for (const auto& r : reps) {
    if (r.failed) {
      for (const auto& m : scenario.methods) out += format("%zu,%s,,,1\n", r.rep, m.c_str());
      continue;
    }
    for (const auto& m : scenario.methods) {
      const auto& o = r.methods.at(m);
      out += format("%zu,%s,", r.rep, m.c_str()) + format_number(o.msce_x100) + "," + format_number(o.coverage) + ",0\n";
    }
  }
  return out;
}

namespace detail {

inline nlohmann::ordered_json num(double v) {
  if (is_missing(v)) return nullptr;
  return std::strtod(format("%.10g", v).c_str(), nullptr);
}

}  // namespace detail

inline std::string SimReport::to_json() const {
  using nlohmann::ordered_json;
  ordered_json j;
  const auto& sc = scenario;
  j["scenario"] = {{"superpopulation",
                    {{"label", sc.superpop.label},
                     {"beta0", detail::num(sc.superpop.beta0)},
                     {"beta1", detail::num(sc.superpop.beta1)},
                     {"sigma_u2", detail::num(sc.superpop.sigma_u2)},
                     {"n_clusters", sc.superpop.n_clusters},
                     {"n_per_cluster", sc.superpop.n_per_cluster},
                     {"seed", sc.superpop.seed}}},
                   {"epc", detail::num(sc.epc)},
                   {"dev_clusters", sc.dev_clusters},
                   {"reps", sc.reps},
                   {"seed", sc.seed},
                   {"validation", {{"clusters", sc.val_clusters}, {"total", sc.val_total}}},
                   {"grid_points", sc.grid_points},
                   {"cgc_groups", sc.cgc_groups},
                   {"band_samples", sc.band_samples},
                   {"mixc_variant", to_string(sc.mixc_variant)},
                   {"truth", {{"average_draws", sc.truth.average_draws},
                              {"cluster_draws", sc.truth.cluster_draws},
                              {"knots", sc.truth.knots}}},
                   {"methods", sc.methods}};
  j["failed_reps"] = failed;
  j["unreliable"] = unreliable;
  ordered_json methods = ordered_json::object();
  for (const auto& m : sc.methods) {
    const auto& s = summary.at(m);
    ordered_json cov = ordered_json::array();
    for (double v : s.coverage_points) cov.push_back(detail::num(v));
    methods[m] = {{"n", s.n},
                  {"median_msce_x100", detail::num(s.median)},
                  {"q25_msce_x100", detail::num(s.q25)},
                  {"q75_msce_x100", detail::num(s.q75)},
                  {"mean_coverage", detail::num(s.mean_coverage)},
                  {"coverage_by_grid_point", cov}};
  }
  j["methods"] = methods;
  ordered_json failures = ordered_json::array();
  for (const auto& r : reps) {
    if (r.failed) failures.push_back({{"rep", r.rep}, {"reason", r.failure}});
  }
  j["failures"] = failures;
  return j.dump(2) + "\n";
}

/// Scenario from a JSON config: either "preset" or a "superpopulation"
/// object with beta0, beta1 and sigma_u2 (variance) or sigma_u (SD).
inline Scenario scenario_from_json(const nlohmann::json& j) {
  Scenario sc;
  try {
    if (j.contains("preset")) sc.superpop = preset(j.at("preset").get<std::string>());
    if (j.contains("superpopulation")) {
      const auto& s = j.at("superpopulation");
      sc.superpop.label = s.value("label", std::string("custom"));
      sc.superpop.beta0 = s.at("beta0").get<double>();
      sc.superpop.beta1 = s.at("beta1").get<double>();
      if (s.contains("sigma_u2")) {
        sc.superpop.sigma_u2 = s.at("sigma_u2").get<double>();
      } else if (s.contains("sigma_u")) {
        const double sd = s.at("sigma_u").get<double>();
        sc.superpop.sigma_u2 = sd * sd;
      } else {
        throw Error(ErrorKind::invalid_argument, "superpopulation needs sigma_u2 or sigma_u");
      }
      sc.superpop.target_auc = kMissing;
      sc.superpop.target_icc = kMissing;
      if (s.contains("n_clusters")) sc.superpop.n_clusters = s.at("n_clusters").get<std::size_t>();
      if (s.contains("n_per_cluster")) sc.superpop.n_per_cluster = s.at("n_per_cluster").get<std::size_t>();
      if (s.contains("seed")) sc.superpop.seed = s.at("seed").get<std::uint64_t>();
    }
    if (j.contains("epc")) sc.epc = j.at("epc").get<double>();
    if (j.contains("dev_clusters")) sc.dev_clusters = j.at("dev_clusters").get<std::size_t>();
    if (j.contains("reps")) sc.reps = j.at("reps").get<std::size_t>();
    if (j.contains("seed")) sc.seed = j.at("seed").get<std::uint64_t>();
    if (j.value("full_scale", false)) sc.set_full_scale();
    if (j.contains("validation")) {
      const auto& v = j.at("validation");
      if (v.contains("clusters")) sc.val_clusters = v.at("clusters").get<std::size_t>();
      if (v.contains("total")) sc.val_total = v.at("total").get<std::size_t>();
      if (v.contains("per_cluster")) sc.val_total = v.at("per_cluster").get<std::size_t>() * sc.val_clusters;
    }
    if (j.contains("methods")) sc.methods = j.at("methods").get<std::vector<std::string>>();
    if (j.contains("grid_points")) sc.grid_points = j.at("grid_points").get<std::size_t>();
    if (j.contains("cgc_groups")) sc.cgc_groups = j.at("cgc_groups").get<std::size_t>();
    if (j.contains("band_samples")) sc.band_samples = j.at("band_samples").get<std::size_t>();
    if (j.contains("mixc_variant")) {
      const auto v = j.at("mixc_variant").get<std::string>();
      if (v != "slope" && v != "intercept") throw Error(ErrorKind::invalid_argument, "mixc_variant must be slope or intercept");
      sc.mixc_variant = v == "slope" ? GlmmVariant::slope : GlmmVariant::intercept;
    }
    if (j.contains("truth")) {
      const auto& t = j.at("truth");
      sc.truth.average_draws = t.value("average_draws", sc.truth.average_draws);
      sc.truth.cluster_draws = t.value("cluster_draws", sc.truth.cluster_draws);
      sc.truth.knots = t.value("knots", sc.truth.knots);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::schema, std::string("scenario config: ") + e.what());
  }
  sc.validate();
  return sc;
}

}  // namespace clustcal::sim
