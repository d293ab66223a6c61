// Acceptance suite: runs every end-to-end criterion at full tolerance and
// prints one PASS/FAIL line each. Exit status is nonzero if any fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "clustcal/calib.hpp"
#include "clustcal/glmm.hpp"
#include "clustcal/logistic.hpp"
#include "clustcal/meta.hpp"
#include "clustcal/sim.hpp"
#include "clustcal/smoothers.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace clustcal;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back((ok ? "" : "!") + what);
  }
};

struct Criterion {
  int id;
  std::string name;
  std::function<void(Outcome&)> body;
};

unsigned worker_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// --- 1 -------------------------------------------------------------------------

void superpopulation_fidelity(Outcome& out) {
  for (const auto& label : sim::preset_labels()) {
    const auto t0 = Clock::now();
    const sim::Superpopulation sp(sim::preset(label));
    const auto s = sim::population_sample(sp, 100000);
    double events = 0.0;
    for (double y : s.y) events += y;
    const double rate = events / static_cast<double>(s.size());
    const double auc = sim::empirical_auc(s.risk, s.y);
    const double secs = seconds_since(t0);
    const double target = sp.config().target_auc;
    out.check(std::abs(rate - 0.30) <= 0.01, format("%s rate=%.4f", label.c_str(), rate));
    out.check(std::abs(auc - target) <= 0.01, format("%s auc=%.4f (target %.2f)", label.c_str(), auc, target));
    out.check(secs < 10.0, format("%s %.1fs", label.c_str(), secs));
  }
}

// --- 2 -------------------------------------------------------------------------

void icc_recovery(Outcome& out) {
  const auto t0 = Clock::now();
  std::vector<double> estimates;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    fixture::ClusteredSpec s;
    s.clusters = 50;
    s.per_cluster = 2000;
    s.sigma_u2 = 0.5;
    s.risk_sd = 0.0;
    s.seed = seed;
    const auto ds = fixture::clustered(s);
    std::vector<std::string> ids;
    for (const auto& r : ds.records()) ids.push_back(r.cluster_id);
    const double est = fit_null_intercept_model(ds.outcomes(), ids).sigma_u2;
    estimates.push_back(est);
    out.check(est >= 0.35 && est <= 0.65, format("seed %llu: %.3f", static_cast<unsigned long long>(seed), est));
  }
  const double med = oracle::quantile7(estimates, 0.5);
  out.check(med >= 0.45 && med <= 0.55, format("median=%.3f", med));
  const double secs = seconds_since(t0);
  out.check(secs < 120.0, format("%.1fs", secs));
}

// --- 3, 4, 5 -----------------------------------------------------------------

sim::Scenario desk_scenario(const std::string& preset_label) {
  sim::Scenario sc;
  sc.superpop = sim::preset(preset_label);
  sc.epc = 200;
  sc.dev_clusters = 30;
  sc.reps = 25;
  sc.val_clusters = 30;
  sc.val_total = 30 * 500;
  sc.seed = 7;
  return sc;
}

double median_of(const sim::SimReport& r, const std::string& method) { return r.summary.at(method).median; }

std::optional<sim::SimReport> high_icc_report;
double high_icc_seconds = 0.0;

const sim::SimReport& high_icc_run() {
  if (!high_icc_report) {
    const auto t0 = Clock::now();
    high_icc_report = sim::run_scenario(desk_scenario("P2"), worker_threads());
    high_icc_seconds = seconds_since(t0);
  }
  return *high_icc_report;
}

void desk_reproduction(Outcome& out) {
  const auto& r = high_icc_run();
  const double flex = median_of(r, "flexible");
  for (const char* m : {"cgc_grouped", "2mac_splines", "mixc"}) {
    const double v = median_of(r, m);
    out.check(flex > v, format("flexible %.4f > %s %.4f", flex, m, v));
  }
  out.check(flex >= 0.13 / 2 && flex <= 0.13 * 2, format("flexible %.4f in [0.065, 0.26]", flex));
  for (const char* m : {"mixc", "2mac_splines"}) {
    const double v = median_of(r, m);
    out.check(v >= 0.04 / 3 && v <= 0.05 * 3, format("%s %.4f in [0.0133, 0.15]", m, v));
  }
  out.check(r.failed == 0, format("failed reps %zu", r.failed));
  out.check(high_icc_seconds < 1800.0, format("%.0fs", high_icc_seconds));
}

void low_icc_sanity(Outcome& out) {
  const auto r = sim::run_scenario(desk_scenario("P4"), worker_threads());
  for (const char* m : {"cgc_grouped", "2mac_splines", "mixc"}) {
    const double v = median_of(r, m);
    out.check(v <= 0.10, format("%s %.4f <= 0.10", m, v));
  }
}

void coverage(Outcome& out) {
  const auto& r = high_icc_run();
  const double splines = r.summary.at("2mac_splines").mean_coverage;
  const double loess = r.summary.at("2mac_loess").mean_coverage;
  out.check(splines >= 0.90 && splines <= 0.98, format("2mac_splines %.3f in [0.90, 0.98]", splines));
  out.check(loess < splines, format("2mac_loess %.3f < 2mac_splines %.3f", loess, splines));
}

// --- 6 -------------------------------------------------------------------------

std::vector<EffectEstimate> effects(const std::vector<double>& theta, const std::vector<double>& var) {
  std::vector<EffectEstimate> e;
  for (std::size_t i = 0; i < theta.size(); ++i) e.push_back({theta[i], var[i], "c" + std::to_string(i)});
  return e;
}

void oracle_equivalences(Outcome& out) {
  auto timed = [&](const std::string& name, const std::function<void()>& f) {
    const auto t0 = Clock::now();
    f();
    const double secs = seconds_since(t0);
    out.check(secs < 60.0, format("%s %.1fs", name.c_str(), secs));
  };

  timed("reml", [&] {
    const rng::Stream s(5);
    double worst = 0.0;
    for (int rep = 0; rep < 5; ++rep) {
      std::vector<double> th, v;
      for (int j = 0; j < 6; ++j) {
        th.push_back(0.4 * s.normal(rep * 100 + j));
        v.push_back(0.005 + 0.05 * s.uniform(rep * 100 + 50 + j));
      }
      double m = 0.0, var = 0.0;
      for (double t : th) m += t / 6.0;
      for (double t : th) var += (t - m) * (t - m) / 5.0;
      const double grid = oracle::grid_reml_tau2(th, v, 0.0, 10.0 * var, 1e-6);
      worst = std::max(worst, std::abs(reml_tau2(effects(th, v)) - grid));
    }
    out.check(worst <= 1e-5, format("REML tau2 vs grid: %.2e", worst));
  });

  timed("irls", [&] {
    const rng::Stream s(9);
    std::vector<double> x(400), y(400);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = 1.5 * s.normal(i);
      y[i] = s.uniform(1000 + i) < expit(-0.5 + 0.8 * x[i] + 0.3 * std::sin(2 * x[i])) ? 1.0 : 0.0;
    }
    const auto design = DesignSpec::spline(place_knots(x, 4));
    const auto fit = fit_logistic(design, x, y, {.max_iter = 100, .tol = 1e-14});
    const Eigen::MatrixXd X = design.matrix(x);
    oracle::Matrix rows(static_cast<std::size_t>(X.rows()));
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      for (Eigen::Index k = 0; k < X.cols(); ++k) rows[static_cast<std::size_t>(i)].push_back(X(i, k));
    }
    const auto o = oracle::newton_logistic(rows, y);
    double worst = 0.0;
    for (std::size_t k = 0; k < o.beta.size(); ++k) {
      worst = std::max(worst, std::abs(fit.coefficients(static_cast<Eigen::Index>(k)) - o.beta[k]));
    }
    out.check(worst <= 1e-8, format("IRLS vs Newton: %.2e", worst));
  });

  timed("laplace", [&] {
    fixture::ClusteredSpec s;
    s.clusters = 5;
    s.per_cluster = 50;
    s.sigma_u2 = 0.5;
    s.seed = 11;
    const auto ds = fixture::clustered(s);
    const auto fit = fit_glmm(ds, {GlmmVariant::intercept, std::nullopt});
    double aghq = 0.0;
    std::vector<double> lp, y;
    for (const auto& id : ds.cluster_ids()) {
      ds.cluster_data(id, lp, y);
      std::vector<double> offset;
      for (double x : lp) offset.push_back(fit.fixed_row(x).dot(fit.beta));
      aghq += oracle::aghq_cluster_loglik(offset, y, fit.lambda(0, 0), 30);
    }
    const double gap = std::abs(fit.laplace_loglik() - aghq);
    out.check(gap <= 1e-3, format("Laplace vs 30-node AGHQ: %.2e", gap));
  });

  timed("loess", [&] {
    const rng::Stream s(11);
    std::vector<double> x(20), y(20);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = 4.0 * s.uniform(i) - 2.0;
      y[i] = std::sin(2.0 * x[i]) + 0.3 * s.normal(100 + i);
    }
    const auto m = loess_fit(x, y, 0.75, 2);
    const auto d = oracle::dense_loess(m.x(), m.y(), 0.75, 2);
    double worst = std::abs(m.trace_hat() - d.trace);
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(m.fitted()[i] - d.fitted[i]));
    out.check(worst <= 1e-8, format("LOESS vs dense hat matrix: %.2e", worst));
  });

  timed("bivariate", [&] {
    auto point = [](double a, double b, double va, double vb, double cov) {
      BivariatePoint p;
      p.theta = Eigen::Vector2d(a, b);
      p.sigma << va, cov, cov, vb;
      p.n = 50;
      return p;
    };
    const std::vector<BivariatePoint> pts{point(-1.2, -1.0, 0.05, 0.02, 0.01), point(-0.6, -0.9, 0.04, 0.03, 0.012),
                                          point(-1.5, -1.3, 0.06, 0.02, 0.008), point(-0.3, -0.7, 0.05, 0.025, 0.015)};
    const double best = bivariate_reml(pts).restricted_loglik;
    double grid_best = -1e300;
    for (int i = 0; i < 20; ++i) {
      for (int j = 0; j < 20; ++j) {
        for (int k = 0; k < 20; ++k) {
          const double s1 = i / 19.0, s2 = j / 19.0, rho = -0.99 + 1.98 * k / 19.0;
          Eigen::Matrix2d om;
          om << s1 * s1, rho * s1 * s2, rho * s1 * s2, s2 * s2;
          grid_best = std::max(grid_best, bivariate_restricted_loglik(pts, om));
        }
      }
    }
    out.check(best >= grid_best - 1e-6, format("bivariate REML %.8f vs grid %.8f", best, grid_best));
  });
}

// --- 7 -------------------------------------------------------------------------

double identity_gap(const CalibrationCurve& c) {
  double gap = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const double p = c.grid[i];
    if (p <= 0.05 || p >= 0.95 || is_missing(c.estimate[i])) continue;
    gap = std::max(gap, std::abs(c.estimate[i] - p));
  }
  return gap;
}

void perfect_calibration(Outcome& out) {
  fixture::ClusteredSpec s;
  s.clusters = 20;
  s.per_cluster = 5000;
  s.seed = 2024;
  const auto ds = fixture::clustered(s);
  // Each method with the defaults the command-line tool uses.
  auto report = [&](const std::string& name, double gap) { out.check(gap < 0.02, format("%s %.4f", name.c_str(), gap)); };

  report("flexible-rcs", identity_gap(standard_flexible(ds, Smoother::rcs(3))));
  report("flexible-loess", identity_gap(standard_flexible(ds, Smoother::loess())));
  for (auto mode : {GroupingMode::grouped, GroupingMode::interval}) {
    double gap = 0.0;
    for (const auto& pt : cgc(ds, 10, mode).points) {
      if (pt.x > 0.05 && pt.x < 0.95) gap = std::max(gap, std::abs(pt.y - pt.x));
    }
    report(std::string("cgc-") + to_string(mode), gap);
  }
  TwoStageOptions splines;
  report("2mac-splines", identity_gap(two_stage_ma(ds, splines)));
  TwoStageOptions loess;
  loess.smoother = Smoother::loess();
  report("2mac-loess", identity_gap(two_stage_ma(ds, loess)));
  for (auto v : {GlmmVariant::intercept, GlmmVariant::slope}) {
    MixcOptions mo;
    mo.variant = v;
    report(std::string("mixc-") + to_string(v), identity_gap(mixc(ds, mo)));
  }
}

// --- 8 -------------------------------------------------------------------------

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void determinism(Outcome& out) {
  const auto dir = std::filesystem::temp_directory_path() / "clustcal_acceptance_determinism";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  auto simulate = [&](int threads) {
    const auto prefix = (dir / ("t" + std::to_string(threads))).string();
    const std::string cmd = std::string(CLUSTCAL_CLI_PATH) + " simulate --preset P4 --reps 5 --seed 31 --threads " +
                            std::to_string(threads) + " --out-prefix " + prefix + " > " + prefix + ".log 2>&1";
    const int status = std::system(cmd.c_str());
    out.check(WIFEXITED(status) && WEXITSTATUS(status) == 0, format("threads=%d exit", threads));
    return prefix;
  };
  const auto a = simulate(1), b = simulate(8);
  const auto csv = slurp(a + ".csv");
  out.check(!csv.empty() && csv == slurp(b + ".csv"), "CSV byte-identical at 1 and 8 threads");
  const auto json = slurp(a + ".json");
  out.check(!json.empty() && json == slurp(b + ".json"), "JSON byte-identical at 1 and 8 threads");
  std::filesystem::remove_all(dir);
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "superpopulation fidelity", superpopulation_fidelity},
      {2, "ICC recovery", icc_recovery},
      {3, "desk-scale MSCE reproduction (ICC 0.2, AUC 0.75)", desk_reproduction},
      {4, "low-ICC sanity (ICC 0.05, AUC 0.75)", low_icc_sanity},
      {5, "prediction-interval coverage", coverage},
      {6, "oracle equivalences", oracle_equivalences},
      {7, "perfect-calibration identity", perfect_calibration},
      {8, "simulate determinism across threads", determinism},
  };

  // Optional: run a subset, e.g. `acceptance 1 6`.
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    Outcome out;
    const auto t0 = Clock::now();
    try {
      c.body(out);
    } catch (const std::exception& e) {
      out.check(false, std::string("exception: ") + e.what());
    }
    std::string detail;
    for (const auto& n : out.notes) detail += (detail.empty() ? "" : "; ") + n;
    std::printf("%s %d %s [%.0fs] %s\n", out.pass ? "PASS" : "FAIL", c.id, c.name.c_str(), seconds_since(t0),
                detail.c_str());
    std::fflush(stdout);
    if (!out.pass) ++failures;
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
