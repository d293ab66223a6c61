#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "clustcal/meta.hpp"
#include "clustcal/rng.hpp"
#include "oracles.hpp"

using namespace clustcal;

namespace {

std::vector<EffectEstimate> effects(const std::vector<double>& theta, const std::vector<double>& var) {
  std::vector<EffectEstimate> e;
  for (std::size_t i = 0; i < theta.size(); ++i) e.push_back({theta[i], var[i], "c" + std::to_string(i)});
  return e;
}

const std::vector<double> kTheta{0.2, 0.5, 0.9};
const std::vector<double> kVar{0.01, 0.02, 0.03};

BivariatePoint bpoint(double a, double b, double va, double vb, double cov) {
  BivariatePoint p;
  p.theta = Eigen::Vector2d(a, b);
  p.sigma << va, cov, cov, vb;
  p.n = 50;
  return p;
}

std::vector<BivariatePoint> four_cluster_fixture() {
  return {bpoint(-1.2, -1.0, 0.05, 0.02, 0.01), bpoint(-0.6, -0.9, 0.04, 0.03, 0.012),
          bpoint(-1.5, -1.3, 0.06, 0.02, 0.008), bpoint(-0.3, -0.7, 0.05, 0.025, 0.015)};
}

}  // namespace

TEST(RemlTau2, IdenticalThetasGiveZero) {
  EXPECT_EQ(reml_tau2(effects({0.4, 0.4, 0.4}, {0.01, 0.02, 0.03})), 0.0);
}

TEST(RemlTau2, MatchesGridOracle) {
  const double tau2 = reml_tau2(effects(kTheta, kVar));
  const double grid = oracle::grid_reml_tau2(kTheta, kVar, 0.0, 1.0, 1e-6);
  EXPECT_NEAR(tau2, grid, 1e-5);
  EXPECT_GT(tau2, 0.0);
}

TEST(RemlTau2, TwoDistantEffects) {
  const std::vector<double> th{0.0, 1.0}, v{1e-6, 1e-6};
  const double tau2 = reml_tau2(effects(th, v));
  EXPECT_NEAR(tau2, oracle::grid_reml_tau2(th, v, 0.0, 5.0, 1e-5), 1e-4);
  EXPECT_GT(tau2, 0.2);
}

TEST(RemlTau2, RequiresTwoEffects) { EXPECT_THROW(reml_tau2(effects({0.1}, {0.01})), Error); }

TEST(RemlTau2, RejectsNonPositiveVariance) { EXPECT_THROW(reml_tau2(effects({0.1, 0.2}, {0.01, 0.0})), Error); }

TEST(RemlTau2, ContinuousUnderTinyPerturbation) {
  auto th = kTheta;
  const double a = reml_tau2(effects(th, kVar));
  th[1] += 1e-8;
  const double b = reml_tau2(effects(th, kVar));
  EXPECT_NEAR(a, b, 1e-6);
}

TEST(RemlTau2, RandomFixturesMatchGrid) {
  const rng::Stream s(5);
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<double> th, v;
    for (int j = 0; j < 6; ++j) {
      th.push_back(0.4 * s.normal(rep * 100 + j));
      v.push_back(0.005 + 0.05 * s.uniform(rep * 100 + 50 + j));
    }
    double var = 0.0, m = 0.0;
    for (double t : th) m += t / 6.0;
    for (double t : th) var += (t - m) * (t - m) / 5.0;
    EXPECT_NEAR(reml_tau2(effects(th, v)), oracle::grid_reml_tau2(th, v, 0.0, 10.0 * var, 1e-6), 1e-5) << rep;
  }
}

TEST(Pool, EqualEffectsNoHeterogeneity) {
  const auto r = pool(effects({0.7, 0.7, 0.7, 0.7}, {0.04, 0.04, 0.04, 0.04}), 0.0);
  EXPECT_NEAR(r.mu, 0.7, 1e-14);
  EXPECT_NEAR(r.se_mu, 0.2 / 2.0, 1e-14);
  EXPECT_TRUE(r.ci.contains(r.mu));
}

TEST(Pool, WeightedMeanArithmetic) {
  const double tau2 = 0.015;
  double sw = 0.0, swt = 0.0;
  for (int j = 0; j < 3; ++j) {
    sw += 1.0 / (kVar[j] + tau2);
    swt += kTheta[j] / (kVar[j] + tau2);
  }
  const auto r = pool(effects(kTheta, kVar), tau2);
  EXPECT_NEAR(r.mu, swt / sw, 1e-10);
  EXPECT_NEAR(r.se_mu, 1.0 / std::sqrt(sw), 1e-10);
  EXPECT_NEAR(r.ci.hi - r.mu, 1.959963985 / std::sqrt(sw), 1e-8);
}

TEST(Pool, HugeVarianceEffectIgnored) {
  const auto a = pool(effects(kTheta, kVar), 0.0);
  auto th = kTheta;
  auto v = kVar;
  th.push_back(25.0);
  v.push_back(1e14);
  const auto b = pool(effects(th, v), 0.0);
  EXPECT_NEAR(a.mu, b.mu, 1e-10);
}

TEST(Pool, PermutationAndDuplication) {
  const auto base = pool(effects(kTheta, kVar), 0.02);
  const auto perm = pool(effects({0.9, 0.2, 0.5}, {0.03, 0.01, 0.02}), 0.02);
  EXPECT_NEAR(base.mu, perm.mu, 1e-14);
  auto th = kTheta, v = kVar;
  th.insert(th.end(), kTheta.begin(), kTheta.end());
  v.insert(v.end(), kVar.begin(), kVar.end());
  const auto dup = pool(effects(th, v), 0.02);
  EXPECT_NEAR(dup.mu, base.mu, 1e-14);
  EXPECT_NEAR(dup.se_mu, base.se_mu / std::sqrt(2.0), 1e-14);
}

TEST(Hksj, ZeroDispersionZeroWidth) {
  const auto h = hksj_ci(effects({0.3, 0.3, 0.3}, {0.01, 0.02, 0.05}), 0.0, 0.3, 0.95);
  EXPECT_NEAR(h.ci.lo, 0.3, 1e-14);
  EXPECT_NEAR(h.ci.hi, 0.3, 1e-14);
}

TEST(Hksj, HandComputation) {
  const double tau2 = 0.01;
  double sw = 0.0, swt = 0.0;
  for (int j = 0; j < 3; ++j) {
    sw += 1.0 / (kVar[j] + tau2);
    swt += kTheta[j] / (kVar[j] + tau2);
  }
  const double mu = swt / sw;
  double q = 0.0;
  for (int j = 0; j < 3; ++j) q += (kTheta[j] - mu) * (kTheta[j] - mu) / (kVar[j] + tau2);
  q /= 2.0 * sw;
  const double t2 = 4.302652729749464;  // t_{2, 0.975}
  const auto r = pool(effects(kTheta, kVar), tau2, CiMethod::hksj);
  EXPECT_NEAR(r.mu, mu, 1e-12);
  EXPECT_NEAR(r.ci.lo, mu - t2 * std::sqrt(q), 1e-10);
  EXPECT_NEAR(r.ci.hi, mu + t2 * std::sqrt(q), 1e-10);
  EXPECT_FALSE(r.wide_interval_warning);
}

TEST(Hksj, TwoEffectsWarn) {
  const auto r = pool(effects({0.1, 0.4}, {0.01, 0.01}), 0.0, CiMethod::hksj);
  EXPECT_TRUE(r.wide_interval_warning);
}

TEST(PredictionInterval, TauZeroReducesToSe) {
  auto m = pool(effects(kTheta, kVar), 0.0);
  const auto pi = prediction_interval(m, PiMethod::t_based, 0.95);
  EXPECT_NEAR(pi.half_width(), stats::t_critical(0.95, 1.0) * m.se_mu, 1e-12);
}

TEST(PredictionInterval, TableArithmetic) {
  MetaResult m;
  m.mu = 0.0;
  m.se_mu = 0.1;
  m.tau2 = 0.04;
  m.k = 10;
  const auto pi = prediction_interval(m, PiMethod::t_based, 0.95);
  EXPECT_NEAR(pi.half_width(), 2.306004135 * std::sqrt(0.05), 1e-8);
  EXPECT_NEAR(pi.half_width(), 0.5156, 1e-4);
}

TEST(PredictionInterval, AtLeastAsWideAsNormalCi) {
  const rng::Stream s(17);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> th, v;
    for (int j = 0; j < 3 + rep % 5; ++j) {
      th.push_back(s.normal(rep * 50 + j));
      v.push_back(0.01 + 0.1 * s.uniform(rep * 50 + 25 + j));
    }
    const auto r = random_effects_meta(effects(th, v), CiMethod::normal, PiMethod::t_based);
    ASSERT_TRUE(r.pi.has_value());
    EXPECT_TRUE(r.pi->contains(r.ci));
  }
}

TEST(PredictionInterval, NeedsThreeForT) {
  MetaResult m;
  m.k = 2;
  m.se_mu = 0.1;
  EXPECT_THROW(prediction_interval(m, PiMethod::t_based), Error);
  EXPECT_NO_THROW(prediction_interval(m, PiMethod::normal));
}

TEST(PredictionInterval, TApproachesNormalForLargeK) {
  MetaResult m;
  m.k = 1000;
  m.se_mu = 0.05;
  m.tau2 = 0.02;
  const double t = prediction_interval(m, PiMethod::t_based).half_width();
  const double z = prediction_interval(m, PiMethod::normal).half_width();
  EXPECT_NEAR(t / z, 1.0, 0.003);
}

TEST(BivariateReml, DecouplesToUnivariate) {
  // Diagonal within-cluster covariances and a diagonal Omega: each margin is
  // an independent univariate REML problem.
  std::vector<BivariatePoint> pts;
  const std::vector<double> a{-1.0, -0.4, -1.3, -0.2, -0.9}, b{0.3, 0.8, 0.1, 0.5, 0.9};
  const std::vector<double> va{0.05, 0.03, 0.06, 0.04, 0.05}, vb{0.02, 0.04, 0.03, 0.02, 0.05};
  for (int j = 0; j < 5; ++j) pts.push_back(bpoint(a[j], b[j], va[j], vb[j], 0.0));
  BivariateOptions opt;
  opt.diagonal_omega = true;
  const auto r = bivariate_reml(pts, opt);
  const auto ua = random_effects_meta(effects(a, va));
  const auto ub = random_effects_meta(effects(b, vb));
  EXPECT_NEAR(r.omega(0, 0), ua.tau2, 1e-4);
  EXPECT_NEAR(r.omega(1, 1), ub.tau2, 1e-4);
  EXPECT_NEAR(r.mu(0), ua.mu, 1e-4);
  EXPECT_NEAR(r.mu(1), ub.mu, 1e-4);
}

TEST(BivariateReml, UnstructuredBeatsGridOracle) {
  const auto pts = four_cluster_fixture();
  const auto r = bivariate_reml(pts);
  const double best = r.restricted_loglik;
  EXPECT_NEAR(best, bivariate_restricted_loglik(pts, r.omega), 1e-12);
  // 20^3 grid over (sd_y, sd_p, correlation).
  double grid_best = -1e300;
  for (int i = 0; i < 20; ++i) {
    for (int j = 0; j < 20; ++j) {
      for (int k = 0; k < 20; ++k) {
        const double s1 = 1.0 * i / 19.0, s2 = 1.0 * j / 19.0, rho = -0.99 + 1.98 * k / 19.0;
        Eigen::Matrix2d om;
        om << s1 * s1, rho * s1 * s2, rho * s1 * s2, s2 * s2;
        grid_best = std::max(grid_best, bivariate_restricted_loglik(pts, om));
      }
    }
  }
  EXPECT_GE(best, grid_best - 1e-6);
}

TEST(BivariateReml, OmegaIsPsd) {
  const rng::Stream s(77);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<BivariatePoint> pts;
    for (int j = 0; j < 3 + rep; ++j) {
      const double a = s.normal(rep * 100 + j), b = 0.8 * a + 0.3 * s.normal(rep * 100 + 50 + j);
      pts.push_back(bpoint(a, b, 0.05, 0.02, 0.6 * std::sqrt(0.05 * 0.02)));
    }
    const auto r = bivariate_reml(pts);
    EXPECT_GE(r.omega(0, 0), 0.0);
    EXPECT_GE(r.omega(1, 1), 0.0);
    EXPECT_LE(std::abs(r.between_correlation()), 1.0 + 1e-12);
    EXPECT_TRUE(r.pi_y.contains(r.ci_y));
  }
}

TEST(BivariateReml, NeedsThreeClusters) {
  auto pts = four_cluster_fixture();
  pts.resize(2);
  EXPECT_THROW(bivariate_reml(pts), Error);
}

TEST(BivariateReml, IntervalFormulas) {
  const auto pts = four_cluster_fixture();
  const auto r = bivariate_reml(pts);
  const double se = std::sqrt(r.cov_mu(0, 0));
  EXPECT_NEAR(r.ci_y.hi - r.mu(0), 1.959963985 * se, 1e-8);
  EXPECT_NEAR(r.pi_y.hi - r.mu(0), stats::t_critical(0.95, 2.0) * std::sqrt(r.omega(0, 0) + se * se), 1e-10);
}

TEST(RegularizePsd, FloorsEigenvalues) {
  Eigen::Matrix2d m;
  m << 1.0, 1.0, 1.0, 1.0;  // singular
  const auto r = regularize_psd(m);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(r);
  EXPECT_GE(es.eigenvalues().minCoeff(), 1e-10 * 0.999);
  EXPECT_NEAR(r(0, 1), 1.0, 1e-9);
}
