#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hetspill/estimators.hpp"
#include "hetspill/simgen.hpp"
#include "test_util.hpp"

using namespace hetspill;
using testutil::vec;

namespace {

Dataset small_dataset() {
  Dataset ds;
  ds.covariate_names = {"x"};
  Eigen::MatrixXd X1(3, 1), X2(2, 1);
  X1 << 0, 1, 2;
  X2 << 1, -1;
  ds.clusters.push_back(testutil::cluster("a", X1, {1, 0, 1}, vec({2.0, 1.0, 3.5})));
  ds.clusters.push_back(testutil::cluster("b", X2, {0, 1}, vec({0.5, 4.0})));
  return ds;
}

/// Brute-force product of Bernoulli probabilities.
double policy_prob(const Eigen::VectorXd& p, const std::vector<int>& a, int skip = -1) {
  double out = 1.0;
  for (int j = 0; j < static_cast<int>(a.size()); ++j)
    if (j != skip) out *= a[j] ? p[j] : 1 - p[j];
  return out;
}

}  // namespace

// Hand-rolled Hajek estimates from first principles.
TEST(Estimators, MatchesDirectFormulas) {
  const auto ds = small_dataset();
  const double alpha = 0.4, q = 0.5;
  const auto design = DesignPropensity::constant(q);
  const Eigen::VectorXd g = vec({0.7});
  double num[3] = {0, 0, 0}, den[3] = {0, 0, 0};
  for (const auto& c : ds.clusters) {
    const auto p = allocate_cluster(c.X, {alpha, g}).p;
    const double f = std::pow(q, static_cast<double>(c.size()));
    const double w = policy_prob(p, c.A) / f;
    for (Eigen::Index j = 0; j < c.size(); ++j) {
      num[2] += w * c.Y[j];
      den[2] += w;
      const int a = c.A[j];
      const double wj = policy_prob(p, c.A, static_cast<int>(j)) / f;
      num[a] += wj * c.Y[j];
      den[a] += wj;
    }
  }
  const auto solved = solve_policy(ds, {alpha, g});
  EXPECT_NEAR(estimate_mu(ds, solved, design), num[2] / den[2], 1e-13);
  EXPECT_NEAR(estimate_mu_fixed(ds, solved, design, 0), num[0] / den[0], 1e-13);
  EXPECT_NEAR(estimate_mu_fixed(ds, solved, design, 1), num[1] / den[1], 1e-13);

  const auto mu = estimate_mu_set(ds, design, alpha, {Eigen::VectorXd::Zero(1), g});
  EXPECT_NEAR(mu(Estimand::Marginal, 1), num[2] / den[2], 1e-13);
  EXPECT_NEAR(mu(Estimand::Untreated, 1), num[0] / den[0], 1e-13);
  EXPECT_NEAR(mu(Estimand::Treated, 1), num[1] / den[1], 1e-13);
}

TEST(Estimators, WeightFunctions) {
  const auto ds = small_dataset();
  const auto& c = ds.clusters[0];
  const auto design = DesignPropensity::constant(0.5);
  const auto alloc = allocate_cluster(c.X, {0.4, vec({0.7})});
  EXPECT_NEAR(cluster_weight(c, alloc, design), policy_prob(alloc.p, c.A) / 0.125, 1e-13);
  EXPECT_NEAR(unit_weight_fixed(c, alloc, design, 0, 1), policy_prob(alloc.p, c.A, 0) / 0.125, 1e-13);
  EXPECT_EQ(unit_weight_fixed(c, alloc, design, 0, 0), 0.0);
  EXPECT_THROW(unit_weight_fixed(c, alloc, design, 3, 0), std::out_of_range);
}

// Averaging the estimator's per-cluster numerators over every treatment
// vector under the design recovers the exact potential-outcome means
// computed by enumeration under the policy.
TEST(Estimators, WeightsAreUnbiasedByEnumeration) {
  const int n = 4;
  Eigen::MatrixXd X(n, 2);
  X << 1, 0, 0, 1, 1, 1, 0, 0;
  const double q = 0.35, alpha = 0.3;
  const auto design = DesignPropensity::constant(q);
  const Eigen::VectorXd g = vec({1.1, -0.4});
  const auto alloc = allocate_cluster(X, {alpha, g});
  sim::Scenario1Params p;
  p.beta3 = 0.7;
  p.beta4 = 1.5;
  p.beta5 = -0.5;
  p.beta2 = Eigen::Vector2d(0.2, 0.3);
  p.cluster_size = n;
  const sim::OutcomeLaw law = [&](const Eigen::MatrixXd& x, std::span<const int> s, std::span<double> out) {
    sim::scenario1_expected_outcomes(p, x, s, out);
  };
  const auto exact = sim::exact_potential_means(X, law, alloc);

  double e_num[3] = {0, 0, 0};
  for (unsigned m = 0; m < (1u << n); ++m) {
    auto c = testutil::cluster("c", X, testutil::bits(m, n), Eigen::VectorXd::Zero(n));
    std::vector<double> y(n);
    law(X, c.A, y);
    for (int j = 0; j < n; ++j) c.Y[j] = y[j];
    const double f = std::exp(log_design_prob(c, design));
    const auto s = cluster_sums(c, alloc, log_design_prob(c, design));
    for (int e = 0; e < 3; ++e) e_num[e] += f * s.swy[e] / n;
  }
  EXPECT_NEAR(e_num[2], exact.marginal, 1e-12);
  EXPECT_NEAR(e_num[0], exact.fixed[0], 1e-12);
  EXPECT_NEAR(e_num[1], exact.fixed[1], 1e-12);
}

// Property: Y -> a Y + b maps every estimate to a mu + b.
TEST(Estimators, LocationScaleEquivariance) {
  sim::Scenario1Params p;
  p.clusters = 40;
  p.beta4 = 1.0;
  auto ds = sim::gen_scenario1(p, 77);
  const auto design = DesignPropensity::constant(0.5);
  const std::vector<Eigen::VectorXd> gammas{vec({0, 0}), vec({0.5, -0.5}), vec({-1, 0.3})};
  const auto mu = estimate_mu_set(ds, design, 0.45, gammas);
  const double a = -2.5, b = 10.0;
  for (auto& c : ds.clusters) c.Y = (a * c.Y.array() + b).matrix();
  const auto mu2 = estimate_mu_set(ds, design, 0.45, gammas);
  for (Eigen::Index m = 0; m < mu.size(); ++m)
    EXPECT_NEAR(mu2.values[m], a * mu.values[m] + b, 1e-12 * (1 + std::abs(b)));
  for (EffectKind k : kEffectKinds) {
    const Eigen::VectorXd c = effect_contrast(mu, k, 1, 0);
    EXPECT_NEAR(c.dot(mu2.values), a * c.dot(mu.values), 1e-12 * (1 + std::abs(b)));
  }
}

TEST(Estimators, ClusterOrderDoesNotMatterBeyondRounding) {
  sim::Scenario1Params p;
  p.clusters = 25;
  auto ds = sim::gen_scenario1(p, 8);
  const auto design = DesignPropensity::constant(0.5);
  const std::vector<Eigen::VectorXd> gammas{vec({0, 0}), vec({1, 0})};
  const auto mu = estimate_mu_set(ds, design, 0.5, gammas);
  std::reverse(ds.clusters.begin(), ds.clusters.end());
  const auto mu2 = estimate_mu_set(ds, design, 0.5, gammas);
  EXPECT_LE((mu.values - mu2.values).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Estimators, SingleClusterMarginalIsUnweightedMean) {
  Dataset ds;
  ds.covariate_names = {"x"};
  Eigen::MatrixXd X(4, 1);
  X << 0.3, 1.2, -0.5, 2.0;
  ds.clusters.push_back(testutil::cluster("a", X, {1, 0, 0, 1}, vec({1.0, 2.0, 3.0, 10.0})));
  const auto mu = estimate_mu_set(ds, DesignPropensity::constant(0.5), 0.3, {vec({1.5})});
  EXPECT_NEAR(mu(Estimand::Marginal, 0), 4.0, 1e-14);
}

TEST(Estimators, DegenerateArmThrows) {
  Dataset ds;
  ds.covariate_names = {"x"};
  ds.clusters.push_back(testutil::cluster("a", Eigen::MatrixXd::Zero(2, 1), {0, 0}, vec({1, 2})));
  ds.clusters.push_back(testutil::cluster("b", Eigen::MatrixXd::Zero(2, 1), {0, 0}, vec({1, 2})));
  const auto design = DesignPropensity::constant(0.5);
  EXPECT_THROW(estimate_mu_set(ds, design, 0.5, {vec({0})}), EstimationError);
  const auto solved = solve_policy(ds, {0.5, vec({0})});
  EXPECT_THROW(estimate_mu_fixed(ds, solved, design, 1), EstimationError);
  EXPECT_NO_THROW(estimate_mu_fixed(ds, solved, design, 0));
  std::vector<bool> flags;
  const auto t = estimating_table(ds, design, 0.5, {vec({0})});
  const auto mu = hajek_ratios(t, {}, &flags);
  EXPECT_TRUE(flags[1]);
  EXPECT_TRUE(std::isnan(mu[1]));
}

TEST(Estimators, GammaSetValidation) {
  const auto ds = small_dataset();
  const auto design = DesignPropensity::constant(0.5);
  EXPECT_THROW(estimate_mu_set(ds, design, 0.5, {}), std::invalid_argument);
  EXPECT_THROW(estimate_mu_set(ds, design, 0.5, {vec({0, 1})}), std::invalid_argument);
  EXPECT_THROW(estimate_mu_set(ds, design, 0.5, {vec({1}), vec({1})}), std::invalid_argument);
  EXPECT_THROW(estimate_mu_set(ds, design, 1.5, {vec({1})}), std::invalid_argument);
}

TEST(Effects, ContrastsAndOrdering) {
  MuSet mu;
  mu.alpha = 0.5;
  mu.gammas = {vec({0}), vec({1})};
  mu.values = vec({1.0, 2.0, 5.0, 7.0, 3.0, 4.5});  // Y0(g0,g1), Y1(g0,g1), Y(g0,g1)
  const auto reps = contrast_effects(mu, vec({1}), vec({0}));
  ASSERT_EQ(reps.size(), 4u);
  EXPECT_EQ(reps[0].kind, EffectKind::DE);
  EXPECT_DOUBLE_EQ(reps[0].estimate, 7.0 - 2.0);
  EXPECT_DOUBLE_EQ(reps[1].estimate, 2.0 - 1.0);
  EXPECT_DOUBLE_EQ(reps[2].estimate, 7.0 - 5.0);
  EXPECT_DOUBLE_EQ(reps[3].estimate, 4.5 - 3.0);
  EXPECT_THROW(contrast_effects(mu, vec({2}), vec({0})), std::invalid_argument);
  const auto C = effect_contrast_matrix(mu, EffectKind::OE, 0);
  EXPECT_EQ(C.rows(), 2);
  EXPECT_DOUBLE_EQ((C * mu.values)[1], 1.5);
  EXPECT_EQ(parse_effect_kind("IE1"), EffectKind::IE1);
  EXPECT_THROW(parse_effect_kind("XX"), std::invalid_argument);
}
