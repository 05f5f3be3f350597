#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hetspill/het_test.hpp"
#include "hetspill/simgen.hpp"
#include "test_util.hpp"

using namespace hetspill;
using testutil::vec;

TEST(RangeStatistic, MaxMinusMin) {
  const std::vector<double> e{0.3, -0.2, 1.0, 0.1};
  const std::vector<Eigen::Index> all{0, 1, 2, 3}, s1{0, 3}, s2{2};
  EXPECT_DOUBLE_EQ(range_statistic(e, all, all), 1.2);
  EXPECT_DOUBLE_EQ(range_statistic(e, s1, s2), 0.3 - 1.0);
  EXPECT_THROW(range_statistic(e, {}, all), std::invalid_argument);
}

TEST(RangeStatistic, GridLookup) {
  const std::vector<Eigen::VectorXd> grid{vec({0}), vec({1}), vec({2})};
  const Eigen::VectorXd eff = vec({0.0, 0.5, -0.5});
  EXPECT_DOUBLE_EQ(range_statistic(grid, eff, {vec({1})}, {vec({2})}), 1.0);
  EXPECT_THROW(range_statistic(grid, eff, {vec({3})}, {vec({2})}), std::invalid_argument);
  EXPECT_THROW(grid_indices(grid, {vec({0.5})}), std::invalid_argument);
}

TEST(PsdFactor, ReconstructsIncludingSingular) {
  Eigen::MatrixXd A(3, 2);
  A << 1, 2, 0.5, -1, 3, 0;
  const Eigen::MatrixXd cov = A * A.transpose();  // rank 2
  const auto L = psd_factor(cov);
  EXPECT_LE((L * L.transpose() - cov).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NO_THROW(psd_factor(Eigen::MatrixXd::Zero(3, 3)));
  Eigen::MatrixXd bad = Eigen::MatrixXd::Identity(2, 2);
  bad(1, 1) = -0.5;
  EXPECT_THROW(psd_factor(bad), EstimationError);
}

// Oracle: with two independent N(0,1) effects and S1 = S2 = both, T = |z1 - z2|
// ~ |N(0, 2)|, whose 95% point is 1.959964 * sqrt(2).
TEST(NullDistribution, MatchesHalfNormalQuantile) {
  const std::vector<Eigen::Index> both{0, 1};
  const auto null = null_distribution(Eigen::MatrixXd::Identity(2, 2), both, both, 40000, 17);
  EXPECT_TRUE(std::is_sorted(null.begin(), null.end()));
  const double crit = null_critical_value(null, 0.05);
  EXPECT_NEAR(crit, 1.959963984540054 * std::sqrt(2.0), 0.05);
  EXPECT_NEAR(monte_carlo_p_value(null, crit), 0.05, 0.005);
}

TEST(NullDistribution, DeterministicAndThreadIndependent) {
  Eigen::MatrixXd cov(3, 3);
  cov << 1, 0.5, 0.2, 0.5, 2, 0.1, 0.2, 0.1, 1.5;
  const std::vector<Eigen::Index> all{0, 1, 2};
  const auto a = null_distribution(cov, all, all, 1000, 5);
  const auto b = null_distribution(cov, all, all, 1000, 5, Parallelism{4});
  EXPECT_EQ(a, b);
  EXPECT_NE(a, null_distribution(cov, all, all, 1000, 6));
  EXPECT_THROW(null_distribution(cov, all, all, 50, 5), std::invalid_argument);
  const std::vector<Eigen::Index> out{3};
  EXPECT_THROW(null_distribution(cov, out, all, 1000, 5), std::out_of_range);
}

TEST(PValue, AddOneFormula) {
  const std::vector<double> null{0.1, 0.2, 0.3, 0.4};
  EXPECT_DOUBLE_EQ(monte_carlo_p_value(null, 0.25), 3.0 / 5.0);
  EXPECT_DOUBLE_EQ(monte_carlo_p_value(null, 0.3), 3.0 / 5.0);
  EXPECT_DOUBLE_EQ(monte_carlo_p_value(null, 9.0), 1.0 / 5.0);
  EXPECT_DOUBLE_EQ(monte_carlo_p_value(null, -1.0), 1.0);
  EXPECT_DOUBLE_EQ(null_critical_value(null, 0.25), 0.3);
}

// Property: with effects drawn from the null itself, rejections occur at the
// nominal rate.
TEST(HetTest, GaussianNullCalibration) {
  Eigen::MatrixXd cov(5, 5);
  for (int a = 0; a < 5; ++a)
    for (int b = 0; b < 5; ++b) cov(a, b) = std::exp(-0.5 * std::abs(a - b));
  const std::vector<Eigen::Index> all{0, 1, 2, 3, 4};
  const auto null = null_distribution(cov, all, all, 4000, 99);
  const double crit = null_critical_value(null, 0.05);
  const Eigen::MatrixXd L = psd_factor(cov);
  std::mt19937_64 eng(4);
  std::normal_distribution<double> z;
  int rejections = 0;
  const int trials = 4000;
  for (int t = 0; t < trials; ++t) {
    Eigen::VectorXd e(5);
    for (int k = 0; k < 5; ++k) e[k] = z(eng);
    const Eigen::VectorXd x = L * e;
    if (range_statistic(std::span<const double>(x.data(), 5), all, all) > crit) ++rejections;
  }
  EXPECT_NEAR(rejections / double(trials), 0.05, 0.015);
}

TEST(HetTest, EndToEndOnScenarioData) {
  sim::Scenario1Params p;
  p.clusters = 120;
  p.beta4 = 2.0;
  const auto ds = sim::gen_scenario1(p, 21);
  std::vector<Eigen::VectorXd> grid;
  for (double g : {-1.0, -0.5, 0.0, 0.5, 1.0}) grid.push_back(vec({g, 0}));
  HetTestOptions opt;
  opt.draws = 2000;
  opt.seed = 8;
  const auto res = het_test(ds, DesignPropensity::constant(0.5), 0.5, grid, {}, {}, opt);
  EXPECT_EQ(res.grid.size(), 5u);
  EXPECT_DOUBLE_EQ(res.effects[2], 0.0);  // OE against gamma = 0
  EXPECT_DOUBLE_EQ(res.statistic, res.effects.maxCoeff() - res.effects.minCoeff());
  EXPECT_GT(res.p_value, 0.0);
  EXPECT_LE(res.p_value, 1.0);
  EXPECT_EQ(res.reject, res.statistic > res.critical_value);
  const auto again = het_test(ds, DesignPropensity::constant(0.5), 0.5, grid, {}, {}, opt);
  EXPECT_EQ(res.p_value, again.p_value);
  EXPECT_THROW(het_test(ds, DesignPropensity::constant(0.5), 0.5, grid, {}, {}, [&] {
                 auto o = opt;
                 o.level = 0.0;
                 return o;
               }()),
               std::invalid_argument);
}

TEST(HetTest, IdenticalEffectsNeverReject) {
  sim::Scenario2Params p;
  p.p_d = 0.5;
  const auto ds = sim::gen_scenario2(p, 2);
  std::vector<Eigen::VectorXd> grid{vec({-0.5, 0}), vec({0, 0}), vec({0.5, 0})};
  HetTestOptions opt;
  opt.kind = EffectKind::IE1;
  opt.draws = 500;
  opt.seed = 1;
  const auto res = het_test(ds, DesignPropensity::constant(0.25), 0.25, grid, {}, {}, opt);
  EXPECT_LE(res.effects.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_FALSE(res.reject);
}
