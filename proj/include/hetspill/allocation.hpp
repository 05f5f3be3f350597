#pragma once

// Hypothetical stochastic allocation P_{alpha,gamma,X}: independent Bernoulli
// treatment with logit(p_ij) = xi_i + gamma' X_ij, where the cluster intercept
// xi_i is chosen so that the cluster mean of p_ij equals alpha.

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "hetspill/common.hpp"
#include "hetspill/data.hpp"
#include "hetspill/parallel.hpp"

namespace hetspill {

struct AllocationPolicy {
  double alpha = 0.5;
  Eigen::VectorXd gamma;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0))
      throw std::invalid_argument("allocation policy: alpha must lie in (0,1)");
    if (!gamma.allFinite()) throw std::invalid_argument("allocation policy: gamma must be finite");
  }
};

inline constexpr double kDefaultInterceptTol = 1e-10;

struct InterceptSolution {
  double xi = 0.0;
  double residual = 0.0;  // mean propensity - alpha at xi
  int iterations = 0;
};

/// Root of g(xi) = mean_j expit(xi + offsets_j) - alpha by safeguarded
/// Newton with a bisection fallback. g is strictly increasing from -alpha to
/// 1-alpha, and [logit(alpha) - M - 1, logit(alpha) + M + 1] with
/// M = max_j |offsets_j| brackets the root.
inline InterceptSolution solve_intercept_offsets(std::span<const double> offsets, double alpha,
                                                 double tol = kDefaultInterceptTol) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("solve_intercept: alpha outside (0,1)");
  if (!(tol > 0.0)) throw std::invalid_argument("solve_intercept: tol must be positive");
  if (offsets.empty()) throw std::invalid_argument("solve_intercept: empty cluster");

  const double n = static_cast<double>(offsets.size());
  double spread = 0.0;
  bool constant = true;
  for (double s : offsets) {
    spread = std::max(spread, std::abs(s));
    constant = constant && s == offsets[0];
  }
  const double center = logit(alpha);
  if (constant) {
    // every unit shares one propensity: the root is explicit
    const double xi = center - offsets[0];
    return {xi, expit(xi + offsets[0]) - alpha, 0};
  }

  auto eval = [&](double xi, double& g, double& dg) {
    CompensatedSum sp, sd;
    for (double s : offsets) {
      const double p = expit(xi + s);
      sp.add(p);
      sd.add(p * (1.0 - p));
    }
    g = sp.value() / n - alpha;
    dg = sd.value() / n;
  };

  double lo = center - spread - 1.0;
  double hi = center + spread + 1.0;
  double xi = center;
  double g = 0.0, dg = 0.0;
  constexpr int kMaxIter = 400;
  int it = 0;
  for (; it < kMaxIter; ++it) {
    eval(xi, g, dg);
    if (std::abs(g) <= tol) return {xi, g, it + 1};
    if (g < 0.0)
      lo = xi;
    else
      hi = xi;
    double next = dg > 0.0 ? xi - g / dg : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (next == xi || hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(xi))) {
      // bracket exhausted at double resolution
      eval(next, g, dg);
      return {next, g, it + 1};
    }
    xi = next;
  }
  eval(xi, g, dg);
  return {xi, g, it};
}

/// Linear predictor offsets gamma' X_ij for every unit of a cluster.
inline std::vector<double> policy_offsets(const Eigen::MatrixXd& X, const Eigen::VectorXd& gamma) {
  if (gamma.size() != X.cols())
    throw std::invalid_argument("policy gamma has " + std::to_string(gamma.size()) +
                                " entries, covariate matrix has " + std::to_string(X.cols()) + " columns");
  std::vector<double> off(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index j = 0; j < X.rows(); ++j) off[static_cast<std::size_t>(j)] = X.row(j).dot(gamma);
  return off;
}

inline double solve_intercept(const Eigen::MatrixXd& X, const Eigen::VectorXd& gamma, double alpha,
                              double tol = kDefaultInterceptTol) {
  const auto off = policy_offsets(X, gamma);
  return solve_intercept_offsets(off, alpha, tol).xi;
}

/// Per-cluster solved allocation: intercept, linear predictors eta_ij and
/// propensities p_ij = expit(eta_ij), with the log-probabilities cached.
struct ClusterAllocation {
  double xi = 0.0;
  Eigen::VectorXd eta;
  Eigen::VectorXd p;
  Eigen::VectorXd log_p;    // ln p_ij
  Eigen::VectorXd log_1mp;  // ln (1 - p_ij)

  Eigen::Index size() const noexcept { return p.size(); }
};

inline ClusterAllocation allocate_cluster(const Eigen::MatrixXd& X, const AllocationPolicy& policy,
                                          double tol = kDefaultInterceptTol) {
  const auto off = policy_offsets(X, policy.gamma);
  const auto sol = solve_intercept_offsets(off, policy.alpha, tol);
  ClusterAllocation out;
  const auto n = X.rows();
  out.xi = sol.xi;
  out.eta.resize(n);
  out.p.resize(n);
  out.log_p.resize(n);
  out.log_1mp.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double eta = sol.xi + off[static_cast<std::size_t>(j)];
    out.eta[j] = eta;
    out.p[j] = expit(eta);
    out.log_p[j] = log_expit(eta);
    out.log_1mp[j] = log1m_expit(eta);
  }
  return out;
}

/// A policy solved on every cluster of a dataset; downstream code reads the
/// cached intercepts and propensities instead of re-solving.
struct SolvedPolicy {
  AllocationPolicy policy;
  std::vector<ClusterAllocation> clusters;

  std::size_t num_clusters() const noexcept { return clusters.size(); }
  const ClusterAllocation& operator[](std::size_t i) const { return clusters.at(i); }
};

inline SolvedPolicy solve_policy(const Dataset& ds, const AllocationPolicy& policy,
                                 double tol = kDefaultInterceptTol, const Parallelism& par = {}) {
  policy.validate();
  if (policy.gamma.size() != ds.num_covariates())
    throw std::invalid_argument("policy gamma length does not match the number of covariates");
  SolvedPolicy out{policy, std::vector<ClusterAllocation>(ds.num_clusters())};
  parallel_for(ds.num_clusters(), par,
               [&](std::size_t i) { out.clusters[i] = allocate_cluster(ds.clusters[i].X, policy, tol); });
  return out;
}

inline Eigen::VectorXd unit_propensities(const ClusterData& cluster, const AllocationPolicy& policy,
                                         double tol = kDefaultInterceptTol) {
  policy.validate();
  return allocate_cluster(cluster.X, policy, tol).p;
}

/// ln P_{alpha,gamma,X}(A_i = a | X_i).
inline double log_policy_prob(const ClusterAllocation& alloc, std::span<const int> a) {
  if (static_cast<Eigen::Index>(a.size()) != alloc.size())
    throw std::invalid_argument("log_policy_prob: treatment vector length mismatch");
  CompensatedSum s;
  for (Eigen::Index j = 0; j < alloc.size(); ++j)
    s.add(a[static_cast<std::size_t>(j)] ? alloc.log_p[j] : alloc.log_1mp[j]);
  return s.value();
}

/// ln P_{alpha,gamma,X}(A_{i,-j} = a_{-j} | X_i). Independence across units
/// makes the leave-one-out marginal a subtraction of unit j's factor.
inline double log_policy_prob_loo(const ClusterAllocation& alloc, std::span<const int> a, Eigen::Index j) {
  if (j < 0 || j >= alloc.size()) throw std::out_of_range("log_policy_prob_loo: unit index out of range");
  if (static_cast<Eigen::Index>(a.size()) != alloc.size())
    throw std::invalid_argument("log_policy_prob_loo: treatment vector length mismatch");
  CompensatedSum s;
  for (Eigen::Index h = 0; h < alloc.size(); ++h) {
    if (h == j) continue;
    s.add(a[static_cast<std::size_t>(h)] ? alloc.log_p[h] : alloc.log_1mp[h]);
  }
  return s.value();
}

}  // namespace hetspill
