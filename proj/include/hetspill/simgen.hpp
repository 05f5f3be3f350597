#pragma once

// Simulation scenarios and their ground truth.
//
// Scenario 1: clusters of n units with binary covariates X1 ~ Bern(0.5) and X2
// concordant with X1 with probability rho, Bernoulli(p) treatment, and a
// linear outcome in own treatment and treated-neighbour fractions.
//
// Scenario 2: five-unit star clusters (unit 0 central, X1 = centrality),
// Bernoulli(p) treatment, and one-step independent-cascade diffusion of the
// outcome from treated units along the star edges with probability p_d.
//
// True effects come from the Monte-Carlo oracle (draw treatments from the
// policy, evaluate potential outcomes, average) or, for small clusters, from
// exact enumeration of all treatment vectors.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "hetspill/allocation.hpp"
#include "hetspill/common.hpp"
#include "hetspill/data.hpp"
#include "hetspill/estimators.hpp"
#include "hetspill/inference.hpp"
#include "hetspill/parallel.hpp"
#include "hetspill/rng.hpp"

namespace hetspill::sim {

struct Scenario1Params {
  std::size_t clusters = 200;
  std::size_t cluster_size = 15;
  double rho = 0.5;
  double beta0 = 1.0;
  double beta1 = 3.0;
  Eigen::Vector2d beta2 = Eigen::Vector2d::Zero();
  double beta3 = 0.0;
  double beta4 = 0.0;
  double beta5 = 0.0;
  double sigma = 1.0;
  double design_p = 0.5;

  void validate() const {
    if (clusters < 1 || cluster_size < 1) throw std::invalid_argument("scenario 1: clusters and size must be >= 1");
    if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("scenario 1: rho outside [0,1]");
    if (!(sigma >= 0.0)) throw std::invalid_argument("scenario 1: sigma must be >= 0");
    if (!(design_p > 0.0 && design_p < 1.0)) throw std::invalid_argument("scenario 1: design p outside (0,1)");
  }
};

inline constexpr Eigen::Index kStarSize = 5;

struct Scenario2Params {
  std::size_t clusters = 200;
  double rho = 0.5;
  double p_d = 0.0;
  double design_p = 0.25;

  void validate() const {
    if (clusters < 1) throw std::invalid_argument("scenario 2: clusters must be >= 1");
    if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("scenario 2: rho outside [0,1]");
    if (!(p_d >= 0.0 && p_d <= 1.0)) throw std::invalid_argument("scenario 2: p_d outside [0,1]");
    if (!(design_p > 0.0 && design_p < 1.0)) throw std::invalid_argument("scenario 2: design p outside (0,1)");
  }
};

using ScenarioParams = std::variant<Scenario1Params, Scenario2Params>;

/// x2 = x1 with probability rho, else 1 - x1.
inline int correlated_binary(int x1, double rho, rng::Engine& eng) {
  return rng::uniform01(eng) < rho ? x1 : 1 - x1;
}

// ---------------------------------------------------------------------------
// Scenario 1

/// Treated-neighbour spillover term beta3 T + beta4 T1 + beta5 T2 of unit j
/// given the cluster treatment vector s. T1/T2 are 0 when no neighbour is
/// treated.
struct Scenario1Spill {
  const Scenario1Params& p;
  const Eigen::MatrixXd& X;
  double treated = 0, treated_x1 = 0, treated_x2 = 0;

  Scenario1Spill(const Scenario1Params& params, const Eigen::MatrixXd& x, std::span<const int> s)
      : p(params), X(x) {
    for (Eigen::Index h = 0; h < X.rows(); ++h) {
      if (!s[static_cast<std::size_t>(h)]) continue;
      treated += 1;
      treated_x1 += X(h, 0);
      treated_x2 += X(h, 1);
    }
  }
  double operator()(Eigen::Index j, int s_j) const {
    const double n = static_cast<double>(X.rows());
    const double nb = treated - s_j;
    const double T = n > 1 ? nb / (n - 1) : 0.0;
    const double T1 = nb > 0 ? (treated_x1 - s_j * X(j, 0)) / nb : 0.0;
    const double T2 = nb > 0 ? (treated_x2 - s_j * X(j, 1)) / nb : 0.0;
    return p.beta3 * T + p.beta4 * T1 + p.beta5 * T2;
  }
  double base(Eigen::Index j) const { return p.beta0 + p.beta2[0] * X(j, 0) + p.beta2[1] * X(j, 1); }
};

inline Eigen::MatrixXd draw_scenario1_covariates(const Scenario1Params& p, rng::Engine& eng) {
  const auto n = static_cast<Eigen::Index>(p.cluster_size);
  Eigen::MatrixXd X(n, 2);
  for (Eigen::Index j = 0; j < n; ++j) {
    const int x1 = rng::bernoulli(eng, 0.5);
    X(j, 0) = x1;
    X(j, 1) = correlated_binary(x1, p.rho, eng);
  }
  return X;
}

inline std::string cluster_label(std::size_t i) { return "c" + std::to_string(i); }

/// Scenario-1 dataset. Cluster i draws from substream (seed, i), so the
/// output is bit-identical for identical params and seed.
inline Dataset gen_scenario1(const Scenario1Params& p, std::uint64_t seed) {
  p.validate();
  Dataset ds;
  ds.covariate_names = {"x1", "x2"};
  ds.clusters.resize(p.clusters);
  const auto n = static_cast<Eigen::Index>(p.cluster_size);
  for (std::size_t i = 0; i < p.clusters; ++i) {
    auto eng = rng::make_engine(seed, i, rng::kScenario1);
    ClusterData c;
    c.id = cluster_label(i);
    c.X = draw_scenario1_covariates(p, eng);
    c.A.resize(static_cast<std::size_t>(n));
    for (auto& a : c.A) a = rng::bernoulli(eng, p.design_p);
    const Scenario1Spill spill(p, c.X, c.A);
    c.Y.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const int a = c.A[static_cast<std::size_t>(j)];
      c.Y[j] = spill.base(j) + p.beta1 * a + spill(j, a) + p.sigma * rng::standard_normal(eng);
    }
    ds.clusters[i] = std::move(c);
  }
  return ds;
}

/// E[Y_ij(s)] for every unit under the Scenario-1 linear model (noise has mean 0).
inline void scenario1_expected_outcomes(const Scenario1Params& p, const Eigen::MatrixXd& X, std::span<const int> s,
                                        std::span<double> out) {
  const Scenario1Spill spill(p, X, s);
  for (Eigen::Index j = 0; j < X.rows(); ++j) {
    const int a = s[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(j)] = spill.base(j) + p.beta1 * a + spill(j, a);
  }
}

// ---------------------------------------------------------------------------
// Scenario 2

inline bool star_adjacent(Eigen::Index j, Eigen::Index h) { return j != h && (j == 0 || h == 0); }

inline Eigen::MatrixXd draw_scenario2_covariates(const Scenario2Params& p, rng::Engine& eng) {
  Eigen::MatrixXd X(kStarSize, 2);
  for (Eigen::Index j = 0; j < kStarSize; ++j) {
    const int x1 = j == 0 ? 1 : 0;
    X(j, 0) = x1;
    X(j, 1) = correlated_binary(x1, p.rho, eng);
  }
  return X;
}

/// Uniforms u(h, j) for the directed star edges h -> j; transmission happens
/// when u < p_d and h is treated.
using EdgeUniforms = Eigen::Matrix<double, kStarSize, kStarSize>;

inline EdgeUniforms draw_edge_uniforms(rng::Engine& eng) {
  EdgeUniforms u = EdgeUniforms::Ones();
  for (Eigen::Index h = 0; h < kStarSize; ++h)
    for (Eigen::Index j = 0; j < kStarSize; ++j)
      if (star_adjacent(h, j)) u(h, j) = rng::uniform01(eng);
  return u;
}

/// Whether untreated-or-not unit j receives the outcome by diffusion from a
/// treated neighbour (own treatment is irrelevant).
inline bool diffused(std::span<const int> s, const EdgeUniforms& u, double p_d, Eigen::Index j) {
  for (Eigen::Index h = 0; h < kStarSize; ++h)
    if (star_adjacent(h, j) && s[static_cast<std::size_t>(h)] && u(h, j) < p_d) return true;
  return false;
}

inline Dataset gen_scenario2(const Scenario2Params& p, std::uint64_t seed) {
  p.validate();
  Dataset ds;
  ds.covariate_names = {"x1", "x2"};
  ds.clusters.resize(p.clusters);
  for (std::size_t i = 0; i < p.clusters; ++i) {
    auto eng = rng::make_engine(seed, i, rng::kScenario2);
    ClusterData c;
    c.id = cluster_label(i);
    c.X = draw_scenario2_covariates(p, eng);
    c.A.resize(kStarSize);
    for (auto& a : c.A) a = rng::bernoulli(eng, p.design_p);
    const auto u = draw_edge_uniforms(eng);
    c.Y.resize(kStarSize);
    for (Eigen::Index j = 0; j < kStarSize; ++j)
      c.Y[j] = (c.A[static_cast<std::size_t>(j)] || diffused(c.A, u, p.p_d, j)) ? 1.0 : 0.0;
    ds.clusters[i] = std::move(c);
  }
  return ds;
}

/// E[Y_ij(s)] = s_j + (1 - s_j)(1 - (1 - p_d)^{m_j}), m_j = treated neighbours.
inline void scenario2_expected_outcomes(const Scenario2Params& p, const Eigen::MatrixXd& X, std::span<const int> s,
                                        std::span<double> out) {
  const Eigen::Index n = X.rows();
  for (Eigen::Index j = 0; j < n; ++j) {
    if (s[static_cast<std::size_t>(j)]) {
      out[static_cast<std::size_t>(j)] = 1.0;
      continue;
    }
    int m = 0;
    for (Eigen::Index h = 0; h < n; ++h)
      if (star_adjacent(h, j) && s[static_cast<std::size_t>(h)]) ++m;
    out[static_cast<std::size_t>(j)] = 1.0 - std::pow(1.0 - p.p_d, m);
  }
}

// ---------------------------------------------------------------------------
// Exact enumeration

/// Fills E[Y_ij(s)] for all units j of a cluster with covariates X.
using OutcomeLaw = std::function<void(const Eigen::MatrixXd& X, std::span<const int> s, std::span<double> out)>;

inline constexpr Eigen::Index kMaxEnumerationSize = 15;

/// Cluster-average potential outcomes under a solved allocation:
/// marginal = Ybar_i(alpha, gamma), fixed[a] = Ybar_i(a, alpha, gamma).
struct ExactClusterMeans {
  double marginal = 0.0;
  std::array<double, 2> fixed{};
  Eigen::VectorXd unit_marginal;
  std::array<Eigen::VectorXd, 2> unit_fixed;
};

inline ExactClusterMeans exact_potential_means(const Eigen::MatrixXd& X, const OutcomeLaw& law,
                                               const ClusterAllocation& alloc) {
  const Eigen::Index n = X.rows();
  if (n > kMaxEnumerationSize)
    throw std::invalid_argument("exact_potential_means: cluster size " + std::to_string(n) + " exceeds cap " +
                                std::to_string(kMaxEnumerationSize));
  if (alloc.size() != n) throw std::invalid_argument("exact_potential_means: allocation size mismatch");
  std::vector<CompensatedSum> marg(static_cast<std::size_t>(n)), fix0(static_cast<std::size_t>(n)),
      fix1(static_cast<std::size_t>(n));
  std::vector<int> s(static_cast<std::size_t>(n));
  std::vector<double> y(static_cast<std::size_t>(n));
  const std::uint32_t total = 1u << n;
  for (std::uint32_t mask = 0; mask < total; ++mask) {
    double logp = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      s[static_cast<std::size_t>(j)] = static_cast<int>((mask >> j) & 1u);
      logp += s[static_cast<std::size_t>(j)] ? alloc.log_p[j] : alloc.log_1mp[j];
    }
    law(X, s, y);
    const double prob = std::exp(logp);
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto u = static_cast<std::size_t>(j);
      marg[u].add(prob * y[u]);
      // P(A_{-j} = s_{-j}) = P(s) / P(A_j = s_j)
      const double loo = std::exp(logp - (s[u] ? alloc.log_p[j] : alloc.log_1mp[j]));
      (s[u] ? fix1 : fix0)[u].add(loo * y[u]);
    }
  }
  ExactClusterMeans out;
  out.unit_marginal.resize(n);
  out.unit_fixed[0].resize(n);
  out.unit_fixed[1].resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto u = static_cast<std::size_t>(j);
    out.unit_marginal[j] = marg[u].value();
    out.unit_fixed[0][j] = fix0[u].value();
    out.unit_fixed[1][j] = fix1[u].value();
  }
  out.marginal = out.unit_marginal.mean();
  out.fixed[0] = out.unit_fixed[0].mean();
  out.fixed[1] = out.unit_fixed[1].mean();
  return out;
}

// ---------------------------------------------------------------------------
// Ground truth

enum class TruthMethod { MonteCarlo, Exact };

struct TrueEffectRow {
  Eigen::VectorXd gamma;
  std::array<double, 3> mu{};      // Y(0), Y(1), Y  (Estimand order)
  std::array<double, 3> mu_se{};
  std::array<double, 4> effect{};  // DE, IE0, IE1, OE (EffectKind order)
  std::array<double, 4> effect_se{};
};

struct TrueEffects {
  TruthMethod method = TruthMethod::MonteCarlo;
  double alpha = 0.5;
  Eigen::VectorXd gamma_ref;
  std::size_t reps = 0;
  std::vector<TrueEffectRow> rows;

  const TrueEffectRow& at(const Eigen::VectorXd& gamma) const {
    for (const auto& r : rows)
      if (r.gamma == gamma) return r;
    throw std::invalid_argument("no true effects for gamma (" + format_gamma(gamma) + ")");
  }
};

namespace detail {

/// Turns per-replicate (or exact) stacked means (rows x 3R, MuSet order) into
/// TrueEffects with means and Monte-Carlo standard errors.
inline TrueEffects summarize_truth(const Eigen::MatrixXd& per_rep, double alpha,
                                   const std::vector<Eigen::VectorXd>& gammas, Eigen::Index ref,
                                   TruthMethod method) {
  MuSet shape{alpha, gammas, Eigen::VectorXd::Zero(3 * static_cast<Eigen::Index>(gammas.size())), {}};
  const Eigen::MatrixXd C = all_effect_contrasts(shape, ref);
  const Eigen::MatrixXd eff = per_rep * C.transpose();
  const auto reps = per_rep.rows();
  auto mean_se = [&](const Eigen::MatrixXd& m, Eigen::Index col, double& mean, double& se) {
    mean = m.col(col).mean();
    if (reps < 2 || method == TruthMethod::Exact) {
      se = 0.0;
      return;
    }
    const double var = (m.col(col).array() - mean).square().sum() / static_cast<double>(reps - 1);
    se = std::sqrt(var / static_cast<double>(reps));
  };
  TrueEffects out;
  out.method = method;
  out.alpha = alpha;
  out.gamma_ref = gammas[static_cast<std::size_t>(ref)];
  out.reps = static_cast<std::size_t>(reps);
  const auto R = static_cast<Eigen::Index>(gammas.size());
  for (Eigen::Index r = 0; r < R; ++r) {
    TrueEffectRow row;
    row.gamma = gammas[static_cast<std::size_t>(r)];
    for (int e = 0; e < 3; ++e) mean_se(per_rep, e * R + r, row.mu[e], row.mu_se[e]);
    for (int k = 0; k < 4; ++k) mean_se(eff, 4 * r + k, row.effect[k], row.effect_se[k]);
    out.rows.push_back(std::move(row));
  }
  return out;
}

inline Eigen::Index reference_index(const std::vector<Eigen::VectorXd>& gammas, const Eigen::VectorXd& gamma_ref) {
  for (std::size_t r = 0; r < gammas.size(); ++r)
    if (gammas[r].size() == gamma_ref.size() && gammas[r] == gamma_ref) return static_cast<Eigen::Index>(r);
  throw std::invalid_argument("reference gamma (" + format_gamma(gamma_ref) + ") not in the policy list");
}

}  // namespace detail

struct OracleOptions {
  std::size_t reps = 2000;
  std::uint64_t seed = 0;
  Eigen::VectorXd gamma_ref;  // empty selects the zero vector
  bool include_noise = false;  // Scenario 1: add the N(0, sigma^2) draw to potential outcomes
  double intercept_tol = kDefaultInterceptTol;
  Parallelism parallelism{};
};

/// Monte-Carlo truth. Each replicate simulates covariates for the scenario's
/// number of clusters, draws treatment vectors FROM THE POLICY, evaluates the
/// potential outcomes Y_ij(s), Y_ij(1, s_-j), Y_ij(0, s_-j), and averages them
/// within and then across clusters. Uniforms are shared across policies within
/// a replicate (common random numbers); replicate b uses substream (seed, b).
inline TrueEffects oracle_true_effects(const ScenarioParams& scenario, double alpha,
                                       const std::vector<Eigen::VectorXd>& gammas, const OracleOptions& opt = {}) {
  if (opt.reps < 1) throw std::invalid_argument("oracle_true_effects: reps must be >= 1");
  std::visit([](const auto& p) { p.validate(); }, scenario);
  check_gamma_grid(gammas, 2);
  const Eigen::VectorXd ref_gamma = opt.gamma_ref.size() ? opt.gamma_ref : Eigen::VectorXd::Zero(2);
  const Eigen::Index ref = detail::reference_index(gammas, ref_gamma);
  const auto R = static_cast<Eigen::Index>(gammas.size());
  std::vector<AllocationPolicy> policies;
  for (const auto& g : gammas) {
    policies.push_back({alpha, g});
    policies.back().validate();
  }

  Eigen::MatrixXd per_rep(static_cast<Eigen::Index>(opt.reps), 3 * R);
  parallel_for(opt.reps, opt.parallelism, [&](std::size_t b) {
    auto eng = rng::make_engine(opt.seed, b, rng::kOracle);
    std::vector<std::array<CompensatedSum, 3>> acc(static_cast<std::size_t>(R));
    std::size_t clusters = 0;
    std::vector<int> s;
    std::vector<double> y;

    if (const auto* p1 = std::get_if<Scenario1Params>(&scenario)) {
      clusters = p1->clusters;
      const auto n = static_cast<Eigen::Index>(p1->cluster_size);
      std::vector<double> u(static_cast<std::size_t>(n)), eps(static_cast<std::size_t>(n), 0.0);
      s.resize(static_cast<std::size_t>(n));
      for (std::size_t i = 0; i < clusters; ++i) {
        const Eigen::MatrixXd X = draw_scenario1_covariates(*p1, eng);
        for (auto& v : u) v = rng::uniform01(eng);
        if (opt.include_noise)
          for (auto& e : eps) e = p1->sigma * rng::standard_normal(eng);
        for (Eigen::Index r = 0; r < R; ++r) {
          const auto alloc = allocate_cluster(X, policies[static_cast<std::size_t>(r)], opt.intercept_tol);
          for (Eigen::Index j = 0; j < n; ++j)
            s[static_cast<std::size_t>(j)] = u[static_cast<std::size_t>(j)] < alloc.p[j] ? 1 : 0;
          const Scenario1Spill spill(*p1, X, s);
          CompensatedSum m0, m1, mm;
          for (Eigen::Index j = 0; j < n; ++j) {
            const int sj = s[static_cast<std::size_t>(j)];
            // neighbour fractions exclude unit j, so own treatment enters only via beta1
            const double common = spill.base(j) + spill(j, sj) + eps[static_cast<std::size_t>(j)];
            m0.add(common);
            m1.add(common + p1->beta1);
            mm.add(common + p1->beta1 * sj);
          }
          auto& a = acc[static_cast<std::size_t>(r)];
          a[0].add(m0.value() / static_cast<double>(n));
          a[1].add(m1.value() / static_cast<double>(n));
          a[2].add(mm.value() / static_cast<double>(n));
        }
      }
    } else {
      const auto& p2 = std::get<Scenario2Params>(scenario);
      clusters = p2.clusters;
      std::vector<double> u(kStarSize);
      s.resize(kStarSize);
      for (std::size_t i = 0; i < clusters; ++i) {
        const Eigen::MatrixXd X = draw_scenario2_covariates(p2, eng);
        for (auto& v : u) v = rng::uniform01(eng);
        const auto edges = draw_edge_uniforms(eng);
        for (Eigen::Index r = 0; r < R; ++r) {
          const auto alloc = allocate_cluster(X, policies[static_cast<std::size_t>(r)], opt.intercept_tol);
          for (Eigen::Index j = 0; j < kStarSize; ++j)
            s[static_cast<std::size_t>(j)] = u[static_cast<std::size_t>(j)] < alloc.p[j] ? 1 : 0;
          double m0 = 0, mm = 0;
          for (Eigen::Index j = 0; j < kStarSize; ++j) {
            const bool infected = diffused(s, edges, p2.p_d, j);
            m0 += infected ? 1.0 : 0.0;
            mm += (s[static_cast<std::size_t>(j)] || infected) ? 1.0 : 0.0;
          }
          auto& a = acc[static_cast<std::size_t>(r)];
          a[0].add(m0 / kStarSize);
          a[1].add(1.0);
          a[2].add(mm / kStarSize);
        }
      }
    }
    for (Eigen::Index r = 0; r < R; ++r)
      for (int e = 0; e < 3; ++e)
        per_rep(static_cast<Eigen::Index>(b), e * R + r) =
            acc[static_cast<std::size_t>(r)][static_cast<std::size_t>(e)].value() / static_cast<double>(clusters);
  });
  return detail::summarize_truth(per_rep, alpha, gammas, ref, TruthMethod::MonteCarlo);
}

/// Exact population truth for Scenario 2: enumerates the 2^5 concordance
/// patterns of X2 (X1 is fixed by the star) and, within each, all 2^5
/// treatment vectors.
inline TrueEffects exact_scenario2_effects(const Scenario2Params& p, double alpha,
                                           const std::vector<Eigen::VectorXd>& gammas,
                                           const Eigen::VectorXd& gamma_ref = Eigen::VectorXd::Zero(2)) {
  p.validate();
  check_gamma_grid(gammas, 2);
  const Eigen::Index ref = detail::reference_index(gammas, gamma_ref);
  const auto R = static_cast<Eigen::Index>(gammas.size());
  const OutcomeLaw law = [&p](const Eigen::MatrixXd& X, std::span<const int> s, std::span<double> out) {
    scenario2_expected_outcomes(p, X, s, out);
  };
  std::vector<std::array<CompensatedSum, 3>> acc(static_cast<std::size_t>(R));
  for (std::uint32_t pattern = 0; pattern < (1u << kStarSize); ++pattern) {
    Eigen::MatrixXd X(kStarSize, 2);
    double weight = 1.0;
    for (Eigen::Index j = 0; j < kStarSize; ++j) {
      const int x1 = j == 0 ? 1 : 0;
      const bool concordant = ((pattern >> j) & 1u) != 0;
      X(j, 0) = x1;
      X(j, 1) = concordant ? x1 : 1 - x1;
      weight *= concordant ? p.rho : 1.0 - p.rho;
    }
    if (weight == 0.0) continue;
    for (Eigen::Index r = 0; r < R; ++r) {
      const auto alloc = allocate_cluster(X, {alpha, gammas[static_cast<std::size_t>(r)]});
      const auto m = exact_potential_means(X, law, alloc);
      auto& a = acc[static_cast<std::size_t>(r)];
      a[0].add(weight * m.fixed[0]);
      a[1].add(weight * m.fixed[1]);
      a[2].add(weight * m.marginal);
    }
  }
  Eigen::MatrixXd row(1, 3 * R);
  for (Eigen::Index r = 0; r < R; ++r)
    for (int e = 0; e < 3; ++e) row(0, e * R + r) = acc[static_cast<std::size_t>(r)][static_cast<std::size_t>(e)].value();
  return detail::summarize_truth(row, alpha, gammas, ref, TruthMethod::Exact);
}

}  // namespace hetspill::sim
