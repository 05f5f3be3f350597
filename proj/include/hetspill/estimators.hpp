#pragma once

// Standardized (Hajek) weighting estimators of average potential outcomes
// under stochastic allocations, and the DE / IE / OE contrasts built on them.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hetspill/allocation.hpp"
#include "hetspill/common.hpp"
#include "hetspill/data.hpp"
#include "hetspill/parallel.hpp"

namespace hetspill {

/// The three average potential outcomes estimated per policy:
/// Y(0, alpha, gamma), Y(1, alpha, gamma) and Y(alpha, gamma).
enum class Estimand : int { Untreated = 0, Treated = 1, Marginal = 2 };

inline constexpr std::array<Estimand, 3> kEstimands{Estimand::Untreated, Estimand::Treated,
                                                    Estimand::Marginal};

inline const char* estimand_name(Estimand e) {
  switch (e) {
    case Estimand::Untreated: return "Y0";
    case Estimand::Treated: return "Y1";
    case Estimand::Marginal: return "Y";
  }
  return "?";
}

/// w_i(alpha, gamma) = P_{alpha,gamma,X}(A_i | X_i) / f(A_i | X_i); shared by
/// every unit of the cluster.
inline double cluster_weight(const ClusterData& c, const ClusterAllocation& alloc,
                             const DesignPropensity& design) {
  return std::exp(log_policy_prob(alloc, c.A) - log_design_prob(c, design));
}

/// w_ij(a, alpha, gamma) = 1{A_ij = a} P(A_{i,-j} | X_i) / f(A_i | X_i).
inline double unit_weight_fixed(const ClusterData& c, const ClusterAllocation& alloc,
                                const DesignPropensity& design, Eigen::Index j, int a) {
  if (j < 0 || j >= c.size()) throw std::out_of_range("unit_weight_fixed: unit index out of range");
  if (c.A[static_cast<std::size_t>(j)] != a) return 0.0;
  return std::exp(log_policy_prob_loo(alloc, c.A, j) - log_design_prob(c, design));
}

/// Per-cluster weighted sums for the three estimands of one policy:
/// sw[e] = sum_j w_ij, swy[e] = sum_j w_ij Y_ij.
struct ClusterSums {
  std::array<double, 3> sw{};
  std::array<double, 3> swy{};
};

inline ClusterSums cluster_sums(const ClusterData& c, const ClusterAllocation& alloc, double log_design) {
  const double log_policy = log_policy_prob(alloc, c.A);
  const double log_ratio = log_policy - log_design;
  const double w = std::exp(log_ratio);
  std::array<CompensatedSum, 3> sw, swy;
  for (Eigen::Index j = 0; j < c.size(); ++j) {
    const int a = c.A[static_cast<std::size_t>(j)];
    const double y = c.Y[j];
    sw[2].add(w);
    swy[2].add(w * y);
    const double own = a ? alloc.log_p[j] : alloc.log_1mp[j];
    const double wj = std::exp(log_ratio - own);
    sw[a].add(wj);
    swy[a].add(wj * y);
  }
  ClusterSums out;
  for (int e = 0; e < 3; ++e) {
    out.sw[e] = sw[e].value();
    out.swy[e] = swy[e].value();
  }
  return out;
}

/// Weighted sums for every (cluster, estimand) column of a policy grid.
/// Column index of estimand e for policy r is e * R + r (see MuSet).
struct EstimatingTable {
  Eigen::MatrixXd sw;   // I x 3R
  Eigen::MatrixXd swy;  // I x 3R
  Eigen::VectorXd cluster_size;

  Eigen::Index num_clusters() const noexcept { return sw.rows(); }
  Eigen::Index num_columns() const noexcept { return sw.cols(); }
};

struct EstimationOptions {
  double intercept_tol = kDefaultInterceptTol;
  Parallelism parallelism{};
};

inline void check_gamma_grid(const std::vector<Eigen::VectorXd>& gammas, Eigen::Index K) {
  if (gammas.empty()) throw std::invalid_argument("gamma set must be non-empty");
  for (std::size_t r = 0; r < gammas.size(); ++r) {
    if (gammas[r].size() != K)
      throw std::invalid_argument("gamma " + std::to_string(r) + " has wrong length");
    for (std::size_t s = 0; s < r; ++s)
      if (gammas[r] == gammas[s]) throw std::invalid_argument("duplicate gamma in set");
  }
}

inline EstimatingTable estimating_table(const Dataset& ds, const DesignPropensity& design, double alpha,
                                        const std::vector<Eigen::VectorXd>& gammas,
                                        const EstimationOptions& opts = {}) {
  check_gamma_grid(gammas, ds.num_covariates());
  const auto I = static_cast<Eigen::Index>(ds.num_clusters());
  const auto R = static_cast<Eigen::Index>(gammas.size());
  EstimatingTable t;
  t.sw.resize(I, 3 * R);
  t.swy.resize(I, 3 * R);
  t.cluster_size.resize(I);
  std::vector<AllocationPolicy> policies;
  for (const auto& g : gammas) {
    AllocationPolicy p{alpha, g};
    p.validate();
    policies.push_back(p);
  }
  parallel_for(ds.num_clusters(), opts.parallelism, [&](std::size_t i) {
    const auto& c = ds.clusters[i];
    const auto row = static_cast<Eigen::Index>(i);
    const double log_design = log_design_prob(c, design);
    t.cluster_size[row] = static_cast<double>(c.size());
    for (Eigen::Index r = 0; r < R; ++r) {
      const auto alloc = allocate_cluster(c.X, policies[static_cast<std::size_t>(r)], opts.intercept_tol);
      const auto s = cluster_sums(c, alloc, log_design);
      for (int e = 0; e < 3; ++e) {
        t.sw(row, e * R + r) = s.sw[e];
        t.swy(row, e * R + r) = s.swy[e];
      }
    }
  });
  return t;
}

/// Hajek ratios sum_i swy / sum_i sw per column, reduced in cluster order.
/// `rows` selects (with repetition) the clusters entering the sums; empty
/// means all clusters once. A zero denominator throws EstimationError, unless
/// `degenerate` is supplied, in which case the column is flagged there and
/// set to NaN.
inline Eigen::VectorXd hajek_ratios(const EstimatingTable& t, std::span<const Eigen::Index> rows = {},
                                    std::vector<bool>* degenerate = nullptr) {
  const Eigen::Index M = t.num_columns();
  Eigen::VectorXd mu(M);
  if (degenerate) degenerate->assign(static_cast<std::size_t>(M), false);
  for (Eigen::Index m = 0; m < M; ++m) {
    CompensatedSum num, den;
    if (rows.empty()) {
      for (Eigen::Index i = 0; i < t.num_clusters(); ++i) {
        num.add(t.swy(i, m));
        den.add(t.sw(i, m));
      }
    } else {
      for (Eigen::Index i : rows) {
        num.add(t.swy(i, m));
        den.add(t.sw(i, m));
      }
    }
    if (!(den.value() > 0.0)) {
      if (!degenerate) throw EstimationError("degenerate arm: no unit receives the estimand's treatment");
      (*degenerate)[static_cast<std::size_t>(m)] = true;
      mu[m] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    mu[m] = num.value() / den.value();
  }
  return mu;
}

/// Y-hat(alpha, gamma).
inline double estimate_mu(const Dataset& ds, const SolvedPolicy& solved, const DesignPropensity& design) {
  if (solved.num_clusters() != ds.num_clusters())
    throw std::invalid_argument("estimate_mu: solved policy does not match dataset");
  CompensatedSum num, den;
  for (std::size_t i = 0; i < ds.num_clusters(); ++i) {
    const auto s = cluster_sums(ds.clusters[i], solved[i], log_design_prob(ds.clusters[i], design));
    num.add(s.swy[2]);
    den.add(s.sw[2]);
  }
  if (!(den.value() > 0.0)) throw EstimationError("estimate_mu: zero total weight");
  return num.value() / den.value();
}

/// Y-hat(a, alpha, gamma).
inline double estimate_mu_fixed(const Dataset& ds, const SolvedPolicy& solved, const DesignPropensity& design,
                                int a) {
  if (a != 0 && a != 1) throw std::invalid_argument("estimate_mu_fixed: a must be 0 or 1");
  if (solved.num_clusters() != ds.num_clusters())
    throw std::invalid_argument("estimate_mu_fixed: solved policy does not match dataset");
  CompensatedSum num, den;
  for (std::size_t i = 0; i < ds.num_clusters(); ++i) {
    const auto s = cluster_sums(ds.clusters[i], solved[i], log_design_prob(ds.clusters[i], design));
    num.add(s.swy[a]);
    den.add(s.sw[a]);
  }
  if (!(den.value() > 0.0))
    throw EstimationError("degenerate arm: no unit with A = " + std::to_string(a) + " in the dataset");
  return num.value() / den.value();
}

// ---------------------------------------------------------------------------

inline std::string format_gamma(const Eigen::VectorXd& g, char sep = ';') {
  std::ostringstream os;
  os.precision(6);
  for (Eigen::Index k = 0; k < g.size(); ++k) {
    if (k) os << sep;
    os << g[k];
  }
  return os.str();
}

/// Stacked estimates for R policies sharing alpha. `values` is ordered
/// [Y(0,alpha,gamma_1..R), Y(1,alpha,gamma_1..R), Y(alpha,gamma_1..R)].
struct MuSet {
  double alpha = 0.5;
  std::vector<Eigen::VectorXd> gammas;
  Eigen::VectorXd values;
  std::vector<std::string> labels;

  Eigen::Index num_policies() const noexcept { return static_cast<Eigen::Index>(gammas.size()); }
  Eigen::Index size() const noexcept { return values.size(); }
  Eigen::Index index(Estimand e, Eigen::Index r) const noexcept {
    return static_cast<int>(e) * num_policies() + r;
  }
  double operator()(Estimand e, Eigen::Index r) const { return values[index(e, r)]; }

  std::optional<Eigen::Index> find(const Eigen::VectorXd& gamma) const {
    for (std::size_t r = 0; r < gammas.size(); ++r)
      if (gammas[r].size() == gamma.size() && gammas[r] == gamma) return static_cast<Eigen::Index>(r);
    return std::nullopt;
  }
  Eigen::Index require(const Eigen::VectorXd& gamma) const {
    auto r = find(gamma);
    if (!r) throw std::invalid_argument("gamma (" + format_gamma(gamma) + ") is not in the estimated set");
    return *r;
  }
};

inline std::vector<std::string> mu_labels(const std::vector<Eigen::VectorXd>& gammas) {
  std::vector<std::string> labels;
  for (Estimand e : kEstimands)
    for (const auto& g : gammas) labels.push_back(std::string(estimand_name(e)) + "(" + format_gamma(g) + ")");
  return labels;
}

inline MuSet mu_set_from_table(const EstimatingTable& t, double alpha, const std::vector<Eigen::VectorXd>& gammas) {
  return MuSet{alpha, gammas, hajek_ratios(t), mu_labels(gammas)};
}

inline MuSet estimate_mu_set(const Dataset& ds, const DesignPropensity& design, double alpha,
                             const std::vector<Eigen::VectorXd>& gammas, const EstimationOptions& opts = {}) {
  return mu_set_from_table(estimating_table(ds, design, alpha, gammas, opts), alpha, gammas);
}

// ---------------------------------------------------------------------------
// Effects

enum class EffectKind : int { DE = 0, IE0 = 1, IE1 = 2, OE = 3 };

inline constexpr std::array<EffectKind, 4> kEffectKinds{EffectKind::DE, EffectKind::IE0, EffectKind::IE1,
                                                        EffectKind::OE};

inline const char* effect_name(EffectKind k) {
  switch (k) {
    case EffectKind::DE: return "DE";
    case EffectKind::IE0: return "IE0";
    case EffectKind::IE1: return "IE1";
    case EffectKind::OE: return "OE";
  }
  return "?";
}

inline EffectKind parse_effect_kind(const std::string& s) {
  for (EffectKind k : kEffectKinds)
    if (s == effect_name(k)) return k;
  throw std::invalid_argument("unknown effect kind '" + s + "' (expected DE, IE0, IE1, OE)");
}

/// Contrast vector c (length 3R) with effect = c' mu for policy r against
/// reference policy ref. DE ignores ref.
inline Eigen::VectorXd effect_contrast(const MuSet& mu, EffectKind kind, Eigen::Index r, Eigen::Index ref) {
  Eigen::VectorXd c = Eigen::VectorXd::Zero(mu.size());
  switch (kind) {
    case EffectKind::DE:
      c[mu.index(Estimand::Treated, r)] += 1.0;
      c[mu.index(Estimand::Untreated, r)] -= 1.0;
      break;
    case EffectKind::IE0:
      c[mu.index(Estimand::Untreated, r)] += 1.0;
      c[mu.index(Estimand::Untreated, ref)] -= 1.0;
      break;
    case EffectKind::IE1:
      c[mu.index(Estimand::Treated, r)] += 1.0;
      c[mu.index(Estimand::Treated, ref)] -= 1.0;
      break;
    case EffectKind::OE:
      c[mu.index(Estimand::Marginal, r)] += 1.0;
      c[mu.index(Estimand::Marginal, ref)] -= 1.0;
      break;
  }
  return c;
}

/// R x 3R matrix whose row r is the contrast of `kind` at gamma_r vs ref.
inline Eigen::MatrixXd effect_contrast_matrix(const MuSet& mu, EffectKind kind, Eigen::Index ref) {
  Eigen::MatrixXd C(mu.num_policies(), mu.size());
  for (Eigen::Index r = 0; r < mu.num_policies(); ++r) C.row(r) = effect_contrast(mu, kind, r, ref).transpose();
  return C;
}

struct EffectReport {
  EffectKind kind = EffectKind::OE;
  Eigen::VectorXd gamma;
  Eigen::VectorXd gamma_ref;
  double estimate = 0.0;
  double variance = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  double level = 0.95;
  Eigen::VectorXd contrast;
};

/// DE(alpha, gamma), IE0, IE1 and OE (alpha, gamma, gamma_ref), in that order.
/// Variance is 0 and the interval degenerate until inference is attached.
inline std::vector<EffectReport> contrast_effects(const MuSet& mu, const Eigen::VectorXd& gamma,
                                                  const Eigen::VectorXd& gamma_ref) {
  const Eigen::Index r = mu.require(gamma);
  const Eigen::Index ref = mu.require(gamma_ref);
  std::vector<EffectReport> out;
  for (EffectKind k : kEffectKinds) {
    EffectReport rep;
    rep.kind = k;
    rep.gamma = gamma;
    rep.gamma_ref = gamma_ref;
    rep.contrast = effect_contrast(mu, k, r, ref);
    rep.estimate = rep.contrast.dot(mu.values);
    rep.lo = rep.hi = rep.estimate;
    out.push_back(std::move(rep));
  }
  return out;
}

}  // namespace hetspill
