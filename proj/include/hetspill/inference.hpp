#pragma once

// Uncertainty for the stacked estimates: M-estimation sandwich covariance,
// delta-method covariance of linear effect contrasts, Wald intervals, and a
// cluster bootstrap.

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <tuple>
#include <utility>
#include <vector>

#include "hetspill/common.hpp"
#include "hetspill/estimators.hpp"
#include "hetspill/parallel.hpp"
#include "hetspill/rng.hpp"

namespace hetspill {

/// Per-cluster estimating-function values. Row i, column m holds
/// psi_im = (1/nbar) sum_j w^m_ij (Y_ij - mu_m), where w^m is the weight used
/// by estimand m's point estimator and nbar the mean cluster size; solving
/// sum_i psi_im = 0 reproduces the Hajek estimator. `bread_terms(i, m)` is
/// (1/nbar) sum_j w^m_ij = -d psi_im / d mu_m.
struct PsiMatrix {
  Eigen::MatrixXd values;       // I x 3R
  Eigen::MatrixXd bread_terms;  // I x 3R
};

inline PsiMatrix psi_from_table(const EstimatingTable& t, const Eigen::VectorXd& mu) {
  if (mu.size() != t.num_columns()) throw std::invalid_argument("psi: estimate vector does not match the table");
  const double nbar = t.cluster_size.mean();
  PsiMatrix psi;
  psi.values.resize(t.num_clusters(), t.num_columns());
  psi.bread_terms.resize(t.num_clusters(), t.num_columns());
  for (Eigen::Index i = 0; i < t.num_clusters(); ++i)
    for (Eigen::Index m = 0; m < t.num_columns(); ++m) {
      psi.values(i, m) = (t.swy(i, m) - mu[m] * t.sw(i, m)) / nbar;
      psi.bread_terms(i, m) = t.sw(i, m) / nbar;
    }
  return psi;
}

inline PsiMatrix psi_contributions(const Dataset& ds, const DesignPropensity& design, const MuSet& mu,
                                   const EstimationOptions& opts = {}) {
  if (mu.values.size() != 3 * mu.num_policies() || mu.num_policies() == 0)
    throw std::invalid_argument("psi_contributions: malformed MuSet");
  for (const auto& g : mu.gammas)
    if (g.size() != ds.num_covariates())
      throw std::invalid_argument("psi_contributions: MuSet gamma length does not match dataset covariates");
  return psi_from_table(estimating_table(ds, design, mu.alpha, mu.gammas, opts), mu.values);
}

/// Cov(mu-hat) = D^{-1} B D^{-1} / I, B = (1/I) sum_i psi_i psi_i',
/// D = diag((1/I) sum_i bread_terms_i).
struct SandwichCovariance {
  Eigen::MatrixXd matrix;
  Eigen::VectorXd bread;
};

inline SandwichCovariance sandwich_covariance(const PsiMatrix& psi) {
  const Eigen::Index I = psi.values.rows();
  if (I < 2) throw EstimationError("sandwich covariance needs at least 2 clusters");
  const Eigen::Index M = psi.values.cols();
  SandwichCovariance out;
  out.bread.resize(M);
  for (Eigen::Index m = 0; m < M; ++m) {
    CompensatedSum s;
    for (Eigen::Index i = 0; i < I; ++i) s.add(psi.bread_terms(i, m));
    out.bread[m] = s.value() / static_cast<double>(I);
    if (!(out.bread[m] > 0.0)) throw EstimationError("sandwich covariance: non-positive bread entry");
  }
  // Scale columns first so the product is symmetric by construction.
  Eigen::MatrixXd scaled = psi.values;
  for (Eigen::Index m = 0; m < M; ++m) scaled.col(m) /= out.bread[m];
  const double denom = static_cast<double>(I) * static_cast<double>(I);
  out.matrix = (scaled.transpose() * scaled) / denom;
  out.matrix = 0.5 * (out.matrix + out.matrix.transpose()).eval();
  return out;
}

inline SandwichCovariance sandwich_covariance(const PsiMatrix& psi, const Dataset& ds) {
  if (static_cast<std::size_t>(psi.values.rows()) != ds.num_clusters())
    throw std::invalid_argument("sandwich_covariance: psi rows do not match the dataset");
  return sandwich_covariance(psi);
}

/// C Sigma C'; exact because every effect is a linear contrast.
inline Eigen::MatrixXd effect_covariance(const Eigen::MatrixXd& cov, const Eigen::MatrixXd& C) {
  if (C.cols() != cov.rows() || cov.rows() != cov.cols())
    throw std::invalid_argument("effect_covariance: contrast matrix has " + std::to_string(C.cols()) +
                                " columns, covariance is " + std::to_string(cov.rows()) + "x" +
                                std::to_string(cov.cols()));
  Eigen::MatrixXd out = C * cov * C.transpose();
  return 0.5 * (out + out.transpose());
}

inline Eigen::MatrixXd effect_covariance(const SandwichCovariance& cov, const Eigen::MatrixXd& C) {
  return effect_covariance(cov.matrix, C);
}

inline double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

/// estimate +/- z_{(1+level)/2} sqrt(variance).
inline std::pair<double, double> wald_ci(double estimate, double variance, double level = 0.95) {
  if (variance < 0.0 || std::isnan(variance)) throw std::invalid_argument("wald_ci: negative variance");
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("wald_ci: level outside (0,1)");
  const double half = normal_quantile(0.5 * (1.0 + level)) * std::sqrt(variance);
  return {estimate - half, estimate + half};
}

/// DE/IE0/IE1/OE reports with sandwich variances and Wald intervals.
inline std::vector<EffectReport> contrast_effects(const MuSet& mu, const SandwichCovariance& cov,
                                                  const Eigen::VectorXd& gamma, const Eigen::VectorXd& gamma_ref,
                                                  double level = 0.95) {
  auto reports = contrast_effects(mu, gamma, gamma_ref);
  for (auto& rep : reports) {
    rep.variance = std::max(0.0, rep.contrast.dot(cov.matrix * rep.contrast));
    rep.level = level;
    std::tie(rep.lo, rep.hi) = wald_ci(rep.estimate, rep.variance, level);
  }
  return reports;
}

/// Full point-estimate + sandwich pipeline for one alpha and gamma set.
struct MuFit {
  MuSet mu;
  PsiMatrix psi;
  SandwichCovariance cov;
};

inline MuFit fit_mu_set(const Dataset& ds, const DesignPropensity& design, double alpha,
                        const std::vector<Eigen::VectorXd>& gammas, const EstimationOptions& opts = {}) {
  const auto table = estimating_table(ds, design, alpha, gammas, opts);
  MuFit fit;
  fit.mu = mu_set_from_table(table, alpha, gammas);
  fit.psi = psi_from_table(table, fit.mu.values);
  fit.cov = sandwich_covariance(fit.psi);
  return fit;
}

// ---------------------------------------------------------------------------
// Cluster bootstrap

enum class BootstrapInterval { Percentile, Normal };

struct BootstrapOptions {
  std::size_t reps = 500;
  std::uint64_t seed = 0;
  double level = 0.95;
  BootstrapInterval interval = BootstrapInterval::Percentile;
  double max_discard_fraction = 0.10;
  Eigen::VectorXd gamma_ref;  // reference policy for IE/OE; empty selects the zero vector
};

/// Bootstrap draws of the stacked estimates and of the effects. Effects are
/// ordered per policy r as [DE, IE0, IE1, OE](gamma_r vs gamma_ref).
struct BootstrapResult {
  Eigen::MatrixXd mu_draws;        // kept reps x 3R
  Eigen::MatrixXd effect_draws;    // kept reps x 4R
  Eigen::MatrixXd mu_covariance;   // 3R x 3R
  Eigen::MatrixXd effect_covariance;  // 4R x 4R
  Eigen::VectorXd effect_lo, effect_hi;
  Eigen::VectorXd mu_lo, mu_hi;
  Eigen::MatrixXd effect_contrasts;  // 4R x 3R
  std::size_t requested = 0;
  std::size_t discarded = 0;
};

inline Eigen::MatrixXd all_effect_contrasts(const MuSet& mu, Eigen::Index ref) {
  const Eigen::Index R = mu.num_policies();
  Eigen::MatrixXd C(4 * R, mu.size());
  for (Eigen::Index r = 0; r < R; ++r)
    for (EffectKind k : kEffectKinds)
      C.row(4 * r + static_cast<int>(k)) = effect_contrast(mu, k, r, ref).transpose();
  return C;
}

namespace detail {

inline Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& draws) {
  const Eigen::Index n = draws.rows();
  if (n < 2) return Eigen::MatrixXd::Zero(draws.cols(), draws.cols());
  const Eigen::RowVectorXd mean = draws.colwise().mean();
  const Eigen::MatrixXd centered = draws.rowwise() - mean;
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
  return 0.5 * (cov + cov.transpose());
}

inline void bootstrap_intervals(const Eigen::MatrixXd& draws, const Eigen::VectorXd& point, double level,
                                BootstrapInterval kind, Eigen::VectorXd& lo, Eigen::VectorXd& hi) {
  const Eigen::Index M = draws.cols();
  lo.resize(M);
  hi.resize(M);
  const Eigen::MatrixXd cov = sample_covariance(draws);
  for (Eigen::Index m = 0; m < M; ++m) {
    if (kind == BootstrapInterval::Normal) {
      std::tie(lo[m], hi[m]) = wald_ci(point[m], std::max(0.0, cov(m, m)), level);
      continue;
    }
    std::vector<double> col(draws.col(m).data(), draws.col(m).data() + draws.rows());
    std::sort(col.begin(), col.end());
    lo[m] = sorted_quantile(col, 0.5 * (1.0 - level));
    hi[m] = sorted_quantile(col, 0.5 * (1.0 + level));
  }
}

}  // namespace detail

/// Resamples the I clusters with replacement `reps` times, re-estimating the
/// stacked estimates and effects on each resample. Replicate b draws from its
/// own substream of `seed`, so output is schedule-independent. Replicates with
/// a degenerate arm are discarded; more than `max_discard_fraction` discarded
/// is an error.
inline BootstrapResult cluster_bootstrap(const Dataset& ds, const DesignPropensity& design, double alpha,
                                         const std::vector<Eigen::VectorXd>& gammas, const BootstrapOptions& bo,
                                         const EstimationOptions& opts = {}) {
  if (bo.reps < 1) throw std::invalid_argument("cluster_bootstrap: reps must be >= 1");
  const auto table = estimating_table(ds, design, alpha, gammas, opts);
  const MuSet point = mu_set_from_table(table, alpha, gammas);
  const Eigen::VectorXd ref_gamma =
      bo.gamma_ref.size() ? bo.gamma_ref : Eigen::VectorXd::Zero(ds.num_covariates());
  const Eigen::Index ref = point.require(ref_gamma);
  const Eigen::MatrixXd C = all_effect_contrasts(point, ref);

  const auto I = static_cast<Eigen::Index>(ds.num_clusters());
  const Eigen::Index M = point.size();
  Eigen::MatrixXd draws(static_cast<Eigen::Index>(bo.reps), M);
  std::vector<char> kept(bo.reps, 0);
  parallel_for(bo.reps, opts.parallelism, [&](std::size_t b) {
    auto eng = rng::make_engine(bo.seed, b, rng::kBootstrap);
    std::uniform_int_distribution<Eigen::Index> pick(0, I - 1);
    std::vector<Eigen::Index> rows(static_cast<std::size_t>(I));
    for (auto& r : rows) r = pick(eng);
    std::vector<bool> degenerate;
    const Eigen::VectorXd mu = hajek_ratios(table, rows, &degenerate);
    if (std::find(degenerate.begin(), degenerate.end(), true) != degenerate.end()) return;
    draws.row(static_cast<Eigen::Index>(b)) = mu.transpose();
    kept[b] = 1;
  });

  BootstrapResult out;
  out.requested = bo.reps;
  const auto n_kept = static_cast<Eigen::Index>(std::count(kept.begin(), kept.end(), 1));
  out.discarded = bo.reps - static_cast<std::size_t>(n_kept);
  if (static_cast<double>(out.discarded) > bo.max_discard_fraction * static_cast<double>(bo.reps) ||
      n_kept == 0)
    throw EstimationError("cluster_bootstrap: " + std::to_string(out.discarded) + " of " +
                          std::to_string(bo.reps) + " replicates had a degenerate arm");
  out.mu_draws.resize(n_kept, M);
  for (std::size_t b = 0, row = 0; b < bo.reps; ++b)
    if (kept[b]) out.mu_draws.row(static_cast<Eigen::Index>(row++)) = draws.row(static_cast<Eigen::Index>(b));
  out.effect_contrasts = C;
  out.effect_draws = out.mu_draws * C.transpose();
  out.mu_covariance = detail::sample_covariance(out.mu_draws);
  out.effect_covariance = detail::sample_covariance(out.effect_draws);
  detail::bootstrap_intervals(out.mu_draws, point.values, bo.level, bo.interval, out.mu_lo, out.mu_hi);
  detail::bootstrap_intervals(out.effect_draws, C * point.values, bo.level, bo.interval, out.effect_lo,
                              out.effect_hi);
  return out;
}

}  // namespace hetspill
