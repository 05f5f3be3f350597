#pragma once

// Data-driven gamma ranges: per-cluster univariate logistic regressions of
// treatment on one covariate, percentile bounds across clusters, and the
// Cartesian grid of candidate policies.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "hetspill/common.hpp"
#include "hetspill/data.hpp"
#include "hetspill/parallel.hpp"

namespace hetspill {

enum class FitStatus { Converged, ConstantTreatment, ConstantCovariate, Separated, MaxIterations, TooSmall };

inline const char* fit_status_name(FitStatus s) {
  switch (s) {
    case FitStatus::Converged: return "converged";
    case FitStatus::ConstantTreatment: return "constant-treatment";
    case FitStatus::ConstantCovariate: return "constant-covariate";
    case FitStatus::Separated: return "separated";
    case FitStatus::MaxIterations: return "max-iterations";
    case FitStatus::TooSmall: return "too-small";
  }
  return "?";
}

struct LogitSlopeFit {
  FitStatus status = FitStatus::MaxIterations;
  double intercept = 0.0;
  double slope = 0.0;
  int iterations = 0;

  bool converged() const noexcept { return status == FitStatus::Converged; }
};

struct IrlsOptions {
  int max_iter = 50;
  double score_tol = 1e-8;
  double max_abs_eta = 15.0;  // beyond this a fitted probability is numerically 0/1
};

/// ML fit of logit P(A=1) = b0 + b1 x by iteratively reweighted least squares.
inline LogitSlopeFit logit_slope(std::span<const int> a, std::span<const double> x, const IrlsOptions& opt = {}) {
  const std::size_t n = a.size();
  LogitSlopeFit fit;
  if (n < 2 || x.size() != n) {
    fit.status = FitStatus::TooSmall;
    return fit;
  }
  const auto treated = std::count(a.begin(), a.end(), 1);
  if (treated == 0 || treated == static_cast<long>(n)) {
    fit.status = FitStatus::ConstantTreatment;
    return fit;
  }
  if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; })) {
    fit.status = FitStatus::ConstantCovariate;
    return fit;
  }

  auto loglik = [&](double b0, double b1) {
    CompensatedSum s;
    for (std::size_t j = 0; j < n; ++j) {
      const double eta = b0 + b1 * x[j];
      s.add(a[j] ? log_expit(eta) : log1m_expit(eta));
    }
    return s.value();
  };

  const double pbar = static_cast<double>(treated) / static_cast<double>(n);
  double b0 = logit(pbar), b1 = 0.0;
  double ll = loglik(b0, b1);
  for (int it = 1; it <= opt.max_iter; ++it) {
    // score U and information H of the two-parameter model
    double u0 = 0, u1 = 0, h00 = 0, h01 = 0, h11 = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double p = expit(b0 + b1 * x[j]);
      const double r = a[j] - p, w = p * (1.0 - p);
      u0 += r;
      u1 += r * x[j];
      h00 += w;
      h01 += w * x[j];
      h11 += w * x[j] * x[j];
    }
    fit.iterations = it;
    if (std::max(std::abs(u0), std::abs(u1)) <= opt.score_tol) {
      fit.intercept = b0;
      fit.slope = b1;
      double max_eta = 0.0;
      for (std::size_t j = 0; j < n; ++j) max_eta = std::max(max_eta, std::abs(b0 + b1 * x[j]));
      fit.status = max_eta > opt.max_abs_eta ? FitStatus::Separated : FitStatus::Converged;
      return fit;
    }
    const double det = h00 * h11 - h01 * h01;
    if (!(det > 0.0) || !std::isfinite(det)) {
      fit.status = FitStatus::Separated;
      fit.intercept = b0;
      fit.slope = b1;
      return fit;
    }
    double d0 = (h11 * u0 - h01 * u1) / det;
    double d1 = (h00 * u1 - h01 * u0) / det;
    // step halving keeps the log-likelihood non-decreasing
    double step = 1.0, next_ll = loglik(b0 + d0, b1 + d1);
    while (next_ll < ll - 1e-12 * (1.0 + std::abs(ll)) && step > 1e-6) {
      step *= 0.5;
      next_ll = loglik(b0 + step * d0, b1 + step * d1);
    }
    b0 += step * d0;
    b1 += step * d1;
    ll = next_ll;
    if (std::abs(b0) + std::abs(b1) * std::max(std::abs(*std::max_element(x.begin(), x.end())),
                                               std::abs(*std::min_element(x.begin(), x.end()))) >
        4.0 * opt.max_abs_eta) {
      fit.status = FitStatus::Separated;
      fit.intercept = b0;
      fit.slope = b1;
      return fit;
    }
  }
  fit.status = FitStatus::MaxIterations;
  fit.intercept = b0;
  fit.slope = b1;
  return fit;
}

/// delta_i^{(k)}: slope of the within-cluster logit of A on covariate k.
inline LogitSlopeFit per_cluster_logit_slope(const ClusterData& c, Eigen::Index k, const IrlsOptions& opt = {}) {
  if (k < 0 || k >= c.X.cols()) throw std::out_of_range("per_cluster_logit_slope: covariate index out of range");
  std::vector<double> x(static_cast<std::size_t>(c.size()));
  for (Eigen::Index j = 0; j < c.size(); ++j) x[static_cast<std::size_t>(j)] = c.X(j, k);
  return logit_slope(c.A, x, opt);
}

struct GammaRange {
  Eigen::Index covariate = 0;
  std::string name;
  std::vector<LogitSlopeFit> fits;  // one per cluster, dataset order
  double lo = 0.0;
  double hi = 0.0;
  std::size_t n_converged = 0;
  std::size_t n_dropped = 0;
};

inline constexpr std::size_t kMinConvergedClusters = 5;

/// Percentile bounds of the converged per-cluster slopes (linear
/// interpolation between order statistics). Non-converged clusters are
/// dropped and counted.
inline GammaRange gamma_range(const Dataset& ds, Eigen::Index k, double p_lo = 0.10, double p_hi = 0.90,
                              const Parallelism& par = {}) {
  if (k < 0 || k >= ds.num_covariates()) throw std::out_of_range("gamma_range: covariate index out of range");
  if (!(0.0 <= p_lo && p_lo <= p_hi && p_hi <= 1.0)) throw std::invalid_argument("gamma_range: bad percentiles");
  GammaRange out;
  out.covariate = k;
  out.name = ds.covariate_names[static_cast<std::size_t>(k)];
  out.fits.resize(ds.num_clusters());
  parallel_for(ds.num_clusters(), par,
               [&](std::size_t i) { out.fits[i] = per_cluster_logit_slope(ds.clusters[i], k); });
  std::vector<double> slopes;
  for (const auto& f : out.fits)
    if (f.converged()) slopes.push_back(f.slope);
  out.n_converged = slopes.size();
  out.n_dropped = out.fits.size() - slopes.size();
  if (slopes.size() < kMinConvergedClusters)
    throw EstimationError("gamma_range: only " + std::to_string(slopes.size()) + " clusters converged for '" +
                          out.name + "' (need " + std::to_string(kMinConvergedClusters) + ")");
  std::sort(slopes.begin(), slopes.end());
  out.lo = sorted_quantile(slopes, p_lo);
  out.hi = sorted_quantile(slopes, p_hi);
  return out;
}

/// Evenly spaced points on [lo, hi] plus 0 when 0 lies inside, ascending and
/// without duplicates.
inline std::vector<double> axis_points(double lo, double hi, int points) {
  if (points < 2) throw std::invalid_argument("grid needs at least 2 points per axis");
  std::vector<double> v;
  for (int t = 0; t < points; ++t) {
    const double frac = static_cast<double>(t) / static_cast<double>(points - 1);
    v.push_back(t == points - 1 ? hi : lo + frac * (hi - lo));
  }
  if (lo <= 0.0 && 0.0 <= hi) v.push_back(0.0);
  for (auto& x : v)
    if (std::abs(x) <= 1e-12 * std::max(1.0, hi - lo)) x = 0.0;
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

/// Cartesian product over the targeted covariates of their axis points,
/// embedded in length-K vectors (zeros elsewhere). The all-zero vector is
/// appended when the product does not contain it.
inline std::vector<Eigen::VectorXd> materialize_grid(std::span<const GammaRange> ranges, Eigen::Index K,
                                                     int points_per_axis = 9) {
  if (ranges.empty()) throw std::invalid_argument("materialize_grid: no targeted covariates");
  std::vector<std::vector<double>> axes;
  for (const auto& r : ranges) {
    if (r.covariate < 0 || r.covariate >= K) throw std::out_of_range("materialize_grid: covariate index out of range");
    axes.push_back(axis_points(r.lo, r.hi, points_per_axis));
  }
  std::size_t total = 1;
  for (const auto& ax : axes) total *= ax.size();
  std::vector<Eigen::VectorXd> grid;
  for (std::size_t t = 0; t < total; ++t) {
    // mixed-radix decode, last axis varying fastest
    Eigen::VectorXd g = Eigen::VectorXd::Zero(K);
    std::size_t rest = t;
    for (std::size_t a = axes.size(); a-- > 0;) {
      g[ranges[a].covariate] += axes[a][rest % axes[a].size()];
      rest /= axes[a].size();
    }
    if (std::none_of(grid.begin(), grid.end(), [&](const Eigen::VectorXd& h) { return h == g; }))
      grid.push_back(std::move(g));
  }
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(K);
  if (std::none_of(grid.begin(), grid.end(), [&](const Eigen::VectorXd& h) { return h == zero; }))
    grid.push_back(zero);
  return grid;
}

/// Range with fixed bounds (no data), for user-specified axes.
inline GammaRange fixed_range(Eigen::Index k, double lo, double hi, std::string name = {}) {
  if (!(lo <= hi)) throw std::invalid_argument("fixed_range: lo must not exceed hi");
  GammaRange r;
  r.covariate = k;
  r.lo = lo;
  r.hi = hi;
  r.name = std::move(name);
  return r;
}

}  // namespace hetspill
