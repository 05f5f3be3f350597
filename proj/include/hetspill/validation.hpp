#pragma once

// Report-only positivity diagnostics. Bernoulli designs with p in (0,1) make
// positivity hold structurally, so this only flags near-violations.

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "hetspill/allocation.hpp"
#include "hetspill/data.hpp"
#include "hetspill/estimators.hpp"

namespace hetspill {

struct ValidationOptions {
  double weight_cap = 20.0;        // on w_i / mean_i(w_i)
  double propensity_tol = 1e-6;    // hypothetical p within tol of 0 or 1
  double intercept_tol = kDefaultInterceptTol;
};

struct ValidationFlag {
  enum class Kind { ExtremeWeight, ExtremePropensity } kind;
  std::size_t policy = 0;   // index into the policy list
  std::size_t cluster = 0;  // dataset order
  Eigen::Index unit = -1;   // -1 for cluster-level flags
  double value = 0.0;
  std::string message;
};

struct ValidationReport {
  std::vector<ValidationFlag> flags;
  std::vector<double> max_normalized_weight;  // one per policy

  bool empty() const noexcept { return flags.empty(); }
};

inline ValidationReport validate_assumptions(const Dataset& ds, const DesignPropensity& design,
                                             const std::vector<AllocationPolicy>& policies,
                                             const ValidationOptions& opt = {}) {
  ValidationReport rep;
  for (std::size_t q = 0; q < policies.size(); ++q) {
    const auto& pol = policies[q];
    std::vector<double> w(ds.num_clusters());
    for (std::size_t i = 0; i < ds.num_clusters(); ++i) {
      const auto& c = ds.clusters[i];
      const auto alloc = allocate_cluster(c.X, pol, opt.intercept_tol);
      w[i] = cluster_weight(c, alloc, design);
      for (Eigen::Index j = 0; j < alloc.size(); ++j) {
        const double p = alloc.p[j];
        if (p < opt.propensity_tol || p > 1.0 - opt.propensity_tol)
          rep.flags.push_back({ValidationFlag::Kind::ExtremePropensity, q, i, j, p,
                               "cluster " + c.id + " unit " + std::to_string(j) + ": propensity " +
                                   std::to_string(p) + " near 0/1"});
      }
    }
    const double mean_w = compensated_sum(w) / static_cast<double>(std::max<std::size_t>(1, w.size()));
    double worst = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double r = mean_w > 0.0 ? w[i] / mean_w : 0.0;
      worst = std::max(worst, r);
      if (r > opt.weight_cap)
        rep.flags.push_back({ValidationFlag::Kind::ExtremeWeight, q, i, -1, r,
                             "cluster " + ds.clusters[i].id + ": normalized weight " + std::to_string(r) +
                                 " exceeds cap"});
    }
    rep.max_normalized_weight.push_back(worst);
  }
  return rep;
}

}  // namespace hetspill
