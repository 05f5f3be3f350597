#pragma once

// Cluster-indexed dataset, CSV ingestion/serialization, and the known design
// propensity of the randomized experiment.

#include <Eigen/Dense>

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hetspill/common.hpp"

namespace hetspill {

/// One cluster i: n_i units with covariates X (n_i x K), binary treatment A,
/// outcome Y. `design_p` holds per-unit design probabilities when the design
/// is read from a column, and is empty otherwise.
struct ClusterData {
  std::string id;
  Eigen::MatrixXd X;
  std::vector<int> A;
  Eigen::VectorXd Y;
  Eigen::VectorXd design_p;
  std::vector<std::string> unit_ids;

  Eigen::Index size() const noexcept { return Y.size(); }
};

struct Dataset {
  std::vector<ClusterData> clusters;
  std::vector<std::string> covariate_names;

  std::size_t num_clusters() const noexcept { return clusters.size(); }
  Eigen::Index num_covariates() const noexcept {
    return static_cast<Eigen::Index>(covariate_names.size());
  }
  std::size_t num_units() const noexcept {
    std::size_t n = 0;
    for (const auto& c : clusters) n += static_cast<std::size_t>(c.size());
    return n;
  }
  double mean_cluster_size() const noexcept {
    return clusters.empty() ? 0.0
                            : static_cast<double>(num_units()) / static_cast<double>(clusters.size());
  }
  std::optional<Eigen::Index> covariate_index(std::string_view name) const {
    for (std::size_t k = 0; k < covariate_names.size(); ++k)
      if (covariate_names[k] == name) return static_cast<Eigen::Index>(k);
    return std::nullopt;
  }
};

/// Throws DataError if the dataset breaks a structural invariant.
inline void check_dataset(const Dataset& ds) {
  if (ds.clusters.empty()) throw DataError("dataset has no clusters");
  const Eigen::Index K = ds.num_covariates();
  std::set<std::string> seen;
  for (const auto& c : ds.clusters) {
    if (!seen.insert(c.id).second) throw DataError("duplicate cluster id '" + c.id + "'");
    const Eigen::Index n = c.size();
    if (n < 1) throw DataError("cluster '" + c.id + "' is empty");
    if (c.X.rows() != n || c.X.cols() != K || static_cast<Eigen::Index>(c.A.size()) != n)
      throw DataError("cluster '" + c.id + "' has inconsistent dimensions");
    if (c.design_p.size() != 0 && c.design_p.size() != n)
      throw DataError("cluster '" + c.id + "' has inconsistent design column");
    for (int a : c.A)
      if (a != 0 && a != 1) throw DataError("non-binary treatment in cluster '" + c.id + "'");
    if (!c.Y.allFinite() || !c.X.allFinite())
      throw DataError("non-finite value in cluster '" + c.id + "'");
  }
}

// ---------------------------------------------------------------------------
// Design propensity f(A_i | X_i): independent Bernoulli per unit.

struct DesignPropensity {
  enum class Kind { ConstantBernoulli, PerUnitBernoulli };

  Kind kind = Kind::ConstantBernoulli;
  double p = 0.5;
  std::string column;

  static DesignPropensity constant(double p) { return {Kind::ConstantBernoulli, p, {}}; }
  static DesignPropensity per_unit(std::string column) {
    return {Kind::PerUnitBernoulli, 0.0, std::move(column)};
  }

  double unit_prob(const ClusterData& c, Eigen::Index j) const {
    double q = p;
    if (kind == Kind::PerUnitBernoulli) {
      if (c.design_p.size() != c.size())
        throw ConfigError("per-unit design column '" + column + "' not loaded for cluster '" + c.id + "'");
      q = c.design_p[j];
    }
    if (!(q > 0.0 && q < 1.0))
      throw PositivityError("design probability " + std::to_string(q) + " outside (0,1) in cluster '" +
                            c.id + "'");
    return q;
  }
};

/// ln f(A = a | X) for an arbitrary treatment vector under the design.
inline double log_design_prob(const ClusterData& c, const DesignPropensity& design,
                              std::span<const int> a) {
  if (static_cast<Eigen::Index>(a.size()) != c.size())
    throw std::invalid_argument("log_design_prob: treatment vector length mismatch");
  CompensatedSum s;
  for (Eigen::Index j = 0; j < c.size(); ++j) {
    const double q = design.unit_prob(c, j);
    s.add(a[static_cast<std::size_t>(j)] ? std::log(q) : std::log1p(-q));
  }
  return s.value();
}

/// ln f(A_i | X_i) at the observed treatment vector.
inline double log_design_prob(const ClusterData& c, const DesignPropensity& design) {
  return log_design_prob(c, design, c.A);
}

// ---------------------------------------------------------------------------
// CSV

/// Column mapping for CSV ingestion. `unit` is used when present in the file;
/// `propensity` names a per-unit design column and is required when set.
/// Empty `covariates` selects every column not claimed by another role.
struct ColumnSchema {
  std::string cluster = "cluster";
  std::string unit = "unit";
  std::string treatment = "A";
  std::string outcome = "Y";
  std::vector<std::string> covariates;
  std::string propensity;
  char delimiter = ',';
};

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line, char delim) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == delim) {
      out.push_back(std::move(field));
      field.clear();
    } else {
      field.push_back(ch);
    }
  }
  out.push_back(std::move(field));
  for (auto& f : out) {
    const auto b = f.find_first_not_of(" \t");
    const auto e = f.find_last_not_of(" \t");
    f = b == std::string::npos ? std::string{} : f.substr(b, e - b + 1);
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

/// Parses a CSV stream into a Dataset grouped by cluster id in order of first
/// appearance, preserving file order within each cluster. Row numbers in
/// errors count data rows from 1 (the header is not counted). Lines starting
/// with '#' are comments.
inline Dataset parse_dataset(std::istream& in, const ColumnSchema& schema = {}) {
  std::string line;
  do {
    if (!std::getline(in, line)) throw DataError("empty file");
  } while (!line.empty() && line[0] == '#');  // leading provenance comments
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // BOM
  const auto header = detail::split_csv_line(line, schema.delimiter);

  std::unordered_map<std::string, std::size_t> col;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (!col.emplace(header[c], c).second) throw DataError("duplicate column '" + header[c] + "'");
  }
  auto require = [&](const std::string& name, const char* role) {
    auto it = col.find(name);
    if (name.empty() || it == col.end())
      throw DataError(std::string("missing ") + role + " column '" + name + "'");
    return it->second;
  };
  const std::size_t c_cluster = require(schema.cluster, "cluster");
  const std::size_t c_treat = require(schema.treatment, "treatment");
  const std::size_t c_out = require(schema.outcome, "outcome");
  std::optional<std::size_t> c_unit;
  if (!schema.unit.empty() && col.count(schema.unit)) c_unit = col.at(schema.unit);
  std::optional<std::size_t> c_prop;
  if (!schema.propensity.empty()) c_prop = require(schema.propensity, "propensity");

  std::vector<std::string> cov_names = schema.covariates;
  if (cov_names.empty()) {
    for (const auto& h : header) {
      if (h == schema.cluster || h == schema.treatment || h == schema.outcome ||
          (c_unit && h == schema.unit) || (c_prop && h == schema.propensity))
        continue;
      cov_names.push_back(h);
    }
  }
  if (cov_names.empty()) throw DataError("missing covariate columns (at least one required)");
  std::vector<std::size_t> c_cov;
  for (const auto& name : cov_names) c_cov.push_back(require(name, "covariate"));
  const std::size_t K = c_cov.size();

  struct Builder {
    std::vector<double> x, y, p;
    std::vector<int> a;
    std::vector<std::string> units;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, Builder> builders;
  std::set<std::pair<std::string, std::string>> seen_units;

  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos || line[0] == '#') continue;
    ++row;
    const auto f = detail::split_csv_line(line, schema.delimiter);
    if (f.size() != header.size())
      throw DataError("expected " + std::to_string(header.size()) + " fields, found " +
                          std::to_string(f.size()),
                      row);
    auto number = [&](std::size_t c, const std::string& name) {
      const auto v = detail::parse_double(f[c]);
      if (!v) throw DataError("non-numeric field '" + name + "' = '" + f[c] + "'", row);
      if (!std::isfinite(*v)) throw DataError("non-finite field '" + name + "'", row);
      return *v;
    };
    const std::string& cid = f[c_cluster];
    if (cid.empty()) throw DataError("empty cluster id", row);
    const auto a_val = detail::parse_double(f[c_treat]);
    if (!a_val) throw DataError("non-numeric field '" + schema.treatment + "' = '" + f[c_treat] + "'", row);
    if (*a_val != 0.0 && *a_val != 1.0) throw DataError("non-binary treatment", row);

    auto [it, inserted] = builders.try_emplace(cid);
    if (inserted) order.push_back(cid);
    Builder& b = it->second;
    b.a.push_back(static_cast<int>(*a_val));
    b.y.push_back(number(c_out, schema.outcome));
    for (std::size_t k = 0; k < K; ++k) b.x.push_back(number(c_cov[k], cov_names[k]));
    if (c_prop) b.p.push_back(number(*c_prop, schema.propensity));
    if (c_unit) {
      if (!seen_units.emplace(cid, f[*c_unit]).second)
        throw DataError("duplicate unit id '" + f[*c_unit] + "' in cluster '" + cid + "'", row);
      b.units.push_back(f[*c_unit]);
    }
  }
  if (row == 0) throw DataError("empty file (no data rows)");

  Dataset ds;
  ds.covariate_names = cov_names;
  ds.clusters.reserve(order.size());
  for (const auto& cid : order) {
    Builder& b = builders.at(cid);
    const auto n = static_cast<Eigen::Index>(b.y.size());
    ClusterData c;
    c.id = cid;
    c.A = std::move(b.a);
    c.Y = Eigen::Map<const Eigen::VectorXd>(b.y.data(), n);
    c.X = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        b.x.data(), n, static_cast<Eigen::Index>(K));
    if (c_prop) c.design_p = Eigen::Map<const Eigen::VectorXd>(b.p.data(), n);
    c.unit_ids = std::move(b.units);
    ds.clusters.push_back(std::move(c));
  }
  check_dataset(ds);
  return ds;
}

inline Dataset load_dataset(const std::string& path, const ColumnSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  return parse_dataset(in, schema);
}

/// Writes the canonical CSV: cluster, unit, A, Y, covariates..., and
/// `design_p` when per-unit design probabilities are present. Doubles use the
/// shortest round-trip representation so reloading is bit-exact.
inline void write_dataset(const Dataset& ds, std::ostream& out, char delim = ',') {
  const bool with_p = !ds.clusters.empty() && ds.clusters.front().design_p.size() > 0;
  out << "cluster" << delim << "unit" << delim << "A" << delim << "Y";
  for (const auto& name : ds.covariate_names) out << delim << name;
  if (with_p) out << delim << "design_p";
  out << '\n';
  for (const auto& c : ds.clusters) {
    for (Eigen::Index j = 0; j < c.size(); ++j) {
      out << c.id << delim
          << (c.unit_ids.empty() ? std::to_string(j) : c.unit_ids[static_cast<std::size_t>(j)]) << delim
          << c.A[static_cast<std::size_t>(j)] << delim << detail::format_double(c.Y[j]);
      for (Eigen::Index k = 0; k < c.X.cols(); ++k) out << delim << detail::format_double(c.X(j, k));
      if (with_p) out << delim << detail::format_double(c.design_p[j]);
      out << '\n';
    }
  }
}

inline void write_dataset(const Dataset& ds, const std::string& path, char delim = ',') {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  write_dataset(ds, out, delim);
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace hetspill
