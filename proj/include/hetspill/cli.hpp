#pragma once

// Command-line front end: configuration (JSON file + flag overrides), the five
// subcommands, and their CSV/JSON outputs. Kept in a header so tests can call
// run() in-process; tools/hetspill_cli.cpp is a thin main().

#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Dense>

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hetspill/common.hpp"
#include "hetspill/data.hpp"
#include "hetspill/estimators.hpp"
#include "hetspill/gamma_grid.hpp"
#include "hetspill/het_test.hpp"
#include "hetspill/inference.hpp"
#include "hetspill/simgen.hpp"
#include "hetspill/validation.hpp"

namespace hetspill::cli {

using json = nlohmann::json;

enum ExitCode : int { kOk = 0, kGeneric = 1, kConfig = 2, kIo = 3, kData = 4, kEstimation = 5 };

struct GridRequest {
  std::vector<std::string> covariates;  // empty: every covariate
  int points = 9;
  double p_lo = 0.10;
  double p_hi = 0.90;
};

struct RunConfig {
  std::string command;
  std::string data_path;
  std::string out_dir = ".";

  ColumnSchema schema;
  std::string design_kind = "constant";  // constant | per-unit
  double design_p = 0.5;
  std::string design_column;

  double alpha = 0.5;
  std::vector<Eigen::VectorXd> gammas;  // explicit policies; empty: use `grid`
  GridRequest grid;
  std::optional<Eigen::VectorXd> gamma_ref;

  std::optional<std::uint64_t> seed;
  std::size_t draws = kDefaultNullDraws;  // --B
  std::size_t boot_reps = 0;
  std::string boot_interval = "percentile";
  double level = 0.95;  // CI confidence; the test runs at 1 - level
  EffectKind effect = EffectKind::OE;
  std::vector<Eigen::VectorXd> s1, s2;
  double weight_cap = 20.0;

  int scenario = 1;
  sim::Scenario1Params scenario1;
  sim::Scenario2Params scenario2;
  std::size_t oracle_reps = 2000;
  bool exact = false;

  unsigned threads = 1;
  bool timestamp = false;
};

// ---------------------------------------------------------------------------
// Config parsing

inline Eigen::VectorXd gamma_from_json(const json& j) {
  if (j.is_number()) return Eigen::VectorXd::Constant(1, j.get<double>());
  if (!j.is_array() || j.empty()) throw ConfigError("gamma must be a number or a non-empty array of numbers");
  Eigen::VectorXd g(static_cast<Eigen::Index>(j.size()));
  for (std::size_t k = 0; k < j.size(); ++k) {
    if (!j[k].is_number()) throw ConfigError("gamma entries must be numbers");
    g[static_cast<Eigen::Index>(k)] = j[k].get<double>();
  }
  return g;
}

inline json gamma_to_json(const Eigen::VectorXd& g) {
  json a = json::array();
  for (Eigen::Index k = 0; k < g.size(); ++k) a.push_back(g[k]);
  return a;
}

inline std::vector<Eigen::VectorXd> gamma_list_from_json(const json& j) {
  if (!j.is_array()) throw ConfigError("gamma list must be an array");
  std::vector<Eigen::VectorXd> out;
  for (const auto& g : j) out.push_back(gamma_from_json(g));
  return out;
}

/// "0.5,0" or "0.5;0" -> vector.
inline Eigen::VectorXd parse_gamma(const std::string& text) {
  std::vector<double> v;
  std::string tok;
  std::istringstream is(text);
  while (std::getline(is, tok, text.find(';') != std::string::npos ? ';' : ',')) {
    const auto d = detail::parse_double(tok);
    if (!d) throw ConfigError("cannot parse gamma '" + text + "'");
    v.push_back(*d);
  }
  if (v.empty()) throw ConfigError("empty gamma '" + text + "'");
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

namespace detail {

inline void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <class T>
void read(const json& obj, const char* key, T& dst) {
  if (obj.contains(key)) dst = obj.at(key).get<T>();
}

}  // namespace detail

/// Applies a JSON config document on top of `cfg`. Unknown keys and type
/// mismatches are configuration errors.
inline void apply_json(RunConfig& cfg, const json& doc) {
  using detail::read;
  try {
    detail::check_keys(doc,
                       {"command", "data", "out", "columns", "delimiter", "design", "alpha", "gammas", "grid",
                        "gamma_ref", "test", "seed", "boot_reps", "boot_interval", "level", "threads", "scenario",
                        "oracle", "weight_cap"},
                       "config");
    read(doc, "command", cfg.command);
    read(doc, "data", cfg.data_path);
    read(doc, "out", cfg.out_dir);
    if (doc.contains("columns")) {
      const auto& c = doc["columns"];
      detail::check_keys(c, {"cluster", "unit", "treatment", "outcome", "covariates", "propensity"}, "columns");
      read(c, "cluster", cfg.schema.cluster);
      read(c, "unit", cfg.schema.unit);
      read(c, "treatment", cfg.schema.treatment);
      read(c, "outcome", cfg.schema.outcome);
      read(c, "covariates", cfg.schema.covariates);
      read(c, "propensity", cfg.schema.propensity);
    }
    if (doc.contains("delimiter")) {
      const auto d = doc["delimiter"].get<std::string>();
      if (d.size() != 1) throw ConfigError("delimiter must be a single character");
      cfg.schema.delimiter = d[0];
    }
    if (doc.contains("design")) {
      const auto& d = doc["design"];
      detail::check_keys(d, {"kind", "p", "column"}, "design");
      read(d, "kind", cfg.design_kind);
      read(d, "p", cfg.design_p);
      read(d, "column", cfg.design_column);
    }
    read(doc, "alpha", cfg.alpha);
    if (doc.contains("gammas")) cfg.gammas = gamma_list_from_json(doc["gammas"]);
    if (doc.contains("grid")) {
      const auto& g = doc["grid"];
      detail::check_keys(g, {"covariates", "points", "percentiles"}, "grid");
      read(g, "covariates", cfg.grid.covariates);
      read(g, "points", cfg.grid.points);
      if (g.contains("percentiles")) {
        const auto p = g["percentiles"].get<std::vector<double>>();
        if (p.size() != 2) throw ConfigError("grid.percentiles must hold two values");
        cfg.grid.p_lo = p[0];
        cfg.grid.p_hi = p[1];
      }
    }
    if (doc.contains("gamma_ref")) cfg.gamma_ref = gamma_from_json(doc["gamma_ref"]);
    if (doc.contains("test")) {
      const auto& t = doc["test"];
      detail::check_keys(t, {"effect", "s1", "s2", "B"}, "test");
      if (t.contains("effect")) cfg.effect = parse_effect_kind(t["effect"].get<std::string>());
      if (t.contains("s1")) cfg.s1 = gamma_list_from_json(t["s1"]);
      if (t.contains("s2")) cfg.s2 = gamma_list_from_json(t["s2"]);
      read(t, "B", cfg.draws);
    }
    if (doc.contains("seed")) cfg.seed = doc["seed"].get<std::uint64_t>();
    read(doc, "boot_reps", cfg.boot_reps);
    read(doc, "boot_interval", cfg.boot_interval);
    read(doc, "level", cfg.level);
    read(doc, "threads", cfg.threads);
    read(doc, "weight_cap", cfg.weight_cap);
    if (doc.contains("scenario")) {
      const auto& s = doc["scenario"];
      detail::check_keys(s, {"id", "clusters", "cluster_size", "rho", "beta", "sigma", "design_p", "p_d"}, "scenario");
      read(s, "id", cfg.scenario);
      if (s.contains("clusters")) cfg.scenario1.clusters = cfg.scenario2.clusters = s["clusters"].get<std::size_t>();
      read(s, "cluster_size", cfg.scenario1.cluster_size);
      if (s.contains("rho")) cfg.scenario1.rho = cfg.scenario2.rho = s["rho"].get<double>();
      if (s.contains("beta")) {
        const auto b = s["beta"].get<std::vector<double>>();
        if (b.size() != 7) throw ConfigError("scenario.beta must hold 7 values: b0, b1, b2 (2), b3, b4, b5");
        auto& p = cfg.scenario1;
        p.beta0 = b[0];
        p.beta1 = b[1];
        p.beta2 = Eigen::Vector2d(b[2], b[3]);
        p.beta3 = b[4];
        p.beta4 = b[5];
        p.beta5 = b[6];
      }
      read(s, "sigma", cfg.scenario1.sigma);
      if (s.contains("design_p")) {
        const double p = s["design_p"].get<double>();
        (cfg.scenario == 2 ? cfg.scenario2.design_p : cfg.scenario1.design_p) = p;
      }
      read(s, "p_d", cfg.scenario2.p_d);
    }
    if (doc.contains("oracle")) {
      const auto& o = doc["oracle"];
      detail::check_keys(o, {"reps", "exact"}, "oracle");
      read(o, "reps", cfg.oracle_reps);
      read(o, "exact", cfg.exact);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  apply_json(cfg, doc);
}

inline void validate(const RunConfig& cfg) {
  static const std::vector<std::string> commands{"simulate", "estimate", "test", "oracle", "gamma-grid"};
  if (std::find(commands.begin(), commands.end(), cfg.command) == commands.end())
    throw ConfigError("unknown command '" + cfg.command + "'");
  if (!(cfg.alpha > 0.0 && cfg.alpha < 1.0)) throw ConfigError("alpha must lie in (0,1)");
  if (!(cfg.level > 0.0 && cfg.level < 1.0)) throw ConfigError("level must lie in (0,1)");
  if (cfg.design_kind != "constant" && cfg.design_kind != "per-unit")
    throw ConfigError("design.kind must be 'constant' or 'per-unit'");
  if (cfg.design_kind == "per-unit" && cfg.design_column.empty())
    throw ConfigError("per-unit design needs design.column");
  if (cfg.boot_interval != "percentile" && cfg.boot_interval != "normal")
    throw ConfigError("boot_interval must be 'percentile' or 'normal'");
  if (cfg.grid.points < 2) throw ConfigError("grid points must be >= 2");
  if (cfg.threads < 1) throw ConfigError("threads must be >= 1");
  if (cfg.scenario != 1 && cfg.scenario != 2) throw ConfigError("scenario must be 1 or 2");
  const bool needs_data = cfg.command == "estimate" || cfg.command == "test" || cfg.command == "gamma-grid";
  if (needs_data && cfg.data_path.empty()) throw ConfigError(cfg.command + " needs --data");
  const bool stochastic = cfg.command == "simulate" || cfg.command == "test" ||
                          (cfg.command == "oracle" && !cfg.exact) ||
                          (cfg.command == "estimate" && cfg.boot_reps > 0);
  if (stochastic && !cfg.seed) throw ConfigError(cfg.command + " is stochastic and needs an explicit --seed");
  if (cfg.command == "test" && cfg.draws < 100) throw ConfigError("--B must be >= 100");
  if (cfg.command == "oracle" && cfg.exact && cfg.scenario != 2)
    throw ConfigError("exact enumeration is available for scenario 2 only");
  try {
    if (cfg.command == "simulate" || cfg.command == "oracle") {
      if (cfg.scenario == 1) cfg.scenario1.validate();
      else cfg.scenario2.validate();
    }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

// ---------------------------------------------------------------------------
// Provenance

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a64(ss.str()));
}

/// Canonical form of everything that affects results. Paths, thread count
/// and the timestamp switch are excluded; input data enters by content digest.
inline json canonical_json(const RunConfig& cfg) {
  json j;
  j["command"] = cfg.command;
  j["alpha"] = cfg.alpha;
  j["level"] = cfg.level;
  j["seed"] = cfg.seed ? json(*cfg.seed) : json(nullptr);
  json design = {{"kind", cfg.design_kind}};
  if (cfg.design_kind == "constant") design["p"] = cfg.design_p;
  else design["column"] = cfg.design_column;
  j["design"] = design;
  j["columns"] = {{"cluster", cfg.schema.cluster},   {"unit", cfg.schema.unit},
                  {"treatment", cfg.schema.treatment}, {"outcome", cfg.schema.outcome},
                  {"covariates", cfg.schema.covariates}, {"delimiter", std::string(1, cfg.schema.delimiter)}};
  json gl = json::array();
  for (const auto& g : cfg.gammas) gl.push_back(gamma_to_json(g));
  j["gammas"] = gl;
  j["grid"] = {{"covariates", cfg.grid.covariates},
               {"points", cfg.grid.points},
               {"percentiles", {cfg.grid.p_lo, cfg.grid.p_hi}}};
  j["gamma_ref"] = cfg.gamma_ref ? gamma_to_json(*cfg.gamma_ref) : json(nullptr);
  json s1 = json::array(), s2 = json::array();
  for (const auto& g : cfg.s1) s1.push_back(gamma_to_json(g));
  for (const auto& g : cfg.s2) s2.push_back(gamma_to_json(g));
  j["test"] = {{"effect", effect_name(cfg.effect)}, {"B", cfg.draws}, {"s1", s1}, {"s2", s2}};
  j["bootstrap"] = {{"reps", cfg.boot_reps}, {"interval", cfg.boot_interval}};
  j["weight_cap"] = cfg.weight_cap;
  if (cfg.command == "simulate" || cfg.command == "oracle") {
    if (cfg.scenario == 1) {
      const auto& p = cfg.scenario1;
      j["scenario"] = {{"id", 1},
                       {"clusters", p.clusters},
                       {"cluster_size", p.cluster_size},
                       {"rho", p.rho},
                       {"beta", {p.beta0, p.beta1, p.beta2[0], p.beta2[1], p.beta3, p.beta4, p.beta5}},
                       {"sigma", p.sigma},
                       {"design_p", p.design_p}};
    } else {
      const auto& p = cfg.scenario2;
      j["scenario"] = {
          {"id", 2}, {"clusters", p.clusters}, {"rho", p.rho}, {"p_d", p.p_d}, {"design_p", p.design_p}};
    }
    j["oracle"] = {{"reps", cfg.oracle_reps}, {"exact", cfg.exact}};
  }
  if (!cfg.data_path.empty()) j["data_digest"] = file_digest(cfg.data_path);
  return j;
}

inline std::string config_digest(const RunConfig& cfg) { return hex64(fnv1a64(canonical_json(cfg).dump())); }

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// ---------------------------------------------------------------------------
// Output helpers

struct Provenance {
  std::string digest;
  std::string timestamp;  // empty unless requested
};

class OutputDir {
 public:
  OutputDir(const std::string& dir, Provenance prov) : dir_(dir), prov_(std::move(prov)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  /// Opens a CSV file and writes the provenance comment lines.
  std::ofstream csv(const std::string& name) const {
    std::ofstream out(path(name));
    if (!out) throw IoError("cannot write '" + path(name) + "'");
    out << "# config_digest=" << prov_.digest << '\n';
    if (!prov_.timestamp.empty()) out << "# timestamp=" << prov_.timestamp << '\n';
    return out;
  }

  void write_json(const std::string& name, json doc) const {
    doc["config_digest"] = prov_.digest;
    if (!prov_.timestamp.empty()) doc["timestamp"] = prov_.timestamp;
    std::ofstream out(path(name));
    if (!out) throw IoError("cannot write '" + path(name) + "'");
    out << doc.dump(2) << '\n';
    if (!out) throw IoError("write failed for '" + path(name) + "'");
  }

  const Provenance& provenance() const noexcept { return prov_; }

 private:
  std::filesystem::path dir_;
  Provenance prov_;
};

inline std::string num(double v) { return hetspill::detail::format_double(v); }

inline std::string gamma_columns(const std::vector<std::string>& names, const std::string& prefix) {
  std::string s;
  for (std::size_t k = 0; k < names.size(); ++k) s += (k ? "," : "") + prefix + names[k];
  return s;
}

inline std::string gamma_values(const Eigen::VectorXd& g) {
  std::string s;
  for (Eigen::Index k = 0; k < g.size(); ++k) s += (k ? "," : "") + num(g[k]);
  return s;
}

// ---------------------------------------------------------------------------
// Pipeline pieces

inline DesignPropensity make_design(const RunConfig& cfg) {
  return cfg.design_kind == "per-unit" ? DesignPropensity::per_unit(cfg.design_column)
                                       : DesignPropensity::constant(cfg.design_p);
}

inline Dataset load_input(const RunConfig& cfg) {
  ColumnSchema schema = cfg.schema;
  if (cfg.design_kind == "per-unit") schema.propensity = cfg.design_column;
  return load_dataset(cfg.data_path, schema);
}

inline EstimationOptions estimation_options(const RunConfig& cfg) {
  EstimationOptions o;
  o.parallelism.threads = cfg.threads;
  return o;
}

inline std::vector<GammaRange> grid_ranges(const RunConfig& cfg, const Dataset& ds) {
  std::vector<Eigen::Index> targets;
  if (cfg.grid.covariates.empty()) {
    for (Eigen::Index k = 0; k < ds.num_covariates(); ++k) targets.push_back(k);
  } else {
    for (const auto& name : cfg.grid.covariates) {
      const auto k = ds.covariate_index(name);
      if (!k) throw ConfigError("grid covariate '" + name + "' not in data");
      targets.push_back(*k);
    }
  }
  std::vector<GammaRange> ranges;
  for (auto k : targets)
    ranges.push_back(gamma_range(ds, k, cfg.grid.p_lo, cfg.grid.p_hi, estimation_options(cfg).parallelism));
  return ranges;
}

/// Policies to estimate: the explicit list, or the data-driven grid. The
/// reference policy is appended when missing.
inline std::vector<Eigen::VectorXd> resolve_gammas(const RunConfig& cfg, const Dataset& ds, Eigen::VectorXd& ref) {
  const Eigen::Index K = ds.num_covariates();
  std::vector<Eigen::VectorXd> gammas = cfg.gammas;
  if (gammas.empty()) {
    const auto ranges = grid_ranges(cfg, ds);
    gammas = materialize_grid(ranges, K, cfg.grid.points);
  }
  for (const auto& g : gammas)
    if (g.size() != K)
      throw ConfigError("gamma (" + format_gamma(g) + ") has " + std::to_string(g.size()) + " entries, data has " +
                        std::to_string(K) + " covariates");
  ref = cfg.gamma_ref ? *cfg.gamma_ref : Eigen::VectorXd::Zero(K);
  if (ref.size() != K) throw ConfigError("gamma_ref length does not match the number of covariates");
  if (std::none_of(gammas.begin(), gammas.end(), [&](const Eigen::VectorXd& g) { return g == ref; }))
    gammas.push_back(ref);
  try {
    check_gamma_grid(gammas, K);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return gammas;
}

inline json effect_json(const EffectReport& r) {
  return {{"effect", effect_name(r.kind)},
          {"gamma", gamma_to_json(r.gamma)},
          {"gamma_ref", gamma_to_json(r.gamma_ref)},
          {"estimate", r.estimate},
          {"se", std::sqrt(r.variance)},
          {"lo", r.lo},
          {"hi", r.hi},
          {"level", r.level}};
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_simulate(const RunConfig& cfg, const OutputDir& out, std::ostream& log) {
  const Dataset ds = cfg.scenario == 1 ? sim::gen_scenario1(cfg.scenario1, *cfg.seed)
                                       : sim::gen_scenario2(cfg.scenario2, *cfg.seed);
  {
    auto f = out.csv("data.csv");
    write_dataset(ds, f);
    if (!f) throw IoError("write failed for '" + out.path("data.csv") + "'");
  }
  json side = canonical_json(cfg);
  side["design"] = {{"kind", "constant"},
                    {"p", cfg.scenario == 1 ? cfg.scenario1.design_p : cfg.scenario2.design_p}};
  side["clusters"] = ds.num_clusters();
  side["units"] = ds.num_units();
  out.write_json("data.json", side);
  log << "simulate: scenario " << cfg.scenario << ", " << ds.num_clusters() << " clusters, " << ds.num_units()
      << " units -> " << out.path("data.csv") << '\n';
  return kOk;
}

inline int cmd_estimate(const RunConfig& cfg, const OutputDir& out, std::ostream& log) {
  const Dataset ds = load_input(cfg);
  const auto design = make_design(cfg);
  Eigen::VectorXd ref;
  const auto gammas = resolve_gammas(cfg, ds, ref);
  const auto opts = estimation_options(cfg);

  const auto table = estimating_table(ds, design, cfg.alpha, gammas, opts);
  const MuSet mu = mu_set_from_table(table, cfg.alpha, gammas);
  const auto M = mu.size();
  Eigen::MatrixXd cov = Eigen::MatrixXd::Constant(M, M, std::numeric_limits<double>::quiet_NaN());
  if (ds.num_clusters() >= 2) {
    cov = sandwich_covariance(psi_from_table(table, mu.values)).matrix;
  } else {
    log << "warning: a single cluster gives no variance estimate\n";
  }

  std::vector<EffectReport> reports;
  for (const auto& g : gammas) {
    auto reps = contrast_effects(mu, g, ref);
    for (auto& r : reps) {
      r.variance = r.contrast.dot(cov * r.contrast);
      std::tie(r.lo, r.hi) = std::isfinite(r.variance)
                                 ? wald_ci(r.estimate, std::max(0.0, r.variance), cfg.level)
                                 : std::pair{r.variance, r.variance};
      r.level = cfg.level;
      reports.push_back(std::move(r));
    }
  }

  const auto gcols = gamma_columns(ds.covariate_names, "gamma_");
  {
    auto f = out.csv("mu.csv");
    f << gcols << ",estimand,estimate,se\n";
    for (Eigen::Index r = 0; r < mu.num_policies(); ++r)
      for (Estimand e : kEstimands) {
        const auto m = mu.index(e, r);
        f << gamma_values(gammas[static_cast<std::size_t>(r)]) << ',' << estimand_name(e) << ',' << num(mu.values[m])
          << ',' << num(std::sqrt(cov(m, m))) << '\n';
      }
  }
  {
    auto f = out.csv("effects.csv");
    f << "effect," << gcols << ',' << gamma_columns(ds.covariate_names, "ref_") << ",estimate,se,lo,hi,level\n";
    for (const auto& r : reports)
      f << effect_name(r.kind) << ',' << gamma_values(r.gamma) << ',' << gamma_values(r.gamma_ref) << ','
        << num(r.estimate) << ',' << num(std::sqrt(r.variance)) << ',' << num(r.lo) << ',' << num(r.hi) << ','
        << num(r.level) << '\n';
  }
  {
    auto f = out.csv("covariance.csv");
    f << "label";
    for (const auto& l : mu.labels) f << ",\"" << l << '"';
    f << '\n';
    for (Eigen::Index a = 0; a < M; ++a) {
      f << '"' << mu.labels[static_cast<std::size_t>(a)] << '"';
      for (Eigen::Index b = 0; b < M; ++b) f << ',' << num(cov(a, b));
      f << '\n';
    }
  }
  json doc;
  doc["alpha"] = cfg.alpha;
  doc["clusters"] = ds.num_clusters();
  doc["covariates"] = ds.covariate_names;
  doc["effects"] = json::array();
  for (const auto& r : reports) doc["effects"].push_back(effect_json(r));

  std::vector<AllocationPolicy> policies;
  for (const auto& g : gammas) policies.push_back({cfg.alpha, g});
  ValidationOptions vo;
  vo.weight_cap = cfg.weight_cap;
  const auto val = validate_assumptions(ds, design, policies, vo);
  doc["validation"] = {{"flags", val.flags.size()}, {"max_normalized_weight", val.max_normalized_weight}};
  if (!val.empty()) log << "warning: " << val.flags.size() << " positivity flags (see effects.json)\n";

  if (cfg.boot_reps > 0) {
    BootstrapOptions bo;
    bo.reps = cfg.boot_reps;
    bo.seed = *cfg.seed;
    bo.level = cfg.level;
    bo.interval = cfg.boot_interval == "normal" ? BootstrapInterval::Normal : BootstrapInterval::Percentile;
    bo.gamma_ref = ref;
    const auto boot = cluster_bootstrap(ds, design, cfg.alpha, gammas, bo, opts);
    auto f = out.csv("effects_bootstrap.csv");
    f << "effect," << gcols << ",estimate,boot_se,lo,hi,interval\n";
    for (std::size_t r = 0; r < gammas.size(); ++r)
      for (EffectKind k : kEffectKinds) {
        const auto m = static_cast<Eigen::Index>(4 * r) + static_cast<int>(k);
        f << effect_name(k) << ',' << gamma_values(gammas[r]) << ',' << num(reports[4 * r + static_cast<int>(k)].estimate)
          << ',' << num(std::sqrt(boot.effect_covariance(m, m))) << ',' << num(boot.effect_lo[m]) << ','
          << num(boot.effect_hi[m]) << ',' << cfg.boot_interval << '\n';
      }
    doc["bootstrap"] = {{"requested", boot.requested}, {"discarded", boot.discarded}};
  }
  out.write_json("effects.json", doc);

  for (const auto& r : reports)
    log << effect_name(r.kind) << " gamma=(" << format_gamma(r.gamma) << ") ref=(" << format_gamma(r.gamma_ref)
        << ") estimate=" << num(r.estimate) << " se=" << num(std::sqrt(r.variance)) << " ci=[" << num(r.lo) << ", "
        << num(r.hi) << "]\n";
  return kOk;
}

inline int cmd_test(const RunConfig& cfg, const OutputDir& out, std::ostream& log) {
  const Dataset ds = load_input(cfg);
  const auto design = make_design(cfg);
  Eigen::VectorXd ref;
  const auto gammas = resolve_gammas(cfg, ds, ref);
  HetTestOptions opt;
  opt.kind = cfg.effect;
  opt.level = std::round((1.0 - cfg.level) * 1e12) / 1e12;  // 1 - 0.95 prints as 0.05
  opt.draws = cfg.draws;
  opt.seed = *cfg.seed;
  opt.estimation = estimation_options(cfg);
  std::vector<Eigen::Index> s1, s2;
  try {
    s1 = grid_indices(gammas, cfg.s1);
    s2 = grid_indices(gammas, cfg.s2);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const auto fit = fit_mu_set(ds, design, cfg.alpha, gammas, opt.estimation);
  const auto res = het_test(fit, s1, s2, opt);

  json doc;
  doc["effect"] = effect_name(res.kind);
  doc["statistic"] = res.statistic;
  doc["p_value"] = res.p_value;
  doc["reject"] = res.reject;
  doc["level"] = res.level;
  doc["draws"] = res.draws;
  doc["critical_value"] = res.critical_value;
  doc["alpha"] = cfg.alpha;
  doc["grid"] = json::array();
  for (std::size_t r = 0; r < res.grid.size(); ++r)
    doc["grid"].push_back({{"gamma", gamma_to_json(res.grid[r])},
                           {"effect", res.effects[static_cast<Eigen::Index>(r)]},
                           {"se", std::sqrt(std::max(0.0, res.effect_cov(static_cast<Eigen::Index>(r),
                                                                         static_cast<Eigen::Index>(r))))}});
  doc["s1"] = res.s1;
  doc["s2"] = res.s2;
  out.write_json("het_test.json", doc);
  log << "test " << effect_name(res.kind) << ": T=" << num(res.statistic) << " p=" << num(res.p_value)
      << " critical=" << num(res.critical_value) << " level=" << num(res.level)
      << (res.reject ? " reject" : " no-reject") << " (grid " << res.grid.size() << ", B=" << res.draws << ")\n";
  return kOk;
}

inline std::vector<Eigen::VectorXd> oracle_gammas(const RunConfig& cfg) {
  std::vector<Eigen::VectorXd> g = cfg.gammas;
  if (g.empty()) {
    const std::vector<GammaRange> axis{fixed_range(0, -1.0, 1.0, "x1")};
    g = materialize_grid(axis, 2, cfg.grid.points);
  }
  for (const auto& v : g)
    if (v.size() != 2) throw ConfigError("oracle gammas need 2 entries (x1, x2)");
  const Eigen::VectorXd ref = cfg.gamma_ref ? *cfg.gamma_ref : Eigen::VectorXd::Zero(2);
  if (std::none_of(g.begin(), g.end(), [&](const Eigen::VectorXd& v) { return v == ref; })) g.push_back(ref);
  return g;
}

inline int cmd_oracle(const RunConfig& cfg, const OutputDir& out, std::ostream& log) {
  const auto gammas = oracle_gammas(cfg);
  const Eigen::VectorXd ref = cfg.gamma_ref ? *cfg.gamma_ref : Eigen::VectorXd::Zero(2);
  sim::TrueEffects te;
  if (cfg.exact) {
    te = sim::exact_scenario2_effects(cfg.scenario2, cfg.alpha, gammas, ref);
  } else {
    sim::OracleOptions oo;
    oo.reps = cfg.oracle_reps;
    oo.seed = *cfg.seed;
    oo.gamma_ref = ref;
    oo.parallelism.threads = cfg.threads;
    const sim::ScenarioParams sp = cfg.scenario == 1 ? sim::ScenarioParams{cfg.scenario1}
                                                     : sim::ScenarioParams{cfg.scenario2};
    te = sim::oracle_true_effects(sp, cfg.alpha, gammas, oo);
  }
  const char* method = te.method == sim::TruthMethod::Exact ? "exact" : "mc";
  auto f = out.csv("oracle.csv");
  f << "scenario,alpha,gamma_x1,gamma_x2,ref_x1,ref_x2,method,reps";
  for (const char* m : {"Y0", "Y1", "Y"}) f << ',' << m << ',' << m << "_se";
  for (EffectKind k : kEffectKinds) f << ',' << effect_name(k) << ',' << effect_name(k) << "_se";
  f << '\n';
  for (const auto& row : te.rows) {
    f << cfg.scenario << ',' << num(cfg.alpha) << ',' << gamma_values(row.gamma) << ',' << gamma_values(te.gamma_ref)
      << ',' << method << ',' << te.reps;
    for (int e = 0; e < 3; ++e) f << ',' << num(row.mu[e]) << ',' << num(row.mu_se[e]);
    for (int k = 0; k < 4; ++k) f << ',' << num(row.effect[k]) << ',' << num(row.effect_se[k]);
    f << '\n';
    log << "oracle scenario " << cfg.scenario << " gamma=(" << format_gamma(row.gamma) << ")";
    for (int k = 0; k < 4; ++k)
      log << ' ' << effect_name(kEffectKinds[static_cast<std::size_t>(k)]) << '=' << num(row.effect[k]) << "+-"
          << num(row.effect_se[k]);
    log << '\n';
  }
  return kOk;
}

inline int cmd_gamma_grid(const RunConfig& cfg, const OutputDir& out, std::ostream& log) {
  const Dataset ds = load_input(cfg);
  const auto ranges = grid_ranges(cfg, ds);
  auto f = out.csv("gamma_grid.csv");
  const std::string header = "covariate,lo,hi,n_converged,n_dropped";
  f << header << '\n';
  log << header << '\n';
  for (const auto& r : ranges) {
    std::ostringstream line;
    line << r.name << ',' << num(r.lo) << ',' << num(r.hi) << ',' << r.n_converged << ',' << r.n_dropped;
    f << line.str() << '\n';
    log << line.str() << '\n';
  }
  const auto grid = materialize_grid(ranges, ds.num_covariates(), cfg.grid.points);
  auto g = out.csv("grid.csv");
  g << gamma_columns(ds.covariate_names, "gamma_") << '\n';
  for (const auto& v : grid) g << gamma_values(v) << '\n';
  return kOk;
}

/// Runs one command. Errors are reported on `err` and mapped to exit codes.
inline int run(const RunConfig& cfg, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  try {
    validate(cfg);
    Provenance prov{config_digest(cfg), cfg.timestamp ? utc_timestamp() : std::string{}};
    const OutputDir out(cfg.out_dir, prov);
    if (cfg.command == "simulate") return cmd_simulate(cfg, out, log);
    if (cfg.command == "estimate") return cmd_estimate(cfg, out, log);
    if (cfg.command == "test") return cmd_test(cfg, out, log);
    if (cfg.command == "oracle") return cmd_oracle(cfg, out, log);
    return cmd_gamma_grid(cfg, out, log);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const PositivityError& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const EstimationError& e) {
    err << "estimation error: " << e.what() << '\n';
    return kEstimation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kGeneric;
  }
}

// ---------------------------------------------------------------------------
// Command line

/// Parses argv into a RunConfig: defaults, then --config, then flags. Returns
/// an exit code when the process should stop (help or a parse error).
inline std::optional<int> parse_command_line(int argc, const char* const* argv, RunConfig& cfg,
                                             std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Heterogeneous-spillover estimation under partial interference"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::string config_path, gamma_ref, effect, boot_interval;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha, level, pd, rho, design_p;
  std::optional<int> grid_points, scenario;
  std::optional<std::size_t> draws, boot_reps, reps, clusters;
  std::optional<unsigned> threads;
  std::optional<std::string> data, out_dir;
  std::vector<std::string> gammas, grid_covs, s1, s2;
  bool timestamp = false, exact = false;

  const std::pair<const char*, const char*> commands[] = {
      {"simulate", "generate a scenario 1 or 2 dataset"},
      {"estimate", "policy means, effects, sandwich and bootstrap intervals"},
      {"test", "range test for effect heterogeneity over a gamma grid"},
      {"oracle", "true effects by Monte Carlo or exact enumeration"},
      {"gamma-grid", "data-driven gamma ranges from per-cluster logistic slopes"}};
  for (const auto& [name, about] : commands) {
    auto* sub = app.add_subcommand(name, about);
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--seed", seed, "RNG seed (required by stochastic commands)");
    sub->add_option("--alpha", alpha, "cluster-average propensity");
    sub->add_option("--gamma", gammas, "policy coefficients, e.g. 0.5,0 (repeatable)");
    sub->add_option("--gamma-ref", gamma_ref, "reference policy for IE/OE (default 0)");
    sub->add_option("--grid-points", grid_points, "points per grid axis");
    sub->add_option("--grid-covariate", grid_covs, "covariates spanned by the data-driven grid");
    sub->add_option("--B", draws, "Monte-Carlo null draws for the test");
    sub->add_option("--boot-reps", boot_reps, "cluster bootstrap replicates (0 = off)");
    sub->add_option("--boot-interval", boot_interval, "percentile | normal");
    sub->add_option("--level", level, "confidence level; the test uses 1 - level");
    sub->add_option("--effect", effect, "DE | IE0 | IE1 | OE (test)");
    sub->add_option("--s1", s1, "gamma in S1 (repeatable)");
    sub->add_option("--s2", s2, "gamma in S2 (repeatable)");
    sub->add_option("--threads", threads, "worker threads");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--data", data, "input CSV");
    sub->add_option("--design-p", design_p, "constant Bernoulli design probability");
    sub->add_option("--scenario", scenario, "simulation scenario (1 or 2)");
    sub->add_option("--clusters", clusters, "number of simulated clusters");
    sub->add_option("--pd", pd, "scenario 2 diffusion probability");
    sub->add_option("--rho", rho, "covariate concordance");
    sub->add_option("--reps", reps, "oracle replicates");
    sub->add_flag("--exact", exact, "oracle by exact enumeration (scenario 2)");
    sub->add_flag("--timestamp", timestamp, "add a timestamp line to outputs");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, log, err);
    return code == 0 ? kOk : kConfig;
  }

  try {
    cfg.command = app.get_subcommands().front()->get_name();
    if (!config_path.empty()) load_config_file(cfg, config_path);
    cfg.command = app.get_subcommands().front()->get_name();
    if (seed) cfg.seed = seed;
    if (alpha) cfg.alpha = *alpha;
    if (!gammas.empty()) {
      cfg.gammas.clear();
      for (const auto& g : gammas) cfg.gammas.push_back(parse_gamma(g));
    }
    if (!gamma_ref.empty()) cfg.gamma_ref = parse_gamma(gamma_ref);
    if (grid_points) cfg.grid.points = *grid_points;
    if (!grid_covs.empty()) cfg.grid.covariates = grid_covs;
    if (draws) cfg.draws = *draws;
    if (boot_reps) cfg.boot_reps = *boot_reps;
    if (!boot_interval.empty()) cfg.boot_interval = boot_interval;
    if (level) cfg.level = *level;
    if (!effect.empty()) cfg.effect = parse_effect_kind(effect);
    if (!s1.empty()) {
      cfg.s1.clear();
      for (const auto& g : s1) cfg.s1.push_back(parse_gamma(g));
    }
    if (!s2.empty()) {
      cfg.s2.clear();
      for (const auto& g : s2) cfg.s2.push_back(parse_gamma(g));
    }
    if (threads) cfg.threads = *threads;
    if (out_dir) cfg.out_dir = *out_dir;
    if (data) cfg.data_path = *data;
    if (scenario) cfg.scenario = *scenario;
    if (design_p) {
      cfg.design_p = *design_p;
      (cfg.scenario == 2 ? cfg.scenario2.design_p : cfg.scenario1.design_p) = *design_p;
    }
    if (clusters) cfg.scenario1.clusters = cfg.scenario2.clusters = *clusters;
    if (pd) cfg.scenario2.p_d = *pd;
    if (rho) cfg.scenario1.rho = cfg.scenario2.rho = *rho;
    if (reps) cfg.oracle_reps = *reps;
    if (exact) cfg.exact = true;
    if (timestamp) cfg.timestamp = true;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  }
  return std::nullopt;
}

}  // namespace hetspill::cli
