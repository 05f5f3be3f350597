#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "hetspill/cli.hpp"
#include "test_util.hpp"

using namespace hetspill;
using namespace hetspill::cli;

namespace {

int run_quiet(const RunConfig& cfg, std::string* err_text = nullptr) {
  std::ostringstream log, err;
  const int code = run(cfg, log, err);
  if (err_text) *err_text = err.str();
  return code;
}

RunConfig simulate_cfg(const std::filesystem::path& dir, std::size_t clusters = 60) {
  RunConfig cfg;
  cfg.command = "simulate";
  cfg.seed = 11;
  cfg.out_dir = dir.string();
  cfg.scenario1.clusters = clusters;
  return cfg;
}

std::optional<int> parse(std::vector<std::string> args, RunConfig& cfg) {
  std::vector<const char*> argv{"hetspill"};
  for (auto& a : args) argv.push_back(a.c_str());
  std::ostringstream log, err;
  return parse_command_line(static_cast<int>(argv.size()), argv.data(), cfg, log, err);
}

}  // namespace

TEST(Cli, SimulateEstimateTestPipeline) {
  const auto dir = testutil::scratch("pipeline");
  ASSERT_EQ(run_quiet(simulate_cfg(dir / "sim")), kOk);
  const auto data = (dir / "sim" / "data.csv").string();
  EXPECT_TRUE(std::filesystem::exists(dir / "sim" / "data.json"));

  RunConfig est;
  est.command = "estimate";
  est.data_path = data;
  est.out_dir = (dir / "est").string();
  est.gammas = {testutil::vec({0.5, 0}), testutil::vec({-0.5, 0})};
  ASSERT_EQ(run_quiet(est), kOk);
  for (const char* f : {"mu.csv", "effects.csv", "covariance.csv", "effects.json"}) {
    const auto text = testutil::slurp(dir / "est" / f);
    EXPECT_NE(text.find("config_digest"), std::string::npos) << f;
  }
  const auto j = json::parse(testutil::slurp(dir / "est" / "effects.json"));
  EXPECT_EQ(j["effects"].size(), 12u);  // 3 policies (reference appended) x 4 effects

  RunConfig t = est;
  t.command = "test";
  t.out_dir = (dir / "test").string();
  t.seed = 2;
  t.draws = 500;
  t.gammas.clear();
  t.grid.covariates = {"x1"};
  t.grid.points = 5;
  ASSERT_EQ(run_quiet(t), kOk);
  const auto h = json::parse(testutil::slurp(dir / "test" / "het_test.json"));
  EXPECT_GT(h["p_value"].get<double>(), 0.0);
  EXPECT_LE(h["p_value"].get<double>(), 1.0);
  EXPECT_EQ(h["effect"], "OE");
}

// Same config + seed gives byte-identical files, whatever the thread count.
TEST(Cli, ByteIdenticalOutputs) {
  const auto dir = testutil::scratch("identical");
  ASSERT_EQ(run_quiet(simulate_cfg(dir / "a")), kOk);
  ASSERT_EQ(run_quiet(simulate_cfg(dir / "b")), kOk);
  EXPECT_EQ(testutil::slurp(dir / "a" / "data.csv"), testutil::slurp(dir / "b" / "data.csv"));
  EXPECT_EQ(testutil::slurp(dir / "a" / "data.json"), testutil::slurp(dir / "b" / "data.json"));

  RunConfig est;
  est.command = "estimate";
  est.data_path = (dir / "a" / "data.csv").string();
  est.grid.points = 3;
  est.boot_reps = 40;
  est.seed = 5;
  est.out_dir = (dir / "e1").string();
  ASSERT_EQ(run_quiet(est), kOk);
  est.out_dir = (dir / "e2").string();
  est.threads = 3;
  ASSERT_EQ(run_quiet(est), kOk);
  for (const char* f : {"mu.csv", "effects.csv", "covariance.csv", "effects.json", "effects_bootstrap.csv"})
    EXPECT_EQ(testutil::slurp(dir / "e1" / f), testutil::slurp(dir / "e2" / f)) << f;

  est.timestamp = true;
  est.out_dir = (dir / "e3").string();
  ASSERT_EQ(run_quiet(est), kOk);
  const auto stamped = testutil::slurp(dir / "e3" / "mu.csv");
  EXPECT_NE(stamped.find("# timestamp="), std::string::npos);
  EXPECT_EQ(stamped.substr(stamped.find('\n', stamped.find("# timestamp=")) + 1),
            testutil::slurp(dir / "e1" / "mu.csv").substr(testutil::slurp(dir / "e1" / "mu.csv").find('\n') + 1));
}

TEST(Cli, DigestTracksResultRelevantSettings) {
  RunConfig a;
  a.command = "oracle";
  a.seed = 1;
  RunConfig b = a;
  b.threads = 4;
  b.out_dir = "/elsewhere";
  EXPECT_EQ(config_digest(a), config_digest(b));
  b.seed = 2;
  EXPECT_NE(config_digest(a), config_digest(b));
}

TEST(Cli, SingleClusterEstimateIsUnweightedMean) {
  const auto dir = testutil::scratch("one");
  std::ofstream(dir / "d.csv") << "cluster,A,Y,x\nk,1,1.0,0.2\nk,0,2.0,1.5\nk,1,6.0,-1\n";
  RunConfig cfg;
  cfg.command = "estimate";
  cfg.data_path = (dir / "d.csv").string();
  cfg.gammas = {testutil::vec({0.8})};
  cfg.out_dir = (dir / "out").string();
  ASSERT_EQ(run_quiet(cfg), kOk);
  std::ifstream mu(dir / "out" / "mu.csv");
  std::string line;
  bool found = false;
  while (std::getline(mu, line))
    if (line.rfind("0.8,Y,", 0) == 0) {
      EXPECT_NEAR(std::stod(line.substr(6)), 3.0, 1e-14);
      found = true;
    }
  EXPECT_TRUE(found);
}

TEST(Cli, OracleWithoutDiffusion) {
  const auto dir = testutil::scratch("oracle");
  RunConfig cfg;
  cfg.command = "oracle";
  cfg.scenario = 2;
  cfg.scenario2.p_d = 0.0;
  cfg.scenario2.clusters = 40;
  cfg.alpha = 0.25;
  cfg.oracle_reps = 50;
  cfg.seed = 3;
  cfg.grid.points = 5;
  cfg.out_dir = dir.string();
  ASSERT_EQ(run_quiet(cfg), kOk);
  std::ifstream in(dir / "oracle.csv");
  std::string line;
  std::getline(in, line);  // digest
  std::getline(in, line);  // header
  std::vector<std::string> head;
  {
    std::stringstream ss(line);
    for (std::string t; std::getline(ss, t, ',');) head.push_back(t);
  }
  const auto oe = std::find(head.begin(), head.end(), "OE") - head.begin();
  int rows = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string t; std::getline(ss, t, ',');) f.push_back(t);
    EXPECT_LE(std::abs(std::stod(f[oe])), 3 * std::stod(f[oe + 1]) + 1e-12) << line;
    ++rows;
  }
  EXPECT_EQ(rows, 5);
}

TEST(Cli, ExitCodes) {
  const auto dir = testutil::scratch("codes");
  RunConfig cfg = simulate_cfg(dir);
  cfg.seed.reset();
  std::string err;
  EXPECT_EQ(run_quiet(cfg, &err), kConfig);
  EXPECT_NE(err.find("seed"), std::string::npos);

  RunConfig est;
  est.command = "estimate";
  est.out_dir = dir.string();
  est.data_path = (dir / "missing.csv").string();
  EXPECT_EQ(run_quiet(est), kIo);

  std::ofstream(dir / "bad.csv") << "cluster,A,Y,x\nk,0,1,0\nk,2,1,0\n";
  est.data_path = (dir / "bad.csv").string();
  EXPECT_EQ(run_quiet(est, &err), kData);
  EXPECT_NE(err.find("non-binary treatment, row 2"), std::string::npos);

  std::ofstream(dir / "flat.csv") << "cluster,A,Y,x\na,0,1,0\na,0,1,0\nb,0,2,1\n";
  est.data_path = (dir / "flat.csv").string();
  est.gammas = {testutil::vec({0})};
  EXPECT_EQ(run_quiet(est), kEstimation);

  est.alpha = 1.5;
  EXPECT_EQ(run_quiet(est), kConfig);
}

TEST(Cli, ConfigFileAndFlagOverrides) {
  const auto dir = testutil::scratch("config");
  std::ofstream(dir / "c.json") << R"({"alpha": 0.3, "seed": 4, "gammas": [[0.5, 0], [0, 0]],
    "design": {"kind": "constant", "p": 0.5}, "test": {"effect": "DE", "B": 300}})";
  RunConfig cfg;
  ASSERT_FALSE(parse({"test", "--config", (dir / "c.json").string(), "--alpha", "0.4", "--data", "x.csv"}, cfg));
  EXPECT_EQ(cfg.command, "test");
  EXPECT_DOUBLE_EQ(cfg.alpha, 0.4);
  EXPECT_EQ(*cfg.seed, 4u);
  EXPECT_EQ(cfg.draws, 300u);
  EXPECT_EQ(cfg.effect, EffectKind::DE);
  ASSERT_EQ(cfg.gammas.size(), 2u);
  EXPECT_EQ(cfg.gammas[0], testutil::vec({0.5, 0}));

  RunConfig g;
  ASSERT_FALSE(parse({"estimate", "--gamma", "0.5;1", "--gamma", "-1,2", "--B", "200"}, g));
  ASSERT_EQ(g.gammas.size(), 2u);
  EXPECT_EQ(g.gammas[1], testutil::vec({-1, 2}));

  std::ofstream(dir / "bad.json") << R"({"alpha": 0.3, "colour": 1})";
  RunConfig bad;
  EXPECT_EQ(parse({"estimate", "--config", (dir / "bad.json").string()}, bad), kConfig);
  RunConfig flag;
  EXPECT_EQ(parse({"estimate", "--no-such-flag"}, flag), kConfig);
  RunConfig none;
  EXPECT_EQ(parse({}, none), kConfig);
}

TEST(Cli, GammaGridCommand) {
  const auto dir = testutil::scratch("grid");
  ASSERT_EQ(run_quiet(simulate_cfg(dir / "sim", 80)), kOk);
  RunConfig cfg;
  cfg.command = "gamma-grid";
  cfg.data_path = (dir / "sim" / "data.csv").string();
  cfg.out_dir = dir.string();
  std::ostringstream log, err;
  ASSERT_EQ(run(cfg, log, err), kOk);
  EXPECT_EQ(log.str().substr(0, log.str().find('\n')), "covariate,lo,hi,n_converged,n_dropped");
  EXPECT_NE(log.str().find("\nx1,"), std::string::npos);
  EXPECT_NE(log.str().find("\nx2,"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir / "grid.csv"));
}

#ifdef HETSPILL_CLI_PATH
TEST(Cli, BinaryExitStatus) {
  const std::string exe = HETSPILL_CLI_PATH;
  EXPECT_EQ(std::system((exe + " --help > /dev/null").c_str()), 0);
  EXPECT_NE(std::system((exe + " estimate --bogus > /dev/null 2>&1").c_str()), 0);
  const int status = std::system((exe + " simulate > /dev/null 2>&1").c_str());
  EXPECT_EQ(WEXITSTATUS(status), kConfig);
}
#endif
