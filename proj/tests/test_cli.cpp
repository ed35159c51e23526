#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "qfso/correlation.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kSource(QFSO_SOURCE_DIR);

struct Result {
  int rc = -1;
  std::string out, err;
};

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch() {
  const auto *info = ::testing::UnitTest::GetInstance()->current_test_info();
  const auto p = fs::temp_directory_path() / (std::string("qfso-cli-") + info->name());
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Result run_cli(const std::string &args, const fs::path &dir) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string("'") + QFSO_CLI_PATH + "' " + args + " >'" + out.string() + "' 2>'" +
                          err.string() + "'";
  const int status = std::system(cmd.c_str());
  Result r;
  r.rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::vector<std::vector<std::string>> csv_rows(const std::string &text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST(Cli, PhasematchTable) {
  const auto dir = scratch();
  const auto r = run_cli("phasematch --tmin 24 --tmax 30 --step 0.5", dir);
  ASSERT_EQ(r.rc, 0) << r.err;
  const auto rows = csv_rows(r.out);
  ASSERT_GE(rows.size(), 2u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"temp_C", "signal_nm", "idler_nm"}));
  // 24.0 .. 25.0 lie below degeneracy and are skipped.
  EXPECT_EQ(rows.size(), 1u + 10u);
  EXPECT_EQ(rows[1][0], "25.5000");
  EXPECT_EQ(rows.back()[0], "30.0000");
  EXPECT_NEAR(std::stod(rows.back()[1]), 848.4287, 0.5);
  EXPECT_NEAR(std::stod(rows.back()[2]), 774.9016, 0.5);
  EXPECT_NE(r.err.find("no phase matching at 25.0000"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, G2MatchesBruteForceFixture) {
  const auto dir = scratch();
  const auto fx = kSource / "tests" / "fixtures" / "g2_tiny";
  const auto r = run_cli("g2 '" + (fx / "signal.bin").string() + "' '" + (fx / "idler.bin").string() +
                          "' --bin-ps 100 --range-ps 1000 --duration-s 1e-6",
                      dir);
  ASSERT_EQ(r.rc, 0) << r.err;
  std::istringstream got(r.out);
  std::ifstream want(fx / "expected.csv");
  const auto table = qfso::correlation::read_histogram_csv(got);
  const auto expected = csv_rows(slurp(fx / "expected.csv"));
  ASSERT_EQ(table.tau_ps.size() + 1, expected.size());
  for (std::size_t k = 0; k < table.tau_ps.size(); ++k) {
    EXPECT_EQ(table.tau_ps[k], std::stod(expected[k + 1][0]));
    EXPECT_EQ(table.counts[k], std::stod(expected[k + 1][1]));
    const double g = std::stod(expected[k + 1][2]);
    EXPECT_NEAR(table.g2[k], g, 1e-12 * g);
  }
  fs::remove_all(dir);
}

TEST(Cli, MissingConfigIsInvalidAndWritesNothing) {
  const auto dir = scratch();
  const auto out = dir / "run";
  const auto r = run_cli("simulate /nonexistent/config.json -o '" + out.string() + "'", dir);
  EXPECT_EQ(r.rc, 1);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
  EXPECT_FALSE(fs::exists(out));
  fs::remove_all(dir);
}

TEST(Cli, BadFlagsPrintUsage) {
  const auto dir = scratch();
  for (const char *args : {"--bogus", "g2", "phasematch --step notanumber", "frobnicate"}) {
    const auto r = run_cli(args, dir);
    EXPECT_EQ(r.rc, 1) << args;
    EXPECT_NE(r.err.find("Usage"), std::string::npos) << args << ": " << r.err;
  }
  fs::remove_all(dir);
}

TEST(Cli, FitGaussianHistogram) {
  const auto dir = scratch();
  {
    std::ofstream csv(dir / "h.csv");
    csv << "tau_ps,counts,g2,g2_subtracted\n";
    for (int k = -30; k <= 30; ++k) {
      const double tau = 50.0 * k;
      const double g = 40.0 * std::exp(-0.5 * std::pow((tau - 100) / 300, 2));
      csv << tau << ',' << 0 << ',' << g + 1 << ',' << g << '\n';
    }
  }
  const auto r = run_cli("fit '" + (dir / "h.csv").string() + "'", dir);
  ASSERT_EQ(r.rc, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_NEAR(j.at("sigma_ps").get<double>(), 300.0, 0.3);
  EXPECT_NEAR(j.at("center_ps").get<double>(), 100.0, 0.3);
  EXPECT_NEAR(j.at("fwhm_ps").get<double>(), 300.0 * 2.3548200450309493, 1.0);
  EXPECT_EQ(run_cli("fit '" + (dir / "h.csv").string() + "' --column nope", dir).rc, 1);
  EXPECT_EQ(run_cli("fit /nonexistent.csv", dir).rc, 1);
  fs::remove_all(dir);
}

TEST(Cli, SimulateThenReport) {
  const auto dir = scratch();
  const auto run = dir / "run";
  const auto cfg = kSource / "configs" / "fast-ci.json";
  const auto r = run_cli("simulate '" + cfg.string() + "' -o '" + run.string() + "'", dir);
  ASSERT_EQ(r.rc, 0) << r.err;
  const auto report = json::parse(r.out);
  EXPECT_TRUE(report.contains("g2"));
  EXPECT_TRUE(fs::exists(run / "manifest.json"));

  const auto ok = run_cli("report '" + run.string() + "'", dir);
  EXPECT_EQ(ok.rc, 0) << ok.err;
  EXPECT_NE(ok.err.find("matches"), std::string::npos);

  auto stored = json::parse(slurp(run / "report.json"));
  stored["g2"]["peak_subtracted"] = -1.0;
  std::ofstream(run / "report.json") << stored.dump(2);
  EXPECT_EQ(run_cli("report '" + run.string() + "'", dir).rc, 2);
  fs::remove_all(dir);
}
