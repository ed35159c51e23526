#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "qfso/harness.hpp"

using namespace qfso;
using namespace qfso::harness;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigs = fs::path(QFSO_SOURCE_DIR) / "configs";

fs::path temp_dir(const std::string &tag) {
  const auto p = fs::temp_directory_path() /
                 ("qfso-test-" + tag + "-" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "-" +
                  std::to_string(std::hash<std::string>{}(
                      ::testing::UnitTest::GetInstance()->current_test_info()->name())));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Config, BundledConfigsLoad) {
  for (const char *name : {"paper-default.json", "fast-ci.json"}) {
    const auto c = load_config((kConfigs / name).string());
    EXPECT_NO_THROW(c.validate()) << name;
    EXPECT_GE(c.disturbances.temperature.samples.size(), 2u);
  }
  const auto p = load_config((kConfigs / "paper-default.json").string());
  EXPECT_EQ(p.seed, 20240617u);
  EXPECT_EQ(p.duration_s, 60.0);
}

TEST(Config, RejectsUnknownKey) {
  EXPECT_THROW(parse_config(json::parse(R"({"seed": 1, "sede": 2})")), ConfigError);
  EXPECT_THROW(parse_config(json::parse(R"({"plant": {"fsm": {"resolution": 1}}})")), ConfigError);
}

TEST(Config, RejectsWrongType) {
  EXPECT_THROW(parse_config(json::parse(R"({"seed": "seven"})")), ConfigError);
  EXPECT_THROW(parse_config(json::parse(R"({"plant": []})")), ConfigError);
  EXPECT_THROW(parse_config(json::parse(R"({"plant": {"geometry": {"chromatic_offset_um": [1, 2, 3]}}})")),
               ConfigError);
}

TEST(Config, MissingFileAndBadJson) {
  EXPECT_THROW(load_config("/nonexistent/qfso.json"), ConfigError);
  const auto dir = temp_dir("badjson");
  std::ofstream(dir / "bad.json") << "{ \"seed\": ";
  EXPECT_THROW(load_config((dir / "bad.json").string()), ConfigError);
  fs::remove_all(dir);
}

TEST(Config, CanonicalRoundTripPreservesHash) {
  const auto c = load_config((kConfigs / "paper-default.json").string());
  const auto back = parse_canonical_config(to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  auto moved = c;
  moved.output_dir = "elsewhere";
  EXPECT_EQ(config_hash(moved), config_hash(c));
  auto changed = c;
  changed.seed += 1;
  EXPECT_NE(config_hash(changed), config_hash(c));
}

TEST(Run, FastCiIsDeterministicAndRegenerates) {
  const auto cfg = load_config((kConfigs / "fast-ci.json").string());
  const auto a = temp_dir("det-a"), b = temp_dir("det-b"), c = temp_dir("det-c");
  const auto ra = run_scenario(cfg, a);
  const auto rb = run_scenario(cfg, b);
  EXPECT_EQ(deterministic_dump(ra.report), deterministic_dump(rb.report));
  for (const char *name : {"trace.csv", "trace_uncorrected.csv", "coarse_events.csv", "signal.bin", "idler.bin",
                           "histogram.csv", "config.json", "manifest.json"})
    EXPECT_EQ(slurp(a / name), slurp(b / name)) << name;
  EXPECT_FALSE(fs::exists(a / "FAILED"));

  EXPECT_EQ(deterministic_dump(regenerate_report(a)), deterministic_dump(ra.report));

  auto other = cfg;
  other.seed += 1;
  const auto rc = run_scenario(other, c);
  EXPECT_NE(slurp(a / "trace.csv"), slurp(c / "trace.csv"));
  EXPECT_NE(slurp(a / "signal.bin"), slurp(c / "signal.bin"));
  EXPECT_NE(ra.report["config_hash"], rc.report["config_hash"]);
  for (const auto &d : {a, b, c}) fs::remove_all(d);
}

TEST(Run, FailureLeavesMarker) {
  auto cfg = load_config((kConfigs / "fast-ci.json").string());
  cfg.photonics.source.pair_rate_per_mw = 0;
  cfg.photonics.source.source_signal_rate = 0;
  cfg.photonics.signal_detector.background_rate = 0;
  const auto dir = temp_dir("failed");
  EXPECT_THROW(run_scenario(cfg, dir), correlation::NormalizationError);
  EXPECT_TRUE(fs::exists(dir / "FAILED"));
  EXPECT_FALSE(fs::exists(dir / "report.json"));
  EXPECT_THROW(regenerate_report(dir), Error);
  fs::remove_all(dir);
}

TEST(Run, OutputRootEnvironment) {
  EXPECT_EQ(resolve_output_dir("/abs/run"), fs::path("/abs/run"));
  ::setenv("QFSO_OUTPUT_ROOT", "/tmp/qfso-root", 1);
  EXPECT_EQ(resolve_output_dir("runs/x"), fs::path("/tmp/qfso-root/runs/x"));
  ::unsetenv("QFSO_OUTPUT_ROOT");
  EXPECT_EQ(resolve_output_dir("runs/x"), fs::path("runs/x"));
}

// Sweeps the coupling prefactor and checks that the default reproduces a
// mean corrected coupling of 0.19 to within one grid step.
TEST(Calibration, CouplingPrefactorGrid) {
  const auto cfg = load_config((kConfigs / "paper-default.json").string());
  const double target = 0.19;
  double best = 0, best_err = 1e9;
  for (double eta0 = 0.22; eta0 <= 0.32 + 1e-9; eta0 += 0.01) {
    double sum = 0;
    std::size_t n = 0;
    for (std::uint64_t seed : {1u, 2u}) {
      auto plant = cfg.plant;
      plant.coupling.eta0 = eta0;
      const auto log =
          control::run_closed_loop(plant, cfg.disturbances, cfg.loop_config(true, true), control::LoopStreams::from_seed(seed));
      for (const auto &r : log.rows) sum += r.eta;
      n += log.rows.size();
    }
    const double err = std::abs(sum / static_cast<double>(n) - target);
    if (err < best_err) {
      best_err = err;
      best = eta0;
    }
  }
  EXPECT_NEAR(best, cfg.plant.coupling.eta0, 0.01 + 1e-9);
}
