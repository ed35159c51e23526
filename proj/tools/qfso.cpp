// qfso command-line front end.
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "qfso/qfso.hpp"

namespace {

using namespace qfso;
namespace fs = std::filesystem;

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kRuntime = 2;

int classify(const std::exception &e) {
  std::cerr << "error: " << e.what() << '\n';
  if (dynamic_cast<const ConfigError *>(&e) || dynamic_cast<const InvalidInput *>(&e)) return kInvalid;
  return kRuntime;
}

struct SimulateArgs {
  std::string config;
  std::string output;
  std::optional<std::uint64_t> seed;
  std::optional<double> duration;
};

int cmd_simulate(const SimulateArgs &args) {
  harness::ScenarioConfig cfg;
  fs::path out;
  try {
    cfg = harness::load_config(args.config);
    if (args.seed) cfg.seed = *args.seed;
    if (args.duration) cfg.duration_s = *args.duration;
    cfg.validate();
    out = args.output.empty() ? harness::resolve_output_dir(cfg.output_dir) : fs::path(args.output);
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  }
  try {
    const auto r = harness::run_scenario(cfg, out);
    std::cout << r.report.dump(2) << '\n';
    std::cerr << "artifacts written to " << out.string() << '\n';
    return kOk;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
}

struct G2Args {
  std::string signal, idler, output;
  std::int64_t bin_ps = 162;
  std::int64_t range_ps = 62 * 162;
  std::optional<std::int64_t> floor_ps;
  std::optional<double> duration_s;
};

int cmd_g2(const G2Args &args) {
  try {
    auto s = load_stream(args.signal);
    auto i = load_stream(args.idler);
    double duration = 0;
    if (args.duration_s) {
      duration = *args.duration_s;
    } else {
      std::uint64_t last = 0;
      if (s.size()) last = std::max(last, s.timestamps_ps.back());
      if (i.size()) last = std::max(last, i.timestamps_ps.back());
      duration = static_cast<double>(last + 1) * 1e-12;
    }
    s.duration_s = i.duration_s = duration;
    auto h = correlation::coincidence_histogram(s, i, args.bin_ps, args.range_ps);
    h = correlation::g2_normalize(std::move(h));
    const std::int64_t floor = args.floor_ps ? *args.floor_ps : std::min<std::int64_t>(5000, args.range_ps / 2);
    if (correlation::far_region(h, h.g2, floor).bins >= 2) h = correlation::subtract_accidentals(std::move(h), floor);
    if (args.output.empty()) {
      correlation::write_histogram_csv(std::cout, h);
    } else {
      std::ofstream out(args.output);
      if (!out) throw Error("cli", "cannot write '" + args.output + "'");
      correlation::write_histogram_csv(out, h);
    }
    return kOk;
  } catch (const std::exception &e) {
    return classify(e);
  }
}

int cmd_fit(const std::string &path, const std::string &column) {
  try {
    std::ifstream in(path);
    if (!in) throw ConfigError("cli", "cannot open '" + path + "'");
    const auto t = correlation::read_histogram_csv(in);
    const std::vector<double> *y = nullptr;
    if (column == "g2_subtracted") y = &t.g2_subtracted;
    else if (column == "g2") y = &t.g2;
    else if (column == "counts") y = &t.counts;
    else throw InvalidInput("cli", "unknown column '" + column + "'");
    const auto f = correlation::fit_gaussian(t.tau_ps, *y);
    nlohmann::json j{{"column", column},        {"amplitude", f.amplitude}, {"center_ps", f.center},
                     {"sigma_ps", f.sigma},     {"offset", f.offset},       {"fwhm_ps", f.fwhm},
                     {"residual_norm", f.residual_norm}, {"evaluations", f.evaluations}};
    std::cout << j.dump(2) << '\n';
    return kOk;
  } catch (const std::exception &e) {
    return classify(e);
  }
}

int cmd_phasematch(double tmin, double tmax, double step, double degenerate_C) {
  try {
    require(step > 0 && tmax >= tmin, "cli", "need step > 0 and tmax >= tmin");
    photonics::PhaseMatchParams p;
    p.temp_offset_C = photonics::calibrate_temp_offset(p, degenerate_C);
    std::printf("temp_C,signal_nm,idler_nm\n");
    const auto n = static_cast<long>(std::floor((tmax - tmin) / step + 1e-9));
    for (long k = 0; k <= n; ++k) {
      const double T = tmin + static_cast<double>(k) * step;
      try {
        const auto w = photonics::phase_matched_wavelengths(T, p);
        std::printf("%.4f,%.6f,%.6f\n", T, w.signal_nm, w.idler_nm);
      } catch (const photonics::NoPhaseMatch &) {
        std::fprintf(stderr, "note: no phase matching at %.4f C\n", T);
      }
    }
    return kOk;
  } catch (const std::exception &e) {
    return classify(e);
  }
}

int cmd_report(const std::string &dir) {
  nlohmann::json regenerated;
  try {
    regenerated = harness::regenerate_report(dir);
  } catch (const std::exception &e) {
    return classify(e);
  }
  std::cout << regenerated.dump(2) << '\n';
  std::ifstream in(fs::path(dir) / "report.json");
  if (!in) return kOk;
  nlohmann::json stored;
  try {
    stored = nlohmann::json::parse(in);
  } catch (const std::exception &e) {
    std::cerr << "error: stored report.json is unreadable: " << e.what() << '\n';
    return kRuntime;
  }
  if (harness::deterministic_dump(stored) != harness::deterministic_dump(regenerated)) {
    std::cerr << "error: regenerated report differs from the stored report.json\n";
    return kRuntime;
  }
  std::cerr << "report matches the persisted artifacts\n";
  return kOk;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Free-space quantum link simulator"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto *simulate = app.add_subcommand("simulate", "Run a full scenario and write its artifacts");
  simulate->add_option("config", sim.config, "Scenario config (JSON)")->required();
  simulate->add_option("-o,--output", sim.output, "Output directory (overrides the config)");
  simulate->add_option("--seed", sim.seed, "Override the master seed");
  simulate->add_option("--duration", sim.duration, "Override the loop duration (s)");

  G2Args g2;
  auto *g2cmd = app.add_subcommand("g2", "Coincidence histogram and g2 of two timestamp files");
  g2cmd->add_option("signal", g2.signal, "Signal timestamps (.bin)")->required();
  g2cmd->add_option("idler", g2.idler, "Idler timestamps (.bin)")->required();
  g2cmd->add_option("--bin-ps", g2.bin_ps, "Bin width (ps)")->check(CLI::PositiveNumber);
  g2cmd->add_option("--range-ps", g2.range_ps, "Half range (ps), multiple of the bin width")->check(CLI::NonNegativeNumber);
  g2cmd->add_option("--floor-ps", g2.floor_ps, "Accidental floor uses |tau| above this (ps)");
  g2cmd->add_option("--duration-s", g2.duration_s, "Acquisition time (default: last timestamp)");
  g2cmd->add_option("-o,--output", g2.output, "Write the CSV here instead of stdout");

  std::string fit_path, fit_column = "g2_subtracted";
  auto *fit = app.add_subcommand("fit", "Gaussian fit of a histogram CSV");
  fit->add_option("histogram", fit_path, "Histogram CSV")->required();
  fit->add_option("--column", fit_column, "g2_subtracted, g2 or counts");

  double tmin = 25.0, tmax = 40.0, step = 0.5, degenerate = 25.3;
  auto *pm = app.add_subcommand("phasematch", "Phase-matched wavelengths versus crystal temperature");
  pm->add_option("--tmin", tmin, "First temperature (C)");
  pm->add_option("--tmax", tmax, "Last temperature (C)");
  pm->add_option("--step", step, "Temperature step (C)");
  pm->add_option("--degenerate", degenerate, "Calibrated degeneracy temperature (C)");

  std::string run_dir;
  auto *report = app.add_subcommand("report", "Recompute a run's report from its artifacts");
  report->add_option("run-dir", run_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kInvalid;
  }

  if (*simulate) return cmd_simulate(sim);
  if (*g2cmd) return cmd_g2(g2);
  if (*fit) return cmd_fit(fit_path, fit_column);
  if (*pm) return cmd_phasematch(tmin, tmax, step, degenerate);
  if (*report) return cmd_report(run_dir);
  return kInvalid;
}
