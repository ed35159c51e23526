#pragma once

// Scenario configuration, the end-to-end runner and the run report.
//
// A run directory holds:
//   config.json             canonical config (defaults filled in)
//   trace.csv               corrected loop, every plant step
//   trace_uncorrected.csv   same seed with both feedback tiers off
//   monitor.csv             corrected trace decimated to the monitor rate
//   coarse_events.csv       hexapod move requests
//   run_stats.json          counters that are not visible in the traces
//   signal.bin idler.bin signal_only.bin   detected timestamp streams
//   histogram.csv           g2 histogram
//   report.json             summary, regenerable from the files above
//   manifest.json           artifact list tagged with the config hash
//   FAILED                  present only if the run aborted

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qfso/control.hpp"
#include "qfso/correlation.hpp"
#include "qfso/photonics.hpp"
#include "qfso/stream.hpp"

namespace qfso::harness {

using nlohmann::json;
namespace fs = std::filesystem;

struct PhotonicsConfig {
  double duration_s = 10.0;
  double crystal_temp_C = 25.3;
  /// Set point at which the pair is degenerate; the dispersion offset is
  /// calibrated to it when calibrate_temp_offset is true.
  double degenerate_temp_C = 25.3;
  bool calibrate_temp_offset = true;
  photonics::PhaseMatchParams phase_match;
  photonics::SpdcSourceParams source;
  photonics::LossBudget losses{0.16, 0.45, 0.3734};
  photonics::DetectorParams signal_detector{350.0, 22.0, 1.0, 5.5e5};
  photonics::DetectorParams idler_detector{350.0, 22.0, 1.0, 0.0};
};

struct CorrelationConfig {
  std::int64_t bin_width_ps = 162;
  std::int64_t tau_range_ps = 62 * 162;
  std::int64_t floor_min_tau_ps = 5000;
};

struct ScenarioConfig {
  std::uint64_t seed = 1;
  double duration_s = 60.0;
  double sim_rate_hz = 1000.0;
  bool fine_enabled = true;
  bool coarse_enabled = true;
  std::string output_dir = "runs/default";

  control::Disturbances disturbances;
  /// Path as written in the config; empty means the built-in daytime ramp.
  std::string temperature_profile;
  control::PlantConfig plant;
  control::LoopConfig loop;  // duration/rates/flags are filled from above
  PhotonicsConfig photonics;
  CorrelationConfig correlation;

  ScenarioConfig() {
    disturbances.wander = turbulence::WanderModel::calibrated_default();
    disturbances.temperature = default_temperature_profile();
  }

  /// 12 -> 20 C over 400 min.
  static turbulence::TempProfile default_temperature_profile() { return {{{0.0, 12.0}, {24000.0, 20.0}}}; }

  control::LoopConfig loop_config(bool fine, bool coarse) const {
    control::LoopConfig c = loop;
    c.duration_s = duration_s;
    c.sim_rate_hz = sim_rate_hz;
    c.fine_enabled = fine;
    c.coarse_enabled = coarse;
    return c;
  }

  void validate() const {
    require(std::isfinite(duration_s) && duration_s > 0, "harness", "duration_s must be > 0");
    require(std::isfinite(sim_rate_hz) && sim_rate_hz > 0, "harness", "sim_rate_hz must be > 0");
    for (const auto &c : disturbances.wander.components) c.validate();
    disturbances.temperature.validate();
    disturbances.scintillation.validate();
    plant.geometry.validate();
    plant.psd.validate();
    plant.fsm.validate();
    plant.hexapod.validate();
    plant.coupling.validate();
    require(plant.tracking_power_mW > 0, "harness", "tracking power must be > 0");
    loop.pid.validate();
    loop.coarse.validate();
    loop.channel.validate();
    require(photonics.duration_s > 0 && photonics.duration_s <= duration_s, "harness",
            "photonics.duration_s must lie in (0, duration_s]");
    photonics.phase_match.validate();
    photonics.source.validate();
    photonics.losses.validate();
    photonics.signal_detector.validate();
    photonics.idler_detector.validate();
    require(correlation.bin_width_ps > 0 && correlation.tau_range_ps % correlation.bin_width_ps == 0, "harness",
            "correlation.tau_range_ps must be a multiple of bin_width_ps");
    require(correlation.floor_min_tau_ps >= 0 && correlation.floor_min_tau_ps < correlation.tau_range_ps, "harness",
            "correlation.floor_min_tau_ps must lie inside the tau range");
  }
};

// ---------------------------------------------------------------------------
// JSON mapping
// ---------------------------------------------------------------------------

namespace detail {

/// Strict reader over one JSON object: every key must be consumed.
class Section {
 public:
  Section(const json &j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("harness", where() + " must be an object");
  }

  template <typename T>
  void get(const char *key, T &out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception &) {
      throw ConfigError("harness", where(key) + " has the wrong type");
    }
  }

  void vec2(const char *key, Vec2 &out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const auto &v = j_.at(key);
    if (v.is_number()) {
      out = {v.get<double>(), v.get<double>()};
      return;
    }
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
      throw ConfigError("harness", where(key) + " must be a number or a [x, y] pair");
    out = {v[0].get<double>(), v[1].get<double>()};
  }

  bool has(const char *key) const { return j_.contains(key); }

  Section sub(const char *key) {
    static const json empty = json::object();
    if (!j_.contains(key)) return Section(empty, where(key));
    seen_.insert(key);
    return Section(j_.at(key), where(key));
  }

  const json &raw(const char *key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto &item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError("harness", "unknown config key '" + where(item.key()) + "'");
  }

 private:
  std::string where(const std::string &key = "") const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  const json &j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline json pair(const Vec2 &v) { return json::array({v.x, v.y}); }

inline void read_detector(Section s, photonics::DetectorParams &d) {
  s.get("jitter_ps", d.jitter_ps);
  s.get("dead_time_ns", d.dead_time_ns);
  s.get("efficiency", d.efficiency);
  s.get("background_rate", d.background_rate);
  s.finish();
}

inline json write_detector(const photonics::DetectorParams &d) {
  return {{"jitter_ps", d.jitter_ps},
          {"dead_time_ns", d.dead_time_ns},
          {"efficiency", d.efficiency},
          {"background_rate", d.background_rate}};
}

}  // namespace detail

/// Parses a scenario. Relative profile paths resolve against `base_dir`.
inline ScenarioConfig parse_config(const json &root, const fs::path &base_dir = {}) {
  using detail::Section;
  ScenarioConfig c;
  Section top(root, "");
  top.get("seed", c.seed);
  top.get("duration_s", c.duration_s);
  top.get("sim_rate_hz", c.sim_rate_hz);
  top.get("output_dir", c.output_dir);
  {
    auto s = top.sub("feedback");
    s.get("fine", c.fine_enabled);
    s.get("coarse", c.coarse_enabled);
    s.finish();
  }
  {
    auto t = top.sub("turbulence");
    if (t.has("wander")) {
      const auto &arr = t.raw("wander");
      if (!arr.is_array()) throw ConfigError("harness", "turbulence.wander must be a list of components");
      c.disturbances.wander.components.clear();
      for (std::size_t i = 0; i < arr.size(); ++i) {
        Section w(arr[i], "turbulence.wander[" + std::to_string(i) + "]");
        turbulence::WanderParams p;
        w.get("sigma_x", p.sigma_x);
        w.get("sigma_y", p.sigma_y);
        w.get("bandwidth_hz", p.bandwidth_hz);
        w.get("order", p.order);
        w.finish();
        c.disturbances.wander.components.push_back(p);
      }
    }
    t.get("temperature_profile", c.temperature_profile);
    t.get("start_time_s", c.loop.start_time_s);
    auto d = t.sub("drift");
    d.get("enabled", c.disturbances.drift_enabled);
    d.vec2("gain_um_per_C", c.disturbances.drift.gain_um_per_C);
    d.get("reference_temp_C", c.disturbances.drift.reference_temp_C);
    d.finish();
    auto s = t.sub("scintillation");
    s.get("enabled", c.disturbances.scintillation_enabled);
    s.get("log_sigma", c.disturbances.scintillation.log_sigma);
    s.get("bandwidth_hz", c.disturbances.scintillation.bandwidth_hz);
    s.finish();
    t.vec2("static_offset_um", c.disturbances.static_offset_um);
    t.finish();
  }
  {
    auto p = top.sub("plant");
    auto g = p.sub("geometry");
    g.get("receiver_focal_mm", c.plant.geometry.receiver_focal_mm);
    g.get("path_to_reflector_m", c.plant.geometry.path_to_reflector_m);
    g.vec2("chromatic_offset_um", c.plant.geometry.chromatic_offset_um);
    g.get("chromatic_jitter_um", c.plant.geometry.chromatic_jitter_um);
    g.get("chromatic_bandwidth_hz", c.plant.geometry.chromatic_bandwidth_hz);
    g.get("chromatic_jitter_enabled", c.disturbances.chromatic_jitter_enabled);
    g.get("fsm_magnification", c.plant.geometry.fsm_magnification);
    g.finish();
    auto s = p.sub("psd");
    s.get("L_x_mm", c.plant.psd.L_x_mm);
    s.get("L_y_mm", c.plant.psd.L_y_mm);
    s.get("noise_sigma_V", c.plant.psd.noise_sigma_V);
    s.get("responsivity_V_per_mW", c.plant.psd.responsivity_V_per_mW);
    s.get("min_signal_V", c.plant.psd.min_signal_V);
    s.finish();
    auto f = p.sub("fsm");
    f.get("resolution_urad", c.plant.fsm.resolution_urad);
    f.get("range_urad", c.plant.fsm.range_urad);
    f.get("resonance_hz", c.plant.fsm.resonance_hz);
    f.get("damping_ratio", c.plant.fsm.damping_ratio);
    f.finish();
    auto h = p.sub("hexapod");
    h.get("settle_time_s", c.plant.hexapod.settle_time_s);
    h.get("min_step_urad", c.plant.hexapod.min_step_urad);
    h.get("range_urad", c.plant.hexapod.range_urad);
    h.finish();
    auto k = p.sub("coupling");
    k.get("eta0", c.plant.coupling.eta0);
    k.get("mode_radius_um", c.plant.coupling.mode_radius_um);
    k.finish();
    p.get("tracking_power_mW", c.plant.tracking_power_mW);
    p.finish();
  }
  {
    auto ctl = top.sub("control");
    auto pid = ctl.sub("pid");
    pid.vec2("kp", c.loop.pid.kp);
    pid.vec2("ki", c.loop.pid.ki);
    pid.vec2("kd", c.loop.pid.kd);
    pid.get("rate_hz", c.loop.pid.rate_hz);
    pid.get("output_limit_urad", c.loop.pid.output_limit_urad);
    pid.get("integrator_limit", c.loop.pid.integrator_limit);
    pid.get("monitor_rate_hz", c.loop.pid.monitor_rate_hz);
    pid.get("derivative_cutoff_hz", c.loop.pid.derivative_cutoff_hz);
    pid.finish();
    auto co = ctl.sub("coarse");
    co.get("window_s", c.loop.coarse.window_s);
    co.get("cadence_s", c.loop.coarse.cadence_s);
    co.get("deadband_um", c.loop.coarse.deadband_um);
    co.get("hexapod_gain_um_per_urad", c.loop.coarse.hexapod_gain_um_per_urad);
    co.finish();
    ctl.get("prealigned", c.loop.prealigned);
    ctl.finish();
  }
  {
    auto n = top.sub("netlink");
    n.get("enabled", c.loop.use_netlink);
    n.get("latency_min_s", c.loop.channel.latency_min_s);
    n.get("latency_max_s", c.loop.channel.latency_max_s);
    n.get("drop_prob", c.loop.channel.drop_prob);
    n.get("ack_timeout_s", c.loop.channel.ack_timeout_s);
    n.get("max_retries", c.loop.channel.max_retries);
    n.finish();
  }
  {
    auto ph = top.sub("photonics");
    auto &P = c.photonics;
    ph.get("duration_s", P.duration_s);
    ph.get("crystal_temp_C", P.crystal_temp_C);
    ph.get("degenerate_temp_C", P.degenerate_temp_C);
    ph.get("calibrate_temp_offset", P.calibrate_temp_offset);
    auto pm = ph.sub("phase_match");
    pm.get("lambda_p_nm", P.phase_match.lambda_p_nm);
    pm.get("poling_period_um", P.phase_match.poling_period_um);
    pm.get("crystal_length_mm", P.phase_match.crystal_length_mm);
    pm.get("temp_offset_C", P.phase_match.temp_offset_C);
    pm.get("dispersion_model", P.phase_match.dispersion_model);
    pm.get("degenerate_tolerance_rad", P.phase_match.degenerate_tolerance_rad);
    pm.finish();
    auto src = ph.sub("source");
    src.get("pair_rate_per_mw", P.source.pair_rate_per_mw);
    src.get("pump_mw", P.source.pump_mw);
    src.get("source_signal_rate", P.source.source_signal_rate);
    src.get("heralding_efficiency", P.source.heralding_efficiency);
    src.get("pair_time_jitter_ps", P.source.pair_time_jitter_ps);
    src.get("pump_waist_um", P.source.pump_waist_um);
    src.get("collection_waist_um", P.source.collection_waist_um);
    src.finish();
    auto l = ph.sub("losses");
    l.get("free_space_loss", P.losses.free_space_loss);
    l.get("transceiver_loss", P.losses.transceiver_loss);
    l.get("extra_loss", P.losses.extra_loss);
    l.finish();
    detail::read_detector(ph.sub("signal_detector"), P.signal_detector);
    detail::read_detector(ph.sub("idler_detector"), P.idler_detector);
    ph.finish();
  }
  {
    auto co = top.sub("correlation");
    co.get("bin_width_ps", c.correlation.bin_width_ps);
    co.get("tau_range_ps", c.correlation.tau_range_ps);
    co.get("floor_min_tau_ps", c.correlation.floor_min_tau_ps);
    co.finish();
  }
  top.finish();

  if (!c.temperature_profile.empty()) {
    fs::path p(c.temperature_profile);
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    c.disturbances.temperature = turbulence::load_temperature_profile(p.string());
  }
  c.validate();
  return c;
}

inline ScenarioConfig load_config(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("harness", "cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::exception &e) {
    throw ConfigError("harness", "config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(j, fs::path(path).parent_path());
}

/// Canonical form with every default made explicit. The temperature profile
/// is embedded as samples so the canonical config is self-contained.
inline json to_json(const ScenarioConfig &c) {
  using detail::pair;
  json wander = json::array();
  for (const auto &w : c.disturbances.wander.components)
    wander.push_back({{"sigma_x", w.sigma_x}, {"sigma_y", w.sigma_y}, {"bandwidth_hz", w.bandwidth_hz}, {"order", w.order}});
  json profile = json::array();
  for (const auto &[t, T] : c.disturbances.temperature.samples) profile.push_back(json::array({t, T}));
  const auto &P = c.photonics;
  return {
      {"seed", c.seed},
      {"duration_s", c.duration_s},
      {"sim_rate_hz", c.sim_rate_hz},
      {"output_dir", c.output_dir},
      {"feedback", {{"fine", c.fine_enabled}, {"coarse", c.coarse_enabled}}},
      {"turbulence",
       {{"wander", wander},
        {"temperature_profile", c.temperature_profile},
        {"temperature_samples", profile},
        {"start_time_s", c.loop.start_time_s},
        {"static_offset_um", pair(c.disturbances.static_offset_um)},
        {"drift",
         {{"enabled", c.disturbances.drift_enabled},
          {"gain_um_per_C", pair(c.disturbances.drift.gain_um_per_C)},
          {"reference_temp_C", c.disturbances.drift.reference_temp_C}}},
        {"scintillation",
         {{"enabled", c.disturbances.scintillation_enabled},
          {"log_sigma", c.disturbances.scintillation.log_sigma},
          {"bandwidth_hz", c.disturbances.scintillation.bandwidth_hz}}}}},
      {"plant",
       {{"geometry",
         {{"receiver_focal_mm", c.plant.geometry.receiver_focal_mm},
          {"path_to_reflector_m", c.plant.geometry.path_to_reflector_m},
          {"chromatic_offset_um", pair(c.plant.geometry.chromatic_offset_um)},
          {"chromatic_jitter_um", c.plant.geometry.chromatic_jitter_um},
          {"chromatic_bandwidth_hz", c.plant.geometry.chromatic_bandwidth_hz},
          {"chromatic_jitter_enabled", c.disturbances.chromatic_jitter_enabled},
          {"fsm_magnification", c.plant.geometry.fsm_magnification}}},
        {"psd",
         {{"L_x_mm", c.plant.psd.L_x_mm},
          {"L_y_mm", c.plant.psd.L_y_mm},
          {"noise_sigma_V", c.plant.psd.noise_sigma_V},
          {"responsivity_V_per_mW", c.plant.psd.responsivity_V_per_mW},
          {"min_signal_V", c.plant.psd.min_signal_V}}},
        {"fsm",
         {{"resolution_urad", c.plant.fsm.resolution_urad},
          {"range_urad", c.plant.fsm.range_urad},
          {"resonance_hz", c.plant.fsm.resonance_hz},
          {"damping_ratio", c.plant.fsm.damping_ratio}}},
        {"hexapod",
         {{"settle_time_s", c.plant.hexapod.settle_time_s},
          {"min_step_urad", c.plant.hexapod.min_step_urad},
          {"range_urad", c.plant.hexapod.range_urad}}},
        {"coupling", {{"eta0", c.plant.coupling.eta0}, {"mode_radius_um", c.plant.coupling.mode_radius_um}}},
        {"tracking_power_mW", c.plant.tracking_power_mW}}},
      {"control",
       {{"pid",
         {{"kp", pair(c.loop.pid.kp)},
          {"ki", pair(c.loop.pid.ki)},
          {"kd", pair(c.loop.pid.kd)},
          {"rate_hz", c.loop.pid.rate_hz},
          {"output_limit_urad", c.loop.pid.output_limit_urad},
          {"integrator_limit", c.loop.pid.integrator_limit},
          {"monitor_rate_hz", c.loop.pid.monitor_rate_hz},
          {"derivative_cutoff_hz", c.loop.pid.derivative_cutoff_hz}}},
        {"coarse",
         {{"window_s", c.loop.coarse.window_s},
          {"cadence_s", c.loop.coarse.cadence_s},
          {"deadband_um", c.loop.coarse.deadband_um},
          {"hexapod_gain_um_per_urad", c.loop.coarse.hexapod_gain_um_per_urad}}},
        {"prealigned", c.loop.prealigned}}},
      {"netlink",
       {{"enabled", c.loop.use_netlink},
        {"latency_min_s", c.loop.channel.latency_min_s},
        {"latency_max_s", c.loop.channel.latency_max_s},
        {"drop_prob", c.loop.channel.drop_prob},
        {"ack_timeout_s", c.loop.channel.ack_timeout_s},
        {"max_retries", c.loop.channel.max_retries}}},
      {"photonics",
       {{"duration_s", P.duration_s},
        {"crystal_temp_C", P.crystal_temp_C},
        {"degenerate_temp_C", P.degenerate_temp_C},
        {"calibrate_temp_offset", P.calibrate_temp_offset},
        {"phase_match",
         {{"lambda_p_nm", P.phase_match.lambda_p_nm},
          {"poling_period_um", P.phase_match.poling_period_um},
          {"crystal_length_mm", P.phase_match.crystal_length_mm},
          {"temp_offset_C", P.phase_match.temp_offset_C},
          {"dispersion_model", P.phase_match.dispersion_model},
          {"degenerate_tolerance_rad", P.phase_match.degenerate_tolerance_rad}}},
        {"source",
         {{"pair_rate_per_mw", P.source.pair_rate_per_mw},
          {"pump_mw", P.source.pump_mw},
          {"source_signal_rate", P.source.source_signal_rate},
          {"heralding_efficiency", P.source.heralding_efficiency},
          {"pair_time_jitter_ps", P.source.pair_time_jitter_ps},
          {"pump_waist_um", P.source.pump_waist_um},
          {"collection_waist_um", P.source.collection_waist_um}}},
        {"losses",
         {{"free_space_loss", P.losses.free_space_loss},
          {"transceiver_loss", P.losses.transceiver_loss},
          {"extra_loss", P.losses.extra_loss}}},
        {"signal_detector", detail::write_detector(P.signal_detector)},
        {"idler_detector", detail::write_detector(P.idler_detector)}}},
      {"correlation",
       {{"bin_width_ps", c.correlation.bin_width_ps},
        {"tau_range_ps", c.correlation.tau_range_ps},
        {"floor_min_tau_ps", c.correlation.floor_min_tau_ps}}},
  };
}

/// Parses a canonical config written by to_json (samples embedded).
inline ScenarioConfig parse_canonical_config(json j) {
  auto &t = j["turbulence"];
  turbulence::TempProfile profile;
  for (const auto &s : t.at("temperature_samples")) profile.samples.emplace_back(s.at(0).get<double>(), s.at(1).get<double>());
  const std::string path = t.value("temperature_profile", "");
  t.erase("temperature_samples");
  t.erase("temperature_profile");
  auto c = parse_config(j);
  c.temperature_profile = path;
  c.disturbances.temperature = profile;
  c.validate();
  return c;
}

/// FNV-1a over the canonical dump, excluding the output directory so moving a
/// run does not change its identity.
inline std::string config_hash(const ScenarioConfig &c) {
  auto j = to_json(c);
  j.erase("output_dir");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

/// Counters produced by the run that the persisted traces do not carry.
struct RunStats {
  std::uint64_t beam_lost_steps = 0;
  std::uint64_t pid_faults = 0;
  std::uint64_t coarse_insufficient_history = 0;
  netlink::BridgeStats bridge;
  std::uint64_t pairs_generated = 0;
  std::uint64_t signal_dead_time_losses = 0;
  std::uint64_t idler_dead_time_losses = 0;
  double photon_window_start_s = 0;
};

inline json to_json(const RunStats &s) {
  return {{"beam_lost_steps", s.beam_lost_steps},
          {"pid_faults", s.pid_faults},
          {"coarse_insufficient_history", s.coarse_insufficient_history},
          {"netlink",
           {{"transmissions", s.bridge.transmissions},
            {"retransmissions", s.bridge.retransmissions},
            {"dropped", s.bridge.dropped},
            {"duplicates_suppressed", s.bridge.duplicates_suppressed},
            {"applied", s.bridge.applied},
            {"failed", s.bridge.failed},
            {"rejected_busy", s.bridge.rejected_busy}}},
          {"pairs_generated", s.pairs_generated},
          {"signal_dead_time_losses", s.signal_dead_time_losses},
          {"idler_dead_time_losses", s.idler_dead_time_losses},
          {"photon_window_start_s", s.photon_window_start_s}};
}

inline RunStats run_stats_from_json(const json &j) {
  RunStats s;
  try {
    s.beam_lost_steps = j.at("beam_lost_steps");
    s.pid_faults = j.at("pid_faults");
    s.coarse_insufficient_history = j.at("coarse_insufficient_history");
    const auto &n = j.at("netlink");
    s.bridge = {n.at("transmissions"), n.at("retransmissions"), n.at("dropped"), n.at("duplicates_suppressed"),
                n.at("applied"),       n.at("failed"),          n.at("rejected_busy")};
    s.pairs_generated = j.at("pairs_generated");
    s.signal_dead_time_losses = j.at("signal_dead_time_losses");
    s.idler_dead_time_losses = j.at("idler_dead_time_losses");
    s.photon_window_start_s = j.at("photon_window_start_s");
  } catch (const json::exception &e) {
    throw ConfigError("harness", std::string("malformed run_stats.json: ") + e.what());
  }
  return s;
}

/// Everything the summary is computed from; exactly what a run persists.
struct RunArtifacts {
  ScenarioConfig config;
  std::vector<control::TraceRow> uncorrected;
  std::vector<control::TraceRow> corrected;
  std::vector<control::CoarseEvent> coarse_events;
  RunStats stats;
  PhotonEventStream signal, idler, signal_only;
};

namespace detail {

inline json fit_json(const correlation::GaussianFit &f) {
  return {{"amplitude", f.amplitude}, {"center", f.center},           {"sigma", f.sigma},
          {"offset", f.offset},       {"fwhm", f.fwhm},               {"residual_norm", f.residual_norm},
          {"evaluations", f.evaluations}};
}

inline std::pair<double, double> mean_std(const std::vector<double> &v) {
  if (v.empty()) return {0.0, 0.0};
  double s = 0, s2 = 0;
  for (double x : v) s += x;
  const double m = s / static_cast<double>(v.size());
  for (double x : v) s2 += (x - m) * (x - m);
  return {m, std::sqrt(s2 / static_cast<double>(v.size()))};
}

}  // namespace detail

/// Histogram pipeline shared by the runner and the `g2` command.
inline correlation::G2Histogram analyze_g2(const PhotonEventStream &signal, const PhotonEventStream &idler,
                                           const CorrelationConfig &cc) {
  auto h = correlation::coincidence_histogram(signal, idler, cc.bin_width_ps, cc.tau_range_ps);
  h = correlation::g2_normalize(std::move(h));
  return correlation::subtract_accidentals(std::move(h), cc.floor_min_tau_ps);
}

/// The run summary; a pure function of the persisted artifacts.
inline json summarize(const RunArtifacts &a, const correlation::G2Histogram &h) {
  const auto &c = a.config;
  json r;
  r["seed"] = c.seed;
  r["config_hash"] = config_hash(c);

  const auto unc = correlation::fit_gaussian_samples(control::radial_positions(a.uncorrected));
  const auto cor = correlation::fit_gaussian_samples(control::radial_positions(a.corrected));
  r["beam"] = {{"uncorrected_fwhm_um", unc.fwhm},
               {"corrected_fwhm_um", cor.fwhm},
               {"fwhm_ratio", unc.fwhm / cor.fwhm},
               {"uncorrected_fit", detail::fit_json(unc)},
               {"corrected_fit", detail::fit_json(cor)},
               {"beam_lost_steps", a.stats.beam_lost_steps},
               {"pid_faults", a.stats.pid_faults}};

  std::vector<double> eta, eta_window;
  for (const auto &row : a.corrected) {
    eta.push_back(row.eta);
    if (row.time_s >= a.stats.photon_window_start_s - 1e-9) eta_window.push_back(row.eta);
  }
  const auto [eta_mean, eta_std] = detail::mean_std(eta);
  r["coupling"] = {{"eta_mean", eta_mean},
                   {"eta_std", eta_std},
                   {"eta_relative_std", eta_mean > 0 ? eta_std / eta_mean : 0.0}};

  const auto &P = c.photonics;
  const double T = P.duration_s;
  const double receiver_rate = static_cast<double>(a.signal_only.size()) / T;
  const double window_eta = detail::mean_std(eta_window).first;
  const double predicted =
      P.source.source_signal_rate * P.losses.static_transmission() * P.signal_detector.efficiency * window_eta;
  r["rates"] = {{"receiver_signal_rate", receiver_rate},
                {"receiver_total_rate", static_cast<double>(a.signal.size()) / T},
                {"idler_rate", static_cast<double>(a.idler.size()) / T},
                {"background_rate", P.signal_detector.background_rate},
                {"pairs_generated", a.stats.pairs_generated},
                {"signal_dead_time_losses", a.stats.signal_dead_time_losses},
                {"idler_dead_time_losses", a.stats.idler_dead_time_losses}};
  r["loss_budget"] = {{"free_space_loss", P.losses.free_space_loss},
                      {"transceiver_loss", P.losses.transceiver_loss},
                      {"extra_loss", P.losses.extra_loss},
                      {"detector_efficiency", P.signal_detector.efficiency},
                      {"mean_eta_photon_window", window_eta},
                      {"total_transmission", P.losses.static_transmission() * P.signal_detector.efficiency * window_eta},
                      {"predicted_receiver_rate", predicted},
                      {"measured_receiver_rate", receiver_rate},
                      {"measured_over_predicted", predicted > 0 ? receiver_rate / predicted : 0.0}};

  const auto floor = correlation::far_region(h, h.g2, c.correlation.floor_min_tau_ps);
  json g2{{"peak_raw", correlation::peak_value(h.g2)},
          {"peak_subtracted", correlation::peak_value(h.g2_subtracted)},
          {"floor", floor.mean},
          {"floor_standard_error", floor.standard_error},
          {"bin_width_ps", c.correlation.bin_width_ps},
          {"tau_range_ps", c.correlation.tau_range_ps}};
  const auto peak = std::max_element(h.g2_subtracted.begin(), h.g2_subtracted.end());
  g2["peak_tau_ps"] = h.tau_of_bin(static_cast<std::size_t>(peak - h.g2_subtracted.begin()));
  try {
    std::vector<double> tau;
    for (std::size_t i = 0; i < h.size(); ++i) tau.push_back(static_cast<double>(h.tau_of_bin(i)));
    g2["peak_fit"] = detail::fit_json(correlation::fit_gaussian(tau, h.g2_subtracted));
  } catch (const correlation::FitFailed &e) {
    g2["peak_fit"] = {{"error", e.what()}};
  }
  r["g2"] = g2;

  std::uint64_t applied = 0, failed = 0, tx = 0;
  for (const auto &e : a.coarse_events) {
    (e.applied ? applied : failed) += 1;
    tx += static_cast<std::uint64_t>(e.transmissions);
  }
  r["coarse"] = {{"commands", a.coarse_events.size()},
                 {"applied", applied},
                 {"not_applied", failed},
                 {"transmissions", tx},
                 {"insufficient_history", a.stats.coarse_insufficient_history}};
  r["netlink"] = to_json(a.stats)["netlink"];

  auto pm = P.phase_match;
  if (P.calibrate_temp_offset) pm.temp_offset_C = photonics::calibrate_temp_offset(pm, P.degenerate_temp_C);
  json pmj{{"temp_offset_C", pm.temp_offset_C}, {"crystal_temp_C", P.crystal_temp_C}};
  try {
    const auto w = photonics::phase_matched_wavelengths(P.crystal_temp_C, pm);
    pmj["signal_nm"] = w.signal_nm;
    pmj["idler_nm"] = w.idler_nm;
  } catch (const photonics::NoPhaseMatch &e) {
    pmj["error"] = e.what();
  }
  r["phase_match"] = pmj;
  return r;
}

struct RunResult {
  json report;  // includes wall_clock_s
  fs::path directory;
};

namespace detail {

inline void write_text(const fs::path &p, const std::string &s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("harness", "cannot write '" + p.string() + "'");
  out << s;
}

template <typename F>
void write_with(const fs::path &p, F &&f) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("harness", "cannot write '" + p.string() + "'");
  f(out);
}

}  // namespace detail

/// Report JSON without the wall-clock field, as compared for determinism.
inline std::string deterministic_dump(json report) {
  report.erase("wall_clock_s");
  return report.dump(2);
}

/// Resolves a configured output directory: relative paths go under
/// $QFSO_OUTPUT_ROOT when set, else the working directory.
inline fs::path resolve_output_dir(const std::string &configured) {
  fs::path p(configured);
  if (p.is_absolute()) return p;
  if (const char *root = std::getenv("QFSO_OUTPUT_ROOT"); root && *root) return fs::path(root) / p;
  return p;
}

/// Loop -> photons -> correlation, all persisted under `out_dir`.
inline RunResult run_scenario(const ScenarioConfig &cfg, const fs::path &out_dir) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(out_dir);
  fs::remove(out_dir / "FAILED");
  const std::string hash = config_hash(cfg);
  try {
    detail::write_text(out_dir / "config.json", to_json(cfg).dump(2) + "\n");

    RunArtifacts a;
    a.config = cfg;
    const auto unc = control::run_closed_loop(cfg.plant, cfg.disturbances, cfg.loop_config(false, false),
                                              control::LoopStreams::from_seed(cfg.seed));
    const auto cor = control::run_closed_loop(cfg.plant, cfg.disturbances,
                                              cfg.loop_config(cfg.fine_enabled, cfg.coarse_enabled),
                                              control::LoopStreams::from_seed(cfg.seed));
    a.uncorrected = unc.rows;
    a.corrected = cor.rows;
    a.coarse_events = cor.coarse_events;
    a.stats.beam_lost_steps = cor.beam_lost_steps;
    a.stats.pid_faults = cor.pid_faults;
    a.stats.coarse_insufficient_history = cor.coarse_insufficient_history;
    a.stats.bridge = cor.bridge;

    detail::write_with(out_dir / "trace.csv", [&](std::ostream &o) { control::write_trace_csv(o, a.corrected); });
    detail::write_with(out_dir / "trace_uncorrected.csv",
                       [&](std::ostream &o) { control::write_trace_csv(o, a.uncorrected); });
    detail::write_with(out_dir / "monitor.csv", [&](std::ostream &o) {
      control::write_trace_csv(o, control::monitor_rows(cor, cfg.loop.pid.monitor_rate_hz));
    });
    detail::write_with(out_dir / "coarse_events.csv",
                       [&](std::ostream &o) { control::write_coarse_csv(o, a.coarse_events); });

    // Photon window: the last photonics.duration_s of the corrected run.
    const auto &P = cfg.photonics;
    const std::size_t n_rows = cor.rows.size();
    const auto n_window = static_cast<std::size_t>(std::llround(P.duration_s / cor.dt_s));
    require(n_window >= 1 && n_window <= n_rows, "harness", "photon window does not fit the loop trace");
    const std::size_t first = n_rows - n_window;
    a.stats.photon_window_start_s = cor.rows[first].time_s;
    photonics::EtaTimeline eta{0.0, cor.dt_s, {}};
    eta.values.reserve(n_window);
    for (std::size_t i = first; i < n_rows; ++i)
      eta.values.push_back(std::clamp(cor.rows[i].eta * cor.transmittance[i], 0.0, 1.0));

    Rng pair_rng = make_stream(cfg.seed, "photonics.pairs");
    Rng sig_singles = make_stream(cfg.seed, "photonics.signal_singles");
    Rng idl_singles = make_stream(cfg.seed, "photonics.idler_singles");
    Rng sig_channel = make_stream(cfg.seed, "photonics.signal_channel");
    Rng idl_channel = make_stream(cfg.seed, "photonics.idler_channel");
    auto source = photonics::generate_source(P.duration_s, P.source, pair_rng, sig_singles, idl_singles);
    a.stats.pairs_generated = source.pairs;
    auto sig = photonics::apply_channel(source.signal, P.losses, eta, P.signal_detector, sig_channel);
    source.signal = {};
    auto idl = photonics::apply_channel(source.idler, photonics::LossBudget{0, 0, 0},
                                        photonics::EtaTimeline::constant(1.0, P.duration_s), P.idler_detector,
                                        idl_channel);
    a.stats.signal_dead_time_losses = sig.dead_time_losses;
    a.stats.idler_dead_time_losses = idl.dead_time_losses;
    a.signal = std::move(sig.detected);
    a.signal_only = std::move(sig.signal_only);
    a.idler = std::move(idl.detected);
    save_stream((out_dir / "signal.bin").string(), a.signal);
    save_stream((out_dir / "idler.bin").string(), a.idler);
    save_stream((out_dir / "signal_only.bin").string(), a.signal_only);
    detail::write_text(out_dir / "run_stats.json", to_json(a.stats).dump(2) + "\n");

    const auto h = analyze_g2(a.signal, a.idler, cfg.correlation);
    detail::write_with(out_dir / "histogram.csv", [&](std::ostream &o) { correlation::write_histogram_csv(o, h); });

    RunResult result;
    result.directory = out_dir;
    result.report = summarize(a, h);
    result.report["wall_clock_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    detail::write_text(out_dir / "report.json", result.report.dump(2) + "\n");

    json manifest{{"config_hash", hash}, {"seed", cfg.seed}, {"artifacts", json::array()}};
    for (const char *name : {"config.json", "trace.csv", "trace_uncorrected.csv", "monitor.csv", "coarse_events.csv",
                             "run_stats.json", "signal.bin", "idler.bin", "signal_only.bin", "histogram.csv",
                             "report.json"})
      manifest["artifacts"].push_back(name);
    detail::write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
    return result;
  } catch (const std::exception &e) {
    try {
      detail::write_text(out_dir / "FAILED", std::string(e.what()) + "\n");
    } catch (...) {
    }
    throw;
  }
}

/// Reloads a run directory and recomputes its summary from the artifacts.
inline json regenerate_report(const fs::path &dir) {
  auto read_json = [&](const char *name) {
    std::ifstream in(dir / name);
    if (!in) throw ConfigError("harness", "missing '" + (dir / name).string() + "'");
    try {
      return json::parse(in);
    } catch (const json::exception &e) {
      throw ConfigError("harness", std::string(name) + " is not valid JSON: " + e.what());
    }
  };
  auto open = [&](const char *name) {
    std::ifstream in(dir / name, std::ios::binary);
    if (!in) throw ConfigError("harness", "missing '" + (dir / name).string() + "'");
    return in;
  };
  if (fs::exists(dir / "FAILED")) throw Error("harness", "run directory is marked FAILED");

  RunArtifacts a;
  a.config = parse_canonical_config(read_json("config.json"));
  a.stats = run_stats_from_json(read_json("run_stats.json"));
  {
    auto in = open("trace.csv");
    a.corrected = control::read_trace_csv(in);
  }
  {
    auto in = open("trace_uncorrected.csv");
    a.uncorrected = control::read_trace_csv(in);
  }
  {
    auto in = open("coarse_events.csv");
    a.coarse_events = control::read_coarse_csv(in);
  }
  const double T = a.config.photonics.duration_s;
  a.signal = load_stream((dir / "signal.bin").string());
  a.idler = load_stream((dir / "idler.bin").string());
  a.signal_only = load_stream((dir / "signal_only.bin").string());
  a.signal.duration_s = a.idler.duration_s = a.signal_only.duration_s = T;
  const auto h = analyze_g2(a.signal, a.idler, a.config.correlation);
  return summarize(a, h);
}

}  // namespace qfso::harness
