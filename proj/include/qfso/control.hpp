#pragma once

// Two-tier beam correction: a fast PID loop from PSD error to FSM command and
// a slow coarse aligner that offloads the mean beam position to the remote
// hexapod over the bridge. Also hosts the closed-loop co-simulation.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "qfso/core.hpp"
#include "qfso/netlink.hpp"
#include "qfso/plant.hpp"
#include "qfso/turbulence.hpp"

namespace qfso::control {

// ---------------------------------------------------------------------------
// PID
// ---------------------------------------------------------------------------

/// Gains map PSD error (mm) to FSM command (urad): kp in urad/mm, ki in
/// urad/(mm s), kd in urad s/mm. The integrator accumulates error in mm s.
struct PidConfig {
  Vec2 kp{70.0, 70.0};
  Vec2 ki{1.1e5, 1.1e5};
  Vec2 kd{0.0, 0.0};
  double rate_hz = 200.0;
  double output_limit_urad = 2000.0;
  double integrator_limit = 0.018;  // ~output_limit / ki
  double monitor_rate_hz = 20.0;
  /// Single-pole low-pass applied to the error before differencing; <= 0
  /// disables the filter.
  double derivative_cutoff_hz = 50.0;

  void validate() const {
    require(kp.finite() && ki.finite() && kd.finite(), "control", "non-finite PID gains");
    require(rate_hz > 0 && monitor_rate_hz > 0, "control", "PID rates must be > 0");
    require(output_limit_urad > 0 && integrator_limit > 0, "control", "PID limits must be > 0");
    require(std::isfinite(derivative_cutoff_hz), "control", "non-finite derivative cutoff");
  }
};

struct PidState {
  Vec2 integrator;
  Vec2 previous_error;  // filtered error at the previous update
  Vec2 last_command;
  bool primed = false;
  bool fault = false;
};

struct PidResult {
  Vec2 command;
  PidState state;
};

inline PidResult pid_update(PidState state, const Vec2 &error, double dt, const PidConfig &cfg) {
  cfg.validate();
  require(std::isfinite(dt) && dt > 0, "control", "dt must be > 0");
  if (!error.finite()) {
    state.fault = true;
    return {state.last_command, state};
  }
  state.fault = false;

  double alpha = 1.0;
  if (cfg.derivative_cutoff_hz > 0) {
    const double tc = 1.0 / (2 * std::numbers::pi * cfg.derivative_cutoff_hz);
    alpha = dt / (dt + tc);
  }

  auto axis = [&](double e, double &integ, double &prev, double kp, double ki, double kd) {
    const double filtered = state.primed ? prev + alpha * (e - prev) : e;
    const double deriv = state.primed ? (filtered - prev) / dt : 0.0;
    integ = std::clamp(integ + e * dt, -cfg.integrator_limit, cfg.integrator_limit);
    prev = filtered;
    const double u = kp * e + ki * integ + kd * deriv;
    return std::clamp(u, -cfg.output_limit_urad, cfg.output_limit_urad);
  };

  Vec2 u;
  u.x = axis(error.x, state.integrator.x, state.previous_error.x, cfg.kp.x, cfg.ki.x, cfg.kd.x);
  u.y = axis(error.y, state.integrator.y, state.previous_error.y, cfg.kp.y, cfg.ki.y, cfg.kd.y);
  state.primed = true;
  state.last_command = u;
  return {u, state};
}

// ---------------------------------------------------------------------------
// Coarse alignment
// ---------------------------------------------------------------------------

struct CoarseConfig {
  double window_s = 10.0;
  double cadence_s = 60.0;
  double deadband_um = 20.0;
  double hexapod_gain_um_per_urad = 250.0;

  void validate() const {
    require(window_s > 0 && cadence_s > 0 && window_s <= cadence_s, "control",
            "coarse window must satisfy 0 < window <= cadence");
    require(deadband_um >= 0, "control", "coarse deadband must be >= 0");
    require(hexapod_gain_um_per_urad > 0, "control", "hexapod gain must be > 0");
  }
};

struct TimedPosition {
  double t = 0.0;
  Vec2 position_um;
};

struct CoarseState {
  std::optional<double> last_evaluation_s;
  std::uint64_t insufficient_history = 0;
};

/// Evaluates the trailing window mean at most once per cadence and returns the
/// hexapod tilt change that would re-centre it, or nullopt inside the deadband.
inline std::optional<Vec2> coarse_alignment_tick(std::span<const TimedPosition> history, double now,
                                                 const CoarseConfig &cfg, CoarseState &state) {
  cfg.validate();
  if (state.last_evaluation_s && now - *state.last_evaluation_s < cfg.cadence_s) return std::nullopt;
  if (history.empty() || history.front().t > now - cfg.window_s) {
    ++state.insufficient_history;
    return std::nullopt;
  }
  state.last_evaluation_s = now;

  Vec2 sum;
  std::size_t n = 0;
  for (const auto &p : history) {
    if (p.t > now - cfg.window_s && p.t <= now) {
      sum += p.position_um;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  const Vec2 mean = (1.0 / static_cast<double>(n)) * sum;
  if (mean.norm() <= cfg.deadband_um) return std::nullopt;
  return Vec2{-mean.x / cfg.hexapod_gain_um_per_urad, -mean.y / cfg.hexapod_gain_um_per_urad};
}

// ---------------------------------------------------------------------------
// Closed loop
// ---------------------------------------------------------------------------

struct Disturbances {
  turbulence::WanderModel wander;  // no components = no wander
  turbulence::TempProfile temperature;
  turbulence::DriftParams drift;
  bool drift_enabled = true;
  turbulence::ScintillationParams scintillation;
  bool scintillation_enabled = true;
  bool chromatic_jitter_enabled = true;
  Vec2 static_offset_um;  // constant bias, e.g. an initial misalignment
};

struct PlantConfig {
  plant::OpticsGeometry geometry;
  plant::PsdModel psd;
  plant::FsmParams fsm;
  plant::HexapodParams hexapod;
  plant::CouplingModel coupling;
  double tracking_power_mW = 1.0;
};

struct LoopConfig {
  double duration_s = 30.0;
  double sim_rate_hz = 1000.0;
  bool fine_enabled = true;
  bool coarse_enabled = true;
  /// Route hexapod moves through the simulated bridge (false: direct calls).
  bool use_netlink = true;
  /// Time into the temperature profile at which the run starts.
  double start_time_s = 0.0;
  /// Start with the hexapod already cancelling the drift at start_time_s.
  bool prealigned = true;
  PidConfig pid;
  CoarseConfig coarse;
  netlink::ChannelParams channel;
};

struct TraceRow {
  double time_s = 0;
  Vec2 track_um;
  Vec2 quant_um;
  Vec2 fsm_cmd_urad;
  Vec2 hex_urad;
  double eta = 0;
  Vec2 psd_mm;  // NaN while the beam is lost
};

struct CoarseEvent {
  double time_s = 0;
  Vec2 delta_urad;
  std::uint64_t seq = 0;
  bool applied = false;
  int transmissions = 0;
};

struct TraceLog {
  std::vector<TraceRow> rows;
  /// Scintillation factor per row (not part of the persisted trace).
  std::vector<double> transmittance;
  std::vector<CoarseEvent> coarse_events;
  netlink::BridgeStats bridge;
  std::uint64_t beam_lost_steps = 0;
  std::uint64_t pid_faults = 0;
  std::uint64_t coarse_insufficient_history = 0;
  double dt_s = 0;
};

/// Independent random streams for one realization. Disturbance streams do not
/// depend on the controller settings, so runs with and without feedback at the
/// same seed see identical turbulence.
struct LoopStreams {
  Rng wander, scintillation, chromatic, psd_noise, channel;

  static LoopStreams from_seed(std::uint64_t seed) {
    return {make_stream(seed, "turbulence.wander"), make_stream(seed, "turbulence.scintillation"),
            make_stream(seed, "plant.chromatic"), make_stream(seed, "plant.psd_noise"),
            make_stream(seed, "netlink.channel")};
  }
};

/// Fixed-step co-simulation: the plant advances at sim_rate_hz, the PID fires
/// every sim_rate/rate_hz steps, the coarse aligner at window_s + n * cadence,
/// and bridge events are processed at step boundaries.
inline TraceLog run_closed_loop(const PlantConfig &plant_cfg, const Disturbances &dist, const LoopConfig &cfg,
                                LoopStreams streams, netlink::FaultScript script = {}) {
  using namespace qfso::plant;
  plant_cfg.geometry.validate();
  plant_cfg.psd.validate();
  plant_cfg.fsm.validate();
  plant_cfg.hexapod.validate();
  plant_cfg.coupling.validate();
  cfg.pid.validate();
  cfg.coarse.validate();
  require(cfg.duration_s >= 0 && cfg.sim_rate_hz > 0, "control", "bad duration or sim rate");
  const double ratio = cfg.sim_rate_hz / cfg.pid.rate_hz;
  const long pid_div = std::lround(ratio);
  if (pid_div < 1 || std::abs(ratio - static_cast<double>(pid_div)) > 1e-9)
    throw ConfigError("control", "sim_rate_hz must be an integer multiple of the PID rate");

  const double dt = 1.0 / cfg.sim_rate_hz;
  const double dt_pid = 1.0 / cfg.pid.rate_hz;
  const auto steps = static_cast<std::size_t>(std::llround(cfg.duration_s * cfg.sim_rate_hz));
  const auto &geo = plant_cfg.geometry;
  const double g_fsm = geo.fsm_gain_um_per_urad();

  auto drift = [&](double t) {
    return dist.drift_enabled ? turbulence::drift_at(cfg.start_time_s + t, dist.temperature, dist.drift) : Vec2{};
  };

  auto wander = turbulence::stationary_wander_state(dist.wander, streams.wander);
  const auto chrom_params = chromatic_jitter_params(geo);
  turbulence::WanderState chrom;
  if (dist.chromatic_jitter_enabled) chrom = turbulence::stationary_wander_state(chrom_params, streams.chromatic);
  turbulence::ScintillationState scint;
  if (dist.scintillation_enabled)
    scint = turbulence::stationary_scintillation_state(dist.scintillation, streams.scintillation);

  FsmState fsm;
  HexapodState hex;
  if (cfg.prealigned) {
    hex = hexapod_move(hex, (-1.0 / geo.hexapod_gain_um_per_urad()) * drift(0.0), plant_cfg.hexapod);
    hex.theta = hex.target;
  }
  PidState pid;
  CoarseState coarse;
  std::deque<TimedPosition> history;
  // First evaluation as soon as one full window exists, then every cadence.
  double next_coarse = cfg.coarse.window_s;
  netlink::BridgeSim bridge(cfg.channel, std::move(streams.channel), std::move(script));
  auto apply_move = [&](const Vec2 &delta) { hex = hexapod_move(hex, delta, plant_cfg.hexapod); };

  TraceLog log;
  auto record_outcomes = [&] {
    for (const auto &o : bridge.take_outcomes())
      for (auto &e : log.coarse_events)
        if (e.seq == o.seq) {
          e.applied = o.status == netlink::MoveStatus::Applied;
          e.transmissions = o.transmissions;
        }
  };

  log.dt_s = dt;
  log.rows.reserve(steps);
  log.transmittance.reserve(steps);

  for (std::size_t k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) * dt;

    bridge.advance(t, apply_move);
    record_outcomes();

    const Vec2 chrom_now = dist.chromatic_jitter_enabled ? chrom.offset : Vec2{};
    const auto beams = beam_centroids(fsm, hex, wander.offset() + dist.static_offset_um, drift(t), chrom_now, geo);
    const double tau = dist.scintillation_enabled ? turbulence::transmittance(scint, dist.scintillation) : 1.0;

    const SpotPosition spot{beams.tracking.x * 1e-3, beams.tracking.y * 1e-3};
    const auto volts = psd_voltages(spot, plant_cfg.tracking_power_mW * tau, plant_cfg.psd, streams.psd_noise);
    const double vsum = volts[0] + volts[1] + volts[2] + volts[3];
    std::optional<SpotPosition> reading;
    if (vsum >= plant_cfg.psd.min_signal_V && vsum > 0) reading = psd_position(volts, plant_cfg.psd);
    if (!reading) ++log.beam_lost_steps;

    TraceRow row;
    row.time_s = t;
    row.track_um = beams.tracking;
    row.quant_um = beams.quantum;
    row.fsm_cmd_urad = fsm.commanded;
    row.hex_urad = hex.theta;
    row.eta = coupling_efficiency(beams.quantum, plant_cfg.coupling);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    row.psd_mm = reading ? Vec2{reading->x, reading->y} : Vec2{nan, nan};
    log.rows.push_back(row);
    log.transmittance.push_back(tau);

    if (reading) {
      // Position the beam would have with the mirror at rest; this is what the
      // coarse tier offloads.
      const Vec2 offloaded = Vec2{reading->x * 1e3, reading->y * 1e3} - g_fsm * fsm.theta;
      history.push_back({t, offloaded});
    }
    while (!history.empty() && history.front().t < t - cfg.coarse.window_s - dt) history.pop_front();

    if (cfg.fine_enabled && k % static_cast<std::size_t>(pid_div) == 0 && reading) {
      auto r = pid_update(pid, Vec2{-reading->x, -reading->y}, dt_pid, cfg.pid);
      pid = r.state;
      if (pid.fault) ++log.pid_faults;
      fsm = fsm_command(fsm, r.command, plant_cfg.fsm);
    }

    if (t + 0.5 * dt >= next_coarse) {
      next_coarse += cfg.coarse.cadence_s;
      if (cfg.coarse_enabled) {
        std::vector<TimedPosition> window(history.begin(), history.end());
        if (auto delta = coarse_alignment_tick(window, t, cfg.coarse, coarse)) {
          if (cfg.use_netlink) {
            if (auto seq = bridge.request_move(*delta, t)) log.coarse_events.push_back({t, *delta, *seq, false, 0});
            bridge.advance(t, apply_move);
          } else {
            apply_move(*delta);
            log.coarse_events.push_back({t, *delta, log.coarse_events.size() + 1, true, 1});
          }
          record_outcomes();
        }
      }
    }

    fsm = fsm_step(fsm, plant_cfg.fsm, dt);
    hex = hexapod_step(hex, plant_cfg.hexapod, dt);
    wander = turbulence::sample_wander(wander, dt, dist.wander, streams.wander);
    if (dist.chromatic_jitter_enabled) chrom = turbulence::sample_wander(chrom, dt, chrom_params, streams.chromatic);
    if (dist.scintillation_enabled)
      scint = turbulence::sample_scintillation(scint, dt, dist.scintillation, streams.scintillation);
  }
  log.bridge = bridge.stats();
  log.coarse_insufficient_history = coarse.insufficient_history;
  return log;
}

/// Rows decimated to the supervisory monitor rate.
inline std::vector<TraceRow> monitor_rows(const TraceLog &log, double monitor_rate_hz) {
  require(monitor_rate_hz > 0 && log.dt_s > 0, "control", "bad monitor rate");
  const auto every = std::max<long>(1, std::lround(1.0 / (monitor_rate_hz * log.dt_s)));
  std::vector<TraceRow> out;
  for (std::size_t i = 0; i < log.rows.size(); i += static_cast<std::size_t>(every)) out.push_back(log.rows[i]);
  return out;
}

/// Radial distance of the tracking centroid for every row.
inline std::vector<double> radial_positions(std::span<const TraceRow> rows) {
  std::vector<double> r;
  r.reserve(rows.size());
  for (const auto &row : rows) r.push_back(row.track_um.norm());
  return r;
}

// ---------------------------------------------------------------------------
// Trace persistence
// ---------------------------------------------------------------------------

inline constexpr const char *kTraceHeader =
    "time_s,track_x_um,track_y_um,quant_x_um,quant_y_um,fsm_cmd_x_urad,fsm_cmd_y_urad,hex_x_urad,hex_y_urad,eta,"
    "psd_x_mm,psd_y_mm";

namespace detail {
inline void put(std::string &out, double v) {
  char buf[32];
  if (std::isnan(v)) {
    out += "nan";
    return;
  }
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

inline std::vector<double> split_doubles(const std::string &line) {
  std::vector<double> v;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    if (cell == "nan") v.push_back(std::numeric_limits<double>::quiet_NaN());
    else v.push_back(std::stod(cell));
  }
  return v;
}
}  // namespace detail

inline void write_trace_csv(std::ostream &out, std::span<const TraceRow> rows) {
  out << kTraceHeader << '\n';
  std::string line;
  for (const auto &r : rows) {
    line.clear();
    const double vals[] = {r.time_s,         r.track_um.x,     r.track_um.y, r.quant_um.x, r.quant_um.y, r.fsm_cmd_urad.x,
                           r.fsm_cmd_urad.y, r.hex_urad.x,     r.hex_urad.y, r.eta,        r.psd_mm.x,   r.psd_mm.y};
    for (std::size_t i = 0; i < std::size(vals); ++i) {
      if (i) line += ',';
      detail::put(line, vals[i]);
    }
    line += '\n';
    out << line;
  }
}

inline std::vector<TraceRow> read_trace_csv(std::istream &in) {
  std::string line;
  if (!std::getline(in, line) || line != kTraceHeader) throw ConfigError("control", "not a trace CSV (bad header)");
  std::vector<TraceRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto v = detail::split_doubles(line);
    if (v.size() != 12) throw ConfigError("control", "trace CSV row has wrong column count");
    rows.push_back(TraceRow{v[0], {v[1], v[2]}, {v[3], v[4]}, {v[5], v[6]}, {v[7], v[8]}, v[9], {v[10], v[11]}});
  }
  return rows;
}

inline constexpr const char *kCoarseHeader = "time_s,dx_urad,dy_urad,seq,applied,transmissions";

inline void write_coarse_csv(std::ostream &out, std::span<const CoarseEvent> events) {
  out << kCoarseHeader << '\n';
  for (const auto &e : events) {
    std::string line;
    detail::put(line, e.time_s);
    line += ',';
    detail::put(line, e.delta_urad.x);
    line += ',';
    detail::put(line, e.delta_urad.y);
    line += ',' + std::to_string(e.seq) + ',' + (e.applied ? "1" : "0") + ',' + std::to_string(e.transmissions);
    out << line << '\n';
  }
}

inline std::vector<CoarseEvent> read_coarse_csv(std::istream &in) {
  std::string line;
  if (!std::getline(in, line) || line != kCoarseHeader) throw ConfigError("control", "not a coarse-event CSV");
  std::vector<CoarseEvent> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto v = detail::split_doubles(line);
    if (v.size() != 6) throw ConfigError("control", "coarse-event CSV row has wrong column count");
    out.push_back({v[0], {v[1], v[2]}, static_cast<std::uint64_t>(v[3]), v[4] != 0, static_cast<int>(v[5])});
  }
  return out;
}

}  // namespace qfso::control
