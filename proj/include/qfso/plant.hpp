#pragma once

// Optical geometry and device models: quadrant position-sensitive detector,
// fast steering mirror, remote hexapod, lever arms, SMF coupling.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "qfso/core.hpp"
#include "qfso/turbulence.hpp"

namespace qfso::plant {

/// Spot-position readout impossible: the anode sum is not positive.
class DegenerateReading : public Error {
 public:
  explicit DegenerateReading(const std::string &what) : Error("plant", what) {}
};

struct OpticsGeometry {
  double receiver_focal_mm = 600.0;
  double path_to_reflector_m = 125.0;
  /// Static offset of the quantum-beam centroid from the tracking centroid (um).
  Vec2 chromatic_offset_um{15.0, 0.0};
  /// Stationary std of the slow wandering part of that offset (um, per axis).
  double chromatic_jitter_um = 8.0;
  double chromatic_bandwidth_hz = 0.1;
  /// Optical magnification between the FSM and the focal plane. Not known
  /// for the real instrument; 1 means the FSM acts in collimated space.
  double fsm_magnification = 1.0;

  void validate() const {
    require(receiver_focal_mm > 0 && path_to_reflector_m > 0, "plant", "focal length and path must be > 0");
    require(chromatic_offset_um.finite() && std::isfinite(chromatic_jitter_um) && chromatic_jitter_um >= 0,
            "plant", "bad chromatic offset parameters");
    require(chromatic_bandwidth_hz > 0 && fsm_magnification > 0, "plant", "bad chromatic/fsm parameters");
  }

  /// Focal-plane displacement per microradian of FSM tilt: 2*theta*f.
  double fsm_gain_um_per_urad() const { return 2.0 * receiver_focal_mm * 1e-3 * fsm_magnification; }
  /// Focal-plane displacement per microradian of reflector tilt: 2*theta*L.
  double hexapod_gain_um_per_urad() const { return 2.0 * path_to_reflector_m; }
};

// ---------------------------------------------------------------------------
// Position-sensitive detector
// ---------------------------------------------------------------------------

struct PsdModel {
  double L_x_mm = 14.0;
  double L_y_mm = 14.0;
  double noise_sigma_V = 2e-5;
  double responsivity_V_per_mW = 4.0;
  /// Anode sum below which the controller considers the beam lost.
  double min_signal_V = 0.05;

  void validate() const {
    require(L_x_mm > 0 && L_y_mm > 0, "plant", "PSD dimensions must be > 0");
    require(std::isfinite(noise_sigma_V) && noise_sigma_V >= 0, "plant", "PSD noise must be >= 0");
    require(responsivity_V_per_mW > 0 && min_signal_V >= 0, "plant", "bad PSD responsivity/threshold");
  }
};

struct SpotPosition {
  double x = 0.0;  // mm
  double y = 0.0;  // mm
};

/// Anode voltages V1..V4. V2 and V3 lie on +x, V2 and V4 on +y.
using AnodeVoltages = std::array<double, 4>;

inline SpotPosition psd_position(const AnodeVoltages &v, const PsdModel &model) {
  for (double vi : v)
    if (!std::isfinite(vi)) throw DegenerateReading("non-finite anode voltage");
  const double sum = v[0] + v[1] + v[2] + v[3];
  if (!(sum > 0)) throw DegenerateReading("anode voltage sum is not positive");
  return {((v[1] + v[2]) - (v[0] + v[3])) / sum * model.L_x_mm / 2,
          ((v[1] + v[3]) - (v[0] + v[2])) / sum * model.L_y_mm / 2};
}

inline bool on_sensor(const SpotPosition &p, const PsdModel &model) {
  return std::abs(p.x) <= model.L_x_mm / 2 && std::abs(p.y) <= model.L_y_mm / 2;
}

/// Bilinear split of the photo-signal over the four anodes; the noiseless
/// output inverts psd_position exactly. A spot off the sensor yields only the
/// noise floor.
inline AnodeVoltages psd_voltages(const SpotPosition &spot, double power_mW, const PsdModel &model, Rng &rng) {
  require(std::isfinite(spot.x) && std::isfinite(spot.y) && std::isfinite(power_mW) && power_mW >= 0, "plant",
          "bad PSD spot or power");
  AnodeVoltages v{0, 0, 0, 0};
  if (on_sensor(spot, model)) {
    const double total = model.responsivity_V_per_mW * power_mW;
    const double a = spot.x / (model.L_x_mm / 2);
    const double b = spot.y / (model.L_y_mm / 2);
    v[0] = total / 4 * (1 - a) * (1 - b);
    v[1] = total / 4 * (1 + a) * (1 + b);
    v[2] = total / 4 * (1 + a) * (1 - b);
    v[3] = total / 4 * (1 - a) * (1 + b);
  }
  if (model.noise_sigma_V > 0)
    for (double &vi : v) vi += model.noise_sigma_V * standard_normal(rng);
  return v;
}

// ---------------------------------------------------------------------------
// Fast steering mirror
// ---------------------------------------------------------------------------

struct FsmParams {
  double resolution_urad = 0.25;
  double range_urad = 2000.0;
  double resonance_hz = 1600.0;
  double damping_ratio = 0.7;

  void validate() const {
    require(resolution_urad > 0 && range_urad > 0 && resonance_hz > 0 && damping_ratio > 0, "plant",
            "FSM parameters must be > 0");
  }
};

struct FsmState {
  Vec2 theta;       // mechanical tilt (urad)
  Vec2 rate;        // urad/s
  Vec2 commanded;   // raw command (urad)
  Vec2 actuated;    // quantized, range-clamped setpoint actually driven (urad)
};

/// Round to the nearest multiple of `step`, ties away from zero.
inline double quantize(double v, double step) { return step * std::round(v / step); }

inline double fsm_actuated_axis(double command, const FsmParams &p) {
  const double limit = p.resolution_urad * std::floor(p.range_urad / p.resolution_urad);
  return std::clamp(quantize(command, p.resolution_urad), -limit, limit);
}

inline FsmState fsm_command(FsmState state, const Vec2 &command, const FsmParams &params) {
  require(command.finite(), "plant", "non-finite FSM command");
  state.commanded = command;
  state.actuated = {fsm_actuated_axis(command.x, params), fsm_actuated_axis(command.y, params)};
  return state;
}

/// Second-order response of the mirror toward its actuated setpoint over dt,
/// integrated with RK4 sub-steps short compared to the resonance period.
inline FsmState fsm_step(FsmState state, const FsmParams &params, double dt) {
  params.validate();
  require(std::isfinite(dt) && dt > 0, "plant", "dt must be > 0");
  require(state.commanded.finite(), "plant", "non-finite FSM command");
  state.actuated = {fsm_actuated_axis(state.commanded.x, params), fsm_actuated_axis(state.commanded.y, params)};

  const double w = 2 * std::numbers::pi * params.resonance_hz;
  const double z = params.damping_ratio;
  const int n = std::max(1, static_cast<int>(std::ceil(dt * params.resonance_hz * 40)));
  const double h = dt / n;
  auto axis = [&](double &th, double &om, double target) {
    auto acc = [&](double p, double v) { return w * w * (target - p) - 2 * z * w * v; };
    for (int i = 0; i < n; ++i) {
      const double k1p = om, k1v = acc(th, om);
      const double k2p = om + 0.5 * h * k1v, k2v = acc(th + 0.5 * h * k1p, om + 0.5 * h * k1v);
      const double k3p = om + 0.5 * h * k2v, k3v = acc(th + 0.5 * h * k2p, om + 0.5 * h * k2v);
      const double k4p = om + h * k3v, k4v = acc(th + h * k3p, om + h * k3v);
      th += h / 6 * (k1p + 2 * k2p + 2 * k3p + k4p);
      om += h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v);
      if (std::abs(th) > params.range_urad) {  // hard stop
        th = std::copysign(params.range_urad, th);
        om = 0;
      }
    }
  };
  axis(state.theta.x, state.rate.x, state.actuated.x);
  axis(state.theta.y, state.rate.y, state.actuated.y);
  return state;
}

// ---------------------------------------------------------------------------
// Remote hexapod (reflector tilt)
// ---------------------------------------------------------------------------

struct HexapodParams {
  double settle_time_s = 0.5;
  double min_step_urad = 0.1;
  double range_urad = 20000.0;

  void validate() const {
    require(settle_time_s > 0 && min_step_urad > 0 && range_urad > 0, "plant", "hexapod parameters must be > 0");
  }
};

struct HexapodState {
  Vec2 theta;   // urad
  Vec2 target;  // urad, multiple of min_step
};

/// Applies a relative move request to the hexapod setpoint.
inline HexapodState hexapod_move(HexapodState state, const Vec2 &delta, const HexapodParams &params) {
  require(delta.finite(), "plant", "non-finite hexapod move");
  auto axis = [&](double t) {
    return std::clamp(quantize(t, params.min_step_urad), -params.range_urad, params.range_urad);
  };
  state.target = {axis(state.target.x + delta.x), axis(state.target.y + delta.y)};
  return state;
}

/// First-order settling toward the setpoint.
inline HexapodState hexapod_step(HexapodState state, const HexapodParams &params, double dt) {
  params.validate();
  require(std::isfinite(dt) && dt > 0, "plant", "dt must be > 0");
  const double k = -std::expm1(-dt / params.settle_time_s);
  state.theta += k * (state.target - state.theta);
  return state;
}

// ---------------------------------------------------------------------------
// Beam geometry and coupling
// ---------------------------------------------------------------------------

struct BeamCentroids {
  Vec2 tracking;  // um, focal plane
  Vec2 quantum;   // um, focal plane
};

/// Small-angle lever arms with reflection doubling. `chromatic_jitter` is the
/// current value of the wandering part of the chromatic offset.
inline BeamCentroids beam_centroids(const Vec2 &fsm_theta_urad, const Vec2 &hexapod_theta_urad, const Vec2 &wander_um,
                                    const Vec2 &drift_um, const Vec2 &chromatic_jitter_um,
                                    const OpticsGeometry &geometry) {
  BeamCentroids c;
  c.tracking = wander_um + drift_um + geometry.hexapod_gain_um_per_urad() * hexapod_theta_urad +
               geometry.fsm_gain_um_per_urad() * fsm_theta_urad;
  c.quantum = c.tracking + geometry.chromatic_offset_um + chromatic_jitter_um;
  return c;
}

inline BeamCentroids beam_centroids(const FsmState &fsm, const HexapodState &hexapod, const Vec2 &wander_um,
                                    const Vec2 &drift_um, const Vec2 &chromatic_jitter_um,
                                    const OpticsGeometry &geometry) {
  return beam_centroids(fsm.theta, hexapod.theta, wander_um, drift_um, chromatic_jitter_um, geometry);
}

/// Slow wandering part of the chromatic offset, a first-order Gauss-Markov
/// process with the geometry's jitter amplitude and bandwidth.
inline turbulence::WanderParams chromatic_jitter_params(const OpticsGeometry &g) {
  return {g.chromatic_jitter_um, g.chromatic_jitter_um, g.chromatic_bandwidth_hz, 1};
}

struct CouplingModel {
  double eta0 = 0.267;
  double mode_radius_um = 60.0;

  void validate() const {
    require(std::isfinite(eta0) && eta0 >= 0 && eta0 <= 1, "plant", "eta0 must lie in [0,1]");
    require(std::isfinite(mode_radius_um) && mode_radius_um > 0, "plant", "mode radius must be > 0");
  }
};

/// Gaussian-overlap single-mode coupling: eta0 * exp(-2 r^2 / w^2).
inline double coupling_efficiency(const Vec2 &offset_um, const CouplingModel &model) {
  model.validate();
  require(offset_um.finite(), "plant", "non-finite coupling offset");
  const double r2 = offset_um.x * offset_um.x + offset_um.y * offset_um.y;
  return model.eta0 * std::exp(-2 * r2 / (model.mode_radius_um * model.mode_radius_um));
}

}  // namespace qfso::plant
