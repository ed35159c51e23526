#pragma once

// Stochastic disturbances of the free-space channel: centroid wander,
// temperature-driven drift and lognormal scintillation.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qfso/core.hpp"

namespace qfso::turbulence {

/// Parameters of one Gauss-Markov wander component (both axes share the
/// bandwidth). `order == 1` is an Ornstein-Uhlenbeck process with
/// autocorrelation exp(-|t|/tau), tau = 1/(2*pi*bandwidth_hz).
/// `order == 2` is the critically damped second-order process with natural
/// frequency 2*pi*bandwidth_hz, autocorrelation (1 + w|t|) exp(-w|t|).
/// In both cases sigma_x / sigma_y are the stationary standard deviations (um).
struct WanderParams {
  double sigma_x = 0.0;
  double sigma_y = 0.0;
  double bandwidth_hz = 150.0;
  int order = 1;

  void validate() const {
    require(std::isfinite(sigma_x) && std::isfinite(sigma_y) && std::isfinite(bandwidth_hz),
            "turbulence", "non-finite wander parameters");
    require(sigma_x >= 0 && sigma_y >= 0, "turbulence", "wander sigma must be >= 0");
    require(bandwidth_hz > 0, "turbulence", "wander bandwidth must be > 0");
    require(order == 1 || order == 2, "turbulence", "wander order must be 1 or 2");
  }
};

/// Offset (um) and, for second-order components, its time derivative (um/s).
struct WanderState {
  Vec2 offset;
  Vec2 rate;
};

namespace detail {

struct Discretization2 {
  double phi[2][2];
  double l11, l21, l22;  // Cholesky factor of the per-step covariance for unit sigma
};

inline Discretization2 second_order_step(double omega, double dt) {
  const double wh = omega * dt;
  const double e = std::exp(-wh);
  const double e2 = e * e;
  Discretization2 d{};
  d.phi[0][0] = e * (1 + wh);
  d.phi[0][1] = e * dt;
  d.phi[1][0] = -e * omega * omega * dt;
  d.phi[1][1] = e * (1 - wh);
  // Q = P_inf - Phi P_inf Phi^T with P_inf = diag(1, omega^2).
  const double q11 = -std::expm1(-2 * wh) - e2 * (2 * wh + 2 * wh * wh);
  const double q12 = 2 * e2 * omega * omega * omega * dt * dt;
  const double q22 = omega * omega * (-std::expm1(-2 * wh) - e2 * (2 * wh * wh - 2 * wh));
  d.l11 = std::sqrt(std::max(0.0, q11));
  d.l21 = d.l11 > 0 ? q12 / d.l11 : 0.0;
  d.l22 = std::sqrt(std::max(0.0, q22 - d.l21 * d.l21));
  return d;
}

}  // namespace detail

/// Advances one wander component by dt seconds using the exact discretization
/// of the underlying linear SDE.
inline WanderState sample_wander(const WanderState &state, double dt, const WanderParams &params, Rng &rng) {
  params.validate();
  require(std::isfinite(dt) && dt > 0, "turbulence", "dt must be > 0");
  require(state.offset.finite() && state.rate.finite(), "turbulence", "non-finite wander state");

  const double omega = 2 * std::numbers::pi * params.bandwidth_hz;
  WanderState next;
  if (params.order == 1) {
    const double a = std::exp(-omega * dt);
    const double s = std::sqrt(-std::expm1(-2 * omega * dt));
    next.offset.x = a * state.offset.x + params.sigma_x * s * standard_normal(rng);
    next.offset.y = a * state.offset.y + params.sigma_y * s * standard_normal(rng);
    return next;
  }

  const auto d = detail::second_order_step(omega, dt);
  auto axis = [&](double pos, double vel, double sigma, double &out_pos, double &out_vel) {
    const double z1 = standard_normal(rng);
    const double z2 = standard_normal(rng);
    out_pos = d.phi[0][0] * pos + d.phi[0][1] * vel + sigma * d.l11 * z1;
    out_vel = d.phi[1][0] * pos + d.phi[1][1] * vel + sigma * (d.l21 * z1 + d.l22 * z2);
  };
  axis(state.offset.x, state.rate.x, params.sigma_x, next.offset.x, next.rate.x);
  axis(state.offset.y, state.rate.y, params.sigma_y, next.offset.y, next.rate.y);
  return next;
}

/// Draws a state from the stationary distribution of the component.
inline WanderState stationary_wander_state(const WanderParams &params, Rng &rng) {
  params.validate();
  const double omega = 2 * std::numbers::pi * params.bandwidth_hz;
  WanderState s;
  s.offset.x = params.sigma_x * standard_normal(rng);
  s.offset.y = params.sigma_y * standard_normal(rng);
  if (params.order == 2) {
    s.rate.x = omega * params.sigma_x * standard_normal(rng);
    s.rate.y = omega * params.sigma_y * standard_normal(rng);
  }
  return s;
}

/// Normalized autocorrelation of a component at lag tau (s).
inline double wander_autocorrelation(const WanderParams &params, double tau) {
  const double wt = 2 * std::numbers::pi * params.bandwidth_hz * std::abs(tau);
  return params.order == 1 ? std::exp(-wt) : (1 + wt) * std::exp(-wt);
}

/// Beam wander as a sum of independent components (e.g. a dominant slow
/// component plus a weak fast one).
struct WanderModel {
  std::vector<WanderParams> components;

  /// Calibrated so the uncorrected 30 s radial histogram has a ~350 um FWHM:
  /// a dominant slow second-order component plus a weak 150 Hz layer.
  static WanderModel calibrated_default() {
    return {{WanderParams{215.0, 215.0, 1.8, 2}, WanderParams{4.0, 4.0, 150.0, 1}}};
  }
};

struct WanderModelState {
  std::vector<WanderState> components;

  Vec2 offset() const {
    Vec2 sum;
    for (const auto &c : components) sum += c.offset;
    return sum;
  }
};

inline WanderModelState stationary_wander_state(const WanderModel &model, Rng &rng) {
  WanderModelState s;
  for (const auto &p : model.components) s.components.push_back(stationary_wander_state(p, rng));
  return s;
}

inline WanderModelState sample_wander(const WanderModelState &state, double dt, const WanderModel &model,
                                      Rng &rng) {
  require(state.components.size() == model.components.size(), "turbulence",
          "wander state does not match model");
  WanderModelState next;
  next.components.reserve(state.components.size());
  for (std::size_t i = 0; i < state.components.size(); ++i)
    next.components.push_back(sample_wander(state.components[i], dt, model.components[i], rng));
  return next;
}

// ---------------------------------------------------------------------------
// Temperature drift
// ---------------------------------------------------------------------------

/// Piecewise-linear temperature record: (time_s, temperature_C) samples.
struct TempProfile {
  std::vector<std::pair<double, double>> samples;

  void validate() const {
    if (samples.empty()) throw ConfigError("turbulence", "temperature profile is empty");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (!std::isfinite(samples[i].first) || !std::isfinite(samples[i].second))
        throw ConfigError("turbulence", "temperature profile contains non-finite values");
      if (i > 0 && !(samples[i].first > samples[i - 1].first))
        throw ConfigError("turbulence", "temperature profile times must be strictly increasing");
    }
  }

  /// Linear interpolation, clamped to the first/last sample outside the span.
  double temperature_at(double t) const {
    validate();
    if (t <= samples.front().first) return samples.front().second;
    if (t >= samples.back().first) return samples.back().second;
    auto hi = std::upper_bound(samples.begin(), samples.end(), t,
                               [](double v, const auto &s) { return v < s.first; });
    auto lo = hi - 1;
    const double f = (t - lo->first) / (hi->first - lo->first);
    return lo->second + f * (hi->second - lo->second);
  }

  double start() const { return samples.empty() ? 0.0 : samples.front().first; }
  double end() const { return samples.empty() ? 0.0 : samples.back().first; }
};

/// Parses the two-column profile format: comma or whitespace separated,
/// optional header line, '#' comments and blank lines ignored.
inline TempProfile parse_temperature_profile(std::istream &in) {
  TempProfile profile;
  std::string line;
  bool first_content_line = true;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::replace(line.begin(), line.end(), ',', ' ');
    std::replace(line.begin(), line.end(), '\t', ' ');
    std::istringstream fields(line);
    std::string a, b, extra;
    if (!(fields >> a)) continue;
    const bool have_b = static_cast<bool>(fields >> b);
    auto parse = [](const std::string &s, double &v) {
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      return ec == std::errc() && ptr == s.data() + s.size();
    };
    double t = 0, temp = 0;
    const bool ok = have_b && parse(a, t) && parse(b, temp) && !(fields >> extra);
    if (!ok) {
      if (first_content_line) {
        first_content_line = false;
        continue;  // header
      }
      throw ConfigError("turbulence", "malformed temperature profile line " + std::to_string(line_no));
    }
    first_content_line = false;
    profile.samples.emplace_back(t, temp);
  }
  profile.validate();
  return profile;
}

inline TempProfile load_temperature_profile(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("turbulence", "cannot open temperature profile '" + path + "'");
  return parse_temperature_profile(in);
}

/// Drift sensitivity per axis. The default gain is a calibration choice, not
/// a measured value.
struct DriftParams {
  Vec2 gain_um_per_C{150.0, 60.0};
  double reference_temp_C = 12.0;
};

/// Deterministic drift offset (um) at time t: gain * (T(t) - reference).
inline Vec2 drift_at(double t, const TempProfile &profile, const DriftParams &params) {
  require(params.gain_um_per_C.finite() && std::isfinite(params.reference_temp_C), "turbulence",
          "non-finite drift parameters");
  require_finite(t, "turbulence", "time");
  const double dT = profile.temperature_at(t) - params.reference_temp_C;
  return {params.gain_um_per_C.x * dT, params.gain_um_per_C.y * dT};
}

// ---------------------------------------------------------------------------
// Scintillation
// ---------------------------------------------------------------------------

struct ScintillationParams {
  double log_sigma = 0.1;
  double bandwidth_hz = 50.0;

  void validate() const {
    require(std::isfinite(log_sigma) && std::isfinite(bandwidth_hz), "turbulence",
            "non-finite scintillation parameters");
    require(log_sigma >= 0, "turbulence", "log_sigma must be >= 0");
    require(bandwidth_hz > 0, "turbulence", "scintillation bandwidth must be > 0");
  }
};

/// Zero-mean Gauss-Markov log-transmittance deviation.
struct ScintillationState {
  double log_deviation = 0.0;
};

/// Multiplicative transmittance factor exp(y - s^2/2); lognormal with mean 1.
inline double transmittance(const ScintillationState &state, const ScintillationParams &params) {
  return std::exp(state.log_deviation - 0.5 * params.log_sigma * params.log_sigma);
}

inline ScintillationState sample_scintillation(const ScintillationState &state, double dt,
                                               const ScintillationParams &params, Rng &rng) {
  params.validate();
  require(std::isfinite(dt) && dt > 0, "turbulence", "dt must be > 0");
  require_finite(state.log_deviation, "turbulence", "scintillation state");
  const double omega = 2 * std::numbers::pi * params.bandwidth_hz;
  const double a = std::exp(-omega * dt);
  const double s = std::sqrt(-std::expm1(-2 * omega * dt));
  return {a * state.log_deviation + params.log_sigma * s * standard_normal(rng)};
}

inline ScintillationState stationary_scintillation_state(const ScintillationParams &params, Rng &rng) {
  params.validate();
  return {params.log_sigma * standard_normal(rng)};
}

}  // namespace qfso::turbulence
