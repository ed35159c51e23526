#pragma once

// Photon-pair source and detection chain: quasi-phase-matching of the
// ppKTP crystal, Poisson pair emission, loss thinning, detector jitter and
// dead time, daylight background.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/tools/toms748_solve.hpp>

#include "qfso/core.hpp"
#include "qfso/stream.hpp"

namespace qfso::photonics {

class NoPhaseMatch : public Error {
 public:
  explicit NoPhaseMatch(const std::string &what) : Error("photonics", what) {}
};

// ---------------------------------------------------------------------------
// Dispersion and phase matching
// ---------------------------------------------------------------------------

/// Extraordinary (z) index of KTP. Room-temperature Sellmeier of Kato and
/// Takaoka (2002) with the thermo-optic expansion of Emanueli and Arie (2003):
///   n(l, T) = n0(l) + n1(l) (T - 25) + n2(l) (T - 25)^2,  l in um, T in C.
inline double ktp_nz(double lambda_um, double temp_C) {
  const double l2 = lambda_um * lambda_um;
  const double n0 = std::sqrt(4.59423 + 0.06206 / (l2 - 0.04763) + 110.80672 / (l2 - 86.12171));
  constexpr double a[4] = {9.9587e-6, 9.9228e-6, -8.9603e-6, 4.1010e-6};
  constexpr double b[4] = {-1.1882e-8, 10.459e-8, -9.8136e-8, 3.1481e-8};
  double n1 = 0, n2 = 0, inv = 1;
  for (int m = 0; m < 4; ++m) {
    n1 += a[m] * inv;
    n2 += b[m] * inv;
    inv /= lambda_um;
  }
  const double dT = temp_C - 25.0;
  return n0 + n1 * dT + n2 * dT * dT;
}

struct PhaseMatchParams {
  double lambda_p_nm = 405.0;
  double poling_period_um = 3.425;
  double crystal_length_mm = 30.0;
  /// Shift added to the set temperature before evaluating the dispersion
  /// model; calibrated once so degeneracy falls at the measured set point.
  double temp_offset_C = 0.0;
  std::string dispersion_model = "ktp-z-kato2002-emanueli2003";
  /// Mismatch |dk| L below which a non-crossing is still accepted as the
  /// degenerate solution (rad).
  double degenerate_tolerance_rad = 1e-3;

  void validate() const {
    require(lambda_p_nm > 0 && poling_period_um > 0 && crystal_length_mm > 0, "photonics",
            "phase-matching lengths must be > 0");
    require(std::isfinite(temp_offset_C), "photonics", "non-finite temperature offset");
    if (dispersion_model != "ktp-z-kato2002-emanueli2003")
      throw ConfigError("photonics", "unknown dispersion model '" + dispersion_model + "'");
  }
};

/// Idler wavelength fixed by energy conservation.
inline double idler_wavelength_nm(double lambda_s_nm, double lambda_p_nm) {
  return 1.0 / (1.0 / lambda_p_nm - 1.0 / lambda_s_nm);
}

/// Quasi-phase-mismatch k_p - k_s - k_i - 2 pi / Lambda in rad/um, with the
/// idler set by energy conservation.
inline double delta_k(double lambda_s_nm, double temp_C, const PhaseMatchParams &p) {
  const double T = temp_C + p.temp_offset_C;
  const double lp = p.lambda_p_nm * 1e-3;
  const double ls = lambda_s_nm * 1e-3;
  const double li = idler_wavelength_nm(lambda_s_nm, p.lambda_p_nm) * 1e-3;
  return 2 * std::numbers::pi *
         (ktp_nz(lp, T) / lp - ktp_nz(ls, T) / ls - ktp_nz(li, T) / li - 1.0 / p.poling_period_um);
}

struct WavelengthPair {
  double signal_nm = 0;  // the longer wavelength of the pair
  double idler_nm = 0;
};

/// Collinear phase-matched pair at temperature T. The mismatch is symmetric
/// about degeneracy, so the search runs over signal wavelengths from 2*lambda_p
/// outward and brackets the sign change.
inline WavelengthPair phase_matched_wavelengths(double temp_C, const PhaseMatchParams &params) {
  params.validate();
  require_finite(temp_C, "photonics", "temperature");
  const double degenerate = 2 * params.lambda_p_nm;
  const double upper = 1600.0;
  const double L_um = params.crystal_length_mm * 1e3;
  auto f = [&](double ls) { return delta_k(ls, temp_C, params); };
  const double f0 = f(degenerate);
  const double f1 = f(upper);
  if (!std::isfinite(f0) || !std::isfinite(f1)) throw NoPhaseMatch("dispersion model not valid in search range");
  if (std::abs(f0) * L_um <= params.degenerate_tolerance_rad) return {degenerate, degenerate};
  if ((f0 > 0) == (f1 > 0))
    throw NoPhaseMatch("no phase-matching solution at " + std::to_string(temp_C) + " C");

  std::uintmax_t iters = 200;
  auto tol = [](double a, double b) { return std::abs(b - a) <= 1e-10; };
  const auto [lo, hi] = boost::math::tools::toms748_solve(f, degenerate, upper, f0, f1, tol, iters);
  const double ls = 0.5 * (lo + hi);
  return {ls, idler_wavelength_nm(ls, params.lambda_p_nm)};
}

/// Temperature offset that puts exact degeneracy at `degenerate_temp_C`.
inline double calibrate_temp_offset(PhaseMatchParams params, double degenerate_temp_C) {
  params.temp_offset_C = 0.0;
  params.validate();
  const double degenerate = 2 * params.lambda_p_nm;
  auto f = [&](double offset) {
    PhaseMatchParams q = params;
    q.temp_offset_C = offset;
    return delta_k(degenerate, degenerate_temp_C, q);
  };
  const double lo = -150.0, hi = 150.0;
  const double flo = f(lo), fhi = f(hi);
  if ((flo > 0) == (fhi > 0)) throw NoPhaseMatch("cannot reach degeneracy within +-150 C of offset");
  std::uintmax_t iters = 200;
  auto tol = [](double a, double b) { return std::abs(b - a) <= 1e-12; };
  const auto [a, b] = boost::math::tools::toms748_solve(f, lo, hi, flo, fhi, tol, iters);
  return 0.5 * (a + b);
}

// ---------------------------------------------------------------------------
// Pair source
// ---------------------------------------------------------------------------

/// Rates are detected-at-source rates: pair_rate_per_mw counts coincidences,
/// source_signal_rate counts signal singles. heralding_efficiency is the
/// fraction of idler detections that belong to a pair.
struct SpdcSourceParams {
  double pair_rate_per_mw = 3.0e5;
  double pump_mw = 1.0;
  double source_signal_rate = 1.0e6;
  double heralding_efficiency = 0.75;
  double pair_time_jitter_ps = 1.0;
  double pump_waist_um = 44.0;
  double collection_waist_um = 33.0;

  double pair_rate() const { return pair_rate_per_mw * pump_mw; }

  void validate() const {
    require(pair_rate_per_mw >= 0 && pump_mw >= 0 && source_signal_rate >= 0, "photonics", "rates must be >= 0");
    require(heralding_efficiency > 0 && heralding_efficiency <= 1, "photonics",
            "heralding efficiency must lie in (0,1]");
    require(pair_time_jitter_ps >= 0, "photonics", "pair jitter must be >= 0");
    require(source_signal_rate >= pair_rate(), "photonics", "signal singles rate below the pair rate");
  }
};

namespace detail {

inline std::uint64_t seconds_to_ps(double t) { return static_cast<std::uint64_t>(std::llround(t * 1e12)); }

/// Bumps ties forward by 1 ps so the sequence is strictly increasing.
inline void make_strictly_increasing(std::vector<std::uint64_t> &v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] <= v[i - 1]) v[i] = v[i - 1] + 1;
}

}  // namespace detail

/// Homogeneous Poisson arrivals on [0, duration).
inline PhotonEventStream poisson_stream(double rate_hz, double duration_s, Rng &rng, Channel channel) {
  require(rate_hz >= 0 && duration_s >= 0, "photonics", "rate and duration must be >= 0");
  PhotonEventStream s;
  s.channel = channel;
  s.duration_s = duration_s;
  if (rate_hz == 0 || duration_s == 0) return s;
  s.timestamps_ps.reserve(static_cast<std::size_t>(rate_hz * duration_s * 1.01 + 16));
  std::exponential_distribution<double> gap(rate_hz);
  for (double t = gap(rng); t < duration_s; t += gap(rng)) s.timestamps_ps.push_back(detail::seconds_to_ps(t));
  detail::make_strictly_increasing(s.timestamps_ps);
  return s;
}

struct PairStreams {
  PhotonEventStream signal;
  PhotonEventStream idler;
  /// (signal index, idler index) of each emitted pair.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
};

inline PairStreams generate_pairs(double duration_s, const SpdcSourceParams &source, Rng &rng) {
  source.validate();
  require(duration_s >= 0, "photonics", "duration must be >= 0");
  PairStreams out;
  out.signal = poisson_stream(source.pair_rate(), duration_s, rng, Channel::Signal);
  out.idler.channel = Channel::Idler;
  out.idler.duration_s = duration_s;
  const std::size_t n = out.signal.size();
  if (n == 0) return out;

  const auto end_ps = detail::seconds_to_ps(duration_s);
  std::vector<std::uint64_t> idler(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double dt = source.pair_time_jitter_ps > 0 ? source.pair_time_jitter_ps * standard_normal(rng) : 0.0;
    const auto t = static_cast<std::int64_t>(out.signal.timestamps_ps[i]) + std::llround(dt);
    idler[i] = static_cast<std::uint64_t>(std::clamp<std::int64_t>(t, 0, static_cast<std::int64_t>(end_ps)));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return idler[a] < idler[b]; });
  out.idler.timestamps_ps.resize(n);
  out.pairs.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    out.idler.timestamps_ps[k] = idler[order[k]];
    out.pairs[order[k]] = {order[k], k};
  }
  detail::make_strictly_increasing(out.idler.timestamps_ps);
  return out;
}

/// Sorted union of two streams; coincident timestamps are separated by 1 ps.
inline PhotonEventStream merge_streams(const PhotonEventStream &a, const PhotonEventStream &b, Channel channel) {
  PhotonEventStream out;
  out.channel = channel;
  out.duration_s = std::max(a.duration_s, b.duration_s);
  out.timestamps_ps.resize(a.size() + b.size());
  std::merge(a.timestamps_ps.begin(), a.timestamps_ps.end(), b.timestamps_ps.begin(), b.timestamps_ps.end(),
             out.timestamps_ps.begin());
  detail::make_strictly_increasing(out.timestamps_ps);
  return out;
}

struct SourceStreams {
  PhotonEventStream signal;  // paired + unpaired signal detections
  PhotonEventStream idler;   // paired + unpaired idler detections
  std::size_t pairs = 0;
};

/// Full source output: pairs plus the uncorrelated singles that bring each
/// arm up to its measured singles rate.
inline SourceStreams generate_source(double duration_s, const SpdcSourceParams &source, Rng &pair_rng,
                                     Rng &signal_singles_rng, Rng &idler_singles_rng) {
  auto p = generate_pairs(duration_s, source, pair_rng);
  const double unpaired_signal = source.source_signal_rate - source.pair_rate();
  const double unpaired_idler = source.pair_rate() * (1.0 / source.heralding_efficiency - 1.0);
  auto s1 = poisson_stream(unpaired_signal, duration_s, signal_singles_rng, Channel::Signal);
  auto i1 = poisson_stream(unpaired_idler, duration_s, idler_singles_rng, Channel::Idler);
  SourceStreams out;
  out.pairs = p.pairs.size();
  out.signal = merge_streams(p.signal, s1, Channel::Signal);
  out.idler = merge_streams(p.idler, i1, Channel::Idler);
  return out;
}

// ---------------------------------------------------------------------------
// Channel and detection
// ---------------------------------------------------------------------------

struct LossBudget {
  double free_space_loss = 0.16;
  double transceiver_loss = 0.45;
  /// Residual reconciling the stated loss chain with the measured receiver rate.
  double extra_loss = 0.0;

  void validate() const {
    for (double l : {free_space_loss, transceiver_loss, extra_loss})
      require(std::isfinite(l) && l >= 0 && l < 1, "photonics", "losses must lie in [0,1)");
  }

  /// Transmission excluding the dynamic SMF coupling term.
  double static_transmission() const { return (1 - free_space_loss) * (1 - transceiver_loss) * (1 - extra_loss); }
};

/// Efficiency is relative to the detector that defines the source rates
/// (those rates are already detected rates).
struct DetectorParams {
  double jitter_ps = 350.0;
  double dead_time_ns = 22.0;
  double efficiency = 1.0;
  double background_rate = 0.0;

  void validate() const {
    require(jitter_ps >= 0 && dead_time_ns >= 0, "photonics", "jitter and dead time must be >= 0");
    require(efficiency >= 0 && efficiency <= 1, "photonics", "detector efficiency must lie in [0,1]");
    require(background_rate >= 0, "photonics", "background rate must be >= 0");
  }
};

/// Sampled SMF coupling efficiency eta(t), held constant over each sample.
struct EtaTimeline {
  double t0_s = 0.0;
  double dt_s = 1.0;
  std::vector<double> values;

  static EtaTimeline constant(double eta, double duration_s) {
    return {0.0, std::max(duration_s, 1e-12), {eta}};
  }

  double end_s() const { return t0_s + dt_s * static_cast<double>(values.size()); }

  double at(double t) const {
    const auto i = static_cast<std::ptrdiff_t>(std::floor((t - t0_s) / dt_s));
    const auto n = static_cast<std::ptrdiff_t>(values.size());
    return values[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, n - 1))];
  }
};

/// Carry state for processing a long stream in consecutive time slabs.
struct DeadTimeCarry {
  std::optional<std::uint64_t> last_kept_ps;
};

/// Drops every event that falls within dead_time of the previously kept one.
/// Zero dead time still removes exact duplicates.
inline std::vector<std::uint64_t> apply_dead_time(std::span<const std::uint64_t> sorted, std::uint64_t dead_ps,
                                                  DeadTimeCarry &carry, std::vector<bool> *kept_mask = nullptr) {
  std::vector<std::uint64_t> out;
  out.reserve(sorted.size());
  if (kept_mask) kept_mask->assign(sorted.size(), false);
  const std::uint64_t gap = std::max<std::uint64_t>(dead_ps, 1);
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto t = sorted[i];
    if (carry.last_kept_ps && t < *carry.last_kept_ps + gap) continue;
    out.push_back(t);
    carry.last_kept_ps = t;
    if (kept_mask) (*kept_mask)[i] = true;
  }
  return out;
}

struct ChannelResult {
  PhotonEventStream detected;     // signal survivors + background, after dead time
  PhotonEventStream signal_only;  // detected events that originated from the source
  std::uint64_t survived = 0;     // before dead time
  std::uint64_t background = 0;   // before dead time
  std::uint64_t dead_time_losses = 0;
};

/// Thins the stream by the loss chain and eta(t), adds Gaussian timing jitter,
/// merges an independent Poisson background and applies dead time.
inline ChannelResult apply_channel(const PhotonEventStream &in, const LossBudget &losses, const EtaTimeline &eta,
                                   const DetectorParams &detector, Rng &rng, DeadTimeCarry *carry = nullptr) {
  losses.validate();
  detector.validate();
  require(!eta.values.empty() && eta.dt_s > 0, "photonics", "empty eta timeline");
  require(eta.t0_s <= 0 && eta.end_s() >= in.duration_s - 1e-9, "photonics",
          "eta timeline does not cover the stream duration");
  for (double v : eta.values) require(std::isfinite(v) && v >= 0 && v <= 1, "photonics", "eta outside [0,1]");

  const double base = losses.static_transmission() * detector.efficiency;
  const auto end_ps = static_cast<std::int64_t>(detail::seconds_to_ps(in.duration_s));

  struct Ev {
    std::uint64_t t;
    bool from_source;
  };
  std::vector<Ev> events;
  events.reserve(in.size());
  for (const auto t : in.timestamps_ps) {
    const double p = base * eta.at(static_cast<double>(t) * 1e-12);
    if (uniform01(rng) < p) events.push_back({t, true});
  }
  ChannelResult r;
  r.survived = events.size();
  if (detector.jitter_ps > 0) {
    for (auto &e : events) {
      const auto shifted = static_cast<std::int64_t>(e.t) + std::llround(detector.jitter_ps * standard_normal(rng));
      e.t = static_cast<std::uint64_t>(std::clamp<std::int64_t>(shifted, 0, end_ps));
    }
  }
  const auto bg = poisson_stream(detector.background_rate, in.duration_s, rng, in.channel);
  r.background = bg.size();
  for (const auto t : bg.timestamps_ps) events.push_back({t, false});
  std::stable_sort(events.begin(), events.end(), [](const Ev &a, const Ev &b) { return a.t < b.t; });

  std::vector<std::uint64_t> times(events.size());
  for (std::size_t i = 0; i < events.size(); ++i) times[i] = events[i].t;
  DeadTimeCarry local;
  std::vector<bool> kept;
  const auto dead_ps = static_cast<std::uint64_t>(std::llround(detector.dead_time_ns * 1e3));
  r.detected.timestamps_ps = apply_dead_time(times, dead_ps, carry ? *carry : local, &kept);
  r.detected.channel = in.channel;
  r.detected.duration_s = in.duration_s;
  r.dead_time_losses = events.size() - r.detected.size();
  r.signal_only.channel = Channel::SignalOnly;
  r.signal_only.duration_s = in.duration_s;
  for (std::size_t i = 0; i < events.size(); ++i)
    if (kept[i] && events[i].from_source) r.signal_only.timestamps_ps.push_back(events[i].t);
  return r;
}

/// extra_loss that maps a source rate onto a target receiver rate given the
/// rest of the chain and the mean coupling efficiency.
inline double calibrate_extra_loss(double source_rate, double target_rate, double mean_eta, LossBudget losses,
                                   double detector_efficiency = 1.0) {
  losses.extra_loss = 0.0;
  const double without = source_rate * losses.static_transmission() * mean_eta * detector_efficiency;
  require(without > 0 && target_rate > 0, "photonics", "rates must be > 0");
  const double extra = 1.0 - target_rate / without;
  require(extra >= 0 && extra < 1, "photonics", "target rate not reachable with the given loss chain");
  return extra;
}

}  // namespace qfso::photonics
