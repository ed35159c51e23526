#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "qfso/photonics.hpp"
#include "qfso/stream.hpp"

using namespace qfso;
using namespace qfso::photonics;

namespace {
PhaseMatchParams calibrated() {
  PhaseMatchParams p;
  p.temp_offset_C = calibrate_temp_offset(p, 25.3);
  return p;
}
}  // namespace

// Reference indices from an independent arbitrary-precision evaluation of the
// same dispersion model.
TEST(Dispersion, FrozenIndices) {
  EXPECT_NEAR(ktp_nz(0.81, 25), 1.84383215390443, 1e-12);
  EXPECT_NEAR(ktp_nz(0.405, 25), 1.95916561526442, 1e-12);
  EXPECT_NEAR(ktp_nz(1.064, 40), 1.82989640830321, 1e-12);
}

TEST(PhaseMatch, CalibratedOffset) { EXPECT_NEAR(calibrated().temp_offset_C, 86.5657137175, 1e-6); }

TEST(PhaseMatch, DegenerateAtCalibrationTemperature) {
  const auto p = calibrated();
  const auto w = phase_matched_wavelengths(25.3, p);
  EXPECT_NEAR(w.signal_nm, 810.0, 0.5);
  EXPECT_NEAR(w.idler_nm, 810.0, 0.5);
}

TEST(PhaseMatch, EnergyConservationAndMonotoneSplitting) {
  const auto p = calibrated();
  double last_split = -1;
  for (double T = 25.3; T <= 40.0 + 1e-9; T += 0.5) {
    const auto w = phase_matched_wavelengths(T, p);
    EXPECT_NEAR(1 / w.signal_nm + 1 / w.idler_nm, 1 / 405.0, 1e-12) << T;
    EXPECT_GE(w.signal_nm, w.idler_nm);
    const double split = w.signal_nm - w.idler_nm;
    EXPECT_GE(split, last_split) << T;
    last_split = split;
  }
}

TEST(PhaseMatch, FrozenNondegenerateWavelengths) {
  const auto p = calibrated();
  const struct {
    double T, s, i;
  } ref[] = {{30, 848.4287, 774.9016}, {35, 866.6664, 760.2890}, {40, 881.2723, 749.3933}};
  for (const auto &r : ref) {
    const auto w = phase_matched_wavelengths(r.T, p);
    EXPECT_NEAR(w.signal_nm, r.s, 0.5) << r.T;
    EXPECT_NEAR(w.idler_nm, r.i, 0.5) << r.T;
  }
}

TEST(PhaseMatch, NoSolutionBelowDegeneracy) {
  const auto p = calibrated();
  EXPECT_THROW(phase_matched_wavelengths(25.0, p), NoPhaseMatch);
  const double L_um = p.crystal_length_mm * 1e3;
  EXPECT_NEAR(delta_k(810.0, 25.0, p) * L_um, -5.834, 0.01);
}

TEST(PhaseMatch, RejectsBadParams) {
  PhaseMatchParams p;
  p.dispersion_model = "sellmeier-unknown";
  EXPECT_THROW(phase_matched_wavelengths(30, p), ConfigError);
  p = PhaseMatchParams{};
  p.poling_period_um = 0;
  EXPECT_THROW(phase_matched_wavelengths(30, p), InvalidInput);
}

TEST(Pairs, ZeroDurationIsEmpty) {
  Rng rng(1);
  const auto p = generate_pairs(0.0, SpdcSourceParams{}, rng);
  EXPECT_EQ(p.signal.size(), 0u);
  EXPECT_EQ(p.idler.size(), 0u);
}

TEST(Pairs, CountWithinPoissonBounds) {
  Rng rng(2);
  const auto p = generate_pairs(1.0, SpdcSourceParams{}, rng);
  EXPECT_NEAR(static_cast<double>(p.signal.size()), 3e5, 3 * std::sqrt(3e5));
  EXPECT_EQ(p.signal.size(), p.idler.size());
  EXPECT_TRUE(p.signal.strictly_increasing());
  EXPECT_TRUE(p.idler.strictly_increasing());
}

TEST(Pairs, InterarrivalsAreExponential) {
  SpdcSourceParams src;
  src.pair_rate_per_mw = 1e5;
  Rng rng(3);
  const auto p = generate_pairs(1.0, src, rng);
  std::vector<double> gaps;
  for (std::size_t i = 1; i < p.signal.size(); ++i)
    gaps.push_back(static_cast<double>(p.signal.timestamps_ps[i] - p.signal.timestamps_ps[i - 1]) * 1e-12);
  std::sort(gaps.begin(), gaps.end());
  const double n = static_cast<double>(gaps.size());
  double d = 0;
  for (std::size_t i = 0; i < gaps.size(); ++i) {
    const double F = 1 - std::exp(-1e5 * gaps[i]);
    d = std::max({d, F - i / n, (i + 1) / n - F});
  }
  EXPECT_LT(d, 1.6276 / std::sqrt(n));  // alpha = 0.01
}

TEST(Pairs, PartnerDelayCenteredWithJitterWidth) {
  SpdcSourceParams src;
  src.pair_time_jitter_ps = 20;
  Rng rng(4);
  const auto p = generate_pairs(0.5, src, rng);
  double sum = 0, sum2 = 0;
  for (const auto &[si, ii] : p.pairs) {
    const double dt = static_cast<double>(p.idler.timestamps_ps[ii]) - static_cast<double>(p.signal.timestamps_ps[si]);
    sum += dt;
    sum2 += dt * dt;
  }
  const double n = static_cast<double>(p.pairs.size());
  const double mean = sum / n;
  EXPECT_NEAR(mean, 0.0, 5 * 20 / std::sqrt(n));
  EXPECT_NEAR(std::sqrt(sum2 / n - mean * mean), 20.0, 0.5);
}

TEST(Source, UnpairedRatesMatchHeralding) {
  Rng a(5), b(6), c(7);
  const SpdcSourceParams src;
  const auto s = generate_source(1.0, src, a, b, c);
  EXPECT_NEAR(static_cast<double>(s.signal.size()), src.source_signal_rate, 4 * std::sqrt(src.source_signal_rate));
  const double idler_expected = src.pair_rate() / src.heralding_efficiency;
  EXPECT_NEAR(static_cast<double>(s.idler.size()), idler_expected, 4 * std::sqrt(idler_expected));
}

TEST(Source, RejectsSignalRateBelowPairRate) {
  SpdcSourceParams src;
  src.source_signal_rate = 1e5;
  Rng rng(1);
  EXPECT_THROW(generate_pairs(1.0, src, rng), InvalidInput);
}

TEST(Channel, IdentityPassesEverything) {
  Rng src(8);
  const auto in = poisson_stream(1e5, 0.2, src, Channel::Signal);
  LossBudget lossless{0, 0, 0};
  DetectorParams ideal{0, 0, 1.0, 0};
  Rng rng(9);
  const auto r = apply_channel(in, lossless, EtaTimeline::constant(1.0, in.duration_s), ideal, rng);
  EXPECT_EQ(r.detected.timestamps_ps, in.timestamps_ps);
  EXPECT_EQ(r.signal_only.timestamps_ps, in.timestamps_ps);
  EXPECT_EQ(r.dead_time_losses, 0u);
}

TEST(Channel, SurvivalIsBinomial) {
  Rng src(10);
  const auto in = poisson_stream(1e6, 1.0, src, Channel::Signal);
  LossBudget losses;
  DetectorParams det{0, 0, 1.0, 0};
  Rng rng(11);
  const double eta = 0.3;
  const auto r = apply_channel(in, losses, EtaTimeline::constant(eta, 1.0), det, rng);
  const double p = losses.static_transmission() * eta;
  const double n = static_cast<double>(in.size());
  EXPECT_NEAR(static_cast<double>(r.survived), n * p, 3 * std::sqrt(n * p * (1 - p)));
}

TEST(Channel, CalibratedReceiverRate) {
  LossBudget losses;
  losses.extra_loss = calibrate_extra_loss(1e6, 5.5e4, 0.19, losses);
  EXPECT_NEAR(losses.extra_loss, 0.37343, 1e-4);
  Rng src(12);
  const auto in = poisson_stream(1e6, 1.0, src, Channel::Signal);
  Rng rng(13);
  const auto r = apply_channel(in, losses, EtaTimeline::constant(0.19, 1.0), DetectorParams{}, rng);
  EXPECT_NEAR(r.detected.rate_hz(), 5.5e4, 0.2 * 5.5e4);
}

TEST(Channel, BackgroundTenTimesSignal) {
  LossBudget losses;
  losses.extra_loss = calibrate_extra_loss(1e6, 5.5e4, 0.19, losses);
  Rng src(14);
  const auto in = poisson_stream(1e6, 1.0, src, Channel::Signal);
  DetectorParams det;
  det.background_rate = 5.5e5;
  Rng rng(15);
  const auto r = apply_channel(in, losses, EtaTimeline::constant(0.19, 1.0), det, rng);
  const double signal = static_cast<double>(r.signal_only.size());
  EXPECT_NEAR(r.detected.rate_hz() / signal, 11.0, 0.5);
}

TEST(Channel, OutputStrictlyIncreasingAndDeadTimeRespected) {
  Rng src(16);
  const auto in = poisson_stream(5e6, 0.1, src, Channel::Idler);
  DetectorParams det;
  det.background_rate = 1e6;
  Rng rng(17);
  const auto r = apply_channel(in, LossBudget{0, 0, 0}, EtaTimeline::constant(1.0, 0.1), det, rng);
  ASSERT_GT(r.detected.size(), 1000u);
  const auto dead = static_cast<std::uint64_t>(det.dead_time_ns * 1e3);
  for (std::size_t i = 1; i < r.detected.size(); ++i)
    ASSERT_GE(r.detected.timestamps_ps[i] - r.detected.timestamps_ps[i - 1], dead);
  EXPECT_GT(r.dead_time_losses, 0u);
  EXPECT_EQ(r.detected.channel, Channel::Idler);
}

TEST(DeadTime, SlabsWithCarryEqualSinglePass) {
  Rng src(18);
  const auto in = poisson_stream(2e7, 0.01, src, Channel::Signal);
  const std::uint64_t dead = 22000;
  DeadTimeCarry whole;
  const auto expected = apply_dead_time(in.timestamps_ps, dead, whole);
  DeadTimeCarry carry;
  std::vector<std::uint64_t> joined;
  const std::span<const std::uint64_t> all(in.timestamps_ps);
  for (std::size_t start = 0; start < all.size(); start += 997) {
    const auto part = apply_dead_time(all.subspan(start, std::min<std::size_t>(997, all.size() - start)), dead, carry);
    joined.insert(joined.end(), part.begin(), part.end());
  }
  EXPECT_EQ(joined, expected);
}

TEST(DeadTime, ZeroDeadTimeRemovesDuplicatesOnly) {
  DeadTimeCarry c;
  const std::vector<std::uint64_t> v{1, 1, 2, 5, 5, 5, 9};
  EXPECT_EQ(apply_dead_time(v, 0, c), (std::vector<std::uint64_t>{1, 2, 5, 9}));
}

TEST(Channel, RejectsShortEtaTimeline) {
  Rng src(19);
  const auto in = poisson_stream(1e4, 1.0, src, Channel::Signal);
  Rng rng(20);
  EtaTimeline eta{0.0, 0.1, {0.2, 0.2}};
  EXPECT_THROW(apply_channel(in, LossBudget{}, eta, DetectorParams{}, rng), InvalidInput);
  EtaTimeline bad{0.0, 1.0, {1.5}};
  EXPECT_THROW(apply_channel(in, LossBudget{}, bad, DetectorParams{}, rng), InvalidInput);
}

TEST(Stream, BinaryAndCsvRoundTrip) {
  PhotonEventStream s;
  s.channel = Channel::Idler;
  s.timestamps_ps = {0, 1, 17, 1ull << 40, (1ull << 63) + 5};
  std::stringstream bin;
  write_stream_binary(bin, s);
  const auto back = read_stream_binary(bin);
  EXPECT_EQ(back.timestamps_ps, s.timestamps_ps);
  EXPECT_EQ(back.channel, Channel::Idler);
  std::stringstream csv;
  write_stream_csv(csv, s);
  EXPECT_EQ(read_stream_csv(csv, Channel::Idler).timestamps_ps, s.timestamps_ps);
}

TEST(Stream, RejectsBadMagicAndTruncation) {
  std::stringstream bad("QFSX\x01\x00\x00\x00");
  EXPECT_THROW(read_stream_binary(bad), ConfigError);
  PhotonEventStream s;
  s.timestamps_ps = {1, 2, 3};
  std::stringstream bin;
  write_stream_binary(bin, s);
  std::string data = bin.str();
  std::stringstream cut(data.substr(0, data.size() - 3));
  EXPECT_THROW(read_stream_binary(cut), ConfigError);
}
