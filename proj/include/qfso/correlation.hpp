#pragma once

// Coincidence histogramming, normalized cross-correlation g2(tau),
// accidental-floor subtraction and Gaussian peak fitting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/NonLinearOptimization>

#include "qfso/core.hpp"
#include "qfso/stream.hpp"

namespace qfso::correlation {

class UnsortedInput : public Error {
 public:
  explicit UnsortedInput(const std::string &what) : Error("correlation", what) {}
};

class NormalizationError : public Error {
 public:
  explicit NormalizationError(const std::string &what) : Error("correlation", what) {}
};

class FitFailed : public Error {
 public:
  FitFailed(const std::string &what, double residual_norm, int evaluations)
      : Error("correlation", what + " (residual norm " + std::to_string(residual_norm) + ", " +
                                 std::to_string(evaluations) + " evaluations)"),
        residual_norm(residual_norm),
        evaluations(evaluations) {}
  double residual_norm;
  int evaluations;
};

/// Bins of width w are centred on k*w for |k| <= K = tau_range / w. A delay
/// tau = t_idler - t_signal falls in bin sign(tau) * floor((|tau| + w/2) / w),
/// so bins are symmetric about zero and exact half-bin ties go away from zero.
struct G2Histogram {
  std::int64_t bin_width = 0;  // ticks
  std::int64_t tau_range = 0;  // ticks, multiple of bin_width
  double tick_s = 1e-12;
  std::vector<std::uint64_t> counts;
  std::uint64_t singles_signal = 0;
  std::uint64_t singles_idler = 0;
  double duration_s = 0.0;

  std::vector<double> g2;             // empty until normalized
  std::vector<double> g2_subtracted;  // empty until the floor is removed
  double floor_offset = 0.0;

  std::int64_t half_bins() const { return bin_width > 0 ? tau_range / bin_width : 0; }
  std::size_t size() const { return counts.size(); }
  std::int64_t tau_of_bin(std::size_t i) const { return (static_cast<std::int64_t>(i) - half_bins()) * bin_width; }
  double singles_rate_signal() const { return duration_s > 0 ? singles_signal / duration_s : 0.0; }
  double singles_rate_idler() const { return duration_s > 0 ? singles_idler / duration_s : 0.0; }
  std::uint64_t total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }
};

/// Bin index offset k for a delay, as defined on G2Histogram.
inline std::int64_t delay_bin(std::int64_t tau, std::int64_t w) {
  const std::int64_t a = tau < 0 ? -tau : tau;
  const std::int64_t k = (2 * a + w) / (2 * w);
  return tau < 0 ? -k : k;
}

inline bool sorted_nondecreasing(std::span<const std::uint64_t> v) { return std::is_sorted(v.begin(), v.end()); }

/// Two-pointer coincidence sweep, O(N + M + C) for C counted pairs.
inline G2Histogram coincidence_histogram(std::span<const std::uint64_t> signal, std::span<const std::uint64_t> idler,
                                         std::int64_t bin_width, std::int64_t tau_range, double duration_s = 0.0,
                                         double tick_s = 1e-12) {
  require(bin_width > 0, "correlation", "bin width must be > 0");
  require(tau_range >= 0 && tau_range % bin_width == 0, "correlation",
          "tau range must be a non-negative multiple of the bin width");
  if (!sorted_nondecreasing(signal) || !sorted_nondecreasing(idler))
    throw UnsortedInput("timestamp streams must be sorted");

  G2Histogram h;
  h.bin_width = bin_width;
  h.tau_range = tau_range;
  h.tick_s = tick_s;
  h.duration_s = duration_s;
  h.singles_signal = signal.size();
  h.singles_idler = idler.size();
  const std::int64_t K = tau_range / bin_width;
  h.counts.assign(static_cast<std::size_t>(2 * K + 1), 0);

  // Largest |tau| that still lands in bin |k| <= K.
  const auto reach = static_cast<std::uint64_t>(((2 * K + 1) * bin_width - 1) / 2);
  std::size_t first = 0;
  for (const std::uint64_t s : signal) {
    while (first < idler.size() && idler[first] + reach < s) ++first;
    for (std::size_t j = first; j < idler.size() && idler[j] <= s + reach; ++j) {
      const auto tau = static_cast<std::int64_t>(idler[j]) - static_cast<std::int64_t>(s);
      h.counts[static_cast<std::size_t>(delay_bin(tau, bin_width) + K)] += 1;
    }
  }
  return h;
}

inline G2Histogram coincidence_histogram(const PhotonEventStream &signal, const PhotonEventStream &idler,
                                         std::int64_t bin_width_ps, std::int64_t tau_range_ps) {
  return coincidence_histogram(signal.timestamps_ps, idler.timestamps_ps, bin_width_ps, tau_range_ps,
                               std::max(signal.duration_s, idler.duration_s));
}

/// g2(tau_b) = counts_b / (R_s R_i w T) with singles rates measured from the
/// same acquisition.
inline G2Histogram g2_normalize(G2Histogram h) {
  if (!(h.duration_s > 0)) throw NormalizationError("duration must be > 0");
  const double rs = h.singles_rate_signal();
  const double ri = h.singles_rate_idler();
  if (!(rs > 0) || !(ri > 0)) throw NormalizationError("singles rates must be > 0");
  const double accidental_per_bin = rs * ri * static_cast<double>(h.bin_width) * h.tick_s * h.duration_s;
  h.g2.resize(h.counts.size());
  for (std::size_t i = 0; i < h.counts.size(); ++i) h.g2[i] = static_cast<double>(h.counts[i]) / accidental_per_bin;
  return h;
}

struct FloorEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
  std::size_t bins = 0;
};

/// Mean and standard error of `values` over bins with |tau| > far_ticks.
inline FloorEstimate far_region(const G2Histogram &h, std::span<const double> values, std::int64_t far_ticks) {
  FloorEstimate f;
  double sum = 0, sum2 = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto tau = h.tau_of_bin(i);
    if ((tau < 0 ? -tau : tau) > far_ticks) {
      sum += values[i];
      sum2 += values[i] * values[i];
      ++f.bins;
    }
  }
  if (f.bins == 0) return f;
  const double n = static_cast<double>(f.bins);
  f.mean = sum / n;
  if (f.bins > 1) f.standard_error = std::sqrt(std::max(0.0, (sum2 - n * f.mean * f.mean) / (n - 1)) / n);
  return f;
}

/// Removes the flat accidental floor estimated over |tau| > far_ticks from the
/// current normalized values (the subtracted ones if already present).
inline G2Histogram subtract_accidentals(G2Histogram h, std::int64_t far_ticks) {
  if (h.g2.empty()) throw NormalizationError("histogram must be normalized before floor subtraction");
  const std::vector<double> &base = h.g2_subtracted.empty() ? h.g2 : h.g2_subtracted;
  const auto floor = far_region(h, base, far_ticks);
  if (floor.bins < 2)
    throw InvalidInput("correlation",
                       "no flat far-from-peak region: widen tau_range beyond the accidental threshold");
  std::vector<double> out(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) out[i] = base[i] - floor.mean;
  h.floor_offset += floor.mean;
  h.g2_subtracted = std::move(out);
  return h;
}

inline double peak_value(std::span<const double> v) {
  return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
}

// ---------------------------------------------------------------------------
// Histogram CSV
// ---------------------------------------------------------------------------

inline void write_histogram_csv(std::ostream &out, const G2Histogram &h) {
  out << "tau_ps,counts,g2,g2_subtracted\n";
  const double to_ps = h.tick_s / 1e-12;
  char buf[128];
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double g = h.g2.empty() ? 0.0 : h.g2[i];
    const double gs = h.g2_subtracted.empty() ? g : h.g2_subtracted[i];
    std::snprintf(buf, sizeof buf, "%.17g,%llu,%.17g,%.17g\n", static_cast<double>(h.tau_of_bin(i)) * to_ps,
                  static_cast<unsigned long long>(h.counts[i]), g, gs);
    out << buf;
  }
}

struct HistogramTable {
  std::vector<double> tau_ps, counts, g2, g2_subtracted;
};

inline HistogramTable read_histogram_csv(std::istream &in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("tau_ps,counts", 0) != 0)
    throw ConfigError("correlation", "not a histogram CSV (bad header)");
  HistogramTable t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    if (v.size() < 2) throw ConfigError("correlation", "histogram CSV row too short");
    t.tau_ps.push_back(v[0]);
    t.counts.push_back(v[1]);
    t.g2.push_back(v.size() > 2 ? v[2] : 0.0);
    t.g2_subtracted.push_back(v.size() > 3 ? v[3] : 0.0);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Gaussian fit
// ---------------------------------------------------------------------------

inline constexpr double kFwhmPerSigma = 2.3548200450309493;  // 2 sqrt(2 ln 2)

struct GaussianFit {
  double amplitude = 0;
  double center = 0;
  double sigma = 0;
  double offset = 0;
  double fwhm = 0;
  double residual_norm = 0;
  int evaluations = 0;
};

struct FitOptions {
  bool fit_offset = true;
  int max_evaluations = 2000;
};

namespace detail {

struct GaussianResidual {
  using Scalar = double;
  enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };
  using InputType = Eigen::VectorXd;
  using ValueType = Eigen::VectorXd;
  using JacobianType = Eigen::MatrixXd;

  std::span<const double> x, y;
  bool fit_offset;

  int inputs() const { return fit_offset ? 4 : 3; }
  int values() const { return static_cast<int>(x.size()); }

  int operator()(const Eigen::VectorXd &p, Eigen::VectorXd &f) const {
    const double off = fit_offset ? p[3] : 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double u = (x[i] - p[1]) / p[2];
      f[static_cast<Eigen::Index>(i)] = p[0] * std::exp(-0.5 * u * u) + off - y[i];
    }
    return 0;
  }

  int df(const Eigen::VectorXd &p, Eigen::MatrixXd &J) const {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const double u = (x[i] - p[1]) / p[2];
      const double e = std::exp(-0.5 * u * u);
      J(r, 0) = e;
      J(r, 1) = p[0] * e * u / p[2];
      J(r, 2) = p[0] * e * u * u / p[2];
      if (fit_offset) J(r, 3) = 1.0;
    }
    return 0;
  }
};

}  // namespace detail

/// Levenberg-Marquardt fit of A exp(-(x-mu)^2 / (2 s^2)) + offset to (x, y),
/// initialised from moments: the peak bin for mu, the background-subtracted
/// second moment for s.
inline GaussianFit fit_gaussian(std::span<const double> x, std::span<const double> y, const FitOptions &opt = {}) {
  require(x.size() == y.size(), "correlation", "fit inputs differ in length");
  const auto nonzero = std::count_if(y.begin(), y.end(), [](double v) { return v != 0.0; });
  if (nonzero < 5) throw InvalidInput("correlation", "Gaussian fit needs at least 5 nonzero bins");

  const auto peak = static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin());
  const double base = opt.fit_offset ? *std::min_element(y.begin(), y.end()) : 0.0;
  double wsum = 0, m1 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double w = std::max(0.0, y[i] - base);
    wsum += w;
    m1 += w * x[i];
  }
  const double mean = wsum > 0 ? m1 / wsum : x[peak];
  double m2 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) m2 += std::max(0.0, y[i] - base) * (x[i] - mean) * (x[i] - mean);
  double sigma0 = wsum > 0 ? std::sqrt(m2 / wsum) : 0.0;
  if (!(sigma0 > 0)) sigma0 = x.size() > 1 ? std::abs(x.back() - x.front()) / 4 : 1.0;

  detail::GaussianResidual fn{x, y, opt.fit_offset};
  Eigen::VectorXd p(fn.inputs());
  p[0] = y[peak] - base;
  p[1] = x[peak];
  p[2] = sigma0;
  if (opt.fit_offset) p[3] = base;

  Eigen::LevenbergMarquardt<detail::GaussianResidual> lm(fn);
  lm.parameters.maxfev = opt.max_evaluations;
  lm.parameters.xtol = 1e-12;
  lm.parameters.ftol = 1e-12;
  const auto status = lm.minimize(p);

  Eigen::VectorXd f(fn.values());
  fn(p, f);
  const double resid = f.norm();
  const int evals = static_cast<int>(lm.nfev);
  using Space = Eigen::LevenbergMarquardtSpace::Status;
  if (status == Space::ImproperInputParameters || status == Space::TooManyFunctionEvaluation ||
      !std::isfinite(resid) || !(std::abs(p[2]) > 0) || !p.allFinite())
    throw FitFailed("Gaussian fit did not converge", resid, evals);

  GaussianFit g;
  g.amplitude = p[0];
  g.center = p[1];
  g.sigma = std::abs(p[2]);
  g.offset = opt.fit_offset ? p[3] : 0.0;
  g.fwhm = kFwhmPerSigma * g.sigma;
  g.residual_norm = resid;
  g.evaluations = evals;
  return g;
}

struct SampleHistogram {
  std::vector<double> centers;
  std::vector<double> counts;
  double bin_width = 0;
};

/// Histogram of samples over [min, max] with Freedman-Diaconis bin width
/// (clamped to 10..200 bins).
inline SampleHistogram histogram_samples(std::span<const double> samples) {
  require(samples.size() >= 2, "correlation", "need at least two samples");
  std::vector<double> s(samples.begin(), samples.end());
  for (double v : s) require_finite(v, "correlation", "sample");
  std::sort(s.begin(), s.end());
  const double lo = s.front(), hi = s.back();
  require(hi > lo, "correlation", "samples have zero spread");
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(s.size() - 1);
    const auto i = static_cast<std::size_t>(pos);
    const double f = pos - static_cast<double>(i);
    return i + 1 < s.size() ? s[i] + f * (s[i + 1] - s[i]) : s[i];
  };
  const double iqr = quantile(0.75) - quantile(0.25);
  double width = 2 * iqr / std::cbrt(static_cast<double>(s.size()));
  auto bins = width > 0 ? static_cast<std::size_t>(std::ceil((hi - lo) / width)) : std::size_t{10};
  bins = std::clamp<std::size_t>(bins, 10, 200);
  width = (hi - lo) / static_cast<double>(bins);

  SampleHistogram h;
  h.bin_width = width;
  h.counts.assign(bins, 0.0);
  for (std::size_t i = 0; i < bins; ++i) h.centers.push_back(lo + (static_cast<double>(i) + 0.5) * width);
  for (double v : s) {
    auto b = static_cast<std::size_t>((v - lo) / width);
    h.counts[std::min(b, bins - 1)] += 1.0;
  }
  return h;
}

inline GaussianFit fit_gaussian_samples(std::span<const double> samples, const FitOptions &opt = {}) {
  const auto h = histogram_samples(samples);
  return fit_gaussian(h.centers, h.counts, opt);
}

}  // namespace qfso::correlation
