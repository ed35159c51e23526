#pragma once

// Shared vocabulary for the link simulator: 2D vectors, the error hierarchy,
// and deterministic per-module random streams.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace qfso {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  constexpr Vec2 &operator+=(const Vec2 &o) {
    x += o.x;
    y += o.y;
    return *this;
  }
  constexpr Vec2 &operator-=(const Vec2 &o) {
    x -= o.x;
    y -= o.y;
    return *this;
  }
  friend constexpr Vec2 operator+(Vec2 a, const Vec2 &b) { return a += b; }
  friend constexpr Vec2 operator-(Vec2 a, const Vec2 &b) { return a -= b; }
  friend constexpr Vec2 operator*(double s, const Vec2 &v) { return {s * v.x, s * v.y}; }
  friend constexpr Vec2 operator*(const Vec2 &v, double s) { return {s * v.x, s * v.y}; }
  friend constexpr bool operator==(const Vec2 &, const Vec2 &) = default;

  double norm() const { return std::hypot(x, y); }
  bool finite() const { return std::isfinite(x) && std::isfinite(y); }
};

/// Base of every error raised by the library. `module()` names the owning
/// subsystem so the harness can tag failures without string parsing.
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string &what)
      : std::runtime_error(module + ": " + what), module_(std::move(module)) {}
  const std::string &module() const noexcept { return module_; }

 private:
  std::string module_;
};

/// Rejected input: non-finite values, violated preconditions.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Bad or incomplete configuration (including empty profiles, unknown keys).
class ConfigError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const char *module, const std::string &what) {
  if (!cond) throw InvalidInput(module, what);
}

inline void require_finite(double v, const char *module, const char *name) {
  if (!std::isfinite(v)) throw InvalidInput(module, std::string("non-finite ") + name);
}

// ---------------------------------------------------------------------------
// Random streams
//
// Every stochastic component draws from its own named stream. A stream's seed
// is splitmix64(master ^ fnv1a(name)), so adding a stream never perturbs the
// realizations of the others. The engine is std::mt19937_64.
//
// Streams used by the simulator:
//   turbulence.wander, turbulence.scintillation, plant.chromatic,
//   plant.psd_noise, netlink.channel, photonics.pairs,
//   photonics.signal_singles, photonics.idler_singles,
//   photonics.signal_channel, photonics.idler_channel
// ---------------------------------------------------------------------------

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

using Rng = std::mt19937_64;

inline Rng make_stream(std::uint64_t master_seed, std::string_view name) {
  return Rng(splitmix64(master_seed ^ fnv1a64(name)));
}

inline double standard_normal(Rng &rng) {
  // One fresh distribution per draw keeps the stream position a pure
  // function of the number of calls (no cached second variate).
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

inline double uniform01(Rng &rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

}  // namespace qfso
