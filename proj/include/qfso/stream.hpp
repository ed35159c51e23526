#pragma once

// Photon timestamp streams (integer picoseconds) and their on-disk formats.
//
// Binary layout, little-endian:
//   bytes 0..3   magic "QFSO"
//   bytes 4..5   format version (uint16, currently 1)
//   bytes 6..7   channel id (uint16)
//   bytes 8..15  event count (uint64)
//   then count x uint64 timestamps in ps

#include <array>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "qfso/core.hpp"

namespace qfso {

enum class Channel : std::uint16_t { Signal = 0, Idler = 1, SignalOnly = 2 };

struct PhotonEventStream {
  std::vector<std::uint64_t> timestamps_ps;
  Channel channel = Channel::Signal;
  double duration_s = 0.0;

  std::size_t size() const { return timestamps_ps.size(); }
  double rate_hz() const { return duration_s > 0 ? static_cast<double>(size()) / duration_s : 0.0; }

  bool strictly_increasing() const {
    for (std::size_t i = 1; i < timestamps_ps.size(); ++i)
      if (timestamps_ps[i] <= timestamps_ps[i - 1]) return false;
    return true;
  }
};

inline constexpr std::uint16_t kStreamFormatVersion = 1;
inline constexpr std::array<char, 4> kStreamMagic{'Q', 'F', 'S', 'O'};

namespace detail {
template <typename T>
void put_le(std::ostream &out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}
template <typename T>
T get_le(std::istream &in) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw ConfigError("stream", "truncated timestamp file");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<T>(v);
}
}  // namespace detail

inline void write_stream_binary(std::ostream &out, const PhotonEventStream &s) {
  out.write(kStreamMagic.data(), 4);
  detail::put_le<std::uint16_t>(out, kStreamFormatVersion);
  detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(s.channel));
  detail::put_le<std::uint64_t>(out, s.timestamps_ps.size());
  std::vector<char> buf(8 * s.timestamps_ps.size());
  for (std::size_t i = 0; i < s.timestamps_ps.size(); ++i)
    for (std::size_t b = 0; b < 8; ++b) buf[8 * i + b] = static_cast<char>((s.timestamps_ps[i] >> (8 * b)) & 0xff);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

/// Reads a binary stream. The format carries no duration; callers set it.
inline PhotonEventStream read_stream_binary(std::istream &in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (!in || magic != kStreamMagic) throw ConfigError("stream", "not a QFSO timestamp file (bad magic)");
  const auto version = detail::get_le<std::uint16_t>(in);
  if (version != kStreamFormatVersion) throw ConfigError("stream", "unsupported timestamp file version");
  PhotonEventStream s;
  s.channel = static_cast<Channel>(detail::get_le<std::uint16_t>(in));
  const auto count = detail::get_le<std::uint64_t>(in);
  std::vector<unsigned char> buf(8 * count);
  in.read(reinterpret_cast<char *>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::uint64_t>(in.gcount()) != 8 * count) throw ConfigError("stream", "truncated timestamp file");
  s.timestamps_ps.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t v = 0;
    for (std::size_t b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(buf[8 * i + b]) << (8 * b);
    s.timestamps_ps[i] = v;
  }
  return s;
}

inline void save_stream(const std::string &path, const PhotonEventStream &s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("stream", "cannot write '" + path + "'");
  write_stream_binary(out, s);
}

inline PhotonEventStream load_stream(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("stream", "cannot open '" + path + "'");
  return read_stream_binary(in);
}

/// Debug export: header `timestamp_ps`, one value per line.
inline void write_stream_csv(std::ostream &out, const PhotonEventStream &s) {
  out << "timestamp_ps\n";
  for (auto t : s.timestamps_ps) out << t << '\n';
}

inline PhotonEventStream read_stream_csv(std::istream &in, Channel channel) {
  PhotonEventStream s;
  s.channel = channel;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      std::size_t used = 0;
      const auto v = std::stoull(line, &used);
      if (used != line.size() && line.find_first_not_of(" \r\t", used) != std::string::npos)
        throw std::invalid_argument("trailing");
      s.timestamps_ps.push_back(v);
    } catch (const std::exception &) {
      if (!first) throw ConfigError("stream", "malformed timestamp CSV line: " + line);
    }
    first = false;
  }
  return s;
}

}  // namespace qfso
