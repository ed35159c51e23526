#pragma once

// The bridge protocol over a real transport: one JSON object per line on a
// local stream socket pair. The station and the reflector each run on their
// own thread and share nothing but the socket.

#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <optional>
#include <string>
#include <thread>
#include <utility>

#include <json.hpp>

#include "qfso/netlink.hpp"

namespace qfso::netlink {

inline std::string encode_line(const BridgeMessage &m) {
  nlohmann::json j;
  j["seq"] = m.seq;
  j["kind"] = std::string(to_string(m.kind));
  j["dx_urad"] = m.payload.x;
  j["dy_urad"] = m.payload.y;
  j["sent_at_s"] = m.sent_at;
  return j.dump() + "\n";
}

inline BridgeMessage decode_line(const std::string &line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception &e) {
    throw InvalidInput("netlink", std::string("malformed wire message: ") + e.what());
  }
  BridgeMessage m;
  try {
    m.seq = j.at("seq").get<std::uint64_t>();
    auto kind = parse_kind(j.at("kind").get<std::string>());
    if (!kind) throw InvalidInput("netlink", "unknown message kind");
    m.kind = *kind;
    m.payload = {j.at("dx_urad").get<double>(), j.at("dy_urad").get<double>()};
    m.sent_at = j.at("sent_at_s").get<double>();
  } catch (const nlohmann::json::exception &e) {
    throw InvalidInput("netlink", std::string("wire message missing field: ") + e.what());
  }
  return m;
}

/// Line-oriented wrapper over one end of a stream socket. Owns the fd.
class LineSocket {
 public:
  explicit LineSocket(int fd = -1) : fd_(fd) {}
  LineSocket(LineSocket &&o) noexcept : fd_(std::exchange(o.fd_, -1)), buffer_(std::move(o.buffer_)) {}
  LineSocket &operator=(LineSocket &&o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
      buffer_ = std::move(o.buffer_);
    }
    return *this;
  }
  LineSocket(const LineSocket &) = delete;
  LineSocket &operator=(const LineSocket &) = delete;
  ~LineSocket() { close(); }

  void close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

  void send_line(const std::string &line) {
    std::size_t off = 0;
    while (off < line.size()) {
      const auto n = ::send(fd_, line.data() + off, line.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error("netlink", std::string("socket send failed: ") + std::strerror(errno));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  /// Next complete line, or nullopt on timeout or when the peer has closed.
  std::optional<std::string> recv_line(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
      if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return line;
      }
      if (closed_) return std::nullopt;
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) return std::nullopt;
      pollfd p{fd_, POLLIN, 0};
      const int r = ::poll(&p, 1, static_cast<int>(left.count()));
      if (r < 0 && errno == EINTR) continue;
      if (r <= 0) return std::nullopt;
      char chunk[512];
      const auto n = ::recv(fd_, chunk, sizeof chunk, 0);
      if (n <= 0) {
        closed_ = true;
        continue;
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  bool peer_closed() const { return closed_ && buffer_.find('\n') == std::string::npos; }

 private:
  int fd_;
  std::string buffer_;
  bool closed_ = false;
};

inline std::pair<LineSocket, LineSocket> make_socket_pair() {
  int fds[2];
  if (::socketpair(AF_UNIX, SOCK_STREAM, 0, fds) != 0)
    throw Error("netlink", std::string("socketpair failed: ") + std::strerror(errno));
  return {LineSocket(fds[0]), LineSocket(fds[1])};
}

/// Reflector endpoint: applies each MoveRequest seq at most once and acks
/// every copy it receives. Runs until the station closes its end.
class LiveReflector {
 public:
  LiveReflector(LineSocket socket, BridgeSim::Apply apply, ChannelParams channel, Rng rng, FaultScript script = {})
      : socket_(std::move(socket)),
        apply_(std::move(apply)),
        channel_(channel),
        rng_(std::move(rng)),
        script_(std::move(script)) {
    thread_ = std::thread([this] { run(); });
  }
  LiveReflector(const LiveReflector &) = delete;
  LiveReflector &operator=(const LiveReflector &) = delete;
  ~LiveReflector() { join(); }

  void join() {
    if (thread_.joinable()) thread_.join();
  }

  std::uint64_t applied() const { return applied_.load(); }
  std::uint64_t duplicates_suppressed() const { return duplicates_.load(); }

 private:
  void run() {
    std::uint64_t last_applied = 0;
    for (;;) {
      auto line = socket_.recv_line(std::chrono::milliseconds(50));
      if (!line) {
        if (socket_.peer_closed()) return;
        continue;
      }
      const auto msg = decode_line(*line);
      if (msg.kind != MessageKind::MoveRequest) continue;
      if (msg.seq > last_applied) {
        last_applied = msg.seq;
        ++applied_;
        if (apply_) apply_(msg.payload);
      } else {
        ++duplicates_;
      }
      const BridgeMessage ack{msg.seq, MessageKind::Ack, {}, msg.sent_at};
      const Fate fate = script_ ? script_(ack, Direction::ToStation) : Fate::Random;
      const bool delivered = send(ack, channel_, rng_).has_value();
      if (fate == Fate::Drop || (fate == Fate::Random && !delivered)) continue;
      socket_.send_line(encode_line(ack));
      if (fate == Fate::Duplicate) socket_.send_line(encode_line(ack));
    }
  }

  LineSocket socket_;
  BridgeSim::Apply apply_;
  ChannelParams channel_;
  Rng rng_;
  FaultScript script_;
  std::atomic<std::uint64_t> applied_{0};
  std::atomic<std::uint64_t> duplicates_{0};
  std::thread thread_;
};

/// Station endpoint: stop-and-wait sender with wall-clock ack timeouts. Loss
/// is emulated before writing to the socket; latency comes from the transport.
class LiveStation {
 public:
  LiveStation(LineSocket socket, ChannelParams channel, Rng rng, FaultScript script = {})
      : socket_(std::move(socket)), channel_(channel), rng_(std::move(rng)), script_(std::move(script)) {
    channel_.validate();
  }

  MoveOutcome move(const Vec2 &delta) {
    require(delta.finite(), "netlink", "non-finite move request");
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
    MoveOutcome out{++next_seq_, MoveStatus::Failed, delta, 0, 0.0, 0.0};
    const auto timeout = std::chrono::milliseconds(static_cast<long>(channel_.ack_timeout_s * 1e3));
    while (out.transmissions <= channel_.max_retries) {
      ++out.transmissions;
      const BridgeMessage req{out.seq, MessageKind::MoveRequest, delta, elapsed()};
      const Fate fate = script_ ? script_(req, Direction::ToReflector) : Fate::Random;
      const bool delivered = send(req, channel_, rng_).has_value();
      if (fate == Fate::Deliver || fate == Fate::Duplicate || (fate == Fate::Random && delivered)) {
        socket_.send_line(encode_line(req));
        if (fate == Fate::Duplicate) socket_.send_line(encode_line(req));
      }
      const auto deadline = std::chrono::steady_clock::now() + timeout;
      for (;;) {
        const auto left =
            std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) break;
        auto line = socket_.recv_line(left);
        if (!line) break;
        const auto ack = decode_line(*line);
        if (ack.kind == MessageKind::Ack && ack.seq == out.seq) {
          out.status = MoveStatus::Applied;
          out.resolved_at = elapsed();
          return out;
        }
      }
    }
    out.resolved_at = elapsed();
    return out;
  }

  /// Signals end of session to the reflector.
  void close() { socket_.close(); }

 private:
  LineSocket socket_;
  ChannelParams channel_;
  Rng rng_;
  FaultScript script_;
  std::uint64_t next_seq_ = 0;
};

}  // namespace qfso::netlink
