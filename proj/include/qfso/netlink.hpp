#pragma once

// Simulated wireless bridge between the receiver station and the reflector's
// hexapod. Stop-and-wait protocol: one outstanding MoveRequest, retransmitted
// on ack timeout, deduplicated by sequence number at the receiver.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <queue>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "qfso/core.hpp"

namespace qfso::netlink {

enum class MessageKind { MoveRequest, Ack, Telemetry };

inline std::string_view to_string(MessageKind k) {
  switch (k) {
    case MessageKind::MoveRequest: return "MoveRequest";
    case MessageKind::Ack: return "Ack";
    case MessageKind::Telemetry: return "Telemetry";
  }
  return "?";
}

inline std::optional<MessageKind> parse_kind(std::string_view s) {
  if (s == "MoveRequest") return MessageKind::MoveRequest;
  if (s == "Ack") return MessageKind::Ack;
  if (s == "Telemetry") return MessageKind::Telemetry;
  return std::nullopt;
}

/// `seq` identifies a move request; its retransmissions and its Ack carry the
/// same value. Fresh requests from one sender get strictly increasing seqs.
struct BridgeMessage {
  std::uint64_t seq = 0;
  MessageKind kind = MessageKind::MoveRequest;
  Vec2 payload;  // delta theta (urad) for MoveRequest
  double sent_at = 0.0;

  friend bool operator==(const BridgeMessage &, const BridgeMessage &) = default;
};

struct ChannelParams {
  double latency_min_s = 0.005;
  double latency_max_s = 0.050;
  double drop_prob = 0.01;
  double ack_timeout_s = 0.25;
  int max_retries = 10;

  void validate() const {
    require(std::isfinite(latency_min_s) && std::isfinite(latency_max_s) && latency_min_s >= 0 &&
                latency_min_s <= latency_max_s,
            "netlink", "latency bounds must satisfy 0 <= min <= max");
    require(drop_prob >= 0 && drop_prob <= 1, "netlink", "drop_prob must lie in [0,1]");
    require(ack_timeout_s > 0 && max_retries >= 0, "netlink", "bad timeout/retry settings");
  }
};

struct Delivery {
  BridgeMessage msg;
  double deliver_at = 0.0;
};

/// One trip across the channel: dropped with drop_prob, otherwise delivered
/// after a uniform latency. Always consumes two variates.
inline std::optional<Delivery> send(const BridgeMessage &msg, const ChannelParams &channel, Rng &rng) {
  channel.validate();
  require(msg.payload.finite() && std::isfinite(msg.sent_at), "netlink", "invalid message");
  const double u_drop = uniform01(rng);
  const double u_lat = uniform01(rng);
  if (u_drop < channel.drop_prob) return std::nullopt;
  const double latency = channel.latency_min_s + u_lat * (channel.latency_max_s - channel.latency_min_s);
  return Delivery{msg, msg.sent_at + latency};
}

enum class Direction { ToReflector, ToStation };

/// Scripted channel behaviour for tests. `Random` defers to the channel model.
enum class Fate { Random, Deliver, Drop, Duplicate };
using FaultScript = std::function<Fate(const BridgeMessage &, Direction)>;

enum class MoveStatus { Applied, Failed };

struct MoveOutcome {
  std::uint64_t seq = 0;
  MoveStatus status = MoveStatus::Failed;
  Vec2 delta;
  int transmissions = 0;
  double requested_at = 0.0;
  double resolved_at = 0.0;
};

struct BridgeStats {
  std::uint64_t transmissions = 0;
  std::uint64_t retransmissions = 0;
  std::uint64_t dropped = 0;
  std::uint64_t duplicates_suppressed = 0;
  std::uint64_t applied = 0;
  std::uint64_t failed = 0;
  std::uint64_t rejected_busy = 0;
};

/// Event-queue model of both bridge endpoints inside one simulated timeline.
class BridgeSim {
 public:
  using Apply = std::function<void(const Vec2 &)>;

  BridgeSim(ChannelParams params, Rng rng, FaultScript script = {})
      : params_(params), rng_(std::move(rng)), script_(std::move(script)) {
    params_.validate();
  }

  bool busy() const { return outstanding_.has_value(); }
  const BridgeStats &stats() const { return stats_; }
  const ChannelParams &params() const { return params_; }
  Rng &rng() { return rng_; }

  /// Starts a move request. Returns its seq, or nullopt if a request is
  /// still outstanding.
  std::optional<std::uint64_t> request_move(const Vec2 &delta, double now) {
    require(delta.finite(), "netlink", "non-finite move request");
    if (busy()) {
      ++stats_.rejected_busy;
      return std::nullopt;
    }
    outstanding_ = Outstanding{++next_seq_, delta, now, 0};
    transmit(now);
    return outstanding_->seq;
  }

  /// Time of the earliest pending event, if any.
  std::optional<double> next_event_time() const {
    if (queue_.empty()) return std::nullopt;
    return queue_.top().time;
  }

  /// Processes every event due at or before `now`, in time order. `apply` is
  /// invoked on the reflector side at most once per seq.
  void advance(double now, const Apply &apply) {
    while (!queue_.empty() && queue_.top().time <= now) {
      Event ev = queue_.top();
      queue_.pop();
      switch (ev.type) {
        case EventType::ArriveAtReflector: on_request(ev, apply); break;
        case EventType::ArriveAtStation: on_ack(ev); break;
        case EventType::AckTimeout: on_timeout(ev); break;
      }
    }
  }

  /// Outcomes resolved since the last call.
  std::vector<MoveOutcome> take_outcomes() { return std::exchange(outcomes_, {}); }

 private:
  enum class EventType { ArriveAtReflector, ArriveAtStation, AckTimeout };
  struct Event {
    double time;
    std::uint64_t order;
    EventType type;
    BridgeMessage msg;
    int attempt;
  };
  struct Later {
    bool operator()(const Event &a, const Event &b) const {
      return a.time != b.time ? a.time > b.time : a.order > b.order;
    }
  };
  struct Outstanding {
    std::uint64_t seq;
    Vec2 delta;
    double requested_at;
    int transmissions;
  };

  void push(double time, EventType type, const BridgeMessage &msg, int attempt = 0) {
    queue_.push(Event{time, order_++, type, msg, attempt});
  }

  void route(const BridgeMessage &msg, Direction dir) {
    const EventType arrival = dir == Direction::ToReflector ? EventType::ArriveAtReflector : EventType::ArriveAtStation;
    const Fate fate = script_ ? script_(msg, dir) : Fate::Random;
    auto d = send(msg, params_, rng_);  // variates drawn regardless of script
    switch (fate) {
      case Fate::Random:
        if (d) push(d->deliver_at, arrival, msg);
        else ++stats_.dropped;
        break;
      case Fate::Drop: ++stats_.dropped; break;
      case Fate::Deliver: push(msg.sent_at + params_.latency_min_s, arrival, msg); break;
      case Fate::Duplicate:
        push(msg.sent_at + params_.latency_min_s, arrival, msg);
        push(msg.sent_at + params_.latency_max_s, arrival, msg);
        break;
    }
  }

  void transmit(double now) {
    auto &o = *outstanding_;
    ++o.transmissions;
    ++stats_.transmissions;
    if (o.transmissions > 1) ++stats_.retransmissions;
    route(BridgeMessage{o.seq, MessageKind::MoveRequest, o.delta, now}, Direction::ToReflector);
    push(now + params_.ack_timeout_s, EventType::AckTimeout, BridgeMessage{o.seq, MessageKind::MoveRequest, {}, now},
         o.transmissions);
  }

  void on_request(const Event &ev, const Apply &apply) {
    if (ev.msg.kind != MessageKind::MoveRequest) return;
    if (ev.msg.seq > last_applied_seq_) {
      last_applied_seq_ = ev.msg.seq;
      ++stats_.applied;
      if (apply) apply(ev.msg.payload);
    } else {
      ++stats_.duplicates_suppressed;
    }
    route(BridgeMessage{ev.msg.seq, MessageKind::Ack, {}, ev.time}, Direction::ToStation);
  }

  void on_ack(const Event &ev) {
    if (!outstanding_ || ev.msg.seq != outstanding_->seq) return;  // stale
    const auto &o = *outstanding_;
    outcomes_.push_back(MoveOutcome{o.seq, MoveStatus::Applied, o.delta, o.transmissions, o.requested_at, ev.time});
    outstanding_.reset();
  }

  void on_timeout(const Event &ev) {
    if (!outstanding_ || ev.msg.seq != outstanding_->seq || ev.attempt != outstanding_->transmissions) return;
    if (outstanding_->transmissions <= params_.max_retries) {
      transmit(ev.time);
      return;
    }
    const auto &o = *outstanding_;
    ++stats_.failed;
    outcomes_.push_back(MoveOutcome{o.seq, MoveStatus::Failed, o.delta, o.transmissions, o.requested_at, ev.time});
    outstanding_.reset();
  }

  ChannelParams params_;
  Rng rng_;
  FaultScript script_;
  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  std::uint64_t order_ = 0;
  std::uint64_t next_seq_ = 0;
  std::uint64_t last_applied_seq_ = 0;
  std::optional<Outstanding> outstanding_;
  std::vector<MoveOutcome> outcomes_;
  BridgeStats stats_;
};

/// Runs one request to completion on a private event queue starting at
/// `start_time`. `apply` is the reflector-side actuation.
inline MoveOutcome reliable_move(const Vec2 &delta, const ChannelParams &channel, Rng &rng, double start_time,
                                 const BridgeSim::Apply &apply, FaultScript script = {}) {
  BridgeSim sim(channel, std::move(rng), std::move(script));
  sim.request_move(delta, start_time);
  std::optional<MoveOutcome> result;
  while (!result) {
    auto t = sim.next_event_time();
    if (!t) throw Error("netlink", "event queue drained without an outcome");
    sim.advance(*t, apply);
    for (auto &o : sim.take_outcomes()) result = o;
  }
  rng = std::move(sim.rng());
  return *result;
}

}  // namespace qfso::netlink
