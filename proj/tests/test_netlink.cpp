#include <gtest/gtest.h>

#include <atomic>
#include <map>
#include <sstream>

#include "qfso/control.hpp"
#include "qfso/netlink.hpp"
#include "qfso/netlink_live.hpp"

using namespace qfso;
using namespace qfso::netlink;

namespace {
ChannelParams lossless_instant() {
  ChannelParams c;
  c.latency_min_s = c.latency_max_s = 0;
  c.drop_prob = 0;
  return c;
}
}  // namespace

TEST(Send, LosslessZeroLatencyDeliversSameTick) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const BridgeMessage m{static_cast<std::uint64_t>(i + 1), MessageKind::MoveRequest, {1, 2}, 3.5};
    const auto d = send(m, lossless_instant(), rng);
    ASSERT_TRUE(d.has_value());
    EXPECT_EQ(d->deliver_at, 3.5);
    EXPECT_EQ(d->msg, m);
  }
}

TEST(Send, AlwaysDropNeverDelivers) {
  ChannelParams c;
  c.drop_prob = 1.0;
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) EXPECT_FALSE(send({1, MessageKind::Ack, {}, 0}, c, rng).has_value());
}

TEST(Send, LatencyBoundsRespected) {
  ChannelParams c;
  c.drop_prob = 0.2;
  Rng rng(3);
  int delivered = 0;
  for (int i = 0; i < 100000; ++i) {
    const auto d = send({1, MessageKind::MoveRequest, {}, 10.0}, c, rng);
    if (!d) continue;
    ++delivered;
    ASSERT_GE(d->deliver_at - 10.0, c.latency_min_s - 1e-12);
    ASSERT_LE(d->deliver_at - 10.0, c.latency_max_s + 1e-12);
  }
  // Binomial 3 sigma around 80%.
  EXPECT_NEAR(delivered, 80000, 3 * std::sqrt(100000 * 0.2 * 0.8));
}

TEST(Send, RejectsInvalid) {
  Rng rng(1);
  ChannelParams c;
  c.latency_min_s = 0.1;
  c.latency_max_s = 0.05;
  EXPECT_THROW(send({1, MessageKind::Ack, {}, 0}, c, rng), InvalidInput);
  EXPECT_THROW(send({1, MessageKind::MoveRequest, {NAN, 0}, 0}, ChannelParams{}, rng), InvalidInput);
}

TEST(ReliableMove, LosslessAppliedAfterOneRoundTrip) {
  Rng rng(4);
  int applies = 0;
  const auto o = reliable_move({1, 0}, ChannelParams{.drop_prob = 0}, rng, 0.0, [&](const Vec2 &) { ++applies; });
  EXPECT_EQ(o.status, MoveStatus::Applied);
  EXPECT_EQ(o.transmissions, 1);
  EXPECT_EQ(applies, 1);
  EXPECT_LE(o.resolved_at, 2 * ChannelParams{}.latency_max_s + 1e-12);
}

TEST(ReliableMove, FirstTransmissionDropped) {
  Rng rng(5);
  int applies = 0;
  int requests_seen = 0;
  auto script = [&](const BridgeMessage &m, Direction d) {
    if (d == Direction::ToReflector && m.kind == MessageKind::MoveRequest && requests_seen++ == 0) return Fate::Drop;
    return Fate::Deliver;
  };
  const auto o = reliable_move({1, 0}, ChannelParams{}, rng, 0.0, [&](const Vec2 &) { ++applies; }, script);
  EXPECT_EQ(o.status, MoveStatus::Applied);
  EXPECT_EQ(o.transmissions, 2);
  EXPECT_EQ(applies, 1);
}

TEST(ReliableMove, LostAckRetransmitIsSuppressed) {
  ChannelParams c;
  BridgeSim sim(c, Rng(6), [n = 0](const BridgeMessage &m, Direction d) mutable {
    if (d == Direction::ToStation && m.kind == MessageKind::Ack && n++ == 0) return Fate::Drop;
    return Fate::Deliver;
  });
  int applies = 0;
  sim.request_move({2, 0}, 0.0);
  std::vector<MoveOutcome> out;
  while (out.empty()) {
    auto t = sim.next_event_time();
    ASSERT_TRUE(t.has_value());
    sim.advance(*t, [&](const Vec2 &) { ++applies; });
    for (auto &o : sim.take_outcomes()) out.push_back(o);
  }
  EXPECT_EQ(out[0].status, MoveStatus::Applied);
  EXPECT_EQ(out[0].transmissions, 2);
  EXPECT_EQ(applies, 1);
  EXPECT_EQ(sim.stats().duplicates_suppressed, 1u);
}

TEST(ReliableMove, DuplicatedDeliveryAppliedOnce) {
  Rng rng(7);
  int applies = 0;
  auto script = [](const BridgeMessage &, Direction) { return Fate::Duplicate; };
  const auto o = reliable_move({1, 1}, ChannelParams{}, rng, 0.0, [&](const Vec2 &) { ++applies; }, script);
  EXPECT_EQ(o.status, MoveStatus::Applied);
  EXPECT_EQ(applies, 1);
}

TEST(ReliableMove, AlwaysDropFailsAfterRetries) {
  Rng rng(8);
  ChannelParams c;
  c.max_retries = 4;
  int applies = 0;
  auto script = [](const BridgeMessage &, Direction) { return Fate::Drop; };
  const auto o = reliable_move({1, 1}, c, rng, 0.0, [&](const Vec2 &) { ++applies; }, script);
  EXPECT_EQ(o.status, MoveStatus::Failed);
  EXPECT_EQ(o.transmissions, 5);
  EXPECT_EQ(applies, 0);
}

TEST(Bridge, AtMostOnceUnderRandomScripts) {
  Rng fates(99);
  for (int trial = 0; trial < 200; ++trial) {
    ChannelParams c;
    c.max_retries = 6;
    auto script = [&](const BridgeMessage &, Direction) {
      return static_cast<Fate>(std::uniform_int_distribution<int>(0, 3)(fates));
    };
    BridgeSim sim(c, make_stream(static_cast<std::uint64_t>(trial), "test.bridge"), script);
    std::map<double, int> applied_by_delta;
    double now = 0;
    int resolved = 0;
    for (int k = 1; k <= 20; ++k) {
      while (!sim.request_move({static_cast<double>(k), 0}, now)) {
        auto t = sim.next_event_time();
        ASSERT_TRUE(t.has_value());
        now = *t;
        sim.advance(now, [&](const Vec2 &d) { ++applied_by_delta[d.x]; });
        resolved += static_cast<int>(sim.take_outcomes().size());
      }
    }
    while (auto t = sim.next_event_time()) {
      sim.advance(*t, [&](const Vec2 &d) { ++applied_by_delta[d.x]; });
      resolved += static_cast<int>(sim.take_outcomes().size());
    }
    EXPECT_EQ(resolved, 20);
    for (const auto &[delta, n] : applied_by_delta) ASSERT_LE(n, 1) << "delta " << delta;
  }
}

TEST(Bridge, GeometricRetryDeliveryProbability) {
  // P(request reaches the reflector at least once in 11 tries) >= 1 - 0.3^11.
  ChannelParams c;
  c.drop_prob = 0.3;
  c.max_retries = 10;
  Rng rng = make_stream(1, "test.retry");
  const int n = 20000;
  int applied = 0;
  for (int i = 0; i < n; ++i) {
    bool hit = false;
    reliable_move({1, 0}, c, rng, 0.0, [&](const Vec2 &) { hit = true; });
    applied += hit;
  }
  const double p = 1 - std::pow(0.3, 11);
  EXPECT_GE(applied, std::floor(n * p - 3 * std::sqrt(n * p * (1 - p))));
}

TEST(Bridge, EventualDeliveryWithManyRetries) {
  ChannelParams c;
  c.drop_prob = 0.3;
  c.max_retries = 50;
  BridgeSim sim(c, make_stream(2, "test.retry"));
  int failed = 0, applied = 0;
  double now = 0;
  for (int k = 0; k < 10000; ++k) {
    sim.request_move({0.1, 0}, now);
    while (sim.busy()) {
      now = *sim.next_event_time();
      sim.advance(now, [&](const Vec2 &) { ++applied; });
    }
    for (const auto &o : sim.take_outcomes()) failed += o.status == MoveStatus::Failed;
  }
  EXPECT_EQ(failed, 0);
  EXPECT_EQ(applied, 10000);
  EXPECT_EQ(sim.stats().failed, 0u);
}

TEST(Bridge, BusyRejectsSecondRequest) {
  BridgeSim sim(ChannelParams{}, Rng(1));
  EXPECT_TRUE(sim.request_move({1, 0}, 0).has_value());
  EXPECT_FALSE(sim.request_move({1, 0}, 0).has_value());
  EXPECT_EQ(sim.stats().rejected_busy, 1u);
}

TEST(Bridge, LosslessAblationMatchesDirectCalls) {
  control::Disturbances d;
  d.wander = turbulence::WanderModel::calibrated_default();
  d.temperature.samples = {{0, 12}, {24000, 20}};
  control::LoopConfig a;
  a.duration_s = 25;
  a.coarse.deadband_um = 0;
  a.coarse.cadence_s = 5;
  a.coarse.window_s = 2;
  a.channel = lossless_instant();
  control::LoopConfig b = a;
  b.use_netlink = false;
  const auto la = control::run_closed_loop(control::PlantConfig{}, d, a, control::LoopStreams::from_seed(3));
  const auto lb = control::run_closed_loop(control::PlantConfig{}, d, b, control::LoopStreams::from_seed(3));
  ASSERT_GE(la.coarse_events.size(), 4u);
  std::ostringstream ta, tb, ca, cb;
  control::write_trace_csv(ta, la.rows);
  control::write_trace_csv(tb, lb.rows);
  control::write_coarse_csv(ca, la.coarse_events);
  control::write_coarse_csv(cb, lb.coarse_events);
  EXPECT_EQ(ta.str(), tb.str());
  EXPECT_EQ(ca.str(), cb.str());
}

TEST(Wire, EncodeDecodeRoundTrip) {
  const BridgeMessage m{42, MessageKind::MoveRequest, {-1.25, 0.5}, 12.75};
  const auto line = encode_line(m);
  EXPECT_EQ(line.back(), '\n');
  for (const char *field : {"\"seq\"", "\"kind\"", "\"dx_urad\"", "\"dy_urad\"", "\"sent_at_s\""})
    EXPECT_NE(line.find(field), std::string::npos) << field;
  EXPECT_EQ(decode_line(line.substr(0, line.size() - 1)), m);
  EXPECT_THROW(decode_line("{\"seq\": 1}"), InvalidInput);
  EXPECT_THROW(decode_line("not json"), InvalidInput);
  EXPECT_THROW(decode_line(R"({"seq":1,"kind":"Bogus","dx_urad":0,"dy_urad":0,"sent_at_s":0})"), InvalidInput);
}

namespace {
ChannelParams live_params() {
  ChannelParams c;
  c.drop_prob = 0;
  c.ack_timeout_s = 0.05;
  c.max_retries = 5;
  return c;
}
}  // namespace

TEST(Live, LosslessMoveOverSocketPair) {
  auto [a, b] = make_socket_pair();
  std::atomic<int> applies{0};
  LiveReflector reflector(std::move(b), [&](const Vec2 &) { ++applies; }, live_params(), Rng(1));
  LiveStation station(std::move(a), live_params(), Rng(2));
  for (int i = 0; i < 5; ++i) {
    const auto o = station.move({1.0, -1.0});
    EXPECT_EQ(o.status, MoveStatus::Applied);
    EXPECT_EQ(o.transmissions, 1);
  }
  station.close();
  reflector.join();
  EXPECT_EQ(applies.load(), 5);
}

TEST(Live, DroppedRequestIsRetransmitted) {
  auto [a, b] = make_socket_pair();
  std::atomic<int> applies{0};
  LiveReflector reflector(std::move(b), [&](const Vec2 &) { ++applies; }, live_params(), Rng(1));
  int sent = 0;
  LiveStation station(std::move(a), live_params(), Rng(2),
                      [&](const BridgeMessage &, Direction) { return sent++ == 0 ? Fate::Drop : Fate::Deliver; });
  const auto o = station.move({0.5, 0.0});
  station.close();
  reflector.join();
  EXPECT_EQ(o.status, MoveStatus::Applied);
  EXPECT_EQ(o.transmissions, 2);
  EXPECT_EQ(applies.load(), 1);
}

TEST(Live, LostAckDuplicateSuppressed) {
  auto [a, b] = make_socket_pair();
  std::atomic<int> applies{0};
  int acks = 0;
  LiveReflector reflector(std::move(b), [&](const Vec2 &) { ++applies; }, live_params(), Rng(1),
                          [&](const BridgeMessage &, Direction) { return acks++ == 0 ? Fate::Drop : Fate::Deliver; });
  LiveStation station(std::move(a), live_params(), Rng(2));
  const auto o = station.move({0.5, 0.0});
  station.close();
  reflector.join();
  EXPECT_EQ(o.status, MoveStatus::Applied);
  EXPECT_EQ(o.transmissions, 2);
  EXPECT_EQ(applies.load(), 1);
  EXPECT_EQ(reflector.duplicates_suppressed(), 1u);
}
