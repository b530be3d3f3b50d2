#include "sop/bus.hpp"

#include <gtest/gtest.h>

#include <thread>

namespace sop {
namespace {

std::vector<uint8_t> bytes_of(const std::string& s) {
  return std::vector<uint8_t>(s.begin(), s.end());
}

TEST(Publish, AssignsSequentialSeqs) {
  Broker broker;
  EXPECT_EQ(broker.publish("t", bytes_of("a"), "p"), 1u);
  EXPECT_EQ(broker.publish("t", bytes_of("b"), "p"), 2u);
  EXPECT_EQ(broker.publish("t", bytes_of("c"), "p"), 3u);
}

TEST(Publish, EmptyPayloadIsValid) {
  Broker broker;
  EXPECT_EQ(broker.publish("t", {}, "p"), 1u);
  uint64_t sub = broker.subscribe("t", SubMode::ConsumerGroup, "g");
  auto env = broker.poll(sub);
  ASSERT_TRUE(env.has_value());
  EXPECT_TRUE(env->payload.empty());
}

TEST(Publish, OversizedPayloadRejected) {
  Broker::Options opts;
  opts.max_payload_bytes = 8;
  Broker broker(opts);
  EXPECT_THROW(broker.publish("t", std::vector<uint8_t>(9, 0), "p"),
               std::invalid_argument);
}

TEST(ConsumerGroup, AckedMessagesAreNotRedelivered) {
  SimClock clock;
  Broker broker(Broker::Options{}, clock.fn());
  uint64_t sub = broker.subscribe("t", SubMode::ConsumerGroup, "g");
  broker.publish("t", bytes_of("m"), "p");
  auto env = broker.poll(sub);
  ASSERT_TRUE(env);
  broker.ack(sub, env->seq);
  clock.advance_ms(10000);
  EXPECT_FALSE(broker.poll(sub).has_value());
}

TEST(ConsumerGroup, UnackedMessageRedeliveredToAnotherMember) {
  SimClock clock;
  Broker broker(Broker::Options{}, clock.fn());
  uint64_t crashing = broker.subscribe("t", SubMode::ConsumerGroup, "g");
  uint64_t survivor = broker.subscribe("t", SubMode::ConsumerGroup, "g");
  broker.publish("t", bytes_of("m"), "p");

  auto first = broker.poll(crashing);
  ASSERT_TRUE(first);  // delivered, member crashes before ack
  EXPECT_FALSE(broker.poll(survivor).has_value());

  clock.advance_ms(broker.redelivery_timeout_ms() + 1);
  auto second = broker.poll(survivor);
  ASSERT_TRUE(second);
  EXPECT_EQ(second->seq, first->seq);
  broker.ack(survivor, second->seq);
  clock.advance_ms(10000);
  EXPECT_FALSE(broker.poll(survivor).has_value());
  EXPECT_FALSE(broker.poll(crashing).has_value());
}

TEST(ConsumerGroup, NackMakesMessageImmediatelyEligible) {
  SimClock clock;
  Broker broker(Broker::Options{}, clock.fn());
  uint64_t sub = broker.subscribe("t", SubMode::ConsumerGroup, "g");
  broker.publish("t", bytes_of("m"), "p");
  auto env = broker.poll(sub);
  ASSERT_TRUE(env);
  broker.nack(sub, env->seq);
  auto again = broker.poll(sub);
  ASSERT_TRUE(again);
  EXPECT_EQ(again->seq, env->seq);
}

TEST(ConsumerGroup, AckOfUnknownSeqIgnored) {
  Broker broker;
  uint64_t sub = broker.subscribe("t", SubMode::ConsumerGroup, "g");
  broker.ack(sub, 999);  // only warns
  broker.publish("t", bytes_of("m"), "p");
  EXPECT_TRUE(broker.poll(sub).has_value());
}

TEST(ConsumerGroup, PerProducerOrderPreservedForSingleConsumer) {
  Broker broker;
  for (int i = 0; i < 50; ++i)
    broker.publish("t", bytes_of("m" + std::to_string(i)), "p");
  uint64_t sub = broker.subscribe("t", SubMode::ConsumerGroup, "g");
  uint64_t last_producer_seq = 0;
  while (auto env = broker.poll(sub)) {
    EXPECT_EQ(env->producer_seq, last_producer_seq + 1);
    last_producer_seq = env->producer_seq;
    broker.ack(sub, env->seq);
  }
  EXPECT_EQ(last_producer_seq, 50u);
}

// 4 producers x 1000 concurrent publishes: a single-member group sees all
// 4000 exactly once (dedupe key: producer id + gapless producer seq).
TEST(ConsumerGroup, ConcurrentProducersAllDelivered) {
  Broker broker;
  constexpr int kProducers = 4;
  constexpr int kMessages = 1000;
  std::vector<std::thread> producers;
  for (int p = 0; p < kProducers; ++p) {
    producers.emplace_back([&broker, p] {
      for (int i = 0; i < kMessages; ++i)
        broker.publish("t", bytes_of(std::to_string(i)), "p" + std::to_string(p));
    });
  }
  for (auto& t : producers) t.join();

  uint64_t sub = broker.subscribe("t", SubMode::ConsumerGroup, "g");
  std::unordered_map<std::string, uint64_t> last_seq_by_producer;
  std::unordered_map<std::string, int> counts;
  while (auto env = broker.poll(sub)) {
    EXPECT_EQ(env->producer_seq, last_seq_by_producer[env->producer_id] + 1)
        << "gap or duplicate for " << env->producer_id;
    last_seq_by_producer[env->producer_id] = env->producer_seq;
    ++counts[env->producer_id];
    broker.ack(sub, env->seq);
  }
  ASSERT_EQ(counts.size(), static_cast<size_t>(kProducers));
  for (const auto& [producer, count] : counts) EXPECT_EQ(count, kMessages);
}

// No envelope may be acked by two members: with competing pollers, total
// successful deliveries equals publishes when every delivery is acked.
TEST(ConsumerGroup, ExclusiveDeliveryAcrossMembers) {
  Broker broker;
  constexpr int kTotal = 500;
  for (int i = 0; i < kTotal; ++i) broker.publish("t", bytes_of("x"), "p");
  uint64_t a = broker.subscribe("t", SubMode::ConsumerGroup, "g");
  uint64_t b = broker.subscribe("t", SubMode::ConsumerGroup, "g");

  std::atomic<int> delivered{0};
  std::unordered_set<uint64_t> seen;
  std::mutex seen_mu;
  auto drain = [&](uint64_t sub) {
    while (auto env = broker.poll(sub)) {
      {
        std::lock_guard<std::mutex> lock(seen_mu);
        EXPECT_TRUE(seen.insert(env->seq).second) << "seq delivered twice";
      }
      broker.ack(sub, env->seq);
      ++delivered;
    }
  };
  std::thread t1(drain, a), t2(drain, b);
  t1.join();
  t2.join();
  EXPECT_EQ(delivered.load(), kTotal);
}

TEST(Fanout, EverySubscriberGetsEveryMessage) {
  Broker broker;
  std::vector<uint64_t> subs;
  for (int i = 0; i < 4; ++i) subs.push_back(broker.subscribe("t", SubMode::Fanout));
  broker.publish("t", bytes_of("m"), "p");
  for (uint64_t sub : subs) {
    auto env = broker.poll(sub);
    ASSERT_TRUE(env);
    EXPECT_EQ(env->payload, bytes_of("m"));
    EXPECT_FALSE(broker.poll(sub).has_value());
  }
}

TEST(Fanout, LateJoinerStartsAtJoinPoint) {
  Broker broker;
  broker.publish("t", bytes_of("old"), "p");
  uint64_t sub = broker.subscribe("t", SubMode::Fanout);
  EXPECT_FALSE(broker.poll(sub).has_value());  // no retain-latest configured
  broker.publish("t", bytes_of("new"), "p");
  auto env = broker.poll(sub);
  ASSERT_TRUE(env);
  EXPECT_EQ(env->payload, bytes_of("new"));
}

TEST(RetainLatest, LateJoinerReceivesLatestFirst) {
  Broker broker;
  broker.configure_topic("params", true);
  broker.publish("params", bytes_of("v3"), "learner");
  broker.publish("params", bytes_of("v4"), "learner");
  uint64_t sub = broker.subscribe("params", SubMode::Fanout);
  auto env = broker.poll(sub);
  ASSERT_TRUE(env);
  EXPECT_EQ(env->payload, bytes_of("v4"));
  EXPECT_FALSE(broker.poll(sub).has_value());
}

TEST(RetainLatest, NothingBeforeFirstPublish) {
  Broker broker;
  broker.configure_topic("params", true);
  uint64_t sub = broker.subscribe("params", SubMode::Fanout);
  EXPECT_FALSE(broker.poll(sub).has_value());
  broker.publish("params", bytes_of("v1"), "learner");
  auto env = broker.poll(sub);
  ASSERT_TRUE(env);
  EXPECT_EQ(env->payload, bytes_of("v1"));
}

TEST(RetainLatest, RapidPublishesYieldExactlyTheLastAsInitial) {
  Broker broker;
  broker.configure_topic("params", true);
  for (int i = 1; i <= 100; ++i)
    broker.publish("params", bytes_of("v" + std::to_string(i)), "learner");
  uint64_t sub = broker.subscribe("params", SubMode::Fanout);
  auto env = broker.poll(sub);
  ASSERT_TRUE(env);
  EXPECT_EQ(env->payload, bytes_of("v100"));
  EXPECT_EQ(env->seq, 100u);
  EXPECT_FALSE(broker.poll(sub).has_value());
}

// At-least-once property: under random single-subscriber crash schedules,
// every published envelope is eventually acked at least once, and duplicate
// deliveries are observable.
TEST(AtLeastOnce, RandomCrashSchedulesLoseNothing) {
  auto rng = make_rng({0xa77eULL});
  for (int trial = 0; trial < 20; ++trial) {
    SimClock clock;
    Broker broker(Broker::Options{}, clock.fn());
    const int total = 40;
    for (int i = 0; i < total; ++i)
      broker.publish("t", bytes_of(std::to_string(i)), "p");

    uint64_t flaky = broker.subscribe("t", SubMode::ConsumerGroup, "g");
    uint64_t steady = broker.subscribe("t", SubMode::ConsumerGroup, "g");
    std::unordered_map<uint64_t, int> deliveries;
    std::unordered_set<uint64_t> acked;
    int observed_duplicates = 0;

    // Flaky member takes some messages and never acks them (crash).
    int crashes = 1 + static_cast<int>(rng() % 10);
    for (int i = 0; i < crashes; ++i) {
      auto env = broker.poll(flaky);
      if (!env) break;
      ++deliveries[env->seq];
    }
    // Redelivery window passes; steady member drains everything.
    clock.advance_ms(broker.redelivery_timeout_ms() + 1);
    while (auto env = broker.poll(steady)) {
      if (++deliveries[env->seq] > 1) ++observed_duplicates;
      broker.ack(steady, env->seq);
      acked.insert(env->seq);
    }
    EXPECT_EQ(acked.size(), static_cast<size_t>(total)) << "trial " << trial;
    if (crashes > 0) EXPECT_GT(observed_duplicates, 0) << "trial " << trial;
  }
}

TEST(Notification, EncodeDecodeRoundTrip) {
  EpisodeNotification n{EpisodeId{0x1122334455667788ULL, 0x99aabbccddeeff00ULL}, 2,
                        "episodes/2/cafe"};
  auto bytes = encode_notification(n);
  // episode_id 16 B + task_id 4 B + key length 2 B + key bytes.
  EXPECT_EQ(bytes.size(), 16u + 4u + 2u + n.storage_key.size());
  EpisodeNotification back = decode_notification(bytes);
  EXPECT_EQ(back.episode_id, n.episode_id);
  EXPECT_EQ(back.task_id, n.task_id);
  EXPECT_EQ(back.storage_key, n.storage_key);
}

}  // namespace
}  // namespace sop
