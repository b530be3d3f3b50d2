#pragma once

#include <condition_variable>
#include <map>
#include <optional>

#include "sop/store.hpp"

namespace sop {

// ---------------------------------------------------------------------------
// Envelope: seq is the per-topic publish order; producer_seq is gapless per
// (topic, producer) and is what consumers dedupe on when needed.

struct Envelope {
  uint64_t seq = 0;
  std::string topic;
  std::string producer_id;
  uint64_t producer_seq = 0;
  std::vector<uint8_t> payload;
};

enum class SubMode : uint8_t { ConsumerGroup = 0, Fanout = 1 };

// ---------------------------------------------------------------------------
// Episode event notification carried on the "episodes" topic. The payload is
// the pointer (id + key), never frame data.

struct EpisodeNotification {
  EpisodeId episode_id;
  int32_t task_id = 0;
  std::string storage_key;
};

inline std::vector<uint8_t> encode_notification(const EpisodeNotification& n) {
  ByteWriter w;
  w.put_u64(n.episode_id.hi);
  w.put_u64(n.episode_id.lo);
  w.put_u32(static_cast<uint32_t>(n.task_id));
  w.put_str16(n.storage_key);
  return w.take();
}

inline EpisodeNotification decode_notification(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  EpisodeNotification n;
  n.episode_id.hi = r.get_u64();
  n.episode_id.lo = r.get_u64();
  n.task_id = static_cast<int32_t>(r.get_u32());
  n.storage_key = r.get_str16();
  return n;
}

// Well-known topics.
inline constexpr const char* kEpisodesTopic = "episodes";
inline constexpr const char* kParamsTopic = "params";
inline constexpr const char* kLearnerGroup = "learner";

// ---------------------------------------------------------------------------
// In-process broker. Thread-safe; redelivery deadlines are evaluated against
// an injectable millisecond clock so deterministic runs control time.

class Broker {
 public:
  struct Options {
    size_t max_payload_bytes = 4 * 1024 * 1024;
    uint64_t redelivery_timeout_ms = 2000;
  };

  Broker() : Broker(Options{}, steady_clock_ms()) {}
  explicit Broker(Options opts, ClockFn clock = steady_clock_ms())
      : opts_(opts), clock_(std::move(clock)) {}

  /// Topics are created on first use; retain-latest must be configured before
  /// fanout subscribers rely on it (used for the params topic).
  void configure_topic(const std::string& topic, bool retain_latest) {
    std::lock_guard<std::mutex> lock(mu_);
    topic_state(topic).retain_latest = retain_latest;
  }

  uint64_t publish(const std::string& topic, std::vector<uint8_t> payload,
                   const std::string& producer_id) {
    if (payload.size() > opts_.max_payload_bytes)
      throw std::invalid_argument("publish: payload exceeds max frame size");
    std::unique_lock<std::mutex> lock(mu_);
    Topic& t = topic_state(topic);
    Envelope env;
    env.seq = t.log.size() + 1;
    env.topic = topic;
    env.producer_id = producer_id;
    env.producer_seq = ++t.producer_seqs[producer_id];
    env.payload = std::move(payload);
    uint64_t seq = env.seq;
    t.log.push_back(std::move(env));
    lock.unlock();
    cv_.notify_all();
    return seq;
  }

  /// Returns an opaque subscription id. Consumer-group members subscribe with
  /// the same group id; fanout subscribers each see every envelope from their
  /// join point (plus the retained latest, if configured).
  uint64_t subscribe(const std::string& topic, SubMode mode,
                     const std::string& group_id = "") {
    std::lock_guard<std::mutex> lock(mu_);
    Topic& t = topic_state(topic);
    uint64_t id = next_sub_id_++;
    Subscription sub;
    sub.topic = topic;
    sub.mode = mode;
    sub.group_id = group_id;
    if (mode == SubMode::Fanout) {
      sub.fanout_cursor = t.log.size();
      if (t.retain_latest && !t.log.empty()) sub.fanout_cursor = t.log.size() - 1;
    }
    subs_.emplace(id, std::move(sub));
    return id;
  }

  /// Non-blocking delivery attempt. Delivered envelopes stay pending until
  /// acked; unacked ones become eligible again after the redelivery timeout.
  std::optional<Envelope> poll(uint64_t sub_id) {
    std::lock_guard<std::mutex> lock(mu_);
    return poll_locked(sub_id);
  }

  /// Blocking variant used by transports; waits up to max_wait_ms.
  std::optional<Envelope> poll_wait(uint64_t sub_id, uint64_t max_wait_ms) {
    std::unique_lock<std::mutex> lock(mu_);
    auto deadline = std::chrono::steady_clock::now() +
                    std::chrono::milliseconds(max_wait_ms);
    while (true) {
      auto env = poll_locked(sub_id);
      if (env || max_wait_ms == 0) return env;
      if (cv_.wait_until(lock, deadline) == std::cv_status::timeout)
        return poll_locked(sub_id);
    }
  }

  void ack(uint64_t sub_id, uint64_t seq) {
    std::lock_guard<std::mutex> lock(mu_);
    Subscription* sub = find_sub(sub_id);
    if (!sub) {
      log_warn("ack on unknown subscription " + std::to_string(sub_id));
      return;
    }
    if (sub->mode == SubMode::Fanout) return;  // fanout needs no acks
    Group& g = topic_state(sub->topic).groups[sub->group_id];
    auto it = g.pending.find(seq);
    if (it == g.pending.end()) {
      if (!g.done.contains(seq))
        log_warn("ack of unknown seq " + std::to_string(seq) + " ignored");
      return;
    }
    g.pending.erase(it);
    g.done.insert(seq);
  }

  /// Makes an unacked delivery immediately eligible for redelivery.
  void nack(uint64_t sub_id, uint64_t seq) {
    std::lock_guard<std::mutex> lock(mu_);
    Subscription* sub = find_sub(sub_id);
    if (!sub || sub->mode == SubMode::Fanout) return;
    Group& g = topic_state(sub->topic).groups[sub->group_id];
    auto it = g.pending.find(seq);
    if (it != g.pending.end()) it->second.deadline_ms = 0;
    cv_.notify_all();
  }

  uint64_t redelivery_timeout_ms() const { return opts_.redelivery_timeout_ms; }

  size_t topic_depth(const std::string& topic) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = topics_.find(topic);
    return it == topics_.end() ? 0 : it->second.log.size();
  }

 private:
  struct PendingDelivery {
    uint64_t deadline_ms = 0;
  };

  struct Group {
    size_t next_index = 0;  // first log index never claimed by this group
    std::map<uint64_t, PendingDelivery> pending;
    std::unordered_set<uint64_t> done;
  };

  struct Topic {
    bool retain_latest = false;
    std::vector<Envelope> log;
    std::unordered_map<std::string, uint64_t> producer_seqs;
    std::unordered_map<std::string, Group> groups;
  };

  struct Subscription {
    std::string topic;
    SubMode mode = SubMode::ConsumerGroup;
    std::string group_id;
    size_t fanout_cursor = 0;
  };

  Topic& topic_state(const std::string& topic) { return topics_[topic]; }

  Subscription* find_sub(uint64_t id) {
    auto it = subs_.find(id);
    return it == subs_.end() ? nullptr : &it->second;
  }

  std::optional<Envelope> poll_locked(uint64_t sub_id) {
    Subscription* sub = find_sub(sub_id);
    if (!sub) throw std::invalid_argument("poll: unknown subscription");
    Topic& t = topic_state(sub->topic);

    if (sub->mode == SubMode::Fanout) {
      if (sub->fanout_cursor < t.log.size()) return t.log[sub->fanout_cursor++];
      return std::nullopt;
    }

    Group& g = t.groups[sub->group_id];
    uint64_t now = clock_();
    // Expired pending deliveries first (at-least-once redelivery).
    for (auto& [seq, pd] : g.pending) {
      if (pd.deadline_ms <= now) {
        pd.deadline_ms = now + opts_.redelivery_timeout_ms;
        return t.log[seq - 1];
      }
    }
    // Then the next never-claimed envelope.
    if (g.next_index < t.log.size()) {
      const Envelope& env = t.log[g.next_index++];
      g.pending[env.seq] = PendingDelivery{now + opts_.redelivery_timeout_ms};
      return env;
    }
    return std::nullopt;
  }

  Options opts_;
  ClockFn clock_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::unordered_map<std::string, Topic> topics_;
  std::unordered_map<uint64_t, Subscription> subs_;
  uint64_t next_sub_id_ = 1;
};

// ---------------------------------------------------------------------------
// Transport-neutral client surface: actors and the learner speak this, and
// either the in-process broker or the TCP transport sits behind it.

class BusClient {
 public:
  virtual ~BusClient() = default;
  virtual uint64_t publish(const std::string& topic, std::vector<uint8_t> payload) = 0;
  virtual uint64_t subscribe(const std::string& topic, SubMode mode,
                             const std::string& group_id = "") = 0;
  virtual std::optional<Envelope> poll(uint64_t sub_id) = 0;
  virtual void ack(uint64_t sub_id, uint64_t seq) = 0;
  virtual void nack(uint64_t sub_id, uint64_t seq) = 0;
};

class InProcBus : public BusClient {
 public:
  InProcBus(Broker& broker, std::string producer_id)
      : broker_(broker), producer_id_(std::move(producer_id)) {}

  uint64_t publish(const std::string& topic, std::vector<uint8_t> payload) override {
    return broker_.publish(topic, std::move(payload), producer_id_);
  }
  uint64_t subscribe(const std::string& topic, SubMode mode,
                     const std::string& group_id) override {
    return broker_.subscribe(topic, mode, group_id);
  }
  std::optional<Envelope> poll(uint64_t sub_id) override { return broker_.poll(sub_id); }
  void ack(uint64_t sub_id, uint64_t seq) override { broker_.ack(sub_id, seq); }
  void nack(uint64_t sub_id, uint64_t seq) override { broker_.nack(sub_id, seq); }

 private:
  Broker& broker_;
  std::string producer_id_;
};

}  // namespace sop
