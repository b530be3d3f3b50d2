#include "sop/learner.hpp"

#include <gtest/gtest.h>

#include <filesystem>

#include "sop/harness.hpp"

namespace sop {
namespace {

namespace fs = std::filesystem;

// Independent high-precision evaluation of the mixing ratio in long double.
double mix_oracle(double l_on, double l_off, double alpha, double lo = 0.2,
                  double hi = 0.8) {
  long double num = expl(static_cast<long double>(alpha) * l_on);
  long double den = num + expl(static_cast<long double>(l_off));
  long double w = num / den;
  if (w < lo) w = lo;
  if (w > hi) w = hi;
  return static_cast<double>(w);
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("sop-learner-" + std::to_string(counter_++) +
                                         "-" + std::to_string(::getpid()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

Frame basic_frame(Action a, double reward = 0.0, bool expert = false) {
  Frame f;
  f.observation.features = {1.0, 0.5};
  f.action = a;
  f.reward = reward;
  f.expert_flag = expert;
  return f;
}

EpisodeRecord episode_with_frames(uint64_t id, int task, size_t n,
                                  EpisodeSource source = EpisodeSource::Online) {
  EpisodeRecord rec;
  rec.episode_id = EpisodeId{id, id ^ 0xffULL};
  rec.task_id = task;
  rec.status = EpisodeStatus::Success;
  rec.source = source;
  for (size_t i = 0; i < n; ++i)
    rec.frames.push_back(basic_frame(static_cast<Action>(i % kNumActions),
                                     i + 1 == n ? 1.0 : 0.0));
  rec.sim_duration = n;
  return rec;
}

TEST(ComputeMix, EqualLossesWithUnitBoostAreHalf) {
  for (double c : {0.0, 0.3, 1.0, 5.0, 20.0})
    EXPECT_NEAR(compute_mix(c, c, 1.0), 0.5, 1e-15) << "c=" << c;
}

TEST(ComputeMix, WorkedExample) {
  // l_on=2, l_off=1, alpha=1: e^2/(e^2+e^1) = 0.731059, inside the clip range.
  EXPECT_NEAR(compute_mix(2.0, 1.0, 1.0), 0.7310585786300049, 1e-12);
}

TEST(ComputeMix, LargeGapClipsHigh) {
  EXPECT_DOUBLE_EQ(compute_mix(10.0, 0.0, 2.0), 0.8);
  EXPECT_DOUBLE_EQ(compute_mix(0.0, 10.0, 2.0), 0.2);
}

TEST(ComputeMix, AgreesWithHighPrecisionOracleOnRandomTriples) {
  auto rng = make_rng({0xa1faULL});
  std::uniform_real_distribution<double> loss(0.0, 20.0), alpha(1.0, 5.0);
  for (int i = 0; i < 1000; ++i) {
    double l_on = loss(rng), l_off = loss(rng), a = alpha(rng);
    EXPECT_NEAR(compute_mix(l_on, l_off, a), mix_oracle(l_on, l_off, a), 1e-9);
  }
}

TEST(SamplerState, WindowFifoMean) {
  SamplerState s(1, {1.5, 3, 0.2, 0.8, 0.5});
  for (double v : {1.0, 2.0, 3.0, 4.0}) s.record_loss(0, Origin::Online, v);
  EXPECT_DOUBLE_EQ(s.mean_loss(0, Origin::Online), 3.0);  // window [2,3,4]
}

TEST(SamplerState, ColdStartIsMidpointUntilBothWindowsFilled) {
  SamplerState s(2);
  EXPECT_DOUBLE_EQ(s.mix(0), 0.5);
  s.record_loss(0, Origin::Online, 2.0);
  EXPECT_DOUBLE_EQ(s.mix(0), 0.5);  // offline window still empty
  s.record_loss(0, Origin::Offline, 1.0);
  EXPECT_NEAR(s.mix(0), mix_oracle(2.0, 1.0, 1.5), 1e-12);
  EXPECT_DOUBLE_EQ(s.mix(1), 0.5);  // other task untouched
}

TEST(SamplerState, WindowsPartitionByTaskAndOrigin) {
  SamplerState s(3);
  s.record_loss(0, Origin::Online, 1.0);
  s.record_loss(0, Origin::Offline, 2.0);
  s.record_loss(1, Origin::Online, 3.0);
  s.record_loss(2, Origin::Offline, 4.0);
  EXPECT_DOUBLE_EQ(s.mean_loss(0, Origin::Online), 1.0);
  EXPECT_DOUBLE_EQ(s.mean_loss(0, Origin::Offline), 2.0);
  EXPECT_DOUBLE_EQ(s.mean_loss(1, Origin::Online), 3.0);
  EXPECT_DOUBLE_EQ(s.mean_loss(2, Origin::Offline), 4.0);
  EXPECT_FALSE(s.has_losses(1, Origin::Offline));
  EXPECT_FALSE(s.has_losses(2, Origin::Online));
}

TEST(SamplerState, NonFiniteLossesDropped) {
  SamplerState s(1);
  s.record_loss(0, Origin::Online, std::numeric_limits<double>::infinity());
  s.record_loss(0, Origin::Online, std::nan(""));
  EXPECT_FALSE(s.has_losses(0, Origin::Online));
}

TEST(SamplerState, RejectsBadOptions) {
  EXPECT_THROW(SamplerState(1, {1.0, 200, 0.2, 0.8, 0.5}), std::invalid_argument);
  EXPECT_THROW(SamplerState(1, {1.5, 200, 0.0, 0.8, 0.5}), std::invalid_argument);
  EXPECT_THROW(SamplerState(1, {1.5, 200, 0.5, 0.4, 0.5}), std::invalid_argument);
}

BufferSet small_buffers(int tasks, size_t cap, int offline_eps = 2) {
  BufferSet buffers(tasks, cap);
  for (int t = 0; t < tasks; ++t)
    for (int e = 0; e < offline_eps; ++e)
      buffers.load_offline(episode_with_frames(1000 + 10 * t + e, t, 5,
                                               EpisodeSource::Offline));
  buffers.seal_offline();
  return buffers;
}

TEST(SampleBatch, TaskMarginalIsUniform) {
  BufferSet buffers = small_buffers(3, 100);
  SamplerState sampler(3);
  std::vector<int> tasks{0, 1, 2};
  auto rng = make_rng({0x5a3ULL});
  std::array<int, 3> counts{0, 0, 0};
  const int total = 30000;
  auto batch = sample_batch(buffers, sampler, tasks, total, rng);
  for (const TrainItem& item : batch) ++counts[static_cast<size_t>(item.task)];
  for (int t = 0; t < 3; ++t)
    EXPECT_NEAR(counts[static_cast<size_t>(t)] / static_cast<double>(total), 1.0 / 3,
                0.02);
}

TEST(SampleBatch, EmptyOnlineFallsBackToOffline) {
  BufferSet buffers = small_buffers(2, 100);
  SamplerState sampler(2);
  std::vector<int> tasks{0, 1};
  auto rng = make_rng({0x5a4ULL});
  auto batch = sample_batch(buffers, sampler, tasks, 64, rng);
  for (const TrainItem& item : batch) EXPECT_EQ(item.origin, Origin::Offline);
}

TEST(SampleBatch, OnlineFractionTracksMix) {
  BufferSet buffers = small_buffers(1, 100000);
  for (int e = 0; e < 20; ++e)
    buffers.append_online(episode_with_frames(2000 + e, 0, 50));
  SamplerState sampler(1);
  // Push the windows so the mix clips at 0.8.
  for (int i = 0; i < 50; ++i) {
    sampler.record_loss(0, Origin::Online, 10.0);
    sampler.record_loss(0, Origin::Offline, 0.1);
  }
  ASSERT_DOUBLE_EQ(sampler.mix(0), 0.8);
  std::vector<int> tasks{0};
  auto rng = make_rng({0x5a5ULL});
  const int total = 30000;
  auto batch = sample_batch(buffers, sampler, tasks, total, rng);
  int online = 0;
  for (const TrainItem& item : batch)
    if (item.origin == Origin::Online) ++online;
  EXPECT_NEAR(online / static_cast<double>(total), 0.8, 0.02);
}

TEST(SampleBatch, EmptyOfflineBufferIsContractViolation) {
  BufferSet buffers(1, 100);
  buffers.seal_offline();
  SamplerState sampler(1);
  std::vector<int> tasks{0};
  auto rng = make_rng({1});
  EXPECT_THROW(sample_batch(buffers, sampler, tasks, 8, rng), std::logic_error);
}

TEST(BufferSet, OnlineEvictionKeepsCapacity) {
  BufferSet buffers(1, 100);
  buffers.load_offline(episode_with_frames(1, 0, 3, EpisodeSource::Offline));
  buffers.seal_offline();
  for (int e = 0; e < 10; ++e) buffers.append_online(episode_with_frames(100 + e, 0, 30));
  EXPECT_EQ(buffers.online_size(0), 100u);
  // Oldest evicted: the newest frames belong to the latest episodes.
  EXPECT_EQ(buffers.online(0).back().episode, (EpisodeId{109, 109 ^ 0xffULL}));
}

TEST(BufferSet, OfflineImmutableAfterSeal) {
  BufferSet buffers(1, 10);
  buffers.load_offline(episode_with_frames(1, 0, 3, EpisodeSource::Offline));
  buffers.seal_offline();
  EXPECT_THROW(buffers.load_offline(episode_with_frames(2, 0, 3)), std::logic_error);
}

struct LearnerFixture {
  TempDir dir;
  SimClock clock;
  Broker broker{Broker::Options{}, clock.fn()};
  BlobStore store{dir.path()};
  InProcBus learner_bus{broker, "learner"};
  InProcBus actor_bus{broker, "actor-0"};

  TrainConfig config;
  AlgorithmSpec algo;

  LearnerFixture() {
    broker.configure_topic(kParamsTopic, true);
    config.batch_size = 16;
    config.publish_interval = 25;
    config.total_steps = 100;
  }

  Learner make_learner(int tasks = 3) {
    Learner learner(config, algo, PolicyParams::zeros(kNumActions, 16), learner_bus,
                    store, tasks, 7);
    std::vector<EpisodeRecord> offline;
    for (int t = 0; t < tasks; ++t)
      offline.push_back(episode_with_frames(900 + t, t, 6, EpisodeSource::Offline));
    for (auto& ep : offline)
      for (auto& f : ep.frames) f.observation.features.assign(16, 0.25);
    learner.load_offline_corpus(offline);
    learner.seal_offline();
    return learner;
  }

  void publish_episode(const EpisodeRecord& rec) {
    std::string key = store.put_episode(rec);
    actor_bus.publish(kEpisodesTopic,
                      encode_notification({rec.episode_id, rec.task_id, key}));
  }
};

EpisodeRecord wide_episode(uint64_t id, int task, size_t n) {
  EpisodeRecord rec = episode_with_frames(id, task, n);
  for (auto& f : rec.frames) f.observation.features.assign(16, 0.5);
  return rec;
}

TEST(Ingest, DuplicateNotificationGrowsBufferOnce) {
  LearnerFixture fx;
  Learner learner = fx.make_learner();
  EpisodeRecord rec = wide_episode(1, 0, 7);
  std::string key = fx.store.put_episode(rec);
  auto note = encode_notification({rec.episode_id, rec.task_id, key});
  fx.actor_bus.publish(kEpisodesTopic, note);
  fx.actor_bus.publish(kEpisodesTopic, note);  // at-least-once duplicate
  EXPECT_EQ(learner.pump_ingest(), 1);
  EXPECT_EQ(learner.buffers().online_size(0), 7u);
  EXPECT_EQ(learner.duplicates_dropped(), 1u);
  EXPECT_EQ(learner.index().size(), 1u);
}

TEST(Ingest, EpisodesPartitionByTask) {
  LearnerFixture fx;
  Learner learner = fx.make_learner();
  for (int task = 0; task < 3; ++task)
    for (int e = 0; e < 10; ++e)
      fx.publish_episode(wide_episode(static_cast<uint64_t>(100 + task * 10 + e), task, 4));
  while (learner.pump_ingest() > 0) {
  }
  for (int task = 0; task < 3; ++task) {
    EXPECT_EQ(learner.buffers().online_size(task), 40u);
    EXPECT_EQ(learner.index().list_by_task(task).size(), 10u);
  }
}

TEST(Ingest, CorruptEpisodeQuarantinedAndSkipped) {
  LearnerFixture fx;
  Learner learner = fx.make_learner();
  EpisodeRecord rec = wide_episode(5, 0, 4);
  std::string key = fx.store.put_episode(rec);
  auto bytes = fx.store.get_bytes(key);
  bytes[bytes.size() / 2] ^= 0x01;
  fx.store.put_bytes(key, bytes);
  fx.actor_bus.publish(kEpisodesTopic, encode_notification({rec.episode_id, rec.task_id, key}));
  EXPECT_EQ(learner.pump_ingest(), 0);
  EXPECT_EQ(learner.buffers().online_size(0), 0u);
  // Redelivery after the timeout must not resurrect the quarantined key.
  fx.clock.advance_ms(fx.broker.redelivery_timeout_ms() + 1);
  EXPECT_EQ(learner.pump_ingest(), 0);
}

TEST(Ingest, MissingEpisodeNackedThenIngestedOnceStored) {
  LearnerFixture fx;
  Learner learner = fx.make_learner();
  EpisodeRecord rec = wide_episode(6, 1, 4);
  std::string key = BlobStore::episode_key(rec.task_id, rec.episode_id);
  fx.actor_bus.publish(kEpisodesTopic, encode_notification({rec.episode_id, rec.task_id, key}));
  EXPECT_EQ(learner.pump_ingest(), 0);  // fetch fails, nacked
  fx.store.put_episode(rec);
  EXPECT_EQ(learner.pump_ingest(), 1);  // immediately redelivered after nack
  EXPECT_EQ(learner.buffers().online_size(1), 4u);
}

TEST(TrainLoop, PublishCadenceIsExactlyFloorStepsOverK) {
  LearnerFixture fx;
  Learner learner = fx.make_learner();
  learner.broadcast_initial();
  for (int i = 0; i < 100; ++i) learner.train_step();
  EXPECT_EQ(learner.publishes(), 4u);  // floor(100/25), initial broadcast excluded
  EXPECT_EQ(fx.broker.topic_depth(kParamsTopic), 5u);
}

TEST(TrainLoop, PureOfflineTrainingReducesLoss) {
  LearnerFixture fx;
  fx.config.batch_size = 32;
  Learner learner = fx.make_learner();
  double first = 0, last = 0;
  for (int i = 0; i < 200; ++i) {
    StepMetrics m = learner.train_step();
    if (i == 0) first = m.loss;
    last = m.loss;
  }
  EXPECT_LT(last, first);
  EXPECT_GT(learner.params().version, 0u);
}

TEST(TrainLoop, RequiresSealedBuffers) {
  LearnerFixture fx;
  Learner learner(fx.config, fx.algo, PolicyParams::zeros(kNumActions, 16),
                  fx.learner_bus, fx.store, 3, 7);
  EXPECT_THROW(learner.train_step(), std::logic_error);
}

}  // namespace
}  // namespace sop
