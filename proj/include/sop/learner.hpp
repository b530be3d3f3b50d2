#pragma once

#include <deque>

#include "sop/algorithms.hpp"
#include "sop/bus.hpp"
#include "sop/checkpoint.hpp"

namespace sop {

// ---------------------------------------------------------------------------
// Per-task online (capacity-bounded FIFO) and offline (static demo) buffers.

struct OnlineFrame {
  Frame frame;
  EpisodeId episode;
};

class BufferSet {
 public:
  BufferSet(int num_tasks, size_t online_capacity_per_task)
      : online_(static_cast<size_t>(num_tasks)),
        offline_episodes_(static_cast<size_t>(num_tasks)),
        offline_frames_(static_cast<size_t>(num_tasks)),
        online_capacity_(online_capacity_per_task) {}

  int num_tasks() const { return static_cast<int>(online_.size()); }

  /// Offline buffers are immutable once sealed.
  void load_offline(const EpisodeRecord& rec) {
    if (sealed_) throw std::logic_error("offline buffers are immutable after seal");
    auto& episodes = offline_episodes_.at(static_cast<size_t>(rec.task_id));
    episodes.push_back(rec);
  }

  void seal_offline() {
    if (sealed_) return;
    sealed_ = true;
    for (size_t task = 0; task < offline_episodes_.size(); ++task) {
      for (const EpisodeRecord& ep : offline_episodes_[task])
        for (const Frame& f : ep.frames)
          offline_frames_[task].push_back(OnlineFrame{f, ep.episode_id});
    }
  }

  bool sealed() const { return sealed_; }

  /// Appends a full episode's frames; evicts oldest frames beyond capacity.
  void append_online(const EpisodeRecord& rec) {
    auto& buf = online_.at(static_cast<size_t>(rec.task_id));
    for (const Frame& f : rec.frames) {
      buf.push_back(OnlineFrame{f, rec.episode_id});
      if (buf.size() > online_capacity_) buf.pop_front();
    }
  }

  const std::deque<OnlineFrame>& online(int task) const {
    return online_.at(static_cast<size_t>(task));
  }
  const std::vector<OnlineFrame>& offline(int task) const {
    return offline_frames_.at(static_cast<size_t>(task));
  }
  const std::vector<EpisodeRecord>& offline_episodes(int task) const {
    return offline_episodes_.at(static_cast<size_t>(task));
  }
  std::vector<EpisodeRecord>& mutable_offline_episodes(int task) {
    return offline_episodes_.at(static_cast<size_t>(task));
  }

  size_t online_size(int task) const { return online(task).size(); }
  size_t offline_size(int task) const { return offline(task).size(); }

 private:
  std::vector<std::deque<OnlineFrame>> online_;
  std::vector<std::vector<EpisodeRecord>> offline_episodes_;
  std::vector<std::vector<OnlineFrame>> offline_frames_;
  size_t online_capacity_;
  bool sealed_ = false;
};

// ---------------------------------------------------------------------------
// Adaptive online/offline mixing (task-balanced sampler).
//
//   w_on = exp(alpha * mean(online losses)) /
//          (exp(alpha * mean(online losses)) + exp(mean(offline losses)))
// clipped to [clip_lo, clip_hi]. Window means are over the last W entries.

inline double compute_mix(double mean_online_loss, double mean_offline_loss,
                          double alpha, double clip_lo = 0.2, double clip_hi = 0.8) {
  // Logistic form of the two-exponential ratio, stable for large losses.
  double w = 1.0 / (1.0 + std::exp(mean_offline_loss - alpha * mean_online_loss));
  return std::clamp(w, clip_lo, clip_hi);
}

class SamplerState {
 public:
  struct Options {
    double alpha = 1.5;       // online boost, > 1
    size_t window = 200;      // W
    double clip_lo = 0.2;
    double clip_hi = 0.8;
    double cold_start = 0.5;  // used until both windows have entries
  };

  explicit SamplerState(int num_tasks) : SamplerState(num_tasks, Options{}) {}
  SamplerState(int num_tasks, Options opts)
      : opts_(opts), windows_(static_cast<size_t>(num_tasks) * 2) {
    if (opts_.alpha <= 1.0) throw std::invalid_argument("sampler alpha must be > 1");
    if (!(opts_.clip_lo > 0.0 && opts_.clip_lo < opts_.clip_hi && opts_.clip_hi < 1.0))
      throw std::invalid_argument("sampler clip bounds must satisfy 0 < lo < hi < 1");
  }

  void record_loss(int task, Origin origin, double loss) {
    if (!std::isfinite(loss)) {
      log_warn("dropping non-finite loss for task " + std::to_string(task));
      return;
    }
    Window& w = window(task, origin);
    w.values.push_back(loss);
    w.sum += loss;
    if (w.values.size() > opts_.window) {
      w.sum -= w.values.front();
      w.values.pop_front();
    }
  }

  bool has_losses(int task, Origin origin) const {
    return !window(task, origin).values.empty();
  }

  double mean_loss(int task, Origin origin) const {
    const Window& w = window(task, origin);
    if (w.values.empty()) throw std::logic_error("mean of empty loss window");
    return w.sum / static_cast<double>(w.values.size());
  }

  /// Current online sampling ratio for a task; cold-starts at the midpoint
  /// until both windows have at least one entry.
  double mix(int task) const {
    if (!has_losses(task, Origin::Online) || !has_losses(task, Origin::Offline))
      return opts_.cold_start;
    return compute_mix(mean_loss(task, Origin::Online),
                       mean_loss(task, Origin::Offline), opts_.alpha, opts_.clip_lo,
                       opts_.clip_hi);
  }

  const Options& options() const { return opts_; }

 private:
  struct Window {
    std::deque<double> values;
    double sum = 0.0;
  };

  Window& window(int task, Origin origin) {
    return windows_.at(static_cast<size_t>(task) * 2 +
                       (origin == Origin::Online ? 0 : 1));
  }
  const Window& window(int task, Origin origin) const {
    return windows_.at(static_cast<size_t>(task) * 2 +
                       (origin == Origin::Online ? 0 : 1));
  }

  Options opts_;
  std::vector<Window> windows_;
};

// ---------------------------------------------------------------------------
// Batch construction: task uniform over the active set, then online with
// probability w_on (if online data exists), frame uniform within the buffer.

inline std::vector<TrainItem> sample_batch(const BufferSet& buffers,
                                           const SamplerState& sampler,
                                           std::span<const int> active_tasks,
                                           int batch_size, std::mt19937_64& rng) {
  if (active_tasks.empty()) throw std::invalid_argument("sample_batch: no active tasks");
  for (int task : active_tasks)
    if (buffers.offline_size(task) == 0)
      throw std::logic_error("sample_batch: offline buffer empty for task " +
                             std::to_string(task));

  std::vector<double> mixes(active_tasks.size());
  for (size_t i = 0; i < active_tasks.size(); ++i) mixes[i] = sampler.mix(active_tasks[i]);

  std::vector<TrainItem> batch;
  batch.reserve(static_cast<size_t>(batch_size));
  std::uniform_int_distribution<size_t> pick_task(0, active_tasks.size() - 1);
  for (int i = 0; i < batch_size; ++i) {
    size_t ti = pick_task(rng);
    int task = active_tasks[ti];
    bool online = buffers.online_size(task) > 0 &&
                  std::generate_canonical<double, 53>(rng) < mixes[ti];
    TrainItem item;
    item.task = task;
    item.origin = online ? Origin::Online : Origin::Offline;
    if (online) {
      const auto& buf = buffers.online(task);
      std::uniform_int_distribution<size_t> pick(0, buf.size() - 1);
      const OnlineFrame& of = buf[pick(rng)];
      item.frame = &of.frame;
      item.episode = of.episode;
    } else {
      const auto& buf = buffers.offline(task);
      std::uniform_int_distribution<size_t> pick(0, buf.size() - 1);
      const OnlineFrame& of = buf[pick(rng)];
      item.frame = &of.frame;
      item.episode = of.episode;
    }
    batch.push_back(item);
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Learner: ingest loop + training loop + checkpoint publication.

struct TrainConfig {
  int batch_size = 64;
  int publish_interval = 25;  // K
  double learning_rate = 0.05;
  uint64_t total_steps = 2000;
  size_t online_capacity_per_task = 200000;
  std::vector<int> active_tasks;  // defaults to all tasks when empty
  SamplerState::Options sampler;
};

struct StepMetrics {
  uint64_t step = 0;
  double loss = 0.0;
  double online_fraction = 0.0;
  std::vector<double> mix_per_task;
  uint64_t publishes = 0;
  std::vector<size_t> online_sizes;
};

class Learner {
 public:
  Learner(const TrainConfig& config, const AlgorithmSpec& algo, PolicyParams initial,
          BusClient& bus, BlobStore& store, int num_tasks, uint64_t seed)
      : config_(config),
        algo_(algo),
        params_(std::move(initial)),
        bus_(bus),
        store_(store),
        buffers_(num_tasks, config.online_capacity_per_task),
        sampler_(num_tasks, config.sampler),
        rng_(make_rng({0x1ea82e5ULL, seed})) {
    active_tasks_ = config.active_tasks;
    if (active_tasks_.empty())
      for (int t = 0; t < num_tasks; ++t) active_tasks_.push_back(t);
    episodes_sub_ = bus_.subscribe(kEpisodesTopic, SubMode::ConsumerGroup, kLearnerGroup);
  }

  BufferSet& buffers() { return buffers_; }
  SamplerState& sampler() { return sampler_; }
  const PolicyParams& params() const { return params_; }
  const MetaIndex& index() const { return index_; }
  uint64_t steps_done() const { return steps_; }
  uint64_t publishes() const { return publishes_; }
  uint64_t duplicates_dropped() const { return duplicates_dropped_; }
  const std::vector<int>& active_tasks() const { return active_tasks_; }

  void load_offline_corpus(std::span<const EpisodeRecord> episodes) {
    for (const EpisodeRecord& ep : episodes) {
      buffers_.load_offline(ep);
      seen_.insert(ep.episode_id);
    }
  }

  /// For RECAP: fit the value head on offline demos, freeze it, and stamp
  /// indicators on the offline frames. Must run before training starts.
  void prepare_value_function() {
    if (algo_.kind != AlgorithmSpec::Kind::Recap) return;
    std::vector<EpisodeRecord> all;
    for (int task = 0; task < buffers_.num_tasks(); ++task)
      for (const EpisodeRecord& ep : buffers_.offline_episodes(task)) all.push_back(ep);
    params_.value_weights = fit_value(all, algo_.gamma, params_.feature_dim);
    params_.rehash();
    for (int task = 0; task < buffers_.num_tasks(); ++task)
      for (EpisodeRecord& ep : buffers_.mutable_offline_episodes(task))
        stamp_indicators(ep, params_.value_weights, algo_.gamma, algo_.epsilon_for(task));
  }

  void seal_offline() { buffers_.seal_offline(); }

  /// Drains pending episode notifications: fetch, dedupe, stamp, append, ack.
  /// Returns the number of episodes ingested.
  int pump_ingest(int max_messages = 64) {
    int ingested = 0;
    for (int i = 0; i < max_messages; ++i) {
      auto env = bus_.poll(episodes_sub_);
      if (!env) break;
      EpisodeNotification note;
      try {
        note = decode_notification(env->payload);
      } catch (const IntegrityError& e) {
        log_warn(std::string("dropping malformed notification: ") + e.what());
        bus_.ack(episodes_sub_, env->seq);
        continue;
      }
      if (seen_.contains(note.episode_id)) {
        ++duplicates_dropped_;
        bus_.ack(episodes_sub_, env->seq);
        continue;
      }
      if (quarantined_.contains(note.storage_key)) {
        bus_.ack(episodes_sub_, env->seq);
        continue;
      }
      EpisodeRecord rec;
      try {
        rec = store_.get_episode(note.storage_key);
      } catch (const IntegrityError& e) {
        log_warn("quarantining corrupt episode at " + note.storage_key + ": " + e.what());
        quarantined_.insert(note.storage_key);
        bus_.ack(episodes_sub_, env->seq);
        continue;
      } catch (const std::exception& e) {
        log_warn("episode fetch failed, nacking for redelivery: " + std::string(e.what()));
        bus_.nack(episodes_sub_, env->seq);
        continue;
      }
      if (algo_.kind == AlgorithmSpec::Kind::Recap)
        stamp_indicators(rec, params_.value_weights, algo_.gamma,
                         algo_.epsilon_for(rec.task_id));
      seen_.insert(rec.episode_id);
      buffers_.append_online(rec);
      index_.insert(meta_of(rec, note.storage_key));
      bus_.ack(episodes_sub_, env->seq);
      ++ingested;
    }
    return ingested;
  }

  /// One training step; publishes a checkpoint delta every K steps.
  StepMetrics train_step() {
    if (!buffers_.sealed()) throw std::logic_error("seal_offline before training");
    auto batch = sample_batch(buffers_, sampler_, active_tasks_,
                              config_.batch_size, rng_);
    UpdateResult result;
    try {
      result = algo_.kind == AlgorithmSpec::Kind::HGDagger
                   ? hgdagger_update(params_, batch, config_.learning_rate)
                   : recap_update(params_, batch, config_.learning_rate);
    } catch (const std::invalid_argument& e) {
      log_warn(std::string("update failed, step skipped: ") + e.what());
      ++steps_;
      if (steps_ % static_cast<uint64_t>(config_.publish_interval) == 0) publish_params();
      return current_metrics(0.0, 0.0);
    }
    params_ = std::move(result.params);

    double loss_sum = 0.0;
    int online_count = 0;
    for (size_t i = 0; i < batch.size(); ++i) {
      sampler_.record_loss(batch[i].task, batch[i].origin, result.per_item_loss[i]);
      loss_sum += result.per_item_loss[i];
      if (batch[i].origin == Origin::Online) ++online_count;
    }
    ++steps_;
    if (steps_ % static_cast<uint64_t>(config_.publish_interval) == 0) publish_params();
    return current_metrics(loss_sum / static_cast<double>(batch.size()),
                           static_cast<double>(online_count) /
                               static_cast<double>(batch.size()));
  }

  /// Broadcast the initial full checkpoint (retained for late joiners) and
  /// persist it for the stale-base fallback path.
  void broadcast_initial() {
    store_.put_bytes(kLatestCheckpointKey, encode_checkpoint(params_));
    try {
      bus_.publish(kParamsTopic, encode_checkpoint(params_));
    } catch (const std::exception& e) {
      log_warn(std::string("initial broadcast failed: ") + e.what());
    }
    last_published_ = params_;
  }

 private:
  void publish_params() {
    // Full checkpoint to the store first so a stale actor can always recover.
    try {
      store_.put_bytes(kLatestCheckpointKey, encode_checkpoint(params_));
    } catch (const std::exception& e) {
      log_warn(std::string("checkpoint store write failed: ") + e.what());
    }
    try {
      if (last_published_) {
        bus_.publish(kParamsTopic, encode_delta(delta_encode(*last_published_, params_)));
      } else {
        bus_.publish(kParamsTopic, encode_checkpoint(params_));
      }
      last_published_ = params_;
      ++publishes_;
    } catch (const std::exception& e) {
      log_warn(std::string("params publish failed, will retry next interval: ") + e.what());
    }
  }

  StepMetrics current_metrics(double loss, double online_fraction) const {
    StepMetrics m;
    m.step = steps_;
    m.loss = loss;
    m.online_fraction = online_fraction;
    for (int task : active_tasks_) m.mix_per_task.push_back(sampler_.mix(task));
    m.publishes = publishes_;
    for (int task : active_tasks_) m.online_sizes.push_back(buffers_.online_size(task));
    return m;
  }

  TrainConfig config_;
  AlgorithmSpec algo_;
  PolicyParams params_;
  BusClient& bus_;
  BlobStore& store_;
  BufferSet buffers_;
  SamplerState sampler_;
  MetaIndex index_;
  std::mt19937_64 rng_;
  std::vector<int> active_tasks_;
  uint64_t episodes_sub_ = 0;
  uint64_t steps_ = 0;
  uint64_t publishes_ = 0;
  uint64_t duplicates_dropped_ = 0;
  std::unordered_set<EpisodeId, EpisodeIdHash> seen_;
  std::unordered_set<std::string> quarantined_;
  std::optional<PolicyParams> last_published_;
};

}  // namespace sop
