#pragma once

#include "sop/algorithms.hpp"
#include "sop/bus.hpp"
#include "sop/checkpoint.hpp"

namespace sop {

// ---------------------------------------------------------------------------
// Actor configuration

enum class RolloutMode : uint8_t { Greedy = 0, Sample = 1, RecapSample = 2 };

struct ActorConfig {
  std::string actor_id = "actor-0";
  int task_id = 0;
  uint64_t domain_seed = 0;
  int horizon = 80;
  int gate_window = 4;  // k
  bool intervention_enabled = true;
  RolloutMode rollout_mode = RolloutMode::Sample;
  double recap_beta = 1.0;  // used when rollout_mode == RecapSample
  size_t upload_buffer_capacity = 64;
  uint64_t rng_seed = 0;
};

// ---------------------------------------------------------------------------
// Action selection per rollout mode.

inline Action select_action(const PolicyParams& params, const Observation& obs,
                            RolloutMode mode, double recap_beta,
                            std::mt19937_64& rng) {
  ActionDistribution dist =
      mode == RolloutMode::RecapSample
          ? recap_sample_dist(params, obs.features, recap_beta)
          : forward(params, obs.features, Head::marginal());
  if (mode == RolloutMode::Greedy) {
    size_t best = 0;
    for (size_t a = 1; a < dist.probs.size(); ++a)
      if (dist.probs[a] > dist.probs[best]) best = a;
    return static_cast<Action>(best);
  }
  std::discrete_distribution<int> pick(dist.probs.begin(), dist.probs.end());
  return static_cast<Action>(pick(rng));
}

// ---------------------------------------------------------------------------
// One full episode from reset to terminal. The gate watches oracle distances
// and hands control to the scripted expert; expert frames are flagged and
// collected into intervention spans. The record carries exactly the version
// of the params it was generated with.

inline EpisodeRecord rollout(const PolicyParams& params, const DomainParam& domain,
                             const ActorConfig& config, const WorldConfig& world,
                             std::mt19937_64& rng) {
  DistanceField field(domain);
  EnvState state = reset_env(domain, world, rng);
  state.horizon = config.horizon;
  Observation obs = make_observation(state, domain, world, rng);
  GateState gate(config.gate_window);

  EpisodeRecord rec;
  rec.episode_id = random_episode_id(rng);
  rec.task_id = domain.task_id;
  rec.domain_seed = domain.obstacle_seed;
  rec.policy_version = params.version;
  rec.source = EpisodeSource::Online;

  std::optional<uint32_t> span_start;
  EpisodeStatus status = EpisodeStatus::Running;
  while (status == EpisodeStatus::Running) {
    bool expert_turn =
        config.intervention_enabled && gate.update(field.distance(state.agent_cell));
    Action action = expert_turn
                        ? expert_action(state, domain, field)
                        : select_action(params, obs, config.rollout_mode,
                                        config.recap_beta, rng);
    uint32_t frame_index = static_cast<uint32_t>(rec.frames.size());
    if (expert_turn && !span_start) span_start = frame_index;
    if (!expert_turn && span_start) {
      rec.intervention_spans.emplace_back(*span_start, frame_index);
      span_start.reset();
    }

    StepResult result = step(state, action, domain, world, rng);
    Frame frame;
    frame.observation = std::move(obs);
    frame.action = action;
    frame.reward = result.reward;
    frame.expert_flag = expert_turn;
    rec.frames.push_back(std::move(frame));
    obs = std::move(result.next_observation);
    status = result.status;
  }
  if (span_start)
    rec.intervention_spans.emplace_back(*span_start,
                                        static_cast<uint32_t>(rec.frames.size()));
  rec.status = status;
  rec.sim_duration = rec.frames.size();
  return rec;
}

// ---------------------------------------------------------------------------
// Actor execution unit. tick() advances one environment step so a
// deterministic runner can interleave a fleet; run_actor() wraps it into the
// standalone blocking loop. Checkpoints are adopted only between episodes,
// after hash verification; a corrupted or stale delta falls back to the full
// checkpoint in the store, and failing that keeps the current params.

class Actor {
 public:
  struct Counters {
    uint64_t episodes_started = 0;
    uint64_t episodes_completed = 0;
    uint64_t episodes_uploaded = 0;
    uint64_t episodes_dropped = 0;
    uint64_t intervention_frames = 0;
    uint64_t env_steps = 0;
    uint64_t checkpoint_adoptions = 0;
    uint64_t checkpoint_rejections = 0;
    uint64_t upload_failures = 0;
  };

  Actor(ActorConfig config, WorldConfig world, PolicyParams initial_params,
        BusClient& bus, BlobStore& store)
      : config_(std::move(config)),
        world_(world),
        params_(std::move(initial_params)),
        bus_(bus),
        store_(store),
        rng_(make_rng({0xac7057ULL, config_.rng_seed})) {
    domain_ = sample_domain(config_.task_id, config_.domain_seed, world_);
    field_ = DistanceField(domain_);
    params_sub_ = bus_.subscribe(kParamsTopic, SubMode::Fanout);
  }

  const PolicyParams& params() const { return params_; }
  const DomainParam& domain() const { return domain_; }
  const Counters& counters() const { return counters_; }
  const std::vector<EpisodeRecord>& completed_log() const { return completed_log_; }
  void set_keep_completed_log(bool keep) { keep_log_ = keep; }

  /// One environment step; handles episode boundaries internally.
  void tick() {
    if (!episode_active_) begin_episode();

    bool expert_turn = config_.intervention_enabled &&
                       gate_->update(field_.distance(state_.agent_cell));
    Action action = expert_turn
                        ? expert_action(state_, domain_, field_)
                        : select_action(params_, obs_, config_.rollout_mode,
                                        config_.recap_beta, rng_);
    uint32_t frame_index = static_cast<uint32_t>(record_.frames.size());
    if (expert_turn && !span_start_) span_start_ = frame_index;
    if (!expert_turn && span_start_) {
      record_.intervention_spans.emplace_back(*span_start_, frame_index);
      span_start_.reset();
    }

    StepResult result = step(state_, action, domain_, world_, rng_);
    Frame frame;
    frame.observation = std::move(obs_);
    frame.action = action;
    frame.reward = result.reward;
    frame.expert_flag = expert_turn;
    if (expert_turn) ++counters_.intervention_frames;
    record_.frames.push_back(std::move(frame));
    obs_ = std::move(result.next_observation);
    ++counters_.env_steps;

    if (result.status != EpisodeStatus::Running) finish_episode(result.status);
  }

  /// Retries any episodes that failed to upload earlier.
  void flush_uploads() {
    while (!upload_queue_.empty()) {
      if (!try_upload(upload_queue_.front())) return;
      upload_queue_.pop_front();
    }
  }

  size_t pending_uploads() const { return upload_queue_.size(); }
  bool episode_in_progress() const { return episode_active_; }

 private:
  void begin_episode() {
    adopt_latest_checkpoint();
    flush_uploads();
    state_ = reset_env(domain_, world_, rng_);
    state_.horizon = config_.horizon;
    obs_ = make_observation(state_, domain_, world_, rng_);
    gate_.emplace(config_.gate_window);
    record_ = EpisodeRecord{};
    record_.episode_id = random_episode_id(rng_);
    record_.task_id = domain_.task_id;
    record_.domain_seed = config_.domain_seed;
    record_.policy_version = params_.version;
    record_.source = EpisodeSource::Online;
    span_start_.reset();
    episode_active_ = true;
    ++counters_.episodes_started;
  }

  void finish_episode(EpisodeStatus status) {
    if (span_start_) {
      record_.intervention_spans.emplace_back(
          *span_start_, static_cast<uint32_t>(record_.frames.size()));
      span_start_.reset();
    }
    record_.status = status;
    record_.sim_duration = record_.frames.size();
    episode_active_ = false;
    ++counters_.episodes_completed;
    if (keep_log_) completed_log_.push_back(record_);

    upload_queue_.push_back(std::move(record_));
    if (upload_queue_.size() > config_.upload_buffer_capacity) {
      log_warn(config_.actor_id + ": upload buffer full, dropping oldest episode");
      upload_queue_.pop_front();
      ++counters_.episodes_dropped;
    }
    flush_uploads();
  }

  bool try_upload(const EpisodeRecord& rec) {
    std::string key;
    try {
      key = store_.put_episode(rec);
    } catch (const std::exception& e) {
      ++counters_.upload_failures;
      log_warn(config_.actor_id + ": episode upload failed, buffering: " + e.what());
      return false;
    }
    try {
      bus_.publish(kEpisodesTopic,
                   encode_notification({rec.episode_id, rec.task_id, key}));
    } catch (const std::exception& e) {
      ++counters_.upload_failures;
      log_warn(config_.actor_id + ": notify failed, buffering: " + std::string(e.what()));
      return false;
    }
    ++counters_.episodes_uploaded;
    return true;
  }

  /// Drains the params subscription and adopts the newest applicable
  /// parameters. Only called between episodes.
  void adopt_latest_checkpoint() {
    bool saw_update = false;
    bool need_full = false;
    PolicyParams candidate = params_;
    while (true) {
      std::optional<Envelope> env;
      try {
        env = bus_.poll(params_sub_);
      } catch (const std::exception& e) {
        // Unreachable bus: keep collecting on the current params.
        log_warn(config_.actor_id + ": params poll failed: " + std::string(e.what()));
        break;
      }
      if (!env) break;
      saw_update = true;
      try {
        if (is_checkpoint_payload(env->payload)) {
          candidate = decode_checkpoint(env->payload);
        } else {
          CheckpointDelta delta = decode_delta(env->payload);
          if (delta.new_version <= candidate.version) continue;
          candidate = apply_delta(candidate, delta);
        }
        need_full = false;
      } catch (const StaleBaseError&) {
        need_full = true;
      } catch (const IntegrityError& e) {
        ++counters_.checkpoint_rejections;
        log_warn(config_.actor_id + ": rejected corrupt checkpoint update: " + e.what());
      }
    }
    if (need_full) {
      try {
        candidate = decode_checkpoint(store_.get_bytes(kLatestCheckpointKey));
      } catch (const std::exception& e) {
        ++counters_.checkpoint_rejections;
        log_warn(config_.actor_id +
                 ": full checkpoint fetch failed, keeping current params: " + e.what());
        candidate = params_;
      }
    }
    if (saw_update && candidate.version > params_.version) {
      if (candidate.content_hash == candidate.compute_hash() && candidate.all_finite()) {
        params_ = std::move(candidate);
        ++counters_.checkpoint_adoptions;
      } else {
        ++counters_.checkpoint_rejections;
        log_warn(config_.actor_id + ": checkpoint failed verification, keeping params");
      }
    }
  }

  ActorConfig config_;
  WorldConfig world_;
  PolicyParams params_;
  BusClient& bus_;
  BlobStore& store_;
  std::mt19937_64 rng_;
  DomainParam domain_;
  DistanceField field_;
  uint64_t params_sub_ = 0;

  bool episode_active_ = false;
  EnvState state_;
  Observation obs_;
  std::optional<GateState> gate_;
  EpisodeRecord record_;
  std::optional<uint32_t> span_start_;
  std::deque<EpisodeRecord> upload_queue_;
  Counters counters_;
  bool keep_log_ = false;
  std::vector<EpisodeRecord> completed_log_;
};

// ---------------------------------------------------------------------------
// Standalone blocking loop (used by the CLI actor process).

struct RunActorOptions {
  uint64_t max_episodes = 0;  // 0 = run until stop flag
  std::function<bool()> stop = [] { return false; };
  std::function<void()> idle = [] {};
};

inline void run_actor(Actor& actor, const RunActorOptions& opts = {}) {
  while (!opts.stop()) {
    actor.tick();
    if (!actor.episode_in_progress()) {
      if (opts.max_episodes > 0 &&
          actor.counters().episodes_completed >= opts.max_episodes)
        break;
      opts.idle();
    }
  }
  actor.flush_uploads();
}

}  // namespace sop
