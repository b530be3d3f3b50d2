#pragma once

#include <chrono>
#include <fstream>
#include <iomanip>
#include <memory>

#include "sop/actor.hpp"
#include "sop/learner.hpp"

namespace sop {

// ---------------------------------------------------------------------------
// Experiment configuration: defaults here, overridable from a key=value file
// and CLI flags. Keys are documented in the README.

struct HarnessConfig {
  uint64_t seed = 1;
  WorldConfig world;
  TrainConfig train;
  AlgorithmSpec algo;

  int actors = 3;
  // The demo corpus is a standing asset: its seed is independent of the run
  // seed so repeated runs share one dataset, as the fraction studies require.
  uint64_t corpus_seed = 9201;
  int demo_episodes_per_task = 160;
  double demo_fraction = 1.0;
  int pretrain_steps = 4000;

  int eval_interval = 200;  // learner steps between frozen-policy evaluations
  int eval_trials = 50;
  double target_success = 0.8;
  int steps_per_sec = 30;             // env-step clock rate per actor
  double learner_steps_per_sec = 10;  // modeled learner throughput
  int gate_window = 4;
  bool intervention_enabled = true;
};

inline double parse_fraction(const std::string& text) {
  auto slash = text.find('/');
  if (slash == std::string::npos) return std::stod(text);
  double num = std::stod(text.substr(0, slash));
  double den = std::stod(text.substr(slash + 1));
  return num / den;
}

inline void apply_config_entry(HarnessConfig& cfg, const std::string& key,
                               const std::string& value) {
  auto as_int = [&] { return std::stoi(value); };
  auto as_u64 = [&] { return static_cast<uint64_t>(std::stoull(value)); };
  auto as_f64 = [&] { return std::stod(value); };

  if (key == "seed") cfg.seed = as_u64();
  else if (key == "corpus_seed") cfg.corpus_seed = as_u64();
  else if (key == "num_tasks") cfg.world.num_tasks = as_int();
  else if (key == "grid_width") cfg.world.grid_width = as_int();
  else if (key == "grid_height") cfg.world.grid_height = as_int();
  else if (key == "horizon") cfg.world.horizon = as_int();
  else if (key == "slip_lo") cfg.world.slip_lo = as_f64();
  else if (key == "slip_hi") cfg.world.slip_hi = as_f64();
  else if (key == "noise_lo") cfg.world.noise_lo = as_f64();
  else if (key == "noise_hi") cfg.world.noise_hi = as_f64();
  else if (key == "batch_size") cfg.train.batch_size = as_int();
  else if (key == "publish_interval") cfg.train.publish_interval = as_int();
  else if (key == "lr") cfg.train.learning_rate = as_f64();
  else if (key == "budget_steps") cfg.train.total_steps = as_u64();
  else if (key == "online_capacity") cfg.train.online_capacity_per_task = as_u64();
  else if (key == "alpha") cfg.train.sampler.alpha = as_f64();
  else if (key == "window") cfg.train.sampler.window = static_cast<size_t>(as_int());
  else if (key == "clip_lo") cfg.train.sampler.clip_lo = as_f64();
  else if (key == "clip_hi") cfg.train.sampler.clip_hi = as_f64();
  else if (key == "algorithm") {
    if (value == "hgdagger") cfg.algo.kind = AlgorithmSpec::Kind::HGDagger;
    else if (value == "recap") cfg.algo.kind = AlgorithmSpec::Kind::Recap;
    else throw std::invalid_argument("unknown algorithm: " + value);
  } else if (key == "gamma") cfg.algo.gamma = as_f64();
  else if (key == "beta_rollout") cfg.algo.beta_rollout = as_f64();
  else if (key == "beta_eval") cfg.algo.beta_eval = as_f64();
  else if (key.rfind("epsilon.task", 0) == 0) {
    size_t task = static_cast<size_t>(std::stoi(key.substr(12)));
    if (cfg.algo.epsilon_per_task.size() <= task)
      cfg.algo.epsilon_per_task.resize(task + 1, 0.0);
    cfg.algo.epsilon_per_task[task] = as_f64();
  } else if (key == "actors") cfg.actors = as_int();
  else if (key == "demo_episodes") cfg.demo_episodes_per_task = as_int();
  else if (key == "demo_fraction") cfg.demo_fraction = parse_fraction(value);
  else if (key == "pretrain_steps") cfg.pretrain_steps = as_int();
  else if (key == "eval_interval") cfg.eval_interval = as_int();
  else if (key == "eval_trials") cfg.eval_trials = as_int();
  else if (key == "target_success") cfg.target_success = as_f64();
  else if (key == "steps_per_sec") cfg.steps_per_sec = as_int();
  else if (key == "learner_steps_per_sec") cfg.learner_steps_per_sec = as_f64();
  else if (key == "gate_window") cfg.gate_window = as_int();
  else if (key == "interventions") cfg.intervention_enabled = value == "on" || value == "1";
  else if (key == "active_tasks") {
    cfg.train.active_tasks.clear();
    std::stringstream ss(value);
    std::string tok;
    while (std::getline(ss, tok, ',')) cfg.train.active_tasks.push_back(std::stoi(tok));
  } else {
    throw std::invalid_argument("unknown config key: " + key);
  }
}

inline HarnessConfig load_config(const std::filesystem::path& path,
                                 HarnessConfig cfg = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t\r");
      size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) continue;
    try {
      apply_config_entry(cfg, key, value);
    } catch (const std::exception& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": " +
                                  e.what());
    }
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Expert demo corpus: deterministic from (seed, task, index). Demos carry
// source=Offline, no intervention spans, and fresh domains per episode.

inline EpisodeRecord expert_rollout(const DomainParam& domain, const WorldConfig& world,
                                    uint64_t rng_seed) {
  auto rng = make_rng({0xdee9cafeULL, rng_seed});
  DistanceField field(domain);
  EnvState state = reset_env(domain, world, rng);
  Observation obs = make_observation(state, domain, world, rng);

  EpisodeRecord rec;
  rec.episode_id = random_episode_id(rng);
  rec.task_id = domain.task_id;
  rec.domain_seed = domain.obstacle_seed;
  rec.policy_version = 0;
  rec.source = EpisodeSource::Offline;

  EpisodeStatus status = EpisodeStatus::Running;
  while (status == EpisodeStatus::Running) {
    Action action = expert_action(state, domain, field);
    StepResult result = step(state, action, domain, world, rng);
    Frame frame;
    frame.observation = std::move(obs);
    frame.action = action;
    frame.reward = result.reward;
    rec.frames.push_back(std::move(frame));
    obs = std::move(result.next_observation);
    status = result.status;
  }
  rec.status = status;
  rec.sim_duration = rec.frames.size();
  return rec;
}

inline std::vector<EpisodeRecord> generate_demo_corpus(const WorldConfig& world,
                                                       int episodes_per_task,
                                                       uint64_t seed) {
  std::vector<EpisodeRecord> corpus;
  corpus.reserve(static_cast<size_t>(world.num_tasks) * episodes_per_task);
  for (int task = 0; task < world.num_tasks; ++task) {
    for (int i = 0; i < episodes_per_task; ++i) {
      uint64_t demo_seed = mix_seed({0xde30ULL, seed, static_cast<uint64_t>(task),
                                     static_cast<uint64_t>(i)});
      DomainParam domain = sample_domain(task, demo_seed, world);
      corpus.push_back(expert_rollout(domain, world, demo_seed));
    }
  }
  return corpus;
}

/// Nested prefix selection, so fraction 1/8 is a subset of 1/2 of the full set.
inline std::vector<EpisodeRecord> select_fraction(std::span<const EpisodeRecord> corpus,
                                                  int num_tasks, double fraction) {
  if (fraction <= 0.0 || fraction > 1.0)
    throw std::invalid_argument("demo fraction must be in (0, 1]");
  std::vector<std::vector<const EpisodeRecord*>> per_task(static_cast<size_t>(num_tasks));
  for (const EpisodeRecord& ep : corpus)
    per_task.at(static_cast<size_t>(ep.task_id)).push_back(&ep);
  std::vector<EpisodeRecord> out;
  for (auto& list : per_task) {
    size_t keep = std::max<size_t>(1, static_cast<size_t>(
                                          std::llround(fraction * list.size())));
    keep = std::min(keep, list.size());
    for (size_t i = 0; i < keep; ++i) out.push_back(*list[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Behavior-cloning pretrain: task-balanced batches over the demo fraction,
// supervised steps on the marginal head, conditioned head initialized from it.

inline PolicyParams cmd_pretrain(const HarnessConfig& cfg,
                                 std::span<const EpisodeRecord> corpus) {
  auto selected = select_fraction(corpus, cfg.world.num_tasks, cfg.demo_fraction);
  BufferSet buffers(cfg.world.num_tasks, 1);
  for (const EpisodeRecord& ep : selected) buffers.load_offline(ep);
  buffers.seal_offline();
  SamplerState sampler(cfg.world.num_tasks, cfg.train.sampler);

  std::vector<int> tasks;
  for (int t = 0; t < cfg.world.num_tasks; ++t) tasks.push_back(t);
  auto rng = make_rng({0x9e7a11ULL, cfg.seed});

  PolicyParams params = PolicyParams::zeros(kNumActions, cfg.world.feature_dim());
  for (int step = 0; step < cfg.pretrain_steps; ++step) {
    auto batch = sample_batch(buffers, sampler, tasks, cfg.train.batch_size, rng);
    params = hgdagger_update(params, batch, cfg.train.learning_rate).params;
  }
  // Mirror the marginal head into the conditioned head (indicator column 0)
  // so RECAP starts from the cloned behavior on both heads.
  const int F = params.feature_dim;
  for (int a = 0; a < params.num_actions; ++a) {
    for (int f = 0; f < F; ++f)
      params.action_weights[static_cast<size_t>(a) * (F + 1) + f] =
          params.marginal_weights[static_cast<size_t>(a) * F + f];
    params.action_weights[static_cast<size_t>(a) * (F + 1) + F] = 0.0;
  }
  params.rehash();
  return params;
}

// ---------------------------------------------------------------------------
// Frozen-policy evaluation on held-out domain seeds. Never touches the bus or
// store, so evaluation episodes cannot leak into training buffers.

struct EvalResult {
  double success_rate = 0.0;
  double throughput_eph = 0.0;  // completed episodes per simulated hour
  int trials = 0;
  uint64_t env_steps = 0;
  std::vector<EpisodeId> episode_ids;
};

inline EvalResult evaluate(const PolicyParams& params, const HarnessConfig& cfg,
                           uint64_t eval_seed) {
  std::vector<int> tasks = cfg.train.active_tasks;
  if (tasks.empty())
    for (int t = 0; t < cfg.world.num_tasks; ++t) tasks.push_back(t);

  ActorConfig rollout_cfg;
  rollout_cfg.horizon = cfg.world.horizon;
  rollout_cfg.gate_window = cfg.gate_window;
  rollout_cfg.intervention_enabled = false;
  rollout_cfg.rollout_mode = cfg.algo.kind == AlgorithmSpec::Kind::Recap
                                 ? RolloutMode::RecapSample
                                 : RolloutMode::Sample;
  rollout_cfg.recap_beta = cfg.algo.beta_eval;

  EvalResult result;
  result.trials = cfg.eval_trials;
  int successes = 0;
  for (int trial = 0; trial < cfg.eval_trials; ++trial) {
    int task = tasks[static_cast<size_t>(trial) % tasks.size()];
    // 0xe7a1 salt keeps evaluation domains disjoint from actor domains.
    uint64_t domain_seed = mix_seed({0xe7a1ULL, cfg.seed, eval_seed,
                                     static_cast<uint64_t>(trial)});
    DomainParam domain = sample_domain(task, domain_seed, cfg.world);
    auto rng = make_rng({0xe7a12ULL, cfg.seed, eval_seed, static_cast<uint64_t>(trial)});
    EpisodeRecord rec = rollout(params, domain, rollout_cfg, cfg.world, rng);
    result.env_steps += rec.frames.size();
    result.episode_ids.push_back(rec.episode_id);
    if (rec.status == EpisodeStatus::Success) ++successes;
  }
  result.success_rate = static_cast<double>(successes) / std::max(1, cfg.eval_trials);
  double sim_hours = static_cast<double>(result.env_steps) /
                     (static_cast<double>(cfg.steps_per_sec) * 3600.0);
  result.throughput_eph = sim_hours > 0 ? cfg.eval_trials / sim_hours : 0.0;
  return result;
}

// ---------------------------------------------------------------------------
// Run metrics

struct EvalPoint {
  uint64_t learner_step = 0;
  uint64_t sim_ms = 0;
  uint64_t wall_ms = 0;
  uint64_t env_steps = 0;
  double success = 0.0;
  uint64_t episodes_completed = 0;
  uint64_t interventions = 0;
  uint64_t publishes = 0;
  double throughput_eph = 0.0;
};

struct StepRow {
  uint64_t step = 0;
  uint64_t sim_ms = 0;
  uint64_t wall_ms = 0;
  double loss = 0.0;
  double online_fraction = 0.0;
  std::vector<double> mix_per_task;
  uint64_t publishes = 0;
  std::vector<size_t> online_sizes;
};

struct RunMetrics {
  std::vector<StepRow> steps;
  std::vector<EvalPoint> evals;
  std::vector<EpisodeId> eval_episode_ids;
  uint64_t episodes_completed = 0;
  uint64_t interventions = 0;
  uint64_t publishes = 0;
  uint64_t env_steps = 0;

  /// First simulated time at which evaluation success reached the target.
  std::optional<uint64_t> time_to_target_ms(double target) const {
    for (const EvalPoint& p : evals)
      if (p.success >= target) return p.sim_ms;
    return std::nullopt;
  }

  double final_success() const { return evals.empty() ? 0.0 : evals.back().success; }
};

struct RunResult {
  RunMetrics metrics;
  PolicyParams final_params;
};

// ---------------------------------------------------------------------------
// Closed-loop run: N actors + 1 learner in a deterministic lockstep
// co-simulation. Actors advance one env step per tick (parallel fleet on a
// shared clock at steps_per_sec); the learner consumes steps at its own
// modeled rate; params fan out every K learner steps; frozen evaluation every
// eval_interval steps on held-out seeds.

inline RunResult run_sop(const HarnessConfig& cfg, const PolicyParams& base,
                         std::span<const EpisodeRecord> demo_corpus,
                         const std::filesystem::path& run_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(run_dir);
  auto wall_start = std::chrono::steady_clock::now();
  auto wall_ms = [&] {
    return static_cast<uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                     std::chrono::steady_clock::now() - wall_start)
                                     .count());
  };

  SimClock clock;
  Broker broker(Broker::Options{}, clock.fn());
  broker.configure_topic(kParamsTopic, /*retain_latest=*/true);
  BlobStore store(run_dir / "store");

  InProcBus learner_bus(broker, "learner");
  Learner learner(cfg.train, cfg.algo, base, learner_bus, store, cfg.world.num_tasks,
                  cfg.seed);
  auto offline = select_fraction(demo_corpus, cfg.world.num_tasks, cfg.demo_fraction);
  learner.load_offline_corpus(offline);
  learner.prepare_value_function();
  learner.seal_offline();
  learner.broadcast_initial();

  std::vector<int> tasks = learner.active_tasks();
  std::vector<std::unique_ptr<InProcBus>> actor_buses;
  std::vector<std::unique_ptr<Actor>> actors;
  for (int i = 0; i < cfg.actors; ++i) {
    ActorConfig acfg;
    acfg.actor_id = "actor-" + std::to_string(i);
    acfg.task_id = tasks[static_cast<size_t>(i) % tasks.size()];
    acfg.domain_seed = mix_seed({0xd0317ULL, cfg.seed, static_cast<uint64_t>(i)});
    acfg.horizon = cfg.world.horizon;
    acfg.gate_window = cfg.gate_window;
    acfg.intervention_enabled = cfg.intervention_enabled;
    acfg.rollout_mode = cfg.algo.kind == AlgorithmSpec::Kind::Recap
                            ? RolloutMode::RecapSample
                            : RolloutMode::Sample;
    acfg.recap_beta = cfg.algo.beta_rollout;
    acfg.rng_seed = mix_seed({0xac7ULL, cfg.seed, static_cast<uint64_t>(i)});
    actor_buses.push_back(std::make_unique<InProcBus>(broker, acfg.actor_id));
    actors.push_back(std::make_unique<Actor>(acfg, cfg.world, base, *actor_buses.back(),
                                             store));
  }

  RunMetrics metrics;
  uint64_t eval_counter = 0;
  auto run_eval = [&] {
    PolicyParams frozen = learner.params();
    EvalResult ev = evaluate(frozen, cfg, eval_counter);
    ++eval_counter;
    EvalPoint p;
    p.learner_step = learner.steps_done();
    p.sim_ms = clock.now_ms();
    p.wall_ms = wall_ms();
    p.success = ev.success_rate;
    for (const auto& a : actors) {
      p.episodes_completed += a->counters().episodes_completed;
      p.interventions += a->counters().intervention_frames;
      p.env_steps += a->counters().env_steps;
    }
    p.publishes = learner.publishes();
    double sim_hours = static_cast<double>(clock.now_ms()) / 3600000.0;
    p.throughput_eph = sim_hours > 0 ? p.episodes_completed / sim_hours : 0.0;
    metrics.evals.push_back(p);
    metrics.eval_episode_ids.insert(metrics.eval_episode_ids.end(),
                                    ev.episode_ids.begin(), ev.episode_ids.end());
  };

  run_eval();  // budget 0 degenerates to base-policy evaluation

  uint64_t ticks = 0;
  while (learner.steps_done() < cfg.train.total_steps) {
    ++ticks;
    clock.set_ms(ticks * 1000 / static_cast<uint64_t>(cfg.steps_per_sec));
    for (auto& actor : actors) actor->tick();

    uint64_t due = static_cast<uint64_t>(static_cast<double>(clock.now_ms()) / 1000.0 *
                                         cfg.learner_steps_per_sec);
    due = std::min<uint64_t>(due, cfg.train.total_steps);
    while (learner.steps_done() < due) {
      learner.pump_ingest();
      StepMetrics sm = learner.train_step();
      StepRow row;
      row.step = sm.step;
      row.sim_ms = clock.now_ms();
      row.wall_ms = wall_ms();
      row.loss = sm.loss;
      row.online_fraction = sm.online_fraction;
      row.mix_per_task = sm.mix_per_task;
      row.publishes = sm.publishes;
      row.online_sizes = sm.online_sizes;
      metrics.steps.push_back(std::move(row));
      if (learner.steps_done() % static_cast<uint64_t>(cfg.eval_interval) == 0)
        run_eval();
    }
  }
  if (metrics.evals.empty() ||
      metrics.evals.back().learner_step != learner.steps_done())
    run_eval();

  for (auto& actor : actors) {
    actor->flush_uploads();
    metrics.episodes_completed += actor->counters().episodes_completed;
    metrics.interventions += actor->counters().intervention_frames;
    metrics.env_steps += actor->counters().env_steps;
  }
  metrics.publishes = learner.publishes();

  RunResult result{std::move(metrics), learner.params()};
  return result;
}

// ---------------------------------------------------------------------------
// Metrics persistence and the report command.

inline void write_step_csv(const RunMetrics& metrics, int num_tasks,
                           const std::filesystem::path& path) {
  std::ofstream out(path);
  out << "step,sim_ms,wall_ms,loss,online_fraction";
  for (int t = 0; t < num_tasks; ++t) out << ",mix_task" << t;
  out << ",publishes";
  for (int t = 0; t < num_tasks; ++t) out << ",online_size" << t;
  out << "\n";
  out << std::setprecision(10);
  for (const StepRow& r : metrics.steps) {
    out << r.step << "," << r.sim_ms << "," << r.wall_ms << "," << r.loss << ","
        << r.online_fraction;
    for (double m : r.mix_per_task) out << "," << m;
    out << "," << r.publishes;
    for (size_t s : r.online_sizes) out << "," << s;
    out << "\n";
  }
}

inline void write_eval_csv(const RunMetrics& metrics,
                           const std::filesystem::path& path) {
  std::ofstream out(path);
  out << "learner_step,sim_ms,wall_ms,env_steps,eval_success_rate,"
         "episodes_completed,interventions_count,publishes,throughput_eph\n";
  out << std::setprecision(10);
  for (const EvalPoint& p : metrics.evals) {
    out << p.learner_step << "," << p.sim_ms << "," << p.wall_ms << "," << p.env_steps
        << "," << p.success << "," << p.episodes_completed << "," << p.interventions
        << "," << p.publishes << "," << p.throughput_eph << "\n";
  }
}

struct ReportRow {
  std::string run;
  double final_success = 0.0;
  std::optional<uint64_t> time_to_target_ms;
  double throughput_eph = 0.0;
  std::optional<double> speedup;  // vs the first (baseline) run
};

inline std::vector<EvalPoint> read_eval_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file " + path.string());
  std::vector<EvalPoint> points;
  std::string line;
  bool header = true;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    std::vector<std::string> cols;
    while (std::getline(ss, tok, ',')) cols.push_back(tok);
    if (cols.size() < 9) {
      log_warn(path.string() + ":" + std::to_string(lineno) + ": malformed row skipped");
      continue;
    }
    try {
      EvalPoint p;
      p.learner_step = std::stoull(cols[0]);
      p.sim_ms = std::stoull(cols[1]);
      p.wall_ms = std::stoull(cols[2]);
      p.env_steps = std::stoull(cols[3]);
      p.success = std::stod(cols[4]);
      p.episodes_completed = std::stoull(cols[5]);
      p.interventions = std::stoull(cols[6]);
      p.publishes = std::stoull(cols[7]);
      p.throughput_eph = std::stod(cols[8]);
      points.push_back(p);
    } catch (const std::exception&) {
      log_warn(path.string() + ":" + std::to_string(lineno) + ": malformed row skipped");
    }
  }
  if (points.empty()) throw std::invalid_argument("empty metrics file " + path.string());
  return points;
}

inline std::vector<ReportRow> cmd_report(std::span<const std::filesystem::path> files,
                                         double target) {
  if (files.empty()) throw std::invalid_argument("report: need at least one metrics file");
  std::vector<ReportRow> rows;
  std::optional<uint64_t> baseline_ttt;
  for (size_t i = 0; i < files.size(); ++i) {
    auto points = read_eval_csv(files[i]);
    ReportRow row;
    row.run = files[i].string();
    row.final_success = points.back().success;
    row.throughput_eph = points.back().throughput_eph;
    for (const EvalPoint& p : points)
      if (p.success >= target) {
        row.time_to_target_ms = p.sim_ms;
        break;
      }
    if (i == 0) {
      baseline_ttt = row.time_to_target_ms;
    } else if (files.size() > 1 && baseline_ttt && row.time_to_target_ms &&
               *row.time_to_target_ms > 0) {
      row.speedup = static_cast<double>(*baseline_ttt) /
                    static_cast<double>(*row.time_to_target_ms);
    }
    if (i == 0 && files.size() > 1) row.speedup = 1.0;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_report_csv(std::span<const ReportRow> rows, std::ostream& out) {
  out << "run,final_success,time_to_target_ms,throughput_eph,speedup\n";
  out << std::setprecision(10);
  for (const ReportRow& r : rows) {
    out << r.run << "," << r.final_success << ",";
    if (r.time_to_target_ms) out << *r.time_to_target_ms;
    out << "," << r.throughput_eph << ",";
    if (r.speedup) out << *r.speedup;
    out << "\n";
  }
}

}  // namespace sop
