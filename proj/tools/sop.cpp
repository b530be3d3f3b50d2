// Command-line front end: pretrain / run / eval / report for experiments,
// plus standalone broker and actor processes for multi-machine deployments.

#include <CLI11.hpp>
#include <csignal>
#include <iostream>

#include "sop/bus_tcp.hpp"
#include "sop/harness.hpp"

namespace {

volatile std::sig_atomic_t g_stop = 0;

void handle_signal(int) { g_stop = 1; }

sop::HarnessConfig make_config(const std::string& config_path) {
  sop::HarnessConfig cfg;
  if (!config_path.empty()) cfg = sop::load_config(config_path, cfg);
  return cfg;
}

void write_checkpoint_file(const sop::PolicyParams& params,
                           const std::filesystem::path& path) {
  auto bytes = sop::encode_checkpoint(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw sop::IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

sop::PolicyParams read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw sop::IoError("cannot read checkpoint " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return sop::decode_checkpoint(bytes);
}

int run_pretrain(const std::string& config_path, const std::string& fraction,
                 uint64_t seed, const std::string& out_path) {
  sop::HarnessConfig cfg = make_config(config_path);
  cfg.seed = seed;
  cfg.demo_fraction = sop::parse_fraction(fraction);
  if (cfg.demo_fraction <= 0.0 || cfg.demo_fraction > 1.0) {
    std::cerr << "fraction must be in (0, 1]\n";
    return 2;
  }
  auto corpus = sop::generate_demo_corpus(cfg.world, cfg.demo_episodes_per_task, cfg.corpus_seed);
  sop::PolicyParams params = sop::cmd_pretrain(cfg, corpus);
  write_checkpoint_file(params, out_path);
  sop::EvalResult ev = sop::evaluate(params, cfg, /*eval_seed=*/0);
  std::cout << "base_checkpoint=" << out_path << " version=" << params.version
            << " eval_success=" << ev.success_rate << "\n";
  return 0;
}

int run_run(const std::string& config_path, int actors, const std::string& algo,
            uint64_t budget, uint64_t seed, const std::string& base_path,
            const std::string& out_dir, const std::string& task_filter) {
  sop::HarnessConfig cfg = make_config(config_path);
  cfg.seed = seed;
  if (actors > 0) cfg.actors = actors;
  if (budget > 0) cfg.train.total_steps = budget;
  if (!algo.empty())
    sop::apply_config_entry(cfg, "algorithm", algo);
  if (!task_filter.empty()) sop::apply_config_entry(cfg, "active_tasks", task_filter);

  sop::PolicyParams base = read_checkpoint_file(base_path);
  auto corpus = sop::generate_demo_corpus(cfg.world, cfg.demo_episodes_per_task, cfg.corpus_seed);

  sop::RunResult result = sop::run_sop(cfg, base, corpus, out_dir);
  sop::write_step_csv(result.metrics, static_cast<int>(result.metrics.steps.empty()
                                                           ? cfg.world.num_tasks
                                                           : result.metrics.steps[0]
                                                                 .mix_per_task.size()),
                      std::filesystem::path(out_dir) / "steps.csv");
  sop::write_eval_csv(result.metrics, std::filesystem::path(out_dir) / "evals.csv");
  write_checkpoint_file(result.final_params,
                        std::filesystem::path(out_dir) / "final.ckpt");

  auto ttt = result.metrics.time_to_target_ms(cfg.target_success);
  std::cout << "final_success=" << result.metrics.final_success()
            << " episodes=" << result.metrics.episodes_completed
            << " publishes=" << result.metrics.publishes << " time_to_target_ms=";
  if (ttt) std::cout << *ttt;
  else std::cout << "n/a";
  std::cout << " metrics=" << (std::filesystem::path(out_dir) / "evals.csv").string()
            << "\n";
  return 0;
}

int run_eval(const std::string& config_path, const std::string& ckpt_path, int trials,
             uint64_t seed, double beta) {
  sop::HarnessConfig cfg = make_config(config_path);
  cfg.seed = seed;
  if (trials > 0) cfg.eval_trials = trials;
  if (beta >= 0) {
    cfg.algo.kind = sop::AlgorithmSpec::Kind::Recap;
    cfg.algo.beta_eval = beta;
  }
  sop::PolicyParams params = read_checkpoint_file(ckpt_path);
  sop::EvalResult ev = sop::evaluate(params, cfg, /*eval_seed=*/seed);
  std::cout << "success_rate=" << ev.success_rate
            << " throughput_eph=" << ev.throughput_eph << " trials=" << ev.trials
            << "\n";
  return 0;
}

int run_report(const std::vector<std::string>& files, double target,
               const std::string& out_path) {
  std::vector<std::filesystem::path> paths(files.begin(), files.end());
  auto rows = sop::cmd_report(paths, target);
  if (out_path.empty()) {
    sop::write_report_csv(rows, std::cout);
  } else {
    std::ofstream out(out_path);
    sop::write_report_csv(rows, out);
    std::cout << "report=" << out_path << "\n";
  }
  return 0;
}

int run_broker(uint16_t port, double max_seconds) {
  sop::Broker broker;
  broker.configure_topic(sop::kParamsTopic, /*retain_latest=*/true);
  sop::BusServer server(broker, port);
  std::cout << "broker listening on 127.0.0.1:" << server.port() << std::endl;
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
  auto start = std::chrono::steady_clock::now();
  while (!g_stop) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    if (max_seconds > 0) {
      double elapsed = std::chrono::duration<double>(
                           std::chrono::steady_clock::now() - start)
                           .count();
      if (elapsed >= max_seconds) break;
    }
  }
  server.stop();
  return 0;
}

int run_actor_process(const std::string& config_path, const std::string& actor_id,
                      int task, const std::string& broker_addr,
                      const std::string& store_root, uint64_t seed,
                      const std::string& ckpt_path, uint64_t max_episodes) {
  sop::HarnessConfig cfg = make_config(config_path);
  auto colon = broker_addr.rfind(':');
  if (colon == std::string::npos) {
    std::cerr << "broker address must be HOST:PORT\n";
    return 2;
  }
  std::string host = broker_addr.substr(0, colon);
  uint16_t port = static_cast<uint16_t>(std::stoi(broker_addr.substr(colon + 1)));

  sop::TcpBusClient bus(host, port, actor_id);
  sop::BlobStore store(store_root);

  sop::PolicyParams initial =
      ckpt_path.empty()
          ? sop::PolicyParams::zeros(sop::kNumActions, cfg.world.feature_dim())
          : read_checkpoint_file(ckpt_path);

  sop::ActorConfig acfg;
  acfg.actor_id = actor_id;
  acfg.task_id = task;
  acfg.domain_seed = sop::mix_seed({0xd0317ULL, seed, 0});
  acfg.horizon = cfg.world.horizon;
  acfg.gate_window = cfg.gate_window;
  acfg.intervention_enabled = cfg.intervention_enabled;
  acfg.rollout_mode = cfg.algo.kind == sop::AlgorithmSpec::Kind::Recap
                          ? sop::RolloutMode::RecapSample
                          : sop::RolloutMode::Sample;
  acfg.recap_beta = cfg.algo.beta_rollout;
  acfg.rng_seed = sop::mix_seed({0xac7ULL, seed, 0});

  sop::Actor actor(acfg, cfg.world, initial, bus, store);
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
  sop::RunActorOptions opts;
  opts.max_episodes = max_episodes;
  opts.stop = [] { return g_stop != 0; };
  sop::run_actor(actor, opts);
  const auto& c = actor.counters();
  std::cout << "episodes_completed=" << c.episodes_completed
            << " uploaded=" << c.episodes_uploaded
            << " interventions=" << c.intervention_frames << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SOP closed-loop actor-learner system"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "key=value config file")->capture_default_str();

  auto* pretrain = app.add_subcommand("pretrain", "behavior-clone a base policy");
  std::string fraction = "1";
  uint64_t seed = 1;
  std::string out_path = "base.ckpt";
  pretrain->add_option("--fraction", fraction, "demo fraction, e.g. 1/8, 1/2, 1");
  pretrain->add_option("--seed", seed, "run seed");
  pretrain->add_option("--out", out_path, "output checkpoint path");

  auto* run = app.add_subcommand("run", "closed-loop post-training run");
  int actors = 0;
  std::string algo;
  uint64_t budget = 0;
  std::string base_path = "base.ckpt";
  std::string out_dir = "run-out";
  std::string task_filter;
  run->add_option("--actors", actors, "fleet size N");
  run->add_option("--algo", algo, "hgdagger|recap");
  run->add_option("--budget-steps", budget, "learner step budget");
  run->add_option("--seed", seed, "run seed");
  run->add_option("--base", base_path, "base checkpoint");
  run->add_option("--out", out_dir, "output directory");
  run->add_option("--tasks", task_filter, "comma-separated active task ids");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ckpt_path;
  int trials = 0;
  double beta = -1.0;
  eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval->add_option("--trials", trials, "number of held-out rollouts");
  eval->add_option("--seed", seed, "eval seed");
  eval->add_option("--beta", beta, "RECAP sampling beta (enables recap eval)");

  auto* report = app.add_subcommand("report", "summarize run metrics files");
  std::vector<std::string> files;
  double target = 0.8;
  std::string report_out;
  report->add_option("files", files, "evals.csv files; first is the baseline")
      ->required();
  report->add_option("--target", target, "target success level");
  report->add_option("--out", report_out, "output CSV path (default stdout)");

  auto* broker = app.add_subcommand("broker", "serve the TCP message bus");
  uint16_t port = 7471;
  double max_seconds = 0;
  broker->add_option("--port", port, "listen port (0 = ephemeral)");
  broker->add_option("--max-seconds", max_seconds, "exit after this long (0 = forever)");

  auto* actor_cmd = app.add_subcommand("actor", "standalone actor process");
  std::string actor_id = "actor-0";
  int task = 0;
  std::string broker_addr = "127.0.0.1:7471";
  std::string store_root = "sop-store";
  uint64_t max_episodes = 0;
  actor_cmd->add_option("--actor-id", actor_id, "actor identity");
  actor_cmd->add_option("--task", task, "task id this actor works");
  actor_cmd->add_option("--broker", broker_addr, "broker HOST:PORT");
  actor_cmd->add_option("--store", store_root, "blob store root directory");
  actor_cmd->add_option("--seed", seed, "actor seed");
  actor_cmd->add_option("--ckpt", ckpt_path, "initial checkpoint (else zeros)");
  actor_cmd->add_option("--max-episodes", max_episodes, "stop after this many episodes");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pretrain) return run_pretrain(config_path, fraction, seed, out_path);
    if (*run) return run_run(config_path, actors, algo, budget, seed, base_path,
                             out_dir, task_filter);
    if (*eval) return run_eval(config_path, ckpt_path, trials, seed, beta);
    if (*report) return run_report(files, target, report_out);
    if (*broker) return run_broker(port, max_seconds);
    if (*actor_cmd)
      return run_actor_process(config_path, actor_id, task, broker_addr, store_root,
                               seed, ckpt_path, max_episodes);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
