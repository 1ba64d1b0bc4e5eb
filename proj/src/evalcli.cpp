#include "piqt/evalcli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

namespace piqt {

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

EpisodePolicy greedy_policy(const Network &net, Eigen::VectorXd params, CemConfig cem) {
  return [&net, params = std::move(params), cem](const DeskEnv &, const Observation &obs,
                                                 const TaskContext &ctx, std::mt19937_64 &rng) {
    return policy_action(net, params, obs, ctx, cem, rng);
  };
}

EpisodePolicy random_policy(CemConfig cem) {
  return [cem](const DeskEnv &, const Observation &, const TaskContext &, std::mt19937_64 &rng) {
    return uniform_action(cem, rng);
  };
}

EpisodePolicy expert_policy() {
  return [](const DeskEnv &env, const Observation &, const TaskContext &, std::mt19937_64 &) {
    return expert_action(env.world(), env.task(), env.config());
  };
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

EnvConfig eval_env_config(const RunConfig &cfg, const TaskRegistry &reg, Split split) {
  EnvConfig env = cfg.env;
  env.distractor_pool = split == Split::Train ? reg.train_distractor_pool : std::vector<int>{};
  return env;
}

std::vector<EpisodeRecord> collect_episodes(const EpisodePolicy &policy, const TaskRegistry &reg,
                                            const EnvConfig &env_cfg, Split split, int episodes,
                                            const std::vector<std::uint64_t> &seeds) {
  const auto &ids = reg.ids(split);
  if (ids.empty())
    throw ConfigError(std::string("evaluation split '") +
                      (split == Split::Train ? "train" : "heldout") + "' has no tasks");
  if (episodes < 1) throw ConfigError("evaluation needs at least one episode");
  if (seeds.empty()) throw ConfigError("evaluation needs at least one seed");

  std::vector<EpisodeRecord> records;
  records.reserve(static_cast<std::size_t>(episodes) * seeds.size());
  for (const std::uint64_t seed : seeds) {
    std::mt19937_64 rng(seed);
    DeskEnv env(env_cfg);
    for (int e = 0; e < episodes; ++e) {
      const int task_id = ids[static_cast<std::size_t>(e) % ids.size()];
      const std::uint64_t episode_seed = rng();
      auto [obs, ctx] = env.reset(reg.task(task_id), episode_seed);
      EpisodeRecord rec;
      rec.task_id = task_id;
      rec.split = split;
      rec.seed = seed;
      while (!env.episode_done()) {
        const Action a = policy(env, obs, ctx, rng);
        const auto res = env.step(a);
        obs = res.obs;
        ++rec.steps;
        if (res.done) rec.success = res.reward == 1.0 ? 1 : 0;
      }
      records.push_back(rec);
    }
  }
  return records;
}

EvalReport make_report(const std::vector<EpisodeRecord> &records, const TaskRegistry &reg) {
  EvalReport report;
  if (records.empty()) return report;
  report.split = records.front().split;

  std::map<std::uint64_t, std::pair<int, int>> by_seed;  // successes, episodes
  std::map<int, TaskRate> by_task;
  for (const auto &r : records) {
    report.episodes += 1;
    report.successes += r.success;
    auto &[s, n] = by_seed[r.seed];
    s += r.success;
    n += 1;
    auto &t = by_task[r.task_id];
    t.task_id = r.task_id;
    t.episodes += 1;
    t.successes += r.success;
  }
  report.success_rate = static_cast<double>(report.successes) / report.episodes;
  for (const auto &[seed, sn] : by_seed)
    report.per_seed_rate.push_back(static_cast<double>(sn.first) / sn.second);
  if (report.per_seed_rate.size() > 1) {
    double mean = 0.0;
    for (double r : report.per_seed_rate) mean += r;
    mean /= static_cast<double>(report.per_seed_rate.size());
    double ss = 0.0;
    for (double r : report.per_seed_rate) ss += (r - mean) * (r - mean);
    report.stddev_over_seeds =
        std::sqrt(ss / static_cast<double>(report.per_seed_rate.size() - 1));
  }
  for (auto &[id, rate] : by_task) {
    rate.name = reg.task(id).name();
    report.per_task.push_back(rate);
  }
  return report;
}

// ---------------------------------------------------------------------------
// MI / TD analysis
// ---------------------------------------------------------------------------

std::vector<EpisodeRecord> mi_td_analysis(const Network &net, const ParameterSet &theta,
                                          const LaggedParams &lagged, const TaskRegistry &reg,
                                          const EnvConfig &env_cfg, const CemConfig &cem,
                                          const QtoptConfig &qcfg, Split split, int episodes,
                                          std::uint64_t seed, int analysis_batch) {
  if (!net.config().pi_heads)
    throw ConfigError(
        "the predictive-information analysis needs a network with PI heads; "
        "this checkpoint was trained without the auxiliary");
  if (analysis_batch < 1) throw ConfigError("analysis batch size must be >= 1");
  const auto &ids = reg.ids(split);
  if (ids.empty()) throw ConfigError("analysis split has no tasks");

  QtoptConfig acfg = qcfg;
  acfg.aux_on = true;
  acfg.ceb.deterministic_forward = true;  // mean encoder direction: repeatable analysis

  std::mt19937_64 rng(seed);
  DeskEnv env(env_cfg);
  std::vector<EpisodeRecord> records;
  records.reserve(static_cast<std::size_t>(episodes));
  for (int e = 0; e < episodes; ++e) {
    const int task_id = ids[static_cast<std::size_t>(e) % ids.size()];
    const std::uint64_t episode_seed = rng();
    auto [obs, ctx] = env.reset(reg.task(task_id), episode_seed);

    EpisodeRecord rec;
    rec.task_id = task_id;
    rec.split = split;
    rec.seed = episode_seed;

    std::vector<LabeledSample> samples;
    while (!env.episode_done()) {
      const Action a = policy_action(net, theta.values, obs, ctx, cem, rng);
      const auto res = env.step(a);
      Transition t;
      t.s = obs;
      t.a = a;
      t.r = res.reward;
      t.done = res.done;
      t.s_next = res.obs;
      t.context = ctx;
      t.task_id = task_id;
      const BellmanResult label = bellman_target(net, t, lagged, acfg.gamma, cem, rng);
      samples.push_back({std::move(t), label.q_target, label.a_next, label.target_version});
      obs = res.obs;
      ++rec.steps;
      if (res.done) rec.success = res.reward == 1.0 ? 1 : 0;
    }

    // Analysis batch: the episode's transitions, padded by resampling.
    std::vector<LabeledSample> batch;
    batch.reserve(static_cast<std::size_t>(analysis_batch));
    for (std::size_t i = 0; i < samples.size() && batch.size() < std::size_t(analysis_batch); ++i)
      batch.push_back(samples[i]);
    std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
    while (batch.size() < std::size_t(analysis_batch)) batch.push_back(samples[pick(rng)]);

    const LossOutput out =
        combined_loss(net, batch, acfg, theta.values, lagged, nullptr, nullptr);
    rec.mean_td_error = out.td_error_mean;
    rec.mean_infonce = out.infonce;
    records.push_back(rec);
  }
  return records;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace {

std::string fmt(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

std::vector<std::string> split_csv_line(const std::string &line) {
  std::vector<std::string> fields;
  std::size_t pos = 0;
  while (true) {
    const auto comma = line.find(',', pos);
    fields.push_back(line.substr(pos, comma == std::string::npos ? comma : comma - pos));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return fields;
}

std::string split_name(Split s) { return s == Split::Train ? "train" : "heldout"; }

Split split_from(const std::string &s) {
  if (s == "train") return Split::Train;
  if (s == "heldout") return Split::Heldout;
  throw ConfigError("split must be \"train\" or \"heldout\", got \"" + s + "\"");
}

}  // namespace

void write_episode_csv(const std::string &path, const std::vector<EpisodeRecord> &rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open output file: " + path);
  out << kEpisodeHeader << '\n';
  for (const auto &r : rows) {
    out << r.task_id << ',' << split_name(r.split) << ',' << r.success << ',' << r.steps << ','
        << fmt(r.mean_td_error) << ',' << fmt(r.mean_infonce) << ',' << r.seed << '\n';
  }
}

std::vector<EpisodeRecord> read_episode_csv(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open episode file: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kEpisodeHeader)
    throw ConfigError("episode file " + path + " has an unexpected header");
  std::vector<EpisodeRecord> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 7) throw ConfigError("episode file " + path + ": malformed row '" + line + "'");
    try {
      EpisodeRecord r;
      r.task_id = std::stoi(f[0]);
      r.split = split_from(f[1]);
      r.success = std::stoi(f[2]);
      r.steps = std::stoi(f[3]);
      r.mean_td_error = std::stod(f[4]);
      r.mean_infonce = std::stod(f[5]);
      r.seed = std::stoull(f[6]);
      rows.push_back(r);
    } catch (const ConfigError &) {
      throw;
    } catch (const std::exception &) {
      throw ConfigError("episode file " + path + ": malformed row '" + line + "'");
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, RunConfig>> ablation_variants(const RunConfig &base) {
  RunConfig no_aux = base;
  no_aux.auxiliary = false;
  RunConfig beta0 = base;
  beta0.auxiliary = true;
  beta0.beta = 0.0;
  RunConfig beta001 = beta0;  // differs from beta_0 only in the beta field
  beta001.beta = 0.01;
  return {{"no_aux", no_aux}, {"beta_0", beta0}, {"beta_0.01", beta001}};
}

std::vector<AblationPoint> run_ablation(const RunConfig &base,
                                        const std::vector<std::uint64_t> &seeds,
                                        int eval_episodes, std::int64_t eval_interval) {
  if (seeds.size() < 2) throw ConfigError("the ablation needs at least two seeds per variant");
  if (eval_episodes < 1) throw ConfigError("the ablation needs at least one eval episode");
  if (eval_interval < 1) throw ConfigError("the ablation eval interval must be >= 1");

  std::vector<AblationPoint> points;
  for (auto &[name, vcfg] : ablation_variants(base)) {
    for (const std::uint64_t seed : seeds) {
      RunConfig cfg = vcfg;
      cfg.seed = seed;
      cfg.metrics_path.clear();     // the ablation CSV is the artifact
      cfg.checkpoint_path.clear();
      Trainer trainer(cfg);
      const TaskRegistry &reg = trainer.registry();
      const EnvConfig train_env = eval_env_config(cfg, reg, Split::Train);
      const EnvConfig held_env = eval_env_config(cfg, reg, Split::Heldout);

      auto eval_point = [&](Split split, const EnvConfig &env) {
        const auto policy = greedy_policy(trainer.net(), trainer.theta().values, cfg.cem);
        const auto recs =
            collect_episodes(policy, reg, env, split, eval_episodes, {seed});
        AblationPoint p;
        p.variant = name;
        p.seed = seed;
        p.step = trainer.step();
        p.split = split;
        p.episodes = static_cast<int>(recs.size());
        for (const auto &r : recs) p.successes += r.success;
        points.push_back(std::move(p));
      };

      try {
        while (trainer.step() < cfg.total_steps) {
          trainer.run_until(trainer.step() + eval_interval);
          eval_point(Split::Train, train_env);
        }
        if (!reg.heldout_ids.empty()) eval_point(Split::Heldout, held_env);
      } catch (const std::exception &) {
        AblationPoint p;
        p.variant = name;
        p.seed = seed;
        p.step = trainer.step();
        p.split = Split::Train;
        p.status = "partial";
        points.push_back(std::move(p));
      }
    }
  }
  return points;
}

void write_ablation_csv(const std::string &path, const std::vector<AblationPoint> &rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open output file: " + path);
  out << kAblationHeader << '\n';
  for (const auto &p : rows) {
    const double rate = p.episodes > 0 ? static_cast<double>(p.successes) / p.episodes : 0.0;
    out << p.variant << ',' << p.seed << ',' << p.step << ',' << split_name(p.split) << ','
        << p.episodes << ',' << p.successes << ',' << fmt(rate) << ',' << p.status << '\n';
  }
}

std::vector<AblationPoint> read_ablation_csv(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open ablation file: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kAblationHeader)
    throw ConfigError("ablation file " + path + " has an unexpected header");
  std::vector<AblationPoint> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 8)
      throw ConfigError("ablation file " + path + ": malformed row '" + line + "'");
    try {
      AblationPoint p;
      p.variant = f[0];
      p.seed = std::stoull(f[1]);
      p.step = std::stoll(f[2]);
      p.split = split_from(f[3]);
      p.episodes = std::stoi(f[4]);
      p.successes = std::stoi(f[5]);
      p.status = f[7];
      rows.push_back(p);
    } catch (const ConfigError &) {
      throw;
    } catch (const std::exception &) {
      throw ConfigError("ablation file " + path + ": malformed row '" + line + "'");
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

namespace {

template <class F>
int guarded(F &&body) {
  try {
    return body();
  } catch (const TrainingError &e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return 3;
  } catch (const ConfigError &e) {
    std::cerr << "invalid configuration: " << e.what() << '\n';
    return 2;
  } catch (const UsageError &e) {
    std::cerr << "invalid usage: " << e.what() << '\n';
    return 2;
  } catch (const CheckpointError &e) {
    std::cerr << "bad checkpoint: " << e.what() << '\n';
    return 2;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

std::string join_path(const std::string &dir, const std::string &leaf) {
  return (std::filesystem::path(dir) / leaf).string();
}

// Loads the run configuration either from --config or from the checkpoint's
// embedded copy.
RunConfig config_for_checkpoint(const CheckpointContents &ck, const std::string &config_path) {
  if (!config_path.empty()) return load_run_config(config_path);
  if (!ck.meta.contains("run_config"))
    throw CheckpointError("checkpoint carries no embedded run configuration; pass --config");
  RunConfig cfg;
  try {
    ck.meta.at("run_config").get_to(cfg);
  } catch (const ConfigError &) {
    throw;
  } catch (const std::exception &e) {
    throw CheckpointError(std::string("embedded run configuration is malformed: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void print_report(const EvalReport &report) {
  std::cout << "split=" << split_name(report.split) << " episodes=" << report.episodes
            << " success_rate=" << std::setprecision(6) << report.success_rate;
  if (report.per_seed_rate.size() > 1)
    std::cout << " stddev_over_seeds=" << report.stddev_over_seeds;
  std::cout << '\n';
  for (const auto &t : report.per_task)
    std::cout << "  task " << t.task_id << " (" << t.name << "): " << t.successes << "/"
              << t.episodes << '\n';
}

}  // namespace

int cmd_train(const std::string &config_path, const std::string &out_dir) {
  return guarded([&] {
    RunConfig cfg = load_run_config(config_path);
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      if (cfg.metrics_path.empty()) cfg.metrics_path = join_path(out_dir, "metrics.csv");
      if (cfg.checkpoint_path.empty()) cfg.checkpoint_path = join_path(out_dir, "final.ckpt");
    }
    Trainer trainer(cfg);
    const PipelineStats s = trainer.run();
    std::cout << "trained " << s.steps << " learner steps over " << s.env_steps
              << " environment steps (" << s.episodes << " episodes, " << s.successes
              << " successes)\n";
    if (!cfg.metrics_path.empty()) std::cout << "metrics: " << cfg.metrics_path << '\n';
    if (!cfg.checkpoint_path.empty()) std::cout << "checkpoint: " << cfg.checkpoint_path << '\n';
    return 0;
  });
}

int cmd_eval(const std::string &checkpoint_path, const std::string &config_path,
             const std::string &split, int episodes, const std::vector<std::uint64_t> &seeds,
             const std::string &out_dir) {
  return guarded([&] {
    const Split sp = split_from(split);
    const CheckpointContents ck = load_checkpoint(checkpoint_path);
    const RunConfig cfg = config_for_checkpoint(ck, config_path);
    const Network net(ck.net);
    const TaskRegistry reg = make_task_registry(cfg.registry);

    const auto records =
        collect_episodes(greedy_policy(net, ck.theta.values, cfg.cem), reg,
                         eval_env_config(cfg, reg, sp), sp, episodes, seeds);
    const EvalReport report = make_report(records, reg);
    print_report(report);
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      const std::string path = join_path(out_dir, "eval_" + split_name(sp) + ".csv");
      write_episode_csv(path, records);
      std::cout << "episodes: " << path << '\n';
    }
    return 0;
  });
}

int cmd_mi_td(const std::string &checkpoint_path, int episodes,
              const std::vector<std::uint64_t> &seeds, const std::string &out_dir) {
  return guarded([&] {
    const CheckpointContents ck = load_checkpoint(checkpoint_path);
    const RunConfig cfg = config_for_checkpoint(ck, "");
    if (!cfg.auxiliary || !ck.net.pi_heads)
      throw ConfigError(
          "mi-td needs a checkpoint from an auxiliary-enabled run (PI heads present)");
    const Network net(ck.net);
    const TaskRegistry reg = make_task_registry(cfg.registry);

    LaggedParams lagged;
    lagged.theta1 = ck.theta1;
    lagged.theta2 = ck.theta2;
    lagged.tau = cfg.tau;
    lagged.period = cfg.snapshot_period;
    lagged.source_version = ck.meta.value("lagged_source_version", ck.theta.version);

    std::vector<EpisodeRecord> records;
    for (const std::uint64_t seed : seeds.empty() ? std::vector<std::uint64_t>{1} : seeds) {
      const auto part =
          mi_td_analysis(net, ck.theta, lagged, reg, eval_env_config(cfg, reg, Split::Train),
                         cfg.cem, cfg.qtopt(), Split::Train, episodes, seed);
      records.insert(records.end(), part.begin(), part.end());
    }

    double mi_success = 0.0, mi_failure = 0.0;
    int n_success = 0, n_failure = 0;
    for (const auto &r : records) {
      if (r.success) {
        mi_success += r.mean_infonce;
        ++n_success;
      } else {
        mi_failure += r.mean_infonce;
        ++n_failure;
      }
    }
    std::cout << "episodes=" << records.size();
    if (n_success > 0) std::cout << " mean_mi_success=" << mi_success / n_success;
    if (n_failure > 0) std::cout << " mean_mi_failure=" << mi_failure / n_failure;
    std::cout << '\n';

    const std::string dir = out_dir.empty() ? "." : out_dir;
    std::filesystem::create_directories(dir);
    const std::string path = join_path(dir, "mi_td.csv");
    write_episode_csv(path, records);
    std::cout << "records: " << path << '\n';
    return 0;
  });
}

int cmd_ablation(const std::string &config_path, const std::vector<std::uint64_t> &seeds,
                 int episodes, const std::string &out_dir) {
  return guarded([&] {
    const RunConfig base = load_run_config(config_path);
    const std::int64_t interval =
        base.checkpoint_interval > 0 ? base.checkpoint_interval : base.total_steps;
    const auto points = run_ablation(base, seeds, episodes, interval);

    const std::string dir = out_dir.empty() ? "." : out_dir;
    std::filesystem::create_directories(dir);
    const std::string path = join_path(dir, "ablation.csv");
    write_ablation_csv(path, points);
    std::cout << "ablation: " << path << '\n';

    bool partial = false;
    for (const auto &p : points) {
      if (p.status != "ok") partial = true;
      if (p.step == base.total_steps || p.status != "ok") {
        const double rate = p.episodes > 0 ? double(p.successes) / p.episodes : 0.0;
        std::cout << p.variant << " seed=" << p.seed << " step=" << p.step << " "
                  << split_name(p.split) << " rate=" << rate << " [" << p.status << "]\n";
      }
    }
    if (partial) {
      std::cerr << "one or more variants were interrupted; results are partial\n";
      return 1;
    }
    return 0;
  });
}

int cmd_gen_config(const std::string &out_path) {
  return guarded([&] {
    const RunConfig cfg;  // documented defaults
    nlohmann::json j;
    to_json(j, cfg);
    const std::string path = out_path.empty() ? "piqt_config.json" : out_path;
    if (const auto parent = std::filesystem::path(path).parent_path(); !parent.empty())
      std::filesystem::create_directories(parent);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ConfigError("cannot open output file: " + path);
    out << j.dump(2) << '\n';
    std::cout << "wrote " << path << '\n';
    return 0;
  });
}

}  // namespace piqt

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

#include <CLI11.hpp>

namespace piqt {

int run_cli(int argc, const char *const *argv) {
  CLI::App app{"Task-conditioned QT-Opt with a predictive-information auxiliary"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, out_dir, split = "train", gen_out;
  int eval_episodes = 200;
  int mitd_episodes = 50;
  int abl_episodes = 20;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::uint64_t> mitd_seeds{1};

  auto *train = app.add_subcommand("train", "Run the training pipeline from a JSON config");
  train->add_option("--config", config_path, "Run configuration (JSON)")->required();
  train->add_option("--out", out_dir, "Directory for metrics/checkpoint when the config names none");

  auto *eval = app.add_subcommand("eval", "Roll out a checkpoint's greedy policy on one split");
  eval->add_option("--checkpoint", checkpoint_path, "Checkpoint to evaluate")->required();
  eval->add_option("--config", config_path, "Override the checkpoint's embedded configuration");
  eval->add_option("--split", split, "train or heldout (default train)");
  eval->add_option("--episodes", eval_episodes, "Episodes per seed (default 200)");
  eval->add_option("--seeds", seeds, "Evaluation seeds (default 1,2,3)")->delimiter(',');
  eval->add_option("--out", out_dir, "Directory for the per-episode CSV");

  auto *mitd = app.add_subcommand("mi-td", "Per-episode MI / TD analysis of a checkpoint");
  mitd->add_option("--checkpoint", checkpoint_path, "Auxiliary-enabled checkpoint")->required();
  mitd->add_option("--episodes", mitd_episodes, "Episodes per seed (default 50)");
  mitd->add_option("--seeds", mitd_seeds, "Analysis seeds (default 1)")->delimiter(',');
  mitd->add_option("--out", out_dir, "Directory for mi_td.csv (default .)");

  auto *abl = app.add_subcommand("ablation", "Train and compare no_aux / beta_0 / beta_0.01");
  abl->add_option("--config", config_path, "Base run configuration (JSON)")->required();
  abl->add_option("--seeds", seeds, "Training seeds, >= 2 (default 1,2,3)")->delimiter(',');
  abl->add_option("--episodes", abl_episodes, "Eval episodes per point (default 20)");
  abl->add_option("--out", out_dir, "Directory for ablation.csv (default .)");

  auto *gen = app.add_subcommand("gen-config", "Write a run configuration with the defaults");
  gen->add_option("--out", gen_out, "Output file (default piqt_config.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // bad flags are a configuration problem
  }

  if (app.got_subcommand(train)) return cmd_train(config_path, out_dir);
  if (app.got_subcommand(eval))
    return cmd_eval(checkpoint_path, config_path, split, eval_episodes, seeds, out_dir);
  if (app.got_subcommand(mitd))
    return cmd_mi_td(checkpoint_path, mitd_episodes, mitd_seeds, out_dir);
  if (app.got_subcommand(abl)) return cmd_ablation(config_path, seeds, abl_episodes, out_dir);
  if (app.got_subcommand(gen)) return cmd_gen_config(gen_out);
  return 2;
}

}  // namespace piqt
