#pragma once

#include "piqt/pipeline.hpp"

#include <functional>
#include <string>
#include <vector>

namespace piqt {

// ---------------------------------------------------------------------------
// Evaluation rollouts. A policy sees the environment (read-only), the current
// observation/context, and an RNG; evaluation itself never touches replay or
// parameters.
// ---------------------------------------------------------------------------

using EpisodePolicy = std::function<Action(const DeskEnv &, const Observation &,
                                           const TaskContext &, std::mt19937_64 &)>;

// Greedy CEM argmax of the Q function under `params` (epsilon = 0).
EpisodePolicy greedy_policy(const Network &net, Eigen::VectorXd params, CemConfig cem);
// Uniform in the action bounds.
EpisodePolicy random_policy(CemConfig cem);
// The scripted expert (reads privileged world state; oracle for tests).
EpisodePolicy expert_policy();

struct TaskRate {
  int task_id = -1;
  std::string name;
  int episodes = 0;
  int successes = 0;
};

struct EvalReport {
  Split split = Split::Train;
  int episodes = 0;  // total across seeds
  int successes = 0;
  double success_rate = 0.0;
  double stddev_over_seeds = 0.0;  // sample stddev of per-seed rates (0 for one seed)
  std::vector<double> per_seed_rate;
  std::vector<TaskRate> per_task;  // sorted by task id
};

// Rolls out `episodes` episodes per evaluation seed, stratified over the
// split's tasks (episode e runs task ids[e % n], so every task is covered
// when episodes >= n). Returns one record per episode; `seed` holds the
// evaluation seed the episode belongs to. Throws ConfigError when the split
// has no tasks.
std::vector<EpisodeRecord> collect_episodes(const EpisodePolicy &policy, const TaskRegistry &reg,
                                            const EnvConfig &env_cfg, Split split, int episodes,
                                            const std::vector<std::uint64_t> &seeds);

EvalReport make_report(const std::vector<EpisodeRecord> &records, const TaskRegistry &reg);

// Environment configuration for evaluating one split: the train split only
// ever sees training-legal distractors, the heldout split is unrestricted.
EnvConfig eval_env_config(const RunConfig &cfg, const TaskRegistry &reg, Split split);

// ---------------------------------------------------------------------------
// Episode-level predictive-information / TD analysis: rolls greedy episodes,
// labels each transition under the lagged params, and prices an analysis
// batch of `analysis_batch` samples per episode (the episode's transitions,
// padded by sampling with replacement). Record fields mean_td_error and
// mean_infonce come from that batch; `seed` is the episode's environment
// seed. Throws ConfigError when the network has no PI heads.
// ---------------------------------------------------------------------------

std::vector<EpisodeRecord> mi_td_analysis(const Network &net, const ParameterSet &theta,
                                          const LaggedParams &lagged, const TaskRegistry &reg,
                                          const EnvConfig &env_cfg, const CemConfig &cem,
                                          const QtoptConfig &qcfg, Split split, int episodes,
                                          std::uint64_t seed, int analysis_batch = 128);

// ---------------------------------------------------------------------------
// Episode CSV, shared by eval and mi-td outputs.
// ---------------------------------------------------------------------------

inline constexpr const char *kEpisodeHeader =
    "task_id,split,success,steps,mean_td_error,mean_infonce,seed";

void write_episode_csv(const std::string &path, const std::vector<EpisodeRecord> &rows);
std::vector<EpisodeRecord> read_episode_csv(const std::string &path);  // throws ConfigError

// ---------------------------------------------------------------------------
// The compression ablation: three variants sharing seeds and budget.
//   no_aux    - plain QT-Opt objective (auxiliary off)
//   beta_0    - auxiliary on, beta = 0 (pure contrastive term)
//   beta_0.01 - auxiliary on, beta = 0.01
// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, RunConfig>> ablation_variants(const RunConfig &base);

struct AblationPoint {
  std::string variant;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  Split split = Split::Train;
  int episodes = 0;
  int successes = 0;
  std::string status = "ok";  // "partial" marks an interrupted variant
};

// Trains every variant x seed with the shared budget, evaluating the train
// split every `eval_interval` learner steps and both splits at the end.
// Requires >= 2 seeds. An exception inside one variant produces a "partial"
// point for it and the remaining variants still run.
std::vector<AblationPoint> run_ablation(const RunConfig &base,
                                        const std::vector<std::uint64_t> &seeds,
                                        int eval_episodes, std::int64_t eval_interval);

inline constexpr const char *kAblationHeader =
    "variant,seed,step,split,episodes,successes,success_rate,status";

void write_ablation_csv(const std::string &path, const std::vector<AblationPoint> &rows);
std::vector<AblationPoint> read_ablation_csv(const std::string &path);  // throws ConfigError

// ---------------------------------------------------------------------------
// CLI commands. Each returns a process exit code: 0 success, 2 invalid
// configuration or input (with a field-level message on stderr), 3 training
// aborted on a non-finite loss, 1 anything else.
// ---------------------------------------------------------------------------

int cmd_train(const std::string &config_path, const std::string &out_dir);
int cmd_eval(const std::string &checkpoint_path, const std::string &config_path,
             const std::string &split, int episodes, const std::vector<std::uint64_t> &seeds,
             const std::string &out_dir);
int cmd_mi_td(const std::string &checkpoint_path, int episodes,
              const std::vector<std::uint64_t> &seeds, const std::string &out_dir);
int cmd_ablation(const std::string &config_path, const std::vector<std::uint64_t> &seeds,
                 int episodes, const std::string &out_dir);
int cmd_gen_config(const std::string &out_path);

// Full argument parsing and dispatch for the `piqt` binary.
int run_cli(int argc, const char *const *argv);

}  // namespace piqt
