#pragma once

#include "piqt/env.hpp"
#include "piqt/netcore.hpp"
#include "piqt/qtopt.hpp"
#include "piqt/replay.hpp"

#include <json.hpp>

#include <cstdint>
#include <deque>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace piqt {

// ---------------------------------------------------------------------------
// Exploration schedule: linear decay from `start` to `end` over the first
// `fraction` of the learner-step budget, then flat.
// ---------------------------------------------------------------------------

struct EpsSchedule {
  double start = 1.0;
  double end = 0.1;
  double fraction = 0.2;

  double at(std::int64_t step, std::int64_t total_steps) const;
};

// ---------------------------------------------------------------------------
// One JSON file configures the whole run.
// ---------------------------------------------------------------------------

struct RunConfig {
  // run
  std::uint64_t seed = 0;
  std::int64_t total_steps = 2000;
  int batch_size = 256;
  int publish_interval = 50;
  // workers
  int collectors = 4;
  int shards = 2;
  int updaters = 2;
  int shard_capacity = 50000;
  int train_buffer_capacity = 1024;
  int collect_steps_per_update = 8;  // degenerate mode: env steps per learner step
  int warmup_transitions = 1000;     // replay fill before the first label
  // optimizer
  double learning_rate = 9.56e-3;
  double momentum = 0.984;
  // bellman
  double gamma = 0.9;
  double tau = 0.005;
  std::int64_t snapshot_period = 500;
  // exploration
  EpsSchedule eps;
  // auxiliary
  bool auxiliary = true;
  double beta = 0.01;
  double kappa_e = 8192.0;
  double kappa_b = 7.0;
  bool deterministic_forward = true;
  double bellman_weight = 1.0;
  double ceb_weight = 0.01;
  // components
  NetworkConfig net;
  EnvConfig env;
  RegistryConfig registry;
  CemConfig cem;
  // io
  std::string metrics_path;
  std::string checkpoint_path;
  std::int64_t checkpoint_interval = 0;  // 0 = final checkpoint only

  bool degenerate() const { return collectors == 1 && shards == 1 && updaters == 1; }
  QtoptConfig qtopt() const;
  void validate() const;  // throws ConfigError with the offending field
};

void to_json(nlohmann::json &j, const RunConfig &c);
void from_json(const nlohmann::json &j, RunConfig &c);
RunConfig load_run_config(const std::string &path);  // throws ConfigError

// ---------------------------------------------------------------------------
// Versioned parameter publication: the learner stores immutable snapshots,
// everyone else reads the latest one.
// ---------------------------------------------------------------------------

struct ParamSnapshot {
  ParameterSet theta;
  LaggedParams lagged;
};

class ParamHub {
 public:
  void publish(ParamSnapshot snap);
  std::shared_ptr<const ParamSnapshot> latest() const;

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const ParamSnapshot> snap_;
};

// ---------------------------------------------------------------------------
// Policy extraction and shared helpers.
// ---------------------------------------------------------------------------

// Greedy CEM action at `obs` with the Q function under `params`.
Action policy_action(const Network &net, const Eigen::VectorXd &params, const Observation &obs,
                     const TaskContext &ctx, const CemConfig &cem, std::mt19937_64 &rng);

// Uniform draw inside the action bounds.
Action uniform_action(const CemConfig &cem, std::mt19937_64 &rng);

// Per-episode summary; training collectors fill the outcome fields, the
// analysis commands also fill the TD / information columns.
struct EpisodeRecord {
  int task_id = -1;
  Split split = Split::Train;
  int success = 0;
  int steps = 0;
  double mean_td_error = 0.0;
  double mean_infonce = 0.0;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Metrics stream: append-only CSV with a fixed schema. The auxiliary columns
// are left empty when the auxiliary is off.
// ---------------------------------------------------------------------------

inline constexpr const char *kMetricsHeader =
    "step,bellman_loss,ceb_loss,infonce,td_error_mean,eps,params_version";

struct MetricsRow {
  std::int64_t step = 0;
  double bellman_loss = 0.0;
  std::optional<double> ceb_loss;
  std::optional<double> infonce;
  double td_error_mean = 0.0;
  double eps = 0.0;
  std::uint64_t params_version = 0;
};

std::string format_metrics_row(const MetricsRow &row);
std::vector<MetricsRow> read_metrics_csv(const std::string &path);  // throws ConfigError

// ---------------------------------------------------------------------------
// The trainer: owns parameters, replay, workers, and the metrics stream.
// With counts (1,1,1) it runs a fully deterministic single-threaded loop;
// otherwise collectors/updaters run as threads against the same contracts.
// ---------------------------------------------------------------------------

struct PipelineStats {
  std::int64_t steps = 0;
  std::uint64_t episodes = 0;
  std::uint64_t successes = 0;
  std::uint64_t env_steps = 0;
  std::uint64_t labels_consumed = 0;
  std::uint64_t max_label_staleness = 0;  // theta version minus label version
  std::vector<std::uint64_t> shard_inserted;
  std::vector<std::uint64_t> shard_evicted;
  std::vector<std::uint64_t> shard_resident;
};

class Trainer {
 public:
  explicit Trainer(RunConfig cfg);
  Trainer(RunConfig cfg, const std::string &resume_path);
  ~Trainer();

  // Runs until total_steps learner updates have been taken (counting any
  // restored progress). Writes metrics/checkpoints per the io config. On a
  // non-finite loss writes a diagnostic checkpoint and throws TrainingError.
  PipelineStats run();
  // Stops early at `stop_step` (clamped to total_steps) and checkpoints, so a
  // run can be interrupted and resumed without changing the schedules, which
  // are functions of total_steps.
  PipelineStats run_until(std::int64_t stop_step);

  void save(const std::string &path) const;

  const Network &net() const { return net_; }
  const ParameterSet &theta() const { return theta_; }
  const LaggedParams &lagged() const { return lagged_; }
  const Eigen::VectorXd &momentum() const { return momentum_; }
  std::int64_t step() const { return step_; }
  const RunConfig &config() const { return cfg_; }
  const TaskRegistry &registry() const { return registry_; }
  PipelineStats stats() const;
  // Most recent finished collection episodes, oldest first (bounded window).
  std::vector<EpisodeRecord> recent_episodes() const;

 private:
  struct Collector;  // per-worker episode state

  void collect_one_step(Collector &c, std::int64_t learner_step, const Eigen::VectorXd &theta1);
  std::vector<LabeledSample> label_batch(const LaggedParams &lagged, std::mt19937_64 &rng);
  MetricsRow learn_step(const std::vector<LabeledSample> &batch, double eps_used);
  void run_degenerate(std::int64_t stop_step);
  void run_threaded(std::int64_t stop_step);
  void write_metrics(const MetricsRow &row);
  void maybe_checkpoint();
  void diagnostic_checkpoint(const std::string &why);
  std::uint64_t total_inserted() const;

  RunConfig cfg_;
  Network net_;
  TaskRegistry registry_;
  EnvConfig train_env_cfg_;
  ParameterSet theta_;
  LaggedParams lagged_;
  Eigen::VectorXd momentum_;
  std::int64_t step_ = 0;
  std::vector<std::unique_ptr<ReplayShard>> shards_;
  ParamHub hub_;
  std::mt19937_64 learner_rng_;
  // degenerate-mode persistent workers (restored from checkpoints)
  std::unique_ptr<Collector> collector_;
  std::mt19937_64 updater_rng_;
  // counters
  std::uint64_t episodes_ = 0;
  std::uint64_t successes_ = 0;
  std::uint64_t env_steps_ = 0;
  std::uint64_t labels_consumed_ = 0;
  std::uint64_t max_staleness_ = 0;
  std::deque<EpisodeRecord> recent_;
  mutable std::mutex counters_mu_;
  // metrics stream, opened lazily so a resumed run appends instead of truncating
  std::ofstream metrics_out_;
  bool resumed_metrics_ = false;
  std::int64_t last_saved_step_ = -1;
};

// Loss over a batch that may mix label versions: the batch is split into
// version-homogeneous groups, each priced by `combined_loss`, and losses and
// gradients are recombined weighted by group size. A homogeneous batch takes
// the direct path, bit-for-bit.
LossOutput grouped_combined_loss(const Network &net, const std::vector<LabeledSample> &batch,
                                 const QtoptConfig &cfg, const Eigen::VectorXd &theta,
                                 const LaggedParams &lagged, std::mt19937_64 *rng,
                                 Eigen::VectorXd *grad);

// Binary serialization of replay contents for checkpoints.
std::string serialize_shards(const std::vector<std::unique_ptr<ReplayShard>> &shards);
void deserialize_shards(const std::string &blob,
                        std::vector<std::unique_ptr<ReplayShard>> &shards);

}  // namespace piqt
