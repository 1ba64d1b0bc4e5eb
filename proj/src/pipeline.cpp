#include "piqt/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>
#include <utility>

namespace piqt {

static_assert(__BYTE_ORDER__ == __ORDER_LITTLE_ENDIAN__,
              "replay serialization assumes a little-endian host");

// ---------------------------------------------------------------------------
// Exploration schedule
// ---------------------------------------------------------------------------

double EpsSchedule::at(std::int64_t step, std::int64_t total_steps) const {
  const double horizon = fraction * static_cast<double>(total_steps);
  if (horizon <= 0.0 || static_cast<double>(step) >= horizon) return end;
  return start + (end - start) * (static_cast<double>(step) / horizon);
}

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

QtoptConfig RunConfig::qtopt() const {
  QtoptConfig q;
  q.gamma = gamma;
  q.bellman_weight = bellman_weight;
  q.ceb_weight = ceb_weight;
  q.aux_on = auxiliary;
  q.cem = cem;
  q.ceb.beta = beta;
  q.ceb.kappa_e = kappa_e;
  q.ceb.kappa_b = kappa_b;
  q.ceb.deterministic_forward = deterministic_forward;
  return q;
}

void RunConfig::validate() const {
  auto need = [](bool ok, const char *what) {
    if (!ok) throw ConfigError(std::string("config field ") + what);
  };
  need(total_steps >= 1, "run.total_steps: must be >= 1");
  need(batch_size >= 1, "run.batch_size: must be >= 1");
  need(publish_interval >= 1, "run.publish_interval: must be >= 1");
  need(collectors >= 1, "workers.collectors: must be >= 1");
  need(shards >= 1, "workers.shards: must be >= 1");
  need(updaters >= 1, "workers.updaters: must be >= 1");
  need(shard_capacity >= 1, "workers.shard_capacity: must be >= 1");
  need(train_buffer_capacity >= 1, "workers.train_buffer_capacity: must be >= 1");
  need(collect_steps_per_update >= 1, "workers.collect_steps_per_update: must be >= 1");
  need(warmup_transitions >= 1, "workers.warmup_transitions: must be >= 1");
  need(learning_rate > 0.0, "optimizer.learning_rate: must be positive");
  need(momentum >= 0.0 && momentum < 1.0, "optimizer.momentum: must lie in [0, 1)");
  need(gamma >= 0.0 && gamma <= 1.0, "bellman.gamma: must lie in [0, 1]");
  need(tau >= 0.0 && tau <= 1.0, "bellman.tau: must lie in [0, 1]");
  need(snapshot_period >= 1, "bellman.snapshot_period: must be >= 1");
  need(eps.start >= 0.0 && eps.start <= 1.0, "exploration.start: must lie in [0, 1]");
  need(eps.end >= 0.0 && eps.end <= 1.0, "exploration.end: must lie in [0, 1]");
  need(eps.fraction >= 0.0 && eps.fraction <= 1.0, "exploration.fraction: must lie in [0, 1]");
  need(beta >= 0.0, "auxiliary.beta: must be >= 0");
  need(kappa_e > 0.0, "auxiliary.kappa_e: must be positive");
  need(kappa_b > 0.0, "auxiliary.kappa_b: must be positive");
  need(bellman_weight >= 0.0, "auxiliary.bellman_weight: must be >= 0");
  need(ceb_weight >= 0.0, "auxiliary.ceb_weight: must be >= 0");
  need(cem.elites >= 1 && cem.elites < cem.samples, "cem.elites: needs 1 <= elites < samples");
  need(cem.iterations >= 1, "cem.iterations: must be >= 1");
  need(cem.init_sigma > 0.0, "cem.init_sigma: must be positive");
  need(cem.sigma_floor >= 0.0, "cem.sigma_floor: must be >= 0");
  for (int d = 0; d < kActionDim; ++d)
    need(std::isfinite(cem.lo[d]) && std::isfinite(cem.hi[d]) && cem.lo[d] <= cem.hi[d],
         "cem.lo/hi: bounds must be finite with lo <= hi");
  need(checkpoint_interval >= 0, "io.checkpoint_interval: must be >= 0");

  env.validate();
  registry.validate();

  need(net.grid_side == env.grid_side, "network.grid_side: must equal env.grid_side");
  need(net.obs_channels == 3, "network.obs_channels: the environment renders 3 channels");
  need(net.context == env.context_kind, "network.context: must match env.context");
  need(env.num_object_types >= registry.num_object_types,
       "env.num_object_types: smaller than registry.num_object_types");
  need(env.num_knockable >= registry.num_knockable,
       "env.num_knockable: smaller than registry.num_knockable");
  need(!auxiliary || net.pi_heads, "auxiliary.enabled: requires network.pi_heads");
}

// --- JSON ------------------------------------------------------------------

namespace {

void check_keys(const nlohmann::json &j, const char *scope,
                std::initializer_list<const char *> allowed) {
  if (!j.is_object()) throw ConfigError(std::string("config section '") + scope +
                                        "' must be a JSON object");
  for (const auto &el : j.items()) {
    bool known = false;
    for (const char *k : allowed)
      if (el.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError("unknown config field '" + std::string(scope) + "." + el.key() + "'");
  }
}

template <class T>
void get_field(const nlohmann::json &j, const char *scope, const char *key, T &out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const std::exception &e) {
    throw ConfigError("config field '" + std::string(scope) + "." + key + "': " + e.what());
  }
}

std::string context_name(ContextKind k) {
  return k == ContextKind::ImageMask ? "image_mask" : "embedding";
}
ContextKind context_from(const std::string &s, const char *field) {
  if (s == "image_mask") return ContextKind::ImageMask;
  if (s == "embedding") return ContextKind::Embedding;
  throw ConfigError("config field '" + std::string(field) +
                    "': must be \"image_mask\" or \"embedding\", got \"" + s + "\"");
}

}  // namespace

void to_json(nlohmann::json &j, const EnvConfig &c) {
  j = nlohmann::json{{"grid_side", c.grid_side},
                     {"height_levels", c.height_levels},
                     {"mask_size", c.mask_size},
                     {"step_limit", c.step_limit},
                     {"max_step_xy", c.max_step_xy},
                     {"max_step_z", c.max_step_z},
                     {"lift_threshold", c.lift_threshold},
                     {"near_radius", c.near_radius},
                     {"contact_radius", c.contact_radius},
                     {"contact_height", c.contact_height},
                     {"num_distractors", c.num_distractors},
                     {"num_object_types", c.num_object_types},
                     {"num_knockable", c.num_knockable},
                     {"context", context_name(c.context_kind)},
                     {"control", c.control == ControlMode::Blocking ? "blocking" : "concurrent"},
                     {"distractor_pool", c.distractor_pool}};
}

void from_json(const nlohmann::json &j, EnvConfig &c) {
  check_keys(j, "env",
             {"grid_side", "height_levels", "mask_size", "step_limit", "max_step_xy",
              "max_step_z", "lift_threshold", "near_radius", "contact_radius", "contact_height",
              "num_distractors", "num_object_types", "num_knockable", "context", "control",
              "distractor_pool"});
  get_field(j, "env", "grid_side", c.grid_side);
  get_field(j, "env", "height_levels", c.height_levels);
  get_field(j, "env", "mask_size", c.mask_size);
  get_field(j, "env", "step_limit", c.step_limit);
  get_field(j, "env", "max_step_xy", c.max_step_xy);
  get_field(j, "env", "max_step_z", c.max_step_z);
  get_field(j, "env", "lift_threshold", c.lift_threshold);
  get_field(j, "env", "near_radius", c.near_radius);
  get_field(j, "env", "contact_radius", c.contact_radius);
  get_field(j, "env", "contact_height", c.contact_height);
  get_field(j, "env", "num_distractors", c.num_distractors);
  get_field(j, "env", "num_object_types", c.num_object_types);
  get_field(j, "env", "num_knockable", c.num_knockable);
  get_field(j, "env", "distractor_pool", c.distractor_pool);
  if (j.contains("context")) {
    std::string s;
    get_field(j, "env", "context", s);
    c.context_kind = context_from(s, "env.context");
  }
  if (j.contains("control")) {
    std::string s;
    get_field(j, "env", "control", s);
    if (s == "blocking")
      c.control = ControlMode::Blocking;
    else if (s == "concurrent")
      c.control = ControlMode::Concurrent;
    else
      throw ConfigError("config field 'env.control': must be \"blocking\" or \"concurrent\"");
  }
}

void to_json(nlohmann::json &j, const RegistryConfig &c) {
  j = nlohmann::json{{"num_object_types", c.num_object_types},
                     {"num_knockable", c.num_knockable},
                     {"pick_family", c.pick_family},
                     {"move_family", c.move_family},
                     {"knock_family", c.knock_family},
                     {"holdout_fraction", c.holdout_fraction},
                     {"holdout_objects", c.holdout_objects},
                     {"split_seed", c.split_seed}};
}

void from_json(const nlohmann::json &j, RegistryConfig &c) {
  check_keys(j, "registry",
             {"num_object_types", "num_knockable", "pick_family", "move_family", "knock_family",
              "holdout_fraction", "holdout_objects", "split_seed"});
  get_field(j, "registry", "num_object_types", c.num_object_types);
  get_field(j, "registry", "num_knockable", c.num_knockable);
  get_field(j, "registry", "pick_family", c.pick_family);
  get_field(j, "registry", "move_family", c.move_family);
  get_field(j, "registry", "knock_family", c.knock_family);
  get_field(j, "registry", "holdout_fraction", c.holdout_fraction);
  get_field(j, "registry", "holdout_objects", c.holdout_objects);
  get_field(j, "registry", "split_seed", c.split_seed);
}

void to_json(nlohmann::json &j, const CemConfig &c) {
  j = nlohmann::json{{"samples", c.samples},
                     {"elites", c.elites},
                     {"iterations", c.iterations},
                     {"init_sigma", c.init_sigma},
                     {"sigma_floor", c.sigma_floor},
                     {"lo", std::vector<double>(c.lo.data(), c.lo.data() + kActionDim)},
                     {"hi", std::vector<double>(c.hi.data(), c.hi.data() + kActionDim)}};
}

void from_json(const nlohmann::json &j, CemConfig &c) {
  check_keys(j, "cem", {"samples", "elites", "iterations", "init_sigma", "sigma_floor", "lo", "hi"});
  get_field(j, "cem", "samples", c.samples);
  get_field(j, "cem", "elites", c.elites);
  get_field(j, "cem", "iterations", c.iterations);
  get_field(j, "cem", "init_sigma", c.init_sigma);
  get_field(j, "cem", "sigma_floor", c.sigma_floor);
  std::vector<double> bound;
  if (j.contains("lo")) {
    get_field(j, "cem", "lo", bound);
    if (bound.size() != kActionDim) throw ConfigError("config field 'cem.lo': needs 4 entries");
    for (int d = 0; d < kActionDim; ++d) c.lo[d] = bound[static_cast<std::size_t>(d)];
  }
  if (j.contains("hi")) {
    bound.clear();
    get_field(j, "cem", "hi", bound);
    if (bound.size() != kActionDim) throw ConfigError("config field 'cem.hi': needs 4 entries");
    for (int d = 0; d < kActionDim; ++d) c.hi[d] = bound[static_cast<std::size_t>(d)];
  }
}

void to_json(nlohmann::json &j, const RunConfig &c) {
  j = nlohmann::json{
      {"run",
       {{"seed", c.seed},
        {"total_steps", c.total_steps},
        {"batch_size", c.batch_size},
        {"publish_interval", c.publish_interval}}},
      {"workers",
       {{"collectors", c.collectors},
        {"shards", c.shards},
        {"updaters", c.updaters},
        {"shard_capacity", c.shard_capacity},
        {"train_buffer_capacity", c.train_buffer_capacity},
        {"collect_steps_per_update", c.collect_steps_per_update},
        {"warmup_transitions", c.warmup_transitions}}},
      {"optimizer", {{"learning_rate", c.learning_rate}, {"momentum", c.momentum}}},
      {"bellman",
       {{"gamma", c.gamma}, {"tau", c.tau}, {"snapshot_period", c.snapshot_period}}},
      {"exploration",
       {{"start", c.eps.start}, {"end", c.eps.end}, {"fraction", c.eps.fraction}}},
      {"auxiliary",
       {{"enabled", c.auxiliary},
        {"beta", c.beta},
        {"kappa_e", c.kappa_e},
        {"kappa_b", c.kappa_b},
        {"deterministic_forward", c.deterministic_forward},
        {"bellman_weight", c.bellman_weight},
        {"ceb_weight", c.ceb_weight}}},
      {"network", c.net},
      {"env", c.env},
      {"registry", c.registry},
      {"cem", c.cem},
      {"io",
       {{"metrics_path", c.metrics_path},
        {"checkpoint_path", c.checkpoint_path},
        {"checkpoint_interval", c.checkpoint_interval}}},
  };
}

void from_json(const nlohmann::json &j, RunConfig &c) {
  check_keys(j, "<root>",
             {"run", "workers", "optimizer", "bellman", "exploration", "auxiliary", "network",
              "env", "registry", "cem", "io"});
  if (j.contains("run")) {
    const auto &s = j.at("run");
    check_keys(s, "run", {"seed", "total_steps", "batch_size", "publish_interval"});
    get_field(s, "run", "seed", c.seed);
    get_field(s, "run", "total_steps", c.total_steps);
    get_field(s, "run", "batch_size", c.batch_size);
    get_field(s, "run", "publish_interval", c.publish_interval);
  }
  if (j.contains("workers")) {
    const auto &s = j.at("workers");
    check_keys(s, "workers",
               {"collectors", "shards", "updaters", "shard_capacity", "train_buffer_capacity",
                "collect_steps_per_update", "warmup_transitions"});
    get_field(s, "workers", "collectors", c.collectors);
    get_field(s, "workers", "shards", c.shards);
    get_field(s, "workers", "updaters", c.updaters);
    get_field(s, "workers", "shard_capacity", c.shard_capacity);
    get_field(s, "workers", "train_buffer_capacity", c.train_buffer_capacity);
    get_field(s, "workers", "collect_steps_per_update", c.collect_steps_per_update);
    get_field(s, "workers", "warmup_transitions", c.warmup_transitions);
  }
  if (j.contains("optimizer")) {
    const auto &s = j.at("optimizer");
    check_keys(s, "optimizer", {"learning_rate", "momentum"});
    get_field(s, "optimizer", "learning_rate", c.learning_rate);
    get_field(s, "optimizer", "momentum", c.momentum);
  }
  if (j.contains("bellman")) {
    const auto &s = j.at("bellman");
    check_keys(s, "bellman", {"gamma", "tau", "snapshot_period"});
    get_field(s, "bellman", "gamma", c.gamma);
    get_field(s, "bellman", "tau", c.tau);
    get_field(s, "bellman", "snapshot_period", c.snapshot_period);
  }
  if (j.contains("exploration")) {
    const auto &s = j.at("exploration");
    check_keys(s, "exploration", {"start", "end", "fraction"});
    get_field(s, "exploration", "start", c.eps.start);
    get_field(s, "exploration", "end", c.eps.end);
    get_field(s, "exploration", "fraction", c.eps.fraction);
  }
  if (j.contains("auxiliary")) {
    const auto &s = j.at("auxiliary");
    check_keys(s, "auxiliary",
               {"enabled", "beta", "kappa_e", "kappa_b", "deterministic_forward",
                "bellman_weight", "ceb_weight"});
    get_field(s, "auxiliary", "enabled", c.auxiliary);
    get_field(s, "auxiliary", "beta", c.beta);
    get_field(s, "auxiliary", "kappa_e", c.kappa_e);
    get_field(s, "auxiliary", "kappa_b", c.kappa_b);
    get_field(s, "auxiliary", "deterministic_forward", c.deterministic_forward);
    get_field(s, "auxiliary", "bellman_weight", c.bellman_weight);
    get_field(s, "auxiliary", "ceb_weight", c.ceb_weight);
  }
  if (j.contains("network")) {
    check_keys(j.at("network"), "network",
               {"encoder", "context", "grid_side", "obs_channels", "embed_dim", "q_hidden",
                "pi_hidden", "z_dim", "task_embed_dim", "task_count", "conv_channels1",
                "conv_channels2", "pi_heads"});
    try {
      j.at("network").get_to(c.net);
    } catch (const ConfigError &) {
      throw;
    } catch (const std::exception &e) {
      throw ConfigError(std::string("config section 'network': ") + e.what());
    }
  }
  if (j.contains("env")) j.at("env").get_to(c.env);
  if (j.contains("registry")) j.at("registry").get_to(c.registry);
  if (j.contains("cem")) j.at("cem").get_to(c.cem);
  if (j.contains("io")) {
    const auto &s = j.at("io");
    check_keys(s, "io", {"metrics_path", "checkpoint_path", "checkpoint_interval"});
    get_field(s, "io", "metrics_path", c.metrics_path);
    get_field(s, "io", "checkpoint_path", c.checkpoint_path);
    get_field(s, "io", "checkpoint_interval", c.checkpoint_interval);
  }
}

RunConfig load_run_config(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception &e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  RunConfig cfg;
  j.get_to(cfg);
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// ParamHub
// ---------------------------------------------------------------------------

void ParamHub::publish(ParamSnapshot snap) {
  auto next = std::make_shared<const ParamSnapshot>(std::move(snap));
  std::lock_guard<std::mutex> lock(mu_);
  snap_ = std::move(next);
}

std::shared_ptr<const ParamSnapshot> ParamHub::latest() const {
  std::lock_guard<std::mutex> lock(mu_);
  return snap_;
}

// ---------------------------------------------------------------------------
// Policy helpers
// ---------------------------------------------------------------------------

Action policy_action(const Network &net, const Eigen::VectorXd &params, const Observation &obs,
                     const TaskContext &ctx, const CemConfig &cem, std::mt19937_64 &rng) {
  Eigen::MatrixXd vis(net.config().vis_dim(), 1);
  net.fill_vis_column(obs, ctx, vis.col(0));
  const Eigen::MatrixXd feat = net.visual_features(params, vis);
  const int task_index = std::max(ctx.task_index, 0);
  return cem_select_action(
      [&](const Eigen::MatrixXd &actions) {
        return q_candidates(net, params, feat, obs.proprio, task_index, actions);
      },
      cem, rng);
}

Action uniform_action(const CemConfig &cem, std::mt19937_64 &rng) {
  Action a;
  for (int d = 0; d < kActionDim; ++d)
    a[d] = std::uniform_real_distribution<double>(cem.lo[d], cem.hi[d])(rng);
  return a;
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

namespace {

std::string fmt(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

}  // namespace

std::string format_metrics_row(const MetricsRow &row) {
  std::string s = std::to_string(row.step);
  s += ',';
  s += fmt(row.bellman_loss);
  s += ',';
  if (row.ceb_loss) s += fmt(*row.ceb_loss);
  s += ',';
  if (row.infonce) s += fmt(*row.infonce);
  s += ',';
  s += fmt(row.td_error_mean);
  s += ',';
  s += fmt(row.eps);
  s += ',';
  s += std::to_string(row.params_version);
  return s;
}

std::vector<MetricsRow> read_metrics_csv(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open metrics file: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader)
    throw ConfigError("metrics file " + path + " has an unexpected header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t pos = 0;
    while (true) {
      const auto comma = line.find(',', pos);
      fields.push_back(line.substr(pos, comma == std::string::npos ? comma : comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (fields.size() != 7)
      throw ConfigError("metrics file " + path + ": malformed row '" + line + "'");
    try {
      MetricsRow r;
      r.step = std::stoll(fields[0]);
      r.bellman_loss = std::stod(fields[1]);
      if (!fields[2].empty()) r.ceb_loss = std::stod(fields[2]);
      if (!fields[3].empty()) r.infonce = std::stod(fields[3]);
      r.td_error_mean = std::stod(fields[4]);
      r.eps = std::stod(fields[5]);
      r.params_version = std::stoull(fields[6]);
      rows.push_back(r);
    } catch (const std::exception &) {
      throw ConfigError("metrics file " + path + ": malformed row '" + line + "'");
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Replay serialization
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::string &s, std::uint32_t v) { s.append(reinterpret_cast<const char *>(&v), 4); }
void put_u64(std::string &s, std::uint64_t v) { s.append(reinterpret_cast<const char *>(&v), 8); }
void put_i32(std::string &s, std::int32_t v) { s.append(reinterpret_cast<const char *>(&v), 4); }
void put_f64(std::string &s, double v) { s.append(reinterpret_cast<const char *>(&v), 8); }
void put_u8(std::string &s, std::uint8_t v) { s.push_back(static_cast<char>(v)); }

struct BlobReader {
  const std::string &s;
  std::size_t pos = 0;

  void take(void *out, std::size_t n) {
    if (pos + n > s.size()) throw CheckpointError("replay section truncated");
    std::memcpy(out, s.data() + pos, n);
    pos += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    take(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    take(&v, 8);
    return v;
  }
  std::int32_t i32() {
    std::int32_t v;
    take(&v, 4);
    return v;
  }
  double f64() {
    double v;
    take(&v, 8);
    return v;
  }
  std::uint8_t u8() {
    std::uint8_t v;
    take(&v, 1);
    return v;
  }
};

void put_image(std::string &s, const GridImage &img) {
  put_u32(s, static_cast<std::uint32_t>(img.side));
  put_u32(s, static_cast<std::uint32_t>(img.channels));
  for (Eigen::Index i = 0; i < img.data.size(); ++i) put_f64(s, img.data[i]);
}

GridImage take_image(BlobReader &r) {
  const auto side = r.u32();
  const auto channels = r.u32();
  if (side > 4096 || channels > 4096) throw CheckpointError("replay section corrupt image header");
  GridImage img;
  img.side = static_cast<int>(side);
  img.channels = static_cast<int>(channels);
  img.data.resize(static_cast<Eigen::Index>(side) * side * channels);
  for (Eigen::Index i = 0; i < img.data.size(); ++i) img.data[i] = r.f64();
  return img;
}

void put_observation(std::string &s, const Observation &o) {
  put_image(s, o.visual);
  for (int i = 0; i < kProprioDim; ++i) put_f64(s, o.proprio[i]);
}

Observation take_observation(BlobReader &r) {
  Observation o;
  o.visual = take_image(r);
  for (int i = 0; i < kProprioDim; ++i) o.proprio[i] = r.f64();
  return o;
}

void put_transition(std::string &s, const Transition &t) {
  put_observation(s, t.s);
  for (int i = 0; i < kActionDim; ++i) put_f64(s, t.a[i]);
  put_f64(s, t.r);
  put_u8(s, t.done ? 1 : 0);
  put_observation(s, t.s_next);
  put_u8(s, t.context.kind == ContextKind::ImageMask ? 0 : 1);
  put_image(s, t.context.first_frame);
  put_image(s, t.context.overlay);
  put_i32(s, t.context.task_index);
  put_i32(s, t.task_id);
}

Transition take_transition(BlobReader &r) {
  Transition t;
  t.s = take_observation(r);
  for (int i = 0; i < kActionDim; ++i) t.a[i] = r.f64();
  t.r = r.f64();
  t.done = r.u8() != 0;
  t.s_next = take_observation(r);
  t.context.kind = r.u8() == 0 ? ContextKind::ImageMask : ContextKind::Embedding;
  t.context.first_frame = take_image(r);
  t.context.overlay = take_image(r);
  t.context.task_index = r.i32();
  t.task_id = r.i32();
  return t;
}

}  // namespace

std::string serialize_shards(const std::vector<std::unique_ptr<ReplayShard>> &shards) {
  std::string blob;
  put_u32(blob, static_cast<std::uint32_t>(shards.size()));
  for (const auto &shard : shards) {
    put_u64(blob, shard->inserted());
    put_u64(blob, shard->evicted());
    put_u64(blob, shard->sampled());
    const auto contents = shard->snapshot();
    put_u32(blob, static_cast<std::uint32_t>(contents.size()));
    for (const auto &t : contents) put_transition(blob, t);
  }
  return blob;
}

void deserialize_shards(const std::string &blob,
                        std::vector<std::unique_ptr<ReplayShard>> &shards) {
  BlobReader r{blob};
  const auto n = r.u32();
  if (n != shards.size())
    throw CheckpointError("checkpoint replay has " + std::to_string(n) + " shards, config has " +
                          std::to_string(shards.size()));
  for (auto &shard : shards) {
    const auto inserted = r.u64();
    const auto evicted = r.u64();
    const auto sampled = r.u64();
    const auto count = r.u32();
    std::vector<Transition> contents;
    contents.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) contents.push_back(take_transition(r));
    shard->restore(std::move(contents), inserted, evicted, sampled);
  }
  if (r.pos != blob.size()) throw CheckpointError("replay section has trailing bytes");
}

// ---------------------------------------------------------------------------
// Grouped loss
// ---------------------------------------------------------------------------

LossOutput grouped_combined_loss(const Network &net, const std::vector<LabeledSample> &batch,
                                 const QtoptConfig &cfg, const Eigen::VectorXd &theta,
                                 const LaggedParams &lagged, std::mt19937_64 *rng,
                                 Eigen::VectorXd *grad) {
  std::vector<std::uint64_t> versions;
  for (const auto &s : batch)
    if (std::find(versions.begin(), versions.end(), s.target_version) == versions.end())
      versions.push_back(s.target_version);
  if (versions.size() <= 1) return combined_loss(net, batch, cfg, theta, lagged, rng, grad);

  LossOutput acc;
  Eigen::VectorXd group_grad;
  for (std::uint64_t v : versions) {
    std::vector<LabeledSample> group;
    for (const auto &s : batch)
      if (s.target_version == v) group.push_back(s);
    const double w = static_cast<double>(group.size()) / static_cast<double>(batch.size());
    Eigen::VectorXd *gptr = nullptr;
    if (grad != nullptr) {
      group_grad = Eigen::VectorXd::Zero(theta.size());
      gptr = &group_grad;
    }
    const LossOutput out = combined_loss(net, group, cfg, theta, lagged, rng, gptr);
    acc.total += w * out.total;
    acc.bellman += w * out.bellman;
    acc.ceb += w * out.ceb;
    acc.infonce += w * out.infonce;
    acc.residual += w * out.residual;
    acc.td_error_mean += w * out.td_error_mean;
    if (grad != nullptr) *grad += w * group_grad;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

namespace {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t role, std::uint64_t idx) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (role * 1000003ull + idx + 1ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::string rng_to_string(const std::mt19937_64 &rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

void rng_from_string(const std::string &s, std::mt19937_64 &rng) {
  std::istringstream in(s);
  in >> rng;
  if (!in) throw CheckpointError("checkpoint holds a malformed RNG state");
}

}  // namespace

struct Trainer::Collector {
  std::mt19937_64 rng;
  DeskEnv env;
  int task_id = -1;
  std::uint64_t episode_seed = 0;
  std::vector<Action> actions;  // taken so far in the open episode
  bool episode_open = false;
  std::size_t shard_cursor = 0;
  Observation obs;
  TaskContext ctx;

  Collector(const EnvConfig &env_cfg, std::uint64_t seed) : rng(seed), env(env_cfg) {}
};

Trainer::~Trainer() = default;

Trainer::Trainer(RunConfig cfg)
    : cfg_((cfg.validate(), std::move(cfg))),
      net_(cfg_.net),
      registry_(make_task_registry(cfg_.registry)),
      train_env_cfg_(cfg_.env) {
  if (cfg_.net.context == ContextKind::Embedding &&
      cfg_.net.task_count < static_cast<int>(registry_.tasks.size()))
    throw ConfigError("config field 'network.task_count': " + std::to_string(cfg_.net.task_count) +
                      " rows cannot embed " + std::to_string(registry_.tasks.size()) + " tasks");
  // Training scenes only ever show objects the training split is allowed to see.
  train_env_cfg_.distractor_pool = registry_.train_distractor_pool;

  theta_ = net_.init_params(cfg_.seed);
  lagged_ = make_lagged(theta_, cfg_.tau, cfg_.snapshot_period);
  momentum_ = Eigen::VectorXd::Zero(theta_.values.size());
  learner_rng_.seed(derive_seed(cfg_.seed, 3, 0));
  updater_rng_.seed(derive_seed(cfg_.seed, 2, 0));
  for (int i = 0; i < cfg_.shards; ++i)
    shards_.push_back(std::make_unique<ReplayShard>(static_cast<std::size_t>(cfg_.shard_capacity)));
  if (cfg_.degenerate())
    collector_ = std::make_unique<Collector>(train_env_cfg_, derive_seed(cfg_.seed, 1, 0));
  hub_.publish({theta_, lagged_});
}

Trainer::Trainer(RunConfig cfg, const std::string &resume_path) : Trainer(std::move(cfg)) {
  CheckpointContents c = load_checkpoint(resume_path);
  nlohmann::json want, got;
  to_json(want, cfg_.net);
  to_json(got, c.net);
  if (want != got)
    throw CheckpointError("checkpoint " + resume_path +
                          " was written under a different network configuration");
  theta_.values = c.theta.values;
  theta_.version = c.theta.version;
  lagged_.theta1 = c.theta1;
  lagged_.theta2 = c.theta2;
  if (c.momentum.size() == theta_.values.size())
    momentum_ = c.momentum;
  else if (c.momentum.size() != 0)
    throw CheckpointError("checkpoint momentum size does not match the parameter count");
  if (!c.replay_blob.empty()) deserialize_shards(c.replay_blob, shards_);

  const auto &meta = c.meta;
  try {
    step_ = meta.at("step").get<std::int64_t>();
    lagged_.source_version = meta.at("lagged_source_version").get<std::uint64_t>();
    const auto &counters = meta.at("counters");
    episodes_ = counters.at("episodes").get<std::uint64_t>();
    successes_ = counters.at("successes").get<std::uint64_t>();
    env_steps_ = counters.at("env_steps").get<std::uint64_t>();
    labels_consumed_ = counters.at("labels_consumed").get<std::uint64_t>();
    max_staleness_ = counters.at("max_label_staleness").get<std::uint64_t>();
    if (meta.contains("degenerate") && collector_ != nullptr) {
      const auto &d = meta.at("degenerate");
      rng_from_string(d.at("learner_rng").get<std::string>(), learner_rng_);
      rng_from_string(d.at("updater_rng").get<std::string>(), updater_rng_);
      rng_from_string(d.at("collector_rng").get<std::string>(), collector_->rng);
      collector_->shard_cursor = d.at("shard_cursor").get<std::size_t>();
      if (d.contains("episode") && !d.at("episode").is_null()) {
        const auto &e = d.at("episode");
        collector_->task_id = e.at("task_id").get<int>();
        collector_->episode_seed = e.at("seed").get<std::uint64_t>();
        // Rebuild the open episode by replaying its actions; the transitions
        // it generated are already in the restored replay shards.
        auto [obs, ctx] = collector_->env.reset(registry_.task(collector_->task_id),
                                                collector_->episode_seed);
        collector_->obs = std::move(obs);
        collector_->ctx = std::move(ctx);
        collector_->actions.clear();
        for (const auto &raw : e.at("actions")) {
          Action a;
          for (int i = 0; i < kActionDim; ++i) a[i] = raw.at(static_cast<std::size_t>(i)).get<double>();
          collector_->obs = collector_->env.step(a).obs;
          collector_->actions.push_back(a);
        }
        collector_->episode_open = true;
      }
    }
  } catch (const nlohmann::json::exception &e) {
    throw CheckpointError(std::string("checkpoint metadata is incomplete: ") + e.what());
  }
  hub_.publish({theta_, lagged_});
  resumed_metrics_ = true;
}

void Trainer::save(const std::string &path) const {
  CheckpointContents c;
  c.net = cfg_.net;
  c.theta = theta_;
  c.theta1 = lagged_.theta1;
  c.theta2 = lagged_.theta2;
  c.momentum = momentum_;
  c.replay_blob = serialize_shards(shards_);

  nlohmann::json meta;
  meta["step"] = step_;
  meta["lagged_source_version"] = lagged_.source_version;
  {
    std::lock_guard<std::mutex> lock(counters_mu_);
    meta["counters"] = {{"episodes", episodes_},
                        {"successes", successes_},
                        {"env_steps", env_steps_},
                        {"labels_consumed", labels_consumed_},
                        {"max_label_staleness", max_staleness_}};
  }
  nlohmann::json cfg_echo;
  to_json(cfg_echo, cfg_);
  meta["run_config"] = cfg_echo;
  if (collector_ != nullptr) {
    nlohmann::json d;
    d["learner_rng"] = rng_to_string(learner_rng_);
    d["updater_rng"] = rng_to_string(updater_rng_);
    d["collector_rng"] = rng_to_string(collector_->rng);
    d["shard_cursor"] = collector_->shard_cursor;
    if (collector_->episode_open) {
      nlohmann::json actions = nlohmann::json::array();
      for (const auto &a : collector_->actions)
        actions.push_back({a[0], a[1], a[2], a[3]});
      d["episode"] = {{"task_id", collector_->task_id},
                      {"seed", collector_->episode_seed},
                      {"actions", std::move(actions)}};
    } else {
      d["episode"] = nullptr;
    }
    meta["degenerate"] = std::move(d);
  }
  c.meta = std::move(meta);
  save_checkpoint(path, c);
}

PipelineStats Trainer::stats() const {
  PipelineStats s;
  s.steps = step_;
  {
    std::lock_guard<std::mutex> lock(counters_mu_);
    s.episodes = episodes_;
    s.successes = successes_;
    s.env_steps = env_steps_;
    s.labels_consumed = labels_consumed_;
    s.max_label_staleness = max_staleness_;
  }
  for (const auto &shard : shards_) {
    s.shard_inserted.push_back(shard->inserted());
    s.shard_evicted.push_back(shard->evicted());
    s.shard_resident.push_back(shard->size());
  }
  return s;
}

void Trainer::collect_one_step(Collector &c, std::int64_t learner_step,
                               const Eigen::VectorXd &theta1) {
  if (!c.episode_open) {
    const auto &ids = registry_.train_ids;
    const auto pick =
        std::uniform_int_distribution<std::size_t>(0, ids.size() - 1)(c.rng);
    c.task_id = ids[pick];
    c.episode_seed = c.rng();
    auto [obs, ctx] = c.env.reset(registry_.task(c.task_id), c.episode_seed);
    c.obs = std::move(obs);
    c.ctx = std::move(ctx);
    c.actions.clear();
    c.episode_open = true;
  }

  const double eps = cfg_.eps.at(learner_step, cfg_.total_steps);
  const double coin = std::uniform_real_distribution<double>(0.0, 1.0)(c.rng);
  const Action a = coin < eps ? uniform_action(cfg_.cem, c.rng)
                              : policy_action(net_, theta1, c.obs, c.ctx, cfg_.cem, c.rng);

  DeskEnv::StepResult res;
  try {
    res = c.env.step(a);
  } catch (const UsageError &) {
    c.episode_open = false;  // discard the episode, keep the worker alive
    return;
  }
  Transition t;
  t.s = std::move(c.obs);
  t.a = a;
  t.r = res.reward;
  t.s_next = res.obs;
  t.done = res.done;
  t.context = c.ctx;
  t.task_id = c.task_id;
  shards_[c.shard_cursor % shards_.size()]->insert(std::move(t));
  ++c.shard_cursor;
  c.actions.push_back(a);
  c.obs = res.obs;

  std::lock_guard<std::mutex> lock(counters_mu_);
  ++env_steps_;
  if (res.done) {
    ++episodes_;
    if (res.reward == 1.0) ++successes_;
    EpisodeRecord rec;
    rec.task_id = c.task_id;
    rec.split = Split::Train;
    rec.success = res.reward == 1.0 ? 1 : 0;
    rec.steps = static_cast<int>(c.actions.size());
    rec.seed = c.episode_seed;
    recent_.push_back(rec);
    if (recent_.size() > 1024) recent_.pop_front();
    c.episode_open = false;
  }
}

std::vector<EpisodeRecord> Trainer::recent_episodes() const {
  std::lock_guard<std::mutex> lock(counters_mu_);
  return {recent_.begin(), recent_.end()};
}

std::vector<LabeledSample> Trainer::label_batch(const LaggedParams &lagged,
                                                std::mt19937_64 &rng) {
  std::vector<LabeledSample> batch;
  batch.reserve(static_cast<std::size_t>(cfg_.batch_size));
  while (batch.size() < static_cast<std::size_t>(cfg_.batch_size)) {
    // Sample proportionally to shard occupancy: uniform over the union.
    std::uint64_t total = 0;
    for (const auto &shard : shards_) total += shard->size();
    if (total == 0) throw UsageError("cannot label from an empty replay");
    auto target = std::uniform_int_distribution<std::uint64_t>(0, total - 1)(rng);
    std::size_t pick = 0;
    for (std::size_t i = 0; i < shards_.size(); ++i) {
      const auto n = shards_[i]->size();
      if (target < n) {
        pick = i;
        break;
      }
      target -= n;
    }
    Transition t;
    if (!shards_[pick]->try_sample(rng, t)) continue;
    const BellmanResult res = bellman_target(net_, t, lagged, cfg_.gamma, cfg_.cem, rng);
    batch.push_back({std::move(t), res.q_target, res.a_next, res.target_version});
  }
  return batch;
}

MetricsRow Trainer::learn_step(const std::vector<LabeledSample> &batch, double eps_used) {
  const QtoptConfig qcfg = cfg_.qtopt();
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(theta_.values.size());
  LossOutput out;
  try {
    out = grouped_combined_loss(net_, batch, qcfg, theta_.values, lagged_, &learner_rng_, &grad);
  } catch (const TrainingError &e) {
    diagnostic_checkpoint(e.what());
    throw;
  }
  if (!grad.allFinite()) {
    diagnostic_checkpoint("gradient has non-finite entries");
    throw TrainingError("gradient has non-finite entries at step " + std::to_string(step_ + 1));
  }

  {
    std::lock_guard<std::mutex> lock(counters_mu_);
    for (const auto &s : batch) {
      const std::uint64_t staleness = theta_.version - s.target_version;
      max_staleness_ = std::max(max_staleness_, staleness);
    }
    labels_consumed_ += batch.size();
  }

  momentum_ = cfg_.momentum * momentum_ - cfg_.learning_rate * grad;
  theta_.values += momentum_;
  if (!theta_.values.allFinite()) {
    diagnostic_checkpoint("parameters went non-finite after the update");
    throw TrainingError("parameters went non-finite at step " + std::to_string(step_ + 1));
  }
  theta_.version += 1;
  step_ += 1;
  lag_update(theta_, lagged_, step_);

  MetricsRow row;
  row.step = step_;
  row.bellman_loss = out.bellman;
  if (cfg_.auxiliary) {
    row.ceb_loss = out.ceb;
    row.infonce = out.infonce;
  }
  row.td_error_mean = out.td_error_mean;
  row.eps = eps_used;
  row.params_version = theta_.version;
  return row;
}

void Trainer::write_metrics(const MetricsRow &row) {
  if (cfg_.metrics_path.empty()) return;
  if (!metrics_out_.is_open()) {
    const bool append = resumed_metrics_ && std::filesystem::exists(cfg_.metrics_path) &&
                        std::filesystem::file_size(cfg_.metrics_path) > 0;
    metrics_out_.open(cfg_.metrics_path, append ? std::ios::app : std::ios::trunc);
    if (!metrics_out_) throw ConfigError("cannot open metrics file: " + cfg_.metrics_path);
    if (!append) metrics_out_ << kMetricsHeader << '\n';
  }
  metrics_out_ << format_metrics_row(row) << '\n';
  metrics_out_.flush();
}

void Trainer::maybe_checkpoint() {
  if (cfg_.checkpoint_path.empty()) return;
  if (cfg_.checkpoint_interval > 0 && step_ % cfg_.checkpoint_interval == 0) {
    save(cfg_.checkpoint_path);
    last_saved_step_ = step_;
  }
}

void Trainer::diagnostic_checkpoint(const std::string &why) {
  const std::string path =
      cfg_.checkpoint_path.empty() ? "piqt_diagnostic.ckpt" : cfg_.checkpoint_path + ".diag";
  try {
    save(path);
  } catch (const std::exception &) {
    return;  // the original error is the one worth reporting
  }
  (void)why;
}

std::uint64_t Trainer::total_inserted() const {
  std::uint64_t total = 0;
  for (const auto &shard : shards_) total += shard->inserted();
  return total;
}

void Trainer::run_degenerate(std::int64_t stop_step) {
  while (step_ < stop_step) {
    while (total_inserted() < static_cast<std::uint64_t>(cfg_.warmup_transitions))
      collect_one_step(*collector_, step_, lagged_.theta1);
    const double eps_used = cfg_.eps.at(step_, cfg_.total_steps);
    for (int i = 0; i < cfg_.collect_steps_per_update; ++i)
      collect_one_step(*collector_, step_, lagged_.theta1);
    const auto batch = label_batch(lagged_, updater_rng_);
    const MetricsRow row = learn_step(batch, eps_used);
    write_metrics(row);
    maybe_checkpoint();
  }
}

void Trainer::run_threaded(std::int64_t stop_step) {
  TrainBuffer buffer(static_cast<std::size_t>(cfg_.train_buffer_capacity));
  std::atomic<std::int64_t> learner_step{step_};
  std::atomic<bool> stop{false};
  hub_.publish({theta_, lagged_});

  std::vector<std::thread> workers;
  for (int i = 0; i < cfg_.collectors; ++i) {
    workers.emplace_back([this, i, &stop, &learner_step] {
      Collector c(train_env_cfg_, derive_seed(cfg_.seed, 1, static_cast<std::uint64_t>(i)));
      c.shard_cursor = static_cast<std::size_t>(i);
      while (!stop.load(std::memory_order_relaxed)) {
        const auto snap = hub_.latest();
        collect_one_step(c, learner_step.load(std::memory_order_relaxed),
                         snap->lagged.theta1);
      }
    });
  }
  for (int j = 0; j < cfg_.updaters; ++j) {
    workers.emplace_back([this, j, &stop, &buffer] {
      std::mt19937_64 rng(derive_seed(cfg_.seed, 2, static_cast<std::uint64_t>(j) + 1));
      while (!stop.load(std::memory_order_relaxed)) {
        if (total_inserted() < static_cast<std::uint64_t>(cfg_.warmup_transitions)) {
          std::this_thread::sleep_for(std::chrono::milliseconds(1));
          continue;
        }
        std::uint64_t total = 0;
        for (const auto &shard : shards_) total += shard->size();
        if (total == 0) {
          std::this_thread::sleep_for(std::chrono::milliseconds(1));
          continue;
        }
        auto target = std::uniform_int_distribution<std::uint64_t>(0, total - 1)(rng);
        std::size_t pick = 0;
        for (std::size_t k = 0; k < shards_.size(); ++k) {
          const auto n = shards_[k]->size();
          if (target < n) {
            pick = k;
            break;
          }
          target -= n;
        }
        Transition t;
        if (!shards_[pick]->try_sample(rng, t)) continue;
        const auto snap = hub_.latest();
        const BellmanResult res =
            bellman_target(net_, t, snap->lagged, cfg_.gamma, cfg_.cem, rng);
        if (!buffer.push({std::move(t), res.q_target, res.a_next, res.target_version})) return;
      }
    });
  }

  auto shut_down = [&] {
    stop.store(true);
    buffer.close();
    // Drain so no updater stays blocked on a full queue.
    LabeledSample drained;
    while (buffer.pop(drained)) {
    }
    for (auto &w : workers) w.join();
  };

  try {
    std::vector<LabeledSample> batch;
    while (step_ < stop_step) {
      batch.clear();
      LabeledSample s;
      while (batch.size() < static_cast<std::size_t>(cfg_.batch_size) && buffer.pop(s))
        batch.push_back(std::move(s));
      if (batch.size() < static_cast<std::size_t>(cfg_.batch_size)) break;  // closed early
      const double eps_used = cfg_.eps.at(step_, cfg_.total_steps);
      const MetricsRow row = learn_step(batch, eps_used);
      learner_step.store(step_, std::memory_order_relaxed);
      if (step_ % cfg_.publish_interval == 0) hub_.publish({theta_, lagged_});
      write_metrics(row);
      maybe_checkpoint();
    }
  } catch (...) {
    shut_down();
    throw;
  }
  shut_down();
}

PipelineStats Trainer::run() { return run_until(cfg_.total_steps); }

PipelineStats Trainer::run_until(std::int64_t stop_step) {
  stop_step = std::min(stop_step, cfg_.total_steps);
  if (cfg_.degenerate())
    run_degenerate(stop_step);
  else
    run_threaded(stop_step);
  if (!cfg_.checkpoint_path.empty() && last_saved_step_ != step_) {
    save(cfg_.checkpoint_path);
    last_saved_step_ = step_;
  }
  return stats();
}

}  // namespace piqt
