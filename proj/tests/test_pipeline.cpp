#include "piqt/pipeline.hpp"

#include <doctest.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

using namespace piqt;

namespace {

std::string tmp_path(const std::string &name) {
  return (std::filesystem::temp_directory_path() / ("piqt_pipe_" + name)).string();
}

std::string slurp(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

bool bitwise_equal(const Eigen::VectorXd &a, const Eigen::VectorXd &b) {
  return a.size() == b.size() && (a.array() == b.array()).all();
}

// Small end-to-end configuration: flat encoder, embedding context, a 6x6
// desk with three object types, pick and knock tasks.
RunConfig tiny_cfg() {
  RunConfig c;
  c.seed = 7;
  c.total_steps = 15;
  c.batch_size = 8;
  c.publish_interval = 4;
  c.collectors = 1;
  c.shards = 1;
  c.updaters = 1;
  c.shard_capacity = 24;
  c.train_buffer_capacity = 32;
  c.collect_steps_per_update = 2;
  c.warmup_transitions = 16;

  c.net.encoder = EncoderMode::Flat;
  c.net.context = ContextKind::Embedding;
  c.net.grid_side = 6;
  c.net.obs_channels = 3;
  c.net.embed_dim = 12;
  c.net.q_hidden = {12};
  c.net.pi_hidden = {12};
  c.net.z_dim = 6;
  c.net.task_embed_dim = 4;
  c.net.task_count = 8;
  c.net.pi_heads = true;

  c.env.grid_side = 6;
  c.env.step_limit = 12;
  c.env.num_distractors = 1;
  c.env.num_object_types = 3;
  c.env.num_knockable = 2;
  c.env.context_kind = ContextKind::Embedding;

  c.registry.num_object_types = 3;
  c.registry.num_knockable = 2;
  c.registry.pick_family = true;
  c.registry.move_family = false;
  c.registry.knock_family = true;
  c.registry.holdout_fraction = 0.2;
  c.registry.holdout_objects = false;
  c.registry.split_seed = 11;

  c.cem.samples = 8;
  c.cem.elites = 2;
  c.cem.iterations = 2;
  return c;
}

Transition make_transition(int task_id, double r, bool done) {
  Transition t;
  t.s.visual.side = 2;
  t.s.visual.channels = 1;
  t.s.visual.data = Eigen::VectorXd::LinSpaced(4, 0.0, 1.0);
  t.s.proprio = Eigen::Vector4d(0.1, 0.2, 0.3, 0.4);
  t.a = Action(0.5, -0.5, 0.25, -0.25);
  t.r = r;
  t.done = done;
  t.s_next = t.s;
  t.s_next.proprio[0] = 0.9;
  t.context.kind = ContextKind::Embedding;
  t.context.task_index = task_id;
  t.task_id = task_id;
  return t;
}

}  // namespace

TEST_CASE("eps schedule decays linearly then stays flat") {
  EpsSchedule e;  // 1.0 -> 0.1 over the first 20%
  CHECK(e.at(0, 1000) == doctest::Approx(1.0));
  CHECK(e.at(100, 1000) == doctest::Approx(0.55));
  CHECK(e.at(200, 1000) == doctest::Approx(0.1));
  CHECK(e.at(999, 1000) == doctest::Approx(0.1));
  EpsSchedule flat{0.3, 0.3, 0.5};
  CHECK(flat.at(0, 100) == doctest::Approx(0.3));
  EpsSchedule zero{1.0, 0.1, 0.0};
  CHECK(zero.at(0, 100) == doctest::Approx(0.1));
}

TEST_CASE("train buffer blocks producers when full and drains after close") {
  TrainBuffer buf(2);
  LabeledSample s;
  s.q_target = 1.0;
  CHECK(buf.push(s));
  CHECK(buf.push(s));
  CHECK(buf.size() == 2);

  std::atomic<bool> third_arrived{false};
  std::thread producer([&] {
    LabeledSample x;
    x.q_target = 3.0;
    buf.push(x);
    third_arrived.store(true);
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  CHECK_FALSE(third_arrived.load());  // backpressure: nothing dropped, producer waits

  LabeledSample out;
  CHECK(buf.pop(out));
  producer.join();
  CHECK(third_arrived.load());
  CHECK(buf.size() == 2);

  buf.close();
  CHECK_FALSE(buf.push(s));          // rejected after close
  CHECK(buf.pop(out));               // drains what is left...
  CHECK(buf.pop(out));
  CHECK_FALSE(buf.pop(out));         // ...then reports exhaustion
}

TEST_CASE("replay shard conserves transitions and evicts oldest first") {
  ReplayShard shard(4);
  CHECK_THROWS_AS(ReplayShard(0), ConfigError);
  std::mt19937_64 rng(1);
  Transition out;
  CHECK_FALSE(shard.try_sample(rng, out));

  for (int i = 0; i < 7; ++i) shard.insert(make_transition(i, 0.0, false));
  CHECK(shard.inserted() == 7);
  CHECK(shard.size() == 4);
  CHECK(shard.evicted() == 3);
  CHECK(shard.inserted() == shard.size() + shard.evicted());

  const auto snap = shard.snapshot();
  REQUIRE(snap.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(snap[i].task_id == 3 + i);  // oldest three gone
}

TEST_CASE("restored shard samples identically to the original") {
  ReplayShard a(8);
  for (int i = 0; i < 13; ++i) a.insert(make_transition(i, 0.0, false));

  ReplayShard b(8);
  b.restore(a.snapshot(), a.inserted(), a.evicted(), a.sampled());
  CHECK(b.inserted() == a.inserted());
  CHECK(b.evicted() == a.evicted());
  CHECK(b.size() == a.size());

  std::mt19937_64 ra(99), rb(99);
  for (int k = 0; k < 50; ++k) {
    Transition ta, tb;
    REQUIRE(a.try_sample(ra, ta));
    REQUIRE(b.try_sample(rb, tb));
    CHECK(ta.task_id == tb.task_id);
  }
}

TEST_CASE("shard blob serialization round-trips and rejects corruption") {
  std::vector<std::unique_ptr<ReplayShard>> shards;
  shards.push_back(std::make_unique<ReplayShard>(4));
  shards.push_back(std::make_unique<ReplayShard>(4));
  for (int i = 0; i < 6; ++i) shards[i % 2]->insert(make_transition(i, i == 5 ? 1.0 : 0.0, i == 5));

  const std::string blob = serialize_shards(shards);

  std::vector<std::unique_ptr<ReplayShard>> back;
  back.push_back(std::make_unique<ReplayShard>(4));
  back.push_back(std::make_unique<ReplayShard>(4));
  deserialize_shards(blob, back);
  for (int s = 0; s < 2; ++s) {
    CHECK(back[s]->inserted() == shards[s]->inserted());
    const auto want = shards[s]->snapshot();
    const auto got = back[s]->snapshot();
    REQUIRE(want.size() == got.size());
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(got[i].task_id == want[i].task_id);
      CHECK(got[i].r == want[i].r);
      CHECK(got[i].done == want[i].done);
      CHECK((got[i].s.visual.data.array() == want[i].s.visual.data.array()).all());
      CHECK((got[i].a.array() == want[i].a.array()).all());
    }
  }

  // truncated
  CHECK_THROWS_AS(deserialize_shards(blob.substr(0, blob.size() - 3), back), CheckpointError);
  // trailing bytes
  CHECK_THROWS_AS(deserialize_shards(blob + 'x', back), CheckpointError);
  // wrong shard count
  std::vector<std::unique_ptr<ReplayShard>> three;
  for (int i = 0; i < 3; ++i) three.push_back(std::make_unique<ReplayShard>(4));
  CHECK_THROWS_AS(deserialize_shards(blob, three), CheckpointError);
}

TEST_CASE("metrics rows format with empty auxiliary columns and parse back") {
  MetricsRow with;
  with.step = 3;
  with.bellman_loss = 0.5;
  with.ceb_loss = 0.25;
  with.infonce = 1.0;
  with.td_error_mean = 0.125;
  with.eps = 0.5;
  with.params_version = 4;
  CHECK(format_metrics_row(with) == "3,0.5,0.25,1,0.125,0.5,4");

  MetricsRow without = with;
  without.ceb_loss.reset();
  without.infonce.reset();
  CHECK(format_metrics_row(without) == "3,0.5,,,0.125,0.5,4");

  const std::string path = tmp_path("metrics_roundtrip.csv");
  {
    std::ofstream out(path);
    out << kMetricsHeader << '\n' << format_metrics_row(with) << '\n'
        << format_metrics_row(without) << '\n';
  }
  const auto rows = read_metrics_csv(path);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].ceb_loss.has_value());
  CHECK(*rows[0].ceb_loss == 0.25);
  CHECK_FALSE(rows[1].ceb_loss.has_value());
  CHECK_FALSE(rows[1].infonce.has_value());
  CHECK(rows[1].params_version == 4);

  {
    std::ofstream out(path);
    out << "step,bogus\n";
  }
  CHECK_THROWS_AS(read_metrics_csv(path), ConfigError);
  std::filesystem::remove(path);
}

TEST_CASE("run config JSON round-trips and flags unknown or ill-typed fields") {
  const RunConfig cfg = tiny_cfg();
  nlohmann::json j;
  to_json(j, cfg);
  RunConfig back;
  from_json(j, back);
  nlohmann::json j2;
  to_json(j2, back);
  CHECK(j == j2);

  SUBCASE("unknown top-level key") {
    nlohmann::json bad = j;
    bad["runn"] = nlohmann::json::object();
    RunConfig c;
    CHECK_THROWS_WITH_AS(from_json(bad, c), doctest::Contains("runn"), ConfigError);
  }
  SUBCASE("unknown nested key names its scope") {
    nlohmann::json bad = j;
    bad["optimizer"]["momentumm"] = 0.5;
    RunConfig c;
    CHECK_THROWS_WITH_AS(from_json(bad, c), doctest::Contains("optimizer.momentumm"),
                         ConfigError);
  }
  SUBCASE("ill-typed field names itself") {
    nlohmann::json bad = j;
    bad["run"]["batch_size"] = "large";
    RunConfig c;
    CHECK_THROWS_WITH_AS(from_json(bad, c), doctest::Contains("run.batch_size"), ConfigError);
  }
  SUBCASE("cem bounds need four entries") {
    nlohmann::json bad = j;
    bad["cem"]["lo"] = {0.0, 1.0};
    RunConfig c;
    CHECK_THROWS_WITH_AS(from_json(bad, c), doctest::Contains("cem.lo"), ConfigError);
  }
  SUBCASE("validate couples the network grid to the environment grid") {
    RunConfig c = cfg;
    c.net.grid_side = 8;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("network.grid_side"), ConfigError);
  }
  SUBCASE("load_run_config reports missing files") {
    CHECK_THROWS_AS(load_run_config(tmp_path("no_such_config.json")), ConfigError);
  }
  SUBCASE("load_run_config parses a file and validates it") {
    const std::string path = tmp_path("cfg.json");
    {
      std::ofstream out(path);
      out << j.dump(2);
    }
    const RunConfig c = load_run_config(path);
    CHECK(c.total_steps == cfg.total_steps);
    CHECK(c.net.context == ContextKind::Embedding);
    CHECK(c.env.grid_side == 6);
    std::filesystem::remove(path);
  }
}

TEST_CASE("grouped loss matches the direct path on homogeneous batches") {
  RunConfig rc = tiny_cfg();
  Network net(rc.net);
  ParameterSet theta = net.init_params(3);
  LaggedParams lagged = make_lagged(theta);

  // Build labeled samples from genuine environment transitions.
  TaskRegistry reg = make_task_registry(rc.registry);
  DeskEnv env(rc.env);
  std::mt19937_64 rng(5);
  std::vector<LabeledSample> batch;
  auto [obs, ctx] = env.reset(reg.task(reg.train_ids[0]), 42);
  for (int i = 0; i < 6; ++i) {
    const Action a = uniform_action(rc.cem, rng);
    const auto res = env.step(a);
    Transition t;
    t.s = obs;
    t.a = a;
    t.r = res.reward;
    t.done = res.done;
    t.s_next = res.obs;
    t.context = ctx;
    t.task_id = reg.train_ids[0];
    obs = res.obs;
    batch.push_back({t, 0.5, Action::Zero(), lagged.source_version});
    if (res.done) break;
  }
  REQUIRE(batch.size() >= 4);

  const QtoptConfig qcfg = rc.qtopt();
  Eigen::VectorXd g1 = Eigen::VectorXd::Zero(theta.values.size());
  Eigen::VectorXd g2 = Eigen::VectorXd::Zero(theta.values.size());
  const LossOutput direct = combined_loss(net, batch, qcfg, theta.values, lagged, nullptr, &g1);
  const LossOutput grouped =
      grouped_combined_loss(net, batch, qcfg, theta.values, lagged, nullptr, &g2);
  CHECK(direct.total == grouped.total);
  CHECK(direct.bellman == grouped.bellman);
  CHECK(direct.ceb == grouped.ceb);
  CHECK(direct.infonce == grouped.infonce);
  CHECK(bitwise_equal(g1, g2));

  SUBCASE("mixed versions recombine by group size") {
    std::vector<LabeledSample> mixed = batch;
    // Two versions: the last two samples carry an older label version.
    mixed[mixed.size() - 1].target_version = lagged.source_version + 1;
    mixed[mixed.size() - 2].target_version = lagged.source_version + 1;
    CHECK_THROWS_AS(combined_loss(net, mixed, qcfg, theta.values, lagged, nullptr, nullptr),
                    UsageError);

    std::vector<LabeledSample> head(mixed.begin(), mixed.end() - 2);
    std::vector<LabeledSample> tail(mixed.end() - 2, mixed.end());
    Eigen::VectorXd gh = Eigen::VectorXd::Zero(theta.values.size());
    Eigen::VectorXd gt = Eigen::VectorXd::Zero(theta.values.size());
    const LossOutput lh = combined_loss(net, head, qcfg, theta.values, lagged, nullptr, &gh);
    const LossOutput lt = combined_loss(net, tail, qcfg, theta.values, lagged, nullptr, &gt);
    const double wh = double(head.size()) / double(mixed.size());
    const double wt = double(tail.size()) / double(mixed.size());

    Eigen::VectorXd gm = Eigen::VectorXd::Zero(theta.values.size());
    const LossOutput lm =
        grouped_combined_loss(net, mixed, qcfg, theta.values, lagged, nullptr, &gm);
    CHECK(lm.total == doctest::Approx(wh * lh.total + wt * lt.total).epsilon(1e-12));
    CHECK(lm.bellman == doctest::Approx(wh * lh.bellman + wt * lt.bellman).epsilon(1e-12));
    CHECK(lm.td_error_mean ==
          doctest::Approx(wh * lh.td_error_mean + wt * lt.td_error_mean).epsilon(1e-12));
    const Eigen::VectorXd expect = wh * gh + wt * gt;
    CHECK((gm - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("policy helpers: uniform stays in bounds, greedy equals CEM composition") {
  RunConfig rc = tiny_cfg();
  Network net(rc.net);
  ParameterSet theta = net.init_params(9);
  TaskRegistry reg = make_task_registry(rc.registry);
  DeskEnv env(rc.env);
  auto [obs, ctx] = env.reset(reg.task(reg.train_ids[0]), 17);

  std::mt19937_64 r1(123);
  for (int i = 0; i < 20; ++i) {
    const Action a = uniform_action(rc.cem, r1);
    for (int d = 0; d < kActionDim; ++d) {
      CHECK(a[d] >= rc.cem.lo[d]);
      CHECK(a[d] <= rc.cem.hi[d]);
    }
  }

  std::mt19937_64 r2(77), r3(77);
  const Action got = policy_action(net, theta.values, obs, ctx, rc.cem, r2);
  Eigen::MatrixXd vis(net.config().vis_dim(), 1);
  net.fill_vis_column(obs, ctx, vis.col(0));
  const Eigen::MatrixXd feat = net.visual_features(theta.values, vis);
  const Action want = cem_select_action(
      [&](const Eigen::MatrixXd &actions) {
        return q_candidates(net, theta.values, feat, obs.proprio, ctx.task_index, actions);
      },
      rc.cem, r3);
  CHECK((got.array() == want.array()).all());
}

TEST_CASE("degenerate runs are bit-reproducible and conserve transitions") {
  RunConfig cfg = tiny_cfg();
  const std::string m1 = tmp_path("det_a.csv"), m2 = tmp_path("det_b.csv");

  cfg.metrics_path = m1;
  Trainer t1(cfg);
  const PipelineStats s1 = t1.run();

  cfg.metrics_path = m2;
  Trainer t2(cfg);
  const PipelineStats s2 = t2.run();

  CHECK(s1.steps == cfg.total_steps);
  CHECK(t1.theta().version == std::uint64_t(cfg.total_steps));
  CHECK(bitwise_equal(t1.theta().values, t2.theta().values));
  CHECK(bitwise_equal(t1.lagged().theta1, t2.lagged().theta1));
  CHECK(bitwise_equal(t1.momentum(), t2.momentum()));
  CHECK(slurp(m1) == slurp(m2));

  // conservation: every environment step lands in exactly one shard
  std::uint64_t inserted = 0;
  for (std::size_t i = 0; i < s1.shard_inserted.size(); ++i) {
    inserted += s1.shard_inserted[i];
    CHECK(s1.shard_inserted[i] == s1.shard_resident[i] + s1.shard_evicted[i]);
  }
  CHECK(inserted == s1.env_steps);
  CHECK(s1.shard_evicted[0] > 0);  // the tiny shard wrapped, eviction exercised
  CHECK(s1.max_label_staleness == 0);  // degenerate labels are always fresh
  CHECK(s1.labels_consumed == std::uint64_t(cfg.total_steps) * cfg.batch_size);

  const auto rows = read_metrics_csv(m1);
  REQUIRE(rows.size() == std::size_t(cfg.total_steps));
  CHECK(rows.front().step == 1);
  CHECK(rows.back().step == cfg.total_steps);
  CHECK(rows.front().eps == doctest::Approx(1.0));
  CHECK(rows.back().eps == doctest::Approx(0.1));
  for (const auto &r : rows) CHECK(r.ceb_loss.has_value());

  std::filesystem::remove(m1);
  std::filesystem::remove(m2);
}

TEST_CASE("auxiliary off leaves the aux columns empty") {
  RunConfig cfg = tiny_cfg();
  cfg.total_steps = 3;
  cfg.auxiliary = false;
  cfg.net.pi_heads = false;
  cfg.metrics_path = tmp_path("aux_off.csv");
  Trainer t(cfg);
  t.run();
  const auto rows = read_metrics_csv(cfg.metrics_path);
  REQUIRE(rows.size() == 3);
  for (const auto &r : rows) {
    CHECK_FALSE(r.ceb_loss.has_value());
    CHECK_FALSE(r.infonce.has_value());
  }
  const std::string raw = slurp(cfg.metrics_path);
  CHECK(raw.find(",,,") != std::string::npos);
  std::filesystem::remove(cfg.metrics_path);
}

TEST_CASE("a resumed run reproduces the unbroken run bit-for-bit") {
  RunConfig cfg = tiny_cfg();
  cfg.total_steps = 12;

  const std::string ma = tmp_path("unbroken.csv");
  const std::string mb = tmp_path("split.csv");
  const std::string ck = tmp_path("resume.ckpt");

  cfg.metrics_path = ma;
  cfg.checkpoint_path = "";
  Trainer whole(cfg);
  whole.run();

  cfg.metrics_path = mb;
  cfg.checkpoint_path = ck;
  Trainer first(cfg);
  first.run_until(6);  // interrupt mid-schedule; checkpoints on stop
  CHECK(first.step() == 6);

  cfg.checkpoint_path = "";
  Trainer second(cfg, ck);
  CHECK(second.step() == 6);
  CHECK(bitwise_equal(second.theta().values, first.theta().values));
  CHECK(bitwise_equal(second.momentum(), first.momentum()));
  const PipelineStats done = second.run();

  CHECK(done.steps == 12);
  CHECK(bitwise_equal(second.theta().values, whole.theta().values));
  CHECK(bitwise_equal(second.lagged().theta1, whole.lagged().theta1));
  CHECK(bitwise_equal(second.lagged().theta2, whole.lagged().theta2));
  CHECK(bitwise_equal(second.momentum(), whole.momentum()));
  CHECK(slurp(ma) == slurp(mb));

  std::filesystem::remove(ma);
  std::filesystem::remove(mb);
  std::filesystem::remove(ck);
}

TEST_CASE("checkpoints reject a mismatched network configuration") {
  RunConfig cfg = tiny_cfg();
  cfg.total_steps = 2;
  const std::string ck = tmp_path("mismatch.ckpt");
  cfg.checkpoint_path = ck;
  Trainer t(cfg);
  t.run();

  RunConfig other = cfg;
  other.net.embed_dim = 16;
  CHECK_THROWS_AS(Trainer(other, ck), CheckpointError);
  std::filesystem::remove(ck);
}

TEST_CASE("threaded pipeline conserves transitions and bounds label staleness") {
  RunConfig cfg = tiny_cfg();
  cfg.collectors = 2;
  cfg.shards = 2;
  cfg.updaters = 2;
  cfg.total_steps = 48;
  cfg.batch_size = 8;
  cfg.train_buffer_capacity = 32;
  cfg.publish_interval = 4;
  cfg.warmup_transitions = 32;
  cfg.metrics_path = tmp_path("threaded.csv");

  Trainer t(cfg);
  const PipelineStats s = t.run();

  CHECK(s.steps == 48);
  CHECK(t.theta().version == 48);
  std::uint64_t inserted = 0;
  for (std::size_t i = 0; i < s.shard_inserted.size(); ++i) {
    inserted += s.shard_inserted[i];
    CHECK(s.shard_inserted[i] == s.shard_resident[i] + s.shard_evicted[i]);
  }
  CHECK(inserted == s.env_steps);
  CHECK(s.labels_consumed == 48u * 8u);

  // Staleness is bounded by how long a label can wait: one publish interval
  // plus a full train buffer plus in-flight samples, with slack.
  const std::uint64_t bound = std::uint64_t(cfg.publish_interval) +
                              std::uint64_t(cfg.train_buffer_capacity / cfg.batch_size) +
                              std::uint64_t(cfg.updaters + cfg.collectors) + 8;
  CHECK(s.max_label_staleness <= bound);

  const auto rows = read_metrics_csv(cfg.metrics_path);
  CHECK(rows.size() == 48);
  CHECK(t.recent_episodes().size() > 0);
  std::filesystem::remove(cfg.metrics_path);
}

TEST_CASE("trainer validates embedding capacity against the registry") {
  RunConfig cfg = tiny_cfg();
  cfg.net.task_count = 2;  // five tasks will not fit
  CHECK_THROWS_AS(Trainer{cfg}, ConfigError);
}
