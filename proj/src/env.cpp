#include "piqt/env.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <utility>

namespace piqt {

namespace {

constexpr const char *kTypeNames[] = {
    "cola_can", "soda_can",     "water_bottle", "juice_bottle",
    "apple",    "sponge",       "mug",          "box",
};
constexpr int kNamedTypes = static_cast<int>(sizeof(kTypeNames) / sizeof(kTypeNames[0]));

double planar_dist(double ax, double ay, double bx, double by) {
  return std::hypot(ax - bx, ay - by);
}

bool on_table(const WorldState &world, const ObjectState &obj) {
  return world.held != obj.id && obj.z <= 0.0;
}

int cell_of(double coord, int side) {
  auto c = static_cast<int>(std::llround(coord));
  return std::clamp(c, 0, side - 1);
}

}  // namespace

std::string object_type_name(int type) {
  if (type >= 0 && type < kNamedTypes) return kTypeNames[type];
  return "object" + std::to_string(type);
}

std::string TaskSpec::name() const {
  switch (skill) {
    case Skill::Pick:
      if (targets.size() == 1) return "pick " + object_type_name(targets[0]);
      break;
    case Skill::MoveNear:
      if (targets.size() == 2)
        return "move " + object_type_name(targets[0]) + " near " + object_type_name(targets[1]);
      break;
    case Skill::Knock:
      if (targets.size() == 1) return "knock " + object_type_name(targets[0]) + " over";
      break;
  }
  return "<malformed task>";
}

const ObjectState *WorldState::find_type(int type) const {
  for (const auto &obj : objects)
    if (obj.type == type) return &obj;
  return nullptr;
}

void EnvConfig::validate() const {
  if (grid_side < 4) throw ConfigError("env: grid_side must be >= 4");
  if (height_levels < 1) throw ConfigError("env: height_levels must be >= 1");
  if (mask_size < 1 || mask_size % 2 == 0)
    throw ConfigError("env: mask_size must be a positive odd number");
  if (step_limit < 1) throw ConfigError("env: step_limit must be >= 1");
  if (max_step_xy <= 0.0 || max_step_z <= 0.0)
    throw ConfigError("env: max step sizes must be positive");
  if (lift_threshold <= 0.0 || lift_threshold > height_levels)
    throw ConfigError("env: lift_threshold must lie in (0, height_levels]");
  if (near_radius <= 0.0) throw ConfigError("env: near_radius must be positive");
  if (contact_radius <= 0.0) throw ConfigError("env: contact_radius must be positive");
  if (contact_height < 0.0 || contact_height > height_levels)
    throw ConfigError("env: contact_height must lie in [0, height_levels]");
  if (num_distractors < 0) throw ConfigError("env: num_distractors must be >= 0");
  if (num_object_types < 1) throw ConfigError("env: num_object_types must be >= 1");
  if (num_knockable < 0 || num_knockable > num_object_types)
    throw ConfigError("env: num_knockable must lie in [0, num_object_types]");
  for (int t : distractor_pool)
    if (t < 0 || t >= num_object_types)
      throw ConfigError("env: distractor_pool contains an unknown object type");
}

double overlay_intensity(Skill skill, int target_slot) {
  switch (skill) {
    case Skill::Pick: return 1.0;
    case Skill::MoveNear: return target_slot == 0 ? 0.8 : 0.6;
    case Skill::Knock: return 0.4;
  }
  return 0.0;
}

void validate_task(const TaskSpec &task, const EnvConfig &cfg) {
  const std::size_t want = task.skill == Skill::MoveNear ? 2 : 1;
  if (task.targets.size() != want)
    throw ConfigError("task '" + task.name() + "': expected " + std::to_string(want) +
                      " target(s), got " + std::to_string(task.targets.size()));
  for (int t : task.targets)
    if (t < 0 || t >= cfg.num_object_types)
      throw ConfigError("task '" + task.name() + "': unknown object type " + std::to_string(t));
  if (task.skill == Skill::MoveNear && task.targets[0] == task.targets[1])
    throw ConfigError("task '" + task.name() + "': MoveNear targets must be distinct");
  if (task.skill == Skill::Knock && task.targets[0] >= cfg.num_knockable)
    throw ConfigError("task '" + task.name() + "': target is not a knockable type");
}

bool task_success(const WorldState &world, const TaskSpec &task, const EnvConfig &cfg) {
  switch (task.skill) {
    case Skill::Pick: {
      const ObjectState *obj = world.find_type(task.targets[0]);
      return obj != nullptr && world.held == obj->id && obj->z >= cfg.lift_threshold;
    }
    case Skill::MoveNear: {
      const ObjectState *a = world.find_type(task.targets[0]);
      const ObjectState *b = world.find_type(task.targets[1]);
      return a != nullptr && b != nullptr && on_table(world, *a) && on_table(world, *b) &&
             planar_dist(a->x, a->y, b->x, b->y) <= cfg.near_radius;
    }
    case Skill::Knock: {
      const ObjectState *obj = world.find_type(task.targets[0]);
      return obj != nullptr && !obj->upright;
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// DeskEnv
// ---------------------------------------------------------------------------

DeskEnv::DeskEnv(EnvConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

std::pair<Observation, TaskContext> DeskEnv::reset(const TaskSpec &task, std::uint64_t seed) {
  validate_task(task, cfg_);
  if (cfg_.context_kind == ContextKind::Embedding && task.id < 0)
    throw ConfigError("task '" + task.name() + "': Embedding contexts need a registry task id");
  task_ = task;

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> cell(0, cfg_.grid_side - 1);

  // Distractor types come from the allowed pool minus the task's own targets.
  std::vector<int> pool = cfg_.distractor_pool;
  if (pool.empty())
    for (int t = 0; t < cfg_.num_object_types; ++t) pool.push_back(t);
  pool.erase(std::remove_if(pool.begin(), pool.end(),
                            [&](int t) {
                              return std::find(task.targets.begin(), task.targets.end(), t) !=
                                     task.targets.end();
                            }),
             pool.end());
  const int n_distractors = std::min<int>(cfg_.num_distractors, static_cast<int>(pool.size()));
  const int n_objects = static_cast<int>(task.targets.size()) + n_distractors;
  if (n_objects > cfg_.grid_side * cfg_.grid_side)
    throw ConfigError("env: more objects than grid cells");

  // Rejection-sample scenes until one is not already successful.
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<int> types = task.targets;
    std::vector<int> extras = pool;
    std::shuffle(extras.begin(), extras.end(), rng);
    types.insert(types.end(), extras.begin(), extras.begin() + n_distractors);

    world_ = WorldState{};
    std::set<std::pair<int, int>> occupied;
    for (int i = 0; i < n_objects; ++i) {
      int x = 0;
      int y = 0;
      int guard = 0;
      do {
        x = cell(rng);
        y = cell(rng);
        if (++guard > 100 * cfg_.grid_side * cfg_.grid_side)
          throw TrainingError("env: could not place objects without overlap");
      } while (occupied.count({x, y}) != 0);
      occupied.insert({x, y});
      ObjectState obj;
      obj.id = i;
      obj.type = types[static_cast<std::size_t>(i)];
      obj.x = x;
      obj.y = y;
      world_.objects.push_back(obj);
    }
    world_.gripper_x = cell(rng);
    world_.gripper_y = cell(rng);
    world_.gripper_z = cfg_.height_levels;
    world_.aperture = 1.0;
    world_.held = -1;
    world_.step = 0;
    if (!task_success(world_, task_, cfg_)) break;
    if (attempt == 999)
      throw TrainingError("env: every generated scene already satisfies task '" + task.name() +
                          "'");
  }

  // Freeze the episode context.
  context_ = TaskContext{};
  context_.kind = cfg_.context_kind;
  context_.task_index = task.id;
  Observation first = observe();
  if (cfg_.context_kind == ContextKind::ImageMask) {
    context_.first_frame = first.visual;
    GridImage overlay(cfg_.grid_side, 1);
    const int half = (cfg_.mask_size - 1) / 2;
    for (std::size_t slot = 0; slot < task.targets.size(); ++slot) {
      const ObjectState *obj = world_.find_type(task.targets[slot]);
      const int cr = cell_of(obj->x, cfg_.grid_side);
      const int cc = cell_of(obj->y, cfg_.grid_side);
      const double value = overlay_intensity(task.skill, static_cast<int>(slot));
      for (int dr = -half; dr <= half; ++dr)
        for (int dc = -half; dc <= half; ++dc) {
          const int r = cr + dr;
          const int c = cc + dc;
          if (r < 0 || r >= cfg_.grid_side || c < 0 || c >= cfg_.grid_side) continue;
          overlay.at(r, c, 0) = std::max(overlay.at(r, c, 0), value);
        }
    }
    context_.overlay = std::move(overlay);
  }

  pending_ = Action::Zero();
  done_ = false;
  return {std::move(first), context_};
}

void DeskEnv::apply(const Action &a) {
  const double dx = std::clamp(a[0], -1.0, 1.0) * cfg_.max_step_xy;
  const double dy = std::clamp(a[1], -1.0, 1.0) * cfg_.max_step_xy;
  const double dz = std::clamp(a[2], -1.0, 1.0) * cfg_.max_step_z;
  const double grip = std::clamp(a[3], -1.0, 1.0);

  world_.gripper_x = std::clamp(world_.gripper_x + dx, 0.0, cfg_.grid_side - 1.0);
  world_.gripper_y = std::clamp(world_.gripper_y + dy, 0.0, cfg_.grid_side - 1.0);
  world_.gripper_z =
      std::clamp(world_.gripper_z + dz, 0.0, static_cast<double>(cfg_.height_levels));
  world_.aperture = (grip + 1.0) / 2.0;

  if (world_.held >= 0) {
    auto held = std::find_if(world_.objects.begin(), world_.objects.end(),
                             [&](const ObjectState &o) { return o.id == world_.held; });
    held->x = world_.gripper_x;
    held->y = world_.gripper_y;
    held->z = world_.gripper_z;
    if (world_.aperture > 0.5) {  // open hand: the object drops to the table
      held->z = 0.0;
      world_.held = -1;
    }
    return;
  }

  if (world_.gripper_z > cfg_.contact_height) return;
  ObjectState *nearest = nullptr;
  double best = cfg_.contact_radius;
  for (auto &obj : world_.objects) {
    const double d = planar_dist(obj.x, obj.y, world_.gripper_x, world_.gripper_y);
    if (d <= best && (nearest == nullptr || d < best)) {
      nearest = &obj;
      best = d;
    }
  }
  if (nearest == nullptr) return;
  if (world_.aperture < 0.5) {  // closing around the object grasps it
    world_.held = nearest->id;
    nearest->x = world_.gripper_x;
    nearest->y = world_.gripper_y;
    nearest->z = world_.gripper_z;
  } else if (world_.aperture > 0.5) {  // an open hand at table height bumps it
    if (nearest->upright && nearest->type < cfg_.num_knockable) nearest->upright = false;
  }
}

DeskEnv::StepResult DeskEnv::step(const Action &a) {
  if (done_) throw UsageError("env: step() called on a finished episode");
  if (!a.allFinite()) throw UsageError("env: action has non-finite components");

  Action applied = a;
  if (cfg_.control == ControlMode::Concurrent) {
    applied = pending_;
    pending_ = a;
  }
  apply(applied);
  world_.step += 1;

  const bool success = task_success(world_, task_, cfg_);
  done_ = success || world_.step >= cfg_.step_limit;
  return {observe(), success ? 1.0 : 0.0, done_};
}

Observation DeskEnv::observe() const {
  const int g = cfg_.grid_side;
  Observation o;
  o.visual = GridImage(g, 3);
  for (const auto &obj : world_.objects) {
    const int r = cell_of(obj.x, g);
    const int c = cell_of(obj.y, g);
    const double shade = (obj.type + 1.0) / cfg_.num_object_types * (obj.upright ? 1.0 : 0.5);
    o.visual.at(r, c, 0) = std::max(o.visual.at(r, c, 0), shade);
    o.visual.at(r, c, 1) = std::max(o.visual.at(r, c, 1), obj.z / cfg_.height_levels);
  }
  const int gr = cell_of(world_.gripper_x, g);
  const int gc = cell_of(world_.gripper_y, g);
  o.visual.at(gr, gc, 2) = 0.3 + 0.7 * world_.gripper_z / cfg_.height_levels;
  o.proprio << world_.gripper_x / (g - 1.0), world_.gripper_y / (g - 1.0),
      world_.gripper_z / cfg_.height_levels, world_.aperture;
  return o;
}

// ---------------------------------------------------------------------------
// Scripted expert
// ---------------------------------------------------------------------------

namespace {

double step_toward(double cur, double goal, double max_step) {
  return std::clamp((goal - cur) / max_step, -1.0, 1.0);
}

// Move the gripper at travel height toward (x, y) with the hand open.
Action travel_high(const WorldState &w, const EnvConfig &cfg, double x, double y) {
  return {step_toward(w.gripper_x, x, cfg.max_step_xy),
          step_toward(w.gripper_y, y, cfg.max_step_xy),
          step_toward(w.gripper_z, cfg.height_levels, cfg.max_step_z), 1.0};
}

bool over(const WorldState &w, double x, double y) {
  return planar_dist(w.gripper_x, w.gripper_y, x, y) <= 1e-9;
}

// Approach a target from above, then descend with the requested grip command;
// a closed hand ends up grasping, an open hand ends up knocking.
Action approach_and_descend(const WorldState &w, const EnvConfig &cfg, const ObjectState &obj,
                            double grip) {
  if (!over(w, obj.x, obj.y)) return travel_high(w, cfg, obj.x, obj.y);
  return {0.0, 0.0, step_toward(w.gripper_z, 0.0, cfg.max_step_z), grip};
}

}  // namespace

Action expert_action(const WorldState &world, const TaskSpec &task, const EnvConfig &cfg) {
  // The owner of a stray object lets go of it first.
  auto holding_wrong = [&](const ObjectState *wanted) {
    return world.held >= 0 && (wanted == nullptr || world.held != wanted->id);
  };

  switch (task.skill) {
    case Skill::Pick: {
      const ObjectState *obj = world.find_type(task.targets[0]);
      if (holding_wrong(obj)) return {0.0, 0.0, 1.0, 1.0};
      if (world.held == obj->id)
        return {0.0, 0.0, step_toward(world.gripper_z, cfg.height_levels, cfg.max_step_z), -1.0};
      return approach_and_descend(world, cfg, *obj, -1.0);
    }
    case Skill::MoveNear: {
      const ObjectState *a = world.find_type(task.targets[0]);
      const ObjectState *b = world.find_type(task.targets[1]);
      if (holding_wrong(a)) return {0.0, 0.0, 1.0, 1.0};
      if (world.held == a->id) {
        // Carry to a spot one cell from B, then let go.
        const double aim_x = b->x + (b->x + 1.0 <= cfg.grid_side - 1.0 ? 1.0 : -1.0);
        const double aim_y = b->y;
        if (!over(world, aim_x, aim_y)) {
          return {step_toward(world.gripper_x, aim_x, cfg.max_step_xy),
                  step_toward(world.gripper_y, aim_y, cfg.max_step_xy), 0.0, -1.0};
        }
        return {0.0, 0.0, 0.0, 1.0};
      }
      return approach_and_descend(world, cfg, *a, -1.0);
    }
    case Skill::Knock: {
      const ObjectState *obj = world.find_type(task.targets[0]);
      if (holding_wrong(obj)) return {0.0, 0.0, 1.0, 1.0};
      if (!obj->upright) return Action::Zero();
      return approach_and_descend(world, cfg, *obj, 1.0);
    }
  }
  return Action::Zero();
}

// ---------------------------------------------------------------------------
// Task registry
// ---------------------------------------------------------------------------

void RegistryConfig::validate() const {
  if (num_object_types < 1) throw ConfigError("registry: num_object_types must be >= 1");
  if (num_knockable < 0 || num_knockable > num_object_types)
    throw ConfigError("registry: num_knockable must lie in [0, num_object_types]");
  if (!(pick_family || move_family || knock_family))
    throw ConfigError("registry: at least one task family must be enabled");
  if (holdout_fraction < 0.0 || holdout_fraction >= 1.0)
    throw ConfigError("registry: holdout_fraction must lie in [0, 1)");
  if (pick_family && num_object_types < 2)
    throw ConfigError("registry: pick family needs at least 2 object types");
  if (move_family && num_object_types < 2)
    throw ConfigError("registry: move family needs at least 2 object types");
  if (knock_family && num_knockable < 2)
    throw ConfigError("registry: knock family needs at least 2 knockable types");
  if (holdout_objects && move_family && num_object_types - 1 < 2)
    throw ConfigError("registry: move family too small for a held-out object");
}

const TaskSpec &TaskRegistry::task(int id) const {
  if (id < 0 || id >= static_cast<int>(tasks.size()))
    throw ConfigError("registry: unknown task id " + std::to_string(id));
  return tasks[static_cast<std::size_t>(id)];
}

std::vector<int> TaskRegistry::ids(Split split) const {
  return split == Split::Train ? train_ids : heldout_ids;
}

TaskRegistry make_task_registry(const RegistryConfig &cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.split_seed);

  TaskRegistry reg;
  if (cfg.holdout_objects) {
    // Reserve one object type that training never sees. A knockable one
    // serves both the Pick and Knock held-out object requirements.
    const int span = cfg.knock_family ? cfg.num_knockable : cfg.num_object_types;
    reg.reserved_type = std::uniform_int_distribution<int>(0, span - 1)(rng);
  }

  auto add = [&reg](Skill skill, std::vector<int> targets) {
    TaskSpec t;
    t.id = static_cast<int>(reg.tasks.size());
    t.skill = skill;
    t.targets = std::move(targets);
    reg.tasks.push_back(std::move(t));
  };
  if (cfg.pick_family)
    for (int t = 0; t < cfg.num_object_types; ++t) add(Skill::Pick, {t});
  if (cfg.move_family)
    for (int a = 0; a < cfg.num_object_types; ++a) {
      if (a == reg.reserved_type) continue;
      for (int b = 0; b < cfg.num_object_types; ++b) {
        if (b == a || b == reg.reserved_type) continue;
        add(Skill::MoveNear, {a, b});
      }
    }
  if (cfg.knock_family)
    for (int t = 0; t < cfg.num_knockable; ++t) add(Skill::Knock, {t});

  // Tasks over the reserved object are held out unconditionally (zero-shot
  // with a never-seen object); the rest of the held-out quota is a random
  // draw of seen-object compositions.
  std::vector<int> forced;
  std::vector<int> rest;
  for (const auto &t : reg.tasks) {
    const bool touches_reserved =
        reg.reserved_type >= 0 && std::find(t.targets.begin(), t.targets.end(),
                                            reg.reserved_type) != t.targets.end();
    (touches_reserved ? forced : rest).push_back(t.id);
  }
  const auto total = static_cast<long>(reg.tasks.size());
  auto quota = static_cast<long>(std::llround(cfg.holdout_fraction * total));
  quota = std::max(quota, static_cast<long>(forced.size()));
  if (quota >= total)
    throw ConfigError("registry: holdout would leave no training tasks");
  std::shuffle(rest.begin(), rest.end(), rng);
  std::vector<int> heldout = forced;
  heldout.insert(heldout.end(), rest.begin(), rest.begin() + (quota - static_cast<long>(forced.size())));
  std::sort(heldout.begin(), heldout.end());

  for (auto &t : reg.tasks) t.split = Split::Train;
  for (int id : heldout) reg.tasks[static_cast<std::size_t>(id)].split = Split::Heldout;
  reg.heldout_ids = heldout;
  for (const auto &t : reg.tasks)
    if (t.split == Split::Train) reg.train_ids.push_back(t.id);

  for (int t = 0; t < cfg.num_object_types; ++t)
    if (t != reg.reserved_type) reg.train_distractor_pool.push_back(t);
  return reg;
}

}  // namespace piqt
