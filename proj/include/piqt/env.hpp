#pragma once

#include "piqt/types.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace piqt {

// ---------------------------------------------------------------------------
// Object catalog. Types are global; the first `num_knockable` types of a
// config are the ones that can be knocked over (cans and bottles go first).
// ---------------------------------------------------------------------------

// Stable human-readable name for an object type id.
std::string object_type_name(int type);

// ---------------------------------------------------------------------------
// World state.
// ---------------------------------------------------------------------------

struct ObjectState {
  int id = -1;        // instance id within the scene
  int type = -1;      // object type id (what tasks refer to)
  double x = 0.0;     // grid cells, within [0, G-1]
  double y = 0.0;
  double z = 0.0;     // height, within [0, H]; 0 = resting on the table
  bool upright = true;
};

struct WorldState {
  std::vector<ObjectState> objects;
  double gripper_x = 0.0;
  double gripper_y = 0.0;
  double gripper_z = 0.0;
  double aperture = 1.0;  // [0,1]; 0 = closed, 1 = open
  int held = -1;          // instance id of the held object, -1 = none
  int step = 0;

  const ObjectState *find_type(int type) const;
};

enum class ControlMode { Blocking, Concurrent };

struct EnvConfig {
  int grid_side = 16;          // G
  int height_levels = 3;       // H; gripper z lives in [0, H]
  int mask_size = 3;           // m, odd; context-overlay square side
  int step_limit = 40;         // T
  double max_step_xy = 3.0;    // cells moved by a full-scale action component
  double max_step_z = 1.0;     // height moved by a full-scale dz
  double lift_threshold = 2.0; // Pick succeeds when the held target is this high
  double near_radius = 2.0;    // MoveNear succeeds within this planar distance
  double contact_radius = 1.0; // gripper reach for grasping / knocking, in cells
  double contact_height = 0.5; // gripper must be at or below this z to touch
  int num_distractors = 2;
  int num_object_types = 8;
  int num_knockable = 4;       // types [0, num_knockable) can be knocked over
  ContextKind context_kind = ContextKind::ImageMask;
  ControlMode control = ControlMode::Blocking;
  // Types allowed as distractors; empty means every catalog type. The task
  // registry narrows this for training scenes in holdout-object mode.
  std::vector<int> distractor_pool;

  void validate() const;  // throws ConfigError
};

// Overlay intensity encoding the skill (and, for MoveNear, the target role).
double overlay_intensity(Skill skill, int target_slot);

// True when `task` is satisfied in `world`. Pure function of the state, so
// properties (distractor-permutation invariance) can be tested directly.
bool task_success(const WorldState &world, const TaskSpec &task, const EnvConfig &cfg);

// Throws ConfigError unless `task` is well-formed for this config: target
// count matches the skill, types exist, MoveNear targets distinct, Knock
// targets knockable.
void validate_task(const TaskSpec &task, const EnvConfig &cfg);

// ---------------------------------------------------------------------------
// The environment.
// ---------------------------------------------------------------------------

class DeskEnv {
 public:
  struct StepResult {
    Observation obs;
    double reward = 0.0;
    bool done = false;
  };

  explicit DeskEnv(EnvConfig cfg);

  // Places targets and distractors uniformly at random without overlap,
  // re-sampling scenes that already satisfy the task. Returns the first
  // observation and the frozen episode context.
  std::pair<Observation, TaskContext> reset(const TaskSpec &task, std::uint64_t seed);

  // Applies one action (after component clipping). In Concurrent mode the
  // action applied is the one submitted on the previous call; the queue
  // starts out holding a zero action. Throws UsageError on a finished
  // episode or a non-finite action.
  StepResult step(const Action &a);

  Observation observe() const;  // render the current state
  const WorldState &world() const { return world_; }
  const TaskContext &context() const { return context_; }
  const TaskSpec &task() const { return task_; }
  const EnvConfig &config() const { return cfg_; }
  bool episode_done() const { return done_; }

 private:
  void apply(const Action &a);

  EnvConfig cfg_;
  WorldState world_;
  TaskSpec task_;
  TaskContext context_;
  Action pending_ = Action::Zero();
  bool done_ = true;  // no episode until the first reset
};

// Greedy hand-written policy that solves any registry task from any
// reachable state; used as an oracle for evaluation plumbing. Blocking
// control only.
Action expert_action(const WorldState &world, const TaskSpec &task, const EnvConfig &cfg);

// ---------------------------------------------------------------------------
// Task registry: procedural task generation plus a deterministic
// train/held-out split.
// ---------------------------------------------------------------------------

struct RegistryConfig {
  int num_object_types = 8;
  int num_knockable = 4;
  bool pick_family = true;
  bool move_family = true;
  bool knock_family = true;
  double holdout_fraction = 0.1;
  // When true, one knockable object type is reserved: it appears only in
  // held-out Pick/Knock tasks, never in a training task or a training-scene
  // distractor pool, and MoveNear pairs avoid it entirely.
  bool holdout_objects = true;
  std::uint64_t split_seed = 0;

  void validate() const;  // throws ConfigError
};

struct TaskRegistry {
  std::vector<TaskSpec> tasks;  // id == index into this vector
  std::vector<int> train_ids;
  std::vector<int> heldout_ids;
  // Object types allowed in training scenes (targets and distractors).
  std::vector<int> train_distractor_pool;
  int reserved_type = -1;  // the never-seen-in-training object, or -1

  const TaskSpec &task(int id) const;  // throws ConfigError on unknown id
  std::vector<int> ids(Split split) const;
};

TaskRegistry make_task_registry(const RegistryConfig &cfg);

}  // namespace piqt
