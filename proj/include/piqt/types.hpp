#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace piqt {

// Continuous action: (dx, dy, dz, gripper), each component in [-1, 1].
using Action = Eigen::Vector4d;
inline constexpr int kActionDim = 4;
inline constexpr int kProprioDim = 4;

// Errors are split by who has to react: bad config files, misuse of an API,
// numeric blowups during training, and unreadable checkpoints.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Square multi-channel intensity grid, values in [0,1]. Channel-major storage:
// each channel is a contiguous side*side plane in column-major (Eigen) order.
struct GridImage {
  int side = 0;
  int channels = 0;
  Eigen::VectorXd data;

  GridImage() = default;
  GridImage(int side_, int channels_)
      : side(side_), channels(channels_),
        data(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(side_) * side_ * channels_)) {}

  double &at(int row, int col, int channel) {
    return data[static_cast<Eigen::Index>(channel) * side * side + col * side + row];
  }
  double at(int row, int col, int channel) const {
    return data[static_cast<Eigen::Index>(channel) * side * side + col * side + row];
  }
  Eigen::Map<const Eigen::MatrixXd> channel(int c) const {
    return {data.data() + static_cast<Eigen::Index>(c) * side * side, side, side};
  }
  Eigen::Map<Eigen::MatrixXd> channel(int c) {
    return {data.data() + static_cast<Eigen::Index>(c) * side * side, side, side};
  }
  Eigen::Index size() const { return data.size(); }
};

// What the agent sees each step: the rendered grid plus the gripper's own pose.
struct Observation {
  GridImage visual;          // side x side x channels, entries in [0,1]
  Eigen::Vector4d proprio;   // (x, y, z, aperture) normalized to [0,1]
};

enum class Skill { Pick, MoveNear, Knock };

inline const char *skill_name(Skill s) {
  switch (s) {
    case Skill::Pick: return "pick";
    case Skill::MoveNear: return "move_near";
    case Skill::Knock: return "knock";
  }
  return "?";
}

enum class Split { Train, Heldout };

struct TaskSpec {
  int id = -1;
  Skill skill = Skill::Pick;
  std::vector<int> targets;  // object type ids; 1 for Pick/Knock, 2 for MoveNear
  Split split = Split::Train;

  std::string name() const;
};

enum class ContextKind { ImageMask, Embedding };

// Episode-constant conditioning input. Frozen at reset.
struct TaskContext {
  ContextKind kind = ContextKind::ImageMask;
  GridImage first_frame;  // ImageMask: the t=0 visual grid
  GridImage overlay;      // ImageMask: one channel, skill-coded squares
  int task_index = -1;    // Embedding: row into the learned table
};

// One environment step; the unit of replay.
struct Transition {
  Observation s;
  Action a = Action::Zero();
  double r = 0.0;  // sparse binary
  Observation s_next;
  bool done = false;
  TaskContext context;
  int task_id = -1;
};

}  // namespace piqt
