#pragma once

#include "piqt/layers.hpp"
#include "piqt/types.hpp"

#include <json.hpp>

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace piqt {

// ---------------------------------------------------------------------------
// Flat parameter vector with a named-block layout.
// ---------------------------------------------------------------------------

struct Block {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index size() const { return rows * cols; }
};

struct Layout {
  std::vector<Block> blocks;
  Eigen::Index total = 0;

  const Block &at(std::string_view name) const;
  bool has(std::string_view name) const;
  void add(std::string name, Eigen::Index rows, Eigen::Index cols);
};

struct ParameterSet {
  std::shared_ptr<const Layout> layout;
  Eigen::VectorXd values;
  std::uint64_t version = 0;
};

inline Eigen::Map<const Eigen::MatrixXd> view(const Eigen::VectorXd &v, const Block &b) {
  return {v.data() + b.offset, b.rows, b.cols};
}
inline Eigen::Map<Eigen::MatrixXd> view(Eigen::VectorXd &v, const Block &b) {
  return {v.data() + b.offset, b.rows, b.cols};
}

// ---------------------------------------------------------------------------
// Lagged copies of the parameters: an exponential average and a periodic
// snapshot. Neither is ever touched by gradients.
// ---------------------------------------------------------------------------

struct LaggedParams {
  Eigen::VectorXd theta1;  // exponentially averaged
  Eigen::VectorXd theta2;  // periodic snapshot
  double tau = 0.005;
  std::int64_t period = 500;
  std::uint64_t source_version = 0;  // version of the theta last folded in
};

LaggedParams make_lagged(const ParameterSet &theta, double tau = 0.005, std::int64_t period = 500);

// theta1 <- (1-tau) theta1 + tau theta every call; theta2 <- theta when
// step % period == 0. Steps are 1-based.
void lag_update(const ParameterSet &theta, LaggedParams &lagged, std::int64_t step);

// ---------------------------------------------------------------------------
// Network definition.
// ---------------------------------------------------------------------------

enum class EncoderMode { Flat, ConvTiny };

struct NetworkConfig {
  EncoderMode encoder = EncoderMode::Flat;
  ContextKind context = ContextKind::ImageMask;
  int grid_side = 16;
  int obs_channels = 3;
  int embed_dim = 128;                    // d_e
  std::vector<int> q_hidden = {64, 64};
  std::vector<int> pi_hidden = {128, 128};
  int z_dim = 64;
  int task_embed_dim = 16;                 // Embedding contexts
  int task_count = 1;                      // embedding table rows needed
  int conv_channels1 = 8;
  int conv_channels2 = 16;
  bool pi_heads = true;  // false = baseline mode, no forward/backward heads

  int vis_channels() const {
    return obs_channels + (context == ContextKind::ImageMask ? obs_channels + 1 : 0);
  }
  Eigen::Index vis_dim() const {
    return static_cast<Eigen::Index>(grid_side) * grid_side * vis_channels();
  }
  int cond_dim() const {
    return kActionDim + kProprioDim + (context == ContextKind::Embedding ? task_embed_dim : 0);
  }
};

void to_json(nlohmann::json &j, const NetworkConfig &c);
void from_json(const nlohmann::json &j, NetworkConfig &c);

inline constexpr double kQClampEps = 1e-6;

// Caches keep whatever the matching backward pass needs.
struct VisCache {
  Eigen::MatrixXd input;
  Eigen::MatrixXd patches1, pre1, act1, patches2, pre2, act2;  // conv path
  Eigen::MatrixXd pre;                                         // pre-relu of the output linear
};

struct CondCache {
  Eigen::MatrixXd cond_in;
  std::vector<int> task_index;
};

struct MlpCache {
  Eigen::MatrixXd input;
  std::vector<Eigen::MatrixXd> pre;   // per hidden layer
  std::vector<Eigen::MatrixXd> post;
  Eigen::MatrixXd out;                // final linear output
  Eigen::VectorXd norms;              // mu heads only
  Eigen::MatrixXd mu;                 // mu heads only
  Eigen::VectorXd q;                  // q head only (clamped)
};

class Network {
 public:
  explicit Network(NetworkConfig cfg);

  const NetworkConfig &config() const { return cfg_; }
  const std::shared_ptr<const Layout> &layout() const { return layout_; }

  // Uniform fan-in weight init, zero biases.
  ParameterSet init_params(std::uint64_t seed) const;

  // Stacks observation channels (plus image-context channels) into a column.
  void fill_vis_column(const Observation &obs, const TaskContext &ctx,
                       Eigen::Ref<Eigen::VectorXd> out) const;

  // --- forward, one item per column ---
  Eigen::MatrixXd visual_features(const Eigen::VectorXd &theta, const Eigen::MatrixXd &vis,
                                  VisCache *cache = nullptr) const;
  Eigen::MatrixXd encode(const Eigen::VectorXd &theta, const Eigen::MatrixXd &vis_feat,
                         const Eigen::MatrixXd &actions, const Eigen::MatrixXd &proprio,
                         const std::vector<int> &task_index, CondCache *cache = nullptr) const;
  Eigen::VectorXd q_values(const Eigen::VectorXd &theta, const Eigen::MatrixXd &emb,
                           MlpCache *cache = nullptr) const;
  Eigen::MatrixXd forward_mu(const Eigen::VectorXd &theta, const Eigen::MatrixXd &emb,
                             MlpCache *cache = nullptr) const;
  Eigen::MatrixXd backward_mu(const Eigen::VectorXd &theta, const Eigen::MatrixXd &lagged_emb,
                              const Eigen::VectorXd &rewards, MlpCache *cache = nullptr) const;

  // --- backward; all accumulate into `grad` (layout of theta) ---
  void visual_features_backward(const Eigen::VectorXd &theta, const VisCache &cache,
                                const Eigen::MatrixXd &dfeat, Eigen::VectorXd &grad) const;
  // Returns dfeat for the visual trunk. Accumulates the conditioning blocks
  // (and the task table for Embedding contexts).
  Eigen::MatrixXd encode_backward(const Eigen::VectorXd &theta, const CondCache &cache,
                                  const Eigen::MatrixXd &demb, Eigen::VectorXd &grad) const;
  Eigen::MatrixXd q_values_backward(const Eigen::VectorXd &theta, const MlpCache &cache,
                                    const Eigen::VectorXd &dq, Eigen::VectorXd &grad) const;
  Eigen::MatrixXd forward_mu_backward(const Eigen::VectorXd &theta, const MlpCache &cache,
                                      const Eigen::MatrixXd &dmu, Eigen::VectorXd &grad) const;
  // The lagged trunk is frozen, so no input gradient is produced.
  void backward_mu_backward(const Eigen::VectorXd &theta, const MlpCache &cache,
                            const Eigen::MatrixXd &dmu, Eigen::VectorXd &grad) const;

 private:
  Eigen::MatrixXd mlp_forward(const Eigen::VectorXd &theta, const std::string &prefix,
                              int n_hidden, const Eigen::MatrixXd &input, MlpCache *cache) const;
  Eigen::MatrixXd mlp_backward(const Eigen::VectorXd &theta, const std::string &prefix,
                               int n_hidden, const MlpCache &cache, const Eigen::MatrixXd &dout,
                               Eigen::VectorXd &grad) const;

  NetworkConfig cfg_;
  std::shared_ptr<const Layout> layout_;
  nn::ConvShape conv1_, conv2_;
};

// ---------------------------------------------------------------------------
// Checkpoint file: "PIQT" magic, little-endian header with a JSON text block
// (layout table and metadata), parameter count, then raw 64-bit reals for
// theta, theta1, theta2, followed by optional sections.
// ---------------------------------------------------------------------------

struct CheckpointContents {
  NetworkConfig net;
  ParameterSet theta;
  Eigen::VectorXd theta1;
  Eigen::VectorXd theta2;
  Eigen::VectorXd momentum;  // size 0 = absent
  nlohmann::json meta;       // free-form extras (run config echo, rng, counters)
  std::string replay_blob;   // opaque section, empty = absent
};

void save_checkpoint(const std::string &path, const CheckpointContents &c);
CheckpointContents load_checkpoint(const std::string &path);

}  // namespace piqt
