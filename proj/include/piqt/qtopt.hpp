#pragma once

#include "piqt/ceb.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace piqt {

// ---------------------------------------------------------------------------
// Cross-entropy method over the 4-d action box.
// ---------------------------------------------------------------------------

struct CemConfig {
  int samples = 64;
  int elites = 6;
  int iterations = 3;
  double init_sigma = 0.5;
  double sigma_floor = 0.01;
  Action lo = Action::Constant(-1.0);
  Action hi = Action::Constant(1.0);
};

// Iteratively samples candidates from a diagonal Gaussian clipped to the
// bounds, refits mean and sigma on the top `elites` by score (ties broken by
// lower sample index), and returns the final mean clipped to the bounds.
// `score` maps a 4 x N candidate matrix to an N-vector; deterministic for a
// fixed RNG state.
template <class Scorer>
Action cem_select_action(Scorer &&score, const CemConfig &cfg, std::mt19937_64 &rng) {
  if (cfg.elites < 1 || cfg.elites >= cfg.samples)
    throw ConfigError("CEM needs 1 <= elites < samples");
  if (cfg.iterations < 1) throw ConfigError("CEM needs at least one iteration");
  for (int d = 0; d < kActionDim; ++d)
    if (!(cfg.lo[d] <= cfg.hi[d]) || !std::isfinite(cfg.lo[d]) || !std::isfinite(cfg.hi[d]))
      throw ConfigError("CEM action bounds must be finite with lo <= hi");

  Action mean = 0.5 * (cfg.lo + cfg.hi);
  Action sigma = Action::Constant(cfg.init_sigma);
  std::normal_distribution<double> gauss(0.0, 1.0);

  Eigen::MatrixXd candidates(kActionDim, cfg.samples);
  std::vector<int> order(cfg.samples);
  for (int it = 0; it < cfg.iterations; ++it) {
    for (int j = 0; j < cfg.samples; ++j)
      for (int d = 0; d < kActionDim; ++d)
        candidates(d, j) =
            std::min(cfg.hi[d], std::max(cfg.lo[d], mean[d] + sigma[d] * gauss(rng)));

    const Eigen::VectorXd scores = score(candidates);
    if (scores.size() != cfg.samples) throw UsageError("CEM scorer returned a wrong-sized batch");

    for (int j = 0; j < cfg.samples; ++j) order[j] = j;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return a < b;
    });

    mean.setZero();
    for (int e = 0; e < cfg.elites; ++e) mean += candidates.col(order[e]);
    mean /= static_cast<double>(cfg.elites);
    Action var = Action::Zero();
    for (int e = 0; e < cfg.elites; ++e)
      var += (candidates.col(order[e]) - mean).cwiseAbs2();
    sigma = (var / static_cast<double>(cfg.elites)).cwiseSqrt().cwiseMax(cfg.sigma_floor);
  }
  return mean.cwiseMax(cfg.lo).cwiseMin(cfg.hi);
}

// ---------------------------------------------------------------------------
// Bellman machinery.
// ---------------------------------------------------------------------------

// A replay transition plus everything the learner needs: the Double-DQN target
// value, the CEM-optimal next action, and which lagged version labeled it.
struct LabeledSample {
  Transition t;
  double q_target = 0.0;
  Action a_next = Action::Zero();
  std::uint64_t target_version = 0;
};

// Scores candidate actions at one state whose visual features were computed
// once; only the conditioning projection and Q head run per candidate.
Eigen::VectorXd q_candidates(const Network &net, const Eigen::VectorXd &params,
                             const Eigen::MatrixXd &vis_feat, const Eigen::Vector4d &proprio,
                             int task_index, const Eigen::MatrixXd &actions);

struct BellmanResult {
  double q_target = 0.0;
  Action a_next = Action::Zero();
  double v_next = 0.0;  // min over the two target evaluations at a_next
  std::uint64_t target_version = 0;
};

// a' = CEM argmax of Q_theta1bar at s'; V = min(Q_theta1bar, Q_theta2bar) at
// (s', a'); Q_T = clip(r + gamma V, 0, 1), or exactly r when done. a' is
// computed even for terminal transitions (the CEB future Y needs it).
BellmanResult bellman_target(const Network &net, const Transition &t, const LaggedParams &lagged,
                             double gamma, const CemConfig &cem, std::mt19937_64 &rng);

// Mean sigmoid cross-entropy -[T log q + (1-T) log(1-q)] over the batch.
double bellman_loss(const Eigen::VectorXd &q_pred, const Eigen::VectorXd &q_target);

// ---------------------------------------------------------------------------
// Combined objective.
// ---------------------------------------------------------------------------

struct QtoptConfig {
  double gamma = 0.9;
  double bellman_weight = 1.0;
  double ceb_weight = 0.01;
  bool aux_on = true;  // false = plain QT-Opt baseline, CEB skipped entirely
  CemConfig cem;
  CebConfig ceb;
};

struct LossOutput {
  double total = 0.0;
  double bellman = 0.0;
  double ceb = 0.0;       // unweighted CEB loss (0 when the auxiliary is off)
  double infonce = 0.0;
  double residual = 0.0;
  double td_error_mean = 0.0;
};

// total = bellman_weight * bellman + ceb_weight * ceb. Gradients accumulate
// into `grad` with the same weights applied. Throws TrainingError if the loss
// goes non-finite and UsageError on mixed-version batches.
LossOutput combined_loss(const Network &net, const std::vector<LabeledSample> &batch,
                         const QtoptConfig &cfg, const Eigen::VectorXd &theta,
                         const LaggedParams &lagged, std::mt19937_64 *rng = nullptr,
                         Eigen::VectorXd *grad = nullptr);

}  // namespace piqt
